//! Adversarial, regularization, shift and image-matching objectives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::{Discriminator, Generator, SynthInputs};
use crate::nn::{randn, Params, Scope};
use crate::periodic_ops::{PadMode, Shift2D};
use crate::render::downsample_image_graph;
use crate::tensor::{Real, Tensor};

/// Mean of `softplus(-logit)`.
pub fn g_nonsat_loss<T: Real>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let n = g.neg(fake_logits);
    let sp = g.softplus(n);
    g.mean(sp)
}

/// `mean softplus(-real) + mean softplus(fake)`.
pub fn d_logistic_loss<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let n = g.neg(real_logits);
    let a = g.softplus(n);
    let a = g.mean(a);
    let b = g.softplus(fake_logits);
    let b = g.mean(b);
    g.add(a, b)
}

/// Scalar helper used by tests and reports: `softplus(x)` in `f64`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// R1

/// Relative input step for the R1 Hessian-vector product.
fn r1_fd_scale<T: Real>() -> f64 {
    if T::DTYPE == "f64" {
        1e-5
    } else {
        1e-2
    }
}

/// `(gamma / 2) E ||grad_x D(x)||^2` for an arbitrary logit builder.
///
/// `d` maps an `(N, ...)` input var to per-sample logits; the batch mean is
/// over the leading axis.
pub fn r1_penalty_with<T: Real>(
    d: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    gamma: f64,
) -> Result<f64> {
    let n = x.shape().first().copied().unwrap_or(1).max(1);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let logits = d(&mut g, xv)?;
    let s = g.sum(logits);
    let grad = match g.backward(s)?.take(xv) {
        Some(t) => t,
        None => Tensor::zeros(x.shape()),
    };
    let sq: f64 = grad.data().iter().map(|v| v.f64() * v.f64()).sum();
    Ok(0.5 * gamma * sq / n as f64)
}

/// R1 value and its gradient with respect to the discriminator parameters.
pub struct R1Output<T> {
    pub value: f64,
    pub grads: Vec<Tensor<T>>,
}

/// R1 on real maps for a [`Discriminator`].
///
/// The parameter gradient uses a central finite difference of the parameter
/// gradient along the input gradient `v = grad_x S`:
/// `grad_theta R1 = (gamma / N) [grad_theta S(x + eps v) - grad_theta S(x - eps v)] / (2 eps)`
/// with `S` the summed logits, which avoids differentiating through the
/// backward pass.
pub fn r1_penalty<T: Real>(
    d: &Discriminator,
    params: &Params<T>,
    reals: &Tensor<T>,
    pattern: Option<&Tensor<T>>,
    gamma: f64,
    with_grads: bool,
) -> Result<R1Output<T>> {
    let n = reals.shape()[0].max(1);
    let logits_sum = |x: &Tensor<T>, trainable: bool| -> Result<(Graph<T>, Var, Var, Scope<'_, T>)> {
        let mut g = Graph::new();
        let mut s = Scope::new(params, trainable);
        let xv = if trainable { g.constant(x.clone()) } else { g.param(x.clone()) };
        let p = pattern.map(|p| g.constant(p.clone()));
        let y = d.forward_graph(&mut g, &mut s, xv, p)?;
        let sum = g.sum(y);
        Ok((g, xv, sum, s))
    };
    let (g, xv, sum, _) = logits_sum(reals, false)?;
    let v = g.backward(sum)?.take(xv).unwrap_or_else(|| Tensor::zeros(reals.shape()));
    let sq: f64 = v.data().iter().map(|a| a.f64() * a.f64()).sum();
    let value = 0.5 * gamma * sq / n as f64;
    if !with_grads {
        return Ok(R1Output { value, grads: Vec::new() });
    }
    let rms = (sq / v.numel().max(1) as f64).sqrt();
    if rms == 0.0 {
        return Ok(R1Output { value, grads: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() });
    }
    let eps = r1_fd_scale::<T>() / rms;
    let grad_at = |sign: f64| -> Result<Vec<Tensor<T>>> {
        let x = reals.zip_map(&v, |a, b| a + T::c(sign * eps) * b);
        let (g, _, sum, s) = logits_sum(&x, true)?;
        let mut gr = g.backward(sum)?;
        Ok(s.collect(&mut gr))
    };
    let plus = grad_at(1.0)?;
    let minus = grad_at(-1.0)?;
    let scale = T::c(gamma / n as f64 / (2.0 * eps));
    let grads = plus.iter().zip(&minus).map(|(a, b)| a.zip_map(b, |x, y| (x - y) * scale)).collect();
    Ok(R1Output { value, grads })
}

// ---------------------------------------------------------------------------
// shift loss

/// `mean |T(G(p, w, xi)) - G(T(p), w, T(xi))|` on the tape.
///
/// Noise maps are shifted by `round(shift * r / domain)` at resolution `r`.
pub fn shift_loss_graph<T: Real>(
    gen: &Generator,
    g: &mut Graph<T>,
    s: &mut Scope<T>,
    ws: &[Var],
    noise: &[Var],
    pattern: Option<Var>,
    shift: Shift2D,
) -> Result<Var> {
    if !gen.cfg.conditional {
        return Err(Error::contract("shift loss is undefined for unconditional generators"));
    }
    let p = pattern.ok_or(Error::PatternRequired)?;
    let domain = g.shape(p)[3];
    let a = gen.synthesis_graph(g, s, &SynthInputs { ws: ws.to_vec(), noise: noise.to_vec(), pattern: Some(p) })?;
    let a = g.roll(a, shift.dy, shift.dx);
    let pt = g.roll(p, shift.dy, shift.dx);
    let nt = noise
        .iter()
        .map(|&n| {
            let r = g.shape(n)[3];
            let sr = shift.rescaled(r as f64 / domain as f64);
            g.roll(n, sr.dy, sr.dx)
        })
        .collect();
    let b = gen.synthesis_graph(g, s, &SynthInputs { ws: ws.to_vec(), noise: nt, pattern: Some(pt) })?;
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Eager shift loss for one bundle.
pub fn shift_loss(
    gen: &Generator,
    pattern: Option<&crate::material::ConditionPattern>,
    bundle: &crate::networks::LatentBundle,
    shift: Shift2D,
) -> Result<f64> {
    if !gen.cfg.conditional {
        return Err(Error::contract("shift loss is undefined for unconditional generators"));
    }
    let p = pattern.ok_or(Error::PatternRequired)?;
    let mut g: Graph<f32> = Graph::new();
    let mut s = Scope::new(&gen.params, false);
    let wp = g.constant(bundle.w_plus.clone());
    let ws = (0..gen.cfg.num_ws()).map(|i| g.narrow(wp, 0, i, 1)).collect::<Result<Vec<_>>>()?;
    let noise: Vec<Var> = bundle.noise.iter().map(|n| g.constant(n.clone())).collect();
    let pv = g.constant(p.to_batch());
    let l = shift_loss_graph(gen, &mut g, &mut s, &ws, &noise, Some(pv), shift)?;
    Ok(g.value(l).item().f64())
}

// ---------------------------------------------------------------------------
// Gram statistics

/// `(N, C, H, W)` features to `(N, C, C)` Grams, normalized by `C H W`.
pub fn gram_graph<T: Real>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::contract(format!("features must be (N, C, H, W), got {s:?}")));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = g.reshape(f, &[n, c, hw])?;
    let gm = g.matmul(flat, flat, false, true)?;
    Ok(g.scale(gm, 1.0 / (c * hw) as f64))
}

/// Eager Gram of `(C, H, W)` or `(1, C, H, W)` features, returned as `(C, C)`.
pub fn gram_matrix<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::contract(format!("features must be (C, H, W), got {s:?}"))),
    };
    let mut g = Graph::new();
    let v = g.constant(f.clone().reshape(&[1, c, h, w])?);
    let gm = gram_graph(&mut g, v)?;
    g.value(gm).clone().reshape(&[c, c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Output channels of the five pyramid levels.
    pub widths: [usize; 5],
    pub convs_per_level: usize,
    pub padding: PadMode,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32, 32, 32], convs_per_level: 1, padding: PadMode::Circular, seed: 0x5eed }
    }
}

/// Frozen convolutional pyramid with one feature tap per level.
///
/// Pooling is dense: level `k > 0` averages each pixel with its neighbours
/// `2^(k-1)` pixels away (an a-trous 2x2 box) instead of decimating, so every
/// tap commutes with all integer cyclic shifts under circular padding. Each
/// level then applies `convs_per_level` 3x3 convolutions with ReLU; the tap is
/// the first ReLU output of the level.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub cfg: ExtractorConfig,
    pub params: Params<f32>,
    /// `(weight, bias)` ids per convolution, level-major.
    layers: Vec<Vec<(crate::nn::ParamId, crate::nn::ParamId)>>,
}

impl FeatureExtractor {
    pub fn seeded(cfg: ExtractorConfig) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::with_rng(cfg, &mut rng)
    }

    fn with_rng(cfg: ExtractorConfig, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        let mut layers = Vec::new();
        let mut cin = 3;
        for (k, &w) in cfg.widths.iter().enumerate() {
            let mut lv = Vec::new();
            for j in 0..cfg.convs_per_level.max(1) {
                // He initialization keeps activations from vanishing with depth
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let wid = params.add(format!("conv{}_{}.weight", k + 1, j + 1), randn(&[w, cin, 3, 3], std, rng));
                let bid = params.add(format!("conv{}_{}.bias", k + 1, j + 1), Tensor::zeros(&[w]));
                lv.push((wid, bid));
                cin = w;
            }
            layers.push(lv);
        }
        Self { cfg, params, layers }
    }

    /// Replaces the seeded weights with values from a tensor archive; names
    /// follow `conv{level}_{index}.weight|bias`.
    pub fn load_weights(&mut self, archive: &crate::archive::Archive) -> Result<()> {
        self.params.load_named(|name| archive.tensor(name))
    }

    /// Five tapped feature maps of an `(N, 3, H, W)` image in `[0, 1]`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, img: Var) -> Result<Vec<Var>> {
        let sh = g.shape(img).to_vec();
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::contract(format!("extractor input must be (N, 3, H, W), got {sh:?}")));
        }
        let x = g.add_scalar(img, -0.5);
        let mut x = g.scale(x, 2.0);
        let mut taps = Vec::with_capacity(5);
        for (k, lv) in self.layers.iter().enumerate() {
            if k > 0 {
                x = atrous_pool(g, x, 1 << (k - 1), self.cfg.padding);
            }
            for (j, &(wid, bid)) in lv.iter().enumerate() {
                let w = s.var(g, wid);
                x = g.conv2d(x, w, self.cfg.padding)?;
                x = crate::nn::add_channel_bias(g, s, x, bid, 1.0)?;
                x = g.relu(x);
                if j == 0 {
                    taps.push(x);
                }
            }
        }
        Ok(taps)
    }

    /// Gram matrices `(N, C, C)` of every tap.
    pub fn grams<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, img: Var) -> Result<Vec<Var>> {
        self.features(g, s, img)?.into_iter().map(|f| gram_graph(g, f)).collect()
    }

    /// Constant Grams of an image, for reuse as a fixed target.
    pub fn target_grams<T: Real>(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let params = self.params.cast::<T>();
        let mut g = Graph::new();
        let mut s = Scope::new(&params, false);
        let v = g.constant(img.clone());
        let gr = self.grams(&mut g, &mut s, v)?;
        Ok(gr.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// `y[i, j] = mean of x[i + a d, j + b d]` for `a, b` in `{0, 1}`; axes shorter
/// than `d + 1` are left alone.
fn atrous_pool<T: Real>(g: &mut Graph<T>, x: Var, d: usize, pad: PadMode) -> Var {
    use crate::periodic_ops::Axis;
    let mut taps = vec![0.0; d + 1];
    taps[0] = 0.5;
    taps[d] = 0.5;
    let sh = g.shape(x).to_vec();
    let mut y = x;
    if sh[2] > d {
        y = g.filter(y, &taps, 0, Axis::Height, pad);
    }
    if sh[3] > d {
        y = g.filter(y, &taps, 0, Axis::Width, pad);
    }
    y
}

/// `sum_taps mean((G_a - G_b)^2)` against constant target Grams.
pub fn style_loss_to_grams<T: Real>(g: &mut Graph<T>, grams: &[Var], target: &[Tensor<T>]) -> Result<Var> {
    if grams.len() != target.len() {
        return Err(Error::contract("tap count mismatch"));
    }
    let mut total: Option<Var> = None;
    for (&a, b) in grams.iter().zip(target) {
        let b = g.constant(b.clone());
        let d = g.sub(a, b)?;
        let d = g.square(d);
        let m = g.mean(d);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::contract("extractor has no taps"))
}

/// Style loss between two `(N, 3, H, W)` images that may differ in size.
pub fn style_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ext: &FeatureExtractor) -> Result<f64> {
    let target = ext.target_grams(b)?;
    let params = ext.params.cast::<T>();
    let mut g = Graph::new();
    let mut s = Scope::new(&params, false);
    let av = g.constant(a.clone());
    let ga = ext.grams(&mut g, &mut s, av)?;
    let l = style_loss_to_grams(&mut g, &ga, &target)?;
    Ok(g.value(l).item().f64())
}

// ---------------------------------------------------------------------------
// low-resolution L1

pub const L1_RESOLUTION: usize = 16;

/// `mean |down(a) - down(b)|` with both images box-pooled to `res x res`.
/// `b` is a constant target, already pooled or at full size.
pub fn down_l1_graph<T: Real>(g: &mut Graph<T>, a: Var, b: &Tensor<T>, res: usize) -> Result<Var> {
    let da = downsample_image_graph(g, a, res)?;
    let db = crate::render::downsample_image(b, res)?;
    let db = g.constant(db);
    let d = g.sub(da, db)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// L1 between 16x16 box-downsampled images.
pub fn down16_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let da = crate::render::downsample_image(a, L1_RESOLUTION)?;
    let db = crate::render::downsample_image(b, L1_RESOLUTION)?;
    if da.shape() != db.shape() {
        return Err(Error::contract("images differ in batch or channel count"));
    }
    Ok(da.mean_abs_diff(&db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{ConditionPattern, MaterialClass, MaterialClassSpec};
    use crate::networks::{DiscriminatorConfig, GeneratorConfig};
    use crate::periodic_ops::{cyclic_translate, PeriodicTensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(f: impl Fn(&mut Graph<f64>, Var) -> Var, logits: &[f64]) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[logits.len()], logits.to_vec()).unwrap());
        let l = f(&mut g, v);
        g.value(l).item()
    }

    #[test]
    fn generator_loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((scalar_loss(|g, v| g_nonsat_loss(g, v), &[0.0]) - ln2).abs() < 1e-12);
        assert!(scalar_loss(|g, v| g_nonsat_loss(g, v), &[50.0]) < 1e-20);
        assert!((scalar_loss(|g, v| g_nonsat_loss(g, v), &[-3.0]) - 3.048_587_351).abs() < 1e-8);
    }

    #[test]
    fn discriminator_loss_values() {
        let d = |r: f64, f: f64| {
            let mut g: Graph<f64> = Graph::new();
            let a = g.constant(Tensor::scalar(r));
            let b = g.constant(Tensor::scalar(f));
            let l = d_logistic_loss(&mut g, a, b).unwrap();
            g.value(l).item()
        };
        assert!((d(0.0, 0.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(d(40.0, -40.0) < 1e-15);
        assert!((d(1.0, -1.0) - 2.0 * softplus(-1.0)).abs() < 1e-12);
        assert!((d(1.0, -1.0) - 0.626_523_375).abs() < 1e-8);
    }

    #[test]
    fn r1_of_constant_and_linear_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = randn(&[3, 8], 1.0, &mut rng);
        let c = r1_penalty_with(
            |g, x| {
                let z = g.scale(x, 0.0);
                g.sum_axes(z, &[1])
            },
            &x,
            1.0,
        )
        .unwrap();
        assert_eq!(c, 0.0);
        let w: Tensor<f64> = randn(&[8, 1], 1.0, &mut rng);
        let wn: f64 = w.data().iter().map(|v| v * v).sum();
        for gamma in [1.0, 10.0] {
            let v = r1_penalty_with(
                |g, x| {
                    let wv = g.constant(w.clone());
                    g.matmul(x, wv, false, false)
                },
                &x,
                gamma,
            )
            .unwrap();
            assert!((v - 0.5 * gamma * wn).abs() < 1e-10 * wn);
        }
    }

    #[test]
    fn r1_matches_finite_difference_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = randn(&[2, 5], 1.0, &mut rng);
        let w1: Tensor<f64> = randn(&[5, 4], 1.0, &mut rng);
        let w2: Tensor<f64> = randn(&[4, 1], 1.0, &mut rng);
        let critic = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
            let a = g.constant(w1.clone());
            let h = g.matmul(x, a, false, false)?;
            let h = g.tanh(h);
            let b = g.constant(w2.clone());
            g.matmul(h, b, false, false)
        };
        let v = r1_penalty_with(critic, &x, 2.0).unwrap();
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = critic(&mut g, xv).unwrap();
            let y = g.sum(y);
            g.value(y).item()
        };
        let mut sq = 0.0;
        let h = 1e-5;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let d = (eval(&p) - eval(&m)) / (2.0 * h);
            sq += d * d;
        }
        let fd = 0.5 * 2.0 * sq / 2.0;
        assert!((v - fd).abs() <= 1e-4 * fd.max(1e-12));
    }

    #[test]
    fn r1_parameter_gradient_matches_double_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gcfg = GeneratorConfig::for_class(&MaterialClassSpec::preset(MaterialClass::Stone), 8);
        gcfg.channel_base = 16;
        gcfg.channel_max = 2;
        let d = Discriminator::new(DiscriminatorConfig::for_generator(&gcfg), &mut rng).unwrap();
        let params = d.params.cast::<f64>();
        let x: Tensor<f64> = Tensor::from_fn(&[2, 5, 8, 8], |_| rng.gen::<f64>());
        let out = r1_penalty(&d, &params, &x, None, 1.0, true).unwrap();
        // probe a few scalar parameters with plain finite differences of the value
        let mut probes = 0;
        let mut worst = 0.0f64;
        for (pi, t) in params.tensors().iter().enumerate() {
            if t.numel() == 0 {
                continue;
            }
            let k = (pi * 7) % t.numel();
            let h = 1e-4;
            let mut pp = params.clone();
            pp.tensors_mut()[pi].data_mut()[k] += h;
            let mut pm = params.clone();
            pm.tensors_mut()[pi].data_mut()[k] -= h;
            let vp = r1_penalty(&d, &pp, &x, None, 1.0, false).unwrap().value;
            let vm = r1_penalty(&d, &pm, &x, None, 1.0, false).unwrap().value;
            let fd = (vp - vm) / (2.0 * h);
            let a = out.grads[pi].data()[k];
            let scale = fd.abs().max(a.abs()).max(1e-3);
            worst = worst.max((fd - a).abs() / scale);
            probes += 1;
        }
        assert!(probes > 5);
        assert!(worst < 0.05, "worst relative error {worst}");
    }

    fn small_gen(res: usize, seed: u64) -> Generator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = GeneratorConfig::for_class(&MaterialClassSpec::preset(MaterialClass::Tile), res);
        c.channel_base = 256;
        c.channel_max = 16;
        c.latent_dim = 16;
        c.style_dim = 16;
        Generator::new(c, &mut rng).unwrap()
    }

    #[test]
    fn shift_loss_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = small_gen(64, 4);
        let p = ConditionPattern::new(Tensor::from_fn(&[1, 64, 64], |_| rng.gen::<f32>())).unwrap();
        let b = gen.bundle_from_z(gen.sample_z(&mut rng), 64, &mut rng).unwrap();
        assert_eq!(shift_loss(&gen, Some(&p), &b, Shift2D::ZERO).unwrap(), 0.0);
        assert!(shift_loss(&gen, Some(&p), &b, Shift2D::new(16, 16)).unwrap() <= 1e-4);
        let s = Shift2D::new(5, -3);
        let v = shift_loss(&gen, Some(&p), &b, s).unwrap();
        assert!(v > 0.0);
        // two-pass brute force
        let a = gen.synthesize(&b, Some(&p)).unwrap();
        let a = cyclic_translate(&PeriodicTensor::new(a.to_batch()).unwrap(), s);
        let pt = cyclic_translate(&PeriodicTensor::new(p.to_batch()).unwrap(), s).into_tensor();
        let pt = ConditionPattern::new(pt.reshape(&[1, 64, 64]).unwrap()).unwrap();
        let bt = crate::networks::LatentBundle { noise: b.shifted_noise(s, 64), ..b.clone() };
        let c = gen.synthesize(&bt, Some(&pt)).unwrap();
        let brute = a.tensor().mean_abs_diff(&c.to_batch());
        assert!((v - brute).abs() <= 1e-6, "{v} vs {brute}");
    }

    #[test]
    fn shift_loss_rejects_unconditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = GeneratorConfig::for_class(&MaterialClassSpec::preset(MaterialClass::Stone), 16);
        c.channel_max = 8;
        let gen = Generator::new(c, &mut rng).unwrap();
        let b = gen.bundle_from_z(gen.sample_z(&mut rng), 16, &mut rng).unwrap();
        assert!(matches!(shift_loss(&gen, None, &b, Shift2D::new(1, 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn gram_closed_forms() {
        let c = 3;
        let f = Tensor::full(&[c, 4, 4], 0.7f64);
        let gm = gram_matrix(&f).unwrap();
        // F F^T / (C H W) with constant rows: c^2 * HW / (C HW)
        for v in gm.data() {
            assert!((v - 0.49 / c as f64).abs() < 1e-12);
        }
        let z = gram_matrix(&Tensor::<f64>::zeros(&[2, 4, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_is_symmetric_and_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f: Tensor<f64> = randn(&[1, 4, 8, 8], 1.0, &mut rng);
        let a = gram_matrix(&f).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.data()[i * 4 + j], a.data()[j * 4 + i]);
            }
        }
        let ft = cyclic_translate(&PeriodicTensor::new(f).unwrap(), Shift2D::new(3, 5));
        let b = gram_matrix(ft.tensor()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn style_loss_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ext = FeatureExtractor::seeded(ExtractorConfig::default());
        let a: Tensor<f64> = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen::<f64>());
        let b: Tensor<f64> = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen::<f64>());
        assert_eq!(style_loss(&a, &a, &ext).unwrap(), 0.0);
        let scale = style_loss(&a, &b, &ext).unwrap();
        assert!(scale > 0.0);
        for s in [Shift2D::new(7, -11), Shift2D::new(1, 0), Shift2D::new(-13, 29)] {
            let at = cyclic_translate(&PeriodicTensor::new(a.clone()).unwrap(), s);
            let v = style_loss(&a, at.tensor(), &ext).unwrap();
            assert!(v <= 1e-6 * scale, "{v} vs scale {scale}");
        }
    }

    #[test]
    fn style_loss_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ext = FeatureExtractor::seeded(ExtractorConfig::default());
        let a: Tensor<f64> = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen::<f64>());
        let b: Tensor<f64> = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen::<f64>());
        let got = style_loss(&a, &b, &ext).unwrap();

        // oracle: eager periodic ops, explicit Grams, explicit MSE
        use crate::periodic_ops::circular_conv2d;
        let pool = |x: &Tensor<f64>, d: usize| {
            let s = x.shape().to_vec();
            let (h, w) = (s[2], s[3]);
            Tensor::from_fn(&s, |f| {
                let (nc, i, j) = (f / (h * w), (f / w) % h, f % w);
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += x.data()[nc * h * w + ((i + a * d) % h) * w + (j + b * d) % w];
                    }
                }
                acc / 4.0
            })
        };
        let feats = |img: &Tensor<f64>| -> Vec<Tensor<f64>> {
            let mut x = img.map(|v| (v - 0.5) * 2.0);
            let mut out = Vec::new();
            for k in 0..5 {
                if k > 0 {
                    x = pool(&x, 1 << (k - 1));
                }
                let w = ext.params.by_name(&format!("conv{}_1.weight", k + 1)).unwrap().cast::<f64>();
                let bias = ext.params.by_name(&format!("conv{}_1.bias", k + 1)).unwrap().cast::<f64>();
                let y = circular_conv2d(&PeriodicTensor::new(x).unwrap(), &w, Some(bias.data())).unwrap();
                x = y.into_tensor().map(|v| v.max(0.0));
                out.push(x.clone());
            }
            out
        };
        let (fa, fb) = (feats(&a), feats(&b));
        let mut expect = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let (ga, gb) = (gram_matrix(x).unwrap(), gram_matrix(y).unwrap());
            let n = ga.numel() as f64;
            expect += ga.data().iter().zip(gb.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n;
        }
        assert!((got - expect).abs() <= 1e-5 * expect.max(1e-12), "{got} vs {expect}");
    }

    #[test]
    fn down16_l1_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Tensor<f64> = Tensor::from_fn(&[1, 3, 64, 64], |_| rng.gen::<f64>());
        assert_eq!(down16_l1(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((down16_l1(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        let c: Tensor<f64> = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen::<f64>());
        let d: Tensor<f64> = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen::<f64>());
        let mut expect = 0.0;
        for ch in 0..3 {
            for bi in 0..16 {
                for bj in 0..16 {
                    let mut s = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            s += c.at4(0, ch, 2 * bi + i, 2 * bj + j) - d.at4(0, ch, 2 * bi + i, 2 * bj + j);
                        }
                    }
                    expect += (s / 4.0).abs();
                }
            }
        }
        expect /= 3.0 * 256.0;
        assert!((down16_l1(&c, &d).unwrap() - expect).abs() < 1e-12);
        assert!(down16_l1(&Tensor::<f64>::zeros(&[1, 3, 24, 24]), &Tensor::zeros(&[1, 3, 24, 24])).is_err());
    }
}
