//! Fitting `(w+, noise)` of a frozen generator so the rendered maps match one
//! flash photograph.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{down_l1_graph, style_loss_to_grams, ExtractorConfig, FeatureExtractor, L1_RESOLUTION};
use crate::material::{load_png, ConditionPattern, MaterialMaps};
use crate::networks::{Generator, LatentBundle, SynthInputs};
use crate::nn::Scope;
use crate::optim::{Adam, AdamConfig};
use crate::periodic_ops::Shift2D;
use crate::render::{render_graph, RenderSetup};
use crate::tensor::{Real, Tensor};

pub const INVERT_SCHEMA: &str = "tessera.invert/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSpec {
    pub schema: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub target: Option<PathBuf>,
    #[serde(default)]
    pub pattern: Option<PathBuf>,
    /// Use the EMA generator weights from the checkpoint.
    pub use_ema: bool,
    pub render: RenderSetup,
    pub iterations: usize,
    pub lr_w: f64,
    pub lr_noise: f64,
    /// Weight of the noise autocorrelation penalty; 0 disables it.
    pub noise_reg_weight: f64,
    /// Rescale every noise map to zero mean and unit variance after each step.
    pub normalize_noise: bool,
    pub style_weight: f64,
    pub l1_weight: f64,
    /// A fresh random translation on iterations `k` with
    /// `k % translation_cadence == translation_cadence - 1`; 0 disables.
    pub translation_cadence: usize,
    /// Side of the low-resolution L1 comparison.
    pub l1_resolution: usize,
    pub mean_w_samples: usize,
    pub seed: u64,
    /// Side of the target after crop and resize.
    pub target_size: usize,
    /// Generation domain; defaults to `target_size`.
    #[serde(default)]
    pub output_resolution: Option<usize>,
    pub restarts: usize,
    #[serde(default)]
    pub extractor: ExtractorConfig,
}

impl Default for InvertSpec {
    fn default() -> Self {
        Self {
            schema: INVERT_SCHEMA.into(),
            checkpoint: None,
            target: None,
            pattern: None,
            use_ema: true,
            render: RenderSetup::new(64),
            iterations: 600,
            lr_w: 0.02,
            lr_noise: 0.05,
            noise_reg_weight: 10.0,
            normalize_noise: false,
            style_weight: 1.0,
            l1_weight: 10.0,
            translation_cadence: 2,
            l1_resolution: L1_RESOLUTION,
            mean_w_samples: 10_000,
            seed: 0,
            target_size: 64,
            output_resolution: None,
            restarts: 1,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl InvertSpec {
    pub fn domain(&self) -> usize {
        self.output_resolution.unwrap_or(self.target_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != INVERT_SCHEMA {
            return Err(Error::Schema { expected: INVERT_SCHEMA.into(), found: self.schema.clone() });
        }
        self.render.validate()?;
        if self.target_size == 0 || !self.target_size.is_power_of_two() {
            return Err(Error::config("target_size", "must be a power of two"));
        }
        if self.l1_resolution == 0 || self.target_size % self.l1_resolution != 0 {
            return Err(Error::config("l1_resolution", format!("must divide the {}px target", self.target_size)));
        }
        let d = self.domain();
        if !d.is_power_of_two() || d < self.target_size {
            return Err(Error::config("output_resolution", "must be a power of two no smaller than the target"));
        }
        if self.iterations == 0 || self.restarts == 0 || self.mean_w_samples == 0 {
            return Err(Error::config("iterations", "iterations, restarts and mean_w_samples must be positive"));
        }
        if !(self.lr_w >= 0.0
            && self.lr_noise >= 0.0
            && self.noise_reg_weight >= 0.0
            && self.style_weight >= 0.0
            && self.l1_weight >= 0.0)
        {
            return Err(Error::config("lr_w", "learning rates and weights must be non-negative"));
        }
        Ok(())
    }

    pub fn shift_at(&self, iteration: usize) -> bool {
        let c = self.translation_cadence;
        c > 0 && iteration % c == c - 1
    }
}

/// Squared one-pixel cyclic autocorrelations of each `(1, 1, r, r)` noise map,
/// summed over a 2x average-pooling pyramid down to 8x8, and its gradient.
///
/// Optimized noise otherwise drifts into block patterns aligned with the
/// upsampling grid.
pub fn noise_regularizer<T: Real>(noise: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(noise.len());
    for n in noise {
        let s = n.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 || s[2] != s[3] || !s[2].is_power_of_two() {
            return Err(Error::contract(format!("noise maps must be (1, 1, r, r) with r a power of two, got {s:?}")));
        }
        let mut levels: Vec<Vec<f64>> = vec![n.data().iter().map(|v| v.f64()).collect()];
        let mut r = s[2];
        while r > 8 {
            let m = levels.last().unwrap();
            let h = r / 2;
            let mut p = vec![0.0; h * h];
            for i in 0..r {
                for j in 0..r {
                    p[(i / 2) * h + j / 2] += 0.25 * m[i * r + j];
                }
            }
            levels.push(p);
            r = h;
        }
        // backward from the coarsest level, pushing gradients through the pools
        let mut g_up: Option<Vec<f64>> = None;
        for m in levels.iter().rev() {
            let r = (m.len() as f64).sqrt() as usize;
            let nn = (r * r) as f64;
            let (mut cx, mut cy) = (0.0, 0.0);
            for i in 0..r {
                for j in 0..r {
                    cx += m[i * r + j] * m[i * r + (j + 1) % r];
                    cy += m[i * r + j] * m[((i + 1) % r) * r + j];
                }
            }
            cx /= nn;
            cy /= nn;
            total += cx * cx + cy * cy;
            let mut g = vec![0.0; r * r];
            for i in 0..r {
                for j in 0..r {
                    let (l, rt) = (m[i * r + (j + r - 1) % r], m[i * r + (j + 1) % r]);
                    let (u, d) = (m[((i + r - 1) % r) * r + j], m[((i + 1) % r) * r + j]);
                    g[i * r + j] = 2.0 * (cx * (l + rt) + cy * (u + d)) / nn;
                    if let Some(gc) = &g_up {
                        g[i * r + j] += 0.25 * gc[(i / 2) * (r / 2) + j / 2];
                    }
                }
            }
            g_up = Some(g);
        }
        let g = g_up.expect("at least one level");
        grads.push(Tensor::new(s, g.into_iter().map(T::c).collect())?);
    }
    Ok((total, grads))
}

/// Shifts and scales each noise map to zero mean and unit variance.
pub fn normalize_noise<T: Real>(noise: &mut [Tensor<T>]) {
    for n in noise {
        let k = n.numel() as f64;
        let mean = n.data().iter().map(|v| v.f64()).sum::<f64>() / k;
        let var = n.data().iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / k;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for v in n.data_mut() {
            *v = T::c((v.f64() - mean) * inv);
        }
    }
}

/// `w+` rows set to the mean mapped latent over `n` samples; noise standard
/// normal at every layer for a `domain` output.
pub fn init_u(gen: &Generator, n: usize, domain: usize, seed: u64) -> Result<LatentBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gen.mean_w(n, &mut rng)?;
    let nw = gen.cfg.num_ws();
    let w_plus = Tensor::new(&[nw, gen.cfg.style_dim], w.repeat(nw))?;
    let noise = gen.random_noise(domain, &mut rng)?;
    Ok(LatentBundle { z: None, w_plus, noise })
}

/// Fixed target: the image, its Gram matrices and its low-resolution copy.
pub struct InversionTarget<T: Real> {
    pub image: Tensor<T>,
    pub grams: Vec<Tensor<T>>,
    pub l1_resolution: usize,
}

impl<T: Real> InversionTarget<T> {
    /// `image` is `(1, 3, H, W)` in `[0, 1]`.
    pub fn new(image: Tensor<T>, ext: &FeatureExtractor, l1_resolution: usize) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::contract(format!("target must be (1, 3, H, W), got {s:?}")));
        }
        if l1_resolution == 0 || s[2] % l1_resolution != 0 || s[3] % l1_resolution != 0 {
            return Err(Error::contract(format!("{}x{} target is not divisible by {l1_resolution}", s[2], s[3])));
        }
        let grams = ext.target_grams(&image)?;
        Ok(Self { image, grams, l1_resolution })
    }
}

/// Loss weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub style: f64,
    pub l1: f64,
}

/// Scalar parts of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub style: f64,
    pub l1: f64,
}

/// `style * style_loss(render(T maps), target) + l1 * down_l1(render(T maps), target)`
/// on the tape, `T` being the optional cyclic translation. Maps are
/// `(1, C, D, D)`; the render uses `setup` at size `D`.
pub fn inversion_loss_graph<T: Real>(
    g: &mut Graph<T>,
    maps: Var,
    target: &InversionTarget<T>,
    setup: &RenderSetup,
    weights: LossWeights,
    shift: Option<Shift2D>,
    ext: &FeatureExtractor,
    ext_params: &crate::nn::Params<T>,
) -> Result<(Var, Var, Var)> {
    let d = g.shape(maps)[3];
    let maps = match shift {
        Some(s) => g.roll(maps, s.dy, s.dx),
        None => maps,
    };
    let setup = RenderSetup { image_size: d, ..setup.clone() };
    let img = render_graph(g, maps, &setup)?;
    let mut es = Scope::new(ext_params, false);
    let grams = ext.grams(g, &mut es, img)?;
    let style = style_loss_to_grams(g, &grams, &target.grams)?;
    let l1 = down_l1_graph(g, img, &target.image, target.l1_resolution)?;
    let a = g.scale(style, weights.style);
    let b = g.scale(l1, weights.l1);
    let total = g.add(a, b)?;
    Ok((total, style, l1))
}

/// Eager loss and its gradient with respect to `maps`.
pub fn inversion_loss<T: Real>(
    maps: &Tensor<T>,
    target: &InversionTarget<T>,
    setup: &RenderSetup,
    weights: LossWeights,
    shift: Option<Shift2D>,
    ext: &FeatureExtractor,
    with_grad: bool,
) -> Result<(LossParts, Option<Tensor<T>>)> {
    let params = ext.params.cast::<T>();
    let mut g = Graph::new();
    let m = if with_grad { g.param(maps.clone()) } else { g.constant(maps.clone()) };
    let (total, style, l1) = inversion_loss_graph(&mut g, m, target, setup, weights, shift, ext, &params)?;
    let parts = LossParts {
        total: g.value(total).item().f64(),
        style: g.value(style).item().f64(),
        l1: g.value(l1).item().f64(),
    };
    let grad = if with_grad {
        Some(g.backward(total)?.take(m).unwrap_or_else(|| Tensor::zeros(maps.shape())))
    } else {
        None
    };
    Ok((parts, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub restart: usize,
    pub iteration: usize,
    pub total: f64,
    pub style: f64,
    pub l1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<[i64; 2]>,
    /// Lowest total so far within this restart.
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub bundle: LatentBundle,
    pub maps: MaterialMaps,
    pub trajectory: Vec<TrajectoryPoint>,
    /// `(3, H, W)` render of `maps` at the generation domain.
    pub rerender: Tensor<f32>,
    /// Unshifted loss at initialization and at the returned iterate.
    pub initial: LossParts,
    pub final_loss: LossParts,
}

/// Center-crops to a square and box-resamples to `size x size`; returns
/// `(1, 3, size, size)`. Gray images are replicated to three channels.
pub fn load_target(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = load_png(path)?;
    prepare_target(&img, size)
}

pub fn prepare_target(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || size == 0 {
        return Err(Error::contract("target must be (C, H, W) with a positive output size"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let side = h.min(w);
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    let scale = side as f64 / size as f64;
    let mut out = vec![0f32; 3 * size * size];
    for ch in 0..3 {
        let src = ch.min(c - 1);
        let plane = &img.data()[src * h * w..(src + 1) * h * w];
        for i in 0..size {
            let (y0, y1) = (i as f64 * scale, (i + 1) as f64 * scale);
            for j in 0..size {
                let (x0, x1) = (j as f64 * scale, (j + 1) as f64 * scale);
                let (mut acc, mut area) = (0.0, 0.0);
                for y in y0.floor() as usize..(y1.ceil() as usize).min(side) {
                    let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                    for x in x0.floor() as usize..(x1.ceil() as usize).min(side) {
                        let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                        acc += wy * wx * plane[(oy + y) * w + ox + x] as f64;
                        area += wy * wx;
                    }
                }
                out[ch * size * size + i * size + j] = (acc / area.max(1e-12)) as f32;
            }
        }
    }
    Tensor::new(&[1, 3, size, size], out)
}

/// Loss of a bundle without translation.
pub fn evaluate_bundle(
    gen: &Generator,
    bundle: &LatentBundle,
    pattern: Option<&ConditionPattern>,
    target: &InversionTarget<f32>,
    spec: &InvertSpec,
    ext: &FeatureExtractor,
) -> Result<LossParts> {
    let maps = gen.synthesize(bundle, pattern)?;
    let w = LossWeights { style: spec.style_weight, l1: spec.l1_weight };
    Ok(inversion_loss(&maps.to_batch(), target, &spec.render, w, None, ext, false)?.0)
}

/// Optimizes `(w+, noise)` with Adam against a `(1, 3, H, W)` target. The
/// generator is only read.
pub fn invert_with(
    gen: &Generator,
    target_img: &Tensor<f32>,
    pattern: Option<&ConditionPattern>,
    spec: &InvertSpec,
) -> Result<InversionResult> {
    spec.validate()?;
    let domain = spec.domain();
    match (gen.cfg.conditional, pattern) {
        (true, None) => return Err(Error::PatternRequired),
        (false, Some(_)) => return Err(Error::contract("unconditional generator does not take a pattern")),
        (true, Some(p)) if p.resolution() != domain => {
            return Err(Error::contract(format!("pattern is {}px, generation domain is {domain}px", p.resolution())))
        }
        _ => {}
    }
    let ts = target_img.shape();
    if ts[2] != spec.target_size || ts[3] != spec.target_size {
        return Err(Error::contract(format!("target is {}x{}, spec expects {}", ts[2], ts[3], spec.target_size)));
    }
    let ext = FeatureExtractor::seeded(spec.extractor.clone());
    let target = InversionTarget::new(target_img.clone(), &ext, spec.l1_resolution)?;
    let ext_params = ext.params.clone();
    let weights = LossWeights { style: spec.style_weight, l1: spec.l1_weight };
    let nw = gen.cfg.num_ws();
    let pattern_t = pattern.map(|p| p.to_batch());

    let mut trajectory = Vec::new();
    let mut best: Option<(f64, LatentBundle)> = None;
    let mut initial = None;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for restart in 0..spec.restarts {
        let init = init_u(gen, spec.mean_w_samples, domain, rng.gen())?;
        if initial.is_none() {
            initial = Some(evaluate_bundle(gen, &init, pattern, &target, spec, &ext)?);
        }
        let mut wp = vec![init.w_plus.clone()];
        let mut noise = init.noise.clone();
        let mut opt_w = Adam::new(AdamConfig { lr: spec.lr_w, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, [wp[0].shape().to_vec()]);
        let mut opt_n = Adam::new(
            AdamConfig { lr: spec.lr_noise, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            noise.iter().map(|n| n.shape().to_vec()),
        );
        let mut run_best = f64::INFINITY;
        for it in 0..spec.iterations {
            let shift = spec
                .shift_at(it)
                .then(|| Shift2D::new(rng.gen_range(0..domain as i64), rng.gen_range(0..domain as i64)));
            let mut g: Graph<f32> = Graph::new();
            let mut s = Scope::new(&gen.params, false);
            let wv = g.param(wp[0].clone());
            let ws = (0..nw).map(|i| g.narrow(wv, 0, i, 1)).collect::<Result<Vec<_>>>()?;
            let nv: Vec<Var> = noise.iter().map(|n| g.param(n.clone())).collect();
            let pv = pattern_t.as_ref().map(|p| g.constant(p.clone()));
            let maps = gen.synthesis_graph(&mut g, &mut s, &SynthInputs { ws, noise: nv.clone(), pattern: pv })?;
            let (total, style, l1) = inversion_loss_graph(&mut g, maps, &target, &spec.render, weights, shift, &ext, &ext_params)?;
            let tv = g.value(total).item() as f64;
            if !tv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "inversion loss at restart {restart}, iteration {it} is {tv}; trajectory so far: {}",
                    serde_json::to_string(&trajectory)?
                )));
            }
            // the loss belongs to the current iterate, so track it before stepping
            if tv < run_best {
                run_best = tv;
            }
            if best.as_ref().map_or(true, |(b, _)| tv < *b) {
                best = Some((tv, LatentBundle { z: None, w_plus: wp[0].clone(), noise: noise.clone() }));
            }
            trajectory.push(TrajectoryPoint {
                restart,
                iteration: it,
                total: tv,
                style: g.value(style).item() as f64,
                l1: g.value(l1).item() as f64,
                shift: shift.map(|s| [s.dy, s.dx]),
                best: run_best,
            });
            let mut gr = g.backward(total)?;
            let gw = gr.take(wv).unwrap_or_else(|| Tensor::zeros(wp[0].shape()));
            let mut gn: Vec<Tensor<f32>> =
                nv.iter().zip(&noise).map(|(&v, n)| gr.take(v).unwrap_or_else(|| Tensor::zeros(n.shape()))).collect();
            if spec.noise_reg_weight > 0.0 {
                let (_, gr) = noise_regularizer(&noise)?;
                let k = spec.noise_reg_weight as f32;
                for (g, r) in gn.iter_mut().zip(&gr) {
                    for (a, b) in g.data_mut().iter_mut().zip(r.data()) {
                        *a += k * b;
                    }
                }
            }
            opt_w.step(&mut wp, &[gw])?;
            opt_n.step(&mut noise, &gn)?;
            if spec.normalize_noise {
                normalize_noise(&mut noise);
            }
        }
    }
    let (_, bundle) = best.ok_or_else(|| Error::contract("no iterations ran"))?;
    let maps = gen.synthesize(&bundle, pattern)?;
    let final_loss = evaluate_bundle(gen, &bundle, pattern, &target, spec, &ext)?;
    let setup = RenderSetup { image_size: domain, ..spec.render.clone() };
    let rerender = crate::render::render(&maps, &setup)?;
    Ok(InversionResult {
        bundle,
        maps,
        trajectory,
        rerender,
        initial: initial.expect("at least one restart"),
        final_loss,
    })
}

/// Loads the checkpoint, target and pattern named in `spec` and inverts.
pub fn invert(spec: &InvertSpec) -> Result<(InversionResult, Generator)> {
    spec.validate()?;
    let ckpt = spec.checkpoint.as_ref().ok_or_else(|| Error::config("checkpoint", "no checkpoint given"))?;
    let target = spec.target.as_ref().ok_or_else(|| Error::config("target", "no target image given"))?;
    let (gen, _) = crate::train::load_generator(ckpt, spec.use_ema)?;
    let pattern = match &spec.pattern {
        Some(p) => Some(crate::material::load_pattern(p)?),
        None => None,
    };
    if gen.cfg.conditional && pattern.is_none() {
        return Err(Error::PatternRequired);
    }
    let img = load_target(target, spec.target_size)?;
    let r = invert_with(&gen, &img, pattern.as_ref(), spec)?;
    Ok((r, gen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::grad_check;
    use crate::material::{MaterialClass, MaterialClassSpec};
    use crate::networks::GeneratorConfig;
    use crate::periodic_ops::{cyclic_translate, PeriodicTensor};
    use crate::render::render_batch;

    fn ext() -> FeatureExtractor {
        FeatureExtractor::seeded(ExtractorConfig::default())
    }

    fn random_maps(res: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 5, res, res], |_| rng.gen_range(0.1..0.9))
    }

    #[test]
    fn self_match_is_zero_and_offset_is_exact() {
        let e = ext();
        let maps = random_maps(16, 1);
        let setup = RenderSetup::new(16);
        let img = render_batch(&maps, &setup).unwrap();
        let t = InversionTarget::new(img.clone(), &e, 16).unwrap();
        let w = LossWeights { style: 1.0, l1: 10.0 };
        let (p, _) = inversion_loss(&maps, &t, &setup, w, None, &e, false).unwrap();
        assert_eq!(p.total, 0.0);
        // constant offset: only the L1 term sees it
        let shifted = InversionTarget::new(img.map(|v| v + 0.1), &e, 16).unwrap();
        let w0 = LossWeights { style: 0.0, l1: 2.0 };
        let (p, _) = inversion_loss(&maps, &shifted, &setup, w0, None, &e, false).unwrap();
        assert!((p.total - 0.2).abs() < 1e-12, "{}", p.total);
    }

    #[test]
    fn shifted_loss_equals_two_call_oracle() {
        let e = ext();
        let maps = random_maps(16, 2);
        let setup = RenderSetup::new(16);
        let target = InversionTarget::new(render_batch(&random_maps(16, 3), &setup).unwrap(), &e, 8).unwrap();
        let w = LossWeights { style: 1.0, l1: 10.0 };
        let s = Shift2D::new(3, -5);
        let (a, _) = inversion_loss(&maps, &target, &setup, w, Some(s), &e, false).unwrap();
        let moved = cyclic_translate(&PeriodicTensor::new(maps.clone()).unwrap(), s).into_tensor();
        let (b, _) = inversion_loss(&moved, &target, &setup, w, None, &e, false).unwrap();
        assert_eq!(a, b);
        let (c, _) = inversion_loss(&maps, &target, &setup, w, None, &e, false).unwrap();
        assert_ne!(a.total, c.total);
    }

    #[test]
    fn gradient_matches_finite_differences_on_8x8() {
        let e = ext();
        let maps = random_maps(8, 4);
        let setup = RenderSetup::new(8);
        let target = InversionTarget::new(render_batch(&random_maps(8, 5), &setup).unwrap(), &e, 4).unwrap();
        let w = LossWeights { style: 1.0, l1: 10.0 };
        let f = |m: &Tensor<f64>| Ok(inversion_loss(m, &target, &setup, w, None, &e, false)?.0.total);
        let df = |m: &Tensor<f64>| Ok(inversion_loss(m, &target, &setup, w, None, &e, true)?.1.unwrap());
        let err = grad_check(f, df, &maps, 1e-6).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn target_must_divide_l1_resolution() {
        let e = ext();
        let img = Tensor::<f64>::zeros(&[1, 3, 24, 24]);
        assert!(InversionTarget::new(img, &e, 16).is_err());
    }

    #[test]
    fn prepare_target_crops_and_pools() {
        let img = Tensor::from_fn(&[3, 8, 12], |k| ((k % 12) / 2) as f32);
        let t = prepare_target(&img, 4).unwrap();
        assert_eq!(t.shape(), &[1, 3, 4, 4]);
        // crop keeps columns 2..10; pairs (2,3) -> 1, (4,5) -> 2, ...
        assert_eq!(&t.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        let gray = Tensor::full(&[1, 6, 6], 0.25f32);
        let t = prepare_target(&gray, 4).unwrap();
        assert!(t.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    fn stone_gen() -> Generator {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = GeneratorConfig::for_class(&MaterialClassSpec::preset(MaterialClass::Stone), 16);
        c.channel_base = 64;
        c.channel_max = 8;
        c.latent_dim = 8;
        c.style_dim = 8;
        c.mapping_layers = 2;
        Generator::new(c, &mut rng).unwrap()
    }

    #[test]
    fn init_u_is_mean_broadcast_and_seeded() {
        let gen = stone_gen();
        let a = init_u(&gen, 200, 16, 3).unwrap();
        let b = init_u(&gen, 200, 16, 3).unwrap();
        assert_eq!(a, b);
        let sd = gen.cfg.style_dim;
        let rows: Vec<&[f32]> = a.w_plus.data().chunks(sd).collect();
        assert!(rows.iter().all(|r| *r == rows[0]));
        assert_eq!(a.noise.len(), gen.cfg.num_noise());
    }

    #[test]
    fn invert_runs_and_leaves_weights_alone() {
        let gen = stone_gen();
        let before = gen.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = gen.bundle_from_z(gen.sample_z(&mut rng), 16, &mut rng).unwrap();
        let m = gen.synthesize(&b, None).unwrap();
        let setup = RenderSetup::new(16);
        let img = crate::render::render(&m, &setup).unwrap().reshape(&[1, 3, 16, 16]).unwrap();
        let spec = InvertSpec {
            render: setup,
            iterations: 12,
            target_size: 16,
            mean_w_samples: 100,
            seed: 1,
            ..Default::default()
        };
        let r = invert_with(&gen, &img, None, &spec).unwrap();
        assert_eq!(gen.params, before);
        assert_eq!(r.trajectory.len(), 12);
        for (k, p) in r.trajectory.iter().enumerate() {
            assert_eq!(p.shift.is_some(), k % 2 == 1);
            if k > 0 {
                assert!(p.best <= r.trajectory[k - 1].best);
            }
        }
        assert_eq!(gen.synthesize(&r.bundle, None).unwrap(), r.maps);
        let bigger = InvertSpec { output_resolution: Some(32), iterations: 3, ..spec };
        let r = invert_with(&gen, &img, None, &bigger).unwrap();
        assert_eq!(r.maps.resolution(), 32);
    }

    #[test]
    fn noise_regularizer_gradient_and_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(
            |x| Ok(noise_regularizer(std::slice::from_ref(x))?.0),
            |x| Ok(noise_regularizer(std::slice::from_ref(x))?.1.remove(0)),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        // a constant map is fully correlated at every level: 16x16 and 8x8
        let c = Tensor::full(&[1, 1, 16, 16], 1.0f64);
        assert!((noise_regularizer(&[c]).unwrap().0 - 4.0).abs() < 1e-12);
        let mut n = vec![Tensor::from_fn(&[1, 1, 8, 8], |i| 3.0 + (i / 8) as f64)];
        normalize_noise(&mut n);
        let d = n[0].data();
        assert!(d.iter().sum::<f64>().abs() < 1e-9);
        assert!((d.iter().map(|v| v * v).sum::<f64>() / 64.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conditional_needs_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = GeneratorConfig::for_class(&MaterialClassSpec::preset(MaterialClass::Tile), 32);
        c.channel_base = 64;
        c.channel_max = 4;
        let gen = Generator::new(c, &mut rng).unwrap();
        let img = Tensor::zeros(&[1, 3, 32, 32]);
        let spec = InvertSpec { render: RenderSetup::new(32), target_size: 32, iterations: 1, ..Default::default() };
        assert!(matches!(invert_with(&gen, &img, None, &spec), Err(Error::PatternRequired)));
    }
}
