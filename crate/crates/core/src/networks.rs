//! Tileable generator (mapping, pattern encoder, synthesis) and discriminator.
//!
//! Layer structs only hold parameter ids; values live in a [`Params`] so the
//! same network can run in `f32` for training and `f64` for checks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::material::{ConditionPattern, MaterialClassSpec, MaterialMaps};
use crate::nn::{downsample2x, lrelu, randn, upsample2x, Conv, Dense, ModConv, ParamId, Params, Scope};
use crate::periodic_ops::{default_blur, PadMode, Shift2D};
use crate::tensor::{Real, Tensor};

/// Encoder stride giving the 32x32 injection of a 512px model.
pub const DEFAULT_ENCODER_STRIDE: usize = 16;
pub const UNCONDITIONAL_START: usize = 4;

fn default_blur_cfg() -> Vec<f64> {
    default_blur()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub out_resolution: usize,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    /// Channels at resolution `r` are `min(channel_base / r, channel_max)`.
    pub channel_base: usize,
    pub channel_max: usize,
    pub conditional: bool,
    pub pattern_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_blur_cfg")]
    pub blur: Vec<f64>,
    #[serde(default)]
    pub padding: PadMode,
    /// Initial per-layer noise strength.
    pub noise_init: f64,
    /// Standard deviation of the initial output-layer weights; keeps the
    /// summed skip outputs out of the flat part of the final sigmoid.
    #[serde(default = "default_rgb_init")]
    pub rgb_init: f64,
    /// Total encoder stride between the pattern and the synthesis input;
    /// conditional models start at `out_resolution / encoder_stride`.
    #[serde(default = "default_encoder_stride")]
    pub encoder_stride: usize,
}

fn default_encoder_stride() -> usize {
    DEFAULT_ENCODER_STRIDE
}

fn default_rgb_init() -> f64 {
    0.25
}

impl GeneratorConfig {
    pub fn for_class(class: &MaterialClassSpec, out_resolution: usize) -> Self {
        Self {
            out_resolution,
            latent_dim: 64,
            style_dim: 64,
            mapping_layers: 8,
            mapping_lr_mul: 0.01,
            channel_base: 1024,
            channel_max: 64,
            conditional: class.conditional,
            pattern_channels: class.pattern_channels,
            out_channels: class.map_channels(),
            blur: default_blur(),
            padding: PadMode::Circular,
            noise_init: 0.1,
            rgb_init: default_rgb_init(),
            encoder_stride: DEFAULT_ENCODER_STRIDE,
        }
    }

    /// Resolution of the first synthesis layer.
    pub fn base_resolution(&self) -> usize {
        if self.conditional {
            self.out_resolution / self.encoder_stride
        } else {
            UNCONDITIONAL_START
        }
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    pub fn num_up(&self) -> usize {
        (self.out_resolution / self.base_resolution()).trailing_zeros() as usize
    }

    /// Style-consuming layers: start conv and head, then three per upsampling
    /// block.
    pub fn num_ws(&self) -> usize {
        2 + 3 * self.num_up()
    }

    pub fn num_noise(&self) -> usize {
        1 + 2 * self.num_up()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.out_resolution;
        if !r.is_power_of_two() || r < 8 {
            return Err(Error::config("generator.out_resolution", "must be a power of two >= 8"));
        }
        let st = self.encoder_stride;
        if self.conditional && (st < 2 || !st.is_power_of_two()) {
            return Err(Error::config("generator.encoder_stride", "must be a power of two >= 2"));
        }
        if self.conditional && r < 2 * st {
            return Err(Error::config(
                "generator.out_resolution",
                format!("conditional models need at least {}px", 2 * st),
            ));
        }
        if !self.conditional && r <= UNCONDITIONAL_START {
            return Err(Error::config("generator.out_resolution", "must exceed the 4x4 start"));
        }
        if self.pattern_channels != 1 && self.pattern_channels != 3 {
            return Err(Error::config("generator.pattern_channels", "must be 1 or 3"));
        }
        if self.out_channels != 5 && self.out_channels != 6 {
            return Err(Error::config("generator.out_channels", "must be 5 or 6"));
        }
        if self.latent_dim == 0 || self.style_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::config("generator", "latent_dim, style_dim and mapping_layers must be positive"));
        }
        if self.channel_base == 0 || self.channel_max == 0 {
            return Err(Error::config("generator.channel_base", "channel counts must be positive"));
        }
        if !(self.mapping_lr_mul > 0.0) {
            return Err(Error::config("generator.mapping_lr_mul", "must be positive"));
        }
        if self.blur.is_empty() || self.blur.iter().sum::<f64>().abs() < 1e-12 {
            return Err(Error::config("generator.blur", "filter must have a nonzero sum"));
        }
        Ok(())
    }

    /// Base resolution when generating a `domain x domain` output.
    pub fn domain_base(&self, domain: usize) -> Result<usize> {
        let base = domain >> self.num_up();
        let ok = domain.is_power_of_two() && base << self.num_up() == domain && base >= 1;
        let ok = ok && (self.conditional || (base >= UNCONDITIONAL_START && base % UNCONDITIONAL_START == 0));
        if !ok {
            return Err(Error::contract(format!(
                "cannot generate a {domain}px domain with a {}px generator",
                self.out_resolution
            )));
        }
        Ok(base)
    }

    /// Resolution of each noise map for a `domain` output.
    pub fn noise_resolutions(&self, domain: usize) -> Result<Vec<usize>> {
        let base = self.domain_base(domain)?;
        let mut v = vec![base];
        for k in 1..=self.num_up() {
            v.push(base << k);
            v.push(base << k);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_resolution: usize,
    pub channel_base: usize,
    pub channel_max: usize,
    pub map_channels: usize,
    /// 0 for unconditional models.
    pub pattern_channels: usize,
    /// Minibatch standard deviation group size; 0 disables the layer.
    pub mbstd_group: usize,
    #[serde(default = "default_blur_cfg")]
    pub blur: Vec<f64>,
    #[serde(default)]
    pub padding: PadMode,
}

impl DiscriminatorConfig {
    pub fn for_generator(g: &GeneratorConfig) -> Self {
        Self {
            in_resolution: g.out_resolution,
            channel_base: g.channel_base,
            channel_max: g.channel_max,
            map_channels: g.out_channels,
            pattern_channels: if g.conditional { g.pattern_channels } else { 0 },
            mbstd_group: if g.out_resolution >= 256 { 4 } else { 0 },
            blur: g.blur.clone(),
            padding: g.padding,
        }
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    pub fn in_channels(&self) -> usize {
        self.map_channels + self.pattern_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !self.in_resolution.is_power_of_two() || self.in_resolution < 8 {
            return Err(Error::config("discriminator.in_resolution", "must be a power of two >= 8"));
        }
        if self.map_channels != 5 && self.map_channels != 6 {
            return Err(Error::config("discriminator.map_channels", "must be 5 or 6"));
        }
        if ![0, 1, 3].contains(&self.pattern_channels) {
            return Err(Error::config("discriminator.pattern_channels", "must be 0, 1 or 3"));
        }
        if self.channel_base == 0 || self.channel_max == 0 {
            return Err(Error::config("discriminator.channel_base", "channel counts must be positive"));
        }
        Ok(())
    }
}

/// Latent code, per-layer styles and noise bank of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub z: Option<Vec<f32>>,
    /// `(num_ws, style_dim)`.
    pub w_plus: Tensor<f32>,
    /// One `(1, 1, r, r)` map per noise layer.
    pub noise: Vec<Tensor<f32>>,
}

impl LatentBundle {
    /// Shift every noise map by the same physical offset, `shift` being in
    /// pixels at `domain` resolution.
    pub fn shifted_noise(&self, shift: Shift2D, domain: usize) -> Vec<Tensor<f32>> {
        self.noise.iter().map(|n| shift_noise(n, shift, domain)).collect()
    }
}

/// Rolls one noise map by `shift * r / domain` pixels (rounded).
pub fn shift_noise<T: Real>(n: &Tensor<T>, shift: Shift2D, domain: usize) -> Tensor<T> {
    let r = n.shape()[n.rank() - 1];
    let s = shift.rescaled(r as f64 / domain as f64);
    crate::periodic_ops::roll(n, s.dy, s.dx)
}

// ---------------------------------------------------------------------------
// generator

#[derive(Debug, Clone)]
struct Encoder {
    from_rgb: Conv,
    blocks: Vec<Conv>,
}

#[derive(Debug, Clone)]
struct SynthBlock {
    conv0: ModConv,
    conv1: ModConv,
    to_rgb: ModConv,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: Params<f32>,
    mapping: Vec<Dense>,
    encoder: Option<Encoder>,
    constant: Option<ParamId>,
    start_conv: ModConv,
    start_rgb: ModConv,
    blocks: Vec<SynthBlock>,
}

/// Tape inputs of one synthesis pass over a batch of `N`.
pub struct SynthInputs {
    /// `num_ws` vars of shape `(N, style_dim)`; entries may repeat.
    pub ws: Vec<Var>,
    /// `num_noise` vars of shape `(N, 1, r, r)`.
    pub noise: Vec<Var>,
    /// `(N, Cp, R, R)` in `[0, 1]`.
    pub pattern: Option<Var>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let pad = cfg.padding;
        let mapping = (0..cfg.mapping_layers)
            .map(|i| {
                let input = if i == 0 { cfg.latent_dim } else { cfg.style_dim };
                Dense::new(&mut p, &format!("mapping.{i}"), input, cfg.style_dim, Some(0.0), cfg.mapping_lr_mul, rng)
            })
            .collect();

        let base = cfg.base_resolution();
        let (encoder, constant) = if cfg.conditional {
            let r = cfg.out_resolution;
            let from_rgb = Conv::new(&mut p, &format!("enc.b{r}.fromrgb"), cfg.pattern_channels, cfg.channels(r), 1, true, pad, rng);
            let mut blocks = Vec::new();
            let mut res = r;
            while res > base {
                blocks.push(Conv::new(&mut p, &format!("enc.b{res}.conv"), cfg.channels(res), cfg.channels(res / 2), 3, true, pad, rng));
                res /= 2;
            }
            (Some(Encoder { from_rgb, blocks }), None)
        } else {
            let c = cfg.channels(base);
            (None, Some(p.add("syn.const", randn(&[1, c, base, base], 1.0, rng))))
        };

        let noise = Some(cfg.noise_init);
        let cb = cfg.channels(base);
        let oc = cfg.out_channels;
        let sd = cfg.style_dim;
        let start_conv = ModConv::new(&mut p, &format!("syn.b{base}.conv1"), sd, cb, cb, 3, true, noise, pad, rng);
        let start_rgb = ModConv::new(&mut p, &format!("syn.b{base}.torgb"), sd, cb, oc, 1, false, None, pad, rng);
        let mut blocks = Vec::new();
        let mut res = base * 2;
        while res <= cfg.out_resolution {
            let (ci, co) = (cfg.channels(res / 2), cfg.channels(res));
            blocks.push(SynthBlock {
                conv0: ModConv::new(&mut p, &format!("syn.b{res}.conv0"), sd, ci, co, 3, true, noise, pad, rng),
                conv1: ModConv::new(&mut p, &format!("syn.b{res}.conv1"), sd, co, co, 3, true, noise, pad, rng),
                to_rgb: ModConv::new(&mut p, &format!("syn.b{res}.torgb"), sd, co, oc, 1, false, None, pad, rng),
            });
            res *= 2;
        }
        for id in std::iter::once(start_rgb.weight).chain(blocks.iter().map(|b: &SynthBlock| b.to_rgb.weight)) {
            let w = p.get_mut(id);
            *w = w.map(|v| v * cfg.rgb_init as f32);
        }
        Ok(Self { cfg, params: p, mapping, encoder, constant, start_conv, start_rgb, blocks })
    }

    /// `z: (N, latent_dim)` to `w: (N, style_dim)`.
    pub fn mapping_graph<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, z: Var) -> Result<Var> {
        let sq = g.square(z);
        let ms = g.mean_axes(sq, &[1])?;
        let ms = g.add_scalar(ms, 1e-8);
        let inv = g.powf(ms, -0.5);
        let mut x = g.mul(z, inv)?;
        for layer in &self.mapping {
            x = layer.forward(g, s, x)?;
            x = lrelu(g, x);
        }
        Ok(x)
    }

    /// Pattern `(N, Cp, R, R)` in `[0, 1]` to features at `R / encoder_stride`.
    pub fn encoder_graph<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, p: Var) -> Result<Var> {
        let enc = self.encoder.as_ref().ok_or_else(|| Error::contract("unconditional generator has no pattern encoder"))?;
        let shape = g.shape(p).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.pattern_channels {
            return Err(Error::contract(format!(
                "pattern must be (N, {}, R, R), got {shape:?}",
                self.cfg.pattern_channels
            )));
        }
        let x = g.scale(p, 2.0);
        let x = g.add_scalar(x, -1.0);
        let x = enc.from_rgb.forward(g, s, x)?;
        let mut x = lrelu(g, x);
        for conv in &enc.blocks {
            x = conv.forward(g, s, x)?;
            x = lrelu(g, x);
            x = downsample2x(g, x, &self.cfg.blur, self.cfg.padding);
        }
        Ok(x)
    }

    /// Maps `(N, out_channels, D, D)` in `[0, 1]`.
    pub fn synthesis_graph<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, inp: &SynthInputs) -> Result<Var> {
        let cfg = &self.cfg;
        if inp.ws.len() != cfg.num_ws() {
            return Err(Error::contract(format!("expected {} style rows, got {}", cfg.num_ws(), inp.ws.len())));
        }
        if inp.noise.len() != cfg.num_noise() {
            return Err(Error::contract(format!("expected {} noise maps, got {}", cfg.num_noise(), inp.noise.len())));
        }
        let n = g.shape(inp.ws[0])[0];
        let base_res = g.shape(inp.noise[0])[2];
        let domain = base_res << cfg.num_up();
        let want = cfg.noise_resolutions(domain)?;
        for (k, (&v, &r)) in inp.noise.iter().zip(&want).enumerate() {
            let sh = g.shape(v);
            if sh.len() != 4 || sh[0] != n || sh[1] != 1 || sh[2] != r || sh[3] != r {
                return Err(Error::contract(format!("noise {k} must be ({n}, 1, {r}, {r}), got {sh:?}")));
            }
        }
        let mut x = match (cfg.conditional, inp.pattern) {
            (true, Some(p)) => {
                let ps = g.shape(p).to_vec();
                if ps[0] != n || ps[2] != domain || ps[3] != domain {
                    return Err(Error::contract(format!("pattern {ps:?} does not match a {n}x{domain}px batch")));
                }
                self.encoder_graph(g, s, p)?
            }
            (true, None) => return Err(Error::PatternRequired),
            (false, Some(_)) => return Err(Error::contract("unconditional generator does not take a pattern")),
            (false, None) => {
                let c = s.var(g, self.constant.expect("unconditional generators own a constant"));
                let reps = base_res / UNCONDITIONAL_START;
                let c = if reps > 1 {
                    let row: Vec<Var> = vec![c; reps];
                    let row = g.concat(&row, 3)?;
                    let col: Vec<Var> = vec![row; reps];
                    g.concat(&col, 2)?
                } else {
                    c
                };
                let ch = cfg.channels(cfg.base_resolution());
                let ones = g.constant(Tensor::full(&[n, 1, 1, 1], T::one()));
                let c = g.mul(ones, c)?;
                debug_assert_eq!(g.shape(c), &[n, ch, base_res, base_res]);
                c
            }
        };

        let mut wi = 0;
        let mut ni = 0;
        x = self.start_conv.forward(g, s, x, inp.ws[wi], Some(inp.noise[ni]))?;
        wi += 1;
        ni += 1;
        let mut img = self.start_rgb.forward(g, s, x, inp.ws[wi], None)?;
        wi += 1;
        for b in &self.blocks {
            let up = upsample2x(g, x, &cfg.blur, cfg.padding);
            x = b.conv0.forward(g, s, up, inp.ws[wi], Some(inp.noise[ni]))?;
            x = b.conv1.forward(g, s, x, inp.ws[wi + 1], Some(inp.noise[ni + 1]))?;
            let rgb = b.to_rgb.forward(g, s, x, inp.ws[wi + 2], None)?;
            let prev = upsample2x(g, img, &cfg.blur, cfg.padding);
            img = g.add(prev, rgb)?;
            wi += 3;
            ni += 2;
        }
        Ok(g.sigmoid(img))
    }

    pub fn map_latent(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::contract(format!("z has {} entries, expected {}", z.len(), self.cfg.latent_dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent z".into()));
        }
        let mut g = Graph::new();
        let mut s = Scope::new(&self.params, false);
        let zv = g.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
        let w = self.mapping_graph(&mut g, &mut s, zv)?;
        Ok(g.value(w).data().to_vec())
    }

    pub fn sample_z(&self, rng: &mut impl Rng) -> Vec<f32> {
        (0..self.cfg.latent_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    /// Mean mapped style over `n` standard-normal latents, batched.
    pub fn mean_w(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let chunk = 500;
        let mut acc = vec![0f64; self.cfg.style_dim];
        let mut done = 0;
        while done < n {
            let b = chunk.min(n - done);
            let z: Tensor<f32> = randn(&[b, self.cfg.latent_dim], 1.0, rng);
            let mut g = Graph::new();
            let mut s = Scope::new(&self.params, false);
            let zv = g.constant(z);
            let w = self.mapping_graph(&mut g, &mut s, zv)?;
            for (k, v) in g.value(w).data().iter().enumerate() {
                acc[k % self.cfg.style_dim] += *v as f64;
            }
            done += b;
        }
        Ok(acc.into_iter().map(|v| (v / n.max(1) as f64) as f32).collect())
    }

    pub fn random_noise(&self, domain: usize, rng: &mut impl Rng) -> Result<Vec<Tensor<f32>>> {
        Ok(self.cfg.noise_resolutions(domain)?.into_iter().map(|r| randn(&[1, 1, r, r], 1.0, rng)).collect())
    }

    /// Bundle with `w` repeated over all layers and fresh noise.
    pub fn bundle_from_z(&self, z: Vec<f32>, domain: usize, rng: &mut impl Rng) -> Result<LatentBundle> {
        let w = self.map_latent(&z)?;
        let nw = self.cfg.num_ws();
        let w_plus = Tensor::new(&[nw, self.cfg.style_dim], w.repeat(nw))?;
        let noise = self.random_noise(domain, rng)?;
        Ok(LatentBundle { z: Some(z), w_plus, noise })
    }

    fn check_pattern(&self, p: Option<&ConditionPattern>, domain: usize) -> Result<()> {
        match (self.cfg.conditional, p) {
            (true, None) => Err(Error::PatternRequired),
            (false, Some(_)) => Err(Error::contract("unconditional generator does not take a pattern")),
            (true, Some(p)) if p.channels() != self.cfg.pattern_channels || p.resolution() != domain => Err(Error::contract(
                format!(
                    "pattern is {}x{}px, expected {}x{domain}px",
                    p.channels(),
                    p.resolution(),
                    self.cfg.pattern_channels
                ),
            )),
            _ => Ok(()),
        }
    }

    /// Features of a single pattern, `(1, C, R/16, R/16)`.
    pub fn encode_pattern(&self, p: &ConditionPattern) -> Result<Tensor<f32>> {
        self.check_pattern(Some(p), p.resolution())?;
        let mut g = Graph::new();
        let mut s = Scope::new(&self.params, false);
        let pv = g.constant(p.to_batch());
        let f = self.encoder_graph(&mut g, &mut s, pv)?;
        Ok(g.value(f).clone())
    }

    /// Output domain implied by a bundle's noise bank.
    pub fn bundle_domain(&self, b: &LatentBundle) -> Result<usize> {
        let first = b.noise.first().ok_or_else(|| Error::contract("empty noise bank"))?;
        Ok(first.shape()[first.rank() - 1] << self.cfg.num_up())
    }

    pub fn synthesize(&self, b: &LatentBundle, p: Option<&ConditionPattern>) -> Result<MaterialMaps> {
        let t = self.synthesize_tensor::<f32>(&self.params, b, p)?;
        let s = t.shape().to_vec();
        MaterialMaps::new(t.reshape(&[s[1], s[2], s[3]])?)
    }

    /// Synthesis with explicit parameter values, returning `(1, C, D, D)`.
    pub fn synthesize_tensor<T: Real>(
        &self,
        params: &Params<T>,
        b: &LatentBundle,
        p: Option<&ConditionPattern>,
    ) -> Result<Tensor<T>> {
        let domain = self.bundle_domain(b)?;
        self.check_pattern(p, domain)?;
        let nw = self.cfg.num_ws();
        if b.w_plus.shape() != [nw, self.cfg.style_dim] {
            return Err(Error::contract(format!(
                "w+ must be ({nw}, {}), got {:?}",
                self.cfg.style_dim,
                b.w_plus.shape()
            )));
        }
        let mut g = Graph::new();
        let mut s = Scope::new(params, false);
        let wp = g.constant(b.w_plus.cast());
        let ws = (0..nw).map(|i| g.narrow(wp, 0, i, 1)).collect::<Result<Vec<_>>>()?;
        let noise = b.noise.iter().map(|n| g.constant(n.cast())).collect();
        let pattern = p.map(|p| g.constant(p.to_batch().cast()));
        let out = self.synthesis_graph(&mut g, &mut s, &SynthInputs { ws, noise, pattern })?;
        Ok(g.value(out).clone())
    }

    /// `map_latent`, broadcast to w+, fresh noise, synthesize.
    pub fn generate(&self, z: &[f32], p: Option<&ConditionPattern>, rng: &mut impl Rng) -> Result<MaterialMaps> {
        let domain = p.map(|p| p.resolution()).unwrap_or(self.cfg.out_resolution);
        let b = self.bundle_from_z(z.to_vec(), domain, rng)?;
        self.synthesize(&b, p)
    }

    /// Builds one forward pass and reports whether every spatial operator on
    /// the tape wraps around.
    pub fn audit_circular(&self) -> Result<bool> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let r = self.cfg.out_resolution;
        let b = self.bundle_from_z(self.sample_z(&mut rng), r, &mut rng)?;
        let mut g: Graph<f32> = Graph::new();
        let mut s = Scope::new(&self.params, false);
        let wp = g.constant(b.w_plus.clone());
        let ws = (0..self.cfg.num_ws()).map(|i| g.narrow(wp, 0, i, 1)).collect::<Result<Vec<_>>>()?;
        let noise = b.noise.iter().map(|n| g.constant(n.clone())).collect();
        let pattern = self
            .cfg
            .conditional
            .then(|| g.constant(Tensor::full(&[1, self.cfg.pattern_channels, r, r], 0.5)));
        self.synthesis_graph(&mut g, &mut s, &SynthInputs { ws, noise, pattern })?;
        Ok(crate::nn::tape_is_circular(&g))
    }
}

// ---------------------------------------------------------------------------
// discriminator

#[derive(Debug, Clone)]
struct DiscBlock {
    conv0: Conv,
    conv1: Conv,
    skip: Conv,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: Params<f32>,
    from_rgb: Conv,
    blocks: Vec<DiscBlock>,
    epi_conv: Conv,
    fc: Dense,
    out: Dense,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let pad = cfg.padding;
        let r = cfg.in_resolution;
        let from_rgb = Conv::new(&mut p, &format!("disc.b{r}.fromrgb"), cfg.in_channels(), cfg.channels(r), 1, true, pad, rng);
        let mut blocks = Vec::new();
        let mut res = r;
        while res > 4 {
            let (c, co) = (cfg.channels(res), cfg.channels(res / 2));
            blocks.push(DiscBlock {
                conv0: Conv::new(&mut p, &format!("disc.b{res}.conv0"), c, c, 3, true, pad, rng),
                conv1: Conv::new(&mut p, &format!("disc.b{res}.conv1"), c, co, 3, true, pad, rng),
                skip: Conv::new(&mut p, &format!("disc.b{res}.skip"), c, co, 1, false, pad, rng),
            });
            res /= 2;
        }
        let c4 = cfg.channels(4);
        let extra = usize::from(cfg.mbstd_group > 0);
        let epi_conv = Conv::new(&mut p, "disc.b4.conv", c4 + extra, c4, 3, true, pad, rng);
        let fc = Dense::new(&mut p, "disc.b4.fc", c4 * 16, c4, Some(0.0), 1.0, rng);
        let out = Dense::new(&mut p, "disc.b4.out", c4, 1, Some(0.0), 1.0, rng);
        Ok(Self { cfg, params: p, from_rgb, blocks, epi_conv, fc, out })
    }

    /// Logits `(N, 1)` for maps `(N, C, R, R)` and optional patterns in `[0, 1]`.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, maps: Var, pattern: Option<Var>) -> Result<Var> {
        let cfg = &self.cfg;
        let ms = g.shape(maps).to_vec();
        if ms.len() != 4 || ms[1] != cfg.map_channels || ms[2] != cfg.in_resolution || ms[3] != cfg.in_resolution {
            return Err(Error::contract(format!(
                "discriminator expects (N, {}, {r}, {r}) maps, got {ms:?}",
                cfg.map_channels,
                r = cfg.in_resolution
            )));
        }
        let x = match (cfg.pattern_channels, pattern) {
            (0, None) => maps,
            (0, Some(_)) => return Err(Error::contract("unconditional discriminator does not take a pattern")),
            (_, None) => return Err(Error::PatternRequired),
            (pc, Some(p)) => {
                let ps = g.shape(p);
                if ps.len() != 4 || ps[0] != ms[0] || ps[1] != pc || ps[2] != ms[2] || ps[3] != ms[3] {
                    return Err(Error::contract(format!("pattern shape {ps:?} does not match maps {ms:?}")));
                }
                g.concat(&[maps, p], 1)?
            }
        };
        let x = g.scale(x, 2.0);
        let x = g.add_scalar(x, -1.0);
        let x = self.from_rgb.forward(g, s, x)?;
        let mut x = lrelu(g, x);
        for b in &self.blocks {
            let skip = downsample2x(g, x, &cfg.blur, cfg.padding);
            let skip = b.skip.forward(g, s, skip)?;
            let y = b.conv0.forward(g, s, x)?;
            let y = lrelu(g, y);
            let y = b.conv1.forward(g, s, y)?;
            let y = lrelu(g, y);
            let y = downsample2x(g, y, &cfg.blur, cfg.padding);
            let sum = g.add(skip, y)?;
            x = g.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
        }
        if cfg.mbstd_group > 0 {
            x = minibatch_stddev(g, x, cfg.mbstd_group)?;
        }
        let x = self.epi_conv.forward(g, s, x)?;
        let x = lrelu(g, x);
        let n = g.shape(x)[0];
        let flat = g.shape(x)[1..].iter().product();
        let x = g.reshape(x, &[n, flat])?;
        let x = self.fc.forward(g, s, x)?;
        let x = lrelu(g, x);
        self.out.forward(g, s, x)
    }

    /// One logit per batch item.
    pub fn discriminate(&self, maps: &Tensor<f32>, pattern: Option<&Tensor<f32>>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let mut s = Scope::new(&self.params, false);
        let m = g.constant(maps.clone());
        let p = pattern.map(|p| g.constant(p.clone()));
        let y = self.forward_graph(&mut g, &mut s, m, p)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Appends one channel holding the mean over features of the per-group
/// standard deviation.
fn minibatch_stddev<T: Real>(g: &mut Graph<T>, x: Var, group: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let gs = (1..=group.min(n)).rev().find(|d| n % d == 0).unwrap_or(1);
    let m = n / gs;
    let y = g.reshape(x, &[gs, m, c, h, w])?;
    let mu = g.mean_axes(y, &[0])?;
    let d = g.sub(y, mu)?;
    let d2 = g.square(d);
    let var = g.mean_axes(d2, &[0])?;
    let var = g.add_scalar(var, 1e-8);
    let sd = g.sqrt(var);
    let stat = g.mean_axes(sd, &[2, 3, 4])?;
    let ones = g.constant(Tensor::full(&[gs, m, 1, h, w], T::one()));
    let b = g.mul(ones, stat)?;
    let b = g.reshape(b, &[n, 1, h, w])?;
    g.concat(&[x, b], 1)
}
