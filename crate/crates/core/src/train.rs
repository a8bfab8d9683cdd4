//! Adversarial training: spec, state, one step, the loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::data::{ClassConfig, DataSource, Dataset};
use crate::diagnostics::seam_score;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{d_logistic_loss, g_nonsat_loss, r1_penalty, shift_loss_graph};
use crate::material::{MaterialClass, MaterialSample};
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SynthInputs};
use crate::nn::{randn, Params, Scope};
use crate::optim::{Adam, AdamConfig};
use crate::periodic_ops::{roll, Shift2D};
use crate::tensor::Tensor;

pub const TRAIN_SCHEMA: &str = "tessera.train/1";
pub const CHECKPOINT_SCHEMA: &str = "tessera.checkpoint/1";

/// Offset separating the data stream from the training generator's stream.
const DATA_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub schema: String,
    pub class: ClassConfig,
    pub resolution: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub g_opt: AdamConfig,
    /// Discriminator optimizer before the lazy-R1 correction.
    pub d_opt: AdamConfig,
    pub r1_gamma: f64,
    pub r1_cadence: u64,
    pub shift_weight: f64,
    pub shift_cadence: u64,
    pub ema_half_life_images: f64,
    pub seed: u64,
    pub data: DataSource,
    /// 0 writes only the initial and final checkpoints.
    pub checkpoint_every: u64,
}

impl TrainSpec {
    /// Desk-scale defaults for a class at `resolution`.
    pub fn desk(class: MaterialClass, resolution: usize) -> Self {
        let class = ClassConfig::preset(class);
        let mut generator = GeneratorConfig::for_class(&class.class, resolution);
        generator.channel_base = 512;
        generator.channel_max = 32;
        generator.latent_dim = 32;
        generator.style_dim = 32;
        generator.mapping_layers = 4;
        generator.encoder_stride = 4;
        let discriminator = DiscriminatorConfig::for_generator(&generator);
        Self {
            schema: TRAIN_SCHEMA.into(),
            class,
            resolution,
            generator,
            discriminator,
            batch_size: 8,
            total_steps: 2500,
            g_opt: AdamConfig::new(2.5e-3),
            d_opt: AdamConfig::new(2.5e-3),
            r1_gamma: 1.0,
            r1_cadence: 16,
            shift_weight: 5.0,
            shift_cadence: 4,
            ema_half_life_images: 10_000.0,
            seed: 0,
            data: DataSource::Procedural,
            checkpoint_every: 500,
        }
    }

    /// Full-size 512px configuration with StyleGAN2 widths; far beyond a CPU
    /// budget, kept as a reference preset.
    pub fn full(class: MaterialClass) -> Self {
        let mut s = Self::desk(class, 512);
        let g = &mut s.generator;
        g.channel_base = 32768;
        g.channel_max = 512;
        g.latent_dim = 512;
        g.style_dim = 512;
        g.mapping_layers = 8;
        g.encoder_stride = crate::networks::DEFAULT_ENCODER_STRIDE;
        s.discriminator = DiscriminatorConfig::for_generator(&s.generator);
        s.batch_size = 32;
        s.total_steps = 781_250;
        s.g_opt = AdamConfig::new(2e-3);
        s.d_opt = AdamConfig::new(2e-3);
        s.r1_gamma = 10.0;
        s.checkpoint_every = 5000;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != TRAIN_SCHEMA {
            return Err(Error::Schema { expected: TRAIN_SCHEMA.into(), found: self.schema.clone() });
        }
        self.class.validate(self.resolution)?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let (g, d, c) = (&self.generator, &self.discriminator, &self.class.class);
        if g.out_resolution != self.resolution || d.in_resolution != self.resolution {
            return Err(Error::config("resolution", "generator and discriminator must match the training resolution"));
        }
        if g.conditional != c.conditional || g.out_channels != c.map_channels() {
            return Err(Error::config("generator.conditional", "generator does not match the class spec"));
        }
        if c.conditional && g.pattern_channels != c.pattern_channels {
            return Err(Error::config("generator.pattern_channels", "does not match the class spec"));
        }
        let want_pc = if c.conditional { c.pattern_channels } else { 0 };
        if d.map_channels != c.map_channels() || d.pattern_channels != want_pc {
            return Err(Error::config("discriminator.map_channels", "discriminator does not match the class spec"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.r1_cadence == 0 || self.shift_cadence == 0 {
            return Err(Error::config("r1_cadence", "cadences must be at least 1"));
        }
        if self.r1_gamma < 0.0 || self.shift_weight < 0.0 {
            return Err(Error::config("r1_gamma", "loss weights must be non-negative"));
        }
        if !(self.ema_half_life_images > 0.0) {
            return Err(Error::config("ema_half_life_images", "must be positive"));
        }
        self.g_opt.validate("g_opt")?;
        self.d_opt.validate("d_opt")
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let seed = self.seed ^ DATA_SEED_SALT;
        match &self.data {
            DataSource::Procedural => Dataset::procedural(self.class.clone(), self.resolution, seed),
            DataSource::Directory { path } => {
                Dataset::directory(Path::new(path), &self.class.class, self.resolution, self.class.augment.clone(), seed)
            }
        }
    }

    pub fn ema_beta(&self) -> f64 {
        0.5f64.powf(self.batch_size as f64 / self.ema_half_life_images)
    }
}

/// Mutable training state; the training loop is its only writer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub spec: TrainSpec,
    pub step: u64,
    pub gen: Generator,
    pub gen_ema: Params<f32>,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(spec: TrainSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let gen = Generator::new(spec.generator.clone(), &mut rng)?;
        let disc = Discriminator::new(spec.discriminator.clone(), &mut rng)?;
        let opt_g = Adam::for_params(spec.g_opt, &gen.params);
        let opt_d = Adam::for_params(spec.d_opt.lazy(spec.r1_cadence as usize), &disc.params);
        let gen_ema = gen.params.clone();
        Ok(Self { spec, step: 0, gen, gen_ema, disc, opt_g, opt_d, rng })
    }

    /// The generator with EMA weights.
    pub fn ema_generator(&self) -> Generator {
        let mut g = self.gen.clone();
        g.params = self.gen_ema.clone();
        g
    }
}

/// Stacked maps `(N, C, R, R)` with optional patterns `(N, Cp, R, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub maps: Tensor<f32>,
    pub pattern: Option<Tensor<f32>>,
}

impl Batch {
    pub fn from_samples(samples: &[MaterialSample]) -> Result<Self> {
        let maps: Vec<Tensor<f32>> = samples.iter().map(|s| s.maps.to_batch()).collect();
        let maps = Tensor::concat(&maps.iter().collect::<Vec<_>>(), 0)?;
        let pats: Option<Vec<Tensor<f32>>> = samples.iter().map(|s| s.pattern.as_ref().map(|p| p.to_batch())).collect();
        let pattern = match pats {
            Some(p) if !p.is_empty() => Some(Tensor::concat(&p.iter().collect::<Vec<_>>(), 0)?),
            _ => None,
        };
        Ok(Self { maps, pattern })
    }

    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The real batch consumed at `step`.
pub fn batch_for_step(data: &Dataset, step: u64, size: usize) -> Result<Batch> {
    let samples = (0..size as u64).map(|i| data.get(step * size as u64 + i)).collect::<Result<Vec<_>>>()?;
    Batch::from_samples(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Discriminator,
    Generator,
}

/// One discriminator input before and after the random translation.
pub struct DiscInput<'a> {
    pub phase: Phase,
    pub fake: bool,
    pub shifts: &'a [Shift2D],
    pub maps_before: &'a Tensor<f32>,
    pub pattern_before: Option<&'a Tensor<f32>>,
    pub maps: &'a Tensor<f32>,
    pub pattern: Option<&'a Tensor<f32>>,
}

/// Instrumentation hooks for the training loop.
pub trait TrainObserver {
    fn disc_input(&mut self, _input: &DiscInput) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub images: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    /// `shift_weight * L_shift`, on shift-cadence steps of conditional runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_weighted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_seam: Option<f64>,
}

fn random_shifts(rng: &mut impl Rng, n: usize, res: usize) -> Vec<Shift2D> {
    (0..n).map(|_| Shift2D::new(rng.gen_range(0..res as i64), rng.gen_range(0..res as i64))).collect()
}

/// Rolls batch item `i` by `shifts[i]`.
pub fn translate_batch(x: &Tensor<f32>, shifts: &[Shift2D]) -> Result<Tensor<f32>> {
    let parts = shifts
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(roll(&x.narrow(0, i, 1)?, s.dy, s.dx)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

fn translate_batch_graph(g: &mut Graph<f32>, x: Var, shifts: &[Shift2D]) -> Result<Var> {
    let parts = shifts
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let xi = g.narrow(x, 0, i, 1)?;
            Ok(g.roll(xi, s.dy, s.dx))
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 0)
}

/// Fresh latents and noise for a batch: `z (N, latent)` and one `(N, 1, r, r)`
/// map per noise layer.
fn draw_latents(gen: &Generator, n: usize, rng: &mut impl Rng) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let z = randn(&[n, gen.cfg.latent_dim], 1.0, rng);
    let noise = gen
        .cfg
        .noise_resolutions(gen.cfg.out_resolution)?
        .into_iter()
        .map(|r| randn(&[n, 1, r, r], 1.0, rng))
        .collect();
    Ok((z, noise))
}

/// Mapping and synthesis on the tape with one broadcast `w` per sample.
fn generate_graph(
    gen: &Generator,
    g: &mut Graph<f32>,
    s: &mut Scope<f32>,
    z: &Tensor<f32>,
    noise: &[Tensor<f32>],
    pattern: Option<&Tensor<f32>>,
) -> Result<(Var, Vec<Var>, Vec<Var>, Option<Var>)> {
    let zv = g.constant(z.clone());
    let w = gen.mapping_graph(g, s, zv)?;
    let ws = vec![w; gen.cfg.num_ws()];
    let nv: Vec<Var> = noise.iter().map(|n| g.constant(n.clone())).collect();
    let pv = pattern.map(|p| g.constant(p.clone()));
    let out = gen.synthesis_graph(g, s, &SynthInputs { ws: ws.clone(), noise: nv.clone(), pattern: pv })?;
    Ok((out, ws, nv, pv))
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} at step {step} is {v}")))
    }
}

/// One discriminator update followed by one generator update and the EMA.
pub fn train_step(state: &mut TrainState, batch: &Batch, obs: &mut dyn TrainObserver) -> Result<StepStats> {
    let spec = state.spec.clone();
    let n = batch.len();
    let res = spec.resolution;
    let step = state.step;
    let conditional = spec.generator.conditional;
    if conditional != batch.pattern.is_some() {
        return Err(if conditional { Error::PatternRequired } else { Error::contract("unconditional run got patterns") });
    }

    // discriminator
    let (z, noise) = draw_latents(&state.gen, n, &mut state.rng)?;
    let fake = {
        let mut g = Graph::new();
        let mut s = Scope::new(&state.gen.params, false);
        let (out, ..) = generate_graph(&state.gen, &mut g, &mut s, &z, &noise, batch.pattern.as_ref())?;
        g.value(out).clone()
    };
    let real_shifts = random_shifts(&mut state.rng, n, res);
    let fake_shifts = random_shifts(&mut state.rng, n, res);
    let real_t = translate_batch(&batch.maps, &real_shifts)?;
    let real_p = batch.pattern.as_ref().map(|p| translate_batch(p, &real_shifts)).transpose()?;
    let fake_t = translate_batch(&fake, &fake_shifts)?;
    let fake_p = batch.pattern.as_ref().map(|p| translate_batch(p, &fake_shifts)).transpose()?;
    for (fk, shifts, before, pb, after, pa) in [
        (false, &real_shifts, &batch.maps, batch.pattern.as_ref(), &real_t, real_p.as_ref()),
        (true, &fake_shifts, &fake, batch.pattern.as_ref(), &fake_t, fake_p.as_ref()),
    ] {
        obs.disc_input(&DiscInput {
            phase: Phase::Discriminator,
            fake: fk,
            shifts,
            maps_before: before,
            pattern_before: pb,
            maps: after,
            pattern: pa,
        });
    }
    let (d_loss, mut d_grads) = {
        let mut g = Graph::new();
        let mut s = Scope::new(&state.disc.params, true);
        let rv = g.constant(real_t.clone());
        let rp = real_p.as_ref().map(|p| g.constant(p.clone()));
        let fv = g.constant(fake_t);
        let fp = fake_p.as_ref().map(|p| g.constant(p.clone()));
        let rl = state.disc.forward_graph(&mut g, &mut s, rv, rp)?;
        let fl = state.disc.forward_graph(&mut g, &mut s, fv, fp)?;
        let loss = d_logistic_loss(&mut g, rl, fl)?;
        let val = check_finite(step, "discriminator loss", g.value(loss).item() as f64)?;
        let mut gr = g.backward(loss)?;
        (val, s.collect(&mut gr))
    };
    let mut r1 = None;
    if spec.r1_gamma > 0.0 && step % spec.r1_cadence == 0 {
        let out = r1_penalty(&state.disc, &state.disc.params, &real_t, real_p.as_ref(), spec.r1_gamma, true)?;
        r1 = Some(check_finite(step, "R1 penalty", out.value)?);
        let k = spec.r1_cadence as f32;
        for (a, b) in d_grads.iter_mut().zip(&out.grads) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += k * y);
        }
    }
    state.opt_d.step_params(&mut state.disc.params, &d_grads)?;

    // generator
    let (z, noise) = draw_latents(&state.gen, n, &mut state.rng)?;
    let shifts = random_shifts(&mut state.rng, n, res);
    let use_shift = conditional && spec.shift_weight > 0.0 && step % spec.shift_cadence == 0;
    let l_shift = Shift2D::new(state.rng.gen_range(0..res as i64), state.rng.gen_range(0..res as i64));
    let (g_loss, shift_weighted, g_grads) = {
        let mut g = Graph::new();
        let mut s = Scope::new(&state.gen.params, true);
        let mut ds = Scope::new(&state.disc.params, false);
        let (out, ws, nv, pv) = generate_graph(&state.gen, &mut g, &mut s, &z, &noise, batch.pattern.as_ref())?;
        let ft = translate_batch_graph(&mut g, out, &shifts)?;
        let fp = batch.pattern.as_ref().map(|p| translate_batch(p, &shifts)).transpose()?;
        let before = g.value(out).clone();
        let after = g.value(ft).clone();
        obs.disc_input(&DiscInput {
            phase: Phase::Generator,
            fake: true,
            shifts: &shifts,
            maps_before: &before,
            pattern_before: batch.pattern.as_ref(),
            maps: &after,
            pattern: fp.as_ref(),
        });
        let fpv = fp.map(|p| g.constant(p));
        let logits = state.disc.forward_graph(&mut g, &mut ds, ft, fpv)?;
        let adv = g_nonsat_loss(&mut g, logits);
        let adv_val = check_finite(step, "generator loss", g.value(adv).item() as f64)?;
        let (total, sw) = if use_shift {
            let ls = shift_loss_graph(&state.gen, &mut g, &mut s, &ws, &nv, pv, l_shift)?;
            let weighted = g.scale(ls, spec.shift_weight);
            let sw = check_finite(step, "shift loss", g.value(weighted).item() as f64)?;
            (g.add(adv, weighted)?, Some(sw))
        } else {
            (adv, None)
        };
        let mut gr = g.backward(total)?;
        (adv_val, sw, s.collect(&mut gr))
    };
    state.opt_g.step_params(&mut state.gen.params, &g_grads)?;
    state.gen_ema.lerp_towards(&state.gen.params, spec.ema_beta());
    state.step += 1;
    Ok(StepStats {
        step,
        images: state.step * n as u64,
        d_loss,
        g_loss,
        r1,
        shift_weighted,
        sample_seam: None,
    })
}

// ---------------------------------------------------------------------------
// checkpoints

fn param_names(p: &Params<f32>) -> Vec<String> {
    p.iter().map(|(n, _)| n.to_string()).collect()
}

fn push_params(a: &mut Archive, prefix: &str, p: &Params<f32>) -> Result<()> {
    for (n, t) in p.iter() {
        a.push(format!("{prefix}/{n}"), t.clone())?;
    }
    Ok(())
}

fn load_params(a: &Archive, prefix: &str, p: &mut Params<f32>) -> Result<()> {
    p.load_named(|n| a.tensor(&format!("{prefix}/{n}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Schema { expected: "64 hex digits".into(), found: s.into() };
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn checkpoint_archive(state: &TrainState) -> Result<Archive> {
    let rng = RngState {
        seed: hex(&state.rng.get_seed()),
        stream: state.rng.get_stream(),
        word_pos: state.rng.get_word_pos().to_string(),
    };
    let meta = json!({
        "spec": state.spec,
        "step": state.step,
        "rng": rng,
        "opt_g_t": state.opt_g.t,
        "opt_d_t": state.opt_d.t,
    });
    let mut a = Archive::new(CHECKPOINT_SCHEMA, meta);
    push_params(&mut a, "g", &state.gen.params)?;
    push_params(&mut a, "g_ema", &state.gen_ema)?;
    push_params(&mut a, "d", &state.disc.params)?;
    state.opt_g.save(&mut a, "opt_g", &param_names(&state.gen.params))?;
    state.opt_d.save(&mut a, "opt_d", &param_names(&state.disc.params))?;
    Ok(a)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint_archive(state)?.write(path)
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::Schema { expected: format!("checkpoint meta `{key}`"), found: "nothing".into() })?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn state_from_archive(a: &Archive) -> Result<TrainState> {
    let spec: TrainSpec = meta_field(&a.meta, "spec")?;
    let mut state = TrainState::new(spec)?;
    state.step = meta_field(&a.meta, "step")?;
    load_params(a, "g", &mut state.gen.params)?;
    load_params(a, "g_ema", &mut state.gen_ema)?;
    load_params(a, "d", &mut state.disc.params)?;
    let gn = param_names(&state.gen.params);
    let dn = param_names(&state.disc.params);
    state.opt_g.load(a, "opt_g", &gn, meta_field(&a.meta, "opt_g_t")?)?;
    state.opt_d.load(a, "opt_d", &dn, meta_field(&a.meta, "opt_d_t")?)?;
    let rs: RngState = meta_field(&a.meta, "rng")?;
    let mut rng = ChaCha8Rng::from_seed(unhex(&rs.seed)?);
    rng.set_stream(rs.stream);
    let wp: u128 = rs.word_pos.parse().map_err(|_| Error::Schema { expected: "integer word_pos".into(), found: rs.word_pos })?;
    rng.set_word_pos(wp);
    state.rng = rng;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    state_from_archive(&Archive::read(path, Some(CHECKPOINT_SCHEMA))?)
}

/// Generator from a checkpoint, with EMA weights when `ema` is set.
pub fn load_generator(path: &Path, ema: bool) -> Result<(Generator, TrainSpec)> {
    let a = Archive::read(path, Some(CHECKPOINT_SCHEMA))?;
    let spec: TrainSpec = meta_field(&a.meta, "spec")?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gen = Generator::new(spec.generator.clone(), &mut rng)?;
    load_params(&a, if ema { "g_ema" } else { "g" }, &mut gen.params)?;
    Ok((gen, spec))
}

// ---------------------------------------------------------------------------
// loop

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.tsr"))
}

/// Seam score of one EMA sample (first item of the stream's batch 0).
fn sample_seam(state: &TrainState, data: &Dataset) -> Result<f64> {
    let gen = state.ema_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(state.spec.seed);
    let s = data.get(0)?;
    let p = if gen.cfg.conditional { s.pattern.as_ref() } else { None };
    let m = gen.generate(&gen.sample_z(&mut rng), p, &mut rng)?;
    seam_score(&m.to_batch())
}

/// Runs `state` to `spec.total_steps`, appending metrics to
/// `out/metrics.jsonl` and writing checkpoints. A fresh run writes the step-0
/// checkpoint first. On a non-finite loss the current state is saved as
/// `abort_{step}.tsr` and the error is returned.
pub fn train(mut state: TrainState, out: &Path, obs: &mut dyn TrainObserver) -> Result<TrainState> {
    fs::create_dir_all(out)?;
    fs::write(out.join("spec.json"), serde_json::to_vec_pretty(&state.spec)?)?;
    let data = state.spec.dataset()?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join("metrics.jsonl"))?;
    if state.step == 0 {
        save_checkpoint(&state, &checkpoint_path(out, 0))?;
    }
    let every = state.spec.checkpoint_every;
    while state.step < state.spec.total_steps {
        let batch = batch_for_step(&data, state.step, state.spec.batch_size)?;
        let mut stats = match train_step(&mut state, &batch, obs) {
            Ok(s) => s,
            Err(e @ Error::NonFinite(_)) => {
                save_checkpoint(&state, &out.join(format!("abort_{:06}.tsr", state.step)))?;
                writeln!(log, "{}", json!({"step": state.step, "error": e.to_string()}))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = state.step;
        let emit = done == state.spec.total_steps || (every > 0 && done % every == 0);
        if emit {
            stats.sample_seam = Some(sample_seam(&state, &data)?);
        }
        writeln!(log, "{}", serde_json::to_string(&stats)?)?;
        if emit {
            log.flush()?;
            save_checkpoint(&state, &checkpoint_path(out, done))?;
        }
    }
    log.flush()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(class: MaterialClass) -> TrainSpec {
        let mut s = TrainSpec::desk(class, 32);
        s.generator.channel_base = 64;
        s.generator.channel_max = 4;
        s.generator.latent_dim = 8;
        s.generator.style_dim = 8;
        s.generator.mapping_layers = 2;
        s.discriminator = DiscriminatorConfig::for_generator(&s.generator);
        s.batch_size = 2;
        s.total_steps = 6;
        s.checkpoint_every = 3;
        s.r1_cadence = 2;
        s.shift_cadence = 2;
        s.seed = 5;
        s
    }

    #[test]
    fn step_changes_generator_and_zero_lr_does_not() {
        let spec = tiny_spec(MaterialClass::Tile);
        let data = spec.dataset().unwrap();
        let mut st = TrainState::new(spec.clone()).unwrap();
        let before = st.gen.params.clone();
        let b = batch_for_step(&data, 0, 2).unwrap();
        train_step(&mut st, &b, &mut ()).unwrap();
        let delta: f64 = before
            .tensors()
            .iter()
            .zip(st.gen.params.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        assert!(delta > 0.0);

        let mut frozen = spec;
        frozen.g_opt.lr = 0.0;
        frozen.d_opt.lr = 0.0;
        let mut st = TrainState::new(frozen).unwrap();
        let (g0, d0) = (st.gen.params.clone(), st.disc.params.clone());
        train_step(&mut st, &b, &mut ()).unwrap();
        assert_eq!(st.gen.params, g0);
        assert_eq!(st.disc.params, d0);
    }

    #[test]
    fn cadences_and_determinism() {
        let spec = tiny_spec(MaterialClass::Tile);
        let run = || {
            let data = spec.dataset().unwrap();
            let mut st = TrainState::new(spec.clone()).unwrap();
            (0..5)
                .map(|k| train_step(&mut st, &batch_for_step(&data, k, 2).unwrap(), &mut ()).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.r1.is_some(), s.step % 2 == 0);
            assert_eq!(s.shift_weighted.is_some(), s.step % 2 == 0);
        }
    }

    #[test]
    fn unconditional_run_has_no_shift_term() {
        let spec = tiny_spec(MaterialClass::Stone);
        let data = spec.dataset().unwrap();
        let mut st = TrainState::new(spec).unwrap();
        for k in 0..3 {
            let s = train_step(&mut st, &batch_for_step(&data, k, 2).unwrap(), &mut ()).unwrap();
            assert!(s.shift_weighted.is_none());
        }
    }

    struct Recorder(Vec<(Phase, bool, bool)>);

    impl TrainObserver for Recorder {
        fn disc_input(&mut self, e: &DiscInput) {
            let maps_ok = translate_batch(e.maps_before, e.shifts).unwrap() == *e.maps;
            let pat_ok = match (e.pattern_before, e.pattern) {
                (Some(a), Some(b)) => translate_batch(a, e.shifts).unwrap() == *b,
                (None, None) => true,
                _ => false,
            };
            self.0.push((e.phase, e.fake, maps_ok && pat_ok));
        }
    }

    #[test]
    fn maps_and_pattern_share_each_translation() {
        let spec = tiny_spec(MaterialClass::Tile);
        let data = spec.dataset().unwrap();
        let mut st = TrainState::new(spec).unwrap();
        let mut rec = Recorder(Vec::new());
        train_step(&mut st, &batch_for_step(&data, 0, 2).unwrap(), &mut rec).unwrap();
        assert_eq!(rec.0.len(), 3);
        assert!(rec.0.iter().all(|r| r.2));
        assert_eq!(rec.0[0].0, Phase::Discriminator);
        assert_eq!(rec.0[2], (Phase::Generator, true, true));
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let spec = tiny_spec(MaterialClass::Tile);
        let data = spec.dataset().unwrap();
        let mut st = TrainState::new(spec).unwrap();
        for k in 0..2 {
            train_step(&mut st, &batch_for_step(&data, k, 2).unwrap(), &mut ()).unwrap();
        }
        let a = checkpoint_archive(&st).unwrap().to_bytes().unwrap();
        let back = state_from_archive(&Archive::from_bytes(&a, Some(CHECKPOINT_SCHEMA)).unwrap()).unwrap();
        let b = checkpoint_archive(&back).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        assert_eq!(back.gen.params, st.gen.params);
        assert_ne!(back.gen_ema, back.gen.params);
        let mut wrong = Archive::from_bytes(&a, None).unwrap();
        wrong.schema = "tessera.checkpoint/0".into();
        let bytes = wrong.to_bytes().unwrap();
        assert!(matches!(Archive::from_bytes(&bytes, Some(CHECKPOINT_SCHEMA)), Err(Error::Schema { .. })));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let spec = tiny_spec(MaterialClass::Tile);
        let dir = tempfile::tempdir().unwrap();
        let full = train(TrainState::new(spec.clone()).unwrap(), &dir.path().join("full"), &mut ()).unwrap();
        let part = dir.path().join("part");
        let mut half = spec.clone();
        half.total_steps = 3;
        train(TrainState::new(half).unwrap(), &part, &mut ()).unwrap();
        let mut st = load_checkpoint(&checkpoint_path(&part, 3)).unwrap();
        st.spec.total_steps = 6;
        let resumed = train(st, &part, &mut ()).unwrap();
        assert_eq!(full.gen.params, resumed.gen.params);
        assert_eq!(full.disc.params, resumed.disc.params);
        let lines = |p: &Path| -> Vec<serde_json::Value> {
            fs::read_to_string(p.join("metrics.jsonl"))
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect()
        };
        let (a, b) = (lines(&dir.path().join("full")), lines(&part));
        assert_eq!(a.len(), 6);
        assert_eq!(b.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x["d_loss"], y["d_loss"]);
            assert_eq!(x["g_loss"], y["g_loss"]);
        }
        for x in &a {
            let step = x["step"].as_u64().unwrap();
            assert_eq!(x.get("shift_weighted").is_some(), step % 2 == 0);
        }
        assert!(checkpoint_path(&dir.path().join("full"), 0).is_file());
        assert!(checkpoint_path(&dir.path().join("full"), 6).is_file());
        let (gen, _) = load_generator(&checkpoint_path(&dir.path().join("full"), 6), true).unwrap();
        assert_eq!(gen.params, full.gen_ema);
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec(MaterialClass::Tile);
        s.generator.conditional = false;
        assert!(s.validate().is_err());
        let mut s = tiny_spec(MaterialClass::Tile);
        s.schema = "tessera.train/0".into();
        assert!(matches!(s.validate(), Err(Error::Schema { .. })));
        let s = tiny_spec(MaterialClass::Leather);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TrainSpec>(&j).unwrap(), s);
    }
}
