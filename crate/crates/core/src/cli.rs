//! Command line front end.
//!
//! Each subcommand builds a JSON config from its defaults, overlays an
//! optional `--config` file, then applies its named flags, any `--set
//! key=value` pairs and the global `--seed`, in that order.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::Archive;
use crate::config;
use crate::data::{make_dataset, ClassConfig};
use crate::diagnostics::{conditional_report, equivariance_error, seam_score};
use crate::error::{Error, Result};
use crate::invert::{invert, InvertSpec};
use crate::material::{
    load_maps, load_pattern, save_maps, save_rgb_png, tile_maps, tile_tensor, ConditionPattern, MapsMeta,
    MaterialClass, MaterialSample,
};
use crate::networks::Generator;
use crate::periodic_ops::Shift2D;
use crate::render::{render, RenderSetup};
use crate::train::{load_checkpoint, load_generator, train, TrainSpec, TrainState};

#[derive(Debug, Parser)]
#[command(name = "tessera", version, about = "Tileable material generation, rendering and capture")]
pub struct Cli {
    /// Seed for every random choice of the invocation; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON config overlaid on the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set generator.channel_max=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural samples as material directories.
    MakeDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        class: Option<MaterialClass>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator and discriminator.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Preset used when no config is given.
        #[arg(long)]
        class: Option<MaterialClass>,
        /// Resolution of the preset used when no config is given.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Train on a directory of material samples instead of the procedural stream.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Continue from a checkpoint; the stored spec wins over the config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate material directories with renders from a checkpoint.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        pattern: Option<PathBuf>,
        /// Generation domain; defaults to the pattern or training resolution.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a generator to a single flash photograph.
    Invert {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        pattern: Option<PathBuf>,
        /// Side of the target after crop and resize.
        #[arg(long)]
        size: Option<usize>,
        /// Generation domain, at least the target size.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a material directory under the flash.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a material directory `nx` by `ny` times and render the result.
    Tile {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a JSON report on a material directory or a checkpoint.
    Check {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in", conflicts_with = "checkpoint")]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

pub const MAKE_DATASET_SCHEMA: &str = "tessera.make-dataset/1";
pub const SAMPLE_SCHEMA: &str = "tessera.sample/1";
pub const RENDER_SCHEMA: &str = "tessera.render/1";
pub const TILE_SCHEMA: &str = "tessera.tile/1";
pub const CHECK_SCHEMA: &str = "tessera.check/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakeDatasetConfig {
    pub schema: String,
    pub class: ClassConfig,
    pub resolution: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for MakeDatasetConfig {
    fn default() -> Self {
        Self {
            schema: MAKE_DATASET_SCHEMA.into(),
            class: ClassConfig::preset(MaterialClass::Tile),
            resolution: 64,
            count: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub schema: String,
    pub checkpoint: Option<PathBuf>,
    pub pattern: Option<PathBuf>,
    pub count: usize,
    pub resolution: Option<usize>,
    pub use_ema: bool,
    /// Render settings; the image size always follows the samples.
    pub render: Option<RenderSetup>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            schema: SAMPLE_SCHEMA.into(),
            checkpoint: None,
            pattern: None,
            count: 4,
            resolution: None,
            use_ema: true,
            render: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub schema: String,
    /// Render settings; the image size follows the maps and, when unset, the
    /// height amplitude follows the directory metadata.
    pub setup: Option<RenderSetup>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { schema: RENDER_SCHEMA.into(), setup: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub schema: String,
    pub nx: usize,
    pub ny: usize,
    pub setup: Option<RenderSetup>,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { schema: TILE_SCHEMA.into(), nx: 2, ny: 2, setup: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    pub schema: String,
    /// Random stride-multiple shifts tried for the equivariance check.
    pub trials: usize,
    /// Samples for the seam and conditioning statistics.
    pub samples: usize,
    pub use_ema: bool,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { schema: CHECK_SCHEMA.into(), trials: 8, samples: 8, use_ema: true, seed: 0 }
    }
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Schema { expected: expected.into(), found: found.into() });
    }
    Ok(())
}

/// Defaults, then the config file, then `flags`, `--set` pairs and the seed.
fn build<T: Serialize + serde::de::DeserializeOwned>(
    defaults: Value,
    args: &ConfigArgs,
    flags: Vec<(&str, Value)>,
    seed: Option<u64>,
) -> Result<T> {
    let mut v = defaults;
    if let Some(p) = &args.config {
        config::merge(&mut v, config::read_value(p)?);
    }
    for (k, x) in flags {
        config::set_key(&mut v, k, x)?;
    }
    for s in &args.set {
        let (k, x) = config::parse_assignment(s)?;
        config::set_key(&mut v, &k, x)?;
    }
    if let Some(s) = seed {
        config::set_key(&mut v, "seed", json!(s))?;
    }
    config::from_value(v)
}

fn flag<T: Serialize>(key: &'static str, v: &Option<T>) -> Option<(&'static str, Value)> {
    v.as_ref().map(|x| (key, serde_json::to_value(x).expect("flag values serialize")))
}

fn flags<const N: usize>(list: [Option<(&'static str, Value)>; N]) -> Vec<(&'static str, Value)> {
    list.into_iter().flatten().collect()
}

fn setup_for(base: Option<&RenderSetup>, size: usize, amplitude: f64) -> RenderSetup {
    match base {
        Some(s) => RenderSetup { image_size: size, ..s.clone() },
        None => RenderSetup { amplitude, ..RenderSetup::new(size) },
    }
}

fn write_render(maps: &crate::material::MaterialMaps, setup: &RenderSetup, path: &Path) -> Result<()> {
    save_rgb_png(&render(maps, setup)?, 1.0, path)
}

fn run_make_dataset(c: MakeDatasetConfig, out: &Path) -> Result<Value> {
    check_schema(&c.schema, MAKE_DATASET_SCHEMA)?;
    make_dataset(&c.class, c.resolution, c.count, c.seed, out)?;
    Ok(json!({"written": c.count, "out": out}))
}

fn run_train(spec: TrainSpec, resume: Option<&Path>, steps: Option<u64>, out: &Path) -> Result<Value> {
    let state = match resume {
        Some(p) => {
            let mut st = load_checkpoint(p)?;
            if let Some(s) = steps {
                st.spec.total_steps = s;
            }
            st
        }
        None => TrainState::new(spec)?,
    };
    let st = train(state, out, &mut ())?;
    Ok(json!({"steps": st.step, "out": out}))
}

fn run_sample(c: SampleConfig, out: &Path) -> Result<Value> {
    check_schema(&c.schema, SAMPLE_SCHEMA)?;
    let ckpt = c.checkpoint.as_ref().ok_or_else(|| Error::config("checkpoint", "no checkpoint given"))?;
    let (gen, spec) = load_generator(ckpt, c.use_ema)?;
    let pattern = c.pattern.as_deref().map(load_pattern).transpose()?;
    if gen.cfg.conditional && pattern.is_none() {
        return Err(Error::PatternRequired);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let domain = match (&pattern, c.resolution) {
        (Some(p), Some(r)) if p.resolution() != r => {
            return Err(Error::config("resolution", format!("pattern is {}px", p.resolution())))
        }
        (Some(p), _) => p.resolution(),
        (None, r) => r.unwrap_or(gen.cfg.out_resolution),
    };
    let setup = setup_for(c.render.as_ref(), domain, spec.class.amplitude);
    std::fs::create_dir_all(out)?;
    for i in 0..c.count {
        let b = gen.bundle_from_z(gen.sample_z(&mut rng), domain, &mut rng)?;
        let maps = gen.synthesize(&b, pattern.as_ref())?;
        let dir = out.join(format!("sample_{i:03}"));
        let meta = MapsMeta::for_maps(spec.class.class, spec.class.amplitude, &maps);
        let sample = MaterialSample { maps, pattern: pattern.clone(), meta };
        save_maps(&sample, &dir)?;
        write_render(&sample.maps, &setup, &dir.join("render.png"))?;
    }
    Ok(json!({"written": c.count, "resolution": domain, "out": out}))
}

fn run_invert(spec: InvertSpec, out: &Path) -> Result<Value> {
    let (r, gen) = invert(&spec)?;
    let (_, train_spec) = match &spec.checkpoint {
        Some(p) => load_generator(p, spec.use_ema)?,
        None => unreachable!("invert checks the checkpoint"),
    };
    let pattern = spec.pattern.as_deref().map(load_pattern).transpose()?;
    let meta = MapsMeta::for_maps(train_spec.class.class, train_spec.class.amplitude, &r.maps);
    let sample = MaterialSample { maps: r.maps.clone(), pattern, meta };
    save_maps(&sample, out)?;
    save_rgb_png(&r.rerender, 1.0, &out.join("rerender.png"))?;
    std::fs::write(out.join("trajectory.json"), serde_json::to_string_pretty(&r.trajectory)? + "\n")?;
    let mut a = Archive::new("tessera.latent/1", json!({"num_ws": gen.cfg.num_ws()}));
    a.push("w_plus", r.bundle.w_plus.clone())?;
    for (k, n) in r.bundle.noise.iter().enumerate() {
        a.push(format!("noise/{k}"), n.clone())?;
    }
    a.write(&out.join("latent.tsr"))?;
    Ok(json!({
        "initial_loss": r.initial,
        "final_loss": r.final_loss,
        "iterations": r.trajectory.len(),
        "seam_score": seam_score(r.maps.tensor())?,
        "out": out,
    }))
}

fn run_render(c: RenderConfig, input: &Path, out: &Path) -> Result<Value> {
    check_schema(&c.schema, RENDER_SCHEMA)?;
    let s = load_maps(input)?;
    let (h, w) = s.maps.size();
    if h != w {
        return Err(Error::contract(format!("the flash renderer needs square maps, got {h}x{w}")));
    }
    let setup = setup_for(c.setup.as_ref(), h, s.meta.amplitude);
    setup.validate()?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_render(&s.maps, &setup, out)?;
    Ok(json!({"out": out, "size": h}))
}

fn run_tile(c: TileConfig, input: &Path, out: &Path) -> Result<Value> {
    check_schema(&c.schema, TILE_SCHEMA)?;
    if c.nx == 0 || c.ny == 0 {
        return Err(Error::config("nx", "tile counts must be positive"));
    }
    let s = load_maps(input)?;
    let maps = tile_maps(&s.maps, c.nx, c.ny)?;
    let pattern = s
        .pattern
        .as_ref()
        .filter(|_| c.nx == c.ny)
        .map(|p| ConditionPattern::new(tile_tensor(p.tensor(), c.nx, c.ny)?))
        .transpose()?;
    let meta = MapsMeta::for_maps(s.meta.class, s.meta.amplitude, &maps);
    let tiled = MaterialSample { maps, pattern, meta };
    save_maps(&tiled, out)?;
    let (h, w) = tiled.maps.size();
    let rendered = h == w;
    if rendered {
        let setup = setup_for(c.setup.as_ref(), h, s.meta.amplitude);
        write_render(&tiled.maps, &setup, &out.join("render.png"))?;
    }
    Ok(json!({"out": out, "height": h, "width": w, "rendered": rendered}))
}

fn maps_report(s: &MaterialSample) -> Result<Value> {
    let m = &s.maps;
    let mut seams = serde_json::Map::new();
    seams.insert("albedo".into(), json!(seam_score(&m.tensor().narrow(0, 0, 3)?)?));
    for (name, c) in [("height", 3), ("roughness", 4)] {
        seams.insert(name.into(), json!(seam_score(&m.channel(c))?));
    }
    if m.has_metallic() {
        seams.insert("metallic".into(), json!(seam_score(&m.channel(5))?));
    }
    let (h, w) = m.size();
    let render_seam = if h == w {
        let setup = setup_for(None, h, s.meta.amplitude);
        Some(seam_score(&render(m, &setup)?)?)
    } else {
        None
    };
    Ok(json!({"kind": "maps", "height": h, "width": w, "seam_score": seams, "render_seam_score": render_seam}))
}

fn checkpoint_report(gen: &Generator, spec: &TrainSpec, c: &CheckConfig) -> Result<Value> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let res = gen.cfg.out_resolution;
    let stride = if gen.cfg.conditional { gen.cfg.encoder_stride } else { 1 << gen.cfg.num_up() };
    let steps = (res / stride).max(1) as i64;
    let (mut eq_max, mut seams) = (0f64, Vec::new());
    for k in 0..c.trials.max(c.samples) {
        let p = if gen.cfg.conditional {
            spec.class.generate(res, rng.gen())?.pattern
        } else {
            None
        };
        let b = gen.bundle_from_z(gen.sample_z(&mut rng), res, &mut rng)?;
        if k < c.trials {
            let s = Shift2D::new(rng.gen_range(0..steps) * stride as i64, rng.gen_range(0..steps) * stride as i64);
            eq_max = eq_max.max(equivariance_error(gen, &b, p.as_ref(), s)?);
        }
        if k < c.samples {
            seams.push(seam_score(gen.synthesize(&b, p.as_ref())?.tensor())?);
        }
    }
    let conditional = if gen.cfg.conditional && c.samples > 0 {
        Some(conditional_report(gen, &spec.class, c.samples, c.seed ^ 0x5a5a)?)
    } else {
        None
    };
    Ok(json!({
        "kind": "checkpoint",
        "class": spec.class.class.name,
        "resolution": res,
        "circular": gen.audit_circular()?,
        "equivariance_max_error": eq_max,
        "sample_seam_scores": seams,
        "conditional": conditional,
    }))
}

fn run_check(c: CheckConfig, input: Option<&Path>, checkpoint: Option<&Path>) -> Result<Value> {
    check_schema(&c.schema, CHECK_SCHEMA)?;
    match (input, checkpoint) {
        (Some(dir), None) => maps_report(&load_maps(dir)?),
        (None, Some(p)) => {
            let (gen, spec) = load_generator(p, c.use_ema)?;
            checkpoint_report(&gen, &spec, &c)
        }
        _ => Err(Error::config("in", "give either --in or --checkpoint")),
    }
}

/// Runs one parsed invocation and returns its JSON summary.
pub fn execute(cli: Cli) -> Result<Value> {
    let seed = cli.seed;
    match cli.command {
        Command::MakeDataset { cfg, class, count, resolution, out } => {
            let mut fl = flags([flag("count", &count), flag("resolution", &resolution)]);
            if let Some(k) = class {
                fl.insert(0, ("class", config::to_value(&ClassConfig::preset(k))?));
            }
            let c: MakeDatasetConfig = build(config::to_value(&MakeDatasetConfig::default())?, &cfg, fl, seed)?;
            run_make_dataset(c, &out)
        }
        Command::Train { cfg, class, resolution, steps, batch_size, checkpoint_every, data_dir, resume, out } => {
            if cfg.config.is_some() && (class.is_some() || resolution.is_some()) {
                return Err(Error::config("class", "--class and --resolution pick a preset and cannot be combined with --config"));
            }
            let base = TrainSpec::desk(class.unwrap_or(MaterialClass::Tile), resolution.unwrap_or(64));
            let data = data_dir.map(|p| json!({"kind": "directory", "path": p}));
            let fl = flags([
                flag("total_steps", &steps),
                flag("batch_size", &batch_size),
                flag("checkpoint_every", &checkpoint_every),
                data.map(|d| ("data", d)),
            ]);
            let spec: TrainSpec = build(config::to_value(&base)?, &cfg, fl, seed)?;
            run_train(spec, resume.as_deref(), steps, &out)
        }
        Command::Sample { cfg, checkpoint, count, pattern, resolution, out } => {
            let fl = flags([
                flag("checkpoint", &checkpoint),
                flag("count", &count),
                flag("pattern", &pattern),
                flag("resolution", &resolution),
            ]);
            let c: SampleConfig = build(config::to_value(&SampleConfig::default())?, &cfg, fl, seed)?;
            run_sample(c, &out)
        }
        Command::Invert { cfg, checkpoint, target, pattern, size, resolution, iters, out_dir } => {
            let mut fl = flags([
                flag("checkpoint", &checkpoint),
                flag("target", &target),
                flag("pattern", &pattern),
                flag("target_size", &size),
                flag("output_resolution", &resolution),
                flag("iterations", &iters),
            ]);
            // the render size always follows the generation domain
            if let Some(s) = size {
                fl.push(("render.image_size", json!(s)));
            }
            let spec: InvertSpec = build(config::to_value(&InvertSpec::default())?, &cfg, fl, seed)?;
            run_invert(spec, &out_dir)
        }
        Command::Render { cfg, input, out } => {
            let c: RenderConfig = build(config::to_value(&RenderConfig::default())?, &cfg, vec![], None)?;
            run_render(c, &input, &out)
        }
        Command::Tile { cfg, input, nx, ny, out } => {
            let fl = flags([flag("nx", &nx), flag("ny", &ny)]);
            let c: TileConfig = build(config::to_value(&TileConfig::default())?, &cfg, fl, None)?;
            run_tile(c, &input, &out)
        }
        Command::Check { cfg, input, checkpoint } => {
            let c: CheckConfig = build(config::to_value(&CheckConfig::default())?, &cfg, vec![], seed)?;
            run_check(c, input.as_deref(), checkpoint.as_deref())
        }
    }
}

/// Error line printed on failure: `error: <category>: <message>` on one line.
pub fn error_line(category: &str, message: &str) -> String {
    let msg = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error: {category}: {msg}")
}

/// Parses `argv`, runs it and maps the outcome to an exit code. The JSON
/// summary goes to stdout, the error line to stderr.
pub fn main_with(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        ExitCode::from(2)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                kind => {
                    let cat = if kind == ErrorKind::InvalidSubcommand { "unknown-subcommand" } else { "usage" };
                    let text = e.to_string();
                    let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("{}", error_line(cat, first));
                    ExitCode::from(2)
                }
            };
        }
    };
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.category(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("tessera").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn unknown_subcommand_is_rejected() {
        let e = Cli::try_parse_from(["tessera", "paint"]).unwrap_err();
        assert_eq!(e.kind(), clap::error::ErrorKind::InvalidSubcommand);
    }

    #[test]
    fn flags_override_config_and_seed_wins() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"count": 7, "seed": 3, "resolution": 32}"#).unwrap();
        let c = cfg.to_str().unwrap();
        let cli = parse(&["--seed", "9", "make-dataset", "--config", c, "--count", "2", "--out", "x"]);
        let Command::MakeDataset { cfg, count, class, resolution, .. } = cli.command else { panic!() };
        let fl = flags([flag("count", &count), flag("resolution", &resolution)]);
        assert!(class.is_none());
        let m: MakeDatasetConfig = build(config::to_value(&MakeDatasetConfig::default()).unwrap(), &cfg, fl, cli.seed).unwrap();
        assert_eq!((m.count, m.seed, m.resolution), (2, 9, 32));
    }

    #[test]
    fn bad_key_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"class": {"augment": {"translate": "yes"}}}"#).unwrap();
        let args = ConfigArgs { config: Some(cfg), set: vec![] };
        let e = build::<MakeDatasetConfig>(config::to_value(&MakeDatasetConfig::default()).unwrap(), &args, vec![], None)
            .unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "class.augment.translate"), "{e}");
        let args = ConfigArgs { config: None, set: vec!["sample_count=3".into()] };
        let e = build::<MakeDatasetConfig>(config::to_value(&MakeDatasetConfig::default()).unwrap(), &args, vec![], None)
            .unwrap_err();
        assert!(e.to_string().contains("sample_count"), "{e}");
    }

    #[test]
    fn error_line_is_single_line() {
        let l = error_line("config", "bad\nthing   here");
        assert_eq!(l, "error: config: bad thing here");
    }
}
