//! Procedural, torus-periodic training materials with paired condition
//! patterns, plus the augmentation applied when serving them.
//!
//! Every generator is a pure function of its parameters and a seed. All
//! layouts are expressed in continuous coordinates on the unit torus, so the
//! emitted maps tile for any resolution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::{
    save_maps, ConditionPattern, MapsMeta, MaterialClass, MaterialClassSpec, MaterialMaps, MaterialSample, CH_ALBEDO,
    CH_HEIGHT, CH_ROUGHNESS, DEFAULT_AMPLITUDE,
};
use crate::periodic_ops::{roll, Shift2D};
use crate::tensor::Tensor;

pub const CLASS_SCHEMA: &str = "tessera.class/1";

/// Closed interval `[lo, hi]`.
pub type Range = [f32; 2];

fn uniform(rng: &mut impl Rng, r: Range) -> f32 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn check_range(path: &str, r: Range, unit: bool) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
        return Err(Error::config(path, "range must satisfy lo <= hi"));
    }
    if unit && (r[0] < 0.0 || r[1] > 1.0) {
        return Err(Error::config(path, "range must lie in [0, 1]"));
    }
    Ok(())
}

fn smoothstep(x: f32) -> f32 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Shortest signed distance on the unit circle.
fn wrap_delta(a: f64) -> f64 {
    a - a.round()
}

// ---------------------------------------------------------------------------
// periodic value noise

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Lattice cells per period at the coarsest octave.
    pub cells: usize,
    pub octaves: usize,
    /// Amplitude ratio between successive octaves.
    pub persistence: f32,
    pub height_range: Range,
    pub albedo_a: [f32; 3],
    pub albedo_b: [f32; 3],
    pub roughness_range: Range,
    /// Metallic range; used by the metal class only.
    #[serde(default)]
    pub metallic_range: Option<Range>,
}

impl NoiseParams {
    pub fn stone() -> Self {
        Self {
            cells: 4,
            octaves: 4,
            persistence: 0.5,
            height_range: [0.2, 0.8],
            albedo_a: [0.35, 0.33, 0.3],
            albedo_b: [0.6, 0.58, 0.52],
            roughness_range: [0.5, 0.9],
            metallic_range: None,
        }
    }

    pub fn metal() -> Self {
        Self {
            cells: 8,
            octaves: 3,
            persistence: 0.45,
            height_range: [0.45, 0.55],
            albedo_a: [0.55, 0.55, 0.56],
            albedo_b: [0.8, 0.78, 0.75],
            roughness_range: [0.15, 0.45],
            metallic_range: Some([0.7, 1.0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.octaves == 0 {
            return Err(Error::config("procedural.cells", "cells and octaves must be positive"));
        }
        check_range("procedural.height_range", self.height_range, true)?;
        check_range("procedural.roughness_range", self.roughness_range, true)?;
        if let Some(m) = self.metallic_range {
            check_range("procedural.metallic_range", m, true)?;
        }
        Ok(())
    }
}

/// Multi-octave value noise on the torus, normalized to `[0, 1]`, as a
/// row-major `res x res` grid. Each octave's lattice gets a random phase so
/// lattice lines (where smoothstep interpolation has zero slope) do not all
/// sit on the wrap seam.
pub fn periodic_value_noise(res: usize, cells: usize, octaves: usize, persistence: f32, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = vec![0f32; res * res];
    let mut amp = 1f32;
    for o in 0..octaves {
        let n = cells << o;
        let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>()).collect();
        let (oy, ox) = (rng.gen::<f64>(), rng.gen::<f64>());
        for i in 0..res {
            let v = (i as f64 + 0.5) / res as f64 * n as f64 + oy;
            let (i0, fy) = (v.floor() as usize % n, smoothstep(v.fract() as f32));
            let i1 = (i0 + 1) % n;
            for j in 0..res {
                let u = (j as f64 + 0.5) / res as f64 * n as f64 + ox;
                let (j0, fx) = (u.floor() as usize % n, smoothstep(u.fract() as f32));
                let j1 = (j0 + 1) % n;
                let top = lattice[i0 * n + j0] * (1.0 - fx) + lattice[i0 * n + j1] * fx;
                let bot = lattice[i1 * n + j0] * (1.0 - fx) + lattice[i1 * n + j1] * fx;
                out[i * res + j] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
        amp *= persistence;
    }
    let (lo, hi) = out.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn lerp_range(r: Range, t: f32) -> f32 {
    lerp(r[0], r[1], t)
}

fn stack_maps(res: usize, albedo: [Vec<f32>; 3], height: Vec<f32>, rough: Vec<f32>, metal: Option<Vec<f32>>) -> Result<MaterialMaps> {
    let mut data = Vec::with_capacity(6 * res * res);
    for ch in albedo {
        data.extend(ch);
    }
    data.extend(height);
    data.extend(rough);
    let c = if let Some(m) = metal {
        data.extend(m);
        6
    } else {
        5
    };
    MaterialMaps::new(Tensor::new(&[c, res, res], data)?)
}

fn check_resolution(res: usize) -> Result<()> {
    if !res.is_power_of_two() || res < 4 {
        return Err(Error::config("resolution", "must be a power of two >= 4"));
    }
    Ok(())
}

fn noise_material(params: &NoiseParams, res: usize, metallic: bool, seed: u64) -> Result<MaterialMaps> {
    params.validate()?;
    check_resolution(res)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = periodic_value_noise(res, params.cells, params.octaves, params.persistence, &mut rng);
    let mix = periodic_value_noise(res, params.cells, params.octaves, params.persistence, &mut rng);
    let r = periodic_value_noise(res, params.cells * 2, params.octaves, params.persistence, &mut rng);
    let albedo = [0, 1, 2].map(|c| mix.iter().map(|&t| lerp(params.albedo_a[c], params.albedo_b[c], t)).collect());
    let height = h.iter().map(|&t| lerp_range(params.height_range, t)).collect();
    let rough = r.iter().map(|&t| lerp_range(params.roughness_range, t)).collect();
    let metal = if metallic {
        let range = params.metallic_range.unwrap_or([0.7, 1.0]);
        let m = periodic_value_noise(res, params.cells, 2, 0.5, &mut rng);
        Some(m.iter().map(|&t| lerp_range(range, t)).collect())
    } else {
        None
    };
    stack_maps(res, albedo, height, rough, metal)
}

/// Unconditional stone: value-noise height, two-tone albedo, rough surface.
pub fn gen_stone(params: &NoiseParams, res: usize, seed: u64) -> Result<MaterialMaps> {
    noise_material(params, res, false, seed)
}

/// Unconditional metal with a metallic map drawn from `metallic_range`.
pub fn gen_metal(params: &NoiseParams, res: usize, seed: u64) -> Result<MaterialMaps> {
    noise_material(params, res, true, seed)
}

// ---------------------------------------------------------------------------
// bricks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrickParams {
    pub rows: usize,
    pub columns: usize,
    /// Horizontal offset of row `r` is `r * row_offset_fraction` bricks;
    /// `rows * row_offset_fraction` must be an integer so the layout wraps.
    pub row_offset_fraction: f32,
    /// Full grout line width in pixels, at least 2.
    pub grout_width_px: f32,
    pub brick_height_range: Range,
    pub grout_height_range: Range,
    pub brick_albedo: [f32; 3],
    /// Per-brick uniform jitter added to every albedo channel.
    pub albedo_jitter: f32,
    pub grout_albedo: [f32; 3],
    pub brick_roughness: Range,
    pub grout_roughness: Range,
    pub bevel_px: f32,
    /// Amplitude of the surface value noise added to the height.
    #[serde(default)]
    pub surface_noise: f32,
}

impl Default for BrickParams {
    fn default() -> Self {
        Self {
            rows: 4,
            columns: 2,
            row_offset_fraction: 0.5,
            grout_width_px: 2.0,
            brick_height_range: [0.7, 0.85],
            grout_height_range: [0.15, 0.25],
            brick_albedo: [0.55, 0.25, 0.18],
            albedo_jitter: 0.08,
            grout_albedo: [0.7, 0.68, 0.64],
            brick_roughness: [0.5, 0.7],
            grout_roughness: [0.8, 0.95],
            bevel_px: 1.0,
            surface_noise: 0.03,
        }
    }
}

impl BrickParams {
    pub fn validate(&self, res: usize) -> Result<()> {
        if self.rows == 0 || self.columns == 0 {
            return Err(Error::config("procedural.rows", "rows and columns must be positive"));
        }
        let k = self.rows as f64 * self.row_offset_fraction as f64;
        if !(0.0..1.0).contains(&self.row_offset_fraction) || (k - k.round()).abs() > 1e-6 {
            return Err(Error::config(
                "procedural.row_offset_fraction",
                "must lie in [0, 1) with rows * fraction an integer",
            ));
        }
        let pitch = (res as f32 / self.rows as f32).min(res as f32 / self.columns as f32);
        if self.grout_width_px >= pitch {
            return Err(Error::config(
                "procedural.grout_width_px",
                format!("grout {} px does not fit a {pitch} px brick pitch", self.grout_width_px),
            ));
        }
        if self.grout_width_px < 2.0 {
            return Err(Error::config("procedural.grout_width_px", "must be at least 2 px"));
        }
        check_range("procedural.brick_height_range", self.brick_height_range, true)?;
        check_range("procedural.grout_height_range", self.grout_height_range, true)?;
        if self.brick_height_range[0] <= self.grout_height_range[1] {
            return Err(Error::config("procedural.brick_height_range", "bricks must sit above the grout"));
        }
        check_range("procedural.brick_roughness", self.brick_roughness, true)?;
        check_range("procedural.grout_roughness", self.grout_roughness, true)?;
        if self.bevel_px < 0.0 || self.albedo_jitter < 0.0 || self.surface_noise < 0.0 {
            return Err(Error::config("procedural.bevel_px", "bevel, jitter and noise must be non-negative"));
        }
        Ok(())
    }
}

/// Fraction of the brick relief lost at the rounded brick edge.
const BEVEL_DROP: f32 = 0.3;

/// Running-bond bricks. The pattern is 1 on bricks and 0 in the grout; with
/// `pattern_channels = 3` it carries the per-brick albedo instead of 1.
pub fn gen_brick(params: &BrickParams, res: usize, pattern_channels: usize, seed: u64) -> Result<(MaterialMaps, ConditionPattern)> {
    check_resolution(res)?;
    params.validate(res)?;
    if pattern_channels != 1 && pattern_channels != 3 {
        return Err(Error::config("class.pattern_channels", "must be 1 or 3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (params.rows, params.columns);
    let nb = rows * cols;
    let heights: Vec<f32> = (0..nb).map(|_| uniform(&mut rng, params.brick_height_range)).collect();
    let colors: Vec<[f32; 3]> = (0..nb)
        .map(|_| {
            let j = params.albedo_jitter;
            let d = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
            params.brick_albedo.map(|c| (c + d).clamp(0.0, 1.0))
        })
        .collect();
    let roughs: Vec<f32> = (0..nb).map(|_| uniform(&mut rng, params.brick_roughness)).collect();
    let grout_h = uniform(&mut rng, params.grout_height_range);
    let grout_r = uniform(&mut rng, params.grout_roughness);
    let surface = periodic_value_noise(res, 8, 2, 0.5, &mut rng);

    let n = res * res;
    let mut albedo = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    let mut height = vec![0f32; n];
    let mut rough = vec![0f32; n];
    let mut pattern = vec![0f32; pattern_channels * n];
    let half = params.grout_width_px as f64 / 2.0;
    let (py, px) = (res as f64 / rows as f64, res as f64 / cols as f64);
    for i in 0..res {
        let v = (i as f64 + 0.5) / py;
        let row = v.floor() as usize % rows;
        let dy = (v - v.round()).abs() * py;
        let shift = row as f64 * params.row_offset_fraction as f64;
        for j in 0..res {
            let u = (j as f64 + 0.5) / px - shift;
            let col = u.floor().rem_euclid(cols as f64) as usize;
            let dx = (u - u.round()).abs() * px;
            let d = dx.min(dy);
            let k = i * res + j;
            let b = row * cols + col;
            let noise = params.surface_noise * (surface[k] - 0.5);
            if d < half {
                for c in 0..3 {
                    albedo[c][k] = params.grout_albedo[c];
                }
                height[k] = (grout_h + noise).clamp(0.0, 1.0);
                rough[k] = grout_r;
            } else {
                let t = if params.bevel_px > 0.0 { smoothstep(((d - half) / params.bevel_px as f64) as f32) } else { 1.0 };
                for c in 0..3 {
                    albedo[c][k] = colors[b][c];
                }
                let drop = BEVEL_DROP * (heights[b] - grout_h) * (1.0 - t);
                height[k] = (heights[b] - drop + noise).clamp(0.0, 1.0);
                rough[k] = roughs[b];
                if pattern_channels == 1 {
                    pattern[k] = 1.0;
                } else {
                    for c in 0..3 {
                        pattern[c * n + k] = colors[b][c];
                    }
                }
            }
        }
    }
    let maps = stack_maps(res, albedo, height, rough, None)?;
    let p = ConditionPattern::new(Tensor::new(&[pattern_channels, res, res], pattern)?)?;
    Ok((maps, p))
}

// ---------------------------------------------------------------------------
// leather

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrinkleParams {
    /// Number of Worley sites per period.
    pub cells: usize,
    /// Crease half-width as a fraction of the mean cell size.
    pub crease_width: f32,
    pub base_height: f32,
    pub crease_depth: f32,
    pub albedo: [f32; 3],
    pub albedo_jitter: f32,
    /// Albedo multiplier inside creases.
    pub crease_darkening: f32,
    pub roughness_range: Range,
    #[serde(default)]
    pub surface_noise: f32,
}

impl Default for WrinkleParams {
    fn default() -> Self {
        Self {
            cells: 24,
            crease_width: 0.15,
            base_height: 0.7,
            crease_depth: 0.4,
            albedo: [0.3, 0.17, 0.1],
            albedo_jitter: 0.05,
            crease_darkening: 0.6,
            roughness_range: [0.45, 0.75],
            surface_noise: 0.04,
        }
    }
}

impl WrinkleParams {
    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 {
            return Err(Error::config("procedural.cells", "need at least two Worley sites"));
        }
        if !(self.crease_width > 0.0) {
            return Err(Error::config("procedural.crease_width", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.base_height) || self.crease_depth < 0.0 || self.crease_depth > self.base_height {
            return Err(Error::config("procedural.crease_depth", "heights must stay within [0, 1]"));
        }
        check_range("procedural.roughness_range", self.roughness_range, true)
    }
}

/// Worley sites on the unit torus, `(y, x)` pairs.
pub fn worley_sites(params: &WrinkleParams, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    (0..params.cells).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()
}

/// `F2 - F1` of wrapped Euclidean site distances at `(y, x)` on the torus.
pub fn worley_f2_minus_f1(sites: &[[f64; 2]], y: f64, x: f64) -> f64 {
    let (mut f1, mut f2) = (f64::MAX, f64::MAX);
    for s in sites {
        let d = wrap_delta(y - s[0]).hypot(wrap_delta(x - s[1]));
        if d < f1 {
            f2 = f1;
            f1 = d;
        } else if d < f2 {
            f2 = d;
        }
    }
    f2 - f1
}

/// Cellular leather: creases follow Worley cell borders, the pattern is the
/// crease intensity and creases are recessed.
pub fn gen_leather(params: &WrinkleParams, res: usize, pattern_channels: usize, seed: u64) -> Result<(MaterialMaps, ConditionPattern)> {
    check_resolution(res)?;
    params.validate()?;
    if pattern_channels != 1 && pattern_channels != 3 {
        return Err(Error::config("class.pattern_channels", "must be 1 or 3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = worley_sites(params, &mut rng);
    let j = params.albedo_jitter;
    let tint: f32 = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let surface = periodic_value_noise(res, 8, 3, 0.5, &mut rng);
    let rough_noise = periodic_value_noise(res, 4, 2, 0.5, &mut rng);
    let width = params.crease_width as f64 / (params.cells as f64).sqrt();
    let n = res * res;
    let mut wr = vec![0f32; n];
    for i in 0..res {
        for jx in 0..res {
            let y = (i as f64 + 0.5) / res as f64;
            let x = (jx as f64 + 0.5) / res as f64;
            let e = worley_f2_minus_f1(&sites, y, x);
            wr[i * res + jx] = 1.0 - smoothstep((e / width) as f32);
        }
    }
    let base = params.albedo.map(|c| (c + tint).clamp(0.0, 1.0));
    let albedo = [0, 1, 2].map(|c| wr.iter().map(|&w| base[c] * lerp(1.0, params.crease_darkening, w)).collect());
    let height = wr
        .iter()
        .zip(&surface)
        .map(|(&w, &s)| (params.base_height - params.crease_depth * w + params.surface_noise * (s - 0.5)).clamp(0.0, 1.0))
        .collect();
    let rough = wr
        .iter()
        .zip(&rough_noise)
        .map(|(&w, &r)| lerp_range(params.roughness_range, (0.5 * r + 0.5 * w).clamp(0.0, 1.0)))
        .collect();
    let maps = stack_maps(res, albedo, height, rough, None)?;
    let pattern = if pattern_channels == 1 {
        wr
    } else {
        (0..3).flat_map(|c| wr.iter().map(move |&w| w * base[c] / base.iter().cloned().fold(1e-6, f32::max))).collect()
    };
    let p = ConditionPattern::new(Tensor::new(&[pattern_channels, res, res], pattern)?)?;
    Ok((maps, p))
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    /// Shift maps and pattern by one uniform random cyclic translation.
    pub translate: bool,
    pub height_scale: Range,
    pub roughness_scale: Range,
    /// Multiplicative brightness jitter `1 + U(-b, b)` on albedo.
    pub brightness: f32,
    /// Independent per-channel gain jitter `1 + U(-c, c)` on albedo.
    pub color: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { translate: true, height_scale: [0.8, 1.2], roughness_scale: [0.85, 1.15], brightness: 0.1, color: 0.03 }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { translate: false, height_scale: [1.0, 1.0], roughness_scale: [1.0, 1.0], brightness: 0.0, color: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("augment.height_scale", self.height_scale, false)?;
        check_range("augment.roughness_scale", self.roughness_scale, false)?;
        if self.height_scale[0] < 0.0 || self.roughness_scale[0] < 0.0 {
            return Err(Error::config("augment.height_scale", "scales must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.color) {
            return Err(Error::config("augment.brightness", "jitter must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Applies one random augmentation and returns the translation it used.
/// Height scaling is about 0.5 so the relief flattens or deepens around
/// mid-level rather than sinking toward 0.
pub fn augment(
    maps: &MaterialMaps,
    pattern: Option<&ConditionPattern>,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<(MaterialMaps, Option<ConditionPattern>, Shift2D)> {
    let (h, w) = maps.size();
    let shift = if params.translate {
        Shift2D::new(rng.gen_range(0..h as i64), rng.gen_range(0..w as i64))
    } else {
        Shift2D::ZERO
    };
    let hs = uniform(rng, params.height_scale);
    let rs = uniform(rng, params.roughness_scale);
    let b = params.brightness;
    let bright = 1.0 + if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let c = params.color;
    let gains: [f32; 3] = std::array::from_fn(|_| bright * (1.0 + if c > 0.0 { rng.gen_range(-c..=c) } else { 0.0 }));

    let mut t = roll(maps.tensor(), shift.dy, shift.dx);
    let plane = h * w;
    let data = t.data_mut();
    let unit = |v: f32| v.clamp(0.0, 1.0);
    // unit factors are skipped so a zero-jitter config stays bit-exact
    for (ch, &gain) in gains.iter().enumerate() {
        if gain != 1.0 {
            let o = (CH_ALBEDO + ch) * plane;
            data[o..o + plane].iter_mut().for_each(|v| *v = unit(*v * gain));
        }
    }
    if hs != 1.0 {
        let o = CH_HEIGHT * plane;
        data[o..o + plane].iter_mut().for_each(|v| *v = unit(0.5 + (*v - 0.5) * hs));
    }
    if rs != 1.0 {
        let o = CH_ROUGHNESS * plane;
        data[o..o + plane].iter_mut().for_each(|v| *v = unit(*v * rs));
    }
    let maps = MaterialMaps::new(t)?;
    let pattern = pattern.map(|p| ConditionPattern::new(roll(p.tensor(), shift.dy, shift.dx))).transpose()?;
    Ok((maps, pattern, shift))
}

// ---------------------------------------------------------------------------
// class configs and datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Procedural {
    Brick(BrickParams),
    Leather(WrinkleParams),
    Stone(NoiseParams),
    Metal(NoiseParams),
}

/// A material class together with its procedural source and augmentation
/// ranges, as stored in class config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub schema: String,
    pub class: MaterialClassSpec,
    pub procedural: Procedural,
    pub augment: AugmentParams,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    DEFAULT_AMPLITUDE
}

impl ClassConfig {
    pub fn preset(class: MaterialClass) -> Self {
        let procedural = match class {
            MaterialClass::Tile => Procedural::Brick(BrickParams::default()),
            MaterialClass::Leather => Procedural::Leather(WrinkleParams::default()),
            MaterialClass::Stone | MaterialClass::Custom => Procedural::Stone(NoiseParams::stone()),
            MaterialClass::Metal => Procedural::Metal(NoiseParams::metal()),
        };
        Self {
            schema: CLASS_SCHEMA.into(),
            class: MaterialClassSpec::preset(class),
            procedural,
            augment: AugmentParams::default(),
            amplitude: DEFAULT_AMPLITUDE,
        }
    }

    pub fn validate(&self, res: usize) -> Result<()> {
        if self.schema != CLASS_SCHEMA {
            return Err(Error::Schema { expected: CLASS_SCHEMA.into(), found: self.schema.clone() });
        }
        self.class.validate()?;
        self.augment.validate()?;
        let (conditional, metallic) = match &self.procedural {
            Procedural::Brick(p) => {
                p.validate(res)?;
                (true, false)
            }
            Procedural::Leather(p) => {
                p.validate()?;
                (true, false)
            }
            Procedural::Stone(p) => {
                p.validate()?;
                (false, false)
            }
            Procedural::Metal(p) => {
                p.validate()?;
                (false, true)
            }
        };
        if conditional != self.class.conditional || metallic != self.class.has_metallic {
            return Err(Error::config("procedural.kind", "procedural source does not match the class spec"));
        }
        Ok(())
    }

    /// One raw (unaugmented) sample.
    pub fn generate(&self, res: usize, seed: u64) -> Result<MaterialSample> {
        self.validate(res)?;
        let pc = self.class.pattern_channels;
        let (maps, pattern) = match &self.procedural {
            Procedural::Brick(p) => {
                let (m, p) = gen_brick(p, res, pc, seed)?;
                (m, Some(p))
            }
            Procedural::Leather(p) => {
                let (m, p) = gen_leather(p, res, pc, seed)?;
                (m, Some(p))
            }
            Procedural::Stone(p) => (gen_stone(p, res, seed)?, None),
            Procedural::Metal(p) => (gen_metal(p, res, seed)?, None),
        };
        let meta = MapsMeta::for_maps(self.class, self.amplitude, &maps);
        Ok(MaterialSample { maps, pattern, meta })
    }

    /// Augmented sample `index` of the stream rooted at `seed`.
    pub fn stream_sample(&self, res: usize, seed: u64, index: u64) -> Result<MaterialSample> {
        let mut rng = stream_rng(seed, index);
        let raw = self.generate(res, rng.gen())?;
        let (maps, pattern, _) = augment(&raw.maps, raw.pattern.as_ref(), &self.augment, &mut rng)?;
        Ok(MaterialSample { maps, pattern, meta: raw.meta })
    }
}

/// Independent generator for item `index` of a seeded stream.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Writes `count` augmented samples as `sample_00000`, `sample_00001`, ...
pub fn make_dataset(cfg: &ClassConfig, res: usize, count: usize, seed: u64, out: &Path) -> Result<()> {
    cfg.validate(res)?;
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let s = cfg.stream_sample(res, seed, i as u64)?;
        save_maps(&s, &out.join(format!("sample_{i:05}")))?;
    }
    Ok(())
}

/// Training data: a seeded procedural stream or a directory of samples in
/// the material directory format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded stream from the run's class config.
    Procedural,
    Directory { path: String },
}

/// Random-access sample provider used by training.
pub enum Dataset {
    Procedural { cfg: ClassConfig, res: usize, seed: u64 },
    Directory { samples: Vec<MaterialSample>, augment: AugmentParams, seed: u64 },
}

impl Dataset {
    pub fn procedural(cfg: ClassConfig, res: usize, seed: u64) -> Result<Self> {
        cfg.validate(res)?;
        Ok(Self::Procedural { cfg, res, seed })
    }

    /// Loads every sample subdirectory (sorted by name).
    pub fn directory(path: &Path, class: &MaterialClassSpec, res: usize, augment: AugmentParams, seed: u64) -> Result<Self> {
        let mut dirs: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("meta.json").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::contract(format!("no material directories under {}", path.display())));
        }
        let mut samples = Vec::with_capacity(dirs.len());
        for d in dirs {
            let s = crate::material::load_maps(&d)?;
            if s.maps.size() != (res, res) || s.maps.channels() != class.map_channels() {
                return Err(Error::contract(format!(
                    "{} is {:?} with {} channels, expected {res}px with {}",
                    d.display(),
                    s.maps.size(),
                    s.maps.channels(),
                    class.map_channels()
                )));
            }
            if class.conditional && s.pattern.is_none() {
                return Err(Error::PatternRequired);
            }
            samples.push(s);
        }
        Ok(Self::Directory { samples, augment, seed })
    }

    /// Sample `index` of the (infinite, deterministic) training stream.
    pub fn get(&self, index: u64) -> Result<MaterialSample> {
        match self {
            Self::Procedural { cfg, res, seed } => cfg.stream_sample(*res, *seed, index),
            Self::Directory { samples, augment: aug, seed } => {
                let s = &samples[(index % samples.len() as u64) as usize];
                let mut rng = stream_rng(*seed, index);
                let (maps, pattern, _) = self::augment(&s.maps, s.pattern.as_ref(), aug, &mut rng)?;
                Ok(MaterialSample { maps, pattern, meta: s.meta.clone() })
            }
        }
    }
}
