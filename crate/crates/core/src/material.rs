//! SVBRDF map bundles, derived normals and the on-disk directory format.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const MAPS_SCHEMA: &str = "tessera.maps/1";
pub const DEFAULT_AMPLITUDE: f64 = 0.05;
pub const ALBEDO_GAMMA: f64 = 2.2;

/// Channel offsets inside a map tensor.
pub const CH_ALBEDO: usize = 0;
pub const CH_HEIGHT: usize = 3;
pub const CH_ROUGHNESS: usize = 4;
pub const CH_METALLIC: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialClass {
    Tile,
    Leather,
    Stone,
    Metal,
    Custom,
}

impl std::str::FromStr for MaterialClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tile" => Ok(Self::Tile),
            "leather" => Ok(Self::Leather),
            "stone" => Ok(Self::Stone),
            "metal" => Ok(Self::Metal),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::config("class", format!("unknown material class `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterialClassSpec {
    pub name: MaterialClass,
    pub conditional: bool,
    pub pattern_channels: usize,
    pub has_metallic: bool,
}

impl MaterialClassSpec {
    /// The fixed configuration of a named class. `Custom` starts unconditional
    /// without metallic and is meant to be edited.
    pub fn preset(name: MaterialClass) -> Self {
        let (conditional, has_metallic) = match name {
            MaterialClass::Tile | MaterialClass::Leather => (true, false),
            MaterialClass::Stone | MaterialClass::Custom => (false, false),
            MaterialClass::Metal => (false, true),
        };
        Self { name, conditional, pattern_channels: 1, has_metallic }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pattern_channels != 1 && self.pattern_channels != 3 {
            return Err(Error::config("class.pattern_channels", "must be 1 or 3"));
        }
        let fixed = match self.name {
            MaterialClass::Tile | MaterialClass::Leather => Some((true, false)),
            MaterialClass::Stone => Some((false, false)),
            MaterialClass::Metal => Some((false, true)),
            MaterialClass::Custom => None,
        };
        if let Some((c, m)) = fixed {
            if c != self.conditional {
                return Err(Error::config("class.conditional", format!("{:?} fixes conditional={c}", self.name)));
            }
            if m != self.has_metallic {
                return Err(Error::config("class.has_metallic", format!("{:?} fixes has_metallic={m}", self.name)));
            }
        }
        Ok(())
    }

    pub fn map_channels(&self) -> usize {
        if self.has_metallic {
            6
        } else {
            5
        }
    }
}

/// Albedo (3), height, roughness and optional metallic stacked as a
/// `(C, H, W)` tensor with `C` of 5 or 6. Values live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMaps {
    data: Tensor<f32>,
}

fn check_square_pow2(h: usize, w: usize) -> Result<()> {
    if h != w || !h.is_power_of_two() {
        return Err(Error::contract(format!("maps must be square with power-of-two size, got {h}x{w}")));
    }
    Ok(())
}

impl MaterialMaps {
    /// Validates the layout and clamps every value into `[0, 1]`.
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || !(s[0] == 5 || s[0] == 6) {
            return Err(Error::contract(format!("maps must be (5|6, H, W), got {s:?}")));
        }
        check_square_pow2(s[1], s[2])?;
        if !data.all_finite() {
            return Err(Error::NonFinite("material maps".into()));
        }
        Ok(Self { data: data.map(|v| v.clamp(0.0, 1.0)) })
    }

    /// Item `index` of an `(N, C, H, W)` batch.
    pub fn from_batch(batch: &Tensor<f32>, index: usize) -> Result<Self> {
        let (n, c, h, w) = batch.dims4()?;
        if index >= n {
            return Err(Error::contract(format!("batch index {index} out of {n}")));
        }
        let t = batch.narrow(0, index, 1)?.reshape(&[c, h, w])?;
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    /// `(1, C, H, W)` view for batched operators.
    pub fn to_batch(&self) -> Tensor<f32> {
        let s = self.data.shape();
        self.data.clone().reshape(&[1, s[0], s[1], s[2]]).expect("same element count")
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[1]
    }

    /// `(H, W)`; square except for tiled exports.
    pub fn size(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    fn hw(&self) -> usize {
        self.data.shape()[1] * self.data.shape()[2]
    }

    pub fn has_metallic(&self) -> bool {
        self.channels() == 6
    }

    fn plane(&self, c: usize) -> &[f32] {
        let hw = self.hw();
        &self.data.data()[c * hw..(c + 1) * hw]
    }

    pub fn albedo(&self) -> &[f32] {
        let hw = self.hw();
        &self.data.data()[..3 * hw]
    }

    pub fn height(&self) -> &[f32] {
        self.plane(CH_HEIGHT)
    }

    pub fn roughness(&self) -> &[f32] {
        self.plane(CH_ROUGHNESS)
    }

    pub fn metallic(&self) -> Option<&[f32]> {
        self.has_metallic().then(|| self.plane(CH_METALLIC))
    }

    /// Single-channel `(1, H, W)` copy of one map.
    pub fn channel(&self, c: usize) -> Tensor<f32> {
        let (h, w) = self.size();
        Tensor::new(&[1, h, w], self.plane(c).to_vec()).expect("plane size")
    }
}

/// Tileable structure image, `(Cp, H, W)` with `Cp` of 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPattern {
    data: Tensor<f32>,
}

impl ConditionPattern {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
            return Err(Error::contract(format!("pattern must be (1|3, H, W), got {s:?}")));
        }
        check_square_pow2(s[1], s[2])?;
        if !data.all_finite() {
            return Err(Error::NonFinite("condition pattern".into()));
        }
        Ok(Self { data: data.map(|v| v.clamp(0.0, 1.0)) })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn to_batch(&self) -> Tensor<f32> {
        let s = self.data.shape();
        self.data.clone().reshape(&[1, s[0], s[1], s[2]]).expect("same element count")
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Per-directory metadata written next to the map images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsMeta {
    pub schema: String,
    pub class: MaterialClassSpec,
    pub amplitude: f64,
    /// Height in pixels; also the width unless `width` is set.
    pub resolution: usize,
    /// Only present for non-square (tiled) exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl MapsMeta {
    pub fn new(class: MaterialClassSpec, amplitude: f64, resolution: usize) -> Self {
        Self { schema: MAPS_SCHEMA.into(), class, amplitude, resolution, width: None }
    }

    pub fn for_maps(class: MaterialClassSpec, amplitude: f64, maps: &MaterialMaps) -> Self {
        let (h, w) = maps.size();
        Self { schema: MAPS_SCHEMA.into(), class, amplitude, resolution: h, width: (w != h).then_some(w) }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.resolution, self.width.unwrap_or(self.resolution))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialSample {
    pub maps: MaterialMaps,
    pub pattern: Option<ConditionPattern>,
    pub meta: MapsMeta,
}

/// Unit normals `(3, H, W)` from central differences with wrap-around.
///
/// The plane spans `[-1, 1]^2`, so the pixel pitch is `2 / W`. Columns run
/// along +x and rows along +y.
pub fn height_to_normal(h: &Tensor<f32>, amplitude: f64) -> Result<Tensor<f32>> {
    let s = h.shape();
    let (hh, ww) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => return Err(Error::contract(format!("height must be (H, W) or (1, H, W), got {s:?}"))),
    };
    let d = h.data();
    let at = |i: usize, j: usize| d[i * ww + j] as f64;
    let mut out = vec![0f32; 3 * hh * ww];
    let (sx, sy) = (amplitude * ww as f64 / 4.0, amplitude * hh as f64 / 4.0);
    for i in 0..hh {
        for j in 0..ww {
            let gx = at(i, (j + 1) % ww) - at(i, (j + ww - 1) % ww);
            let gy = at((i + 1) % hh, j) - at((i + hh - 1) % hh, j);
            let (nx, ny, nz) = (-sx * gx, -sy * gy, 1.0);
            let len = (nx * nx + ny * ny + nz * nz).sqrt();
            let p = i * ww + j;
            out[p] = (nx / len) as f32;
            out[hh * ww + p] = (ny / len) as f32;
            out[2 * hh * ww + p] = (nz / len) as f32;
        }
    }
    Tensor::new(&[3, hh, ww], out)
}

/// Tape version of [`height_to_normal`] on an `(N, 1, H, W)` height.
///
/// Returns the three unnormalized components and the reciprocal length so
/// callers can fuse the normalization into shading.
pub fn height_to_normal_graph<T: Real>(g: &mut Graph<T>, h: Var, amplitude: f64) -> Result<[Var; 3]> {
    let s = g.shape(h).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::contract(format!("height must be (N, 1, H, W), got {s:?}")));
    }
    let (hh, ww) = (s[2], s[3]);
    let right = g.roll(h, 0, -1);
    let left = g.roll(h, 0, 1);
    let down = g.roll(h, -1, 0);
    let up = g.roll(h, 1, 0);
    let gx = g.sub(right, left)?;
    let gy = g.sub(down, up)?;
    let nx = g.scale(gx, -amplitude * ww as f64 / 4.0);
    let ny = g.scale(gy, -amplitude * hh as f64 / 4.0);
    let nx2 = g.square(nx);
    let ny2 = g.square(ny);
    let len2 = g.add(nx2, ny2)?;
    let len2 = g.add_scalar(len2, 1.0);
    let inv = g.powf(len2, -0.5);
    let nx = g.mul(nx, inv)?;
    let ny = g.mul(ny, inv)?;
    Ok([nx, ny, inv])
}

/// `nx x ny` replication of every map. The result is `(ny H, nx W)` and may
/// be non-square.
pub fn tile_maps(maps: &MaterialMaps, nx: usize, ny: usize) -> Result<MaterialMaps> {
    Ok(MaterialMaps { data: tile_tensor(&maps.data, nx, ny)? })
}

/// Replicates the trailing two axes of any tensor.
pub fn tile_tensor<T: Real>(t: &Tensor<T>, nx: usize, ny: usize) -> Result<Tensor<T>> {
    if nx == 0 || ny == 0 {
        return Err(Error::contract("tile counts must be at least 1"));
    }
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::contract("tiling needs two spatial axes"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = t.numel() / (h * w);
    let (oh, ow) = (h * ny, w * nx);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let row = &src[(i % h) * w..(i % h + 1) * w];
            for _ in 0..nx {
                out.extend_from_slice(row);
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(&shape, out)
}

// ---------------------------------------------------------------------------
// quantization

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8
}

pub fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

pub fn encode_albedo(v: f32) -> u8 {
    quantize8((v.clamp(0.0, 1.0) as f64).powf(1.0 / ALBEDO_GAMMA) as f32)
}

pub fn decode_albedo(q: u8) -> f32 {
    (q as f64 / 255.0).powf(ALBEDO_GAMMA) as f32
}

fn gray8(plane: &[f32], (h, w): (usize, usize)) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    ImageBuffer::from_raw(w as u32, h as u32, plane.iter().map(|&v| quantize8(v)).collect()).expect("plane size")
}

fn rgb8(planes: &[f32], (h, w): (usize, usize), encode: impl Fn(f32) -> u8) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            buf.push(encode(planes[c * hw + p]));
        }
    }
    ImageBuffer::from_raw(w as u32, h as u32, buf).expect("plane size")
}

/// Writes `(3, H, W)` data in `[0, 1]` to an 8-bit RGB PNG, quantizing
/// linearly after applying `1/gamma` (pass 1 for no encoding).
pub fn save_rgb_png(t: &Tensor<f32>, gamma: f64, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::contract(format!("expected square (3, H, W) image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            let v = (t.data()[c * hw + p].clamp(0.0, 1.0) as f64).powf(1.0 / gamma);
            buf.push(quantize8(v as f32));
        }
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, buf).expect("image size");
    img.save(path)?;
    Ok(())
}

/// Reads any PNG as `(C, H, W)` floats in `[0, 1]`, with `C` 1 for gray
/// sources and 3 otherwise. No gamma decoding is applied.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16);
    if gray {
        let l = img.to_luma16();
        let data = l.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        Tensor::new(&[1, h, w], data)
    } else {
        let rgb = img.to_rgb16();
        let raw = rgb.into_raw();
        let hw = h * w;
        let mut data = vec![0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = raw[3 * p + c] as f32 / 65535.0;
            }
        }
        Tensor::new(&[3, h, w], data)
    }
}

pub fn save_pattern(p: &ConditionPattern, path: &Path) -> Result<()> {
    let r = (p.resolution(), p.resolution());
    if p.channels() == 1 {
        gray8(p.tensor().data(), r).save(path)?;
    } else {
        rgb8(p.tensor().data(), r, quantize8).save(path)?;
    }
    Ok(())
}

pub fn load_pattern(path: &Path) -> Result<ConditionPattern> {
    ConditionPattern::new(load_png(path)?)
}

/// Writes the directory layout: `albedo.png`, `height.png`, `roughness.png`,
/// optional `metallic.png` and `pattern.png`, and `meta.json`.
pub fn save_maps(sample: &MaterialSample, dir: &Path) -> Result<()> {
    let maps = &sample.maps;
    if sample.meta.size() != maps.size() {
        return Err(Error::contract("meta resolution differs from the maps"));
    }
    if sample.meta.class.has_metallic != maps.has_metallic() {
        return Err(Error::contract("class spec and map channel count disagree"));
    }
    fs::create_dir_all(dir)?;
    let r = maps.size();
    rgb8(maps.albedo(), r, encode_albedo).save(dir.join("albedo.png"))?;
    let h16: Vec<u16> = maps.height().iter().map(|&v| quantize16(v)).collect();
    let himg: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(r.1 as u32, r.0 as u32, h16).expect("plane size");
    himg.save(dir.join("height.png"))?;
    gray8(maps.roughness(), r).save(dir.join("roughness.png"))?;
    if let Some(m) = maps.metallic() {
        gray8(m, r).save(dir.join("metallic.png"))?;
    }
    if let Some(p) = &sample.pattern {
        save_pattern(p, &dir.join("pattern.png"))?;
    }
    let meta = serde_json::to_string_pretty(&sample.meta)?;
    fs::write(dir.join("meta.json"), meta + "\n")?;
    Ok(())
}

fn require(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = dir.join(format!("{name}.png"));
    if !p.is_file() {
        return Err(Error::MissingMap { map: name.into(), dir: dir.to_path_buf() });
    }
    Ok(p)
}

fn check_dims(img: &image::DynamicImage, (h, w): (usize, usize), name: &str) -> Result<()> {
    if img.width() as usize != w || img.height() as usize != h {
        return Err(Error::contract(format!(
            "{name} is {}x{}, expected {w}x{h}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn load_gray(path: &Path, size: (usize, usize), name: &str) -> Result<Vec<f32>> {
    let img = image::open(path)?;
    check_dims(&img, size, name)?;
    let is16 = matches!(img.color(), image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16);
    if is16 {
        Ok(img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
    } else {
        Ok(img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    }
}

pub fn load_maps(dir: &Path) -> Result<MaterialSample> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::MissingMap { map: "meta.json".into(), dir: dir.to_path_buf() });
    }
    let meta: MapsMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.schema != MAPS_SCHEMA {
        return Err(Error::Schema { expected: MAPS_SCHEMA.into(), found: meta.schema });
    }
    meta.class.validate()?;
    let r = meta.size();
    if r.0 == 0 || r.1 == 0 {
        return Err(Error::config("resolution", "must be positive"));
    }
    let albedo_p = require(dir, "albedo")?;
    let height_p = require(dir, "height")?;
    let rough_p = require(dir, "roughness")?;
    let metal_p = dir.join("metallic.png");
    let metal_present = metal_p.is_file();
    if meta.class.has_metallic && !metal_present {
        return Err(Error::MissingMap { map: "metallic".into(), dir: dir.to_path_buf() });
    }
    if !meta.class.has_metallic && metal_present {
        return Err(Error::contract(format!(
            "metallic.png present but class {:?} has no metallic channel",
            meta.class.name
        )));
    }

    let alb = image::open(&albedo_p)?;
    check_dims(&alb, r, "albedo")?;
    if alb.color().channel_count() < 3 {
        return Err(Error::contract("albedo.png must be RGB"));
    }
    let alb = alb.to_rgb8().into_raw();
    let hw = r.0 * r.1;
    let c = meta.class.map_channels();
    let mut data = vec![0f32; c * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = decode_albedo(alb[3 * p + ch]);
        }
    }
    data[CH_HEIGHT * hw..(CH_HEIGHT + 1) * hw].copy_from_slice(&load_gray(&height_p, r, "height")?);
    data[CH_ROUGHNESS * hw..(CH_ROUGHNESS + 1) * hw].copy_from_slice(&load_gray(&rough_p, r, "roughness")?);
    if meta.class.has_metallic {
        data[CH_METALLIC * hw..].copy_from_slice(&load_gray(&metal_p, r, "metallic")?);
    }
    let data = Tensor::new(&[c, r.0, r.1], data)?;
    let maps = if r.0 == r.1 { MaterialMaps::new(data)? } else { MaterialMaps { data } };

    let pat_p = dir.join("pattern.png");
    let pattern = if pat_p.is_file() {
        let p = load_pattern(&pat_p)?;
        if (p.resolution(), p.resolution()) != r {
            return Err(Error::contract(format!("pattern is {}px, expected {r:?}", p.resolution())));
        }
        if meta.class.conditional && p.channels() != meta.class.pattern_channels {
            return Err(Error::contract(format!(
                "pattern has {} channels, class expects {}",
                p.channels(),
                meta.class.pattern_channels
            )));
        }
        Some(p)
    } else {
        None
    };
    Ok(MaterialSample { maps, pattern, meta })
}
