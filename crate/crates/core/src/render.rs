//! Differentiable flash rendering of a planar material sample.
//!
//! The sample covers `[-1, 1]^2` at `z = 0`; pixel `(i, j)` sits at
//! `x = -1 + (j + 0.5) 2/W`, `y = -1 + (i + 0.5) 2/H`. Camera and flash share
//! one position.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::material::{height_to_normal_graph, MaterialMaps, DEFAULT_AMPLITUDE};
use crate::periodic_ops::{Axis, PadMode};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_DISTANCE: f64 = 2.414;
pub const DEFAULT_F0: f64 = 0.04;
pub const DEFAULT_GAMMA: f64 = 2.2;
pub const SOFT_CLAMP_SHARPNESS: f64 = 20.0;
/// Lower clamp before gamma; keeps the power's derivative finite.
const TONE_FLOOR: f64 = 1e-6;
const HORIZON_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    /// `x - softplus(k (x - 1)) / k`, which keeps gradients alive in highlights.
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSetup {
    /// Shared camera and flash position in plane units.
    pub position: [f64; 3],
    pub light_intensity: f64,
    pub f0_dielectric: f64,
    pub tone_gamma: f64,
    pub clamp: ClampMode,
    pub soft_clamp_sharpness: f64,
    pub image_size: usize,
    /// Plane units per unit of height.
    pub amplitude: f64,
    /// Treat the light as infinitely distant along `position`; used to check
    /// translation behavior.
    #[serde(default)]
    pub directional: bool,
}

/// Intensity for which a flat, 0.5-albedo Lambertian plane directly under a
/// flash at distance `d` renders to 0.5 after tone mapping.
pub fn calibrated_intensity(d: f64, gamma: f64) -> f64 {
    // linear target t = 0.5^gamma; t = (0.5 / pi) * I / d^2
    let t = 0.5f64.powf(gamma);
    t * PI * d * d / 0.5
}

impl RenderSetup {
    pub fn new(image_size: usize) -> Self {
        Self {
            position: [0.0, 0.0, DEFAULT_DISTANCE],
            light_intensity: calibrated_intensity(DEFAULT_DISTANCE, DEFAULT_GAMMA),
            f0_dielectric: DEFAULT_F0,
            tone_gamma: DEFAULT_GAMMA,
            clamp: ClampMode::Soft,
            soft_clamp_sharpness: SOFT_CLAMP_SHARPNESS,
            image_size,
            amplitude: DEFAULT_AMPLITUDE,
            directional: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position[2] > 0.0) {
            return Err(Error::config("render.position", "light must be above the plane (z > 0)"));
        }
        if !(self.light_intensity >= 0.0) {
            return Err(Error::config("render.light_intensity", "must be non-negative"));
        }
        if !(self.tone_gamma > 0.0) {
            return Err(Error::config("render.tone_gamma", "must be positive"));
        }
        if !(self.soft_clamp_sharpness > 0.0) {
            return Err(Error::config("render.soft_clamp_sharpness", "must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("render.image_size", "must be positive"));
        }
        Ok(())
    }

    /// Plane coordinates of the center of pixel `(i, j)`.
    pub fn pixel_point(&self, i: usize, j: usize) -> [f64; 3] {
        let n = self.image_size as f64;
        [-1.0 + (j as f64 + 0.5) * 2.0 / n, -1.0 + (i as f64 + 0.5) * 2.0 / n, 0.0]
    }

    /// Unit direction towards the light and irradiance factor `I / d^2` at a
    /// plane point.
    pub fn light_at(&self, p: [f64; 3]) -> ([f64; 3], f64) {
        let v = if self.directional {
            self.position
        } else {
            [self.position[0] - p[0], self.position[1] - p[1], self.position[2] - p[2]]
        };
        let d2 = dot(v, v);
        let d = d2.sqrt();
        ([v[0] / d, v[1] / d, v[2] / d], self.light_intensity / d2)
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let l = dot(a, a).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

/// Grazing reflectance for Schlick's approximation; 1 for any realistic
/// `f0 >= 0.02`, and 0 when `f0 = 0` so the specular lobe can be switched off.
pub fn f90(f0: f64) -> f64 {
    (50.0 * f0).clamp(0.0, 1.0)
}

/// GGX normal distribution with `alpha = roughness^2`.
pub fn ggx_d(n_dot_h: f64, roughness: f64) -> f64 {
    let a2 = roughness.powi(4);
    let t = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

/// Height-correlated Smith visibility, `G / (4 (n.l)(n.v))`.
pub fn smith_visibility(n_dot_l: f64, n_dot_v: f64, roughness: f64) -> f64 {
    let a2 = roughness.powi(4);
    let gv = n_dot_l * (n_dot_v * n_dot_v * (1.0 - a2) + a2).sqrt();
    let gl = n_dot_v * (n_dot_l * n_dot_l * (1.0 - a2) + a2).sqrt();
    0.5 / (gv + gl)
}

/// Lambertian plus GGX microfacet reflectance, per steradian.
#[allow(clippy::too_many_arguments)]
pub fn brdf_eval(
    wi: [f64; 3],
    wo: [f64; 3],
    n: [f64; 3],
    albedo: [f64; 3],
    roughness: f64,
    metallic: f64,
    f0_dielectric: f64,
) -> [f64; 3] {
    let nl = dot(n, wi);
    let nv = dot(n, wo);
    if nl <= 0.0 || nv <= 0.0 {
        return [0.0; 3];
    }
    let h = normalize([wi[0] + wo[0], wi[1] + wo[1], wi[2] + wo[2]]);
    let dv = ggx_d(dot(n, h).max(0.0), roughness) * smith_visibility(nl, nv, roughness);
    let c = (1.0 - dot(wo, h).clamp(0.0, 1.0)).powi(5);
    let mut out = [0.0; 3];
    for k in 0..3 {
        let f0 = f0_dielectric * (1.0 - metallic) + albedo[k] * metallic;
        let f = f0 + (f90(f0) - f0) * c;
        out[k] = (1.0 - metallic) * albedo[k] / PI + dv * f;
    }
    out
}

/// Per-pixel geometry tensors `(1, 1, H, W)`, or scalars for a directional
/// light.
struct Geometry<T: Real> {
    l: [Tensor<T>; 3],
    h: [Tensor<T>; 3],
    fresnel_c: Tensor<T>,
    irradiance: Tensor<T>,
}

fn geometry<T: Real>(setup: &RenderSetup) -> Geometry<T> {
    let n = if setup.directional { 1 } else { setup.image_size };
    let shape = if setup.directional { vec![1] } else { vec![1, 1, n, n] };
    let mut l = [vec![], vec![], vec![]];
    let mut h = [vec![], vec![], vec![]];
    let mut fc = Vec::new();
    let mut irr = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (wi, e) = setup.light_at(setup.pixel_point(i, j));
            // collocated: the half vector is the view direction
            let hv = normalize([2.0 * wi[0], 2.0 * wi[1], 2.0 * wi[2]]);
            for k in 0..3 {
                l[k].push(T::c(wi[k]));
                h[k].push(T::c(hv[k]));
            }
            fc.push(T::c((1.0 - dot(wi, hv).clamp(0.0, 1.0)).powi(5)));
            irr.push(T::c(e));
        }
    }
    let mk = |v: Vec<T>| Tensor::new(&shape, v).expect("geometry size");
    let [l0, l1, l2] = l;
    let [h0, h1, h2] = h;
    Geometry { l: [mk(l0), mk(l1), mk(l2)], h: [mk(h0), mk(h1), mk(h2)], fresnel_c: mk(fc), irradiance: mk(irr) }
}

fn dot3<T: Real>(g: &mut Graph<T>, a: [Var; 3], b: [Var; 3]) -> Result<Var> {
    let x = g.mul(a[0], b[0])?;
    let y = g.mul(a[1], b[1])?;
    let z = g.mul(a[2], b[2])?;
    let xy = g.add(x, y)?;
    g.add(xy, z)
}

fn split_maps<T: Real>(g: &mut Graph<T>, maps: Var, setup: &RenderSetup) -> Result<(Var, Var, Var, Option<Var>)> {
    let s = g.shape(maps).to_vec();
    if s.len() != 4 || !(s[1] == 5 || s[1] == 6) {
        return Err(Error::contract(format!("maps must be (N, 5|6, H, W), got {s:?}")));
    }
    if s[2] != setup.image_size || s[3] != setup.image_size {
        return Err(Error::contract(format!(
            "map resolution {}x{} differs from render size {}",
            s[2], s[3], setup.image_size
        )));
    }
    let albedo = g.narrow(maps, 1, 0, 3)?;
    let height = g.narrow(maps, 1, 3, 1)?;
    let rough = g.narrow(maps, 1, 4, 1)?;
    let metal = if s[1] == 6 { Some(g.narrow(maps, 1, 5, 1)?) } else { None };
    Ok((albedo, height, rough, metal))
}

/// Pre-tonemap radiance `(N, 3, H, W)` of an `(N, C, H, W)` map batch.
pub fn render_linear_graph<T: Real>(g: &mut Graph<T>, maps: Var, setup: &RenderSetup) -> Result<Var> {
    setup.validate()?;
    let (albedo, height, rough, metal) = split_maps(g, maps, setup)?;
    let geo = geometry::<T>(setup);
    let n = height_to_normal_graph(g, height, setup.amplitude)?;
    let [l0, l1, l2] = geo.l;
    let l = [g.constant(l0), g.constant(l1), g.constant(l2)];
    let [h0, h1, h2] = geo.h;
    let hv = [g.constant(h0), g.constant(h1), g.constant(h2)];

    // n.l doubles as n.v for the collocated flash
    let nl = dot3(g, n, l)?;
    let nl = g.clamp_min(nl, HORIZON_EPS);
    let nh = dot3(g, n, hv)?;
    let nh = g.clamp_min(nh, 0.0);

    let r2 = g.square(rough);
    let a2 = g.square(r2);
    // D = a2 / (pi (nh^2 (a2 - 1) + 1)^2)
    let nh2 = g.square(nh);
    let a2m1 = g.add_scalar(a2, -1.0);
    let t = g.mul(nh2, a2m1)?;
    let t = g.add_scalar(t, 1.0);
    let t2 = g.square(t);
    let t2 = g.scale(t2, PI);
    let d = g.div(a2, t2)?;
    // V = 0.5 / (2 nl sqrt(nl^2 (1 - a2) + a2))
    let nl2 = g.square(nl);
    let one_m = g.neg(a2m1);
    let q = g.mul(nl2, one_m)?;
    let q = g.add(q, a2)?;
    let q = g.sqrt(q);
    let den = g.mul(nl, q)?;
    let den = g.scale(den, 2.0);
    let vis = g.recip(den);
    let vis = g.scale(vis, 0.5);
    let dv = g.mul(d, vis)?;

    // F0 = mix(f0, albedo, m); F = F0 + (F90 - F0) c
    let fc = g.constant(geo.fresnel_c);
    let f0 = match metal {
        Some(m) => {
            let diff = g.add_scalar(albedo, -setup.f0_dielectric);
            let md = g.mul(diff, m)?;
            g.add_scalar(md, setup.f0_dielectric)
        }
        None => {
            let shape = [1usize, 1, 1, 1];
            g.constant(Tensor::full(&shape, T::c(setup.f0_dielectric)))
        }
    };
    let f90 = g.scale(f0, 50.0);
    let f90 = g.clamp_max(f90, 1.0);
    let f90 = g.clamp_min(f90, 0.0);
    let df = g.sub(f90, f0)?;
    let df = g.mul(df, fc)?;
    let f = g.add(f0, df)?;
    let spec = g.mul(dv, f)?;

    let diffuse = match metal {
        Some(m) => {
            let om = g.neg(m);
            let om = g.add_scalar(om, 1.0);
            g.mul(albedo, om)?
        }
        None => albedo,
    };
    let diffuse = g.scale(diffuse, 1.0 / PI);
    let brdf = g.add(diffuse, spec)?;
    let cos = g.mul(brdf, nl)?;
    let e = g.constant(geo.irradiance);
    g.mul(cos, e)
}

/// Clamp to `[0, 1]` (soft or hard) and apply `1/gamma`.
pub fn tonemap_graph<T: Real>(g: &mut Graph<T>, x: Var, setup: &RenderSetup) -> Var {
    let c = match setup.clamp {
        ClampMode::Soft => g.unary(crate::graph::UnaryOp::SoftClampMax(setup.soft_clamp_sharpness), x),
        ClampMode::Hard => g.clamp_max(x, 1.0),
    };
    let c = g.clamp_min(c, TONE_FLOOR);
    g.powf(c, 1.0 / setup.tone_gamma)
}

/// Tonemapped image `(N, 3, H, W)`.
pub fn render_graph<T: Real>(g: &mut Graph<T>, maps: Var, setup: &RenderSetup) -> Result<Var> {
    let lin = render_linear_graph(g, maps, setup)?;
    Ok(tonemap_graph(g, lin, setup))
}

/// Renders an `(N, C, H, W)` batch eagerly.
pub fn render_batch<T: Real>(maps: &Tensor<T>, setup: &RenderSetup) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(maps.clone());
    let out = render_graph(&mut g, v, setup)?;
    Ok(g.value(out).clone())
}

/// Renders one bundle to a `(3, H, W)` image in `[0, 1]`.
pub fn render(maps: &MaterialMaps, setup: &RenderSetup) -> Result<Tensor<f32>> {
    let out = render_batch(&maps.to_batch(), setup)?;
    let r = maps.resolution();
    out.reshape(&[3, r, r])
}

/// Box-average pooling of the trailing two axes down to `target x target`.
pub fn downsample_image<T: Real>(img: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() < 2 || target == 0 {
        return Err(Error::contract("downsample_image needs two spatial axes and a positive target"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % target != 0 || w % target != 0 {
        return Err(Error::contract(format!("{h}x{w} is not divisible by {target}")));
    }
    let (fy, fx) = (h / target, w / target);
    let planes = img.numel() / (h * w);
    let inv = T::c(1.0 / (fy * fx) as f64);
    let mut out = vec![T::zero(); planes * target * target];
    for p in 0..planes {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                out[p * target * target + (i / fy) * target + j / fx] += src[i * w + j] * inv;
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = target;
    shape[r - 1] = target;
    Tensor::new(&shape, out)
}

/// Tape version of [`downsample_image`] for `(N, C, H, W)` inputs whose
/// pooling factor is a power of two: repeated pairwise means and decimation.
pub fn downsample_image_graph<T: Real>(g: &mut Graph<T>, img: Var, target: usize) -> Result<Var> {
    let s = g.shape(img).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::contract(format!("expected square (N, C, H, W) image, got {s:?}")));
    }
    if target == 0 || s[2] % target != 0 || !(s[2] / target).is_power_of_two() {
        return Err(Error::contract(format!("{} is not a power-of-two multiple of {target}", s[2])));
    }
    let mut x = img;
    let mut size = s[2];
    while size > target {
        x = g.filter(x, &[0.5, 0.5], 0, Axis::Height, PadMode::Circular);
        x = g.filter(x, &[0.5, 0.5], 0, Axis::Width, PadMode::Circular);
        x = g.decimate2x(x);
        size /= 2;
    }
    Ok(x)
}
