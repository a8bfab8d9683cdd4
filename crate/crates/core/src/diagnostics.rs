//! Quantitative checks for tileability, equivariance and differentiability.

use crate::error::{Error, Result};
use crate::material::ConditionPattern;
use crate::networks::{Generator, LatentBundle};
use crate::periodic_ops::{roll, Shift2D};
use crate::tensor::{Real, Tensor};

/// Worst relative error between an analytic gradient and central finite
/// differences of `f` around `point`.
///
/// Relative error per coordinate uses `max(|analytic|, |numeric|, 1e-6)` as the
/// denominator.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    grad: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    point: &Tensor<f64>,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic = grad(point)?;
    if analytic.shape() != point.shape() {
        return Err(Error::contract("gradient shape differs from point shape"));
    }
    let mut x = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        x.data_mut()[i] = x0 + step;
        let fp = f(&x)?;
        x.data_mut()[i] = x0 - step;
        let fm = f(&x)?;
        x.data_mut()[i] = x0;
        let fd = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

/// Ratio of the mean absolute wrap-around difference across the right and
/// bottom seams to the mean absolute finite difference of the interior.
///
/// The interior excludes a 2-pixel band along every border. Around 1 for
/// periodic content, large for content with a hard seam; a constant input is
/// defined to score 1.
pub fn seam_score<T: Real>(x: &Tensor<T>) -> Result<f64> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::contract("seam_score needs at least two spatial dims"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < 6 || w < 6 {
        return Err(Error::contract(format!("seam_score needs at least 6x6 pixels, got {h}x{w}")));
    }
    let planes = x.numel() / (h * w);
    let d = x.data();
    let at = |p: usize, i: usize, j: usize| d[p * h * w + i * w + j].f64();
    let (mut seam, mut n_seam) = (0.0, 0usize);
    let (mut inner, mut n_inner) = (0.0, 0usize);
    for p in 0..planes {
        for i in 0..h {
            seam += (at(p, i, 0) - at(p, i, w - 1)).abs();
            n_seam += 1;
        }
        for j in 0..w {
            seam += (at(p, 0, j) - at(p, h - 1, j)).abs();
            n_seam += 1;
        }
        for i in 2..h - 2 {
            for j in 2..w - 3 {
                inner += (at(p, i, j + 1) - at(p, i, j)).abs();
                n_inner += 1;
            }
        }
        for i in 2..h - 3 {
            for j in 2..w - 2 {
                inner += (at(p, i + 1, j) - at(p, i, j)).abs();
                n_inner += 1;
            }
        }
    }
    let seam = seam / n_seam as f64;
    let inner = inner / n_inner as f64;
    if inner <= 1e-12 {
        return Ok(if seam <= 1e-12 { 1.0 } else { f64::INFINITY });
    }
    Ok(seam / inner)
}

/// Max abs difference between generate-then-translate and
/// translate-then-generate, where the pattern moves by `shift` pixels and every
/// noise map by the proportional amount at its resolution.
pub fn equivariance_error(gen: &Generator, bundle: &LatentBundle, pattern: Option<&ConditionPattern>, shift: Shift2D) -> Result<f64> {
    let domain = gen.bundle_domain(bundle)?;
    let a = gen.synthesize(bundle, pattern)?;
    let a = roll(a.tensor(), shift.dy, shift.dx);
    let moved = LatentBundle { noise: bundle.shifted_noise(shift, domain), ..bundle.clone() };
    let p = pattern.map(|p| ConditionPattern::new(roll(p.tensor(), shift.dy, shift.dx))).transpose()?;
    let b = gen.synthesize(&moved, p.as_ref())?;
    Ok(a.max_abs_diff(b.tensor()))
}

/// Otsu threshold of values in `[0, 1]` over 256 bins; returns the upper
/// edge of the last bin of the lower class.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round()) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / (BINS - 1) as f32
}

/// IoU between `pattern > 0.5` and the height mask thresholded with Otsu's
/// method. Both slices are one `H x W` plane.
pub fn pattern_height_iou(pattern: &[f32], height: &[f32]) -> Result<f64> {
    if pattern.len() != height.len() || pattern.is_empty() {
        return Err(Error::contract("pattern and height planes differ in size"));
    }
    let t = otsu_threshold(height);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &h) in pattern.iter().zip(height) {
        let (a, b) = (p > 0.5, h > t);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Median structure agreement and sub-stride shift loss of a conditional
/// generator on held-out patterns.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConditionalReport {
    pub samples: usize,
    pub median_iou: f64,
    pub median_shift_loss: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Draws `count` patterns from `class` with `seed` (use a seed disjoint from
/// training), generates one sample per pattern and measures the IoU of the
/// pattern with the Otsu height mask, plus the shift loss at a random shift
/// that is not a multiple of the encoder stride on both axes.
pub fn conditional_report(
    gen: &Generator,
    class: &crate::data::ClassConfig,
    count: usize,
    seed: u64,
) -> Result<ConditionalReport> {
    use rand::{Rng, SeedableRng};
    if !gen.cfg.conditional {
        return Err(Error::contract("conditional_report needs a conditional generator"));
    }
    let res = gen.cfg.out_resolution;
    let stride = gen.cfg.encoder_stride as i64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut ious, mut shifts) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let sample = class.generate(res, rng.gen())?;
        let p = sample.pattern.ok_or(Error::PatternRequired)?;
        let b = gen.bundle_from_z(gen.sample_z(&mut rng), res, &mut rng)?;
        let m = gen.synthesize(&b, Some(&p))?;
        let plane = res * res;
        ious.push(pattern_height_iou(&p.tensor().data()[..plane], m.height())?);
        let s = loop {
            let s = Shift2D::new(rng.gen_range(0..res as i64), rng.gen_range(0..res as i64));
            if s.dy % stride != 0 || s.dx % stride != 0 {
                break s;
            }
        };
        shifts.push(crate::losses::shift_loss(gen, Some(&p), &b, s)?);
    }
    Ok(ConditionalReport { samples: count, median_iou: median(ious), median_shift_loss: median(shifts) })
}
