//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! the library routine it is used to check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use tessera::material::{ConditionPattern, MaterialClass, MaterialMaps};
use tessera::networks::{Generator, LatentBundle};
use tessera::tensor::Tensor;
use tessera::train::TrainSpec;

pub const CLASSES: [MaterialClass; 4] = [MaterialClass::Tile, MaterialClass::Leather, MaterialClass::Stone, MaterialClass::Metal];

pub fn desk_generator(class: MaterialClass, res: usize, seed: u64) -> (Generator, TrainSpec) {
    let spec = TrainSpec::desk(class, res);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Generator::new(spec.generator.clone(), &mut rng).unwrap(), spec)
}

/// Pattern from the class's augmented training stream (random cyclic
/// placement), or `None` for unconditional classes.
pub fn class_pattern(spec: &TrainSpec, res: usize, seed: u64) -> Option<ConditionPattern> {
    spec.class.class.conditional.then(|| spec.class.stream_sample(res, seed, 0).unwrap().pattern.unwrap())
}

pub fn random_bundle(gen: &Generator, domain: usize, seed: u64) -> LatentBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen.bundle_from_z(gen.sample_z(&mut rng), domain, &mut rng).unwrap()
}

/// `out[.., i, j] = x[.., (i - dy) mod h, (j - dx) mod w]` over the last two axes.
pub fn roll<T: Copy + Default>(x: &[T], h: usize, w: usize, dy: i64, dx: i64) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for p in 0..x.len() / (h * w) {
        for i in 0..h {
            for j in 0..w {
                let si = (i as i64 - dy).rem_euclid(h as i64) as usize;
                let sj = (j as i64 - dx).rem_euclid(w as i64) as usize;
                out[p * h * w + i * w + j] = x[p * h * w + si * w + sj];
            }
        }
    }
    out
}

pub fn roll_tensor(t: &Tensor<f32>, dy: i64, dx: i64) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Tensor::new(s, roll(t.data(), h, w, dy, dx)).unwrap()
}

pub fn roll_pattern(p: &ConditionPattern, dy: i64, dx: i64) -> ConditionPattern {
    ConditionPattern::new(roll_tensor(p.tensor(), dy, dx)).unwrap()
}

/// Noise maps moved by the same physical offset, rounding half away from zero.
pub fn roll_noise(b: &LatentBundle, domain: usize, dy: i64, dx: i64) -> LatentBundle {
    let noise = b
        .noise
        .iter()
        .map(|n| {
            let r = n.shape()[3];
            let k = r as f64 / domain as f64;
            roll_tensor(n, (dy as f64 * k).round() as i64, (dx as f64 * k).round() as i64)
        })
        .collect();
    LatentBundle { noise, ..b.clone() }
}

/// Two-pass translation residual `mean |T(G(p, u)) - G(T p, T u)|`.
pub fn two_pass_shift_loss(gen: &Generator, b: &LatentBundle, p: &ConditionPattern, dy: i64, dx: i64) -> f64 {
    let d = p.resolution();
    let a = gen.synthesize(b, Some(p)).unwrap();
    let a = roll_tensor(a.tensor(), dy, dx);
    let m = gen.synthesize(&roll_noise(b, d, dy, dx), Some(&roll_pattern(p, dy, dx))).unwrap();
    let n = a.data().len();
    a.data().iter().zip(m.tensor().data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n as f64
}

/// Circular cross-correlation by direct modular indexing; odd square kernels
/// centred on the output pixel.
pub fn conv_modular(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as i64;
    let mut y = vec![0.0; n * o * h * w];
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for a in 0..k {
                            for bb in 0..k {
                                let si = (i as i64 + a as i64 - r).rem_euclid(h as i64) as usize;
                                let sj = (j as i64 + bb as i64 - r).rem_euclid(w as i64) as usize;
                                acc += wt[((oi * c + ci) * k + a) * k + bb] * x[((ni * c + ci) * h + si) * w + sj];
                            }
                        }
                    }
                    y[((ni * o + oi) * h + i) * w + j] = acc;
                }
            }
        }
    }
    y
}

/// The same correlation through the 2-D DFT: the kernel is embedded in an
/// `h x w` grid at offsets `-(a - r)`, so the product of spectra is the
/// circular correlation.
pub fn conv_dft(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft2 = |planner: &mut FftPlanner<f64>, data: &mut [Complex64], inverse: bool| {
        let (rows, cols) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        for row in data.chunks_mut(w) {
            rows.process(row);
        }
        let mut col = vec![Complex64::default(); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = data[i * w + j];
            }
            cols.process(&mut col);
            for i in 0..h {
                data[i * w + j] = col[i];
            }
        }
    };
    let r = (k / 2) as i64;
    let mut y = vec![0.0; n * o * h * w];
    for ni in 0..n {
        let xs: Vec<Vec<Complex64>> = (0..c)
            .map(|ci| {
                let mut d: Vec<Complex64> =
                    x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w].iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft2(&mut planner, &mut d, false);
                d
            })
            .collect();
        for oi in 0..o {
            let mut acc = vec![Complex64::default(); h * w];
            for (ci, xf) in xs.iter().enumerate() {
                let mut kf = vec![Complex64::default(); h * w];
                for a in 0..k {
                    for bb in 0..k {
                        let i = (r - a as i64).rem_euclid(h as i64) as usize;
                        let j = (r - bb as i64).rem_euclid(w as i64) as usize;
                        kf[i * w + j] += Complex64::new(wt[((oi * c + ci) * k + a) * k + bb], 0.0);
                    }
                }
                fft2(&mut planner, &mut kf, false);
                for (s, (p, q)) in acc.iter_mut().zip(xf.iter().zip(&kf)) {
                    *s += p * q;
                }
            }
            fft2(&mut planner, &mut acc, true);
            let scale = 1.0 / (h * w) as f64;
            for (dst, v) in y[(ni * o + oi) * h * w..(ni * o + oi + 1) * h * w].iter_mut().zip(&acc) {
                *dst = v.re * scale;
            }
        }
    }
    y
}

/// Largest relative deviation of the analytic gradient from central
/// differences, relative to the larger magnitude with a floor of `1e-6`.
pub fn central_difference_error(f: impl Fn(&[f64]) -> f64, grad: &[f64], x: &[f64], step: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6));
    }
    worst
}

pub fn uniform(len: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// One map channel as an `(H, W)` tensor.
pub fn plane(m: &MaterialMaps, c: usize) -> Tensor<f32> {
    m.channel(c)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
