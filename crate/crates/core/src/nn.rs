//! Parameter storage and the equalized-learning-rate layers the networks are
//! assembled from. Every spatial layer goes through the circular kernels.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::periodic_ops::{downsample_origin, upsample_origin, Axis, PadMode};
use crate::tensor::{Real, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// Replace values from `(name, tensor)` pairs; every parameter must be present
    /// with a matching shape.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor<f32>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| Error::contract(format!("parameter `{name}` missing from archive")))?;
            if src.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}` has shape {:?}, archive holds {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.cast();
        }
        Ok(())
    }

    /// `self = beta * self + (1 - beta) * other`.
    pub fn lerp_towards(&mut self, other: &Params<T>, beta: f64) {
        let b = T::c(beta);
        let ob = T::one() - b;
        for (a, o) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(o.data()) {
                *x = b * *x + ob * y;
            }
        }
    }
}

/// Per-graph binding of parameters to tape leaves.
pub struct Scope<'p, T: Real> {
    params: &'p Params<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, T: Real> Scope<'p, T> {
    /// `trainable` decides whether parameters become differentiable leaves.
    pub fn new(params: &'p Params<T>, trainable: bool) -> Self {
        Self { params, vars: vec![None; params.len()], trainable }
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradient per parameter, zero for parameters the graph never touched.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.params.tensors[i].shape()))
            })
            .collect()
    }
}

pub fn randn<T: Real>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        T::c(v * scale)
    })
}

/// Fully connected layer with runtime weight scaling.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lr_mul: f64,
}

impl Dense {
    pub fn new<T: Real>(
        p: &mut Params<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: Option<f64>,
        lr_mul: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = p.add(format!("{name}.weight"), randn(&[in_dim, out_dim], 1.0 / lr_mul, rng));
        let bias = bias.map(|b| p.add(format!("{name}.bias"), Tensor::full(&[1, out_dim], T::c(b / lr_mul))));
        Self { weight, bias, in_dim, out_dim, lr_mul }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let w = s.var(g, self.weight);
        let w = g.scale(w, self.lr_mul / (self.in_dim as f64).sqrt());
        let mut y = g.matmul(x, w, false, false)?;
        if let Some(b) = self.bias {
            let b = s.var(g, b);
            let b = g.scale(b, self.lr_mul);
            y = g.add(y, b)?;
        }
        Ok(y)
    }
}

/// Plain convolution with equalized learning rate.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: PadMode,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        p: &mut Params<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        pad: PadMode,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = p.add(format!("{name}.weight"), randn(&[out_ch, in_ch, kernel, kernel], 1.0, rng));
        let bias = bias.then(|| p.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self { weight, bias, in_ch, out_ch, kernel, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let w = s.var(g, self.weight);
        let w = g.scale(w, 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt());
        let y = g.conv2d(x, w, self.pad)?;
        match self.bias {
            Some(b) => add_channel_bias(g, s, y, b, 1.0),
            None => Ok(y),
        }
    }
}

pub fn add_channel_bias<T: Real>(g: &mut Graph<T>, s: &mut Scope<T>, x: Var, bias: ParamId, lr_mul: f64) -> Result<Var> {
    let b = s.var(g, bias);
    let c = g.shape(b)[0];
    let b = g.reshape(b, &[1, c, 1, 1])?;
    let b = if lr_mul != 1.0 { g.scale(b, lr_mul) } else { b };
    g.add(x, b)
}

pub fn lrelu<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let y = g.leaky_relu(x, LRELU_SLOPE);
    g.scale(y, LRELU_GAIN)
}

/// Style-modulated convolution, evaluated as input scaling, a shared-weight
/// convolution and output demodulation (equivalent to modulating the weights
/// per sample).
#[derive(Debug, Clone)]
pub struct ModConv {
    pub affine: Dense,
    pub weight: ParamId,
    pub bias: ParamId,
    pub noise_strength: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub demodulate: bool,
    pub activate: bool,
    pub pad: PadMode,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        p: &mut Params<T>,
        name: &str,
        style_dim: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        demodulate: bool,
        noise_init: Option<f64>,
        pad: PadMode,
        rng: &mut impl Rng,
    ) -> Self {
        let affine = Dense::new(p, &format!("{name}.affine"), style_dim, in_ch, Some(1.0), 1.0, rng);
        let weight = p.add(format!("{name}.weight"), randn(&[out_ch, in_ch, kernel, kernel], 1.0, rng));
        let noise_strength = noise_init.map(|v| p.add(format!("{name}.noise_strength"), Tensor::full(&[1], T::c(v))));
        let bias = p.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            affine,
            weight,
            bias,
            noise_strength,
            in_ch,
            out_ch,
            kernel,
            demodulate,
            activate: demodulate,
            pad,
        }
    }

    /// `x: (N, Cin, H, W)`, `w: (N, style_dim)`, `noise: (N, 1, H, W)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &mut Scope<T>,
        x: Var,
        w: Var,
        noise: Option<Var>,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut style = self.affine.forward(g, s, w)?;
        if !self.demodulate {
            // toRGB-style layers fold the fan-in gain into the style
            style = g.scale(style, 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt());
        }
        let style4 = g.reshape(style, &[n, self.in_ch, 1, 1])?;
        let xm = g.mul(x, style4)?;
        let wt = s.var(g, self.weight);
        let wt = if self.demodulate {
            g.scale(wt, 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt())
        } else {
            wt
        };
        let mut y = g.conv2d(xm, wt, self.pad)?;
        if self.demodulate {
            let w2 = g.square(wt);
            let w2 = g.reshape(w2, &[self.out_ch, self.in_ch, self.kernel * self.kernel])?;
            let w2 = g.sum_axes(w2, &[2])?;
            let w2 = g.reshape(w2, &[self.out_ch, self.in_ch])?;
            let s2 = g.square(style);
            let d = g.matmul(s2, w2, false, true)?;
            let d = g.add_scalar(d, crate::periodic_ops::DEMOD_EPS);
            let d = g.powf(d, -0.5);
            let d = g.reshape(d, &[n, self.out_ch, 1, 1])?;
            y = g.mul(y, d)?;
        }
        if let (Some(ns), Some(noise)) = (self.noise_strength, noise) {
            let ns = s.var(g, ns);
            let scaled = g.mul(noise, ns)?;
            y = g.add(y, scaled)?;
        }
        y = add_channel_bias(g, s, y, self.bias, 1.0)?;
        if self.activate {
            y = lrelu(g, y);
        }
        Ok(y)
    }
}

fn normalized_taps(blur: &[f64], gain: f64) -> Vec<f64> {
    let s: f64 = blur.iter().sum();
    blur.iter().map(|t| gain * t / s).collect()
}

/// Zero-stuff then blur; the tape version of `circular_upsample2x`.
pub fn upsample2x<T: Real>(g: &mut Graph<T>, x: Var, blur: &[f64], pad: PadMode) -> Var {
    let taps = normalized_taps(blur, 2.0);
    let o = upsample_origin(taps.len());
    let z = g.zero_stuff2x(x);
    let z = g.filter(z, &taps, o, Axis::Height, pad);
    g.filter(z, &taps, o, Axis::Width, pad)
}

/// Blur then decimate; the tape version of `circular_downsample2x`.
pub fn downsample2x<T: Real>(g: &mut Graph<T>, x: Var, blur: &[f64], pad: PadMode) -> Var {
    let taps = normalized_taps(blur, 1.0);
    let o = downsample_origin(taps.len());
    let y = g.filter(x, &taps, o, Axis::Height, pad);
    let y = g.filter(y, &taps, o, Axis::Width, pad);
    g.decimate2x(y)
}

/// Every spatial operator on the tape uses wrap-around indexing.
pub fn tape_is_circular<T: Real>(g: &Graph<T>) -> bool {
    g.ops().filter_map(|op| op.spatial_padding()).all(|p| p == PadMode::Circular)
}
