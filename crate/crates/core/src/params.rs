//! Named parameter storage and the convolution layer block every network
//! module is built from.

use std::collections::BTreeMap;

use acv_ndops::{conv2d, conv3d, deconv3d, ops, ConvParams, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AcvError, Result};

/// Learnable tensors keyed by dotted names such as `backbone.stem.0.weight`.
/// The first path segment is the parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), value);
        debug_assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| AcvError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| AcvError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Records every tensor as a tape leaf; `trainable(name)` decides whether
    /// it receives a gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = tape.leaf(v.clone(), trainable(k));
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Group of a parameter name (its first dotted segment).
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Tape handles for a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles recorded elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| AcvError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients collected after `tape.backward`, by parameter name.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Conv2d,
    Conv3d,
    /// 3-D transposed convolution; kernel layout `[C_in, C_out, k...]`.
    Deconv3d,
}

/// Variance floor of the per-channel normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Convolution, optionally followed by per-channel normalisation (over the
/// data axes of the single sample) with a learned affine, and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kind: ConvKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub norm: bool,
    pub relu: bool,
    pub bias: bool,
}

impl ConvLayer {
    fn new(name: impl Into<String>, kind: ConvKind, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let dims = if kind == ConvKind::Conv2d { 2 } else { 3 };
        Self {
            name: name.into(),
            kind,
            c_in,
            c_out,
            kernel: vec![k; dims],
            stride: vec![stride; dims],
            padding: vec![pad; dims],
            norm: false,
            relu: false,
            bias: false,
        }
    }

    pub fn conv2d(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::new(name, ConvKind::Conv2d, c_in, c_out, k, stride, pad)
    }

    pub fn conv3d(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::new(name, ConvKind::Conv3d, c_in, c_out, k, stride, pad)
    }

    pub fn deconv3d(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::new(name, ConvKind::Deconv3d, c_in, c_out, k, stride, pad)
    }

    /// Overrides the geometry of one axis (axis 0 = depth/disparity for 3-D layers).
    pub fn with_axis(mut self, axis: usize, k: usize, stride: usize, pad: usize) -> Self {
        self.kernel[axis] = k;
        self.stride[axis] = stride;
        self.padding[axis] = pad;
        self
    }

    pub fn norm_relu(mut self) -> Self {
        self.norm = true;
        self.relu = true;
        self
    }

    pub fn norm_only(mut self) -> Self {
        self.norm = true;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    fn kernel_shape(&self) -> Vec<usize> {
        let mut s = match self.kind {
            ConvKind::Deconv3d => vec![self.c_in, self.c_out],
            _ => vec![self.c_out, self.c_in],
        };
        s.extend_from_slice(&self.kernel);
        s
    }

    fn fan_in(&self) -> f64 {
        let kvol: usize = self.kernel.iter().product();
        match self.kind {
            ConvKind::Deconv3d => (self.c_in * kvol) as f64 / self.stride.iter().product::<usize>() as f64,
            _ => (self.c_in * kvol) as f64,
        }
    }

    /// He-normal weights (unit gain when no ReLU follows), unit scale, zero shift/bias.
    pub fn init<T: Real, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let gain = if self.relu { 2.0 } else { 1.0 };
        let normal = Normal::new(0.0, (gain / self.fan_in()).sqrt()).expect("positive std");
        let shape = self.kernel_shape();
        params.insert(
            format!("{}.weight", self.name),
            Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(rng))),
        );
        if self.bias {
            params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.c_out]));
        }
        if self.norm {
            params.insert(format!("{}.norm.scale", self.name), Tensor::ones(&[self.c_out]));
            params.insert(format!("{}.norm.shift", self.name), Tensor::zeros(&[self.c_out]));
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let p = ConvParams {
            kernel: params.get(&format!("{}.weight", self.name))?,
            bias: if self.bias { Some(params.get(&format!("{}.bias", self.name))?) } else { None },
            stride: self.stride.clone(),
            padding: self.padding.clone(),
            dilation: vec![1; self.kernel.len()],
        };
        let mut y = match self.kind {
            ConvKind::Conv2d => conv2d(tape, x, &p)?,
            ConvKind::Conv3d => conv3d(tape, x, &p)?,
            ConvKind::Deconv3d => deconv3d(tape, x, &p)?,
        };
        if self.norm {
            let scale = params.get(&format!("{}.norm.scale", self.name))?;
            let shift = params.get(&format!("{}.norm.shift", self.name))?;
            y = ops::channel_norm(tape, y, T::from_f64_lossy(NORM_EPS))?;
            y = ops::channel_affine(tape, y, scale, shift)?;
        }
        if self.relu {
            y = ops::relu(tape, y)?;
        }
        Ok(y)
    }

    /// Output spatial extents for input extents `input`.
    pub fn output_extent(&self, input: &[usize]) -> Vec<usize> {
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| match self.kind {
                ConvKind::Deconv3d => (n - 1) * self.stride[a] + self.kernel[a] - 2 * self.padding[a],
                _ => (n + 2 * self.padding[a] - self.kernel[a]) / self.stride[a] + 1,
            })
            .collect()
    }

    /// Multiply-accumulates for input extents `input` (matches the tape counter).
    pub fn macs(&self, input: &[usize]) -> u64 {
        let kvol: usize = self.kernel.iter().product();
        let pixels: usize = match self.kind {
            ConvKind::Deconv3d => input.iter().product(),
            _ => self.output_extent(input).iter().product(),
        };
        (self.c_in * self.c_out * kvol * pixels) as u64
    }
}
