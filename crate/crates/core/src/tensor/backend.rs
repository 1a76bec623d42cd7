use std::collections::HashMap;

use super::{ops, ConvSpec, Dims, Scalar, Tensor};
use crate::error::Result;

/// Borrowed batch-norm parameters.
#[derive(Clone, Copy, Debug)]
pub struct BnRef<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub running_mean: &'a Tensor,
    pub running_var: &'a Tensor,
    pub eps: f64,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub path: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Instrumentation point categories emitted by block forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapKind {
    /// Output of a whole block (stem, patch embedding, CFB, FMB, head).
    Block,
    /// One of the frequency-branch features inside a multi-frequency block.
    Spectrum,
}

/// Execution target for block forward passes.
///
/// Blocks are written once against this trait. [`Eager`] computes values
/// directly, [`super::GradTape`] records them for differentiation, and the
/// analyzer's shape backend only propagates dims and counts work.
///
/// `path` arguments name the layer that owns an operation; they key
/// parameters, batch-norm statistics and cost rows.
pub trait Backend {
    type Elem: Scalar;
    type Value: Clone;

    /// Whether batch norm uses batch statistics.
    fn is_training(&self) -> bool;

    fn param(&mut self, path: &str, t: &Tensor) -> Result<Self::Value>;

    fn dims(&self, v: &Self::Value) -> Dims;

    fn conv2d(
        &mut self,
        path: &str,
        x: &Self::Value,
        spec: &ConvSpec,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
    ) -> Result<Self::Value>;

    fn batch_norm(&mut self, path: &str, x: &Self::Value, bn: BnRef<'_>) -> Result<Self::Value>;

    fn avg_pool2d(
        &mut self,
        path: &str,
        x: &Self::Value,
        window: usize,
        stride: usize,
    ) -> Result<Self::Value>;

    fn global_avg_pool(&mut self, path: &str, x: &Self::Value) -> Result<Self::Value>;

    fn matmul(
        &mut self,
        path: &str,
        a: &Self::Value,
        b: &Self::Value,
        transpose_a: bool,
        transpose_b: bool,
    ) -> Result<Self::Value>;

    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn concat_channels(&mut self, xs: &[Self::Value]) -> Result<Self::Value>;

    fn reshape(&mut self, x: &Self::Value, dims: Dims) -> Result<Self::Value>;

    fn softmax_lastdim(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn scale(&mut self, x: &Self::Value, s: f64) -> Result<Self::Value>;

    fn tap(&mut self, _path: &str, _kind: TapKind, _x: &Self::Value) {}
}

/// Direct evaluation on tensors.
#[derive(Debug)]
pub struct Eager<T: Scalar = f32> {
    training: bool,
    overrides: HashMap<String, Tensor<T>>,
    record_taps: bool,
    taps: Vec<(String, TapKind, Tensor<T>)>,
    bn_stats: Vec<BnStats>,
}

impl<T: Scalar> Default for Eager<T> {
    fn default() -> Self {
        Self::inference()
    }
}

impl<T: Scalar> Eager<T> {
    /// Inference mode: batch norm uses running statistics.
    pub fn inference() -> Self {
        Self {
            training: false,
            overrides: HashMap::new(),
            record_taps: false,
            taps: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    /// Training mode: batch norm normalises with batch statistics, which are
    /// collected in [`Eager::bn_stats`].
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::inference()
        }
    }

    pub fn with_taps(mut self) -> Self {
        self.record_taps = true;
        self
    }

    /// Substitutes the parameter at `path` with `value` for every lookup.
    pub fn with_override(mut self, path: impl Into<String>, value: Tensor<T>) -> Self {
        self.overrides.insert(path.into(), value);
        self
    }

    pub fn taps(&self) -> &[(String, TapKind, Tensor<T>)] {
        &self.taps
    }

    pub fn take_taps(&mut self) -> Vec<(String, TapKind, Tensor<T>)> {
        std::mem::take(&mut self.taps)
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }
}

impl<T: Scalar> Backend for Eager<T> {
    type Elem = T;
    type Value = Tensor<T>;

    fn is_training(&self) -> bool {
        self.training
    }

    fn param(&mut self, path: &str, t: &Tensor) -> Result<Tensor<T>> {
        Ok(match self.overrides.get(path) {
            Some(v) => v.clone(),
            None => T::from_f32_tensor(t),
        })
    }

    fn dims(&self, v: &Tensor<T>) -> Dims {
        v.dims()
    }

    fn conv2d(
        &mut self,
        _path: &str,
        x: &Tensor<T>,
        spec: &ConvSpec,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        ops::conv2d(x, spec, weight, bias)
    }

    fn batch_norm(&mut self, path: &str, x: &Tensor<T>, bn: BnRef<'_>) -> Result<Tensor<T>> {
        let gamma = self.param(&format!("{path}.gamma"), bn.gamma)?;
        let beta = self.param(&format!("{path}.beta"), bn.beta)?;
        if self.training {
            let (out, mean, var) = ops::batch_norm_training(x, &gamma, &beta, bn.eps)?;
            self.bn_stats.push(BnStats {
                path: path.to_string(),
                mean,
                var,
            });
            Ok(out)
        } else {
            let mean = T::from_f32_tensor(bn.running_mean);
            let var = T::from_f32_tensor(bn.running_var);
            ops::batch_norm_inference(x, &gamma, &beta, &mean, &var, bn.eps)
        }
    }

    fn avg_pool2d(&mut self, _path: &str, x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
        ops::avg_pool2d(x, window, stride)
    }

    fn global_avg_pool(&mut self, _path: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::global_avg_pool(x)
    }

    fn matmul(
        &mut self,
        _path: &str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        transpose_a: bool,
        transpose_b: bool,
    ) -> Result<Tensor<T>> {
        ops::matmul(a, b, transpose_a, transpose_b)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::relu(x)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }

    fn concat_channels(&mut self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        ops::concat_channels(&refs)
    }

    fn reshape(&mut self, x: &Tensor<T>, dims: Dims) -> Result<Tensor<T>> {
        x.reshape(dims)
    }

    fn softmax_lastdim(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax_lastdim(x)
    }

    fn scale(&mut self, x: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
        ops::scale(x, s)
    }

    fn tap(&mut self, path: &str, kind: TapKind, x: &Tensor<T>) {
        if self.record_taps {
            self.taps.push((path.to_string(), kind, x.clone()));
        }
    }
}
