//! Collapsing training-form bundles into deployed convolutions, and
//! numerical certification that the two forms agree.

mod kernels;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use kernels::{
    expand_groups, fold_bn, fold_identity_branch, merge_asymmetric, merge_parallel_branches, pad_kernel,
    PassRecord,
};

use crate::blocks::{LayerMut, Layers, Model, RepConv};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Eager, Tensor};

/// Assumptions every fusion relies on; repeated in reports.
pub const ASSUMPTIONS: &[&str] = &[
    "batch norm is applied per parallel branch, before the branch sum",
    "every convolution pads (K-1)/2 per axis",
];

/// Fuses one layer. A deployed layer is returned unchanged with no passes.
pub fn fuse_rep(layer: &RepConv, path: &str) -> Result<(RepConv, Vec<PassRecord>)> {
    match layer {
        RepConv::Deployed(_) => Ok((layer.clone(), Vec::new())),
        RepConv::Train(bundle) => {
            let (conv, passes) = merge_parallel_branches(bundle, path)?;
            Ok((RepConv::Deployed(conv), passes))
        }
    }
}

/// Returns the deployed form of `model` and the passes applied, in order.
///
/// Fusing an already deployed model yields an equal model and no passes.
pub fn fuse_model(model: &Model) -> Result<(Model, Vec<PassRecord>)> {
    let mut out = model.clone();
    let mut passes = Vec::new();
    let mut failure = None;
    out.walk_mut("", &mut |path, layer| {
        if failure.is_some() {
            return;
        }
        if let LayerMut::Rep(r) = layer {
            match fuse_rep(r, path) {
                Ok((fused, p)) => {
                    *r = fused;
                    passes.extend(p);
                }
                Err(e) => failure = Some(e),
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok((out, passes)),
    }
}

/// Outcome of comparing two models on seeded inputs.
#[derive(Clone, Debug)]
pub struct FusionReport {
    pub passes: Vec<PassRecord>,
    /// Max abs difference of each unit's output on a shared input, in
    /// forward order.
    pub residuals: Vec<(String, f64)>,
    /// Max abs difference of the logits.
    pub end_to_end: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub assumptions: Vec<String>,
}

impl FusionReport {
    pub fn worst_layer(&self) -> Option<(&str, f64)> {
        self.residuals
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, r)| (p.as_str(), *r))
    }
}

/// Default tolerances: per-block checks and full-model checks.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Seeded standard-normal inputs, one `(1, C, H, W)` sample each.
pub fn sample_inputs(dims: Dims, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::randn([1, dims[1], dims[2], dims[3]], 1.0, &mut rng)).collect()
}

/// Runs both models on `samples` seeded inputs of `input_dims`.
///
/// Each unit of [`Model::units`] is checked in isolation: both models' copies
/// receive the same input, taken from `a`'s own forward pass, and the max abs
/// difference of their outputs is that unit's residual. The logits of two
/// independent full passes give the end-to-end residual. The verdict passes
/// iff every residual, end-to-end included, is below `tolerance`.
pub fn verify_equivalence(
    a: &Model,
    b: &Model,
    samples: usize,
    tolerance: f64,
    seed: u64,
    input_dims: Dims,
) -> Result<FusionReport> {
    if a.spec.in_channels != b.spec.in_channels || a.classes() != b.classes() {
        return Err(Error::Signature(format!(
            "models take {} / {} channels and emit {} / {} classes",
            a.spec.in_channels,
            b.spec.in_channels,
            a.classes(),
            b.classes()
        )));
    }
    let units = a.units();
    if units != b.units() {
        return Err(Error::Signature(format!(
            "models have {} and {} units",
            units.len(),
            b.units().len()
        )));
    }
    if samples == 0 {
        return Err(Error::Invalid("verification needs at least one sample".into()));
    }
    let inputs = sample_inputs(input_dims, samples, seed);
    let mut residuals: Vec<(String, f64)> = units.iter().map(|p| (p.clone(), 0.0)).collect();
    let mut end_to_end = 0f64;
    const CHUNK: usize = 4;
    let mut e = Eager::<f32>::inference();
    for chunk in inputs.chunks(CHUNK) {
        let x = Tensor::stack(chunk)?;
        let mut xa = x.clone();
        for (k, slot) in residuals.iter_mut().enumerate() {
            let ya = a.forward_unit(&mut e, k, &xa)?;
            let yb = b.forward_unit(&mut e, k, &xa)?;
            if ya.dims() != yb.dims() {
                return Err(Error::Signature(format!(
                    "unit `{}` outputs {:?} and {:?}",
                    slot.0,
                    ya.dims(),
                    yb.dims()
                )));
            }
            slot.1 = slot.1.max(ya.max_abs_diff(&yb));
            xa = ya;
        }
        let yb = b.forward(&mut e, &x)?;
        end_to_end = end_to_end.max(xa.max_abs_diff(&yb));
    }
    let passed = end_to_end < tolerance && residuals.iter().all(|(_, r)| *r < tolerance);
    Ok(FusionReport {
        passes: Vec::new(),
        residuals,
        end_to_end,
        samples,
        tolerance,
        passed,
        assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests;
