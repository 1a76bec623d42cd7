use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, train, Samples, TrainConfig};
use crate::analyzer::{count_flops, count_params};
use crate::blocks::{Ablation, Block, Model, VariantSpec};
use crate::error::{Error, Result};
use crate::reparam::fuse_model;
use crate::tensor::Dims;

/// One configuration of the module ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Deployed trainable parameters.
    pub params: u64,
    /// Attention projection weights summed over all attention layers.
    pub attention_params: u64,
    /// Deployed MACs at the suite's input size.
    pub macs: u64,
    /// Accuracy of the fused model after toy training, when training ran.
    pub accuracy: Option<f64>,
}

/// The cumulative lattice: everything off, then shared-projection
/// attention, then grouped MLP branches, then the multi-frequency concat.
pub fn ablation_lattice() -> [Ablation; 4] {
    let a = |fmb, gmlp, rlmhsa| Ablation { fmb, gmlp, rlmhsa };
    [a(false, false, false), a(false, false, true), a(false, true, true), a(true, true, true)]
}

fn attention_params(m: &Model) -> u64 {
    m.stages
        .iter()
        .flat_map(|s| &s.blocks)
        .map(|b| match b {
            Block::Fmb(f) => f.attention().projection_params() as u64,
            Block::Cfb(_) => 0,
        })
        .sum()
}

/// Builds, optionally trains, fuses and measures `base` under each
/// configuration. Every configuration must be a lattice point.
///
/// Models share `seed`. With `training`, each model is fit on the first
/// dataset and its fused form is scored on the second.
pub fn ablation_suite(
    base: &VariantSpec,
    configs: &[Ablation],
    input_dims: Dims,
    training: Option<(&Samples, &Samples, &TrainConfig)>,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let lattice = ablation_lattice();
    let mut rows = Vec::with_capacity(configs.len());
    for &ablation in configs {
        if !lattice.contains(&ablation) {
            return Err(Error::Config(format!(
                "toggle combination fmb={} gmlp={} rlmhsa={} is not part of the ablation lattice",
                ablation.fmb, ablation.gmlp, ablation.rlmhsa
            )));
        }
        let mut spec = base.clone();
        spec.ablation = ablation;
        let mut model = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let accuracy = match training {
            Some((train_set, eval_set, cfg)) => {
                train(&mut model, train_set, cfg)?;
                Some(evaluate(&fuse_model(&model)?.0, eval_set)?.accuracy)
            }
            None => None,
        };
        let (fused, _) = fuse_model(&model)?;
        rows.push(AblationRow {
            ablation,
            params: count_params(&fused).totals.params,
            attention_params: attention_params(&fused),
            macs: count_flops(&fused, input_dims)?.totals.macs,
            accuracy,
        });
    }
    Ok(rows)
}
