use rand::Rng;

use super::Trainable;
use crate::blocks::{BatchNorm, Conv, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{ops, Backend, BnStats, ConvSpec, Tensor};

/// Two 3×3 conv-BN-ReLU layers (the second strided), global pooling and a
/// linear classifier. Used to check that a dataset is learnable.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBaseline {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub fc: Conv,
}

impl ConvBaseline {
    pub fn new(in_channels: usize, width: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv::kaiming(ConvSpec::new(in_channels, width, 3), rng),
            bn1: BatchNorm::new(width),
            conv2: Conv::kaiming(ConvSpec::new(width, 2 * width, 3).with_stride(2), rng),
            bn2: BatchNorm::new(2 * width),
            fc: Conv::kaiming(ConvSpec::new(2 * width, classes, 1).with_bias(true), rng),
        }
    }

    fn bns_mut(&mut self) -> [(&'static str, &mut BatchNorm); 2] {
        [("bn1", &mut self.bn1), ("bn2", &mut self.bn2)]
    }
}

impl Trainable for ConvBaseline {
    fn logits<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let y = self.conv1.forward(b, "conv1", x)?;
        let y = self.bn1.forward(b, "bn1", &y)?;
        let y = b.relu(&y)?;
        let y = self.conv2.forward(b, "conv2", &y)?;
        let y = self.bn2.forward(b, "bn2", &y)?;
        let y = b.relu(&y)?;
        let y = b.global_avg_pool("pool", &y)?;
        self.fc.forward(b, "fc", &y)
    }

    fn params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (name, c) in [("conv1", &mut self.conv1), ("conv2", &mut self.conv2), ("fc", &mut self.fc)] {
            f(&format!("{name}.weight"), ParamKind::Weight, &mut c.weight);
            if let Some(bias) = &mut c.bias {
                f(&format!("{name}.bias"), ParamKind::Bias, bias);
            }
        }
        for (name, bn) in self.bns_mut() {
            f(&format!("{name}.gamma"), ParamKind::Gamma, &mut bn.gamma);
            f(&format!("{name}.beta"), ParamKind::Beta, &mut bn.beta);
        }
    }

    fn apply_bn_stats(&mut self, stats: &[BnStats], momentum: f64) -> Result<()> {
        for s in stats {
            let Some((_, bn)) = self.bns_mut().into_iter().find(|(n, _)| *n == s.path) else {
                return Err(Error::Invalid(format!("no batch norm at `{}`", s.path)));
            };
            ops::update_running_stat(bn.running_mean.data_mut(), &s.mean, momentum);
            ops::update_running_stat(bn.running_var.data_mut(), &s.var, momentum);
        }
        Ok(())
    }
}
