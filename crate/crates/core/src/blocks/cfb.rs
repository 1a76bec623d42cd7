use rand::Rng;

use super::layers::{join, pointwise, BatchNorm, Bundle, ConvBranch, Identity, RepConv};
use super::mlp::Gmlp;
use super::{LayerMut, LayerRef, Layers, VariantSpec};
use crate::error::Result;
use crate::tensor::{Backend, ConvSpec};

/// Convolutional fusion block: a depthwise token mixer followed by an MLP,
/// each with a residual.
///
/// The mixer bundle is `BN(dw3×3 x) + BN(dw1×1 x) + BN(x)`; its identity
/// branch is the mixer's residual path. An optional 1×1 projection adapts
/// the input width first.
#[derive(Clone, Debug, PartialEq)]
pub struct Cfb {
    pub in_channels: usize,
    pub channels: usize,
    pub proj: Option<RepConv>,
    pub mixer: RepConv,
    pub mlp: Gmlp,
}

/// The three-branch depthwise bundle on `c` channels.
pub fn depthwise_mixer(c: usize, rng: &mut impl Rng) -> Result<RepConv> {
    let base = ConvBranch::new(ConvSpec::depthwise(c, 3), true, rng);
    let point = ConvBranch::new(ConvSpec::depthwise(c, 1), true, rng);
    Ok(RepConv::Train(Bundle::new(
        base,
        vec![point],
        Some(Identity::Bn(BatchNorm::new(c))),
    )?))
}

impl Cfb {
    pub fn new(in_channels: usize, channels: usize, v: &VariantSpec, rng: &mut impl Rng) -> Result<Self> {
        let proj = if in_channels != channels {
            let g = v.reparam.groups_for(1, in_channels, channels)?;
            Some(pointwise(in_channels, channels, &g, true, rng)?)
        } else {
            None
        };
        let mixer = depthwise_mixer(channels, rng)?;
        let mlp = Gmlp::new(
            channels,
            channels * v.mlp_ratio,
            v.ablation.gmlp,
            v.mlp_mid_dw,
            &v.reparam,
            rng,
        )?;
        Ok(Self {
            in_channels,
            channels,
            proj,
            mixer,
            mlp,
        })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let x = match &self.proj {
            Some(p) => p.forward(b, &join(path, "proj"), x)?,
            None => x.clone(),
        };
        let y = self.mixer.forward(b, &join(path, "mixer"), &x)?;
        let m = self.mlp.forward(b, &join(path, "mlp"), &y)?;
        b.add(&y, &m)
    }
}

impl Layers for Cfb {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        if let Some(p) = &self.proj {
            f(&join(path, "proj"), LayerRef::Rep(p));
        }
        f(&join(path, "mixer"), LayerRef::Rep(&self.mixer));
        self.mlp.walk(&join(path, "mlp"), f);
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        if let Some(p) = &mut self.proj {
            f(&join(path, "proj"), LayerMut::Rep(p));
        }
        f(&join(path, "mixer"), LayerMut::Rep(&mut self.mixer));
        self.mlp.walk_mut(&join(path, "mlp"), f);
    }
}
