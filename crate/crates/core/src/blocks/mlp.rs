use rand::Rng;

use super::layers::{join, pointwise, Bundle, ConvBranch, Identity, RepConv};
use super::{LayerMut, LayerRef, Layers};
use crate::error::Result;
use crate::tensor::{Backend, ConvSpec};

/// Two-layer 1×1 MLP with grouped extra branches on both convs and an
/// optional depthwise 3×3 (plus shortcut) in between.
///
/// `conv1 → ReLU → [dw3×3 + x] → conv2`; every conv branch is batch-normed.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmlp {
    pub width: usize,
    pub hidden: usize,
    pub conv1: RepConv,
    pub mid: Option<RepConv>,
    pub conv2: RepConv,
}

impl Gmlp {
    /// `grouped = false` builds the plain MLP (no extra branches).
    pub fn new(
        width: usize,
        hidden: usize,
        grouped: bool,
        mid_dw: bool,
        cfg: &super::ReparamConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g1 = if grouped { cfg.groups_for(1, width, hidden)? } else { vec![] };
        let g2 = if grouped { cfg.groups_for(1, hidden, width)? } else { vec![] };
        let conv1 = pointwise(width, hidden, &g1, true, rng)?;
        let mid = if mid_dw {
            let base = ConvBranch::new(ConvSpec::depthwise(hidden, 3), true, rng);
            Some(RepConv::Train(Bundle::new(base, vec![], Some(Identity::Plain))?))
        } else {
            None
        };
        let conv2 = pointwise(hidden, width, &g2, true, rng)?;
        Ok(Self {
            width,
            hidden,
            conv1,
            mid,
            conv2,
        })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let h = self.conv1.forward(b, &join(path, "conv1"), x)?;
        let mut h = b.relu(&h)?;
        if let Some(mid) = &self.mid {
            h = mid.forward(b, &join(path, "mid"), &h)?;
        }
        self.conv2.forward(b, &join(path, "conv2"), &h)
    }
}

impl Layers for Gmlp {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        f(&join(path, "conv1"), LayerRef::Rep(&self.conv1));
        if let Some(mid) = &self.mid {
            f(&join(path, "mid"), LayerRef::Rep(mid));
        }
        f(&join(path, "conv2"), LayerRef::Rep(&self.conv2));
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        f(&join(path, "conv1"), LayerMut::Rep(&mut self.conv1));
        if let Some(mid) = &mut self.mid {
            f(&join(path, "mid"), LayerMut::Rep(mid));
        }
        f(&join(path, "conv2"), LayerMut::Rep(&mut self.conv2));
    }
}
