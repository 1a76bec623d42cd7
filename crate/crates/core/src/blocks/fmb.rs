use rand::Rng;

use super::attention::{Attention, Mhsa, Rlmhsa};
use super::cfb::Cfb;
use super::layers::{join, pointwise, RepConv};
use super::mlp::Gmlp;
use super::{LayerMut, LayerRef, Layers, VariantSpec};
use crate::error::Result;
use crate::tensor::{Backend, TapKind};

/// Attention path wrapped in 1×1 projections: `in -> dim -> attention -> out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowPass {
    pub proj_in: RepConv,
    pub attn: Attention,
    pub proj_out: RepConv,
}

impl LowPass {
    fn new(cin: usize, dim: usize, cout: usize, v: &VariantSpec, rng: &mut impl Rng) -> Result<Self> {
        let r = &v.reparam;
        let proj_in = pointwise(cin, dim, &r.groups_for(1, cin, dim)?, true, rng)?;
        let attn = if v.ablation.rlmhsa {
            let g = r.groups_for(1, dim, dim)?;
            Attention::Shared(Rlmhsa::new(dim, v.head_dim, r.scale_mode, &g, rng)?)
        } else {
            Attention::Standard(Mhsa::new(dim, v.head_dim, r.scale_mode, rng)?)
        };
        let proj_out = pointwise(dim, cout, &r.groups_for(1, dim, cout)?, true, rng)?;
        Ok(Self {
            proj_in,
            attn,
            proj_out,
        })
    }

    fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let h = self.proj_in.forward(b, &join(path, "proj_in"), x)?;
        let h = self.attn.forward(b, &join(path, "attn"), &h)?;
        self.proj_out.forward(b, &join(path, "proj_out"), &h)
    }

    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        f(&join(path, "proj_in"), LayerRef::Rep(&self.proj_in));
        self.attn.walk(&join(path, "attn"), f);
        f(&join(path, "proj_out"), LayerRef::Rep(&self.proj_out));
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        f(&join(path, "proj_in"), LayerMut::Rep(&mut self.proj_in));
        self.attn.walk_mut(&join(path, "attn"), f);
        f(&join(path, "proj_out"), LayerMut::Rep(&mut self.proj_out));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FmbBody {
    /// `z1 = f1(x)`, `z2 = f2(z1)`, `z3 = f3(z2)` (CFBs at `fm` width) and
    /// `z4 = f4(z3)` (attention); the block mixes `concat(x, z1..z4)`.
    MultiFrequency { high: [Cfb; 3], low: LowPass },
    /// Attention output added to the input; no frequency concat.
    AttentionOnly { low: LowPass },
}

/// Multi-frequency fusion block.
///
/// Output is `proj(z + MLP(z))`, where `proj` is a 1×1 to `out_channels`
/// present only when that differs from the mixed width.
#[derive(Clone, Debug, PartialEq)]
pub struct Fmb {
    pub in_channels: usize,
    pub fm: usize,
    pub out_channels: usize,
    pub body: FmbBody,
    pub mlp: Gmlp,
    pub proj: Option<RepConv>,
}

impl Fmb {
    /// Width of `z`, the tensor the MLP sees.
    pub fn mixed_width(&self) -> usize {
        match self.body {
            FmbBody::MultiFrequency { .. } => self.in_channels + 4 * self.fm,
            FmbBody::AttentionOnly { .. } => self.in_channels,
        }
    }

    pub fn new(
        in_channels: usize,
        dim: usize,
        out_channels: usize,
        fm: usize,
        v: &VariantSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (body, width) = if v.ablation.fmb {
            let high = [
                Cfb::new(in_channels, fm, v, rng)?,
                Cfb::new(fm, fm, v, rng)?,
                Cfb::new(fm, fm, v, rng)?,
            ];
            let low = LowPass::new(fm, dim, fm, v, rng)?;
            (FmbBody::MultiFrequency { high, low }, in_channels + 4 * fm)
        } else {
            let low = LowPass::new(in_channels, dim, in_channels, v, rng)?;
            (FmbBody::AttentionOnly { low }, in_channels)
        };
        let mlp = Gmlp::new(
            width,
            width * v.mlp_ratio,
            v.ablation.gmlp,
            v.mlp_mid_dw,
            &v.reparam,
            rng,
        )?;
        let proj = if width != out_channels {
            let g = v.reparam.groups_for(1, width, out_channels)?;
            Some(pointwise(width, out_channels, &g, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            in_channels,
            fm,
            out_channels,
            body,
            mlp,
            proj,
        })
    }

    /// Emits spectrum taps `f1` (attention output `z4`), `f2` (block input)
    /// and `f3..f5` (`z1..z3`).
    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let z = match &self.body {
            FmbBody::MultiFrequency { high, low } => {
                let z1 = high[0].forward(b, &join(path, "f1"), x)?;
                let z2 = high[1].forward(b, &join(path, "f2"), &z1)?;
                let z3 = high[2].forward(b, &join(path, "f3"), &z2)?;
                let z4 = low.forward(b, &join(path, "f4"), &z3)?;
                for (name, t) in [("tap_f1", &z4), ("tap_f2", x), ("tap_f3", &z1), ("tap_f4", &z2), ("tap_f5", &z3)] {
                    b.tap(&join(path, name), TapKind::Spectrum, t);
                }
                b.concat_channels(&[x.clone(), z1, z2, z3, z4])?
            }
            FmbBody::AttentionOnly { low } => {
                let a = low.forward(b, &join(path, "attn"), x)?;
                b.add(x, &a)?
            }
        };
        let m = self.mlp.forward(b, &join(path, "mlp"), &z)?;
        let y = b.add(&z, &m)?;
        match &self.proj {
            Some(p) => p.forward(b, &join(path, "proj"), &y),
            None => Ok(y),
        }
    }

    pub fn attention(&self) -> &Attention {
        match &self.body {
            FmbBody::MultiFrequency { low, .. } | FmbBody::AttentionOnly { low } => &low.attn,
        }
    }
}

impl Layers for Fmb {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        match &self.body {
            FmbBody::MultiFrequency { high, low } => {
                for (i, c) in high.iter().enumerate() {
                    c.walk(&join(path, &format!("f{}", i + 1)), f);
                }
                low.walk(&join(path, "f4"), f);
            }
            FmbBody::AttentionOnly { low } => low.walk(&join(path, "attn"), f),
        }
        self.mlp.walk(&join(path, "mlp"), f);
        if let Some(p) = &self.proj {
            f(&join(path, "proj"), LayerRef::Rep(p));
        }
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        match &mut self.body {
            FmbBody::MultiFrequency { high, low } => {
                for (i, c) in high.iter_mut().enumerate() {
                    c.walk_mut(&join(path, &format!("f{}", i + 1)), f);
                }
                low.walk_mut(&join(path, "f4"), f);
            }
            FmbBody::AttentionOnly { low } => low.walk_mut(&join(path, "attn"), f),
        }
        self.mlp.walk_mut(&join(path, "mlp"), f);
        if let Some(p) = &mut self.proj {
            f(&join(path, "proj"), LayerMut::Rep(p));
        }
    }
}
