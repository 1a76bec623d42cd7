//! Block implementations and the variant-level model builder.
//!
//! Every convolution that has a training-time multi-branch form is a
//! [`RepConv`]. Forward passes are written once against
//! [`Backend`](crate::tensor::Backend) so the same code runs eagerly, on the
//! gradient tape, or through the analyzer's shape tracer.
//!
//! Parameter paths are dotted, e.g. `stages.1.blocks.0.mlp.conv1.extra0.weight`.

pub mod attention;
pub mod cfb;
mod config;
pub mod fmb;
pub mod layers;
pub mod mlp;
pub mod model;

pub use attention::{attend, Attention, Mhsa, Rlmhsa};
pub use cfb::{depthwise_mixer, Cfb};
pub use config::{Ablation, BlockKind, ReparamConfig, ScaleMode, StageSpec, VariantSpec};
pub use fmb::{Fmb, FmbBody, LowPass};
pub use layers::{
    check_identity, check_mergeable, default_extra_groups, join, pointwise, BatchNorm, Bundle, Conv,
    ConvBranch, Identity, ParamKind, RepConv,
};
pub use mlp::Gmlp;
pub use model::{argmax_rows, Block, Model, PatchEmbed, Stage, Stem};

/// Borrowed layer handed out by [`Layers::walk`].
pub enum LayerRef<'a> {
    Rep(&'a RepConv),
    Conv(&'a Conv),
}

pub enum LayerMut<'a> {
    Rep(&'a mut RepConv),
    Conv(&'a mut Conv),
}

/// Visits every parameterised layer with its path, in forward order.
pub trait Layers {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>));
    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>));
}
