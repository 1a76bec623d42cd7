use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cfb::Cfb;
use super::fmb::Fmb;
use super::layers::{join, pointwise, BatchNorm, Bundle, Conv, ConvBranch, ParamKind, RepConv};
use super::{BlockKind, LayerMut, LayerRef, Layers, VariantSpec};
use crate::error::{Error, Result};
use crate::tensor::{ops, Backend, BnStats, ConvSpec, Dims, Eager, TapKind, Tensor};

/// `3×3 s2 (+3×1, +1×3) → ReLU → dw3×3 s2 (+dw1×1) → ReLU → 1×1 → ReLU`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub conv: RepConv,
    pub dw: RepConv,
    pub pw: RepConv,
}

impl Stem {
    pub fn new(v: &VariantSpec, rng: &mut impl Rng) -> Result<Self> {
        let [c0, c1, c2] = v.stem;
        let spec = ConvSpec::new(v.in_channels, c0, 3).with_stride(2);
        let conv = RepConv::Train(Bundle::new(
            ConvBranch::new(spec, true, rng),
            vec![
                ConvBranch::new(spec.with_kernel(3, 1), true, rng),
                ConvBranch::new(spec.with_kernel(1, 3), true, rng),
            ],
            None,
        )?);
        let dw_spec = ConvSpec::depthwise(c0, 3).with_stride(2);
        let dw = RepConv::Train(Bundle::new(
            ConvBranch::new(dw_spec, true, rng),
            vec![ConvBranch::new(dw_spec.with_kernel(1, 1), true, rng)],
            None,
        )?);
        let pw = pointwise(c1, c2, &v.reparam.groups_for(1, c1, c2)?, true, rng)?;
        Ok(Self { conv, dw, pw })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let [_, _, h, w] = b.dims(x);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape {
                op: "stem",
                detail: format!("spatial size {h}x{w} is not divisible by 4"),
            });
        }
        let y = self.conv.forward(b, &join(path, "conv"), x)?;
        let y = b.relu(&y)?;
        let y = self.dw.forward(b, &join(path, "dw"), &y)?;
        let y = b.relu(&y)?;
        let y = self.pw.forward(b, &join(path, "pw"), &y)?;
        b.relu(&y)
    }
}

impl Layers for Stem {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        f(&join(path, "conv"), LayerRef::Rep(&self.conv));
        f(&join(path, "dw"), LayerRef::Rep(&self.dw));
        f(&join(path, "pw"), LayerRef::Rep(&self.pw));
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        f(&join(path, "conv"), LayerMut::Rep(&mut self.conv));
        f(&join(path, "dw"), LayerMut::Rep(&mut self.dw));
        f(&join(path, "pw"), LayerMut::Rep(&mut self.pw));
    }
}

/// Identity, a 1×1 channel adaptor, or 2×2 average pooling followed by a 1×1.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub downsample: bool,
    pub conv: Option<RepConv>,
}

impl PatchEmbed {
    pub fn new(
        cin: usize,
        cout: usize,
        downsample: bool,
        v: &VariantSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = if downsample || cin != cout {
            Some(pointwise(cin, cout, &v.reparam.groups_for(1, cin, cout)?, true, rng)?)
        } else {
            None
        };
        Ok(Self { downsample, conv })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let x = if self.downsample {
            b.avg_pool2d(&join(path, "pool"), x, 2, 2)?
        } else {
            x.clone()
        };
        match &self.conv {
            Some(c) => c.forward(b, &join(path, "conv"), &x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Cfb(Cfb),
    Fmb(Fmb),
}

impl Block {
    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        match self {
            Block::Cfb(c) => c.forward(b, path, x),
            Block::Fmb(f) => f.forward(b, path, x),
        }
    }
}

impl Layers for PatchEmbed {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        if let Some(c) = &self.conv {
            f(&join(path, "conv"), LayerRef::Rep(c));
        }
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        if let Some(c) = &mut self.conv {
            f(&join(path, "conv"), LayerMut::Rep(c));
        }
    }
}

impl Layers for Block {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        match self {
            Block::Cfb(c) => c.walk(path, f),
            Block::Fmb(m) => m.walk(path, f),
        }
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        match self {
            Block::Cfb(c) => c.walk_mut(path, f),
            Block::Fmb(m) => m.walk_mut(path, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
}

/// Full classifier: stem, four stages, global average pool and a 1×1
/// classifier conv with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: VariantSpec,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: Conv,
}

impl Model {
    pub fn build(spec: &VariantSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let stem = Stem::new(spec, rng)?;
        let mut width = spec.stem[2];
        let mut stages = Vec::with_capacity(spec.stages.len());
        for s in &spec.stages {
            let embed = PatchEmbed::new(width, s.embed, s.downsample, spec, rng)?;
            let [cin, mid, cout] = s.channels;
            let mut blocks = Vec::with_capacity(s.blocks);
            let mut bin = cin;
            for _ in 0..s.blocks {
                blocks.push(match s.kind {
                    BlockKind::Cfb => Block::Cfb(Cfb::new(bin, mid, spec, rng)?),
                    BlockKind::Fmb => Block::Fmb(Fmb::new(bin, mid, cout, s.fm, spec, rng)?),
                });
                bin = cout;
            }
            stages.push(Stage { embed, blocks });
            width = cout;
        }
        let head = Conv::kaiming(ConvSpec::new(width, spec.classes, 1).with_bias(true), rng);
        Ok(Self {
            spec: spec.clone(),
            stem,
            stages,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Logits `(N, classes, 1, 1)`. Emits a [`TapKind::Block`] tap after the
    /// stem, every patch embedding, every block and the head.
    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let [_, c, h, w] = b.dims(x);
        let r = self.spec.reduction();
        if c != self.spec.in_channels {
            return Err(Error::Shape {
                op: "model",
                detail: format!("input has {c} channels, expected {}", self.spec.in_channels),
            });
        }
        if h % r != 0 || w % r != 0 {
            return Err(Error::Shape {
                op: "model",
                detail: format!("spatial size {h}x{w} is not divisible by {r}"),
            });
        }
        let mut y = x.clone();
        for (k, path) in self.units().iter().enumerate() {
            y = self.forward_unit(b, k, &y)?;
            b.tap(path, TapKind::Block, &y);
        }
        Ok(y)
    }

    /// Paths of the top-level units in forward order: the stem, every patch
    /// embedding and block, then the head (pool and classifier).
    pub fn units(&self) -> Vec<String> {
        let mut out = vec!["stem".to_string()];
        for (i, stage) in self.stages.iter().enumerate() {
            out.push(format!("stages.{i}.embed"));
            out.extend((0..stage.blocks.len()).map(|j| format!("stages.{i}.blocks.{j}")));
        }
        out.push("head".into());
        out
    }

    /// Runs unit `k` of [`Model::units`] alone.
    pub fn forward_unit<B: Backend>(&self, b: &mut B, k: usize, x: &B::Value) -> Result<B::Value> {
        if k == 0 {
            return self.stem.forward(b, "stem", x);
        }
        let unit = k;
        let mut k = k - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            if k == 0 {
                return stage.embed.forward(b, &format!("stages.{i}.embed"), x);
            }
            k -= 1;
            if k < stage.blocks.len() {
                return stage.blocks[k].forward(b, &format!("stages.{i}.blocks.{k}"), x);
            }
            k -= stage.blocks.len();
        }
        if k == 0 {
            let pooled = b.global_avg_pool("head.pool", x)?;
            return self.head.forward(b, "head.fc", &pooled);
        }
        Err(Error::Invalid(format!("model has no unit {unit}")))
    }

    /// Inference-mode logits in `f32`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(&mut Eager::<f32>::inference(), x)
    }

    /// Argmax class per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x)?))
    }

    pub fn is_deployed(&self) -> bool {
        let mut all = true;
        self.walk("", &mut |_, l| {
            if let LayerRef::Rep(r) = l {
                all &= r.is_deployed();
            }
        });
        all
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.walk("", &mut |path, layer| match layer {
            LayerRef::Rep(r) => r.for_each_param(path, f),
            LayerRef::Conv(c) => super::layers::conv_params(c, path, f),
        });
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.walk_mut("", &mut |path, layer| match layer {
            LayerMut::Rep(r) => r.for_each_param_mut(path, f),
            LayerMut::Conv(c) => super::layers::conv_params_mut(c, path, f),
        });
    }

    pub fn batch_norms_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNorm)) {
        self.walk_mut("", &mut |path, layer| {
            if let LayerMut::Rep(r) = layer {
                r.batch_norms_mut(path, f);
            }
        });
    }

    /// Parameter tensors keyed by path.
    pub fn named_params(&self) -> Vec<(String, ParamKind, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p, k, t| out.push((p.to_string(), k, t.clone())));
        out
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, k, t| {
            if k.is_trainable() {
                n += t.numel();
            }
        });
        n
    }

    /// Folds observed batch statistics into running statistics:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_stats(&mut self, stats: &[BnStats], momentum: f64) -> Result<()> {
        let by_path: HashMap<&str, &BnStats> = stats.iter().map(|s| (s.path.as_str(), s)).collect();
        let mut seen = 0;
        self.batch_norms_mut(&mut |path, bn| {
            if let Some(s) = by_path.get(path) {
                ops::update_running_stat(bn.running_mean.data_mut(), &s.mean, momentum);
                ops::update_running_stat(bn.running_var.data_mut(), &s.var, momentum);
                seen += 1;
            }
        });
        if seen != by_path.len() {
            return Err(Error::Invalid(format!(
                "{} batch-norm statistics did not match any layer",
                by_path.len() - seen
            )));
        }
        Ok(())
    }

    /// Replaces every running statistic with the batch statistics of `x`.
    pub fn calibrate_bn(&mut self, x: &Tensor) -> Result<()> {
        let mut b = Eager::<f32>::training();
        self.forward(&mut b, x)?;
        let stats = b.bn_stats().to_vec();
        self.apply_bn_stats(&stats, 1.0)
    }

    /// Seeded random weights with non-trivial batch norms: affine parameters
    /// from [`Model::randomize_bn`], running statistics calibrated on a
    /// seeded standard-normal batch of `calib_dims`.
    pub fn random(spec: &VariantSpec, seed: u64, calib_dims: Dims) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::build(spec, &mut rng)?;
        m.randomize_bn(&mut rng);
        m.calibrate_bn(&Tensor::randn(calib_dims, 1.0, &mut rng))?;
        Ok(m)
    }

    /// Draws `γ ∈ [0.5, 1.5)` and `β ∈ [-0.2, 0.2)` for every batch norm so
    /// that folding is exercised with non-trivial affine parameters.
    pub fn randomize_bn(&mut self, rng: &mut impl Rng) {
        self.batch_norms_mut(&mut |_, bn| {
            let c = bn.channels();
            bn.gamma = Tensor::from_fn([c, 1, 1, 1], |_| rng.random_range(0.5..1.5));
            bn.beta = Tensor::from_fn([c, 1, 1, 1], |_| rng.random_range(-0.2..0.2));
        });
    }
}

impl Layers for Model {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        self.stem.walk(&join(path, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(path, &format!("stages.{i}"));
            s.embed.walk(&join(&p, "embed"), f);
            for (j, b) in s.blocks.iter().enumerate() {
                b.walk(&format!("{p}.blocks.{j}"), f);
            }
        }
        f(&join(path, "head.fc"), LayerRef::Conv(&self.head));
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        self.stem.walk_mut(&join(path, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(path, &format!("stages.{i}"));
            s.embed.walk_mut(&join(&p, "embed"), f);
            for (j, b) in s.blocks.iter_mut().enumerate() {
                b.walk_mut(&format!("{p}.blocks.{j}"), f);
            }
        }
        f(&join(path, "head.fc"), LayerMut::Conv(&mut self.head));
    }
}

/// Index of the largest entry per sample of `(N, K, 1, 1)` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let [n, k, _, _] = logits.dims();
    logits
        .data()
        .chunks(k)
        .take(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
