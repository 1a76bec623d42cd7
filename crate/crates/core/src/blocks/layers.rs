//! Convolution layers in both forms: a multi-branch [`Bundle`] used during
//! training and the single [`Conv`] it collapses to.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Backend, BnRef, ConvSpec, Tensor};

/// Joins a parent path and a child name with a dot.
pub fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

/// What a parameter tensor is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Whether the optimizer updates this tensor.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels, 1, 1, 1], 1.0),
            beta: Tensor::zeros([channels, 1, 1, 1]),
            running_mean: Tensor::zeros([channels, 1, 1, 1]),
            running_var: Tensor::full([channels, 1, 1, 1], 1.0),
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn as_ref(&self) -> BnRef<'_> {
        BnRef {
            gamma: &self.gamma,
            beta: &self.beta,
            running_mean: &self.running_mean,
            running_var: &self.running_var,
            eps: self.eps,
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        b.batch_norm(path, x, self.as_ref())
    }

    fn tensors(&self) -> [(ParamKind, &Tensor); 4] {
        [
            (ParamKind::Gamma, &self.gamma),
            (ParamKind::Beta, &self.beta),
            (ParamKind::RunningMean, &self.running_mean),
            (ParamKind::RunningVar, &self.running_var),
        ]
    }

    fn tensors_mut(&mut self) -> [(ParamKind, &mut Tensor); 4] {
        [
            (ParamKind::Gamma, &mut self.gamma),
            (ParamKind::Beta, &mut self.beta),
            (ParamKind::RunningMean, &mut self.running_mean),
            (ParamKind::RunningVar, &mut self.running_var),
        ]
    }
}

/// A single convolution with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv {
    pub fn new(spec: ConvSpec, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        spec.validate()?;
        if weight.dims() != spec.weight_dims() {
            return Err(Error::Shape {
                op: "Conv::new",
                detail: format!("weight {:?}, spec wants {:?}", weight.dims(), spec.weight_dims()),
            });
        }
        match (&bias, spec.has_bias) {
            (Some(b), true) if b.numel() == spec.out_channels => {}
            (None, false) => {}
            _ => {
                return Err(Error::Shape {
                    op: "Conv::new",
                    detail: "bias presence or length disagrees with spec".into(),
                })
            }
        }
        Ok(Self { spec, weight, bias })
    }

    /// Kaiming-uniform weights with fan-in gain for ReLU; bias uniform in
    /// `±1/√fan_in`.
    pub fn kaiming(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = (spec.in_per_group() * spec.kernel_h * spec.kernel_w) as f64;
        let weight = Tensor::uniform(spec.weight_dims(), (6.0 / fan_in).sqrt(), rng);
        let bias = spec
            .has_bias
            .then(|| Tensor::uniform([spec.out_channels, 1, 1, 1], 1.0 / fan_in.sqrt(), rng));
        Self { spec, weight, bias }
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: Tensor::zeros(spec.weight_dims()),
            bias: spec.has_bias.then(|| Tensor::zeros([spec.out_channels, 1, 1, 1])),
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let w = b.param(&join(path, "weight"), &self.weight)?;
        let bias = match &self.bias {
            Some(t) => Some(b.param(&join(path, "bias"), t)?),
            None => None,
        };
        b.conv2d(path, x, &self.spec, &w, bias.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// One parallel path of a bundle: a convolution, optionally batch-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBranch {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
}

impl ConvBranch {
    pub fn new(spec: ConvSpec, with_bn: bool, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv::kaiming(spec, rng),
            bn: with_bn.then(|| BatchNorm::new(spec.out_channels)),
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.conv.spec
    }

    fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let y = self.conv.forward(b, path, x)?;
        match &self.bn {
            Some(bn) => bn.forward(b, &join(path, "bn"), &y),
            None => Ok(y),
        }
    }
}

/// Skip path inside a bundle.
#[derive(Clone, Debug, PartialEq)]
pub enum Identity {
    Plain,
    Bn(BatchNorm),
}

/// Parallel branches whose outputs are summed:
/// `base + Σ extras (+ identity)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub base: ConvBranch,
    pub extras: Vec<ConvBranch>,
    pub identity: Option<Identity>,
}

/// Checks that `extra` can be folded into a convolution shaped like `base`.
/// Returns the violated condition on failure.
pub fn check_mergeable(base: &ConvSpec, extra: &ConvSpec) -> std::result::Result<(), String> {
    if extra.in_channels != base.in_channels || extra.out_channels != base.out_channels {
        return Err(format!(
            "channels {}->{} differ from base {}->{}",
            extra.in_channels, extra.out_channels, base.in_channels, base.out_channels
        ));
    }
    if extra.stride != base.stride {
        return Err(format!("stride {} differs from base stride {}", extra.stride, base.stride));
    }
    if extra.groups < base.groups || extra.groups % base.groups != 0 {
        return Err(format!(
            "groups {} is not a multiple of base groups {}",
            extra.groups, base.groups
        ));
    }
    if extra.kernel_h > base.kernel_h || extra.kernel_w > base.kernel_w {
        return Err(format!(
            "kernel {}x{} exceeds base kernel {}x{}",
            extra.kernel_h, extra.kernel_w, base.kernel_h, base.kernel_w
        ));
    }
    if (base.kernel_h - extra.kernel_h) % 2 != 0 || (base.kernel_w - extra.kernel_w) % 2 != 0 {
        return Err(format!(
            "kernel {}x{} cannot be centred in {}x{}",
            extra.kernel_h, extra.kernel_w, base.kernel_h, base.kernel_w
        ));
    }
    Ok(())
}

/// Checks that an identity path is expressible as a kernel of `base`.
pub fn check_identity(base: &ConvSpec) -> std::result::Result<(), String> {
    if base.in_channels != base.out_channels {
        return Err(format!(
            "identity needs equal channels, base maps {}->{}",
            base.in_channels, base.out_channels
        ));
    }
    if base.stride != 1 {
        return Err(format!("identity needs stride 1, base has stride {}", base.stride));
    }
    Ok(())
}

impl Bundle {
    /// Builds a bundle after validating every branch against the base.
    pub fn new(base: ConvBranch, extras: Vec<ConvBranch>, identity: Option<Identity>) -> Result<Self> {
        let bundle = Self {
            base,
            extras,
            identity,
        };
        bundle.validate("")?;
        Ok(bundle)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let base = self.base.spec();
        base.validate()?;
        for (i, e) in self.extras.iter().enumerate() {
            check_mergeable(base, e.spec()).map_err(|condition| Error::Unmergeable {
                path: join(path, &format!("extra{i}")),
                condition,
            })?;
        }
        if self.identity.is_some() {
            check_identity(base).map_err(|condition| Error::Unmergeable {
                path: join(path, "identity"),
                condition,
            })?;
        }
        Ok(())
    }

    /// Named branches in a fixed order: `base`, `extra0`, `extra1`, ...
    pub fn branches(&self) -> impl Iterator<Item = (String, &ConvBranch)> {
        std::iter::once(("base".to_string(), &self.base))
            .chain(self.extras.iter().enumerate().map(|(i, e)| (format!("extra{i}"), e)))
    }

    pub fn branches_mut(&mut self) -> impl Iterator<Item = (String, &mut ConvBranch)> {
        std::iter::once(("base".to_string(), &mut self.base))
            .chain(self.extras.iter_mut().enumerate().map(|(i, e)| (format!("extra{i}"), e)))
    }

    fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let mut acc = self.base.forward(b, &join(path, "base"), x)?;
        for (i, e) in self.extras.iter().enumerate() {
            let y = e.forward(b, &join(path, &format!("extra{i}")), x)?;
            acc = b.add(&acc, &y)?;
        }
        match &self.identity {
            Some(Identity::Plain) => acc = b.add(&acc, x)?,
            Some(Identity::Bn(bn)) => {
                let y = bn.forward(b, &join(path, "identity"), x)?;
                acc = b.add(&acc, &y)?;
            }
            None => {}
        }
        Ok(acc)
    }
}

/// A convolution that is either still a training-time bundle or already
/// fused into one operator.
#[derive(Clone, Debug, PartialEq)]
pub enum RepConv {
    Train(Bundle),
    Deployed(Conv),
}

impl RepConv {
    /// Output-side geometry; for a bundle this is the base branch.
    pub fn spec(&self) -> &ConvSpec {
        match self {
            RepConv::Train(b) => b.base.spec(),
            RepConv::Deployed(c) => &c.spec,
        }
    }

    pub fn is_deployed(&self) -> bool {
        matches!(self, RepConv::Deployed(_))
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        match self {
            RepConv::Train(bundle) => bundle.forward(b, path, x),
            RepConv::Deployed(conv) => conv.forward(b, path, x),
        }
    }

    /// Calls `f` on every tensor with its full path.
    pub fn for_each_param(&self, path: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        match self {
            RepConv::Deployed(c) => conv_params(c, path, f),
            RepConv::Train(bundle) => {
                for (name, br) in bundle.branches() {
                    let p = join(path, &name);
                    conv_params(&br.conv, &p, f);
                    if let Some(bn) = &br.bn {
                        bn_params(bn, &join(&p, "bn"), f);
                    }
                }
                if let Some(Identity::Bn(bn)) = &bundle.identity {
                    bn_params(bn, &join(path, "identity"), f);
                }
            }
        }
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        match self {
            RepConv::Deployed(c) => conv_params_mut(c, path, f),
            RepConv::Train(bundle) => {
                for (name, br) in bundle.branches_mut() {
                    let p = join(path, &name);
                    conv_params_mut(&mut br.conv, &p, f);
                    if let Some(bn) = &mut br.bn {
                        bn_params_mut(bn, &join(&p, "bn"), f);
                    }
                }
                if let Some(Identity::Bn(bn)) = &mut bundle.identity {
                    bn_params_mut(bn, &join(path, "identity"), f);
                }
            }
        }
    }

    /// Every batch norm in the layer with the path its statistics are keyed by.
    pub fn batch_norms_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut BatchNorm)) {
        if let RepConv::Train(bundle) = self {
            for (name, br) in bundle.branches_mut() {
                if let Some(bn) = &mut br.bn {
                    f(&join(&join(path, &name), "bn"), bn);
                }
            }
            if let Some(Identity::Bn(bn)) = &mut bundle.identity {
                f(&join(path, "identity"), bn);
            }
        }
    }
}

pub(crate) fn conv_params(c: &Conv, path: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
    f(&join(path, "weight"), ParamKind::Weight, &c.weight);
    if let Some(b) = &c.bias {
        f(&join(path, "bias"), ParamKind::Bias, b);
    }
}

pub(crate) fn conv_params_mut(c: &mut Conv, path: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
    f(&join(path, "weight"), ParamKind::Weight, &mut c.weight);
    if let Some(b) = &mut c.bias {
        f(&join(path, "bias"), ParamKind::Bias, b);
    }
}

fn bn_params(bn: &BatchNorm, path: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
    for (kind, t) in bn.tensors() {
        f(&join(path, kind.suffix()), kind, t);
    }
}

fn bn_params_mut(bn: &mut BatchNorm, path: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
    for (kind, t) in bn.tensors_mut() {
        f(&join(path, kind.suffix()), kind, t);
    }
}

/// Group counts for the extra branches of a bundle whose base has
/// `base_groups` groups and maps `cin -> cout`.
///
/// Prefers `2` and `gcd(cin, cout)`; otherwise falls back to the largest
/// valid divisors, down to `base_groups` itself.
pub fn default_extra_groups(base_groups: usize, cin: usize, cout: usize, n: usize) -> Vec<usize> {
    let g = gcd(cin, cout);
    let valid = |d: usize| d >= base_groups && d % base_groups == 0 && g % d == 0;
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for d in [2, g] {
        if out.len() < n && valid(d) && d != base_groups && !out.contains(&d) {
            out.push(d);
        }
    }
    let mut fallback: Vec<usize> = (base_groups..=g).filter(|&d| valid(d)).collect();
    fallback.reverse();
    for d in fallback {
        if out.len() >= n {
            break;
        }
        if !out.contains(&d) {
            out.push(d);
        }
    }
    while out.len() < n {
        out.push(base_groups);
    }
    out
}

/// 1×1 bundle `cin -> cout`: a dense base plus one branch per entry of
/// `extra_groups`. With `bn` every branch carries its own batch norm;
/// without it the branches are bias-free.
pub fn pointwise(
    cin: usize,
    cout: usize,
    extra_groups: &[usize],
    bn: bool,
    rng: &mut impl Rng,
) -> Result<RepConv> {
    let base = ConvBranch::new(ConvSpec::new(cin, cout, 1), bn, rng);
    let extras = extra_groups
        .iter()
        .map(|&g| ConvBranch::new(ConvSpec::new(cin, cout, 1).with_groups(g), bn, rng))
        .collect();
    Ok(RepConv::Train(Bundle::new(base, extras, None)?))
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
