//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use fmvit_core::blocks::*;
use fmvit_core::tensor::{finite_diff_grad, ops, relative_error, Backend, BnRef, ConvSpec, Eager, GradTape, Tensor};
use fmvit_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_bn(c: usize, r: &mut ChaCha8Rng) -> BatchNorm {
    let mut bn = BatchNorm::new(c);
    let mut draw = |lo: f32, hi: f32| Tensor::from_fn([c, 1, 1, 1], |_| r.random_range(lo..hi));
    bn.gamma = draw(0.5, 1.5);
    bn.beta = draw(-0.5, 0.5);
    bn.running_mean = draw(-0.5, 0.5);
    bn.running_var = draw(0.5, 2.0);
    bn
}

/// A random mergeable bundle: base `k×k` with `groups`, one to three extras
/// with smaller centred kernels (sometimes asymmetric) and finer groupings,
/// and an identity path when the geometry allows one.
pub fn random_bundle(c: usize, k: usize, groups: usize, stride: usize, r: &mut ChaCha8Rng) -> Bundle {
    let branch = |spec: ConvSpec, r: &mut ChaCha8Rng| {
        let mut b = ConvBranch::new(spec, true, r);
        b.bn = Some(random_bn(c, r));
        b
    };
    let base_spec = ConvSpec::new(c, c, k).with_groups(groups).with_stride(stride);
    let base = branch(base_spec, r);
    let finer: Vec<usize> = [1, 2, 4, c].into_iter().filter(|g| g % groups == 0 && c % g == 0).collect();
    let extras = (0..r.random_range(1..=3))
        .map(|_| {
            let ke = [1, 3, 5][r.random_range(0..=(k / 2))];
            let (kh, kw) = match r.random_range(0..3) {
                0 if k > 1 => (k, 1),
                1 if k > 1 => (1, k),
                _ => (ke, ke),
            };
            let g = finer[r.random_range(0..finer.len())];
            branch(base_spec.with_kernel(kh, kw).with_groups(g), r)
        })
        .collect();
    let identity = (stride == 1 && r.random_bool(0.5)).then(|| Identity::Bn(random_bn(c, r)));
    Bundle::new(base, extras, identity).unwrap()
}

/// Attention weights in f64 from explicit query and key projections:
/// `softmax(s · (X W_qᵀ)(X W_kᵀ)ᵀ)` per head, with `W` in `(out, in)` layout
/// and tokens as rows of `X`.
pub fn expanded_attention(x: &Tensor, wq: &[f64], wk: &[f64], heads: usize, scale: f64) -> Vec<f64> {
    let [_, d, h, w] = x.dims();
    let m = h * w;
    let tok = |i: usize, c: usize| x.data()[c * m + i] as f64;
    let project = |wt: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            for o in 0..d {
                out[i * d + o] = (0..d).map(|c| wt[o * d + c] * tok(i, c)).sum();
            }
        }
        out
    };
    let (q, k) = (project(wq), project(wk));
    let hd = d / heads;
    let mut a = vec![0.0; heads * m * m];
    for hh in 0..heads {
        for i in 0..m {
            let row = &mut a[(hh * m + i) * m..(hh * m + i + 1) * m];
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * (hh * hd..(hh + 1) * hd).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>();
            }
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|s| (s - mx).exp()).sum();
            row.iter_mut().for_each(|s| *s = (*s - mx).exp() / z);
        }
    }
    a
}

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const FLOOR: f64 = 1e-6;

pub trait Net {
    fn run<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value>;
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
}

pub fn visit_layers(l: &dyn Layers, path: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    l.walk(path, &mut |p, layer| match layer {
        LayerRef::Rep(r) => r.for_each_param(p, &mut |q, k, t| {
            if k.is_trainable() {
                f(q, t)
            }
        }),
        LayerRef::Conv(c) => {
            f(&format!("{p}.weight"), &c.weight);
            if let Some(b) = &c.bias {
                f(&format!("{p}.bias"), b);
            }
        }
    });
}

macro_rules! layered {
    ($name:ident, $ty:ty) => {
        pub struct $name(pub $ty);
        impl Net for $name {
            fn run<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
                self.0.forward(b, "n", x)
            }
            fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
                visit_layers(&self.0, "n", f)
            }
        }
    };
}

layered!(CfbNet, Cfb);
layered!(FmbNet, Fmb);
layered!(MlpNet, Gmlp);
layered!(AttnNet, Attention);
layered!(StemNet, Stem);
layered!(EmbedNet, PatchEmbed);

pub struct RepNet(pub RepConv);

impl Net for RepNet {
    fn run<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        self.0.forward(b, "n", x)
    }
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.0.for_each_param("n", &mut |p, k, t| {
            if k.is_trainable() {
                f(p, t)
            }
        })
    }
}

/// Eager evaluation that also records which side of zero every ReLU input
/// falls on, so a finite-difference probe can tell whether it stayed on one
/// linear piece.
pub struct Probe {
    inner: Eager<f64>,
    signs: Vec<bool>,
}

impl Probe {
    fn new(inner: Eager<f64>) -> Self {
        Self { inner, signs: Vec::new() }
    }
}

impl Backend for Probe {
    type Elem = f64;
    type Value = Tensor<f64>;

    fn is_training(&self) -> bool {
        self.inner.is_training()
    }
    fn param(&mut self, path: &str, t: &Tensor) -> Result<Tensor<f64>> {
        self.inner.param(path, t)
    }
    fn dims(&self, v: &Tensor<f64>) -> [usize; 4] {
        v.dims()
    }
    fn conv2d(
        &mut self,
        path: &str,
        x: &Tensor<f64>,
        spec: &ConvSpec,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
    ) -> Result<Tensor<f64>> {
        self.inner.conv2d(path, x, spec, w, b)
    }
    fn batch_norm(&mut self, path: &str, x: &Tensor<f64>, bn: BnRef<'_>) -> Result<Tensor<f64>> {
        self.inner.batch_norm(path, x, bn)
    }
    fn avg_pool2d(&mut self, path: &str, x: &Tensor<f64>, window: usize, stride: usize) -> Result<Tensor<f64>> {
        self.inner.avg_pool2d(path, x, window, stride)
    }
    fn global_avg_pool(&mut self, path: &str, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.inner.global_avg_pool(path, x)
    }
    fn matmul(&mut self, path: &str, a: &Tensor<f64>, b: &Tensor<f64>, ta: bool, tb: bool) -> Result<Tensor<f64>> {
        self.inner.matmul(path, a, b, ta, tb)
    }
    fn relu(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.signs.extend(x.data().iter().map(|&v| v > 0.0));
        self.inner.relu(x)
    }
    fn add(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.inner.add(a, b)
    }
    fn concat_channels(&mut self, xs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.inner.concat_channels(xs)
    }
    fn reshape(&mut self, x: &Tensor<f64>, dims: [usize; 4]) -> Result<Tensor<f64>> {
        self.inner.reshape(x, dims)
    }
    fn softmax_lastdim(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.inner.softmax_lastdim(x)
    }
    fn scale(&mut self, x: &Tensor<f64>, s: f64) -> Result<Tensor<f64>> {
        self.inner.scale(x, s)
    }
}

pub fn loss(y: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    Ok(ops::mul(y, r)?.sum_f64())
}

/// Central differences of `f` at `step`. Where the `±h` probes of an element
/// land on different ReLU pieces than the unperturbed point, the quotient
/// does not estimate a derivative; the step for that element is halved until
/// both probes stay on the same piece.
pub fn central(f: &dyn Fn(&Tensor<f64>) -> (f64, Vec<bool>), x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let (_, base) = f(x);
    let log = std::cell::RefCell::new(Vec::new());
    let mut grad = finite_diff_grad(
        |xp| {
            let (l, signs) = f(xp);
            log.borrow_mut().push(signs == base);
            Ok(l)
        },
        x,
        step,
    )
    .unwrap();
    let same = log.into_inner();
    for i in 0..x.numel() {
        if same[2 * i] && same[2 * i + 1] {
            continue;
        }
        let mut h = step;
        let mut probe = x.clone();
        loop {
            h /= 2.0;
            assert!(h > 1e-9, "element {i} sits on a ReLU kink");
            probe.data_mut()[i] = x.data()[i] + h;
            let (plus, sp) = f(&probe);
            probe.data_mut()[i] = x.data()[i] - h;
            let (minus, sm) = f(&probe);
            if sp == base && sm == base {
                grad.data_mut()[i] = (plus - minus) / (2.0 * h);
                break;
            }
        }
    }
    grad
}

/// Central differences at [`STEP`] and `STEP/2` combined by one Richardson
/// step, which cancels the `h²` truncation term. Batch norm after a branch
/// with small weights curves hard enough for that term alone to exceed the
/// tolerance at `STEP`.
pub fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> (f64, Vec<bool>), x: &Tensor<f64>) -> Tensor<f64> {
    let coarse = central(f, x, STEP);
    let fine = central(f, x, STEP / 2.0);
    let data = fine.data().iter().zip(coarse.data()).map(|(f, c)| (4.0 * f - c) / 3.0).collect();
    Tensor::new(x.dims(), data).unwrap()
}

/// Checks input and parameter gradients of `net` on a training-mode batch
/// and returns the worst relative error seen.
pub fn gradcheck<N: Net>(name: &str, net: &N, dims: [usize; 4], seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::<f64>::randn(dims, 1.0, &mut r);
    let y0 = net.run(&mut Eager::<f64>::training(), &x).unwrap();
    let w = Tensor::<f64>::randn(y0.dims(), 1.0, &mut r);

    let mut tape = GradTape::<f64>::new(true);
    let xv = tape.leaf(x.clone(), true);
    let y = net.run(&mut tape, &xv).unwrap();
    let wv = tape.leaf(w.clone(), false);
    let prod = tape.mul(&y, &wv).unwrap();
    let l = tape.sum(&prod).unwrap();
    let grads = tape.backward(&l).unwrap();

    let eval = |e: Eager<f64>, xp: &Tensor<f64>| {
        let mut p = Probe::new(e);
        let y = net.run(&mut p, xp).unwrap();
        (loss(&y, &w).unwrap(), p.signs)
    };
    let numeric = numeric_grad(&|xp| eval(Eager::training(), xp), &x);
    let mut worst = relative_error(grads.get(&xv).unwrap(), &numeric, FLOOR);
    assert!(worst < TOL, "{name}: input gradient relative error {worst:e}");

    let mut checked = 0;
    net.visit(&mut |path, t| {
        let numeric = numeric_grad(&|pp| eval(Eager::training().with_override(path, pp.clone()), &x), &t.cast());
        let analytic = grads.by_name(path).unwrap_or_else(|| panic!("{name}: no gradient for {path}"));
        let err = relative_error(analytic, &numeric, FLOOR);
        assert!(err < TOL, "{name}: gradient of {path} has relative error {err:e}");
        worst = worst.max(err);
        checked += 1;
    });
    assert!(checked > 0, "{name}: no parameters visited");
    worst
}

pub fn small_spec() -> VariantSpec {
    let mut v = VariantSpec::preset("nano").unwrap();
    v.head_dim = 4;
    v.stem = [4, 4, 8];
    v
}

/// Gradient check of every block type at a small configuration: name and
/// worst relative error. Panics on the first element over [`TOL`].
pub fn every_block_gradcheck() -> Vec<(&'static str, f64)> {
    let mut v = small_spec();
    let mut r = rng(100);
    let mut out = Vec::new();
    let base = ConvBranch::new(ConvSpec::new(4, 4, 3), true, &mut r);
    let extras = vec![
        ConvBranch::new(ConvSpec::new(4, 4, 1).with_groups(2), true, &mut r),
        ConvBranch::new(ConvSpec::new(4, 4, 3).with_kernel(1, 3), true, &mut r),
    ];
    let bundle = Bundle::new(base, extras, Some(Identity::Bn(BatchNorm::new(4)))).unwrap();
    out.push(("rep-conv bundle", gradcheck("bundle", &RepNet(RepConv::Train(bundle)), [2, 4, 6, 6], 101)));
    out.push(("stem", gradcheck("stem", &StemNet(Stem::new(&v, &mut r).unwrap()), [2, 3, 8, 8], 102)));
    let embed = PatchEmbed::new(4, 8, true, &v, &mut r).unwrap();
    out.push(("patch embed", gradcheck("embed", &EmbedNet(embed), [2, 4, 8, 8], 103)));
    let mlp = Gmlp::new(4, 8, true, true, &v.reparam, &mut r).unwrap();
    out.push(("gmlp", gradcheck("gmlp", &MlpNet(mlp), [2, 4, 5, 5], 104)));
    out.push(("cfb", gradcheck("cfb", &CfbNet(Cfb::new(4, 6, &v, &mut r).unwrap()), [2, 4, 6, 6], 105)));
    let shared = Rlmhsa::new(8, 4, v.reparam.scale_mode, &[2], &mut r).unwrap();
    out.push(("rlmhsa", gradcheck("rlmhsa", &AttnNet(Attention::Shared(shared)), [2, 8, 4, 4], 106)));
    let standard = Mhsa::new(8, 4, v.reparam.scale_mode, &mut r).unwrap();
    out.push(("mhsa", gradcheck("mhsa", &AttnNet(Attention::Standard(standard)), [2, 8, 4, 4], 107)));
    out.push(("fmb", gradcheck("fmb", &FmbNet(Fmb::new(4, 8, 8, 4, &v, &mut r).unwrap()), [2, 4, 4, 4], 108)));
    v.ablation.fmb = false;
    let attn_only = Fmb::new(8, 8, 8, 4, &v, &mut r).unwrap();
    out.push(("fmb attention-only", gradcheck("fmb-attn", &FmbNet(attn_only), [2, 8, 4, 4], 109)));
    out
}
