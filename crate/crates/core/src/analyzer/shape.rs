use crate::error::{Error, Result};
use crate::tensor::{Backend, BnRef, ConvSpec, Dims, TapKind, Tensor};

/// One operation seen by [`ShapeBackend`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub path: String,
    pub op: &'static str,
    pub output_dims: Dims,
    /// Trainable parameters consumed by this op.
    pub params: u64,
    /// Batch-norm running statistics, counted apart from `params`.
    pub running: u64,
    pub macs: u64,
    /// Additions that are not part of a multiply-accumulate: pooling sums and
    /// elementwise adds.
    pub adds: u64,
}

/// Backend that only propagates dims, checks shapes and counts work.
///
/// Values are the dims themselves, so a 224² forward of the largest variant
/// costs microseconds.
#[derive(Debug, Default)]
pub struct ShapeBackend {
    pub ops: Vec<OpRecord>,
    /// `(path, dims)` of every block-level tap.
    pub blocks: Vec<(String, Dims)>,
    last_path: String,
}

fn numel(d: Dims) -> u64 {
    d.iter().map(|&v| v as u64).product()
}

impl ShapeBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn fail<T>(&self, op: &'static str, path: &str, detail: String) -> Result<T> {
        let at = if path.is_empty() { &self.last_path } else { path };
        Err(Error::Shape {
            op,
            detail: format!("at `{at}`: {detail}"),
        })
    }

    fn push(&mut self, path: &str, op: &'static str, output_dims: Dims, params: u64, running: u64, macs: u64, adds: u64) {
        let path = if path.is_empty() { self.last_path.clone() } else { path.to_string() };
        self.last_path.clone_from(&path);
        self.ops.push(OpRecord {
            path,
            op,
            output_dims,
            params,
            running,
            macs,
            adds,
        });
    }
}

impl Backend for ShapeBackend {
    type Elem = f32;
    type Value = Dims;

    fn is_training(&self) -> bool {
        false
    }

    fn param(&mut self, _path: &str, t: &Tensor) -> Result<Dims> {
        Ok(t.dims())
    }

    fn dims(&self, v: &Dims) -> Dims {
        *v
    }

    fn conv2d(&mut self, path: &str, x: &Dims, spec: &ConvSpec, weight: &Dims, bias: Option<&Dims>) -> Result<Dims> {
        let [n, c, h, w] = *x;
        if let Err(e) = spec.validate() {
            return self.fail("conv2d", path, e.to_string());
        }
        if c != spec.in_channels {
            return self.fail("conv2d", path, format!("input has {c} channels, conv expects {}", spec.in_channels));
        }
        if *weight != spec.weight_dims() {
            return self.fail("conv2d", path, format!("weight {weight:?} vs expected {:?}", spec.weight_dims()));
        }
        let (oh, ow) = match spec.output_hw(h, w) {
            Ok(v) => v,
            Err(e) => return self.fail("conv2d", path, e.to_string()),
        };
        let params = numel(*weight) + bias.map_or(0, |b| numel(*b));
        let macs = spec.macs(n, h, w)?;
        self.push(path, "conv2d", [n, spec.out_channels, oh, ow], params, 0, macs, 0);
        Ok([n, spec.out_channels, oh, ow])
    }

    fn batch_norm(&mut self, path: &str, x: &Dims, bn: BnRef<'_>) -> Result<Dims> {
        let c = bn.gamma.numel();
        if x[1] != c {
            return self.fail("batch_norm", path, format!("input has {} channels, norm has {c}", x[1]));
        }
        self.push(path, "batch_norm", *x, 2 * c as u64, 2 * c as u64, 0, 0);
        Ok(*x)
    }

    fn avg_pool2d(&mut self, path: &str, x: &Dims, window: usize, stride: usize) -> Result<Dims> {
        let [n, c, h, w] = *x;
        if window == 0 || stride == 0 || h < window || w < window {
            return self.fail("avg_pool2d", path, format!("window {window} stride {stride} on {h}x{w}"));
        }
        let out = [n, c, (h - window) / stride + 1, (w - window) / stride + 1];
        self.push(path, "avg_pool2d", out, 0, 0, 0, numel(out) * (window * window - 1) as u64);
        Ok(out)
    }

    fn global_avg_pool(&mut self, path: &str, x: &Dims) -> Result<Dims> {
        let [n, c, h, w] = *x;
        let out = [n, c, 1, 1];
        self.push(path, "global_avg_pool", out, 0, 0, 0, numel(out) * (h * w - 1) as u64);
        Ok(out)
    }

    fn matmul(&mut self, path: &str, a: &Dims, b: &Dims, transpose_a: bool, transpose_b: bool) -> Result<Dims> {
        if a[..2] != b[..2] {
            return self.fail("matmul", path, format!("batch axes {a:?} vs {b:?}"));
        }
        let (m, k) = if transpose_a { (a[3], a[2]) } else { (a[2], a[3]) };
        let (k2, n) = if transpose_b { (b[3], b[2]) } else { (b[2], b[3]) };
        if k != k2 {
            return self.fail("matmul", path, format!("inner dims {k} vs {k2}"));
        }
        let out = [a[0], a[1], m, n];
        self.push(path, "matmul", out, 0, 0, numel(out) * k as u64, 0);
        Ok(out)
    }

    fn relu(&mut self, x: &Dims) -> Result<Dims> {
        Ok(*x)
    }

    fn add(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        if a != b {
            return self.fail("add", "", format!("{a:?} vs {b:?}"));
        }
        self.push("", "add", *a, 0, 0, 0, numel(*a));
        Ok(*a)
    }

    fn concat_channels(&mut self, xs: &[Dims]) -> Result<Dims> {
        let Some(first) = xs.first() else {
            return self.fail("concat", "", "nothing to concatenate".into());
        };
        let mut out = *first;
        out[1] = 0;
        for d in xs {
            if (d[0], d[2], d[3]) != (first[0], first[2], first[3]) {
                return self.fail("concat", "", format!("{d:?} vs {first:?}"));
            }
            out[1] += d[1];
        }
        Ok(out)
    }

    fn reshape(&mut self, x: &Dims, dims: Dims) -> Result<Dims> {
        if numel(*x) != numel(dims) {
            return self.fail("reshape", "", format!("{x:?} to {dims:?}"));
        }
        Ok(dims)
    }

    fn softmax_lastdim(&mut self, x: &Dims) -> Result<Dims> {
        Ok(*x)
    }

    fn scale(&mut self, x: &Dims, _s: f64) -> Result<Dims> {
        Ok(*x)
    }

    fn tap(&mut self, path: &str, kind: TapKind, x: &Dims) {
        if kind == TapKind::Block {
            self.blocks.push((path.to_string(), *x));
        }
    }
}
