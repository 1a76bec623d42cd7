//! Reverse-mode differentiation over a linear record of operations.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::backend::{BnRef, BnStats, TapKind};
use super::{ops, Backend, ConvSpec, Dims, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
    dims: Dims,
}

impl Var {
    pub fn dims(&self) -> Dims {
        self.dims
    }
}

#[derive(Debug)]
enum Node {
    Leaf { trainable: bool },
    Conv { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, var: Vec<f64>, eps: f64, batch_stats: bool },
    AvgPool { x: usize, window: usize, stride: usize },
    GlobalAvgPool { x: usize },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: f64 },
    Concat { xs: Vec<usize> },
    Reshape { x: usize },
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Softmax { x: usize },
    Sum { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
}

impl Node {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Node::Leaf { .. } => vec![],
            Node::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Node::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Node::AvgPool { x, .. }
            | Node::GlobalAvgPool { x }
            | Node::Relu { x }
            | Node::Scale { x, .. }
            | Node::Reshape { x }
            | Node::Softmax { x }
            | Node::Sum { x } => vec![*x],
            Node::Add { a, b } | Node::Mul { a, b } | Node::Matmul { a, b, .. } => vec![*a, *b],
            Node::Concat { xs } => xs.clone(),
            Node::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Entry<T: Scalar> {
    node: Node,
    value: Tensor<T>,
    /// Auxiliary tensor kept for backward (softmax probabilities for the loss).
    aux: Option<Tensor<T>>,
}

/// Records operations and replays them backward.
///
/// Confined to one thread; run one tape per worker for parallel sweeps.
pub struct GradTape<T: Scalar = f32> {
    id: u64,
    entries: Vec<Entry<T>>,
    training: bool,
    params: HashMap<String, usize>,
    names: HashMap<usize, String>,
    bn_stats: Vec<BnStats>,
    taps: Vec<(String, TapKind, Var)>,
}

/// Gradients of every trainable leaf from one backward call.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    by_index: HashMap<usize, Tensor<T>>,
    names: HashMap<String, usize>,
    tape: u64,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.by_index.get(&v.index)
    }

    /// Gradient of the parameter registered under `path`.
    pub fn by_name(&self, path: &str) -> Option<&Tensor<T>> {
        self.names.get(path).and_then(|i| self.by_index.get(i))
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .filter_map(|(n, i)| self.by_index.get(i).map(|g| (n.as_str(), g)))
    }

    pub fn len(&self) -> usize {
        self.by_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_index.is_empty()
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<T: Scalar> GradTape<T> {
    /// `training` selects batch-statistics batch norm.
    pub fn new(training: bool) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            training,
            params: HashMap::new(),
            names: HashMap::new(),
            bn_stats: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check(&self, v: &Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape(format!("value recorded on tape {} used on tape {}", v.tape, self.id)));
        }
        if v.index >= self.entries.len() {
            return Err(Error::Tape(format!("missing recorded node {}", v.index)));
        }
        Ok(v.index)
    }

    fn push(&mut self, node: Node, value: Tensor<T>) -> Var {
        self.push_aux(node, value, None)
    }

    fn push_aux(&mut self, node: Node, value: Tensor<T>, aux: Option<Tensor<T>>) -> Var {
        let dims = value.dims();
        self.entries.push(Entry { node, value, aux });
        Var {
            tape: self.id,
            index: self.entries.len() - 1,
            dims,
        }
    }

    pub fn value(&self, v: &Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        Ok(&self.entries[i].value)
    }

    /// Records a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(Node::Leaf { trainable }, value)
    }

    /// Records (or returns the existing) named trainable leaf.
    pub fn named_param(&mut self, path: &str, value: Tensor<T>) -> Var {
        if let Some(&i) = self.params.get(path) {
            return Var {
                tape: self.id,
                index: i,
                dims: self.entries[i].value.dims(),
            };
        }
        let v = self.leaf(value, true);
        self.params.insert(path.to_string(), v.index);
        self.names.insert(v.index, path.to_string());
        v
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    pub fn taps(&self) -> &[(String, TapKind, Var)] {
        &self.taps
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::mul(&self.entries[ia].value, &self.entries[ib].value)?;
        Ok(self.push(Node::Mul { a: ia, b: ib }, out))
    }

    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::sum_all(&self.entries[ix].value)?;
        Ok(self.push(Node::Sum { x: ix }, out))
    }

    /// Mean softmax cross-entropy of `(N, K, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (loss, probs) = ops::cross_entropy(&self.entries[il].value, labels)?;
        Ok(self.push_aux(
            Node::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
            },
            Tensor::scalar(T::from_f64(loss)),
            Some(probs),
        ))
    }

    /// Back-propagates from a scalar-shaped `loss`.
    ///
    /// Visits recorded nodes in reverse order. Trainable leaves that the loss
    /// does not reach get zero gradients.
    pub fn backward(&self, loss: &Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if self.entries[root].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar-shaped, got {:?}",
                loss.dims
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.entries[root].value.dims(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let entry = &self.entries[i];
            if let Some(bad) = entry.node.inputs().into_iter().find(|&j| j >= i) {
                return Err(Error::Tape(format!("cycle: node {i} depends on node {bad}")));
            }
            let contributions = self.node_backward(entry, &g)?;
            for (j, dg) in contributions {
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => ops::add(&acc, &dg)?,
                    None => dg,
                });
            }
            grads[i] = Some(g);
        }

        let mut by_index = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if let Node::Leaf { trainable: true } = e.node {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(e.value.dims()));
                by_index.insert(i, g);
            }
        }
        let names = self.names.iter().map(|(&i, n)| (n.clone(), i)).collect();
        Ok(Gradients {
            by_index,
            names,
            tape: self.id,
        })
    }

    fn node_backward(&self, entry: &Entry<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |i: usize| &self.entries[i].value;
        Ok(match &entry.node {
            Node::Leaf { .. } => vec![],
            Node::Conv { x, w, b, spec } => {
                let cg = ops::conv2d_backward(val(*x), spec, val(*w), b.is_some(), g)?;
                let mut out = vec![(*x, cg.dx), (*w, cg.dw)];
                if let (Some(b), Some(db)) = (b, cg.db) {
                    out.push((*b, db));
                }
                out
            }
            Node::BatchNorm { x, gamma, beta, mean, var, eps, batch_stats } => {
                let bg = ops::batch_norm_backward(val(*x), val(*gamma), mean, var, *eps, *batch_stats, g);
                vec![(*x, bg.dx), (*gamma, bg.dgamma), (*beta, bg.dbeta)]
            }
            Node::AvgPool { x, window, stride } => {
                vec![(*x, ops::avg_pool2d_backward(val(*x).dims(), *window, *stride, g))]
            }
            Node::GlobalAvgPool { x } => vec![(*x, ops::global_avg_pool_backward(val(*x).dims(), g))],
            Node::Relu { x } => vec![(*x, ops::relu_backward(val(*x), g))],
            Node::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Node::Mul { a, b } => vec![(*a, ops::mul(g, val(*b))?), (*b, ops::mul(g, val(*a))?)],
            Node::Scale { x, s } => vec![(*x, ops::scale(g, *s)?)],
            Node::Concat { xs } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &j in xs {
                    let c = val(j).dims()[1];
                    out.push((j, g.slice_channels(start, c)?));
                    start += c;
                }
                out
            }
            Node::Reshape { x } => vec![(*x, g.reshape(val(*x).dims())?)],
            Node::Matmul { a, b, ta, tb } => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), *ta, *tb, g);
                vec![(*a, da), (*b, db)]
            }
            Node::Softmax { x } => vec![(*x, ops::softmax_backward(&entry.value, g))],
            Node::Sum { x } => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(val(*x).dims(), gv))]
            }
            Node::CrossEntropy { logits, labels } => {
                let probs = entry
                    .aux
                    .as_ref()
                    .ok_or_else(|| Error::Tape("cross-entropy probabilities missing".into()))?;
                let [n, k, _, _] = probs.dims();
                let coef = g.data()[0].as_f64() / n as f64;
                let mut d: Vec<T> = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = d[i * k + l] - T::one();
                }
                let d = d.into_iter().map(|v| T::from_f64(v.as_f64() * coef)).collect();
                vec![(*logits, Tensor::from_parts(probs.dims(), d))]
            }
        })
    }
}

impl<T: Scalar> Backend for GradTape<T> {
    type Elem = T;
    type Value = Var;

    fn is_training(&self) -> bool {
        self.training
    }

    fn param(&mut self, path: &str, t: &Tensor) -> Result<Var> {
        Ok(self.named_param(path, T::from_f32_tensor(t)))
    }

    fn dims(&self, v: &Var) -> Dims {
        v.dims
    }

    fn conv2d(&mut self, _path: &str, x: &Var, spec: &ConvSpec, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(weight)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let out = ops::conv2d(
            &self.entries[ix].value,
            spec,
            &self.entries[iw].value,
            ib.map(|i| &self.entries[i].value),
        )?;
        Ok(self.push(Node::Conv { x: ix, w: iw, b: ib, spec: *spec }, out))
    }

    fn batch_norm(&mut self, path: &str, x: &Var, bn: BnRef<'_>) -> Result<Var> {
        let ix = self.check(x)?;
        let gamma = self.param(&format!("{path}.gamma"), bn.gamma)?;
        let beta = self.param(&format!("{path}.beta"), bn.beta)?;
        let (ig, ibeta) = (gamma.index, beta.index);
        let xv = &self.entries[ix].value;
        let (gv, bv) = (&self.entries[ig].value, &self.entries[ibeta].value);
        let (out, mean, var, batch_stats) = if self.training {
            let (out, mean, var) = ops::batch_norm_training(xv, gv, bv, bn.eps)?;
            self.bn_stats.push(BnStats {
                path: path.to_string(),
                mean: mean.clone(),
                var: var.clone(),
            });
            (out, mean, var, true)
        } else {
            let mean_t = T::from_f32_tensor(bn.running_mean);
            let var_t = T::from_f32_tensor(bn.running_var);
            let out = ops::batch_norm_inference(xv, gv, bv, &mean_t, &var_t, bn.eps)?;
            let mean = bn.running_mean.data().iter().map(|&v| v as f64).collect();
            let var = bn.running_var.data().iter().map(|&v| v as f64).collect();
            (out, mean, var, false)
        };
        Ok(self.push(
            Node::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ibeta,
                mean,
                var,
                eps: bn.eps,
                batch_stats,
            },
            out,
        ))
    }

    fn avg_pool2d(&mut self, _path: &str, x: &Var, window: usize, stride: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::avg_pool2d(&self.entries[ix].value, window, stride)?;
        Ok(self.push(Node::AvgPool { x: ix, window, stride }, out))
    }

    fn global_avg_pool(&mut self, _path: &str, x: &Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::global_avg_pool(&self.entries[ix].value)?;
        Ok(self.push(Node::GlobalAvgPool { x: ix }, out))
    }

    fn matmul(&mut self, _path: &str, a: &Var, b: &Var, transpose_a: bool, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::matmul(&self.entries[ia].value, &self.entries[ib].value, transpose_a, transpose_b)?;
        Ok(self.push(
            Node::Matmul {
                a: ia,
                b: ib,
                ta: transpose_a,
                tb: transpose_b,
            },
            out,
        ))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::relu(&self.entries[ix].value)?;
        Ok(self.push(Node::Relu { x: ix }, out))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::add(&self.entries[ia].value, &self.entries[ib].value)?;
        Ok(self.push(Node::Add { a: ia, b: ib }, out))
    }

    fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let idx = xs.iter().map(|v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.entries[i].value).collect();
        let out = ops::concat_channels(&refs)?;
        Ok(self.push(Node::Concat { xs: idx }, out))
    }

    fn reshape(&mut self, x: &Var, dims: Dims) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.entries[ix].value.reshape(dims)?;
        Ok(self.push(Node::Reshape { x: ix }, out))
    }

    fn softmax_lastdim(&mut self, x: &Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::softmax_lastdim(&self.entries[ix].value)?;
        Ok(self.push(Node::Softmax { x: ix }, out))
    }

    fn scale(&mut self, x: &Var, s: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::scale(&self.entries[ix].value, s)?;
        Ok(self.push(Node::Scale { x: ix, s }, out))
    }

    fn tap(&mut self, path: &str, kind: TapKind, x: &Var) {
        self.taps.push((path.to_string(), kind, *x));
    }
}
