//! Weight-space rewrites. Each one produces a kernel that computes the same
//! function under the shared padding convention.

use crate::blocks::{check_identity, check_mergeable, join, BatchNorm, Bundle, Conv, ConvBranch, Identity};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Centres a `(O, I, kh, kw)` kernel in a zero `(O, I, to_kh, to_kw)` field.
pub fn pad_kernel<T: Scalar>(weight: &Tensor<T>, to_kh: usize, to_kw: usize) -> Result<Tensor<T>> {
    let [o, i, kh, kw] = weight.dims();
    if to_kh < kh || to_kw < kw || (to_kh - kh) % 2 != 0 || (to_kw - kw) % 2 != 0 {
        return Err(Error::ConvSpec(format!(
            "cannot centre a {kh}x{kw} kernel in {to_kh}x{to_kw}: target must be larger with even difference"
        )));
    }
    if (kh, kw) == (to_kh, to_kw) {
        return Ok(weight.clone());
    }
    let (dy, dx) = ((to_kh - kh) / 2, (to_kw - kw) / 2);
    let mut out = Tensor::zeros([o, i, to_kh, to_kw]);
    for a in 0..o {
        for b in 0..i {
            for y in 0..kh {
                for x in 0..kw {
                    out.set([a, b, y + dy, x + dx], weight.at([a, b, y, x]));
                }
            }
        }
    }
    Ok(out)
}

/// Re-lays a `from_groups` kernel as a `to_groups` kernel with zeros at every
/// cross-subgroup position. Requires `to_groups | from_groups`.
pub fn expand_groups<T: Scalar>(
    weight: &Tensor<T>,
    from_groups: usize,
    to_groups: usize,
    in_c: usize,
    out_c: usize,
) -> Result<Tensor<T>> {
    if to_groups == 0 || from_groups % to_groups != 0 {
        return Err(Error::ConvSpec(format!(
            "cannot expand {from_groups} groups to {to_groups}: target must divide source"
        )));
    }
    for (c, what) in [(in_c, "input"), (out_c, "output")] {
        if c % from_groups != 0 {
            return Err(Error::ConvSpec(format!(
                "{what} channels {c} are not divisible by {from_groups} groups"
            )));
        }
    }
    let [o, ig, kh, kw] = weight.dims();
    if o != out_c || ig != in_c / from_groups {
        return Err(Error::Shape {
            op: "expand_groups",
            detail: format!(
                "weight {:?} does not match {in_c}->{out_c} with {from_groups} groups",
                weight.dims()
            ),
        });
    }
    if from_groups == to_groups {
        return Ok(weight.clone());
    }
    let (out_src, in_src) = (out_c / from_groups, in_c / from_groups);
    let (out_dst, in_dst) = (out_c / to_groups, in_c / to_groups);
    let mut out = Tensor::zeros([out_c, in_dst, kh, kw]);
    for oc in 0..out_c {
        let first_in = (oc / out_src) * in_src;
        let offset = first_in - (oc / out_dst) * in_dst;
        for j in 0..in_src {
            for y in 0..kh {
                for x in 0..kw {
                    out.set([oc, offset + j, y, x], weight.at([oc, j, y, x]));
                }
            }
        }
    }
    Ok(out)
}

/// Absorbs batch norm into the preceding convolution:
/// `w' = w·γ/√(σ²+ε)` per output channel, `b' = β + (b − μ)·γ/√(σ²+ε)`.
pub fn fold_bn<T: Scalar>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    bn: &BatchNorm,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = weight.dims()[0];
    if bn.channels() != c || bn.running_mean.numel() != c || bn.running_var.numel() != c {
        return Err(Error::Shape {
            op: "fold_bn",
            detail: format!("batch norm has {} channels, conv has {c}", bn.channels()),
        });
    }
    if let Some(b) = bias {
        if b.numel() != c {
            return Err(Error::Shape {
                op: "fold_bn",
                detail: format!("bias has {} entries, conv has {c} outputs", b.numel()),
            });
        }
    }
    let per = weight.numel() / c.max(1);
    let mut w = weight.clone();
    let mut b = vec![T::zero(); c];
    let wd = w.data_mut();
    for ch in 0..c {
        let var = bn.running_var.data()[ch] as f64;
        if var < 0.0 {
            return Err(Error::Invalid(format!("negative running variance {var} in channel {ch}")));
        }
        let s = bn.gamma.data()[ch] as f64 / (var + bn.eps).sqrt();
        for v in &mut wd[ch * per..(ch + 1) * per] {
            *v = T::from_f64(v.as_f64() * s);
        }
        let b0 = bias.map_or(0.0, |t| t.data()[ch].as_f64());
        b[ch] = T::from_f64(bn.beta.data()[ch] as f64 + (b0 - bn.running_mean.data()[ch] as f64) * s);
    }
    Ok((w, Tensor::vector(b)))
}

/// The identity map as a kernel of `base`'s geometry: a 1 at the centre tap
/// linking each output channel to the same input channel.
pub fn fold_identity_branch<T: Scalar>(channels: usize, base: &ConvSpec) -> Result<Tensor<T>> {
    if base.in_channels != channels {
        return Err(Error::ConvSpec(format!(
            "identity over {channels} channels cannot use a {}-channel base",
            base.in_channels
        )));
    }
    check_identity(base).map_err(Error::ConvSpec)?;
    base.validate()?;
    let per = channels / base.groups;
    let (cy, cx) = base.padding();
    let mut w = Tensor::zeros(base.weight_dims());
    for c in 0..channels {
        w.set([c, c % per, cy, cx], T::one());
    }
    Ok(w)
}

/// `3×3 + pad(3×1) + pad(1×3)` for kernels sharing channels and groups.
pub fn merge_asymmetric<T: Scalar>(w3x3: &Tensor<T>, w3x1: &Tensor<T>, w1x3: &Tensor<T>) -> Result<Tensor<T>> {
    let [o, i, kh, kw] = w3x3.dims();
    let [o1, i1, h1, w1] = w3x1.dims();
    let [o2, i2, h2, w2] = w1x3.dims();
    if (o1, i1, o2, i2) != (o, i, o, i) || (h1, w1) != (kh, 1) || (h2, w2) != (1, kw) {
        return Err(Error::Shape {
            op: "merge_asymmetric",
            detail: format!(
                "expected {:?}, {:?}, {:?}",
                [o, i, kh, kw],
                [o, i, kh, 1],
                [o, i, 1, kw]
            ),
        });
    }
    let a = pad_kernel(w3x1, kh, kw)?;
    let b = pad_kernel(w1x3, kh, kw)?;
    let data = w3x3
        .data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .map(|((&x, &y), &z)| x + y + z)
        .collect();
    Tensor::new([o, i, kh, kw], data)
}

/// One step of a fusion, with the layer it touched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassRecord {
    pub pass: &'static str,
    pub path: String,
}

type Kernel = (Tensor<f64>, Option<Tensor<f64>>);

fn branch_kernel(br: &ConvBranch) -> Result<Kernel> {
    let w = br.conv.weight.cast::<f64>();
    let bias = br.conv.bias.as_ref().map(|b| b.cast::<f64>());
    match &br.bn {
        Some(bn) => {
            let (w, b) = fold_bn(&w, bias.as_ref(), bn)?;
            Ok((w, Some(b)))
        }
        None => Ok((w, bias)),
    }
}

fn accumulate(acc: &mut Tensor<f64>, t: &Tensor<f64>) {
    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += b;
    }
}

/// Collapses a bundle into one convolution of the base geometry.
///
/// Order: fold every branch's batch norm, then centre smaller kernels and
/// expand finer groupings, then sum. Any branch that cannot be merged fails
/// the whole bundle with the violated condition.
pub fn merge_parallel_branches(bundle: &Bundle, path: &str) -> Result<(Conv, Vec<PassRecord>)> {
    bundle.validate(path)?;
    let base = *bundle.base.spec();
    let mut passes = Vec::new();
    let mut rec = |pass: &'static str, p: String| passes.push(PassRecord { pass, path: p });

    let (mut weight, mut bias) = branch_kernel(&bundle.base)?;
    if bundle.base.bn.is_some() {
        rec("fold_bn", join(path, "base"));
    }
    for (i, extra) in bundle.extras.iter().enumerate() {
        let p = join(path, &format!("extra{i}"));
        let spec = extra.spec();
        check_mergeable(&base, spec).map_err(|condition| Error::Unmergeable {
            path: p.clone(),
            condition,
        })?;
        let (mut w, b) = branch_kernel(extra)?;
        if extra.bn.is_some() {
            rec("fold_bn", p.clone());
        }
        if spec.groups != base.groups {
            w = expand_groups(&w, spec.groups, base.groups, base.in_channels, base.out_channels)?;
            rec("expand_groups", p.clone());
        }
        if (spec.kernel_h, spec.kernel_w) != (base.kernel_h, base.kernel_w) {
            w = pad_kernel(&w, base.kernel_h, base.kernel_w)?;
            let asym = spec.kernel_h != spec.kernel_w;
            rec(if asym { "merge_asymmetric" } else { "pad_kernel" }, p.clone());
        }
        accumulate(&mut weight, &w);
        bias = match (bias, b) {
            (Some(mut acc), Some(b)) => {
                accumulate(&mut acc, &b);
                Some(acc)
            }
            (a, b) => a.or(b),
        };
    }
    if let Some(id) = &bundle.identity {
        let p = join(path, "identity");
        let kernel = fold_identity_branch(base.in_channels, &base).map_err(|e| Error::Unmergeable {
            path: p.clone(),
            condition: e.to_string(),
        })?;
        let (w, b) = match id {
            Identity::Plain => (kernel, None),
            Identity::Bn(bn) => {
                rec("fold_bn", p.clone());
                let (w, b) = fold_bn(&kernel, None, bn)?;
                (w, Some(b))
            }
        };
        rec("fold_identity", p);
        accumulate(&mut weight, &w);
        bias = match (bias, b) {
            (Some(mut acc), Some(b)) => {
                accumulate(&mut acc, &b);
                Some(acc)
            }
            (a, b) => a.or(b),
        };
    }
    rec("merge_branches", path.to_string());
    let spec = base.with_bias(bias.is_some());
    let weight = weight.cast::<f32>();
    weight.ensure_finite("merge_parallel_branches")?;
    Ok((Conv::new(spec, weight, bias.map(|b| b.cast::<f32>()))?, passes))
}
