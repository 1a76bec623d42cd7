use super::*;
use crate::blocks::{BatchNorm, Bundle, ConvBranch, Identity, VariantSpec};
use crate::tensor::{ops, ConvSpec};
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn pad_one_by_one_to_three() {
    let w = Tensor::new([1, 1, 1, 1], vec![2.5]).unwrap();
    let p = pad_kernel(&w, 3, 3).unwrap();
    let mut want = vec![0.0; 9];
    want[4] = 2.5;
    assert_eq!(p.data(), &want[..]);
    assert_eq!(pad_kernel(&p, 3, 3).unwrap(), p);
    assert!(pad_kernel(&w, 2, 3).is_err());
    assert!(pad_kernel(&p, 1, 1).is_err());
}

#[test]
fn expand_same_groups_is_identity() {
    let w: Tensor = Tensor::randn([4, 2, 1, 1], 1.0, &mut rng(1));
    assert_eq!(expand_groups(&w, 2, 2, 4, 4).unwrap(), w);
    assert!(expand_groups(&w, 2, 4, 4, 4).is_err());
    assert!(expand_groups(&w, 3, 1, 4, 4).is_err());
}

#[test]
fn depthwise_expands_to_block_diagonal() {
    let w = Tensor::from_fn([3, 1, 1, 1], |[o, ..]| (o + 1) as f32);
    let e = expand_groups(&w, 3, 1, 3, 3).unwrap();
    for o in 0..3 {
        for i in 0..3 {
            let want = if o == i { (o + 1) as f32 } else { 0.0 };
            assert_eq!(e.at([o, i, 0, 0]), want);
        }
    }
}

#[test]
fn fold_bn_trivial_cases() {
    let w: Tensor = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng(2));
    let mut bn = BatchNorm::new(2);
    bn.eps = 0.0;
    let (w2, b2) = fold_bn(&w, None, &bn).unwrap();
    assert_eq!(w2, w);
    assert_eq!(b2.data(), &[0.0, 0.0]);

    bn.gamma = Tensor::zeros([2, 1, 1, 1]);
    bn.beta = Tensor::vector(vec![0.3, -0.7]);
    let (w3, b3) = fold_bn(&w, None, &bn).unwrap();
    assert!(w3.data().iter().all(|&v| v == 0.0));
    assert_eq!(b3.data(), &[0.3, -0.7]);

    bn.running_var = Tensor::vector(vec![-1.0, 1.0]);
    assert!(fold_bn(&w, None, &bn).is_err());
}

#[test]
fn identity_kernel_reproduces_input() {
    let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut rng(3));
    for groups in [1, 2, 4] {
        let spec = ConvSpec::new(4, 4, 3).with_groups(groups);
        let w: Tensor = fold_identity_branch(4, &spec).unwrap();
        let y = ops::conv2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y, x);
    }
    let dw: Tensor = fold_identity_branch(4, &ConvSpec::depthwise(4, 3)).unwrap();
    assert_eq!(dw.dims(), [4, 1, 3, 3]);
    assert_eq!(dw.data().iter().filter(|&&v| v == 1.0).count(), 4);
    assert!(fold_identity_branch::<f32>(4, &ConvSpec::new(4, 4, 3).with_stride(2)).is_err());
    assert!(fold_identity_branch::<f32>(4, &ConvSpec::new(4, 8, 3)).is_err());
}

#[test]
fn asymmetric_placement() {
    let z3 = Tensor::zeros([1, 1, 3, 3]);
    let col = Tensor::new([1, 1, 3, 1], vec![1.0, 2.0, 1.0]).unwrap();
    let z13 = Tensor::zeros([1, 1, 1, 3]);
    let m = merge_asymmetric(&z3, &col, &z13).unwrap();
    assert_eq!(m.data(), &[0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0]);
    let zero = merge_asymmetric(&z3, &Tensor::zeros([1, 1, 3, 1]), &z13).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(merge_asymmetric(&z3, &z13, &col).is_err());
}

#[test]
fn zero_extra_leaves_base() {
    let mut r = rng(4);
    let base = ConvBranch::new(ConvSpec::new(4, 4, 3), false, &mut r);
    let mut extra = ConvBranch::new(ConvSpec::new(4, 4, 1).with_groups(2), false, &mut r);
    extra.conv.weight = Tensor::zeros(extra.conv.weight.dims());
    let bundle = Bundle::new(base.clone(), vec![extra], None).unwrap();
    let (conv, _) = merge_parallel_branches(&bundle, "x").unwrap();
    assert_eq!(conv.weight, base.conv.weight);
    assert!(conv.bias.is_none());
}

#[test]
fn identity_extra_on_zero_base_is_centred_dirac() {
    let mut r = rng(5);
    let mut base = ConvBranch::new(ConvSpec::new(2, 2, 3), false, &mut r);
    base.conv.weight = Tensor::zeros(base.conv.weight.dims());
    let mut extra = ConvBranch::new(ConvSpec::new(2, 2, 1), false, &mut r);
    extra.conv.weight = Tensor::from_fn([2, 2, 1, 1], |[o, i, ..]| if o == i { 1.0 } else { 0.0 });
    let (conv, _) = merge_parallel_branches(&Bundle::new(base, vec![extra], None).unwrap(), "x").unwrap();
    assert_eq!(conv.weight, fold_identity_branch(2, &ConvSpec::new(2, 2, 3)).unwrap());
}

#[test]
fn unmergeable_bundle_names_branch_and_condition() {
    let mut r = rng(6);
    let base = ConvBranch::new(ConvSpec::new(4, 4, 3).with_groups(2), false, &mut r);
    let bad = ConvBranch::new(ConvSpec::new(4, 4, 1), false, &mut r);
    let bundle = Bundle {
        base,
        extras: vec![bad],
        identity: Some(Identity::Plain),
    };
    match merge_parallel_branches(&bundle, "stage.conv") {
        Err(Error::Unmergeable { path, condition }) => {
            assert_eq!(path, "stage.conv.extra0");
            assert!(condition.contains("groups"));
        }
        other => panic!("expected a merge diagnostic, got {other:?}"),
    }
}

#[test]
fn passes_name_every_step() {
    let mut v = VariantSpec::preset("nano").unwrap();
    v.classes = 4;
    let m = Model::build(&v, &mut rng(7)).unwrap();
    let (fused, passes) = fuse_model(&m).unwrap();
    assert!(fused.is_deployed());
    for name in ["fold_bn", "expand_groups", "merge_asymmetric", "pad_kernel", "fold_identity", "merge_branches"] {
        assert!(passes.iter().any(|p| p.pass == name), "missing pass {name}");
    }
    assert!(passes.iter().any(|p| p.pass == "merge_asymmetric" && p.path.starts_with("stem.conv")));
    let (again, none) = fuse_model(&fused).unwrap();
    assert_eq!(again, fused);
    assert!(none.is_empty());
}
