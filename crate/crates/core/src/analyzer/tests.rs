use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::{BlockKind, Conv, VariantSpec};
use crate::reparam::fuse_model;
use crate::tensor::{ops, Backend, ConvSpec, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn nano(seed: u64) -> Model {
    Model::build(&VariantSpec::preset("nano").unwrap(), &mut rng(seed)).unwrap()
}

#[test]
fn pointwise_conv_costs() {
    let conv = Conv::zeros(ConvSpec::new(4, 4, 1));
    let mut b = ShapeBackend::new();
    conv.forward(&mut b, "c", &[1, 4, 1, 1]).unwrap();
    assert_eq!(b.ops[0].params, 16);

    let conv = Conv::zeros(ConvSpec::new(2, 2, 1));
    let mut b = ShapeBackend::new();
    conv.forward(&mut b, "c", &[1, 2, 2, 2]).unwrap();
    assert_eq!(b.ops[0].macs, 16);
}

#[test]
fn pooling_counts_adds_only() {
    let mut b = ShapeBackend::new();
    let out = b.avg_pool2d("p", &[1, 3, 4, 4], 2, 2).unwrap();
    assert_eq!(out, [1, 3, 2, 2]);
    assert_eq!(b.ops[0].macs, 0);
    assert_eq!(b.ops[0].adds, 12 * 3);
}

#[test]
fn shape_errors_carry_the_layer_path() {
    let conv = Conv::zeros(ConvSpec::new(4, 4, 1));
    let err = conv.forward(&mut ShapeBackend::new(), "stages.0.proj", &[1, 3, 8, 8]).unwrap_err();
    assert!(err.to_string().contains("stages.0.proj"), "{err}");
}

#[test]
fn totals_are_column_sums_and_counts_agree() {
    let m = nano(1);
    let p = count_params(&m);
    let f = count_flops(&m, [1, 3, 64, 64]).unwrap();
    for r in [&p, &f] {
        assert_eq!(r.totals.params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.totals.macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        assert_eq!(r.totals.adds, r.rows.iter().map(|x| x.adds).sum::<u64>());
    }
    assert_eq!(p.totals.params, m.param_count() as u64);
    assert_eq!(f.totals.params, p.totals.params);
    assert_eq!(f.totals.running, p.totals.running);
    assert_eq!(f.flops(), 2 * f.totals.macs);
}

#[test]
fn conv_macs_scale_with_area() {
    let (fused, _) = fuse_model(&nano(2)).unwrap();
    let conv = |d| -> u64 {
        count_flops(&fused, d)
            .unwrap()
            .rows
            .iter()
            .filter(|r| r.op == "conv2d" && r.output_dims.unwrap()[2] > 1)
            .map(|r| r.macs)
            .sum()
    };
    assert_eq!(conv([1, 3, 128, 128]), 4 * conv([1, 3, 64, 64]));
}

#[test]
fn fusion_shrinks_params_and_keeps_shapes() {
    for name in ["T", "nano"] {
        let m = Model::build(&VariantSpec::preset(name).unwrap(), &mut rng(3)).unwrap();
        let (fused, _) = fuse_model(&m).unwrap();
        assert!(count_params(&fused).totals.params <= count_params(&m).totals.params);
        let (a, b) = (block_shapes(&m, [1, 3, 64, 64]).unwrap(), block_shapes(&fused, [1, 3, 64, 64]).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn stage_schedule() {
    let m = Model::build(&VariantSpec::preset("T").unwrap(), &mut rng(4)).unwrap();
    let hw: Vec<usize> = stage_outputs(&m, [1, 3, 224, 224]).unwrap().iter().map(|d| d[2]).collect();
    assert_eq!(hw, [56, 28, 14, 7]);
    let hw: Vec<usize> = stage_outputs(&nano(4), [1, 3, 64, 64]).unwrap().iter().map(|d| d[2]).collect();
    assert_eq!(hw, [16, 8, 4, 2]);
}

#[test]
fn constant_map_is_all_dc() {
    let p = fourier_spectrum(&Tensor::<f32>::full([1, 2, 8, 8], 1.5)).unwrap();
    assert!((p.radial_bins[0] - 1.0).abs() < 1e-12);
    assert!((p.low_freq_ratio - 1.0).abs() < 1e-12);
}

#[test]
fn checkerboard_is_all_nyquist() {
    let t = Tensor::<f32>::from_fn([1, 1, 8, 8], |[_, _, y, x]| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
    let p = fourier_spectrum(&t).unwrap();
    assert!(p.low_freq_ratio < 1e-12);
    assert!((p.radial_bins[RADIAL_BINS - 1] - 1.0).abs() < 1e-12);
}

#[test]
fn parseval_and_normalisation() {
    let t = Tensor::<f32>::randn([1, 3, 12, 10], 1.0, &mut rng(5));
    let p = fourier_spectrum(&t).unwrap();
    assert!(((p.spectral_energy - p.spatial_energy) / p.spatial_energy).abs() < 1e-4);
    assert!((p.radial_bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn smoothing_raises_low_frequency_share() {
    let noise = Tensor::<f32>::randn([1, 4, 16, 16], 1.0, &mut rng(6));
    let pooled = ops::avg_pool2d(&noise, 4, 4).unwrap();
    let up = Tensor::from_fn([1, 4, 16, 16], |[n, c, y, x]| pooled.at([n, c, y / 4, x / 4]));
    let raw = fourier_spectrum(&noise).unwrap().low_freq_ratio;
    let smooth = fourier_spectrum(&up).unwrap().low_freq_ratio;
    assert!(smooth > raw, "{smooth} <= {raw}");
}

#[test]
fn degenerate_inputs_rejected() {
    assert!(fourier_spectrum(&Tensor::<f32>::zeros([1, 2, 1, 1])).is_err());
    assert!(fourier_spectrum(&Tensor::<f32>::zeros([2, 2, 4, 4])).is_err());
}

#[test]
fn branch_report_structure() {
    let mut m = nano(7);
    m.randomize_bn(&mut rng(8));
    m.calibrate_bn(&Tensor::randn([4, 3, 32, 32], 1.0, &mut rng(12))).unwrap();
    let x = Tensor::randn([1, 3, 64, 64], 1.0, &mut rng(9));
    let report = branch_spectrum_report(&m, &x).unwrap();
    assert_eq!(report.len(), 5 * 3);
    for chunk in report.chunks(5) {
        let labels: Vec<&str> = chunk.iter().map(|p| p.branch.as_str()).collect();
        assert_eq!(labels, ["f1", "f2", "f3", "f4", "f5"]);
        assert!(chunk.iter().all(|p| p.block == chunk[0].block));
    }
    assert_eq!(report, branch_spectrum_report(&m, &x).unwrap());
}

#[test]
fn branch_report_needs_a_multi_frequency_block() {
    let mut v = VariantSpec::preset("nano").unwrap();
    for s in &mut v.stages {
        s.kind = BlockKind::Cfb;
        s.channels = [s.channels[0], s.channels[2], s.channels[2]];
    }
    let m = Model::build(&v, &mut rng(10)).unwrap();
    let x = Tensor::randn([1, 3, 32, 32], 1.0, &mut rng(11));
    assert!(branch_spectrum_report(&m, &x).is_err());
}
