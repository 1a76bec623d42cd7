use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::{Ablation, VariantSpec};
use crate::tensor::GradTape;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_set(seed: u64, n: usize, kind: GeneratorKind) -> Samples {
    SynthDataset::new(seed, n, 8, [3, 16, 16], kind).generate().unwrap()
}

#[test]
fn generation_is_deterministic_and_balanced() {
    for kind in [GeneratorKind::GaborTexture, GeneratorKind::ColoredShape] {
        let a = small_set(3, 20, kind);
        let b = small_set(3, 20, kind);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        assert_ne!(a.checksum(), small_set(4, 20, kind).checksum());
        assert!(a.images.is_finite());
    }
    let two = SynthDataset::new(1, 100, 2, [3, 8, 8], GeneratorKind::GaborTexture).generate().unwrap();
    assert_eq!(two.labels.iter().filter(|&&l| l == 0).count(), 50);
    let odd = SynthDataset::new(1, 19, 8, [3, 8, 8], GeneratorKind::ColoredShape).generate().unwrap();
    let counts: Vec<usize> = (0..8).map(|c| odd.labels.iter().filter(|&&l| l == c).count()).collect();
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
}

#[test]
fn empty_datasets_rejected() {
    assert!(SynthDataset::new(0, 0, 8, [3, 8, 8], GeneratorKind::GaborTexture).generate().is_err());
    assert!(SynthDataset::new(0, 8, 0, [3, 8, 8], GeneratorKind::GaborTexture).generate().is_err());
    let m = ConvBaseline::new(3, 4, 8, &mut rng(0));
    let mut empty = small_set(0, 8, GeneratorKind::GaborTexture);
    empty.labels.clear();
    assert!(evaluate(&m, &empty).is_err());
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = TrainConfig {
        steps: 100,
        warmup_steps: 10,
        lr: 1.0,
        ..TrainConfig::default()
    };
    assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
    assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
    assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
    assert!(cfg.lr_at(55) < cfg.lr_at(20));
    assert!(cfg.lr_at(99) < 1e-3);
    assert!(TrainConfig { warmup_steps: 200, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..cfg }.validate().is_err());
}

#[test]
fn accuracy_oracles() {
    let labels: Vec<usize> = (0..4000).map(|i| i % 8).collect();
    let perfect = Tensor::from_fn([4000, 8, 1, 1], |[n, k, ..]| if k == labels[n] { 1.0 } else { 0.0 });
    assert_eq!(accuracy(&perfect, &labels), 1.0);
    let mut r = rng(1);
    let random = Tensor::from_fn([4000, 8, 1, 1], |_| r.random::<f32>());
    assert!((accuracy(&random, &labels) - 0.125).abs() < 0.02);
}

#[test]
fn every_trainable_parameter_gets_a_gradient() {
    let mut m = Model::build(&VariantSpec::preset("nano").unwrap(), &mut rng(2)).unwrap();
    let data = SynthDataset::new(2, 4, 8, [3, 32, 32], GeneratorKind::GaborTexture).generate().unwrap();
    let (x, labels) = data.batch(&[0, 1, 2, 3]).unwrap();
    let mut tape = GradTape::<f32>::new(true);
    let xv = tape.leaf(x, false);
    let logits = m.forward(&mut tape, &xv).unwrap();
    let loss = tape.cross_entropy(&logits, &labels).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let mut names = Vec::new();
    m.params_mut(&mut |p, k, _| {
        if k.is_trainable() {
            names.push(p.to_string());
        }
    });
    for n in &names {
        assert!(grads.by_name(n).is_some(), "no gradient for {n}");
    }
    assert_eq!(grads.named().count(), names.len());
}

#[test]
fn zero_learning_rate_changes_nothing_trainable() {
    let data = small_set(5, 16, GeneratorKind::ColoredShape);
    let mut m = ConvBaseline::new(3, 4, 8, &mut rng(5));
    let before = m.clone();
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 16,
        lr: 0.0,
        warmup_steps: 0,
        eval_interval: 1,
        ..TrainConfig::default()
    };
    let h = train(&mut m, &data, &cfg).unwrap();
    assert_eq!(m.conv1, before.conv1);
    assert_eq!(m.fc, before.fc);
    assert_eq!(m.bn2.gamma, before.bn2.gamma);
    for p in &h {
        assert!((p.loss - h[0].loss).abs() < 1e-5);
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = small_set(6, 32, GeneratorKind::GaborTexture);
    let cfg = TrainConfig {
        steps: 6,
        batch_size: 8,
        warmup_steps: 2,
        eval_interval: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = ConvBaseline::new(3, 4, 8, &mut rng(6));
        let h = train(&mut m, &data, &cfg).unwrap();
        (m, h)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_weights_abort_as_divergence() {
    let data = small_set(7, 8, GeneratorKind::GaborTexture);
    let mut m = ConvBaseline::new(3, 4, 8, &mut rng(7));
    m.fc.weight.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 4,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut m, &data, &cfg), Err(Error::Diverged { step: 0, .. })));
}

#[test]
fn ablation_lattice_structure() {
    let base = VariantSpec::preset("nano").unwrap();
    let rows = ablation_suite(&base, &ablation_lattice(), [1, 3, 32, 32], None, 0).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].attention_params > rows[1].attention_params);
    assert_eq!(rows[1].params, rows[2].params);
    assert!(rows.iter().all(|r| r.accuracy.is_none() && r.macs > 0));
    let bad = Ablation {
        fmb: true,
        gmlp: false,
        rlmhsa: true,
    };
    assert!(ablation_suite(&base, &[bad], [1, 3, 32, 32], None, 0).is_err());
}
