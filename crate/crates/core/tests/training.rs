use std::fs;

use stymam::checkpoint;
use stymam::config::{Profile, TrainConfig};
use stymam::data::Dataset;
use stymam::discriminator::Discriminator;
use stymam::generator::{Generator, GeneratorConfig};
use stymam::params::ParamStore;
use stymam::training::{self, Trainer, DISCRIMINATOR_PREFIX, GENERATOR_PREFIX};
use stymam::{CheckpointError, Error, Tensor};

fn ramp(side: usize, phase: f64) -> Tensor {
    Tensor::from_fn([side, side, 3], |i| {
        let (y, x, c) = ((i / 3) / side, (i / 3) % side, i % 3);
        let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
        (0.8 * ((2.0 + c as f64) * u + 4.0 * v + phase).sin()).tanh()
    })
}

fn trainer(cfg: TrainConfig, n: usize) -> Trainer {
    let side = cfg.image_size;
    let content = Dataset::from_images((0..n).map(|i| ramp(side, i as f64)).collect()).unwrap();
    let style = Dataset::from_images((0..n).map(|i| ramp(side, 0.7 * i as f64 + 0.3)).collect()).unwrap();
    Trainer::new(cfg, content, style).unwrap()
}

fn small(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_profile(Profile::Desk);
    cfg.image_size = 16;
    cfg.max_steps = steps;
    cfg
}

fn changed(a: &ParamStore, b: &ParamStore) -> usize {
    a.tensors().iter().zip(b.tensors()).filter(|(x, y)| x != y).count()
}

#[test]
fn half_steps_touch_disjoint_parameters() {
    let mut t = trainer(small(3), 2);
    for _ in 0..3 {
        let (g0, d0) = (t.generator.params.clone(), t.discriminator.params.clone());
        let pass = t.generator_pass().unwrap();
        assert_eq!(t.generator.params, g0);
        assert_eq!(t.discriminator.params, d0);

        let loss_d = t.update_discriminator(&pass).unwrap();
        assert_eq!(t.generator.params, g0, "discriminator half moved generator weights");
        assert!(changed(&t.discriminator.params, &d0) > 0);

        let d1 = t.discriminator.params.clone();
        let m = t.update_generator(pass, loss_d).unwrap();
        assert_eq!(t.discriminator.params, d1, "generator half moved discriminator weights");
        assert!(changed(&t.generator.params, &g0) > 0);
        assert_eq!(m.loss_d, loss_d);
    }
    assert_eq!(t.step(), 3);
}

#[test]
fn extractor_stays_frozen() {
    let mut t = trainer(small(5), 1);
    let before = t.extractor.params.clone();
    for _ in 0..5 {
        t.train_step().unwrap();
    }
    assert_eq!(t.extractor.params, before);
}

#[test]
fn zero_learning_rates_change_nothing() {
    let mut cfg = small(4);
    cfg.lr_g = 0.0;
    cfg.lr_d = 0.0;
    let mut t = trainer(cfg, 1);
    let (g0, d0) = (t.generator.params.clone(), t.discriminator.params.clone());
    let history: Vec<_> = (0..4).map(|_| t.train_step().unwrap()).collect();
    assert_eq!(t.generator.params, g0);
    assert_eq!(t.discriminator.params, d0);
    for m in &history[1..] {
        assert_eq!(m.loss_d, history[0].loss_d);
        assert_eq!(m.loss_c, history[0].loss_c);
        assert_eq!(m.loss_total, history[0].loss_total);
    }
}

#[test]
fn content_loss_strictly_decreases_when_overfitting() {
    let mut cfg = TrainConfig::for_profile(Profile::Desk);
    cfg.lambda_adv = 0.0;
    cfg.lr_g = 1e-3;
    cfg.seed = 21;
    let mut t = trainer(cfg, 1);
    let losses: Vec<f64> = (0..50).map(|_| t.train_step().unwrap().loss_c).collect();
    for (i, w) in losses.windows(2).enumerate() {
        assert!(w[1] < w[0], "step {}: {} -> {}", i + 2, w[0], w[1]);
    }
}

#[test]
fn adversarial_term_off_leaves_content_gradient_only() {
    let mut a = small(3);
    a.lambda_adv = 0.0;
    let mut b = a.clone();
    b.adv_mode = stymam::losses::AdvMode::Saturating;
    let (mut ta, mut tb) = (trainer(a, 1), trainer(b, 1));
    for _ in 0..3 {
        ta.train_step().unwrap();
        tb.train_step().unwrap();
    }
    assert_eq!(ta.generator.params, tb.generator.params);
}

#[test]
fn checkpoint_round_trip_restores_both_networks() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(small(2), 1);
    t.train_step().unwrap();
    t.train_step().unwrap();
    let path = dir.path().join("m.ckpt");
    t.save_checkpoint(&path).unwrap();

    let mut other = trainer(TrainConfig { seed: 999, ..small(2) }, 1);
    assert_ne!(other.generator.params, t.generator.params);
    other.load_checkpoint(&path).unwrap();
    assert_eq!(other.generator.params, t.generator.params);
    assert_eq!(other.discriminator.params, t.discriminator.params);

    let again = dir.path().join("again.ckpt");
    other.save_checkpoint(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let names: Vec<String> = checkpoint::load(&path).unwrap().into_iter().map(|(n, _)| n).collect();
    assert!(names
        .iter()
        .all(|n| n.starts_with(GENERATOR_PREFIX) || n.starts_with(DISCRIMINATOR_PREFIX)));
    assert_eq!(names.len(), t.generator.params.len() + t.discriminator.params.len());
}

#[test]
fn narrow_checkpoint_into_wide_generator_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c8.ckpt");
    let narrow = Generator::new(GeneratorConfig::desk(), 1).unwrap();
    let d = Discriminator::new(Profile::Desk.discriminator(), 1).unwrap();
    training::save_models(&path, &narrow, &d).unwrap();

    let mut wide = Generator::new(
        GeneratorConfig {
            channels: 16,
            ..GeneratorConfig::desk()
        },
        1,
    )
    .unwrap();
    let before = wide.params.clone();
    match training::load_generator(&path, &mut wide) {
        Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, expected, found })) => {
            let local = name.strip_prefix(GENERATOR_PREFIX).expect("prefixed name");
            assert!(wide.params.id(local).is_some(), "{name}");
            assert_ne!(expected, found);
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    assert_eq!(wide.params, before, "failed load must not partially apply");
}

#[test]
fn truncated_and_foreign_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let t = trainer(small(1), 1);
    t.save_checkpoint(&path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
    let mut g = Generator::new(GeneratorConfig::desk(), 0).unwrap();
    assert!(matches!(
        training::load_generator(&cut, &mut g),
        Err(Error::Checkpoint(_))
    ));

    let foreign = dir.path().join("foreign.ckpt");
    let mut entries = checkpoint::load(&path).unwrap();
    entries.push(("optimizer/m".into(), Tensor::zeros([2])));
    checkpoint::save(&foreign, entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    assert!(matches!(
        training::load_generator(&foreign, &mut g),
        Err(Error::Checkpoint(CheckpointError::UnexpectedTensor(n))) if n == "optimizer/m"
    ));
}

#[test]
fn run_writes_metrics_and_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(5);
    cfg.out_dir = dir.path().join("out");
    cfg.checkpoint_every = 2;
    let mut t = trainer(cfg, 2);
    let history = t.run().unwrap();
    assert_eq!(history.len(), 5);
    let csv = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], training::METRICS_HEADER);
    for (row, m) in rows[1..].iter().zip(&history) {
        assert_eq!(*row, m.csv_row());
    }
    for name in ["checkpoint-000002.ckpt", "checkpoint-000004.ckpt", "final.ckpt"] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("out/checkpoint-000005.ckpt").exists());
}

#[test]
fn poisoned_weight_aborts_with_its_name() {
    let mut t = trainer(small(1), 1);
    let id = t.generator.params.id("decoder.out.w").unwrap();
    t.generator.params.get_mut(id).data_mut()[0] = f64::NAN;
    match t.train_step() {
        Err(Error::NonFinite { tensor, step, .. }) => {
            assert_eq!(tensor, "generator/decoder.out.w");
            assert_eq!(step, 1);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn mismatched_image_sizes_are_data_errors() {
    let cfg = small(1);
    let content = Dataset::from_images(vec![ramp(16, 0.0)]).unwrap();
    let style = Dataset::from_images(vec![ramp(32, 0.0)]).unwrap();
    assert!(matches!(Trainer::new(cfg, content, style), Err(Error::Data(_))));
}
