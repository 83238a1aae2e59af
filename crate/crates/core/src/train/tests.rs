use super::*;
use crate::config::{Ablation, ModelConfig};
use crate::data::synthetic::{gen_synthetic, SyntheticSpec};
use crate::data::Dataset;

fn tiny_data(n: usize, seed: u64) -> (ModelConfig, Dataset) {
    let spec = SyntheticSpec { n_samples: n, ..SyntheticSpec::tiny() };
    let corpus = gen_synthetic(&spec, seed).unwrap();
    let cfg = ModelConfig::tiny().fit_synthetic(&spec);
    let ds = corpus.to_dataset(&cfg.data_config()).unwrap();
    (cfg, ds)
}

fn train_cfg(lr: f64) -> TrainConfig {
    TrainConfig { lr, batch_size: 4, max_epochs: 2, seed: 5, ..TrainConfig::default() }
}

fn mean_loss(model: &Model<f64>, samples: &[Sample], cfg: &TrainConfig) -> f64 {
    samples.iter().map(|s| sample_loss_value(model, s, cfg).unwrap().total).sum::<f64>() / samples.len() as f64
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (cfg, ds) = tiny_data(8, 1);
    let model = Model::<f64>::new(cfg, 2).unwrap();
    let before = model.params.clone();
    let mut t = Trainer::new(model, train_cfg(0.0), 2).unwrap();
    let mut log = MetricsLog::memory();
    t.fit(&ds.samples, &mut log, |_, _| Ok(EpochOutcome::default())).unwrap();
    assert_eq!(t.model.params, before);
    assert_eq!(t.opt.steps(), 4);
}

#[test]
fn small_step_decreases_batch_loss() {
    let (cfg, ds) = tiny_data(4, 2);
    let cfg = ModelConfig { init_std: 0.3, ..cfg };
    let model = Model::<f64>::new(cfg, 3).unwrap();
    let tc = TrainConfig { clip_norm: 0.0, ..train_cfg(1e-3) };
    let before = mean_loss(&model, &ds.samples, &tc);
    let mut t = Trainer::new(model, tc.clone(), 1).unwrap();
    let batch: Vec<&Sample> = ds.samples.iter().collect();
    let m = t.step(&batch).unwrap();
    assert!((m.loss - before).abs() < 1e-12, "{} vs {before}", m.loss);
    let after = mean_loss(&t.model, &ds.samples, &tc);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn emoji_head_gets_no_gradient_without_classification() {
    let (cfg, ds) = tiny_data(2, 3);
    let cfg = ModelConfig { ablation: Ablation { no_classify: true, ..Ablation::default() }, ..cfg };
    let model = Model::<f64>::new(cfg, 4).unwrap();
    let (v, grads) = sample_gradients(&model, &ds.samples[0], &train_cfg(1e-3), Mode::Eval, 0).unwrap();
    assert!(v.emoji.is_none());
    for (name, gt) in &grads {
        if name.starts_with("emoji") {
            assert!(gt.data().iter().all(|&x| x == 0.0), "{name}");
        }
    }
    let (cfg_full, _) = tiny_data(2, 3);
    let full = Model::<f64>::new(cfg_full, 4).unwrap();
    let (v, grads) = sample_gradients(&full, &ds.samples[0], &train_cfg(1e-3), Mode::Eval, 0).unwrap();
    assert!(v.emoji.is_some());
    assert!(grads.iter().any(|(n, g)| n.starts_with("emoji") && g.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn fixed_seed_runs_are_identical_across_thread_counts() {
    let (cfg, ds) = tiny_data(10, 4);
    let cfg = ModelConfig { dropout: 0.1, ..cfg };
    let run = |threads| {
        let model = Model::<f64>::new(cfg.clone(), 7).unwrap();
        let mut t = Trainer::new(model, train_cfg(1e-3), threads).unwrap();
        let mut log = MetricsLog::memory();
        t.fit(&ds.samples, &mut log, |_, _| Ok(EpochOutcome::default())).unwrap();
        (t.model.params, log.records)
    };
    let (p1, r1) = run(1);
    let (p4, r4) = run(4);
    assert_eq!(p1, p4);
    assert_eq!(r1, r4);
}

#[test]
fn metrics_file_is_reproducible_and_checkpoints_written() {
    let (cfg, ds) = tiny_data(6, 5);
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let tc = TrainConfig { checkpoint_every: 2, ..train_cfg(1e-3) };
        let mut t = Trainer::new(model, tc, 2).unwrap();
        let path = dir.path().join(sub);
        let mut log = MetricsLog::create(&path).unwrap();
        t.fit(&ds.samples, &mut log, |e, _| Ok(EpochOutcome { record: Some(serde_json::json!({"e": e})), stop: false })).unwrap();
        std::fs::read(path.join("metrics.jsonl")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    // 6 samples, batch 4: two steps per epoch
    assert!(dir.path().join("a/step-000002.ckpt").exists());
    assert!(dir.path().join("a/step-000004.ckpt").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("a/timing.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn hook_can_stop_early() {
    let (cfg, ds) = tiny_data(4, 6);
    let model = Model::<f64>::new(cfg, 1).unwrap();
    let mut t = Trainer::new(model, TrainConfig { max_epochs: 10, ..train_cfg(1e-3) }, 1).unwrap();
    let s = t.fit(&ds.samples, &mut MetricsLog::memory(), |e, _| Ok(EpochOutcome { record: None, stop: e == 2 })).unwrap();
    assert_eq!(s.epochs, 3);
}

#[test]
fn non_finite_parameters_report_sample() {
    let (cfg, ds) = tiny_data(2, 7);
    let mut model = Model::<f64>::new(cfg, 1).unwrap();
    model.params.get_mut("score.b").unwrap().data_mut()[0] = f64::NAN;
    let err = sample_gradients(&model, &ds.samples[0], &train_cfg(1e-3), Mode::Eval, 0).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains(&ds.samples[0].id.to_string())), "{err}");
}

#[test]
fn narrow_training_runs() {
    let (cfg, ds) = tiny_data(4, 8);
    let model = Model::<f32>::new(cfg, 1).unwrap();
    let mut t = Trainer::new(model, train_cfg(1e-3), 1).unwrap();
    let s = t.fit(&ds.samples, &mut MetricsLog::memory(), |_, _| Ok(EpochOutcome::default())).unwrap();
    assert!(s.final_loss.is_finite());
}
