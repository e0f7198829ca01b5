//! Optimizer and training-loop checks: an elementwise Adam reference,
//! schedule shape, gradient clipping, determinism of the full loop, and a
//! smoke run whose joint loss must drop substantially.

use avrel_core::corruption::{CorruptionConfig, Rect};
use avrel_core::data::{generate_in_memory, SyntheticSpec};
use avrel_core::model::{AvModel, FusionKind, Modality, ModelConfig};
use avrel_core::tensor::{backward, Tensor};
use avrel_core::training::{clip_gradients, joint_loss, lr_schedule, train, Adam, StageConfig, TrainConfig};
use avrel_core::KvFile;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 4,
        frames_per_symbol: 4,
        sample_rate: 400,
        fps: 25,
        min_symbols: 2,
        max_symbols: 3,
        height: 16,
        width: 16,
        mouth_region: Rect { x: 4, y: 7, w: 8, h: 5 },
        seed: 5,
    }
}

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        d: 16,
        ff: 32,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        conv_kernel: 3,
        max_rel: 16,
        vocab_size: 4,
        visual_channels: vec![4, 8, 8],
        audio_strides: vec![4, 4],
        audio_channels: vec![8, 16],
        use_scoring: true,
        fusion: FusionKind::TimeConcat,
        modality: Modality::Both,
        seed: 23,
    }
}

#[test]
fn lr_schedule_shape() {
    let peak = 0.0004;
    let warmup = 100;
    assert!((lr_schedule(1, peak, warmup) - peak / 100.0).abs() < 1e-15);
    assert!((lr_schedule(50, peak, warmup) - peak * 0.5).abs() < 1e-15);
    assert!((lr_schedule(100, peak, warmup) - peak).abs() < 1e-15);
    assert!((lr_schedule(400, peak, warmup) - peak * 0.5).abs() < 1e-15);
    assert!(lr_schedule(101, peak, warmup) < peak);
}

#[test]
fn adam_matches_scalar_reference() {
    let p = Tensor::param(&[2], vec![0.3, -1.2]);
    let params = vec![("p".to_string(), p.clone())];
    let mut opt = Adam::new(&params);

    // Independent elementwise reference with the same hyperparameters.
    let (b1, b2, eps, lr) = (0.9, 0.98, 1e-9, 0.01);
    let mut x = [0.3, -1.2];
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    let grads = [[0.5, -0.25], [0.1, 0.9], [-2.0, 0.0], [0.7, 0.7]];
    for (t, g) in grads.iter().enumerate() {
        p.zero_grad();
        let loss = p.hadamard(&Tensor::new(&[2], g.to_vec())).sum_all();
        backward(&loss).unwrap();
        opt.step(&params, lr).unwrap();
        for j in 0..2 {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / (1.0 - b1.powi(t as i32 + 1));
            let vhat = v[j] / (1.0 - b2.powi(t as i32 + 1));
            x[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
        let got = p.data();
        for j in 0..2 {
            assert!((got[j] - x[j]).abs() < 1e-12, "step {t} elem {j}: {} vs {}", got[j], x[j]);
        }
    }
}

#[test]
fn adam_reports_non_finite_gradient_by_name() {
    let p = Tensor::param(&[1], vec![1.0]);
    let params = vec![("enc.weird".to_string(), p.clone())];
    let mut opt = Adam::new(&params);
    let loss = p.scale(f64::NAN).sum_all();
    backward(&loss).unwrap();
    let err = opt.step(&params, 0.01).unwrap_err().to_string();
    assert!(err.contains("enc.weird"), "error should name the parameter: {err}");
}

#[test]
fn gradient_clipping_scales_to_max_norm() {
    let a = Tensor::param(&[2], vec![0.0, 0.0]);
    let b = Tensor::param(&[1], vec![0.0]);
    let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
    let loss = a
        .hadamard(&Tensor::new(&[2], vec![3.0, 0.0]))
        .sum_all()
        .add(&b.scale(4.0).sum_all());
    backward(&loss).unwrap();
    let norm = clip_gradients(&params, 2.5).unwrap();
    assert!((norm - 5.0).abs() < 1e-12);
    let ga = a.grad().unwrap();
    let gb = b.grad().unwrap();
    assert!((ga[0] - 1.5).abs() < 1e-12);
    assert!((gb[0] - 2.0).abs() < 1e-12);
    // Already inside the budget: untouched.
    let norm2 = clip_gradients(&params, 10.0).unwrap();
    assert!((norm2 - 2.5).abs() < 1e-12);
    assert_eq!(a.grad().unwrap(), ga);
}

#[test]
fn joint_loss_weighting() {
    let ctc = Tensor::scalar(2.0);
    let att = Tensor::scalar(1.0);
    assert!((joint_loss(&ctc, &att, 0.9).item() - (0.9 + 0.2)).abs() < 1e-15);
    assert!((joint_loss(&ctc, &att, 0.0).item() - 2.0).abs() < 1e-15);
    assert!((joint_loss(&ctc, &att, 1.0).item() - 1.0).abs() < 1e-15);
}

#[test]
fn train_config_kv_parsing() {
    let kv = KvFile::parse("batch_size = 2\nlambda = 0.8\nstage_max_symbols = 2, 6\nstage_epochs = 1, 3\n").unwrap();
    let cfg = TrainConfig::from_kv(&kv).unwrap();
    assert_eq!(cfg.batch_size, 2);
    assert_eq!(cfg.lambda, 0.8);
    assert_eq!(cfg.stages.len(), 2);
    assert_eq!(cfg.stages[1].epochs, 3);

    let bad = KvFile::parse("lambda = 1.5\n").unwrap();
    assert!(TrainConfig::from_kv(&bad).is_err());
    let mismatched = KvFile::parse("stage_max_symbols = 2\n").unwrap();
    assert!(TrainConfig::from_kv(&mismatched).is_err());
}

fn quick_train(seed: u64, out: &std::path::Path) -> (f64, Vec<u8>, String) {
    let spec = small_spec();
    let clips = generate_in_memory(&spec, 8).unwrap();
    let model = AvModel::new(small_model_cfg()).unwrap();
    let corr = CorruptionConfig::default();
    let cfg = TrainConfig {
        stages: vec![StageConfig { name: "only".into(), max_symbols: usize::MAX, epochs: 2 }],
        batch_size: 4,
        peak_lr: 0.001,
        warmup_steps: 4,
        lambda: 0.9,
        clip_norm: 5.0,
        seed,
    };
    let report = train(&model, &clips, &spec, &corr, &cfg, out).unwrap();
    assert!(!model.is_training(), "train should leave the model in eval mode");
    let ckpt = std::fs::read(out.join("model.ckpt")).unwrap();
    let metrics = std::fs::read_to_string(&report.metrics_path).unwrap();
    (report.last_joint, ckpt, metrics)
}

#[test]
fn training_is_deterministic() {
    let dir = std::env::temp_dir().join(format!("avrel_train_det_{}", std::process::id()));
    let (l1, c1, m1) = quick_train(42, &dir.join("a"));
    let (l2, c2, m2) = quick_train(42, &dir.join("b"));
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(c1, c2);
    assert_eq!(m1, m2);
    assert!(m1.starts_with("step,stage,lr,l_ctc,l_att,l_joint\n"));
    let (l3, _, _) = quick_train(43, &dir.join("c"));
    assert_ne!(l1.to_bits(), l3.to_bits());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn smoke_run_halves_the_joint_loss() {
    let spec = small_spec();
    let clips = generate_in_memory(&spec, 32).unwrap();
    let model = AvModel::new(small_model_cfg()).unwrap();
    let corr = CorruptionConfig::default();
    let cfg = TrainConfig {
        stages: vec![
            StageConfig { name: "short".into(), max_symbols: 2, epochs: 5 },
            StageConfig { name: "full".into(), max_symbols: usize::MAX, epochs: 22 },
        ],
        batch_size: 4,
        peak_lr: 0.002,
        warmup_steps: 30,
        lambda: 0.9,
        clip_norm: 5.0,
        seed: 7,
    };
    let dir = std::env::temp_dir().join(format!("avrel_train_smoke_{}", std::process::id()));
    let report = train(&model, &clips, &spec, &corr, &cfg, &dir).unwrap();
    assert!(report.steps >= 180, "expected a couple hundred steps, got {}", report.steps);
    assert!(
        report.last_joint < 0.5 * report.first_joint,
        "joint loss {} -> {} did not halve over {} steps",
        report.first_joint,
        report.last_joint,
        report.steps
    );
    for stage in ["short", "full"] {
        assert!(dir.join(format!("stage_{stage}.ckpt")).exists());
    }
    std::fs::remove_dir_all(&dir).ok();
}
