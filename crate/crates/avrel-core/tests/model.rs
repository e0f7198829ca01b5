//! Architecture-level checks: shape contracts, score ranges, emphasis
//! algebra, decoder causality, receptive-field locality, determinism,
//! checkpoint round trips, and an end-to-end gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avrel_core::corruption::{AudioClip, Rect, VideoClip};
use avrel_core::model::{AvModel, FusionKind, Modality, ModelConfig, ReliabilityTrace, Vocab};
use avrel_core::tensor::{backward, Tensor};
use avrel_core::KvFile;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d: 8,
        ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        conv_kernel: 3,
        max_rel: 8,
        vocab_size: 4,
        visual_channels: vec![2, 3, 4],
        audio_strides: vec![4, 5],
        audio_channels: vec![4, 8],
        use_scoring: true,
        fusion: FusionKind::TimeConcat,
        modality: Modality::Both,
        seed: 11,
    }
}

fn random_pair(cfg: &ModelConfig, t: usize, seed: u64) -> (VideoClip, AudioClip) {
    let (h, w) = (16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<f64> = (0..t * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let samples: Vec<f64> = (0..t * cfg.samples_per_frame()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    (
        VideoClip {
            frames,
            t,
            h,
            w,
            mouth_region: Rect { x: 4, y: 7, w: 8, h: 5 },
            fps: 25.0,
        },
        AudioClip { samples, sample_rate: 500 },
    )
}

#[test]
fn vocab_layout() {
    let v = Vocab::new(8);
    assert_eq!(v.blank(), 0);
    assert_eq!(v.token(0), 1);
    assert_eq!(v.token(7), 8);
    assert_eq!(v.sos(), 9);
    assert_eq!(v.eos(), 10);
    assert_eq!(v.total(), 11);
    assert_eq!(v.symbol_of(3), Some(2));
    assert_eq!(v.symbol_of(0), None);
    assert_eq!(v.symbol_of(9), None);
    assert_eq!(v.labels(&[0, 2]), vec![1, 3]);
}

#[test]
fn config_kv_round_trip() {
    let cfg = tiny_cfg();
    let kv = cfg.to_kv();
    let back = ModelConfig::from_kv(&kv).unwrap();
    assert_eq!(back, cfg);

    let partial = KvFile::parse("d = 32\nheads = 4\n").unwrap();
    let cfg2 = ModelConfig::from_kv(&partial).unwrap();
    assert_eq!(cfg2.d, 32);
    assert_eq!(cfg2.ff, ModelConfig::default().ff);
}

#[test]
fn config_rejects_bad_values() {
    let mut cfg = tiny_cfg();
    cfg.heads = 3; // 8 % 3 != 0
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_cfg();
    cfg.conv_kernel = 4;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_cfg();
    cfg.audio_channels.pop();
    assert!(cfg.validate().is_err());
}

#[test]
fn forward_shape_contracts() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    let (video, audio) = random_pair(&cfg, 5, 1);
    let vocab = cfg.vocab();
    let y_in = vec![vocab.sos(), vocab.token(1), vocab.token(2)];
    let (ctc, att, trace) = model.forward(&video, &audio, &y_in).unwrap();
    assert_eq!(ctc.shape(), &[5, vocab.total()]);
    assert_eq!(att.shape(), &[3, vocab.total()]);
    assert_eq!(trace.s_audio.as_ref().unwrap().shape(), &[5, cfg.d]);
    assert_eq!(trace.s_visual.as_ref().unwrap().shape(), &[5, cfg.d]);
}

#[test]
fn variant_shapes_and_traces() {
    let (video, audio) = random_pair(&tiny_cfg(), 4, 2);
    for (fusion, modality, scoring) in [
        (FusionKind::LinearConcat, Modality::Both, false),
        (FusionKind::TimeConcat, Modality::AudioOnly, false),
        (FusionKind::TimeConcat, Modality::VisualOnly, false),
        (FusionKind::TimeConcat, Modality::Both, false),
    ] {
        let cfg = ModelConfig {
            fusion,
            modality,
            use_scoring: scoring,
            ..tiny_cfg()
        };
        let model = AvModel::new(cfg.clone()).unwrap();
        let (mem, trace) = model.encode(&video, &audio).unwrap();
        assert_eq!(mem.shape(), &[4, cfg.d], "memory shape for {:?}/{:?}", fusion, modality);
        assert!(trace.s_audio.is_none() && trace.s_visual.is_none());
    }
}

#[test]
fn zero_input_scores_are_half() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    let (mut video, mut audio) = random_pair(&cfg, 4, 3);
    video.frames.iter_mut().for_each(|v| *v = 0.0);
    audio.samples.iter_mut().for_each(|v| *v = 0.0);
    let (_, trace) = model.encode(&video, &audio).unwrap();
    for s in [trace.s_audio.unwrap(), trace.s_visual.unwrap()] {
        for v in s.data() {
            assert!((v - 0.5).abs() < 1e-12, "zero input should score 0.5, got {v}");
        }
    }
}

#[test]
fn scores_stay_in_open_unit_interval() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    let (video, audio) = random_pair(&cfg, 6, 4);
    let (_, trace) = model.encode(&video, &audio).unwrap();
    for s in [trace.s_audio.unwrap(), trace.s_visual.unwrap()] {
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let means = ReliabilityTrace::frame_means(&model.encode(&video, &audio).unwrap().1.s_audio.unwrap());
    assert_eq!(means.len(), 6);
    assert!(means.iter().all(|&m| m > 0.0 && m < 1.0));
}

#[test]
fn emphasis_identity_cases() {
    let f = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
    let zeros = Tensor::zeros(&[2, 3]);
    let ones = Tensor::new(&[2, 3], vec![1.0; 6]);
    let same = AvModel::emphasize(&f, &zeros).unwrap();
    assert_eq!(same.data(), f.data());
    let doubled = AvModel::emphasize(&f, &ones).unwrap();
    let expect: Vec<f64> = f.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(doubled.data(), expect);
    assert!(AvModel::emphasize(&f, &Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    model.set_training(false);
    let (video, audio) = random_pair(&cfg, 4, 5);
    let (mem, _) = model.encode(&video, &audio).unwrap();
    let vocab = cfg.vocab();
    let a = model
        .decode_logits(&mem, &[vocab.sos(), vocab.token(0), vocab.token(1)])
        .unwrap();
    let b = model
        .decode_logits(&mem, &[vocab.sos(), vocab.token(0), vocab.token(3)])
        .unwrap();
    let (va, vb) = (a.data(), b.data());
    let v = vocab.total();
    // Positions 0 and 1 only see tokens up to index 1, which agree.
    for i in 0..2 * v {
        assert!((va[i] - vb[i]).abs() < 1e-12, "position {} leaked future tokens", i / v);
    }
    // Position 2 sees the differing token.
    assert!((0..v).any(|k| (va[2 * v + k] - vb[2 * v + k]).abs() > 1e-9));
}

#[test]
fn decoder_input_validation() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    let (video, audio) = random_pair(&cfg, 3, 6);
    let (mem, _) = model.encode(&video, &audio).unwrap();
    let vocab = cfg.vocab();
    assert!(model.decode_logits(&mem, &[]).is_err());
    assert!(model.decode_logits(&mem, &[vocab.token(0)]).is_err());
    assert!(model.decode_logits(&mem, &[vocab.sos(), vocab.total()]).is_err());
}

#[test]
fn input_sizing_errors() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    let (video, mut audio) = random_pair(&cfg, 4, 7);
    audio.samples.pop();
    let err = match model.encode(&video, &audio) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("truncated waveform accepted"),
    };
    assert!(err.contains("samples per frame"), "unexpected error: {err}");

    let (_, audio) = random_pair(&cfg, 4, 8);
    let (short_video, _) = random_pair(&cfg, 3, 8);
    let err = match model.encode(&short_video, &audio) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("mismatched stream lengths accepted"),
    };
    assert!(err.contains("length mismatch"), "unexpected error: {err}");
}

#[test]
fn conv_receptive_field_is_local_without_attention() {
    let cfg = ModelConfig {
        modality: Modality::AudioOnly,
        ..tiny_cfg()
    };
    let model = AvModel::new(cfg.clone()).unwrap();
    model.set_training(false);
    model.set_encoder_attention(false);
    let (video, audio) = random_pair(&cfg, 12, 9);
    let (mem_a, _) = model.encode(&video, &audio).unwrap();
    let mut audio_b = audio.clone();
    // Perturb only the first frame's samples.
    for s in audio_b.samples.iter_mut().take(cfg.samples_per_frame()) {
        *s += 0.25;
    }
    let (mem_b, _) = model.encode(&video, &audio_b).unwrap();
    let (da, db) = (mem_a.data(), mem_b.data());
    let d = cfg.d;
    // Scoring convs reach +/-3 frames and the encoder depthwise conv +/-1,
    // so frames beyond index 4 cannot see the perturbation.
    for t in 5..12 {
        for k in 0..d {
            assert_eq!(da[t * d + k], db[t * d + k], "frame {t} saw a distant perturbation");
        }
    }
    assert!((0..d).any(|k| da[k] != db[k]));
    model.set_encoder_attention(true);
    let (mem_c, _) = model.encode(&video, &audio_b).unwrap();
    let dc = mem_c.data();
    assert!((0..d).any(|k| dc[11 * d + k] != da[11 * d + k]), "attention should be global");
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_cfg();
    let m1 = AvModel::new(cfg.clone()).unwrap();
    let m2 = AvModel::new(cfg.clone()).unwrap();
    assert_eq!(m1.num_params(), m2.num_params());
    let (video, audio) = random_pair(&cfg, 4, 10);
    let y_in = vec![cfg.vocab().sos(), cfg.vocab().token(2)];
    let (c1, a1, _) = m1.forward(&video, &audio, &y_in).unwrap();
    let (c2, a2, _) = m2.forward(&video, &audio, &y_in).unwrap();
    assert_eq!(c1.data(), c2.data());
    assert_eq!(a1.data(), a2.data());
    let (c3, a3, _) = m1.forward(&video, &audio, &y_in).unwrap();
    assert_eq!(c1.data(), c3.data());
    assert_eq!(a1.data(), a3.data());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    let (video, audio) = random_pair(&cfg, 4, 11);
    // A train-mode pass moves the normalization running stats off their init.
    model.set_training(true);
    let _ = model.encode(&video, &audio).unwrap();
    model.set_training(false);
    let (mem, _) = model.encode(&video, &audio).unwrap();

    let dir = std::env::temp_dir().join(format!("avrel_model_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    model.save(&path).unwrap();

    let other = AvModel::new(ModelConfig { seed: 999, ..cfg.clone() }).unwrap();
    other.set_training(false);
    let (mem_before, _) = other.encode(&video, &audio).unwrap();
    assert_ne!(mem.data(), mem_before.data());
    other.load(&path).unwrap();
    let (mem_after, _) = other.encode(&video, &audio).unwrap();
    let (a, b) = (mem.data(), mem_after.data());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = tiny_cfg();
    let model = AvModel::new(cfg.clone()).unwrap();
    model.set_training(true);
    let (video, audio) = random_pair(&cfg, 4, 12);
    let vocab = cfg.vocab();
    let y_in = vec![vocab.sos(), vocab.token(1), vocab.token(3)];
    let y_out = vec![vocab.token(1), vocab.token(3), vocab.eos()];

    let loss_fn = || {
        let (ctc, att, _) = model.forward(&video, &audio, &y_in).unwrap();
        // CTC training arrives later; here any smooth scalar over both heads
        // exercises every parameter.
        let ctc_part = ctc.log_softmax().mean_all().scale(-1.0);
        let att_part = att.cross_entropy_mean(&y_out);
        ctc_part.add(&att_part)
    };

    let probes = [
        "vfront.conv0.w",
        "afront.conv0.w",
        "afront.proj.w",
        "score_a.conv1.w",
        "score_a.bn1.gamma",
        "score_v.conv2.b",
        "enc.0.att.q.w",
        "enc.0.att.relpos",
        "enc.0.conv_dw",
        "enc.0.ffn2.1.b",
        "ctc_head.w",
        "dec.embed",
        "dec.0.cross.k.w",
        "dec.out_head.b",
    ];
    let eps = 1e-5;
    for name in probes {
        let param = model
            .params()
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .1
            .clone();
        for (_, p) in model.params() {
            p.zero_grad();
        }
        let loss = loss_fn();
        backward(&loss).unwrap();
        let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.len()]);
        let mut max_err: f64 = 0.0;
        let orig = param.data();
        for i in 0..param.len() {
            let mut probe = orig.clone();
            probe[i] = orig[i] + eps;
            param.set_data(&probe);
            let up = loss_fn().item();
            probe[i] = orig[i] - eps;
            param.set_data(&probe);
            let down = loss_fn().item();
            param.set_data(&orig);
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic[i] - fd).abs() / f64::max(1.0, analytic[i].abs());
            max_err = max_err.max(err);
        }
        assert!(max_err < 1e-4, "gradient check failed for {name}: max rel err {max_err:.3e}");
    }
}
