//! Command-line workflows: dataset generation, corruption, training,
//! decoding, the evaluation grid, reliability export, gradient checking,
//! and language-model training. Every artifact-producing run writes a
//! meta.json with the seed, a config hash, and the tool version.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use avrel_core::corruption::{
    corrupt_pair, gen_patch_bank, plan_corruption, CorruptionConfig, CorruptionPlan, VisualCondition,
};
use avrel_core::data::{
    generate_dataset, load_clip, load_manifest, make_babble_bank, parse_transcript, write_tensor_file, Clip,
    SyntheticSpec,
};
use avrel_core::decoding::{decode_clip, train_ngram_lm, DecodeConfig, NgramLm};
use avrel_core::eval::{export_reliability, run_grid, write_reliability_csv, GridConfig};
use avrel_core::model::{AvModel, ModelConfig};
use avrel_core::training::{train, StageConfig, TrainConfig};
use avrel_core::{mix_seed, KvFile, TEST_SEED_BIT};

#[derive(Parser)]
#[command(name = "avrel", version, about = "Audio-visual speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired audio-visual dataset.
    GenData(GenDataArgs),
    /// Apply seeded corruption to a dataset and store the corrupted media.
    Corrupt(CorruptArgs),
    /// Train a model on a dataset with on-the-fly corruption.
    Train(TrainArgs),
    /// Decode a dataset with a trained model.
    Decode(DecodeArgs),
    /// Evaluate a trained model over the corruption-condition grid.
    EvalGrid(EvalGridArgs),
    /// Export per-frame reliability scores aligned with corruption masks.
    ExportRel(ExportRelArgs),
    /// Finite-difference check of model gradients.
    Gradcheck(GradcheckArgs),
    /// Train the n-gram language model on dataset transcripts.
    LmTrain(LmTrainArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset spec as a key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    clips: usize,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct CorruptArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Corruption config as a key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Fix the babble SNR in dB instead of sampling from the config set.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// Restrict visual corruption: occlusion, noise, both, or clean.
    #[arg(long)]
    visual_corruption: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config as a key = value file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model architecture config as a key = value file.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Corruption config as a key = value file.
    #[arg(long)]
    corruption_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Curriculum stage caps in frames, comma-separated (e.g. 10,20).
    #[arg(long, value_delimiter = ',')]
    stage_frames: Option<Vec<usize>>,
    /// Epochs per curriculum stage, comma-separated, paired with --stage-frames.
    #[arg(long, value_delimiter = ',')]
    epochs: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Decode under babble at this SNR (dB); omit for clean audio.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// Visual corruption during decoding: occlusion, noise, both, or clean.
    #[arg(long, default_value = "clean")]
    visual_corruption: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalGridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    corruption_config: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportRelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    corruption_config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct LmTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.1)]
    add_k: f64,
    /// Output LM file (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn init_workers(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("AVREL_THREADS") {
            Ok(v) => v.parse().context("AVREL_THREADS must be a positive integer")?,
            Err(_) => 0, // rayon default
        },
    };
    if n > 0 {
        // Ignore the error if a pool already exists (e.g. repeated init).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(n)
}

fn load_kv(path: Option<&PathBuf>) -> anyhow::Result<KvFile> {
    match path {
        Some(p) => Ok(KvFile::load(p).with_context(|| format!("reading config {}", p.display()))?),
        None => Ok(KvFile::default()),
    }
}

/// meta.json: seed, sha-256 over the resolved configs, tool version.
fn write_meta(out_dir: &Path, seed: u64, configs: &[(&str, String)]) -> anyhow::Result<()> {
    let mut hasher = Sha256::new();
    for (name, text) in configs {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        hasher.update([0u8]);
    }
    let meta = serde_json::json!({
        "seed": seed,
        "config_hash": format!("{:x}", hasher.finalize()),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn load_model(ckpt: &Path, model_config: Option<&PathBuf>) -> anyhow::Result<(AvModel, KvFile)> {
    let kv = load_kv(model_config)?;
    let cfg = ModelConfig::from_kv(&kv)?;
    let model = AvModel::new(cfg)?;
    model.load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    model.set_training(false);
    Ok((model, kv))
}

fn load_dataset(dir: &Path) -> anyhow::Result<(SyntheticSpec, Vec<Clip>)> {
    let manifest = load_manifest(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let mut clips = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        clips.push(load_clip(&manifest, entry)?);
    }
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok((manifest.spec, clips))
}

fn decode_cfg_from_flags(
    beam_width: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    max_len: Option<usize>,
) -> DecodeConfig {
    let d = DecodeConfig::default();
    DecodeConfig {
        beam_width: beam_width.unwrap_or(d.beam_width),
        alpha: alpha.unwrap_or(d.alpha),
        beta: beta.unwrap_or(d.beta),
        max_len: max_len.unwrap_or(d.max_len),
        normalize_by_length: d.normalize_by_length,
    }
}

/// Seeded corruption plans for a test-time pass over clips, using the
/// evaluation seed partition.
fn plan_test_corruption(
    clips: &[Clip],
    corr: &CorruptionConfig,
    seed: u64,
) -> anyhow::Result<Vec<CorruptionPlan>> {
    let seed = seed | TEST_SEED_BIT;
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            plan_corruption(mix_seed(seed, 0x91a7, i as u64), c.video.t, c.audio.samples.len(), corr)
                .map_err(Into::into)
        })
        .collect()
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => {
            init_workers(a.workers)?;
            let kv = load_kv(a.config.as_ref())?;
            let mut spec = SyntheticSpec::from_kv(&kv)?;
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            let manifest = generate_dataset(&spec, a.clips, &a.out)?;
            write_meta(&a.out, spec.seed, &[("spec", kv.render())])?;
            println!(
                "generated {} clips ({} symbols vocab) in {}",
                manifest.entries.len(),
                spec.vocab_size,
                a.out.display()
            );
        }
        Cmd::Corrupt(a) => {
            init_workers(a.workers)?;
            let kv = load_kv(a.config.as_ref())?;
            let mut corr = CorruptionConfig::from_kv(&kv)?;
            if let Some(cond) = &a.visual_corruption {
                corr = corr.with_visual_condition(VisualCondition::parse(cond)?);
            }
            if a.snr.is_some() {
                corr = corr.with_snr(a.snr);
            }
            let (spec, clips) = load_dataset(&a.data)?;
            std::fs::create_dir_all(&a.out)?;
            let (h, w) = (spec.height, spec.width);
            let patches = gen_patch_bank(corr.patch_bank_size, h / 2, w / 2, mix_seed(a.seed, 0x9a7c, 0));
            let noise_bank = make_babble_bank(&spec, corr.noise_bank_size, mix_seed(a.seed, 0xba22, 0))?;
            let mut plans_out = String::new();
            for (i, clip) in clips.iter().enumerate() {
                let plan = plan_corruption(mix_seed(a.seed, 0xc0, i as u64), clip.video.t, clip.audio.samples.len(), &corr)?;
                let (cv, ca) = corrupt_pair(&clip.video, &clip.audio, &plan, &patches, &noise_bank)?;
                write_tensor_file(
                    &a.out.join(format!("{}_video.avt", clip.clip_id)),
                    &[cv.t, cv.h, cv.w, 1],
                    &cv.frames,
                )?;
                write_tensor_file(&a.out.join(format!("{}_audio.avt", clip.clip_id)), &[ca.samples.len()], &ca.samples)?;
                plans_out.push_str(&serde_json::to_string(&serde_json::json!({
                    "clip_id": clip.clip_id,
                    "plan": plan,
                }))?);
                plans_out.push('\n');
            }
            std::fs::write(a.out.join("plans.jsonl"), plans_out)?;
            write_meta(&a.out, a.seed, &[("corruption", kv.render())])?;
            println!("corrupted {} clips into {}", clips.len(), a.out.display());
        }
        Cmd::Train(a) => {
            let train_kv = load_kv(a.config.as_ref())?;
            let model_kv = load_kv(a.model_config.as_ref())?;
            let corr_kv = load_kv(a.corruption_config.as_ref())?;
            let mut tcfg = TrainConfig::from_kv(&train_kv)?;
            let corr = CorruptionConfig::from_kv(&corr_kv)?;
            let (spec, clips) = load_dataset(&a.data)?;
            let mut mcfg = ModelConfig::from_kv(&model_kv)?;
            if mcfg.vocab_size != spec.vocab_size {
                bail!("invalid config: vocab_size {} does not match dataset vocab {}", mcfg.vocab_size, spec.vocab_size);
            }
            if let Some(seed) = a.seed {
                tcfg.seed = seed;
                mcfg.seed = mix_seed(seed, 0x0d, 1);
            }
            if let Some(l) = a.lambda {
                tcfg.lambda = l;
            }
            match (&a.stage_frames, &a.epochs) {
                (Some(frames), Some(epochs)) => {
                    if frames.len() != epochs.len() || frames.is_empty() {
                        bail!("invalid config: stage_frames and epochs must be non-empty and equal length");
                    }
                    tcfg.stages = frames
                        .iter()
                        .zip(epochs)
                        .enumerate()
                        .map(|(i, (&f, &e))| StageConfig {
                            name: format!("stage{i}"),
                            max_symbols: (f / spec.frames_per_symbol).max(1),
                            epochs: e,
                        })
                        .collect();
                }
                (None, None) => {}
                _ => bail!("invalid config: stage_frames and epochs must be given together"),
            }
            tcfg.validate()?;
            let model = AvModel::new(mcfg.clone())?;
            let report = train(&model, &clips, &spec, &corr, &tcfg, &a.out)?;
            mcfg.to_kv().save(&a.out.join("model.kv"))?;
            write_meta(
                &a.out,
                tcfg.seed,
                &[("train", train_kv.render()), ("model", mcfg.to_kv().render()), ("corruption", corr_kv.render())],
            )?;
            println!(
                "trained {} steps over {} stages, joint loss {:.4} -> {:.4}, checkpoint {}",
                report.steps,
                tcfg.stages.len(),
                report.first_joint,
                report.last_joint,
                a.out.join("model.ckpt").display()
            );
        }
        Cmd::Decode(a) => {
            let (model, model_kv) = load_model(&a.model, a.model_config.as_ref())?;
            let (spec, clips) = load_dataset(&a.data)?;
            let lm = a.lm.as_ref().map(|p| NgramLm::load(p)).transpose()?;
            let dcfg = decode_cfg_from_flags(a.beam_width, a.alpha, a.beta, a.max_len);
            let corr = CorruptionConfig::default()
                .with_visual_condition(VisualCondition::parse(&a.visual_corruption)?)
                .with_snr(a.snr);
            let plans = plan_test_corruption(&clips, &corr, a.seed)?;
            let (h, w) = (spec.height, spec.width);
            let eseed = a.seed | TEST_SEED_BIT;
            let patches = gen_patch_bank(corr.patch_bank_size, h / 2, w / 2, mix_seed(eseed, 0x9a7c, 0));
            let noise_bank = make_babble_bank(&spec, corr.noise_bank_size, mix_seed(eseed, 0xba22, 0))?;
            std::fs::create_dir_all(&a.out)?;
            let mut lines = String::new();
            let mut total_errors = 0usize;
            let mut total_words = 0usize;
            for (clip, plan) in clips.iter().zip(&plans) {
                let (cv, ca) = corrupt_pair(&clip.video, &clip.audio, plan, &patches, &noise_bank)?;
                let record = decode_clip(&model, &clip.clip_id, &cv, &ca, &clip.tokens, lm.as_ref(), &dcfg)?;
                let hyp = parse_transcript(&record.hypothesis, spec.vocab_size).unwrap_or_default();
                total_errors += (avrel_core::eval::wer(&clip.tokens, &hyp)? / 100.0 * clip.tokens.len() as f64).round() as usize;
                total_words += clip.tokens.len();
                lines.push_str(&serde_json::to_string(&record)?);
                lines.push('\n');
            }
            std::fs::write(a.out.join("decode.jsonl"), lines)?;
            write_meta(&a.out, a.seed, &[("model", model_kv.render())])?;
            println!(
                "decoded {} clips, corpus WER {:.2}%, output {}",
                clips.len(),
                100.0 * total_errors as f64 / total_words as f64,
                a.out.join("decode.jsonl").display()
            );
        }
        Cmd::EvalGrid(a) => {
            init_workers(a.workers)?;
            let (model, model_kv) = load_model(&a.model, a.model_config.as_ref())?;
            let corr_kv = load_kv(a.corruption_config.as_ref())?;
            let corr = CorruptionConfig::from_kv(&corr_kv)?;
            let (spec, clips) = load_dataset(&a.data)?;
            let lm = a.lm.as_ref().map(|p| NgramLm::load(p)).transpose()?;
            let gcfg = GridConfig {
                decode: decode_cfg_from_flags(a.beam_width, a.alpha, a.beta, a.max_len),
                seed: a.seed,
                ..GridConfig::default()
            };
            std::fs::create_dir_all(&a.out)?;
            let models = vec![("model".to_string(), &model)];
            let csv = a.out.join("grid.csv");
            let reports = run_grid(&models, &clips, &spec, &corr, lm.as_ref(), &gcfg, Some(&csv))?;
            write_meta(&a.out, a.seed, &[("model", model_kv.render()), ("corruption", corr_kv.render())])?;
            for r in &reports {
                let snr = r.snr_db.map(|s| format!("{s} dB")).unwrap_or_else(|| "clean".into());
                println!("visual={} audio={}: WER {:.2}% over {} utts", r.visual.name(), snr, r.wer, r.n_utts);
            }
            println!("grid written to {}", csv.display());
        }
        Cmd::ExportRel(a) => {
            let (model, model_kv) = load_model(&a.model, a.model_config.as_ref())?;
            let corr_kv = load_kv(a.corruption_config.as_ref())?;
            let corr = CorruptionConfig::from_kv(&corr_kv)?;
            let (spec, clips) = load_dataset(&a.data)?;
            let plans = plan_test_corruption(&clips, &corr, a.seed)?;
            let eseed = a.seed | TEST_SEED_BIT;
            let patches = gen_patch_bank(corr.patch_bank_size, spec.height / 2, spec.width / 2, mix_seed(eseed, 0x9a7c, 0));
            let noise_bank = make_babble_bank(&spec, corr.noise_bank_size, mix_seed(eseed, 0xba22, 0))?;
            let items: Vec<(Clip, CorruptionPlan)> = clips.into_iter().zip(plans).collect();
            let rows = export_reliability(&model, &items, &patches, &noise_bank)?;
            std::fs::create_dir_all(&a.out)?;
            let csv = a.out.join("reliability.csv");
            write_reliability_csv(&csv, &rows)?;
            write_meta(&a.out, a.seed, &[("model", model_kv.render()), ("corruption", corr_kv.render())])?;
            println!("exported {} reliability rows to {}", rows.len(), csv.display());
        }
        Cmd::Gradcheck(a) => {
            let max_err = gradcheck(a.seed)?;
            println!("gradcheck max relative error: {max_err:.3e}");
            if !(max_err < 1e-4) {
                bail!("gradient check failed: max relative error {max_err:.3e} >= 1e-4");
            }
        }
        Cmd::LmTrain(a) => {
            let (spec, clips) = load_dataset(&a.data)?;
            let vocab = avrel_core::model::Vocab::new(spec.vocab_size);
            let transcripts: Vec<Vec<usize>> = clips.iter().map(|c| vocab.labels(&c.tokens)).collect();
            let lm = train_ngram_lm(&transcripts, a.order, a.add_k, &vocab)?;
            if let Some(dir) = a.out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            lm.save(&a.out)?;
            println!(
                "trained order-{} LM (add-{}) on {} transcripts, saved to {}",
                a.order,
                a.add_k,
                transcripts.len(),
                a.out.display()
            );
        }
    }
    Ok(())
}

/// Finite-difference probe of a small model's loss gradients; returns the
/// max relative error across sampled parameters.
fn gradcheck(seed: u64) -> anyhow::Result<f64> {
    use avrel_core::corruption::{AudioClip, Rect, VideoClip};
    use avrel_core::tensor::backward;
    use avrel_core::training::ctc_loss;

    let cfg = ModelConfig {
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
        fusion: avrel_core::model::FusionKind::TimeConcat,
        modality: avrel_core::model::Modality::Both,
        seed,
    };
    let model = AvModel::new(cfg.clone())?;
    model.set_training(true);
    let t = 4;
    let (h, w) = (16, 16);
    let mut state = mix_seed(seed, 0x6c, 0);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as f64 / (1u64 << 31) as f64
    };
    let video = VideoClip {
        frames: (0..t * h * w).map(|_| next()).collect(),
        t,
        h,
        w,
        mouth_region: Rect { x: 4, y: 7, w: 8, h: 5 },
        fps: 25.0,
    };
    let audio = AudioClip {
        samples: (0..t * cfg.samples_per_frame()).map(|_| next() - 0.5).collect(),
        sample_rate: 500,
    };
    let vocab = cfg.vocab();
    let y_in = vec![vocab.sos(), vocab.token(1), vocab.token(3)];
    let y_out = vec![vocab.token(1), vocab.token(3), vocab.eos()];
    let labels = vec![vocab.token(1), vocab.token(3)];

    let loss_fn = || -> anyhow::Result<avrel_core::tensor::Tensor> {
        let (ctc_logits, att_logits, _) = model.forward(&video, &audio, &y_in)?;
        let l_ctc = ctc_loss(&ctc_logits, &labels, vocab.blank())?;
        let l_att = att_logits.cross_entropy_mean(&y_out);
        Ok(avrel_core::training::joint_loss(&l_ctc, &l_att, 0.9))
    };

    let probes = ["vfront.conv0.w", "afront.proj.w", "score_v.bn0.gamma", "enc.0.att.q.w", "enc.0.conv_dw", "dec.embed", "ctc_head.w"];
    let eps = 1e-5;
    let mut max_err: f64 = 0.0;
    for name in probes {
        let param = model
            .params()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.clone())
            .with_context(|| format!("missing parameter {name}"))?;
        for (_, p) in model.params() {
            p.zero_grad();
        }
        let loss = loss_fn()?;
        backward(&loss)?;
        let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.len()]);
        let orig = param.data();
        // Probe a bounded sample of elements per parameter to stay fast.
        let stride = (param.len() / 24).max(1);
        for i in (0..param.len()).step_by(stride) {
            let mut probe = orig.clone();
            probe[i] = orig[i] + eps;
            param.set_data(&probe);
            let up = loss_fn()?.item();
            probe[i] = orig[i] - eps;
            param.set_data(&probe);
            let down = loss_fn()?.item();
            param.set_data(&orig);
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic[i] - fd).abs() / f64::max(1.0, analytic[i].abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
