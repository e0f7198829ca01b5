//! Evaluation: word error rate, the corruption-condition WER grid, and
//! per-frame reliability exports aligned with corruption segments.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruption::{
    corrupt_pair, gen_patch_bank, plan_corruption, CorruptionConfig, CorruptionPlan, VisualCondition,
};
use crate::data::{Clip, SyntheticSpec};
use crate::decoding::{decode_clip, DecodeConfig, NgramLm};
use crate::model::{AvModel, ReliabilityTrace};
use crate::{mix_seed, Error, Result, TEST_SEED_BIT};

/// Substitutions + deletions + insertions of the cheapest alignment,
/// via the two-row Levenshtein recurrence.
fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let n = hypothesis.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, &r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Word error rate as a percentage: 100 * (S + D + I) / N.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("wer: empty reference".into()));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub clip_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub errors: usize,
    pub ref_len: usize,
    pub wer: f64,
}

/// One grid cell: a model evaluated under one corruption condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub visual: VisualCondition,
    /// None means clean audio.
    pub snr_db: Option<f64>,
    /// Corpus-level WER: total errors over total reference words.
    pub wer: f64,
    pub n_utts: usize,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    /// Babble SNR points; clean audio is always evaluated in addition.
    pub snrs: Vec<f64>,
    pub visuals: Vec<VisualCondition>,
    pub decode: DecodeConfig,
    /// Base evaluation seed. The test-partition marker bit is applied
    /// internally so evaluation corruption can never collide with training.
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            snrs: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
            visuals: vec![
                VisualCondition::Clean,
                VisualCondition::Occlusion,
                VisualCondition::Noise,
                VisualCondition::Both,
            ],
            decode: DecodeConfig::default(),
            seed: 1,
        }
    }
}

/// Evaluate one model over the test clips under one corruption condition.
/// Plan seeds depend only on (eval seed, condition, clip index) so every
/// model sees identical corrupted inputs.
pub fn eval_condition(
    name: &str,
    model: &AvModel,
    clips: &[Clip],
    corr: &CorruptionConfig,
    visual: VisualCondition,
    snr_db: Option<f64>,
    lm: Option<&NgramLm>,
    decode: &DecodeConfig,
    eval_seed: u64,
    patches: &[crate::corruption::OcclusionPatch],
    noise_bank: &[Vec<f64>],
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Empty("eval: no clips".into()));
    }
    let eval_seed = eval_seed | TEST_SEED_BIT;
    let cond_salt = {
        let v = match visual {
            VisualCondition::Clean => 0u64,
            VisualCondition::Occlusion => 1,
            VisualCondition::Noise => 2,
            VisualCondition::Both => 3,
        };
        let s = snr_db.map(|x| x.to_bits()).unwrap_or(u64::MAX);
        mix_seed(v, 0xc0de, s)
    };
    let cfg = corr.with_visual_condition(visual).with_snr(snr_db);
    model.set_training(false);

    let mut rows = Vec::with_capacity(clips.len());
    let mut total_errors = 0usize;
    let mut total_ref = 0usize;
    for (i, clip) in clips.iter().enumerate() {
        let plan_seed = mix_seed(eval_seed, cond_salt, i as u64);
        let plan = plan_corruption(plan_seed, clip.video.t, clip.audio.samples.len(), &cfg)?;
        let (cv, ca) = corrupt_pair(&clip.video, &clip.audio, &plan, patches, noise_bank)?;
        let record = decode_clip(model, &clip.clip_id, &cv, &ca, &clip.tokens, lm, decode)?;
        let hyp_tokens = crate::data::parse_transcript(&record.hypothesis, model.cfg.vocab_size).unwrap_or_default();
        let errors = edit_distance(&clip.tokens, &hyp_tokens);
        total_errors += errors;
        total_ref += clip.tokens.len();
        rows.push(EvalRow {
            clip_id: clip.clip_id.clone(),
            reference: record.reference,
            hypothesis: record.hypothesis,
            errors,
            ref_len: clip.tokens.len(),
            wer: 100.0 * errors as f64 / clip.tokens.len() as f64,
        });
    }
    Ok(EvalReport {
        model: name.to_string(),
        visual,
        snr_db,
        wer: 100.0 * total_errors as f64 / total_ref as f64,
        n_utts: rows.len(),
        rows,
    })
}

/// Full condition grid over every model: each visual condition crossed
/// with every SNR point plus clean audio.
pub fn run_grid(
    models: &[(String, &AvModel)],
    clips: &[Clip],
    spec: &SyntheticSpec,
    corr: &CorruptionConfig,
    lm: Option<&NgramLm>,
    cfg: &GridConfig,
    out_csv: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    if models.is_empty() {
        return Err(Error::Empty("run_grid: no models".into()));
    }
    cfg.decode.validate()?;
    let eval_seed = cfg.seed | TEST_SEED_BIT;
    let (h, w) = (clips[0].video.h, clips[0].video.w);
    let patches = gen_patch_bank(corr.patch_bank_size, h / 2, w / 2, mix_seed(eval_seed, 0x9a7c, 0));
    let noise_bank = crate::data::make_babble_bank(spec, corr.noise_bank_size, mix_seed(eval_seed, 0xba22, 0))?;

    let mut reports = Vec::new();
    for (name, model) in models {
        for &visual in &cfg.visuals {
            let mut snrs: Vec<Option<f64>> = cfg.snrs.iter().copied().map(Some).collect();
            snrs.push(None);
            for snr in snrs {
                reports.push(eval_condition(
                    name, model, clips, corr, visual, snr, lm, &cfg.decode, eval_seed, &patches, &noise_bank,
                )?);
            }
        }
    }
    if let Some(path) = out_csv {
        write_grid_csv(path, &reports)?;
    }
    Ok(reports)
}

pub fn write_grid_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,visual,snr_db,wer,n_utts")?;
    for r in reports {
        let snr = r.snr_db.map(|s| s.to_string()).unwrap_or_else(|| "clean".to_string());
        writeln!(f, "{},{},{},{},{}", r.model, r.visual.name(), snr, r.wer, r.n_utts)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub clip_id: String,
    pub frame: usize,
    pub s_a_mean: f64,
    pub s_v_mean: f64,
    pub audio_corrupted: bool,
    pub visual_corrupted: bool,
}

/// Run corrupted clips through a scoring model and align per-frame mean
/// reliability scores with the corruption plan's segment masks.
pub fn export_reliability(
    model: &AvModel,
    items: &[(Clip, CorruptionPlan)],
    patches: &[crate::corruption::OcclusionPatch],
    noise_bank: &[Vec<f64>],
) -> Result<Vec<ReliabilityRow>> {
    if !model.cfg.use_scoring {
        return Err(Error::Config("export_reliability: model has no reliability scoring".into()));
    }
    model.set_training(false);
    let spf = model.cfg.samples_per_frame();
    let mut rows = Vec::new();
    for (clip, plan) in items {
        let (cv, ca) = corrupt_pair(&clip.video, &clip.audio, plan, patches, noise_bank)?;
        let (_, trace) = model.encode(&cv, &ca)?;
        let sa = trace.s_audio.as_ref().map(ReliabilityTrace::frame_means).unwrap_or_default();
        let sv = trace.s_visual.as_ref().map(ReliabilityTrace::frame_means).unwrap_or_default();
        let v_mask = plan.visual_corrupted_frames(clip.video.t);
        let a_mask = plan.audio_corrupted_frames(clip.video.t, spf);
        for f in 0..clip.video.t {
            rows.push(ReliabilityRow {
                clip_id: clip.clip_id.clone(),
                frame: f,
                s_a_mean: sa.get(f).copied().unwrap_or(f64::NAN),
                s_v_mean: sv.get(f).copied().unwrap_or(f64::NAN),
                audio_corrupted: a_mask[f],
                visual_corrupted: v_mask[f],
            });
        }
    }
    Ok(rows)
}

pub fn write_reliability_csv(path: &Path, rows: &[ReliabilityRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "clip_id,frame,s_a_mean,s_v_mean,audio_corrupted,visual_corrupted")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.clip_id, r.frame, r.s_a_mean, r.s_v_mean, r.audio_corrupted, r.visual_corrupted
        )?;
    }
    f.flush()?;
    Ok(())
}
