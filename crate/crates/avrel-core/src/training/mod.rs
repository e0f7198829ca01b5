//! Joint CTC/attention training: losses, Adam with warmup scheduling,
//! gradient clipping, and a curriculum loop over corrupted clips.

mod ctc;

pub use ctc::{ctc_loss, ctc_min_frames};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corruption::{corrupt_pair, gen_patch_bank, plan_corruption, CorruptionConfig};
use crate::data::{make_babble_bank, Clip, SyntheticSpec};
use crate::kv::KvFile;
use crate::model::AvModel;
use crate::tensor::{backward, Tensor};
use crate::{mix_seed, Error, Result};

/// Joint objective: lambda * attention loss + (1 - lambda) * CTC loss.
pub fn joint_loss(l_ctc: &Tensor, l_att: &Tensor, lambda: f64) -> Tensor {
    l_att.scale(lambda).add(&l_ctc.scale(1.0 - lambda))
}

/// Warmup then inverse square-root decay; `step` is 1-based.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    assert!(step >= 1 && warmup >= 1, "lr_schedule: step and warmup are 1-based");
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(params: &[(String, Tensor)], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (name, p) in params {
        if let Some(g) = p.grad() {
            for v in &g {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in params {
            if let Some(g) = p.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                p.zero_grad();
                p.accum_grad(&scaled);
            }
        }
    }
    Ok(norm)
}

/// Adam with bias correction (beta1 0.9, beta2 0.98, eps 1e-9). Slot order
/// is the parameter registry order, so it is stable across runs.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)]) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Parameters with no gradient are left untouched.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let mut data = p.data();
            for j in 0..g.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(&data);
            p.zero_grad();
        }
        Ok(())
    }
}

/// One curriculum stage: train `epochs` passes over the clips whose
/// transcript has at most `max_symbols` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub max_symbols: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    /// Clips per optimizer step (gradients are accumulated across them).
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Attention weight in the joint objective.
    pub lambda: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: vec![
                StageConfig { name: "short".into(), max_symbols: 3, epochs: 2 },
                StageConfig { name: "medium".into(), max_symbols: 5, epochs: 2 },
                StageConfig { name: "full".into(), max_symbols: usize::MAX, epochs: 4 },
            ],
            batch_size: 4,
            peak_lr: 0.0004,
            warmup_steps: 100,
            lambda: 0.9,
            clip_norm: 5.0,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvFile) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let stages = match (kv.get_usize_list("stage_max_symbols")?, kv.get_usize_list("stage_epochs")?) {
            (None, None) => d.stages,
            (Some(ms), Some(ep)) => {
                if ms.len() != ep.len() || ms.is_empty() {
                    return Err(Error::Config("stage_max_symbols and stage_epochs must be non-empty and equal length".into()));
                }
                ms.iter()
                    .zip(&ep)
                    .enumerate()
                    .map(|(i, (&m, &e))| StageConfig { name: format!("stage{i}"), max_symbols: m, epochs: e })
                    .collect()
            }
            _ => return Err(Error::Config("stage_max_symbols and stage_epochs must be given together".into())),
        };
        let cfg = TrainConfig {
            stages,
            batch_size: kv.get_usize("batch_size")?.unwrap_or(d.batch_size),
            peak_lr: kv.get_f64("peak_lr")?.unwrap_or(d.peak_lr),
            warmup_steps: kv.get_usize("warmup_steps")?.unwrap_or(d.warmup_steps),
            lambda: kv.get_f64("lambda")?.unwrap_or(d.lambda),
            clip_norm: kv.get_f64("clip_norm")?.unwrap_or(d.clip_norm),
            seed: kv.get_usize("seed")?.map(|v| v as u64).unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one training stage is required".into()));
        }
        if self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("batch_size and warmup_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("peak_lr and clip_norm must be positive".into()));
        }
        if self.seed & crate::TEST_SEED_BIT != 0 {
            return Err(Error::Config(
                "training seed has the evaluation-partition bit set; pick a seed below 2^62".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub first_joint: f64,
    pub last_joint: f64,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Train `model` on `clips`, re-drawing the corruption of every clip each
/// epoch. Writes `metrics.csv` plus one checkpoint per stage into `out_dir`
/// and leaves the model in eval mode.
pub fn train(
    model: &AvModel,
    clips: &[Clip],
    spec: &SyntheticSpec,
    corr: &CorruptionConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    corr.validate()?;
    if clips.is_empty() {
        return Err(Error::Empty("train: no clips".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let (h, w) = (clips[0].video.h, clips[0].video.w);
    let patches = gen_patch_bank(corr.patch_bank_size, h / 2, w / 2, mix_seed(cfg.seed, 0x9a7c, 0));
    let noise_bank = make_babble_bank(spec, corr.noise_bank_size, mix_seed(cfg.seed, 0xba22, 0))?;
    let vocab = model.cfg.vocab();

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics, "step,stage,lr,l_ctc,l_att,l_joint")?;

    let mut optimizer = Adam::new(model.params());
    model.set_training(true);
    for (_, p) in model.params() {
        p.zero_grad();
    }

    let mut step = 0usize;
    let mut epoch_counter = 0u64;
    let mut first_joint = None;
    let mut last_joint = 0.0;
    let mut checkpoints = Vec::new();

    for stage in &cfg.stages {
        let pool: Vec<usize> = (0..clips.len())
            .filter(|&i| clips[i].tokens.len() <= stage.max_symbols)
            .collect();
        if pool.is_empty() {
            return Err(Error::Empty(format!(
                "train: stage {} admits no clips (max {} symbols)",
                stage.name, stage.max_symbols
            )));
        }
        for _ in 0..stage.epochs {
            epoch_counter += 1;
            let mut order = pool.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x0e0c, epoch_counter));
            order.shuffle(&mut rng);

            let mut batch_ctc = 0.0;
            let mut batch_att = 0.0;
            let mut in_batch = 0usize;
            for (pos, &ci) in order.iter().enumerate() {
                let clip = &clips[ci];
                let plan_seed = mix_seed(cfg.seed, epoch_counter, ci as u64);
                let plan = plan_corruption(plan_seed, clip.video.t, clip.audio.samples.len(), corr)?;
                let (cv, ca) = corrupt_pair(&clip.video, &clip.audio, &plan, &patches, &noise_bank)?;

                let labels = vocab.labels(&clip.tokens);
                let mut y_in = vec![vocab.sos()];
                y_in.extend(&labels);
                let mut y_out = labels.clone();
                y_out.push(vocab.eos());

                let (ctc_logits, att_logits, _) = model.forward(&cv, &ca, &y_in)?;
                let l_ctc = ctc_loss(&ctc_logits, &labels, vocab.blank())?;
                let l_att = att_logits.cross_entropy_mean(&y_out);
                let l_joint = joint_loss(&l_ctc, &l_att, cfg.lambda);
                batch_ctc += l_ctc.item();
                batch_att += l_att.item();
                backward(&l_joint.scale(1.0 / cfg.batch_size as f64))?;
                in_batch += 1;

                if in_batch == cfg.batch_size || pos + 1 == order.len() {
                    // A short trailing batch still uses the full-batch scale;
                    // its gradient is just proportionally smaller.
                    step += 1;
                    let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps);
                    clip_gradients(model.params(), cfg.clip_norm)?;
                    optimizer.step(model.params(), lr)?;
                    let mean_ctc = batch_ctc / in_batch as f64;
                    let mean_att = batch_att / in_batch as f64;
                    let mean_joint = cfg.lambda * mean_att + (1.0 - cfg.lambda) * mean_ctc;
                    writeln!(
                        metrics,
                        "{step},{},{lr},{mean_ctc},{mean_att},{mean_joint}",
                        stage.name
                    )?;
                    first_joint.get_or_insert(mean_joint);
                    last_joint = mean_joint;
                    batch_ctc = 0.0;
                    batch_att = 0.0;
                    in_batch = 0;
                }
            }
        }
        let ckpt = out_dir.join(format!("stage_{}.ckpt", stage.name));
        model.save(&ckpt)?;
        checkpoints.push(ckpt);
    }
    metrics.flush()?;

    let final_ckpt = out_dir.join("model.ckpt");
    model.save(&final_ckpt)?;
    checkpoints.push(final_ckpt);
    model.set_training(false);

    Ok(TrainReport {
        steps: step,
        first_joint: first_joint.unwrap_or(0.0),
        last_joint,
        metrics_path,
        checkpoints,
    })
}
