//! Deterministic audio-visual stream corruption: occlusion patches over the
//! mouth region, Gaussian blur, additive pixel noise, and SNR-controlled
//! babble mixing, all under a seed-derived chunk schedule.
//!
//! A [`CorruptionPlan`] is a pure function of `(seed, T, S, cfg)`; applying a
//! plan never consults a random source, so the same plan always produces the
//! same corrupted pair.

mod image;
mod patch;

pub use image::{add_pixel_noise, gaussian_blur, gaussian_noise_field};
pub use patch::{apply_occlusion, gen_patch_bank, OcclusionPatch};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{mix_seed, Error, KvFile, Result};

/// Axis-aligned rectangle in frame coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Grayscale video: `frames` is T*H*W row-major, pixel values in [0, 1].
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Vec<f64>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub mouth_region: Rect,
    pub fps: f64,
}

impl VideoClip {
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.frames[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.frames.len() != self.t * self.h * self.w {
            return Err(Error::Sizing(format!(
                "video: {} values for T={} H={} W={}",
                self.frames.len(),
                self.t,
                self.h,
                self.w
            )));
        }
        if self.mouth_region.x + self.mouth_region.w > self.w || self.mouth_region.y + self.mouth_region.h > self.h {
            return Err(Error::Sizing("mouth region outside frame bounds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub patch_id: usize,
    /// Patch center as a fraction of the dilated mouth region, so the plan
    /// stays independent of frame geometry.
    pub pos_u: f64,
    pub pos_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelNoiseSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSegment {
    pub start_sample: usize,
    pub end_sample: usize,
    pub noise_id: usize,
    pub snr_db: f64,
}

/// Seed-derived corruption schedule for one paired clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub seed: u64,
    pub occlusion_segments: Vec<OcclusionSegment>,
    pub blur_segments: Vec<BlurSegment>,
    pub pixelnoise_segments: Vec<PixelNoiseSegment>,
    pub audio_segments: Vec<AudioSegment>,
}

impl CorruptionPlan {
    pub fn is_empty(&self) -> bool {
        self.occlusion_segments.is_empty()
            && self.blur_segments.is_empty()
            && self.pixelnoise_segments.is_empty()
            && self.audio_segments.is_empty()
    }

    pub fn visual_corrupted_frames(&self, t: usize) -> Vec<bool> {
        let mut mask = vec![false; t];
        for s in &self.occlusion_segments {
            mask[s.start_frame..s.end_frame].iter_mut().for_each(|m| *m = true);
        }
        for s in &self.blur_segments {
            mask[s.start_frame..s.end_frame].iter_mut().for_each(|m| *m = true);
        }
        for s in &self.pixelnoise_segments {
            mask[s.start_frame..s.end_frame].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Per-frame audio corruption mask, given samples-per-frame.
    pub fn audio_corrupted_frames(&self, t: usize, samples_per_frame: usize) -> Vec<bool> {
        let mut mask = vec![false; t];
        for s in &self.audio_segments {
            let f0 = s.start_sample / samples_per_frame;
            let f1 = (s.end_sample + samples_per_frame - 1) / samples_per_frame;
            for f in f0..f1.min(t) {
                mask[f] = true;
            }
        }
        mask
    }
}

/// Which corruption families the scheduler may draw. Used to build the
/// occlusion-only / noise-only / both / clean test conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VisualCondition {
    Clean,
    Occlusion,
    Noise,
    Both,
}

impl VisualCondition {
    pub fn parse(s: &str) -> Result<VisualCondition> {
        match s {
            "clean" => Ok(VisualCondition::Clean),
            "occlusion" => Ok(VisualCondition::Occlusion),
            "noise" => Ok(VisualCondition::Noise),
            "both" => Ok(VisualCondition::Both),
            _ => Err(Error::Config(format!("unknown visual condition: {s}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VisualCondition::Clean => "clean",
            VisualCondition::Occlusion => "occlusion",
            VisualCondition::Noise => "noise",
            VisualCondition::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub max_occurrences: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub p_occlusion: f64,
    pub p_blur: f64,
    pub p_noise: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub max_variance: f64,
    pub snr_set: Vec<f64>,
    pub patch_bank_size: usize,
    pub noise_bank_size: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            max_occurrences: 3,
            ratio_min: 0.3,
            ratio_max: 0.5,
            p_occlusion: 0.8,
            p_blur: 0.3,
            p_noise: 0.3,
            sigma_min: 0.1,
            sigma_max: 2.0,
            max_variance: 0.2,
            snr_set: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            patch_bank_size: 8,
            noise_bank_size: 4,
        }
    }
}

impl CorruptionConfig {
    pub fn from_kv(kv: &KvFile) -> Result<CorruptionConfig> {
        let d = CorruptionConfig::default();
        let cfg = CorruptionConfig {
            max_occurrences: kv.get_usize("max_occurrences")?.unwrap_or(d.max_occurrences),
            ratio_min: kv.get_f64("ratio_min")?.unwrap_or(d.ratio_min),
            ratio_max: kv.get_f64("ratio_max")?.unwrap_or(d.ratio_max),
            p_occlusion: kv.get_f64("p_occlusion")?.unwrap_or(d.p_occlusion),
            p_blur: kv.get_f64("p_blur")?.unwrap_or(d.p_blur),
            p_noise: kv.get_f64("p_noise")?.unwrap_or(d.p_noise),
            sigma_min: kv.get_f64("sigma_min")?.unwrap_or(d.sigma_min),
            sigma_max: kv.get_f64("sigma_max")?.unwrap_or(d.sigma_max),
            max_variance: kv.get_f64("max_variance")?.unwrap_or(d.max_variance),
            snr_set: kv.get_f64_list("snr_set")?.unwrap_or(d.snr_set),
            patch_bank_size: kv.get_usize("patch_bank_size")?.unwrap_or(d.patch_bank_size),
            noise_bank_size: kv.get_usize("noise_bank_size")?.unwrap_or(d.noise_bank_size),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_occurrences == 0 {
            return Err(Error::Config("max_occurrences must be >= 1".into()));
        }
        if !(0.0 < self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max < 1.0) {
            return Err(Error::Config(format!(
                "ratio range [{}, {}] must lie in (0, 1)",
                self.ratio_min, self.ratio_max
            )));
        }
        for (k, p) in [
            ("p_occlusion", self.p_occlusion),
            ("p_blur", self.p_blur),
            ("p_noise", self.p_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{k} must be in [0, 1], got {p}")));
            }
        }
        // An empty snr_set is valid and means clean audio.
        Ok(())
    }

    /// Restrict the visual corruption families to a test condition.
    pub fn with_visual_condition(&self, cond: VisualCondition) -> CorruptionConfig {
        let mut cfg = self.clone();
        match cond {
            VisualCondition::Clean => {
                cfg.p_occlusion = 0.0;
                cfg.p_blur = 0.0;
                cfg.p_noise = 0.0;
            }
            VisualCondition::Occlusion => {
                cfg.p_blur = 0.0;
                cfg.p_noise = 0.0;
            }
            VisualCondition::Noise => {
                cfg.p_occlusion = 0.0;
            }
            VisualCondition::Both => {}
        }
        cfg
    }

    /// Force one SNR level for test grids.
    pub fn with_snr(&self, snr_db: Option<f64>) -> CorruptionConfig {
        let mut cfg = self.clone();
        match snr_db {
            Some(s) => cfg.snr_set = vec![s],
            None => cfg.snr_set.clear(), // clean audio
        }
        cfg
    }
}

/// Draw the chunk schedule for one corruption family: the stream is evenly
/// divided into N parts and each part gets a span covering a fraction
/// t ∈ [ratio_min, ratio_max] of it, at a uniform offset.
fn draw_segments(
    rng: &mut ChaCha8Rng,
    len: usize,
    max_occurrences: usize,
    ratio_min: f64,
    ratio_max: f64,
) -> Vec<(usize, usize)> {
    let n = rng.gen_range(1..=max_occurrences);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b0 = i * len / n;
        let b1 = (i + 1) * len / n;
        let div_len = b1 - b0;
        let t = rng.gen_range(ratio_min..=ratio_max);
        let lo = (ratio_min * div_len as f64).ceil() as usize;
        let hi = ((ratio_max * div_len as f64).floor() as usize).max(1);
        let span = ((t * div_len as f64).floor() as usize).clamp(lo.max(1), hi);
        let start = b0 + rng.gen_range(0..=(div_len - span));
        out.push((start, start + span));
    }
    out
}

/// Build the deterministic corruption schedule for a clip of `t_frames`
/// video frames and `s_samples` audio samples.
pub fn plan_corruption(seed: u64, t_frames: usize, s_samples: usize, cfg: &CorruptionConfig) -> Result<CorruptionPlan> {
    cfg.validate()?;
    // Every even division must be able to hold a span whose fraction stays
    // within the ratio range, which needs at least 2 frames per division.
    if t_frames < 2 * cfg.max_occurrences {
        return Err(Error::Sizing(format!(
            "T={t_frames} too short for {} corruption divisions",
            cfg.max_occurrences
        )));
    }
    if s_samples < 2 * cfg.max_occurrences {
        return Err(Error::Sizing(format!(
            "S={s_samples} too short for {} corruption divisions",
            cfg.max_occurrences
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut occlusion_segments = Vec::new();
    if rng.gen_range(0.0..1.0) < cfg.p_occlusion {
        for (start, end) in draw_segments(&mut rng, t_frames, cfg.max_occurrences, cfg.ratio_min, cfg.ratio_max) {
            occlusion_segments.push(OcclusionSegment {
                start_frame: start,
                end_frame: end,
                patch_id: rng.gen_range(0..cfg.patch_bank_size),
                pos_u: rng.gen_range(0.0..1.0),
                pos_v: rng.gen_range(0.0..1.0),
            });
        }
    }

    let mut blur_segments = Vec::new();
    if rng.gen_range(0.0..1.0) < cfg.p_blur {
        for (start, end) in draw_segments(&mut rng, t_frames, cfg.max_occurrences, cfg.ratio_min, cfg.ratio_max) {
            blur_segments.push(BlurSegment {
                start_frame: start,
                end_frame: end,
                sigma: rng.gen_range(cfg.sigma_min..=cfg.sigma_max),
            });
        }
    }

    let mut pixelnoise_segments = Vec::new();
    if rng.gen_range(0.0..1.0) < cfg.p_noise {
        for (start, end) in draw_segments(&mut rng, t_frames, cfg.max_occurrences, cfg.ratio_min, cfg.ratio_max) {
            let u: f64 = rng.gen_range(0.0..1.0);
            pixelnoise_segments.push(PixelNoiseSegment {
                start_frame: start,
                end_frame: end,
                variance: (1.0 - u) * cfg.max_variance, // in (0, max_variance]
            });
        }
    }

    // Audio chunks mirror the video scheduler on the sample axis; babble is
    // always scheduled when an SNR set is configured.
    let mut audio_segments = Vec::new();
    if !cfg.snr_set.is_empty() {
        for (start, end) in draw_segments(&mut rng, s_samples, cfg.max_occurrences, cfg.ratio_min, cfg.ratio_max) {
            audio_segments.push(AudioSegment {
                start_sample: start,
                end_sample: end,
                noise_id: rng.gen_range(0..cfg.noise_bank_size),
                snr_db: cfg.snr_set[rng.gen_range(0..cfg.snr_set.len())],
            });
        }
    }

    Ok(CorruptionPlan {
        seed,
        occlusion_segments,
        blur_segments,
        pixelnoise_segments,
        audio_segments,
    })
}

/// Mix `noise` into `signal` over `span` at the requested SNR, measured with
/// mean-square power over the span only. Samples outside the span are
/// untouched.
pub fn mix_at_snr(signal: &AudioClip, noise: &[f64], snr_db: f64, span: std::ops::Range<usize>) -> Result<AudioClip> {
    if span.end > signal.samples.len() || span.start >= span.end {
        return Err(Error::Sizing(format!(
            "span {span:?} outside signal of {} samples",
            signal.samples.len()
        )));
    }
    let n = span.end - span.start;
    if noise.len() < n {
        return Err(Error::Sizing(format!("noise of {} samples shorter than span of {n}", noise.len())));
    }
    let p_sig: f64 = signal.samples[span.clone()].iter().map(|x| x * x).sum::<f64>() / n as f64;
    let p_noise: f64 = noise[..n].iter().map(|x| x * x).sum::<f64>() / n as f64;
    if p_sig <= 0.0 {
        return Err(Error::Infeasible("zero-power signal over span".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::Infeasible("zero-power noise over span".into()));
    }
    let gain = (p_sig / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out = signal.clone();
    for (i, s) in span.enumerate() {
        out.samples[s] += gain * noise[i];
    }
    Ok(out)
}

/// Apply every segment of `plan` to the paired clip. Video and audio
/// schedules are independent, so simultaneous corruption of both streams
/// happens whenever their segments overlap in time.
pub fn corrupt_pair(
    video: &VideoClip,
    audio: &AudioClip,
    plan: &CorruptionPlan,
    patches: &[OcclusionPatch],
    noise_bank: &[Vec<f64>],
) -> Result<(VideoClip, AudioClip)> {
    video.validate()?;
    let mut v = video.clone();
    let frame_px = v.h * v.w;

    for seg in &plan.occlusion_segments {
        let patch = patches
            .get(seg.patch_id)
            .ok_or_else(|| Error::MissingId(format!("patch {}", seg.patch_id)))?;
        // Center sampled from the mouth region dilated by half the patch
        // size, so direct covers and near misses both occur.
        let m = &v.mouth_region;
        let dx0 = m.x as f64 - patch.w as f64 / 2.0;
        let dx1 = (m.x + m.w) as f64 + patch.w as f64 / 2.0;
        let dy0 = m.y as f64 - patch.h as f64 / 2.0;
        let dy1 = (m.y + m.h) as f64 + patch.h as f64 / 2.0;
        let cx = dx0 + seg.pos_u * (dx1 - dx0);
        let cy = dy0 + seg.pos_v * (dy1 - dy0);
        for f in seg.start_frame..seg.end_frame.min(v.t) {
            let frame = &mut v.frames[f * frame_px..(f + 1) * frame_px];
            apply_occlusion(frame, video.h, video.w, patch, cx, cy)?;
        }
    }

    for seg in &plan.blur_segments {
        for f in seg.start_frame..seg.end_frame.min(v.t) {
            let blurred = gaussian_blur(v.frame(f), v.h, v.w, seg.sigma)?;
            v.frame_mut(f).copy_from_slice(&blurred);
        }
    }

    for (si, seg) in plan.pixelnoise_segments.iter().enumerate() {
        for f in seg.start_frame..seg.end_frame.min(v.t) {
            let seed = mix_seed(plan.seed, 0x707c + si as u64, f as u64);
            let noisy = add_pixel_noise(v.frame(f), seg.variance, seed)?;
            v.frame_mut(f).copy_from_slice(&noisy);
        }
    }

    let mut a = audio.clone();
    for seg in &plan.audio_segments {
        let noise = noise_bank
            .get(seg.noise_id)
            .ok_or_else(|| Error::MissingId(format!("noise {}", seg.noise_id)))?;
        a = mix_at_snr(&a, noise, seg.snr_db, seg.start_sample..seg.end_sample)?;
    }

    Ok((v, a))
}
