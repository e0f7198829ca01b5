//! Synthetic paired audio-visual dataset.
//!
//! Every vocabulary symbol carries its transcript through both streams
//! independently: a two-tone chord in the audio and a distinct glyph with an
//! open/close aperture animation in the video's mouth region. Corrupting one
//! stream therefore leaves the other individually recoverable, which is the
//! property the reliability-scored fusion exploits.

mod container;

pub use container::{read_tensor_file, write_tensor_file};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{AudioClip, Rect, VideoClip};
use crate::{mix_seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub frames_per_symbol: usize,
    pub sample_rate: usize,
    pub fps: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub height: usize,
    pub width: usize,
    pub mouth_region: Rect,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 8,
            frames_per_symbol: 4,
            sample_rate: 2000,
            fps: 25,
            min_symbols: 3,
            max_symbols: 6,
            height: 32,
            width: 32,
            mouth_region: Rect { x: 8, y: 14, w: 16, h: 10 },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn samples_per_frame(&self) -> usize {
        self.sample_rate / self.fps
    }

    /// The two chord frequencies carried by a symbol, well below Nyquist.
    pub fn symbol_freqs(&self, symbol: usize) -> (f64, f64) {
        let nyquist = self.sample_rate as f64 / 2.0;
        let lo = 0.12 * nyquist;
        let hi = 0.85 * nyquist;
        let step = (hi - lo) / (2 * self.vocab_size) as f64;
        (lo + step * (2 * symbol) as f64, lo + step * (2 * symbol + 1) as f64 + step / 2.0)
    }

    pub fn from_kv(kv: &crate::KvFile) -> Result<SyntheticSpec> {
        let d = SyntheticSpec::default();
        let mouth_region = match kv.get_usize_list("mouth_region")? {
            None => d.mouth_region,
            Some(v) if v.len() == 4 => Rect { x: v[0], y: v[1], w: v[2], h: v[3] },
            Some(v) => {
                return Err(Error::Config(format!("mouth_region needs 4 values (x, y, w, h), got {}", v.len())))
            }
        };
        let spec = SyntheticSpec {
            vocab_size: kv.get_usize("vocab_size")?.unwrap_or(d.vocab_size),
            frames_per_symbol: kv.get_usize("frames_per_symbol")?.unwrap_or(d.frames_per_symbol),
            sample_rate: kv.get_usize("sample_rate")?.unwrap_or(d.sample_rate),
            fps: kv.get_usize("fps")?.unwrap_or(d.fps),
            min_symbols: kv.get_usize("min_symbols")?.unwrap_or(d.min_symbols),
            max_symbols: kv.get_usize("max_symbols")?.unwrap_or(d.max_symbols),
            height: kv.get_usize("height")?.unwrap_or(d.height),
            width: kv.get_usize("width")?.unwrap_or(d.width),
            mouth_region,
            seed: kv.get_usize("seed")?.map(|v| v as u64).unwrap_or(d.seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_per_symbol < 2 {
            return Err(Error::Config("frames_per_symbol must be >= 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.sample_rate % self.fps != 0 {
            return Err(Error::Config(format!(
                "sample_rate {} must be a multiple of fps {}",
                self.sample_rate, self.fps
            )));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return Err(Error::Config("bad utterance length range".into()));
        }
        if self.mouth_region.x + self.mouth_region.w > self.width
            || self.mouth_region.y + self.mouth_region.h > self.height
        {
            return Err(Error::Config("mouth region outside frame".into()));
        }
        Ok(())
    }
}

/// One generated clip, in memory. `tokens` are symbol indices in
/// 0..vocab_size; the word form of symbol `i` is `s{i}`.
#[derive(Debug, Clone)]
pub struct Clip {
    pub clip_id: String,
    pub video: VideoClip,
    pub audio: AudioClip,
    pub tokens: Vec<usize>,
}

pub fn symbol_word(symbol: usize) -> String {
    format!("s{symbol}")
}

pub fn parse_transcript(text: &str, vocab_size: usize) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            w.strip_prefix('s')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&i| i < vocab_size)
                .ok_or_else(|| Error::Format(format!("bad transcript word: {w}")))
        })
        .collect()
}

pub fn transcript_text(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| symbol_word(t)).collect::<Vec<_>>().join(" ")
}

fn synth_audio(spec: &SyntheticSpec, tokens: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spf = spec.samples_per_frame();
    let samples_per_symbol = spec.frames_per_symbol * spf;
    let mut out = Vec::with_capacity(tokens.len() * samples_per_symbol);
    for &tok in tokens {
        let (f1, f2) = spec.symbol_freqs(tok);
        // Small seeded jitter per symbol instance.
        let f1 = f1 * (1.0 + rng.gen_range(-0.01..0.01));
        let f2 = f2 * (1.0 + rng.gen_range(-0.01..0.01));
        let amp = 0.35 * (1.0 + rng.gen_range(-0.1..0.1));
        let phase1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..samples_per_symbol {
            let t = i as f64 / spec.sample_rate as f64;
            // Raised-cosine envelope within the symbol.
            let env = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / samples_per_symbol as f64).cos();
            let v = amp
                * (0.2 + 0.8 * env)
                * ((std::f64::consts::TAU * f1 * t + phase1).sin() + (std::f64::consts::TAU * f2 * t + phase2).sin());
            out.push(v);
        }
    }
    out
}

fn synth_video(spec: &SyntheticSpec, tokens: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let m = spec.mouth_region;
    let t_total = tokens.len() * spec.frames_per_symbol;
    // Static textured background, per clip.
    let mut background = vec![0.0; h * w];
    for v in background.iter_mut() {
        *v = rng.gen_range(0.15..0.35);
    }
    let mut frames = Vec::with_capacity(t_total * h * w);
    for &tok in tokens {
        for f in 0..spec.frames_per_symbol {
            let mut frame = background.clone();
            // Aperture opens then closes across the symbol.
            let phase = (f as f64 + 0.5) / spec.frames_per_symbol as f64;
            let aperture = (std::f64::consts::PI * phase).sin();
            let open_rows = 1 + ((m.h - 1) as f64 * aperture).round() as usize;
            let row0 = m.y + (m.h - open_rows) / 2;
            // Glyph: bit pattern of the symbol across vertical thirds,
            // plus an orientation band so symbol 0 is distinct from background.
            let cells = 3usize;
            let cell_w = m.w / cells;
            for y in row0..row0 + open_rows {
                for x in m.x..m.x + m.w {
                    let cell = ((x - m.x) / cell_w.max(1)).min(cells - 1);
                    let on = (tok >> cell) & 1 == 1 || (tok + 1) % 4 == 0 && y == row0;
                    let shade = if on { 0.95 } else { 0.55 };
                    frame[y * w + x] = shade;
                }
            }
            frames.extend_from_slice(&frame);
        }
    }
    frames
}

/// Deterministically synthesize one paired clip from its seed.
pub fn synth_clip(spec: &SyntheticSpec, clip_id: &str, clip_seed: u64) -> Result<Clip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let n_symbols = rng.gen_range(spec.min_symbols..=spec.max_symbols);
    let tokens: Vec<usize> = (0..n_symbols).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
    synth_clip_with_tokens(spec, clip_id, clip_seed, &tokens)
}

/// Same as [`synth_clip`] with a caller-chosen transcript.
pub fn synth_clip_with_tokens(spec: &SyntheticSpec, clip_id: &str, clip_seed: u64, tokens: &[usize]) -> Result<Clip> {
    spec.validate()?;
    if tokens.iter().any(|&t| t >= spec.vocab_size) {
        return Err(Error::Config("transcript token outside vocab".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(clip_seed, 0xc11b, 1));
    let audio = synth_audio(spec, tokens, &mut rng);
    let frames = synth_video(spec, tokens, &mut rng);
    let t = tokens.len() * spec.frames_per_symbol;
    Ok(Clip {
        clip_id: clip_id.to_string(),
        video: VideoClip {
            frames,
            t,
            h: spec.height,
            w: spec.width,
            mouth_region: spec.mouth_region,
            fps: spec.fps as f64,
        },
        audio: AudioClip {
            samples: audio,
            sample_rate: spec.sample_rate,
        },
        tokens: tokens.to_vec(),
    })
}

/// Generate `n_clips` in memory, deterministic per spec seed.
pub fn generate_in_memory(spec: &SyntheticSpec, n_clips: usize) -> Result<Vec<Clip>> {
    if n_clips == 0 {
        return Err(Error::Config("n_clips must be >= 1".into()));
    }
    (0..n_clips)
        .map(|i| synth_clip(spec, &format!("clip{i:05}"), mix_seed(spec.seed, 0xda7a, i as u64)))
        .collect()
}

/// Babble: a power-normalized sum of `k_voices` random synthetic
/// utterances, tiled/truncated to `len` samples. RMS is exactly 1.
pub fn make_babble(spec: &SyntheticSpec, k_voices: usize, len: usize, seed: u64) -> Result<Vec<f64>> {
    if k_voices < 3 {
        return Err(Error::Config(format!("k_voices must be >= 3, got {k_voices}")));
    }
    let mut mix = vec![0.0; len];
    for v in 0..k_voices {
        let voice_seed = mix_seed(seed, 0xbabb1e, v as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(voice_seed);
        let n_symbols = rng.gen_range(spec.min_symbols..=spec.max_symbols);
        let tokens: Vec<usize> = (0..n_symbols).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let wave = synth_audio(spec, &tokens, &mut rng);
        let offset = rng.gen_range(0..wave.len());
        for i in 0..len {
            mix[i] += wave[(offset + i) % wave.len()];
        }
    }
    let rms = (mix.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    if rms <= 0.0 {
        return Err(Error::Infeasible("degenerate babble mix".into()));
    }
    for v in &mut mix {
        *v /= rms;
    }
    Ok(mix)
}

/// Build the standard babble bank for a spec: `n` waveforms long enough to
/// cover the longest utterance.
pub fn make_babble_bank(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let len = spec.max_symbols * spec.frames_per_symbol * spec.samples_per_frame();
    (0..n).map(|i| make_babble(spec, 5, len, mix_seed(seed, 0xba22, i as u64))).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub video: String,
    pub audio: String,
    pub transcript: String,
    pub t: usize,
    pub s: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub spec: SyntheticSpec,
    pub entries: Vec<ManifestEntry>,
}

/// Generate the dataset on disk: spec.json, manifest.jsonl, and one AVT1
/// file per stream per clip. Deterministic per spec seed; clips are written
/// in parallel but the manifest order is canonical.
pub fn generate_dataset(spec: &SyntheticSpec, n_clips: usize, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if n_clips == 0 {
        return Err(Error::Config("n_clips must be >= 1".into()));
    }
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir)?;

    let entries: Vec<ManifestEntry> = (0..n_clips)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let clip_id = format!("clip{i:05}");
            let clip = synth_clip(spec, &clip_id, mix_seed(spec.seed, 0xda7a, i as u64))?;
            let video_rel = format!("clips/{clip_id}_video.avt");
            let audio_rel = format!("clips/{clip_id}_audio.avt");
            write_tensor_file(
                &out_dir.join(&video_rel),
                &[clip.video.t, clip.video.h, clip.video.w, 1],
                &clip.video.frames,
            )?;
            write_tensor_file(&out_dir.join(&audio_rel), &[clip.audio.samples.len()], &clip.audio.samples)?;
            Ok(ManifestEntry {
                clip_id,
                video: video_rel,
                audio: audio_rel,
                transcript: transcript_text(&clip.tokens),
                t: clip.video.t,
                s: clip.audio.samples.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    std::fs::write(out_dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    let manifest_text: String = entries
        .iter()
        .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
        .collect::<std::result::Result<String, _>>()?;
    std::fs::write(out_dir.join("manifest.jsonl"), manifest_text)?;

    Ok(Manifest {
        root: out_dir.to_path_buf(),
        spec: spec.clone(),
        entries,
    })
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let spec: SyntheticSpec = serde_json::from_str(&std::fs::read_to_string(root.join("spec.json"))?)?;
    let mut entries = Vec::new();
    for line in std::fs::read_to_string(root.join("manifest.jsonl"))?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str::<ManifestEntry>(line)?);
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        spec,
        entries,
    })
}

pub fn load_clip(manifest: &Manifest, entry: &ManifestEntry) -> Result<Clip> {
    let (vshape, frames) = read_tensor_file(&manifest.root.join(&entry.video))?;
    if vshape.len() != 4 || vshape[0] != entry.t {
        return Err(Error::Format(format!("{}: bad video tensor shape {:?}", entry.video, vshape)));
    }
    let (ashape, samples) = read_tensor_file(&manifest.root.join(&entry.audio))?;
    if ashape.len() != 1 || ashape[0] != entry.s {
        return Err(Error::Format(format!("{}: bad audio tensor shape {:?}", entry.audio, ashape)));
    }
    Ok(Clip {
        clip_id: entry.clip_id.clone(),
        video: VideoClip {
            frames,
            t: vshape[0],
            h: vshape[1],
            w: vshape[2],
            mouth_region: manifest.spec.mouth_region,
            fps: manifest.spec.fps as f64,
        },
        audio: AudioClip {
            samples,
            sample_rate: manifest.spec.sample_rate,
        },
        tokens: parse_transcript(&entry.transcript, manifest.spec.vocab_size)?,
    })
}
