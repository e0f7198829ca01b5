//! Audio-visual recognizer with per-frame reliability scoring.
//!
//! Both streams pass through modality front-ends to frame-rate features,
//! get emphasized by learned reliability scores (f + f * s), are fused by
//! time-axis concatenation, and run through a Conformer encoder feeding a
//! CTC head and an attention decoder.

mod layers;

use std::cell::Cell;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use crate::corruption::{AudioClip, VideoClip};
use crate::kv::KvFile;
use crate::tensor::{concat, embedding_lookup, positional_encoding, load_checkpoint, save_checkpoint, Tensor};
use crate::{Error, Result};

pub use layers::{causal_mask, ParamSet};
use layers::{ConformerBlock, Conv1d, Conv2d, DecoderBlock, LayerNorm, Linear, ReliabilityScorer};

/// Token layout: CTC blank first, then the symbol inventory, then the
/// decoder's sentence delimiters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub symbols: usize,
}

impl Vocab {
    pub fn new(symbols: usize) -> Vocab {
        Vocab { symbols }
    }

    pub fn blank(&self) -> usize {
        0
    }

    /// Label token for symbol index `s` in 0..symbols.
    pub fn token(&self, s: usize) -> usize {
        s + 1
    }

    pub fn sos(&self) -> usize {
        self.symbols + 1
    }

    pub fn eos(&self) -> usize {
        self.symbols + 2
    }

    pub fn total(&self) -> usize {
        self.symbols + 3
    }

    /// Map a label token back to a symbol index, if it is one.
    pub fn symbol_of(&self, token: usize) -> Option<usize> {
        (token >= 1 && token <= self.symbols).then(|| token - 1)
    }

    pub fn labels(&self, symbols: &[usize]) -> Vec<usize> {
        symbols.iter().map(|&s| self.token(s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Concatenate the two streams along time (audio first, 2T x D).
    TimeConcat,
    /// Concatenate along features and project back to D (T x D).
    LinearConcat,
}

impl FusionKind {
    pub fn parse(s: &str) -> Result<FusionKind> {
        match s {
            "time_concat" => Ok(FusionKind::TimeConcat),
            "linear_concat" => Ok(FusionKind::LinearConcat),
            other => Err(Error::Config(format!("unknown fusion kind: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::TimeConcat => "time_concat",
            FusionKind::LinearConcat => "linear_concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Both,
    AudioOnly,
    VisualOnly,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "both" => Ok(Modality::Both),
            "audio_only" => Ok(Modality::AudioOnly),
            "visual_only" => Ok(Modality::VisualOnly),
            other => Err(Error::Config(format!("unknown modality: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::AudioOnly => "audio_only",
            Modality::VisualOnly => "visual_only",
        }
    }

    pub fn uses_audio(&self) -> bool {
        !matches!(self, Modality::VisualOnly)
    }

    pub fn uses_visual(&self) -> bool {
        !matches!(self, Modality::AudioOnly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    /// Relative-position clamp for encoder self-attention.
    pub max_rel: usize,
    /// Symbol inventory size (excluding blank / delimiters).
    pub vocab_size: usize,
    /// Channels of the three strided image convolutions.
    pub visual_channels: Vec<usize>,
    /// Strides of the waveform convolutions; the product must equal the
    /// samples-per-frame ratio so both streams land on the same frame rate.
    pub audio_strides: Vec<usize>,
    pub audio_channels: Vec<usize>,
    pub use_scoring: bool,
    pub fusion: FusionKind,
    pub modality: Modality,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            ff: 128,
            enc_layers: 3,
            dec_layers: 2,
            heads: 4,
            conv_kernel: 7,
            max_rel: 64,
            vocab_size: 8,
            visual_channels: vec![8, 16, 32],
            audio_strides: vec![4, 4, 5],
            audio_channels: vec![16, 32, 64],
            use_scoring: true,
            fusion: FusionKind::TimeConcat,
            modality: Modality::Both,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d ({}) must be a positive multiple of heads ({})",
                self.d, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.audio_strides.is_empty() || self.audio_strides.len() != self.audio_channels.len() {
            return Err(Error::Config("audio_strides and audio_channels must be non-empty and equal length".into()));
        }
        if self.visual_channels.len() != 3 {
            return Err(Error::Config("visual_channels must list exactly three stages".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        self.audio_strides.iter().product()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }

    pub fn from_kv(kv: &KvFile) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            d: kv.get_usize("d")?.unwrap_or(d.d),
            ff: kv.get_usize("ff")?.unwrap_or(d.ff),
            enc_layers: kv.get_usize("enc_layers")?.unwrap_or(d.enc_layers),
            dec_layers: kv.get_usize("dec_layers")?.unwrap_or(d.dec_layers),
            heads: kv.get_usize("heads")?.unwrap_or(d.heads),
            conv_kernel: kv.get_usize("conv_kernel")?.unwrap_or(d.conv_kernel),
            max_rel: kv.get_usize("max_rel")?.unwrap_or(d.max_rel),
            vocab_size: kv.get_usize("vocab_size")?.unwrap_or(d.vocab_size),
            visual_channels: kv.get_usize_list("visual_channels")?.unwrap_or(d.visual_channels),
            audio_strides: kv.get_usize_list("audio_strides")?.unwrap_or(d.audio_strides),
            audio_channels: kv.get_usize_list("audio_channels")?.unwrap_or(d.audio_channels),
            use_scoring: match kv.get("use_scoring") {
                None => d.use_scoring,
                Some("true") => true,
                Some("false") => false,
                Some(v) => return Err(Error::Config(format!("use_scoring: expected true/false, got {v}"))),
            },
            fusion: kv.get("fusion").map(FusionKind::parse).transpose()?.unwrap_or(d.fusion),
            modality: kv.get("modality").map(Modality::parse).transpose()?.unwrap_or(d.modality),
            seed: kv.get_usize("seed")?.map(|v| v as u64).unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("d", self.d);
        kv.set("ff", self.ff);
        kv.set("enc_layers", self.enc_layers);
        kv.set("dec_layers", self.dec_layers);
        kv.set("heads", self.heads);
        kv.set("conv_kernel", self.conv_kernel);
        kv.set("max_rel", self.max_rel);
        kv.set("vocab_size", self.vocab_size);
        kv.set("visual_channels", join(&self.visual_channels));
        kv.set("audio_strides", join(&self.audio_strides));
        kv.set("audio_channels", join(&self.audio_channels));
        kv.set("use_scoring", self.use_scoring);
        kv.set("fusion", self.fusion.name());
        kv.set("modality", self.modality.name());
        kv.set("seed", self.seed);
        kv
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Per-frame reliability scores produced during a forward pass.
pub struct ReliabilityTrace {
    /// [T, D] audio scores in (0, 1), when the audio stream is scored.
    pub s_audio: Option<Tensor>,
    /// [T, D] visual scores in (0, 1), when the visual stream is scored.
    pub s_visual: Option<Tensor>,
}

impl ReliabilityTrace {
    /// Per-frame mean over feature channels.
    pub fn frame_means(scores: &Tensor) -> Vec<f64> {
        let (t, d) = (scores.shape()[0], scores.shape()[1]);
        let data = scores.data();
        (0..t).map(|i| data[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64).collect()
    }
}

struct VisualFrontend {
    convs: Vec<Conv2d>,
    proj: Linear,
}

struct AudioFrontend {
    convs: Vec<Conv1d>,
    proj: Linear,
}

pub struct AvModel {
    pub cfg: ModelConfig,
    ps: ParamSet,
    training: Rc<Cell<bool>>,
    visual: Option<VisualFrontend>,
    audio: Option<AudioFrontend>,
    score_a: Option<ReliabilityScorer>,
    score_v: Option<ReliabilityScorer>,
    fuse_proj: Option<Linear>,
    encoder: Vec<ConformerBlock>,
    ctc_head: Linear,
    embed: Tensor,
    decoder: Vec<DecoderBlock>,
    dec_ln: LayerNorm,
    out_head: Linear,
}

impl AvModel {
    pub fn new(cfg: ModelConfig) -> Result<AvModel> {
        cfg.validate()?;
        let mut ps = ParamSet::new(cfg.seed);
        let training = Rc::new(Cell::new(true));
        let d = cfg.d;
        let vocab_total = cfg.vocab().total();

        let visual = cfg.modality.uses_visual().then(|| {
            let mut convs = Vec::new();
            let mut c_in = 1;
            for (i, &c_out) in cfg.visual_channels.iter().enumerate() {
                convs.push(Conv2d::new(&mut ps, &format!("vfront.conv{i}"), c_in, c_out, 3, 2, 1));
                c_in = c_out;
            }
            let proj = Linear::new(&mut ps, "vfront.proj", c_in, d);
            VisualFrontend { convs, proj }
        });
        let audio = cfg.modality.uses_audio().then(|| {
            let mut convs = Vec::new();
            let mut c_in = 1;
            for (i, (&stride, &c_out)) in cfg.audio_strides.iter().zip(&cfg.audio_channels).enumerate() {
                convs.push(Conv1d::new(&mut ps, &format!("afront.conv{i}"), c_in, c_out, stride, stride, 0));
                c_in = c_out;
            }
            let proj = Linear::new(&mut ps, "afront.proj", c_in, d);
            AudioFrontend { convs, proj }
        });
        let score_a = (cfg.use_scoring && audio.is_some())
            .then(|| ReliabilityScorer::new(&mut ps, "score_a", d, training.clone()));
        let score_v = (cfg.use_scoring && visual.is_some())
            .then(|| ReliabilityScorer::new(&mut ps, "score_v", d, training.clone()));
        let fuse_proj = (cfg.modality == Modality::Both && cfg.fusion == FusionKind::LinearConcat)
            .then(|| Linear::new(&mut ps, "fuse.proj", 2 * d, d));
        let encoder = (0..cfg.enc_layers)
            .map(|i| ConformerBlock::new(&mut ps, &format!("enc.{i}"), d, cfg.ff, cfg.heads, cfg.conv_kernel, cfg.max_rel))
            .collect();
        let ctc_head = Linear::new(&mut ps, "ctc_head", d, vocab_total);
        let embed = ps.weight("dec.embed", &[vocab_total, d], d);
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderBlock::new(&mut ps, &format!("dec.{i}"), d, cfg.ff, cfg.heads))
            .collect();
        let dec_ln = LayerNorm::new(&mut ps, "dec.out_ln", d);
        let out_head = Linear::new(&mut ps, "dec.out_head", d, vocab_total);

        Ok(AvModel {
            cfg,
            ps,
            training,
            visual,
            audio,
            score_a,
            score_v,
            fuse_proj,
            encoder,
            ctc_head,
            embed,
            decoder,
            dec_ln,
            out_head,
        })
    }

    pub fn set_training(&self, on: bool) {
        self.training.set(on);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.ps.params
    }

    pub fn num_params(&self) -> usize {
        self.ps.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Test hook: skip encoder self-attention so the temporal receptive
    /// field is limited to the convolutional paths.
    pub fn set_encoder_attention(&self, on: bool) {
        for b in &self.encoder {
            b.disable_attention.set(!on);
        }
    }

    fn visual_features(&self, video: &VideoClip) -> Result<Tensor> {
        let fe = self.visual.as_ref().expect("visual stream disabled");
        video.validate()?;
        let x = Tensor::new(&[video.t, 1, video.h, video.w], video.frames.clone());
        let mut h = x;
        for conv in &fe.convs {
            h = conv.forward(&h).relu();
        }
        Ok(fe.proj.forward(&h.mean_spatial()))
    }

    fn audio_features(&self, audio: &AudioClip) -> Result<Tensor> {
        let fe = self.audio.as_ref().expect("audio stream disabled");
        let spf = self.cfg.samples_per_frame();
        let s = audio.samples.len();
        if s == 0 || s % spf != 0 {
            return Err(Error::Sizing(format!(
                "waveform length {s} is not a positive multiple of {spf} samples per frame; pad or trim the clip"
            )));
        }
        let x = Tensor::new(&[s, 1], audio.samples.clone());
        let mut h = x;
        for conv in &fe.convs {
            h = conv.forward(&h).relu();
        }
        Ok(fe.proj.forward(&h))
    }

    /// Reliability emphasis: f + f * s elementwise.
    pub fn emphasize(feat: &Tensor, scores: &Tensor) -> Result<Tensor> {
        if feat.shape() != scores.shape() {
            return Err(Error::Sizing(format!(
                "emphasis shape mismatch: features {:?} vs scores {:?}",
                feat.shape(),
                scores.shape()
            )));
        }
        Ok(feat.add(&feat.hadamard(scores)))
    }

    /// Run front-ends, reliability scoring, fusion, and the encoder.
    /// Returns the T x D memory the CTC head and decoder consume.
    pub fn encode(&self, video: &VideoClip, audio: &AudioClip) -> Result<(Tensor, ReliabilityTrace)> {
        let fa = self.cfg.modality.uses_audio().then(|| self.audio_features(audio)).transpose()?;
        let fv = self.cfg.modality.uses_visual().then(|| self.visual_features(video)).transpose()?;
        if let (Some(a), Some(v)) = (&fa, &fv) {
            if a.shape()[0] != v.shape()[0] {
                return Err(Error::Sizing(format!(
                    "stream length mismatch: audio {} frames vs video {} frames",
                    a.shape()[0],
                    v.shape()[0]
                )));
            }
        }
        let s_audio = match (&self.score_a, &fa) {
            (Some(sc), Some(f)) => Some(sc.forward(f)),
            _ => None,
        };
        let s_visual = match (&self.score_v, &fv) {
            (Some(sc), Some(f)) => Some(sc.forward(f)),
            _ => None,
        };
        let ea = match (&fa, &s_audio) {
            (Some(f), Some(s)) => Some(Self::emphasize(f, s)?),
            (Some(f), None) => Some(f.clone()),
            _ => None,
        };
        let ev = match (&fv, &s_visual) {
            (Some(f), Some(s)) => Some(Self::emphasize(f, s)?),
            (Some(f), None) => Some(f.clone()),
            _ => None,
        };

        let (fused, t_out) = match (ea, ev) {
            (Some(a), Some(v)) => {
                let t = a.shape()[0];
                match self.cfg.fusion {
                    FusionKind::TimeConcat => (concat(&[a, v], 0), t),
                    FusionKind::LinearConcat => {
                        let cat = concat(&[a, v], 1);
                        (self.fuse_proj.as_ref().expect("fusion projection missing").forward(&cat), t)
                    }
                }
            }
            (Some(a), None) => {
                let t = a.shape()[0];
                (a, t)
            }
            (None, Some(v)) => {
                let t = v.shape()[0];
                (v, t)
            }
            (None, None) => unreachable!("at least one stream is always enabled"),
        };

        let mut h = fused;
        for block in &self.encoder {
            h = block.forward(&h);
        }
        let memory = if h.shape()[0] == t_out { h } else { h.slice(0, 0, t_out) };
        Ok((memory, ReliabilityTrace { s_audio, s_visual }))
    }

    /// CTC logits [T, vocab_total] over the encoder memory.
    pub fn ctc_logits(&self, memory: &Tensor) -> Tensor {
        self.ctc_head.forward(memory)
    }

    /// Decoder logits [J, vocab_total] for teacher-forced input tokens
    /// `y_in` (must start with the start-of-sequence token).
    pub fn decode_logits(&self, memory: &Tensor, y_in: &[usize]) -> Result<Tensor> {
        let vocab = self.cfg.vocab();
        if y_in.is_empty() || y_in[0] != vocab.sos() {
            return Err(Error::Config("decoder input must start with the start token".into()));
        }
        if let Some(&bad) = y_in.iter().find(|&&t| t >= vocab.total()) {
            return Err(Error::Config(format!("decoder token {bad} out of range")));
        }
        let j = y_in.len();
        let scale = (self.cfg.d as f64).sqrt();
        let mut x = embedding_lookup(&self.embed, y_in)
            .scale(scale)
            .add(&positional_encoding(j, self.cfg.d));
        let mask = causal_mask(j);
        for block in &self.decoder {
            x = block.forward(&x, memory, &mask);
        }
        Ok(self.out_head.forward(&self.dec_ln.forward(&x)))
    }

    /// Full pass: returns (ctc_logits [T, V], decoder logits [J, V], trace).
    pub fn forward(&self, video: &VideoClip, audio: &AudioClip, y_in: &[usize]) -> Result<(Tensor, Tensor, ReliabilityTrace)> {
        let (memory, trace) = self.encode(video, audio)?;
        let ctc = self.ctc_logits(&memory);
        let att = self.decode_logits(&memory, y_in)?;
        Ok((ctc, att, trace))
    }

    /// Checkpoint trainable parameters plus normalization running stats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self.ps.params.clone();
        for (name, buf) in &self.ps.buffers {
            let data = buf.borrow().clone();
            entries.push((name.clone(), Tensor::new(&[data.len()], data)));
        }
        save_checkpoint(path, &entries)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = load_checkpoint(path)?;
        let map: HashMap<String, Tensor> = loaded.into_iter().collect();
        for (name, t) in &self.ps.params {
            let src = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Sizing(format!(
                    "checkpoint parameter {name}: shape {:?} vs model {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.set_data(&src.data());
        }
        for (name, buf) in &self.ps.buffers {
            let src = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing buffer {name}")))?;
            let data = src.data();
            if data.len() != buf.borrow().len() {
                return Err(Error::Sizing(format!("checkpoint buffer {name}: length mismatch")));
            }
            *buf.borrow_mut() = data;
        }
        Ok(())
    }
}
