//! Decoding: add-k smoothed n-gram language model, CTC prefix scoring, and
//! a length-synchronous beam search that mixes attention, CTC, and LM
//! scores as combined = alpha*att + (1-alpha)*ctc + beta*lm (log domain).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::transcript_text;
use crate::model::{AvModel, Vocab};
use crate::tensor::Tensor;
use crate::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Add-k smoothed n-gram model over label tokens plus the end token.
/// Contexts are padded with the start token; every conditional distribution
/// sums to one by construction.
#[derive(Debug, Clone)]
pub struct NgramLm {
    pub order: usize,
    pub add_k: f64,
    /// Symbol inventory size; predictable tokens are 1..=symbols plus eos.
    pub symbols: usize,
    counts: HashMap<Vec<usize>, HashMap<usize, u64>>,
    totals: HashMap<Vec<usize>, u64>,
}

/// On-disk form: JSON-friendly list of (context, event counts) records,
/// sorted for stable output.
#[derive(Serialize, Deserialize)]
struct LmFile {
    order: usize,
    add_k: f64,
    symbols: usize,
    records: Vec<(Vec<usize>, Vec<(usize, u64)>)>,
}

/// Build an LM from transcripts given as label-token sequences (no
/// delimiters; sos padding and the eos event are added internally).
pub fn train_ngram_lm(transcripts: &[Vec<usize>], order: usize, add_k: f64, vocab: &Vocab) -> Result<NgramLm> {
    if transcripts.is_empty() {
        return Err(Error::Empty("train_ngram_lm: empty corpus".into()));
    }
    if order < 1 {
        return Err(Error::Config("train_ngram_lm: order must be >= 1".into()));
    }
    if !(add_k > 0.0) {
        return Err(Error::Config("train_ngram_lm: add_k must be positive".into()));
    }
    let mut lm = NgramLm {
        order,
        add_k,
        symbols: vocab.symbols,
        counts: HashMap::new(),
        totals: HashMap::new(),
    };
    for seq in transcripts {
        if let Some(&bad) = seq.iter().find(|&&t| vocab.symbol_of(t).is_none()) {
            return Err(Error::Config(format!("train_ngram_lm: token {bad} is not a symbol label")));
        }
        let mut events: Vec<usize> = seq.clone();
        events.push(vocab.eos());
        for (i, &tok) in events.iter().enumerate() {
            let ctx = lm.context_at(seq, i, vocab);
            *lm.counts.entry(ctx.clone()).or_default().entry(tok).or_insert(0) += 1;
            *lm.totals.entry(ctx).or_insert(0) += 1;
        }
    }
    Ok(lm)
}

impl NgramLm {
    fn context_at(&self, history: &[usize], pos: usize, vocab: &Vocab) -> Vec<usize> {
        let need = self.order - 1;
        let mut ctx = Vec::with_capacity(need);
        for j in pos.saturating_sub(need)..pos {
            ctx.push(history[j]);
        }
        while ctx.len() < need {
            ctx.insert(0, vocab.sos());
        }
        ctx
    }

    /// Number of predictable event types (symbols plus eos).
    fn event_types(&self) -> f64 {
        (self.symbols + 1) as f64
    }

    /// log p(token | last order-1 tokens of `history`). `token` must be a
    /// symbol label or eos.
    pub fn log_prob(&self, history: &[usize], token: usize, vocab: &Vocab) -> f64 {
        let ctx = self.context_at(history, history.len(), vocab);
        let count = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(&token).copied())
            .unwrap_or(0) as f64;
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        ((count + self.add_k) / (total + self.add_k * self.event_types())).ln()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut records: Vec<(Vec<usize>, Vec<(usize, u64)>)> = self
            .counts
            .iter()
            .map(|(ctx, events)| {
                let mut ev: Vec<(usize, u64)> = events.iter().map(|(&t, &c)| (t, c)).collect();
                ev.sort_unstable();
                (ctx.clone(), ev)
            })
            .collect();
        records.sort();
        let file = LmFile { order: self.order, add_k: self.add_k, symbols: self.symbols, records };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<NgramLm> {
        let file: LmFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut counts: HashMap<Vec<usize>, HashMap<usize, u64>> = HashMap::new();
        let mut totals = HashMap::new();
        for (ctx, events) in file.records {
            let total: u64 = events.iter().map(|&(_, c)| c).sum();
            counts.insert(ctx.clone(), events.into_iter().collect());
            totals.insert(ctx, total);
        }
        Ok(NgramLm { order: file.order, add_k: file.add_k, symbols: file.symbols, counts, totals })
    }

    /// log p of a full sequence of label tokens including the final eos event.
    pub fn sequence_log_prob(&self, tokens: &[usize], vocab: &Vocab) -> f64 {
        let mut total = 0.0;
        for i in 0..tokens.len() {
            total += self.log_prob(&tokens[..i], tokens[i], vocab);
        }
        total + self.log_prob(tokens, vocab.eos(), vocab)
    }
}

/// Prefix probabilities over CTC frame posteriors, recomputed per query via
/// a DP over (frame, matched prefix length, blank/non-blank last frame).
pub struct CtcPrefixScorer {
    logp: Vec<f64>,
    t: usize,
    v: usize,
    blank: usize,
}

impl CtcPrefixScorer {
    pub fn new(ctc_logits: &Tensor, blank: usize) -> Result<CtcPrefixScorer> {
        if ctc_logits.shape().len() != 2 {
            return Err(Error::Shape {
                op: "ctc_prefix_scorer",
                detail: format!("logits must be [T, V], got {:?}", ctc_logits.shape()),
            });
        }
        let (t, v) = (ctc_logits.shape()[0], ctc_logits.shape()[1]);
        if blank >= v {
            return Err(Error::Config(format!("blank {blank} outside vocabulary of {v}")));
        }
        let raw = ctc_logits.data();
        let mut logp = vec![0.0; t * v];
        for ti in 0..t {
            let row = &raw[ti * v..(ti + 1) * v];
            let m = row.iter().cloned().fold(NEG_INF, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for k in 0..v {
                logp[ti * v + k] = row[k] - lse;
            }
        }
        Ok(CtcPrefixScorer { logp, t, v, blank })
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.logp[t * self.v + k]
    }

    /// Runs the DP; returns per-frame mass entering the fully-matched state
    /// (for the prefix probability) and the final matched-state scores
    /// (for the complete-sequence probability).
    fn run(&self, prefix: &[usize]) -> Result<(f64, f64)> {
        if let Some(&bad) = prefix.iter().find(|&&c| c >= self.v || c == self.blank) {
            return Err(Error::Config(format!("ctc prefix token {bad} invalid")));
        }
        let n = prefix.len();
        if n == 0 {
            let all_blank: f64 = (0..self.t).map(|t| self.lp(t, self.blank)).sum();
            return Ok((0.0, all_blank));
        }
        // state[i][0]: collapsed output is prefix[..i], last frame blank (or
        // nothing emitted yet for i=0); state[i][1]: last frame is prefix[i-1].
        let mut cur = vec![NEG_INF; 2 * (n + 1)];
        let mut entered_total = NEG_INF;
        cur[0] = 0.0; // before any frame: nothing emitted
        for t in 0..self.t {
            let mut next = vec![NEG_INF; 2 * (n + 1)];
            for i in 0..=n {
                let here = logsumexp2(cur[2 * i], cur[2 * i + 1]);
                if here == NEG_INF && cur[2 * i] == NEG_INF && cur[2 * i + 1] == NEG_INF {
                    continue;
                }
                // Blank keeps the matched length.
                next[2 * i] = logsumexp2(next[2 * i], here + self.lp(t, self.blank));
                if i > 0 {
                    // Repeating the last emitted symbol also keeps it.
                    next[2 * i + 1] = logsumexp2(next[2 * i + 1], cur[2 * i + 1] + self.lp(t, prefix[i - 1]));
                }
                if i < n {
                    // Advancing needs a blank gap between equal neighbors.
                    let from = if i > 0 && prefix[i] == prefix[i - 1] {
                        cur[2 * i]
                    } else {
                        here
                    };
                    let adv = from + self.lp(t, prefix[i]);
                    next[2 * i + 2 + 1] = logsumexp2(next[2 * i + 2 + 1], adv);
                    if i + 1 == n {
                        entered_total = logsumexp2(entered_total, adv);
                    }
                }
            }
            cur = next;
        }
        let complete = logsumexp2(cur[2 * n], cur[2 * n + 1]);
        Ok((entered_total, complete))
    }

    /// log p(the collapsed output begins with `prefix`).
    pub fn prefix_log_prob(&self, prefix: &[usize]) -> Result<f64> {
        Ok(self.run(prefix)?.0)
    }

    /// log p(the collapsed output is exactly `prefix`).
    pub fn complete_log_prob(&self, prefix: &[usize]) -> Result<f64> {
        Ok(self.run(prefix)?.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Attention weight; CTC gets 1 - alpha.
    pub alpha: f64,
    /// Language-model weight.
    pub beta: f64,
    pub max_len: usize,
    pub normalize_by_length: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 8,
            alpha: 0.9,
            beta: 0.3,
            max_len: 12,
            normalize_by_length: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Label tokens, without delimiters.
    pub tokens: Vec<usize>,
    pub score_att: f64,
    pub score_ctc: f64,
    pub score_lm: f64,
    pub combined: f64,
    pub completed: bool,
}

/// Weighted term that drops zero-weight components entirely, so an
/// infinitely bad score under a disabled component cannot poison the sum
/// (0 * -inf is NaN).
fn weighted(w: f64, score: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * score
    }
}

impl Hypothesis {
    fn combine(&mut self, alpha: f64, beta: f64) {
        self.combined =
            weighted(alpha, self.score_att) + weighted(1.0 - alpha, self.score_ctc) + weighted(beta, self.score_lm);
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub best: Hypothesis,
    /// False when no hypothesis reached eos within max_len and the best
    /// partial hypothesis is returned instead.
    pub reached_eos: bool,
}

fn rank_key(h: &Hypothesis) -> (f64, Vec<usize>) {
    (h.combined, h.tokens.clone())
}

fn sort_hyps(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        let (ka, kb) = (rank_key(a), rank_key(b));
        kb.0.partial_cmp(&ka.0)
            .expect("non-finite combined score")
            .then_with(|| ka.1.cmp(&kb.1))
    });
}

/// Length-synchronous beam search over decoder steps. The model and LM are
/// read-only; `memory` and `ctc_logits` come from one encode of the clip.
pub fn beam_search(
    model: &AvModel,
    memory: &Tensor,
    ctc_logits: &Tensor,
    lm: Option<&NgramLm>,
    cfg: &DecodeConfig,
) -> Result<DecodeOutcome> {
    cfg.validate()?;
    let vocab = model.cfg.vocab();
    let scorer = CtcPrefixScorer::new(ctc_logits, vocab.blank())?;
    let lm_score = |history: &[usize], token: usize| -> f64 {
        match lm {
            Some(m) if cfg.beta != 0.0 => m.log_prob(history, token, &vocab),
            _ => 0.0,
        }
    };

    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        score_att: 0.0,
        score_ctc: 0.0,
        score_lm: 0.0,
        combined: 0.0,
        completed: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    // One extra round so hypotheses of exactly max_len tokens still get
    // their end-of-sequence scoring.
    for _ in 0..=cfg.max_len {
        let mut expanded: Vec<Hypothesis> = Vec::new();
        for hyp in &active {
            let mut y_in = vec![vocab.sos()];
            y_in.extend(&hyp.tokens);
            let logits = model.decode_logits(memory, &y_in)?;
            let last = logits.slice(0, y_in.len() - 1, 1).log_softmax();
            let lp_att = last.data();

            let n_cont = if hyp.tokens.len() < cfg.max_len { vocab.symbols } else { 0 };
            for s in 0..n_cont {
                let c = vocab.token(s);
                let mut ext = hyp.tokens.clone();
                ext.push(c);
                let mut cand = Hypothesis {
                    score_att: hyp.score_att + lp_att[c],
                    score_ctc: scorer.prefix_log_prob(&ext)?,
                    score_lm: hyp.score_lm + lm_score(&hyp.tokens, c),
                    tokens: ext,
                    combined: 0.0,
                    completed: false,
                };
                cand.combine(cfg.alpha, cfg.beta);
                let recomputed = weighted(cfg.alpha, cand.score_att)
                    + weighted(1.0 - cfg.alpha, cand.score_ctc)
                    + weighted(cfg.beta, cand.score_lm);
                assert!(
                    cand.combined.to_bits() == recomputed.to_bits(),
                    "combined score identity violated"
                );
                expanded.push(cand);
            }

            let mut done = Hypothesis {
                score_att: hyp.score_att + lp_att[vocab.eos()],
                score_ctc: scorer.complete_log_prob(&hyp.tokens)?,
                score_lm: hyp.score_lm + lm_score(&hyp.tokens, vocab.eos()),
                tokens: hyp.tokens.clone(),
                combined: 0.0,
                completed: true,
            };
            done.combine(cfg.alpha, cfg.beta);
            expanded.push(done);
        }
        // Ending at eos competes with continuing inside the same beam
        // budget; completed survivors retire from the active set.
        sort_hyps(&mut expanded);
        expanded.truncate(cfg.beam_width);
        active = Vec::new();
        for h in expanded {
            if h.completed {
                finished.push(h);
            } else {
                active.push(h);
            }
        }
        if active.is_empty() {
            break;
        }
    }

    let final_key = |h: &Hypothesis| {
        if cfg.normalize_by_length {
            h.combined / (h.tokens.len() + 1) as f64
        } else {
            h.combined
        }
    };
    let pick = |pool: &[Hypothesis]| {
        let mut best = pool[0].clone();
        for h in &pool[1..] {
            let (a, b) = (final_key(h), final_key(&best));
            if a > b || (a == b && h.tokens < best.tokens) {
                best = h.clone();
            }
        }
        best
    };

    if finished.is_empty() {
        Ok(DecodeOutcome { best: pick(&active), reached_eos: false })
    } else {
        Ok(DecodeOutcome { best: pick(&finished), reached_eos: true })
    }
}

/// One decoded clip as written to the JSON-lines output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub clip_id: String,
    pub hypothesis: String,
    pub combined: f64,
    pub score_att: f64,
    pub score_ctc: f64,
    pub score_lm: f64,
    pub reference: String,
    pub reached_eos: bool,
    /// Per-frame mean reliability scores, empty when scoring is off.
    pub s_audio_mean: Vec<f64>,
    pub s_visual_mean: Vec<f64>,
}

/// Decode one (possibly corrupted) clip end to end.
pub fn decode_clip(
    model: &AvModel,
    clip_id: &str,
    video: &crate::corruption::VideoClip,
    audio: &crate::corruption::AudioClip,
    reference_tokens: &[usize],
    lm: Option<&NgramLm>,
    cfg: &DecodeConfig,
) -> Result<DecodeRecord> {
    let vocab = model.cfg.vocab();
    let (memory, trace) = model.encode(video, audio)?;
    let ctc_logits = model.ctc_logits(&memory);
    let outcome = beam_search(model, &memory, &ctc_logits, lm, cfg)?;
    let symbols: Vec<usize> = outcome
        .best
        .tokens
        .iter()
        .map(|&t| vocab.symbol_of(t).expect("beam emits only symbol tokens"))
        .collect();
    Ok(DecodeRecord {
        clip_id: clip_id.to_string(),
        hypothesis: transcript_text(&symbols),
        combined: outcome.best.combined,
        score_att: outcome.best.score_att,
        score_ctc: outcome.best.score_ctc,
        score_lm: outcome.best.score_lm,
        reference: transcript_text(reference_tokens),
        reached_eos: outcome.reached_eos,
        s_audio_mean: trace
            .s_audio
            .as_ref()
            .map(crate::model::ReliabilityTrace::frame_means)
            .unwrap_or_default(),
        s_visual_mean: trace
            .s_visual
            .as_ref()
            .map(crate::model::ReliabilityTrace::frame_means)
            .unwrap_or_default(),
    })
}
