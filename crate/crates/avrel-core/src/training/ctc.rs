//! CTC loss over per-frame logits, computed with the forward-backward
//! recursion in log space. Registered as a single graph node whose gradient
//! is softmax(logits) minus the state posterior.

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

fn logsumexp3(a: f64, b: f64, c: f64) -> f64 {
    logsumexp2(logsumexp2(a, b), c)
}

/// Minimum number of frames needed to emit `labels`: one frame per label
/// plus a separating blank between equal neighbors.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log probability of `labels` under the per-frame distributions
/// softmax(logits[t]), marginalized over all blank-augmented alignments.
/// `blank` is the blank token index; labels must not contain it.
pub fn ctc_loss(logits: &Tensor, labels: &[usize], blank: usize) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "ctc_loss",
            detail: format!("logits must be [T, V], got {:?}", logits.shape()),
        });
    }
    let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
    if labels.is_empty() {
        return Err(Error::Empty("ctc_loss: empty label sequence".into()));
    }
    if blank >= v {
        return Err(Error::Config(format!("ctc_loss: blank {blank} outside vocabulary of {v}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= v || l == blank) {
        return Err(Error::Config(format!("ctc_loss: label {bad} invalid for vocabulary of {v} with blank {blank}")));
    }
    let need = ctc_min_frames(labels);
    if t_len < need {
        return Err(Error::Infeasible(format!(
            "ctc_loss: {t_len} frames cannot align {} labels (need at least {need})",
            labels.len()
        )));
    }

    // Blank-augmented state sequence: blank, y1, blank, y2, ..., blank.
    let l = 2 * labels.len() + 1;
    let state_label = |s: usize| if s % 2 == 0 { blank } else { labels[s / 2] };

    // Per-frame log softmax, computed directly for numerical control.
    let raw = logits.data();
    let mut logp = vec![0.0; t_len * v];
    for t in 0..t_len {
        let row = &raw[t * v..(t + 1) * v];
        let m = row.iter().cloned().fold(NEG_INF, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        for k in 0..v {
            logp[t * v + k] = row[k] - lse;
        }
    }

    // Forward scores: alpha[t][s] includes the emission at frame t.
    let mut alpha = vec![NEG_INF; t_len * l];
    alpha[0] = logp[blank];
    if l > 1 {
        alpha[1] = logp[state_label(1)];
    }
    for t in 1..t_len {
        for s in 0..l {
            let mut acc = alpha[(t - 1) * l + s];
            if s >= 1 {
                acc = logsumexp2(acc, alpha[(t - 1) * l + s - 1]);
            }
            if s >= 2 && state_label(s) != blank && state_label(s) != state_label(s - 2) {
                acc = logsumexp2(acc, alpha[(t - 1) * l + s - 2]);
            }
            alpha[t * l + s] = acc + logp[t * v + state_label(s)];
        }
    }
    let log_total = if l > 1 {
        logsumexp2(alpha[(t_len - 1) * l + l - 1], alpha[(t_len - 1) * l + l - 2])
    } else {
        alpha[(t_len - 1) * l + l - 1]
    };
    if !log_total.is_finite() {
        return Err(Error::Infeasible("ctc_loss: no feasible alignment".into()));
    }

    // Backward scores: beta[t][s] covers emissions strictly after frame t.
    let mut beta = vec![NEG_INF; t_len * l];
    beta[(t_len - 1) * l + l - 1] = 0.0;
    if l > 1 {
        beta[(t_len - 1) * l + l - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..l {
            let stay = beta[(t + 1) * l + s] + logp[(t + 1) * v + state_label(s)];
            let next = if s + 1 < l {
                beta[(t + 1) * l + s + 1] + logp[(t + 1) * v + state_label(s + 1)]
            } else {
                NEG_INF
            };
            let skip = if s + 2 < l && state_label(s + 2) != blank && state_label(s + 2) != state_label(s) {
                beta[(t + 1) * l + s + 2] + logp[(t + 1) * v + state_label(s + 2)]
            } else {
                NEG_INF
            };
            beta[t * l + s] = logsumexp3(stay, next, skip);
        }
    }

    // d(-log p)/d logit[t][k] = softmax[t][k] - posterior mass on k at t.
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for k in 0..v {
            grad[t * v + k] = logp[t * v + k].exp();
        }
        for s in 0..l {
            let q = alpha[t * l + s] + beta[t * l + s] - log_total;
            if q > NEG_INF {
                grad[t * v + state_label(s)] -= q.exp();
            }
        }
    }

    Ok(Tensor::from_op(
        &[1],
        vec![-log_total],
        vec![logits.clone()],
        Box::new(move |g, parents| {
            let scaled: Vec<f64> = grad.iter().map(|&v| v * g[0]).collect();
            parents[0].accum_grad(&scaled);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Remove repeats, then blanks: the CTC collapse function.
    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &p in path {
            if p != prev && p != blank {
                out.push(p);
            }
            prev = p;
        }
        out
    }

    /// Total label probability by enumerating every alignment path.
    fn brute_force_neg_logp(logits: &Tensor, labels: &[usize], blank: usize) -> f64 {
        let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
        let raw = logits.data();
        let mut probs = vec![0.0; t_len * v];
        for t in 0..t_len {
            let row = &raw[t * v..(t + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            for k in 0..v {
                probs[t * v + k] = (row[k] - m).exp() / z;
            }
        }
        let mut total = 0.0;
        let n_paths = v.pow(t_len as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t_len);
            let mut p = 1.0;
            for t in 0..t_len {
                let k = c % v;
                c /= v;
                path.push(k);
                p *= probs[t * v + k];
            }
            if collapse(&path, blank) == labels {
                total += p;
            }
        }
        -total.ln()
    }

    fn arbitrary_logits(t: usize, v: usize, seed: u64) -> Tensor {
        let mut state = seed;
        let data: Vec<f64> = (0..t * v)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0
            })
            .collect();
        Tensor::param(&[t, v], data)
    }

    #[test]
    fn matches_alignment_enumeration() {
        let cases: &[(usize, usize, &[usize])] = &[
            (2, 3, &[1]),
            (3, 3, &[1, 2]),
            (4, 3, &[1, 1]),
            (5, 4, &[2, 3, 1]),
            (6, 3, &[1, 2, 1]),
            (5, 4, &[3]),
        ];
        for &(t, v, labels) in cases {
            for seed in [1u64, 77, 4096] {
                let logits = arbitrary_logits(t, v, seed);
                let loss = ctc_loss(&logits, labels, 0).unwrap().item();
                let brute = brute_force_neg_logp(&logits, labels, 0);
                assert!(
                    (loss - brute).abs() < 1e-10,
                    "T={t} V={v} labels={labels:?} seed={seed}: {loss} vs {brute}"
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = arbitrary_logits(5, 4, 99);
        let labels = [2, 1, 1];
        let max_err = crate::tensor::grad_check(|x| ctc_loss(x, &labels, 0).unwrap(), &logits, 1e-6).unwrap();
        assert!(max_err < 1e-6, "max rel err {max_err:.3e}");
    }

    #[test]
    fn loss_drops_when_logits_favor_the_labels() {
        let labels = [1, 2];
        let neutral = Tensor::new(&[4, 3], vec![0.0; 12]);
        let mut favored = vec![0.0; 12];
        favored[1] = 4.0; // frame 0 votes label 1
        favored[4] = 4.0; // frame 1 votes label 1
        favored[8] = 4.0; // frame 2 votes label 2
        favored[9] = 4.0; // frame 3 votes blank
        let favored = Tensor::new(&[4, 3], favored);
        let l0 = ctc_loss(&neutral, &labels, 0).unwrap().item();
        let l1 = ctc_loss(&favored, &labels, 0).unwrap().item();
        assert!(l1 < l0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let logits = arbitrary_logits(3, 3, 5);
        assert!(matches!(ctc_loss(&logits, &[], 0), Err(Error::Empty(_))));
        assert!(matches!(ctc_loss(&logits, &[0], 0), Err(Error::Config(_))));
        assert!(matches!(ctc_loss(&logits, &[3], 0), Err(Error::Config(_))));
        // Two equal labels need three frames; two are infeasible.
        let short = arbitrary_logits(2, 3, 6);
        assert!(matches!(ctc_loss(&short, &[1, 1], 0), Err(Error::Infeasible(_))));
        assert_eq!(ctc_min_frames(&[1, 1, 2, 2, 2]), 8);
    }
}
