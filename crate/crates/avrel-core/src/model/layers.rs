//! Building blocks of the recognizer: parameter registry, linear and
//! convolutional layers, normalization, relative-position multi-head
//! attention, Conformer encoder blocks, and Transformer decoder blocks.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{attention, embedding_lookup, Tensor};

/// Registry of trainable parameters and non-trainable buffers (batch-norm
/// running statistics), created in a deterministic order so checkpoints and
/// optimizer slots line up across runs.
pub struct ParamSet {
    rng: ChaCha8Rng,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Rc<RefCell<Vec<f64>>>)>,
}

impl ParamSet {
    pub fn new(seed: u64) -> ParamSet {
        ParamSet {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    /// Uniform init scaled by 1/sqrt(fan_in).
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::param(shape, data);
        self.params.push((name.to_string(), t.clone()));
        t
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let t = Tensor::param(shape, vec![0.0; shape.iter().product()]);
        self.params.push((name.to_string(), t.clone()));
        t
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let t = Tensor::param(shape, vec![1.0; shape.iter().product()]);
        self.params.push((name.to_string(), t.clone()));
        t
    }

    pub fn buffer(&mut self, name: &str, init: Vec<f64>) -> Rc<RefCell<Vec<f64>>> {
        let b = Rc::new(RefCell::new(init));
        self.buffers.push((name.to_string(), b.clone()));
        b
    }
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: ps.weight(&format!("{name}.w"), &[d_in, d_out], d_in),
            b: ps.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add(&self.b)
    }
}

pub struct Conv1d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Conv1d {
        Conv1d {
            w: ps.weight(&format!("{name}.w"), &[c_out, c_in, k], c_in * k),
            b: ps.zeros(&format!("{name}.b"), &[c_out]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv1d(&self.w, Some(&self.b), self.stride, self.padding)
    }
}

pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Conv2d {
        Conv2d {
            w: ps.weight(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k),
            b: ps.zeros(&format!("{name}.b"), &[c_out]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w, Some(&self.b), self.stride, self.padding)
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: ps.ones(&format!("{name}.gamma"), &[d]),
            beta: ps.zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, 1e-9)
    }
}

/// Batch normalization over the time axis with running statistics
/// (momentum 0.1) and eval-mode freezing.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Rc<RefCell<Vec<f64>>>,
    running_var: Rc<RefCell<Vec<f64>>>,
    training: Rc<Cell<bool>>,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, training: Rc<Cell<bool>>) -> BatchNorm {
        BatchNorm {
            gamma: ps.ones(&format!("{name}.gamma"), &[d]),
            beta: ps.zeros(&format!("{name}.beta"), &[d]),
            running_mean: ps.buffer(&format!("{name}.running_mean"), vec![0.0; d]),
            running_var: ps.buffer(&format!("{name}.running_var"), vec![1.0; d]),
            training,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        if self.training.get() {
            let (y, mean, var) = x.batch_norm_train(&self.gamma, &self.beta, 1e-5);
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for i in 0..rm.len() {
                rm[i] = (1.0 - self.momentum) * rm[i] + self.momentum * mean[i];
                rv[i] = (1.0 - self.momentum) * rv[i] + self.momentum * var[i];
            }
            y
        } else {
            let rm = self.running_mean.borrow();
            let rv = self.running_var.borrow();
            x.batch_norm_eval(&self.gamma, &self.beta, &rm, &rv, 1e-5)
        }
    }
}

/// Multi-head self/cross attention with a learned relative-position bias
/// added to the attention logits (shared across heads).
pub struct Mhsa {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub relpos: Option<Tensor>,
    pub heads: usize,
    pub max_rel: usize,
}

impl Mhsa {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, relative: bool, max_rel: usize) -> Mhsa {
        Mhsa {
            wq: Linear::new(ps, &format!("{name}.q"), d, d),
            wk: Linear::new(ps, &format!("{name}.k"), d, d),
            wv: Linear::new(ps, &format!("{name}.v"), d, d),
            wo: Linear::new(ps, &format!("{name}.o"), d, d),
            relpos: relative.then(|| ps.zeros(&format!("{name}.relpos"), &[2 * max_rel + 1, 1])),
            heads,
            max_rel,
        }
    }

    fn relpos_bias(&self, tq: usize, tk: usize) -> Option<Tensor> {
        self.relpos.as_ref().map(|table| {
            let mut idx = Vec::with_capacity(tq * tk);
            for i in 0..tq {
                for j in 0..tk {
                    let rel = (j as isize - i as isize).clamp(-(self.max_rel as isize), self.max_rel as isize);
                    idx.push((rel + self.max_rel as isize) as usize);
                }
            }
            embedding_lookup(table, &idx).reshape(&[tq, tk])
        })
    }

    /// `mask`, when present, is added to attention logits on top of any
    /// relative-position bias (e.g. a causal mask of large negatives).
    pub fn forward(&self, query: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let q = self.wq.forward(query);
        let k = self.wk.forward(context);
        let v = self.wv.forward(context);
        let bias = match (self.relpos_bias(query.shape()[0], context.shape()[0]), mask) {
            (Some(b), Some(m)) => Some(b.add(m)),
            (Some(b), None) => Some(b),
            (None, Some(m)) => Some(m.clone()),
            (None, None) => None,
        };
        self.wo.forward(&attention(&q, &k, &v, self.heads, bias.as_ref()))
    }
}

struct FeedForward {
    ln: LayerNorm,
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamSet, name: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            ln: LayerNorm::new(ps, &format!("{name}.ln"), d),
            lin1: Linear::new(ps, &format!("{name}.1"), d, ff),
            lin2: Linear::new(ps, &format!("{name}.2"), ff, d),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.lin2.forward(&self.lin1.forward(&self.ln.forward(x)).swish())
    }
}

/// Conformer block: half-step feed-forward, relative-position multi-head
/// self-attention, depthwise convolution module, half-step feed-forward.
pub struct ConformerBlock {
    ffn1: FeedForward,
    ln_att: LayerNorm,
    mhsa: Mhsa,
    ln_conv: LayerNorm,
    conv_pw1: Linear,
    conv_dw: Tensor,
    conv_ln: LayerNorm,
    conv_pw2: Linear,
    ffn2: FeedForward,
    ln_out: LayerNorm,
    /// Test hook: when set, the self-attention sublayer is skipped so the
    /// receptive field is purely convolutional.
    pub disable_attention: Cell<bool>,
}

impl ConformerBlock {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, ff: usize, heads: usize, kernel: usize, max_rel: usize) -> ConformerBlock {
        assert!(kernel % 2 == 1, "conformer conv kernel must be odd");
        ConformerBlock {
            ffn1: FeedForward::new(ps, &format!("{name}.ffn1"), d, ff),
            ln_att: LayerNorm::new(ps, &format!("{name}.att_ln"), d),
            mhsa: Mhsa::new(ps, &format!("{name}.att"), d, heads, true, max_rel),
            ln_conv: LayerNorm::new(ps, &format!("{name}.conv_ln"), d),
            conv_pw1: Linear::new(ps, &format!("{name}.conv_pw1"), d, 2 * d),
            conv_dw: ps.weight(&format!("{name}.conv_dw"), &[d, kernel], kernel),
            conv_ln: LayerNorm::new(ps, &format!("{name}.conv_norm"), d),
            conv_pw2: Linear::new(ps, &format!("{name}.conv_pw2"), d, d),
            ffn2: FeedForward::new(ps, &format!("{name}.ffn2"), d, ff),
            ln_out: LayerNorm::new(ps, &format!("{name}.out_ln"), d),
            disable_attention: Cell::new(false),
        }
    }

    fn conv_module(&self, x: &Tensor) -> Tensor {
        let d = x.shape()[1];
        let h = self.conv_pw1.forward(&self.ln_conv.forward(x));
        // GLU gate
        let a = h.slice(1, 0, d);
        let g = h.slice(1, d, d).sigmoid();
        let gated = a.hadamard(&g);
        let conv = gated.dwconv1d(&self.conv_dw);
        self.conv_pw2.forward(&self.conv_ln.forward(&conv).swish())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let x = x.add(&self.ffn1.forward(x).scale(0.5));
        let x = if self.disable_attention.get() {
            x
        } else {
            let normed = self.ln_att.forward(&x);
            x.add(&self.mhsa.forward(&normed, &normed, None))
        };
        let x = x.add(&self.conv_module(&x));
        let x = x.add(&self.ffn2.forward(&x).scale(0.5));
        self.ln_out.forward(&x)
    }
}

/// Pre-norm Transformer decoder block: causal self-attention, cross
/// attention over the encoder memory, feed-forward.
pub struct DecoderBlock {
    ln_self: LayerNorm,
    self_att: Mhsa,
    ln_cross: LayerNorm,
    cross_att: Mhsa,
    ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, ff: usize, heads: usize) -> DecoderBlock {
        DecoderBlock {
            ln_self: LayerNorm::new(ps, &format!("{name}.self_ln"), d),
            self_att: Mhsa::new(ps, &format!("{name}.self"), d, heads, false, 0),
            ln_cross: LayerNorm::new(ps, &format!("{name}.cross_ln"), d),
            cross_att: Mhsa::new(ps, &format!("{name}.cross"), d, heads, false, 0),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, ff),
        }
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, causal_mask: &Tensor) -> Tensor {
        let normed = self.ln_self.forward(x);
        let x = x.add(&self.self_att.forward(&normed, &normed, Some(causal_mask)));
        let x = x.add(&self.cross_att.forward(&self.ln_cross.forward(&x), memory, None));
        x.add(&self.ffn.forward(&x))
    }
}

/// Strictly lower-triangular-permitting causal mask: 0 where j <= i,
/// a large negative where j > i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = -1e30;
        }
    }
    Tensor::new(&[n, n], data)
}

/// Reliability scoring module: three temporal convolutions, each followed
/// by batch normalization, with ReLU between layers and a sigmoid on the
/// final output. The last layer has no ReLU so pre-sigmoid values can go
/// negative and scores can express the full (0, 1) range.
pub struct ReliabilityScorer {
    convs: Vec<(Conv1d, BatchNorm)>,
}

impl ReliabilityScorer {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, training: Rc<Cell<bool>>) -> ReliabilityScorer {
        let convs = (0..3)
            .map(|i| {
                (
                    Conv1d::new(ps, &format!("{name}.conv{i}"), d, d, 3, 1, 1),
                    BatchNorm::new(ps, &format!("{name}.bn{i}"), d, training.clone()),
                )
            })
            .collect();
        ReliabilityScorer { convs }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = bn.forward(&conv.forward(&h));
            if i + 1 < self.convs.len() {
                h = h.relu();
            }
        }
        h.sigmoid()
    }
}
