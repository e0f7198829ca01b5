//! Forward and backward implementations for the op catalog.
//!
//! Each op validates shapes (panicking with the op name on programmer error),
//! computes the forward value, and registers a backward closure that
//! accumulates into its parents. Closures capture whatever forward values the
//! gradient needs by value; at desk scale the copies are cheap.

use super::Tensor;

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tensor {
    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        if self.shape() == other.shape() {
            let a = self.data();
            let b = other.data();
            let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            return Tensor::from_op(
                self.shape(),
                out,
                vec![self.clone(), other.clone()],
                Box::new(|g, parents| {
                    parents[0].accum_grad(g);
                    parents[1].accum_grad(g);
                }),
            );
        }
        // Row broadcast: [R, C] + [C]
        if self.shape().len() == 2 && other.shape().len() == 1 && self.shape()[1] == other.shape()[0] {
            let (rows, cols) = (self.shape()[0], self.shape()[1]);
            let a = self.data();
            let b = other.data();
            let mut out = a;
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] += b[c];
                }
            }
            return Tensor::from_op(
                self.shape(),
                out,
                vec![self.clone(), other.clone()],
                Box::new(move |g, parents| {
                    parents[0].accum_grad(g);
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                    parents[1].accum_grad(&gb);
                }),
            );
        }
        panic!("add: incompatible shapes {:?} vs {:?}", self.shape(), other.shape());
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.add(&other.scale(-1.0))
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "hadamard: shapes {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.data();
        let b = other.data();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let ga: Vec<f64> = g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect();
                let gb: Vec<f64> = g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect();
                parents[0].accum_grad(&ga);
                parents[1].accum_grad(&gb);
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                parents[0].accum_grad(&gx);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accum_grad(g)),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let saved = out.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx: Vec<f64> = g.iter().zip(&saved).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                parents[0].accum_grad(&gx);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx: Vec<f64> = g.iter().zip(&x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
                parents[0].accum_grad(&gx);
            }),
        )
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&self) -> Tensor {
        self.hadamard(&self.sigmoid())
    }

    pub fn log(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx: Vec<f64> = g.iter().zip(&x).map(|(gi, xi)| gi / xi).collect();
                parents[0].accum_grad(&gx);
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            &[1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2 && self.shape()[1] == other.shape()[0],
            "matmul: shapes {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let a = self.data();
        let b = other.data();
        let out = matmul_raw(&a, &b, m, k, n);
        Tensor::from_op(
            &[m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let bt = transpose_raw(&b, k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(&a, m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                parents[0].accum_grad(&ga);
                parents[1].accum_grad(&gb);
            }),
        )
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "transpose: rank-2 only, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose_raw(&self.data(), r, c);
        Tensor::from_op(
            &[c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(&transpose_raw(g, c, r));
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape: {:?} -> {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            shape,
            self.data(),
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accum_grad(g)),
        )
    }

    // ---- slicing / concatenation ----

    /// Slice `len` entries starting at `start` along `axis`; any rank.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "slice: axis {axis} range {start}..{} out of shape {:?}",
            start + len,
            shape
        );
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let total = x.len();
        Tensor::from_op(
            &out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; total];
                for o in 0..outer {
                    let base = (o * mid + start) * inner;
                    let gbase = o * len * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[gbase..gbase + len * inner]);
                }
                parents[0].accum_grad(&gx);
            }),
        )
    }

    // ---- convolutions ----

    /// 1D convolution over a [T, C_in] sequence with weight [C_out, C_in, K],
    /// zero padding. Output [T_out, C_out].
    pub fn conv1d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
        assert!(
            self.shape().len() == 2 && weight.shape().len() == 3 && self.shape()[1] == weight.shape()[1],
            "conv1d: input {:?} weight {:?}",
            self.shape(),
            weight.shape()
        );
        let (t, cin) = (self.shape()[0], self.shape()[1]);
        let (cout, _, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        assert!(t + 2 * padding >= k, "conv1d: input length {t} too short for kernel {k}");
        let t_out = (t + 2 * padding - k) / stride + 1;
        let x = self.data();
        let w = weight.data();
        let b = bias.map(|b| {
            assert_eq!(b.shape(), &[cout], "conv1d: bias {:?}", b.shape());
            b.data()
        });
        let mut out = vec![0.0; t_out * cout];
        for to in 0..t_out {
            for co in 0..cout {
                let mut acc = b.as_ref().map_or(0.0, |b| b[co]);
                for kk in 0..k {
                    let ti = (to * stride + kk) as isize - padding as isize;
                    if ti < 0 || ti as usize >= t {
                        continue;
                    }
                    let ti = ti as usize;
                    for ci in 0..cin {
                        acc += x[ti * cin + ci] * w[(co * cin + ci) * k + kk];
                    }
                }
                out[to * cout + co] = acc;
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            &[t_out, cout],
            out,
            parents,
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; t * cin];
                let mut gw = vec![0.0; cout * cin * k];
                let mut gb = vec![0.0; cout];
                for to in 0..t_out {
                    for co in 0..cout {
                        let go = g[to * cout + co];
                        if go == 0.0 {
                            continue;
                        }
                        gb[co] += go;
                        for kk in 0..k {
                            let ti = (to * stride + kk) as isize - padding as isize;
                            if ti < 0 || ti as usize >= t {
                                continue;
                            }
                            let ti = ti as usize;
                            for ci in 0..cin {
                                gx[ti * cin + ci] += go * w[(co * cin + ci) * k + kk];
                                gw[(co * cin + ci) * k + kk] += go * x[ti * cin + ci];
                            }
                        }
                    }
                }
                parents[0].accum_grad(&gx);
                parents[1].accum_grad(&gw);
                if has_bias {
                    parents[2].accum_grad(&gb);
                }
            }),
        )
    }

    /// Depthwise 1D convolution, same padding, odd kernel. [T, C] -> [T, C].
    pub fn dwconv1d(&self, weight: &Tensor) -> Tensor {
        assert!(
            self.shape().len() == 2
                && weight.shape().len() == 2
                && self.shape()[1] == weight.shape()[0]
                && weight.shape()[1] % 2 == 1,
            "dwconv1d: input {:?} weight {:?}",
            self.shape(),
            weight.shape()
        );
        let (t, c) = (self.shape()[0], self.shape()[1]);
        let k = weight.shape()[1];
        let p = (k - 1) / 2;
        let x = self.data();
        let w = weight.data();
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for ci in 0..c {
                let mut acc = 0.0;
                for kk in 0..k {
                    let src = ti as isize + kk as isize - p as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    acc += x[src as usize * c + ci] * w[ci * k + kk];
                }
                out[ti * c + ci] = acc;
            }
        }
        Tensor::from_op(
            &[t, c],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; t * c];
                let mut gw = vec![0.0; c * k];
                for ti in 0..t {
                    for ci in 0..c {
                        let go = g[ti * c + ci];
                        if go == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - p as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            gx[src as usize * c + ci] += go * w[ci * k + kk];
                            gw[ci * k + kk] += go * x[src as usize * c + ci];
                        }
                    }
                }
                parents[0].accum_grad(&gx);
                parents[1].accum_grad(&gw);
            }),
        )
    }

    /// Batched 2D convolution: input [N, C_in, H, W], weight [C_out, C_in, kh, kw],
    /// zero padding. Output [N, C_out, H', W'].
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
        assert!(
            self.shape().len() == 4 && weight.shape().len() == 4 && self.shape()[1] == weight.shape()[1],
            "conv2d: input {:?} weight {:?}",
            self.shape(),
            weight.shape()
        );
        let (n, cin, h, w_dim) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w_dim + 2 * padding - kw) / stride + 1;
        let x = self.data();
        let wt = weight.data();
        let b = bias.map(|b| {
            assert_eq!(b.shape(), &[cout], "conv2d: bias {:?}", b.shape());
            b.data()
        });
        let mut out = vec![0.0; n * cout * ho * wo];
        let xin = |ni: usize, ci: usize, yi: usize, xi: usize| ((ni * cin + ci) * h + yi) * w_dim + xi;
        for ni in 0..n {
            for co in 0..cout {
                let bval = b.as_ref().map_or(0.0, |b| b[co]);
                for yo in 0..ho {
                    for xo in 0..wo {
                        let mut acc = bval;
                        for ky in 0..kh {
                            let yi = (yo * stride + ky) as isize - padding as isize;
                            if yi < 0 || yi as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let xi = (xo * stride + kx) as isize - padding as isize;
                                if xi < 0 || xi as usize >= w_dim {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x[xin(ni, ci, yi as usize, xi as usize)]
                                        * wt[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * cout + co) * ho + yo) * wo + xo] = acc;
                    }
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            &[n, cout, ho, wo],
            out,
            parents,
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; n * cin * h * w_dim];
                let mut gw = vec![0.0; cout * cin * kh * kw];
                let mut gb = vec![0.0; cout];
                let xin = |ni: usize, ci: usize, yi: usize, xi: usize| ((ni * cin + ci) * h + yi) * w_dim + xi;
                for ni in 0..n {
                    for co in 0..cout {
                        for yo in 0..ho {
                            for xo in 0..wo {
                                let go = g[((ni * cout + co) * ho + yo) * wo + xo];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[co] += go;
                                for ky in 0..kh {
                                    let yi = (yo * stride + ky) as isize - padding as isize;
                                    if yi < 0 || yi as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xi = (xo * stride + kx) as isize - padding as isize;
                                        if xi < 0 || xi as usize >= w_dim {
                                            continue;
                                        }
                                        for ci in 0..cin {
                                            let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                            let xidx = xin(ni, ci, yi as usize, xi as usize);
                                            gx[xidx] += go * wt[widx];
                                            gw[widx] += go * x[xidx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                parents[0].accum_grad(&gx);
                parents[1].accum_grad(&gw);
                if has_bias {
                    parents[2].accum_grad(&gb);
                }
            }),
        )
    }
}

impl Tensor {
    /// Global average pool over the spatial axes: [N, C, H, W] -> [N, C].
    pub fn mean_spatial(&self) -> Tensor {
        assert_eq!(self.shape().len(), 4, "mean_spatial: rank-4 only, got {:?}", self.shape());
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let hw = h * w;
        let x = self.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = x[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        Tensor::from_op(
            &[n, c],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    let gi = g[i] / hw as f64;
                    for j in 0..hw {
                        gx[i * hw + j] = gi;
                    }
                }
                parents[0].accum_grad(&gx);
            }),
        )
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "softmax: rank-2 only, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let y = out.clone();
        Tensor::from_op(
            &[r, c],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        gx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                parents[0].accum_grad(&gx);
            }),
        )
    }

    /// Row-wise log-softmax over the last axis of a rank-2 tensor.
    pub fn log_softmax(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "log_softmax: rank-2 only, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let y = out.clone();
        Tensor::from_op(
            &[r, c],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        gx[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gsum;
                    }
                }
                parents[0].accum_grad(&gx);
            }),
        )
    }

    /// Per-row layer normalization of [R, C] with affine [C] parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        assert!(
            self.shape().len() == 2
                && gamma.shape() == [self.shape()[1]]
                && beta.shape() == [self.shape()[1]],
            "layer_norm: input {:?} gamma {:?} beta {:?}",
            self.shape(),
            gamma.shape(),
            beta.shape()
        );
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = gm[j] * xh + bt[j];
            }
        }
        Tensor::from_op(
            &[r, c],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let go = g[i * c + j];
                        let xh = xhat[i * c + j];
                        gg[j] += go * xh;
                        gb[j] += go;
                        let dxh = go * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for j in 0..c {
                        let dxh = g[i * c + j] * gm[j];
                        let xh = xhat[i * c + j];
                        gx[i * c + j] =
                            inv_std[i] * (dxh - sum_dxh / c as f64 - xh * sum_dxh_xh / c as f64);
                    }
                }
                parents[0].accum_grad(&gx);
                parents[1].accum_grad(&gg);
                parents[2].accum_grad(&gb);
            }),
        )
    }

    /// Training-mode batch normalization of [R, C] over the row axis.
    /// Returns (output, batch_mean, batch_var); the caller owns the running
    /// statistics update. Gradients flow through the batch statistics.
    pub fn batch_norm_train(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
        assert!(
            self.shape().len() == 2
                && gamma.shape() == [self.shape()[1]]
                && beta.shape() == [self.shape()[1]],
            "batch_norm: input {:?} gamma {:?} beta {:?}",
            self.shape(),
            gamma.shape(),
            beta.shape()
        );
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            let mut mu = 0.0;
            for i in 0..r {
                mu += x[i * c + j];
            }
            mu /= r as f64;
            let mut v = 0.0;
            for i in 0..r {
                let d = x[i * c + j] - mu;
                v += d * d;
            }
            mean[j] = mu;
            var[j] = v / r as f64;
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; c];
        for j in 0..c {
            inv_std[j] = 1.0 / (var[j] + eps).sqrt();
        }
        for i in 0..r {
            for j in 0..c {
                let xh = (x[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = xh;
                out[i * c + j] = gm[j] * xh + bt[j];
            }
        }
        let mean_out = mean.clone();
        let var_out = var.clone();
        let t = Tensor::from_op(
            &[r, c],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for j in 0..c {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for i in 0..r {
                        let go = g[i * c + j];
                        let xh = xhat[i * c + j];
                        gg[j] += go * xh;
                        gb[j] += go;
                        let dxh = go * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for i in 0..r {
                        let dxh = g[i * c + j] * gm[j];
                        let xh = xhat[i * c + j];
                        gx[i * c + j] =
                            inv_std[j] * (dxh - sum_dxh / r as f64 - xh * sum_dxh_xh / r as f64);
                    }
                }
                parents[0].accum_grad(&gx);
                parents[1].accum_grad(&gg);
                parents[2].accum_grad(&gb);
            }),
        );
        (t, mean_out, var_out)
    }

    /// Eval-mode batch normalization with frozen running statistics.
    pub fn batch_norm_eval(&self, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> Tensor {
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(mean.len() == c && var.len() == c, "batch_norm_eval: stats length");
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let xh = (x[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = xh;
                out[i * c + j] = gm[j] * xh + bt[j];
            }
        }
        Tensor::from_op(
            &[r, c],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let go = g[i * c + j];
                        gx[i * c + j] = go * gm[j] * inv_std[j];
                        gg[j] += go * xhat[i * c + j];
                        gb[j] += go;
                    }
                }
                parents[0].accum_grad(&gx);
                parents[1].accum_grad(&gg);
                parents[2].accum_grad(&gb);
            }),
        )
    }

    /// Mean per-token negative log-likelihood of `targets` under row-wise
    /// softmax of [J, V] logits.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "cross_entropy: rank-2 only");
        let (j, v) = (self.shape()[0], self.shape()[1]);
        assert_eq!(targets.len(), j, "cross_entropy: {} targets for {} rows", targets.len(), j);
        assert!(targets.iter().all(|&t| t < v), "cross_entropy: target out of vocab");
        let x = self.data();
        let mut probs = vec![0.0; j * v];
        let mut loss = 0.0;
        for i in 0..j {
            let row = &x[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
            for c in 0..v {
                probs[i * v + c] = (row[c] - lse).exp();
            }
            loss -= row[targets[i]] - lse;
        }
        loss /= j as f64;
        let tg = targets.to_vec();
        Tensor::from_op(
            &[1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let scale = g[0] / j as f64;
                let mut gx = vec![0.0; j * v];
                for i in 0..j {
                    for c in 0..v {
                        let ind = if c == tg[i] { 1.0 } else { 0.0 };
                        gx[i * v + c] = scale * (probs[i * v + c] - ind);
                    }
                }
                parents[0].accum_grad(&gx);
            }),
        )
    }
}

/// Concatenate along `axis`. All tensors must agree on every other extent.
pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
    assert!(!tensors.is_empty(), "concat: empty input");
    let rank = tensors[0].shape().len();
    assert!(axis < rank, "concat: axis {axis} out of rank {rank}");
    for t in tensors {
        assert_eq!(t.shape().len(), rank, "concat: mixed ranks");
        for d in 0..rank {
            if d != axis {
                assert_eq!(
                    t.shape()[d],
                    tensors[0].shape()[d],
                    "concat: extent mismatch on axis {d}: {:?} vs {:?}",
                    t.shape(),
                    tensors[0].shape()
                );
            }
        }
    }
    let outer: usize = tensors[0].shape()[..axis].iter().product();
    let inner: usize = tensors[0].shape()[axis + 1..].iter().product();
    let mids: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    let mid_total: usize = mids.iter().sum();
    let datas: Vec<Vec<f64>> = tensors.iter().map(|t| t.data()).collect();
    let mut out = Vec::with_capacity(outer * mid_total * inner);
    for o in 0..outer {
        for (t, d) in datas.iter().enumerate() {
            let chunk = mids[t] * inner;
            out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = tensors[0].shape().to_vec();
    shape[axis] = mid_total;
    let mids_b = mids.clone();
    Tensor::from_op(
        &shape,
        out,
        tensors.to_vec(),
        Box::new(move |g, parents| {
            let mut offset_chunks: Vec<usize> = Vec::with_capacity(mids_b.len());
            let mut acc = 0;
            for m in &mids_b {
                offset_chunks.push(acc);
                acc += m * inner;
            }
            let row = acc; // total chunk per outer index
            for (t, parent) in parents.iter().enumerate() {
                let chunk = mids_b[t] * inner;
                let mut gp = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    let base = o * row + offset_chunks[t];
                    gp.extend_from_slice(&g[base..base + chunk]);
                }
                parent.accum_grad(&gp);
            }
        }),
    )
}

/// Gather rows of `table` [V, D] at `indices`, producing [J, D].
pub fn embedding_lookup(table: &Tensor, indices: &[usize]) -> Tensor {
    assert_eq!(table.shape().len(), 2, "embedding_lookup: table must be rank 2");
    let (v, d) = (table.shape()[0], table.shape()[1]);
    assert!(indices.iter().all(|&i| i < v), "embedding_lookup: index out of range");
    let data = table.data();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(&data[i * d..(i + 1) * d]);
    }
    let idx = indices.to_vec();
    Tensor::from_op(
        &[indices.len(), d],
        out,
        vec![table.clone()],
        Box::new(move |g, parents| {
            let mut gt = vec![0.0; v * d];
            for (j, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    gt[i * d + c] += g[j * d + c];
                }
            }
            parents[0].accum_grad(&gt);
        }),
    )
}

/// Fixed sinusoidal positional encoding, [T, D] constant tensor.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[t, d], out)
}

/// Multi-head scaled dot-product attention composed from catalog primitives.
/// q [Tq, D], k/v [Tk, D]; `bias` (e.g. causal mask or relative-position
/// bias), when present, is added to every head's attention logits.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&Tensor>) -> Tensor {
    let d = q.shape()[1];
    assert!(
        d % heads == 0 && k.shape()[1] == d && v.shape()[1] == d && k.shape()[0] == v.shape()[0],
        "attention: q {:?} k {:?} v {:?} heads {heads}",
        q.shape(),
        k.shape(),
        v.shape()
    );
    if let Some(b) = bias {
        assert_eq!(
            b.shape(),
            &[q.shape()[0], k.shape()[0]],
            "attention: bias {:?} for q {:?} k {:?}",
            b.shape(),
            q.shape(),
            k.shape()
        );
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh);
        let kh = k.slice(1, h * dh, dh);
        let vh = v.slice(1, h * dh, dh);
        let mut logits = qh.matmul(&kh.transpose()).scale(scale);
        if let Some(b) = bias {
            logits = logits.add(b);
        }
        outs.push(logits.softmax().matmul(&vh));
    }
    concat(&outs, 1)
}
