//! Forward operations and their backward rules.
//!
//! Convolution uses cross-correlation semantics (no kernel flip). Sampling
//! coordinates follow the align-corners convention: normalized -1 and 1 map
//! to the centers of the border pixels.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearities supported by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Largest value the sigmoid is allowed to return; keeps outputs strictly
/// inside (0, 1) even for saturating inputs.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON;

fn stable_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

/// Snap threshold for sampling coordinates that land within float dust of
/// a pixel center, so exact-pixel grids reproduce values bit for bit.
const PIXEL_SNAP: f64 = 1e-9;

fn expect_3d(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(format!("{what} must be [C,H,W], got {other:?}"))),
    }
}

impl Tape {
    /// 2-D cross-correlation over a `[C_in,H,W]` input with a
    /// `[C_out,C_in,kh,kw]` filter bank and per-filter bias.
    ///
    /// Output spatial size is
    /// `floor((H + 2*padding - dilation*(kh-1) - 1)/stride) + 1` and
    /// likewise for width.
    pub fn conv2d(
        &self,
        input: &Tensor,
        weights: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        let (c_in, h, w) = expect_3d(input, "conv2d input")?;
        let (c_out, wc_in, kh, kw) = match weights.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            other => {
                return Err(Error::shape(format!(
                    "conv2d weights must be [C_out,C_in,kh,kw], got {other:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d input has {c_in} channels but weights expect {wc_in}"
            )));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                bias.shape()
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::contract("conv2d stride and dilation must be positive"));
        }
        let eff_kh = dilation * (kh - 1) + 1;
        let eff_kw = dilation * (kw - 1) + 1;
        if eff_kh > h + 2 * padding || eff_kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "effective kernel {eff_kh}x{eff_kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - eff_kh) / stride + 1;
        let ow = (w + 2 * padding - eff_kw) / stride + 1;

        let out = self.with_values(|vals| {
            let x = &vals[input.id()];
            let wt = &vals[weights.id()];
            let b = &vals[bias.id()];
            let mut out = vec![0.0; c_out * oh * ow];
            for co in 0..c_out {
                out[co * oh * ow..(co + 1) * oh * ow].fill(b[co]);
                for ci in 0..c_in {
                    for u in 0..kh {
                        for v in 0..kw {
                            let wv = wt[((co * c_in + ci) * kh + u) * kw + v];
                            for i in 0..oh {
                                let ih = (i * stride + u * dilation) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let in_row = (ci * h + ih as usize) * w;
                                let out_row = (co * oh + i) * ow;
                                for j in 0..ow {
                                    let iw =
                                        (j * stride + v * dilation) as isize - padding as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    out[out_row + j] += wv * x[in_row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
            out
        });

        let (in_id, w_id, b_id) = (input.id(), weights.id(), bias.id());
        let (req_in, req_w, req_b) = (
            self.requires_grad(input),
            self.requires_grad(weights),
            self.requires_grad(bias),
        );
        let backward = move |vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            if req_b {
                let gb = &mut grads[b_id];
                for co in 0..c_out {
                    gb[co] += gout[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                }
            }
            if req_w {
                let x = &vals[in_id];
                let gw = &mut grads[w_id];
                for co in 0..c_out {
                    for ci in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let mut acc = 0.0;
                                for i in 0..oh {
                                    let ih =
                                        (i * stride + u * dilation) as isize - padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let in_row = (ci * h + ih as usize) * w;
                                    let out_row = (co * oh + i) * ow;
                                    for j in 0..ow {
                                        let iw = (j * stride + v * dilation) as isize
                                            - padding as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        acc += x[in_row + iw as usize] * gout[out_row + j];
                                    }
                                }
                                gw[((co * c_in + ci) * kh + u) * kw + v] += acc;
                            }
                        }
                    }
                }
            }
            if req_in {
                let wt = &vals[w_id];
                let gin = &mut grads[in_id];
                for co in 0..c_out {
                    for ci in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let wv = wt[((co * c_in + ci) * kh + u) * kw + v];
                                for i in 0..oh {
                                    let ih =
                                        (i * stride + u * dilation) as isize - padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let in_row = (ci * h + ih as usize) * w;
                                    let out_row = (co * oh + i) * ow;
                                    for j in 0..ow {
                                        let iw = (j * stride + v * dilation) as isize
                                            - padding as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        gin[in_row + iw as usize] += wv * gout[out_row + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        Ok(self.push_op(
            out,
            vec![c_out, oh, ow],
            &[input, weights, bias],
            Box::new(backward),
        ))
    }

    /// Max pooling with window `k` and the given stride. Gradient routes to
    /// the first maximum in row-major window order.
    pub fn maxpool2d(&self, input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
        let (c, h, w) = expect_3d(input, "maxpool2d input")?;
        if k == 0 || stride == 0 {
            return Err(Error::contract("maxpool2d window and stride must be positive"));
        }
        if k > h || k > w {
            return Err(Error::shape(format!(
                "maxpool2d window {k} exceeds spatial extent {h}x{w}"
            )));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut argmax = vec![0usize; c * oh * ow];
        let out = self.with_values(|vals| {
            let x = &vals[input.id()];
            let mut out = vec![0.0; c * oh * ow];
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for u in 0..k {
                            for v in 0..k {
                                let idx = (ci * h + i * stride + u) * w + j * stride + v;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (ci * oh + i) * ow + j;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
            out
        });
        let in_id = input.id();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let gin = &mut grads[in_id];
            for (o, &src) in argmax.iter().enumerate() {
                gin[src] += gout[o];
            }
        };
        Ok(self.push_op(out, vec![c, oh, ow], &[input], Box::new(backward)))
    }

    /// Elementwise nonlinearity.
    pub fn activation(&self, x: &Tensor, kind: Activation) -> Tensor {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let out = self.with_values(|vals| {
            vals[x.id()].iter().map(|&v| v.max(0.0)).collect::<Vec<_>>()
        });
        let x_id = x.id();
        let backward = move |vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let xv = &vals[x_id];
            let gin = &mut grads[x_id];
            for i in 0..gout.len() {
                if xv[i] > 0.0 {
                    gin[i] += gout[i];
                }
            }
        };
        self.push_op(out, x.shape().to_vec(), &[x], Box::new(backward))
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        let out = self.with_values(|vals| {
            vals[x.id()].iter().map(|&v| stable_sigmoid(v)).collect::<Vec<_>>()
        });
        let x_id = x.id();
        // d sigma = sigma * (1 - sigma)
        let backward = move |vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let xv = &vals[x_id];
            let gin = &mut grads[x_id];
            for i in 0..gout.len() {
                let s = stable_sigmoid(xv[i]);
                gin[i] += gout[i] * s * (1.0 - s);
            }
        };
        self.push_op(out, x.shape().to_vec(), &[x], Box::new(backward))
    }

    /// Dense layer: `W x + b` for `x: [n]`, `W: [m,n]`, `b: [m]`.
    pub fn fully_connected(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let n = match x.shape() {
            [n] => *n,
            other => return Err(Error::shape(format!("fc input must be [n], got {other:?}"))),
        };
        let (m, wn) = match w.shape() {
            [m, wn] => (*m, *wn),
            other => return Err(Error::shape(format!("fc weights must be [m,n], got {other:?}"))),
        };
        if wn != n {
            return Err(Error::shape(format!("fc weights expect input {wn}, got {n}")));
        }
        if b.shape() != [m] {
            return Err(Error::shape(format!("fc bias must be [{m}], got {:?}", b.shape())));
        }
        let out = self.with_values(|vals| {
            let xv = &vals[x.id()];
            let wv = &vals[w.id()];
            let bv = &vals[b.id()];
            (0..m)
                .map(|i| {
                    let row = &wv[i * n..(i + 1) * n];
                    bv[i] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect::<Vec<_>>()
        });
        let (x_id, w_id, b_id) = (x.id(), w.id(), b.id());
        let (req_x, req_w, req_b) =
            (self.requires_grad(x), self.requires_grad(w), self.requires_grad(b));
        let backward = move |vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            if req_b {
                let gb = &mut grads[b_id];
                for i in 0..m {
                    gb[i] += gout[i];
                }
            }
            if req_w {
                let xv = &vals[x_id];
                let gw = &mut grads[w_id];
                for i in 0..m {
                    let g = gout[i];
                    let row = &mut gw[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] += g * xv[j];
                    }
                }
            }
            if req_x {
                let wv = &vals[w_id];
                let gx = &mut grads[x_id];
                for i in 0..m {
                    let g = gout[i];
                    let row = &wv[i * n..(i + 1) * n];
                    for j in 0..n {
                        gx[j] += g * row[j];
                    }
                }
            }
        };
        Ok(self.push_op(out, vec![m], &[x, w, b], Box::new(backward)))
    }

    /// Per-channel spatial mean: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = expect_3d(x, "global_avg_pool input")?;
        let area = (h * w) as f64;
        let out = self.with_values(|vals| {
            let xv = &vals[x.id()];
            (0..c)
                .map(|ci| xv[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / area)
                .collect::<Vec<_>>()
        });
        let x_id = x.id();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let gin = &mut grads[x_id];
            for ci in 0..c {
                let g = gout[ci] / area;
                for v in &mut gin[ci * h * w..(ci + 1) * h * w] {
                    *v += g;
                }
            }
        };
        Ok(self.push_op(out, vec![c], &[x], Box::new(backward)))
    }

    /// Stack `a` on top of `b` along the channel axis.
    pub fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ca, ha, wa) = expect_3d(a, "concat_channels lhs")?;
        let (cb, hb, wb) = expect_3d(b, "concat_channels rhs")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let out = self.with_values(|vals| {
            let mut out = Vec::with_capacity((ca + cb) * ha * wa);
            out.extend_from_slice(&vals[a.id()]);
            out.extend_from_slice(&vals[b.id()]);
            out
        });
        let (a_id, b_id) = (a.id(), b.id());
        let split = ca * ha * wa;
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            for (g, v) in grads[a_id].iter_mut().zip(&gout[..split]) {
                *g += v;
            }
            for (g, v) in grads[b_id].iter_mut().zip(&gout[split..]) {
                *g += v;
            }
        };
        Ok(self.push_op(out, vec![ca + cb, ha, wa], &[a, b], Box::new(backward)))
    }

    /// Contiguous channel slice `[start, start+count)` of a `[C,H,W]` tensor.
    pub fn slice_channels(&self, x: &Tensor, start: usize, count: usize) -> Result<Tensor> {
        let (c, h, w) = expect_3d(x, "slice_channels input")?;
        if start + count > c {
            return Err(Error::shape(format!(
                "channel slice [{start},{}) out of range for {c} channels",
                start + count
            )));
        }
        let plane = h * w;
        let out = self.with_values(|vals| {
            vals[x.id()][start * plane..(start + count) * plane].to_vec()
        });
        let x_id = x.id();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let gin = &mut grads[x_id][start * plane..(start + count) * plane];
            for (g, v) in gin.iter_mut().zip(gout) {
                *g += v;
            }
        };
        Ok(self.push_op(out, vec![count, h, w], &[x], Box::new(backward)))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = self.with_values(|vals| {
            vals[a.id()]
                .iter()
                .zip(&vals[b.id()])
                .map(|(x, y)| x + y)
                .collect::<Vec<_>>()
        });
        let (a_id, b_id) = (a.id(), b.id());
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            for (g, v) in grads[a_id].iter_mut().zip(gout) {
                *g += v;
            }
            for (g, v) in grads[b_id].iter_mut().zip(gout) {
                *g += v;
            }
        };
        Ok(self.push_op(out, a.shape().to_vec(), &[a, b], Box::new(backward)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = self.with_values(|vals| {
            vals[a.id()]
                .iter()
                .zip(&vals[b.id()])
                .map(|(x, y)| x * y)
                .collect::<Vec<_>>()
        });
        let (a_id, b_id) = (a.id(), b.id());
        let backward = move |vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            for i in 0..gout.len() {
                let (av, bv) = (vals[a_id][i], vals[b_id][i]);
                grads[a_id][i] += gout[i] * bv;
                grads[b_id][i] += gout[i] * av;
            }
        };
        Ok(self.push_op(out, a.shape().to_vec(), &[a, b], Box::new(backward)))
    }

    /// View as a rank-1 tensor; channel-major, row-major element order.
    pub fn flatten(&self, x: &Tensor) -> Tensor {
        let numel = x.numel();
        self.reshape(x, &[numel]).expect("flatten cannot fail")
    }

    /// Same data, new shape.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        let out = self.with_values(|vals| vals[x.id()].clone());
        let x_id = x.id();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            for (g, v) in grads[x_id].iter_mut().zip(gout) {
                *g += v;
            }
        };
        Ok(self.push_op(out, shape.to_vec(), &[x], Box::new(backward)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, x: &Tensor) -> Tensor {
        let out = self.with_values(|vals| vec![vals[x.id()].iter().sum::<f64>()]);
        let x_id = x.id();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let g = gout[0];
            for v in grads[x_id].iter_mut() {
                *v += g;
            }
        };
        self.push_op(out, vec![1], &[x], Box::new(backward))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        let out = self.with_values(|vals| vals[x.id()].iter().map(|v| v * c).collect::<Vec<_>>());
        let x_id = x.id();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            for (g, v) in grads[x_id].iter_mut().zip(gout) {
                *g += c * v;
            }
        };
        self.push_op(out, x.shape().to_vec(), &[x], Box::new(backward))
    }

    /// Concatenate rank-1 tensors into one rank-1 tensor.
    pub fn concat1d(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat1d needs at least one part"));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().len() != 1 {
                return Err(Error::shape(format!(
                    "concat1d parts must be rank 1, got {:?}",
                    p.shape()
                )));
            }
            lens.push(p.numel());
        }
        let out = self.with_values(|vals| {
            let mut out = Vec::with_capacity(lens.iter().sum());
            for p in parts {
                out.extend_from_slice(&vals[p.id()]);
            }
            out
        });
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let mut off = 0;
            for (idx, &len) in ids.iter().zip(&lens) {
                for (g, v) in grads[*idx].iter_mut().zip(&gout[off..off + len]) {
                    *g += v;
                }
                off += len;
            }
        };
        let shape = vec![parts.iter().map(|p| p.numel()).sum()];
        Ok(self.push_op(out, shape, parts, Box::new(backward)))
    }

    /// Mean binary cross-entropy of predicted probabilities against a
    /// 0/1 target vector. Probabilities are clamped to
    /// `[1e-12, 1 - 1e-12]` before the logs; the clamp is transparent to
    /// gradients.
    pub fn bce_loss(&self, probs: &Tensor, target: &[f64]) -> Result<Tensor> {
        let l = match probs.shape() {
            [l] => *l,
            other => {
                return Err(Error::shape(format!("bce_loss expects [L] probs, got {other:?}")))
            }
        };
        if target.len() != l {
            return Err(Error::shape(format!(
                "bce_loss target length {} does not match {l} probs",
                target.len()
            )));
        }
        const EPS: f64 = 1e-12;
        let out = self.with_values(|vals| {
            let p = &vals[probs.id()];
            let mut acc = 0.0;
            for i in 0..l {
                let pi = p[i].clamp(EPS, 1.0 - EPS);
                acc -= target[i] * pi.ln() + (1.0 - target[i]) * (1.0 - pi).ln();
            }
            vec![acc / l as f64]
        });
        let p_id = probs.id();
        let target = target.to_vec();
        let backward = move |vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let p = &vals[p_id];
            let gp = &mut grads[p_id];
            let g = gout[0] / l as f64;
            for i in 0..l {
                let pi = p[i].clamp(EPS, 1.0 - EPS);
                gp[i] += g * (-target[i] / pi + (1.0 - target[i]) / (1.0 - pi));
            }
        };
        Ok(self.push_op(out, vec![1], &[probs], Box::new(backward)))
    }

    /// Sampling grid for a scale+translation transform.
    ///
    /// `params` holds `(s_x, s_y, t_x, t_y)`. The source grid spans
    /// `[-1, 1]` inclusive along both axes (align-corners); each output
    /// point is `(s_x*x + t_x, s_y*y + t_y)`. Channel 0 of the result
    /// carries x coordinates, channel 1 carries y.
    pub fn affine_grid(&self, params: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        if params.shape() != [4] {
            return Err(Error::shape(format!(
                "affine_grid expects [4] params, got {:?}",
                params.shape()
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::contract("affine_grid needs H, W >= 2"));
        }
        let xs: Vec<f64> = (0..w).map(|j| -1.0 + 2.0 * j as f64 / (w - 1) as f64).collect();
        let ys: Vec<f64> = (0..h).map(|i| -1.0 + 2.0 * i as f64 / (h - 1) as f64).collect();
        let out = self.with_values(|vals| {
            let p = &vals[params.id()];
            let (sx, sy, tx, ty) = (p[0], p[1], p[2], p[3]);
            let mut out = vec![0.0; 2 * h * w];
            for i in 0..h {
                for j in 0..w {
                    out[i * w + j] = sx * xs[j] + tx;
                    out[h * w + i * w + j] = sy * ys[i] + ty;
                }
            }
            out
        });
        let p_id = params.id();
        let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let gp = &mut grads[p_id];
            let (mut gsx, mut gsy, mut gtx, mut gty) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let gx = gout[i * w + j];
                    let gy = gout[h * w + i * w + j];
                    gsx += gx * xs[j];
                    gtx += gx;
                    gsy += gy * ys[i];
                    gty += gy;
                }
            }
            gp[0] += gsx;
            gp[1] += gsy;
            gp[2] += gtx;
            gp[3] += gty;
        };
        Ok(self.push_op(out, vec![2, h, w], &[params], Box::new(backward)))
    }

    /// Bilinear resampling of `[C,H,W]` values at grid coordinates
    /// (`[2,Hg,Wg]`, normalized, x in channel 0).
    ///
    /// Coordinates outside `[-1, 1]` are clamped to the border, which also
    /// zeroes their coordinate gradient. Differentiable with respect to
    /// both the input values and the grid.
    pub fn grid_sample(&self, input: &Tensor, grid: &Tensor) -> Result<Tensor> {
        let (c, h, w) = expect_3d(input, "grid_sample input")?;
        let (gc, gh, gw) = expect_3d(grid, "grid_sample grid")?;
        if gc != 2 {
            return Err(Error::shape(format!(
                "grid must have 2 coordinate channels, got {gc}"
            )));
        }
        let out = self.with_values(|vals| {
            let x = &vals[input.id()];
            let g = &vals[grid.id()];
            let mut out = vec![0.0; c * gh * gw];
            for i in 0..gh {
                for j in 0..gw {
                    let s = sample_setup(g[i * gw + j], g[gh * gw + i * gw + j], h, w);
                    for ci in 0..c {
                        let base = ci * h * w;
                        let v00 = x[base + s.y0 * w + s.x0];
                        let v01 = x[base + s.y0 * w + s.x1];
                        let v10 = x[base + s.y1 * w + s.x0];
                        let v11 = x[base + s.y1 * w + s.x1];
                        out[(ci * gh + i) * gw + j] = (1.0 - s.fy)
                            * ((1.0 - s.fx) * v00 + s.fx * v01)
                            + s.fy * ((1.0 - s.fx) * v10 + s.fx * v11);
                    }
                }
            }
            out
        });
        let (in_id, g_id) = (input.id(), grid.id());
        let (req_in, req_grid) = (self.requires_grad(input), self.requires_grad(grid));
        let backward = move |vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
            let g = &vals[g_id];
            if req_in {
                let gin = &mut grads[in_id];
                for i in 0..gh {
                    for j in 0..gw {
                        let s = sample_setup(g[i * gw + j], g[gh * gw + i * gw + j], h, w);
                        for ci in 0..c {
                            let go = gout[(ci * gh + i) * gw + j];
                            let base = ci * h * w;
                            gin[base + s.y0 * w + s.x0] += go * (1.0 - s.fy) * (1.0 - s.fx);
                            gin[base + s.y0 * w + s.x1] += go * (1.0 - s.fy) * s.fx;
                            gin[base + s.y1 * w + s.x0] += go * s.fy * (1.0 - s.fx);
                            gin[base + s.y1 * w + s.x1] += go * s.fy * s.fx;
                        }
                    }
                }
            }
            if req_grid {
                let x = &vals[in_id];
                let ggrid = &mut grads[g_id];
                for i in 0..gh {
                    for j in 0..gw {
                        let cx = g[i * gw + j];
                        let cy = g[gh * gw + i * gw + j];
                        let s = sample_setup(cx, cy, h, w);
                        let mut dx = 0.0;
                        let mut dy = 0.0;
                        for ci in 0..c {
                            let go = gout[(ci * gh + i) * gw + j];
                            let base = ci * h * w;
                            let v00 = x[base + s.y0 * w + s.x0];
                            let v01 = x[base + s.y0 * w + s.x1];
                            let v10 = x[base + s.y1 * w + s.x0];
                            let v11 = x[base + s.y1 * w + s.x1];
                            dx += go * ((1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                            dy += go * ((1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                        }
                        // Clamped coordinates have no influence on the output.
                        if (-1.0..=1.0).contains(&cx) {
                            ggrid[i * gw + j] += dx * 0.5 * (w - 1) as f64;
                        }
                        if (-1.0..=1.0).contains(&cy) {
                            ggrid[gh * gw + i * gw + j] += dy * 0.5 * (h - 1) as f64;
                        }
                    }
                }
            }
        };
        Ok(self.push_op(out, vec![c, gh, gw], &[input, grid], Box::new(backward)))
    }
}

struct SampleSetup {
    x0: usize,
    x1: usize,
    fx: f64,
    y0: usize,
    y1: usize,
    fy: f64,
}

/// Resolve a normalized coordinate pair into neighbor indices and
/// interpolation fractions. Pixel coordinates within [`PIXEL_SNAP`] of an
/// integer snap onto it; the fraction is what multiplies the neighbor
/// difference, so the snap shifts values by at most `PIXEL_SNAP` times the
/// local contrast and leaves coordinate gradients untouched.
fn sample_setup(cx: f64, cy: f64, h: usize, w: usize) -> SampleSetup {
    let (x0, x1, fx) = axis_setup(cx, w);
    let (y0, y1, fy) = axis_setup(cy, h);
    SampleSetup { x0, x1, fx, y0, y1, fy }
}

fn axis_setup(coord: f64, size: usize) -> (usize, usize, f64) {
    let c = coord.clamp(-1.0, 1.0);
    let mut p = (c + 1.0) * 0.5 * (size - 1) as f64;
    if (p - p.round()).abs() < PIXEL_SNAP {
        p = p.round();
    }
    let p0 = p.floor();
    let i0 = (p0.max(0.0) as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    let f = (p - p0).clamp(0.0, 1.0);
    (i0, i1, f)
}
