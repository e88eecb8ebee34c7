//! Forward primitives and their reverse-mode rules.
//!
//! Each operation records an [`Op`] node holding handles to its inputs plus
//! whatever context backward needs (pooling argmaxes, batch-norm statistics,
//! softmax probabilities). All parallel reductions use a fixed chunk
//! structure so results are bit-identical regardless of thread count.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{Dims, Element, Inner, Mode, Tensor, PAR_CHUNK};
use crate::error::{Error, Result};

pub(crate) enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: Tensor<E>,
        weight: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        padding: super::PaddingMode,
        groups: usize,
    },
    MaxPool {
        input: Tensor<E>,
        /// Plane-relative (h*w) index of the max per output element.
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Tensor<E>,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: Tensor<E>,
    },
    GlobalMaxPool {
        input: Tensor<E>,
        argmax: Vec<u32>,
    },
    Relu {
        input: Tensor<E>,
    },
    Sigmoid {
        input: Tensor<E>,
    },
    Abs {
        input: Tensor<E>,
    },
    BatchNorm {
        input: Tensor<E>,
        scale: Tensor<E>,
        shift: Tensor<E>,
        mean: Vec<E>,
        invstd: Vec<E>,
        train: bool,
    },
    Linear {
        input: Tensor<E>,
        weight: Tensor<E>,
        bias: Option<Tensor<E>>,
    },
    Add {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Mul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Scale {
        input: Tensor<E>,
        factor: Tensor<E>,
    },
    Reshape {
        input: Tensor<E>,
    },
    Sum {
        input: Tensor<E>,
    },
    CrossEntropy {
        logits: Tensor<E>,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

impl<E: Element> Op<E> {
    pub(crate) fn inputs(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::MaxPool { input, .. }
            | Op::AvgPool { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::GlobalMaxPool { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Abs { input }
            | Op::Reshape { input }
            | Op::Sum { input }
            | Op::Scale { input, .. } => {
                let mut v = vec![input.clone()];
                if let Op::Scale { factor, .. } = self {
                    v.push(factor.clone());
                }
                v
            }
            Op::BatchNorm {
                input, scale, shift, ..
            } => vec![input.clone(), scale.clone(), shift.clone()],
            Op::Linear {
                input, weight, bias, ..
            } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::Add { a, b } | Op::Mul { a, b } => vec![a.clone(), b.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }

    pub(crate) fn tracks(&self) -> bool {
        self.inputs().iter().any(|t| t.tracks())
    }
}

/// Deterministic sum: fixed-size chunk partials folded in order.
pub(crate) fn det_sum<E: Element>(vals: &[E]) -> E {
    if vals.len() <= PAR_CHUNK {
        return vals.iter().fold(E::zero(), |acc, &v| acc + v);
    }
    let partials: Vec<E> = vals
        .par_chunks(PAR_CHUNK)
        .map(|c| c.iter().fold(E::zero(), |acc, &v| acc + v))
        .collect();
    partials.iter().fold(E::zero(), |acc, &v| acc + v)
}

pub(crate) fn unary_map<E: Element>(src: &[E], f: impl Fn(E) -> E + Sync) -> Vec<E> {
    if src.len() <= PAR_CHUNK {
        return src.iter().map(|&v| f(v)).collect();
    }
    let mut out = vec![E::zero(); src.len()];
    out.par_chunks_mut(PAR_CHUNK)
        .zip(src.par_chunks(PAR_CHUNK))
        .for_each(|(o, s)| {
            for (oi, &si) in o.iter_mut().zip(s) {
                *oi = f(si);
            }
        });
    out
}

fn binary_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAR_CHUNK {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![E::zero(); a.len()];
    out.par_chunks_mut(PAR_CHUNK)
        .zip(a.par_chunks(PAR_CHUNK).zip(b.par_chunks(PAR_CHUNK)))
        .for_each(|(o, (xa, xb))| {
            for ((oi, &x), &y) in o.iter_mut().zip(xa).zip(xb) {
                *oi = f(x, y);
            }
        });
    out
}

fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Resolves broadcast dims: each axis must match or be 1 on one side.
fn broadcast_dims(op: &'static str, a: Dims, b: Dims) -> Result<Dims> {
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (
        pick(a.n, b.n),
        pick(a.c, b.c),
        pick(a.h, b.h),
        pick(a.w, b.w),
    ) {
        (Some(n), Some(c), Some(h), Some(w)) => Ok(Dims::new(n, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("cannot broadcast {a} with {b}"),
        )),
    }
}

#[inline]
fn bcast_offset(d: Dims, n: usize, c: usize, h: usize, w: usize) -> usize {
    d.offset(
        if d.n == 1 { 0 } else { n },
        if d.c == 1 { 0 } else { c },
        if d.h == 1 { 0 } else { h },
        if d.w == 1 { 0 } else { w },
    )
}

fn broadcast_eval<E: Element>(a: &Tensor<E>, b: &Tensor<E>, out: Dims, f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    let ad = a.dims();
    let bd = b.dims();
    let av = a.data();
    let bv = b.data();
    if ad == bd {
        return binary_map(&av, &bv, f);
    }
    let mut data = vec![E::zero(); out.count()];
    let spatial = out.h * out.w;
    // Parallel over (n, c) planes; writes are disjoint.
    data.par_chunks_mut(spatial).enumerate().for_each(|(plane, chunk)| {
        let n = plane / out.c;
        let c = plane % out.c;
        let mut i = 0;
        for h in 0..out.h {
            for w in 0..out.w {
                let x = av[bcast_offset(ad, n, c, h, w)];
                let y = bv[bcast_offset(bd, n, c, h, w)];
                chunk[i] = f(x, y);
                i += 1;
            }
        }
    });
    data
}

/// Accumulates `per_out(n,c,h,w)` into a buffer shaped like `target`,
/// summing over broadcast axes. Serial; reduction order is fixed.
fn broadcast_backward<E: Element>(
    target: Dims,
    out: Dims,
    mut per_out: impl FnMut(usize, usize, usize, usize) -> E,
) -> Vec<E> {
    let mut acc = vec![E::zero(); target.count()];
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                for w in 0..out.w {
                    acc[bcast_offset(target, n, c, h, w)] += per_out(n, c, h, w);
                }
            }
        }
    }
    acc
}

impl<E: Element> Tensor<E> {
    pub fn relu(&self) -> Result<Tensor<E>> {
        let data = unary_map(&self.data(), |v| if v > E::zero() { v } else { E::zero() });
        Tensor::from_op(self.dims(), data, "relu", Op::Relu { input: self.clone() })
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        let data = unary_map(&self.data(), sigmoid_scalar);
        Tensor::from_op(self.dims(), data, "sigmoid", Op::Sigmoid { input: self.clone() })
    }

    pub fn abs(&self) -> Result<Tensor<E>> {
        let data = unary_map(&self.data(), |v| v.abs());
        Tensor::from_op(self.dims(), data, "abs", Op::Abs { input: self.clone() })
    }

    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Tensor<E>> {
        let (out_dims, results) = pool_forward(self, window, stride, "max_pool2d", true)?;
        let (data, argmax): (Vec<E>, Vec<u32>) = results;
        Tensor::from_op(
            out_dims,
            data,
            "max_pool2d",
            Op::MaxPool {
                input: self.clone(),
                argmax,
            },
        )
    }

    pub fn avg_pool2d(&self, window: usize, stride: usize) -> Result<Tensor<E>> {
        let (out_dims, (data, _)) = pool_forward(self, window, stride, "avg_pool2d", false)?;
        Tensor::from_op(
            out_dims,
            data,
            "avg_pool2d",
            Op::AvgPool {
                input: self.clone(),
                window,
                stride,
            },
        )
    }

    /// Per-channel mean over all spatial positions; output `(n, c, 1, 1)`.
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let d = self.dims();
        let src = self.data();
        let spatial = d.spatial();
        let inv = E::one() / E::from_f64(spatial as f64);
        let mut data = vec![E::zero(); d.n * d.c];
        data.par_iter_mut().enumerate().for_each(|(plane, out)| {
            let base = plane * spatial;
            *out = src[base..base + spatial]
                .iter()
                .fold(E::zero(), |acc, &v| acc + v)
                * inv;
        });
        drop(src);
        Tensor::from_op(
            Dims::new(d.n, d.c, 1, 1),
            data,
            "global_avg_pool",
            Op::GlobalAvgPool { input: self.clone() },
        )
    }

    /// Per-channel max over all spatial positions; output `(n, c, 1, 1)`.
    pub fn global_max_pool(&self) -> Result<Tensor<E>> {
        let d = self.dims();
        let src = self.data();
        let spatial = d.spatial();
        let mut data = vec![E::zero(); d.n * d.c];
        let mut argmax = vec![0u32; d.n * d.c];
        data.par_iter_mut()
            .zip(argmax.par_iter_mut())
            .enumerate()
            .for_each(|(plane, (out, arg))| {
                let base = plane * spatial;
                let mut best = src[base];
                let mut best_i = 0usize;
                for (i, &v) in src[base..base + spatial].iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                *out = best;
                *arg = best_i as u32;
            });
        drop(src);
        Tensor::from_op(
            Dims::new(d.n, d.c, 1, 1),
            data,
            "global_max_pool",
            Op::GlobalMaxPool {
                input: self.clone(),
                argmax,
            },
        )
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// Train mode normalizes by batch statistics and updates the running
    /// buffers in place; Eval mode reads the running buffers and mutates
    /// nothing. `scale`/`shift`/running buffers all have dims `(1, c, 1, 1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        scale: &Tensor<E>,
        shift: &Tensor<E>,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        mode: Mode,
        momentum: E,
        epsilon: E,
    ) -> Result<Tensor<E>> {
        let d = self.dims();
        for (name, t) in [
            ("scale", scale),
            ("shift", shift),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.dims() != Dims::new(1, d.c, 1, 1) {
                return Err(Error::shape(
                    "batch_norm",
                    format!(
                        "{name} dims {} do not match input channels of {}",
                        t.dims(),
                        d
                    ),
                ));
            }
        }
        if mode == Mode::Train && d.n < 2 {
            return Err(Error::Config(format!(
                "batch_norm requires batch >= 2 in Train mode (got {}); use Eval mode or a larger batch",
                d.n
            )));
        }

        let spatial = d.spatial();
        let per_channel = d.n * spatial;
        let src = self.data();

        let (mean, invstd) = match mode {
            Mode::Train => {
                let mut mean = vec![E::zero(); d.c];
                let mut var = vec![E::zero(); d.c];
                mean.par_iter_mut()
                    .zip(var.par_iter_mut())
                    .enumerate()
                    .for_each(|(c, (m, v))| {
                        let mut sum = E::zero();
                        for n in 0..d.n {
                            let base = (n * d.c + c) * spatial;
                            for &x in &src[base..base + spatial] {
                                sum += x;
                            }
                        }
                        let mu = sum / E::from_f64(per_channel as f64);
                        let mut sq = E::zero();
                        for n in 0..d.n {
                            let base = (n * d.c + c) * spatial;
                            for &x in &src[base..base + spatial] {
                                let diff = x - mu;
                                sq += diff * diff;
                            }
                        }
                        *m = mu;
                        *v = sq / E::from_f64(per_channel as f64);
                    });

                // Update running stats (unbiased variance, PyTorch convention).
                let bessel = E::from_f64(per_channel as f64 / (per_channel as f64 - 1.0));
                {
                    let mut rm = running_mean.inner.data.write().expect("lock");
                    let mut rv = running_var.inner.data.write().expect("lock");
                    let keep = E::one() - momentum;
                    for c in 0..d.c {
                        rm[c] = keep * rm[c] + momentum * mean[c];
                        rv[c] = keep * rv[c] + momentum * var[c] * bessel;
                    }
                }

                let invstd: Vec<E> = var.iter().map(|&v| E::one() / (v + epsilon).sqrt()).collect();
                (mean, invstd)
            }
            Mode::Eval => {
                let mean = running_mean.to_vec();
                let invstd: Vec<E> = running_var
                    .to_vec()
                    .iter()
                    .map(|&v| E::one() / (v + epsilon).sqrt())
                    .collect();
                (mean, invstd)
            }
        };

        let sc = scale.data();
        let sh = shift.data();
        let mut data = vec![E::zero(); d.count()];
        data.par_chunks_mut(spatial).enumerate().for_each(|(plane, chunk)| {
            let c = plane % d.c;
            let base = plane * spatial;
            let (m, is, g, b) = (mean[c], invstd[c], sc[c], sh[c]);
            for (o, &x) in chunk.iter_mut().zip(&src[base..base + spatial]) {
                *o = (x - m) * is * g + b;
            }
        });
        drop(src);
        drop(sc);
        drop(sh);

        Tensor::from_op(
            d,
            data,
            "batch_norm",
            Op::BatchNorm {
                input: self.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
                mean,
                invstd,
                train: mode == Mode::Train,
            },
        )
    }

    /// Affine map on flattened features: input `(n, d)`, weight `(k, d)`,
    /// bias `(k)`; output `(n, k)`. Rank-4 dims carry the 2-D shapes with
    /// `h = w = 1`.
    pub fn linear(&self, weight: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let xd = self.dims();
        let wd = weight.dims();
        if xd.h != 1 || xd.w != 1 || wd.h != 1 || wd.w != 1 {
            return Err(Error::shape(
                "linear",
                format!("expects flattened inputs, got input {xd} weight {wd}"),
            ));
        }
        if xd.c != wd.c {
            return Err(Error::shape(
                "linear",
                format!(
                    "inner dimension mismatch: input {} has d={}, weight {} has d={}",
                    xd, xd.c, wd, wd.c
                ),
            ));
        }
        if let Some(b) = bias {
            if b.dims() != Dims::new(1, wd.n, 1, 1) {
                return Err(Error::shape(
                    "linear",
                    format!("bias dims {} do not match output features {}", b.dims(), wd.n),
                ));
            }
        }
        let (n, d, k) = (xd.n, xd.c, wd.n);
        let x = self.data();
        let w = weight.data();
        let mut out = vec![E::zero(); n * k];
        {
            let xv = ndarray::ArrayView2::from_shape((n, d), &x[..]).expect("view");
            let wv = ndarray::ArrayView2::from_shape((k, d), &w[..]).expect("view");
            let mut ov = ndarray::ArrayViewMut2::from_shape((n, k), &mut out[..]).expect("view");
            ndarray::linalg::general_mat_mul(E::one(), &xv, &wv.t(), E::zero(), &mut ov);
        }
        if let Some(b) = bias {
            let bv = b.data();
            for row in out.chunks_mut(k) {
                for (o, &bi) in row.iter_mut().zip(bv.iter()) {
                    *o += bi;
                }
            }
        }
        drop(x);
        drop(w);
        Tensor::from_op(
            Dims::new(n, k, 1, 1),
            out,
            "linear",
            Op::Linear {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
            },
        )
    }

    /// Elementwise addition with match-or-1 broadcasting per axis.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let out = broadcast_dims("add", self.dims(), other.dims())?;
        let data = broadcast_eval(self, other, out, |a, b| a + b);
        Tensor::from_op(
            out,
            data,
            "add",
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    /// Elementwise multiplication with match-or-1 broadcasting per axis.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let out = broadcast_dims("mul", self.dims(), other.dims())?;
        let data = broadcast_eval(self, other, out, |a, b| a * b);
        Tensor::from_op(
            out,
            data,
            "mul",
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    /// Multiplies by a learnable scalar (a 1-element tensor).
    pub fn scale_by(&self, factor: &Tensor<E>) -> Result<Tensor<E>> {
        if factor.dims().count() != 1 {
            return Err(Error::shape(
                "scale",
                format!("factor must be scalar, got {}", factor.dims()),
            ));
        }
        let alpha = factor.data()[0];
        if !alpha.is_finite() {
            return Err(Error::Numeric { op: "scale" });
        }
        let data = unary_map(&self.data(), |v| v * alpha);
        Tensor::from_op(
            self.dims(),
            data,
            "scale",
            Op::Scale {
                input: self.clone(),
                factor: factor.clone(),
            },
        )
    }

    /// Same data, different dims (element count preserved).
    pub fn reshape(&self, dims: Dims) -> Result<Tensor<E>> {
        if dims.count() != self.dims().count() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {} into {}", self.dims(), dims),
            ));
        }
        Tensor::from_op(dims, self.to_vec(), "reshape", Op::Reshape { input: self.clone() })
    }

    /// Flattens `(n, c, h, w)` to `(n, c*h*w)`.
    pub fn flatten(&self) -> Result<Tensor<E>> {
        let d = self.dims();
        self.reshape(Dims::new(d.n, d.c * d.h * d.w, 1, 1))
    }

    /// Scalar sum of all elements.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let total = det_sum(&self.data());
        Tensor::from_op(
            Dims::new(1, 1, 1, 1),
            vec![total],
            "sum",
            Op::Sum { input: self.clone() },
        )
    }
}

fn pool_forward<E: Element>(
    input: &Tensor<E>,
    window: usize,
    stride: usize,
    op: &'static str,
    is_max: bool,
) -> Result<(Dims, (Vec<E>, Vec<u32>))> {
    let d = input.dims();
    if window == 0 || stride == 0 {
        return Err(Error::shape(op, "window and stride must be positive".to_string()));
    }
    if window > d.h || window > d.w {
        return Err(Error::shape(
            op,
            format!("window {window} exceeds spatial extent {}x{}", d.h, d.w),
        ));
    }
    let oh = (d.h - window) / stride + 1;
    let ow = (d.w - window) / stride + 1;
    let out_dims = Dims::new(d.n, d.c, oh, ow);
    let src = input.data();
    let spatial_in = d.spatial();
    let spatial_out = oh * ow;
    let mut data = vec![E::zero(); out_dims.count()];
    let mut argmax = vec![0u32; if is_max { out_dims.count() } else { 0 }];
    let inv_area = E::one() / E::from_f64((window * window) as f64);

    let work = |plane: usize, chunk: &mut [E], args: Option<&mut [u32]>| {
        let base = plane * spatial_in;
        let plane_src = &src[base..base + spatial_in];
        let mut arg_store = args;
        for ohi in 0..oh {
            for owi in 0..ow {
                let h0 = ohi * stride;
                let w0 = owi * stride;
                if is_max {
                    let mut best = plane_src[h0 * d.w + w0];
                    let mut best_i = h0 * d.w + w0;
                    for dh in 0..window {
                        let row = (h0 + dh) * d.w;
                        for dw in 0..window {
                            let idx = row + w0 + dw;
                            let v = plane_src[idx];
                            if v > best {
                                best = v;
                                best_i = idx;
                            }
                        }
                    }
                    chunk[ohi * ow + owi] = best;
                    if let Some(args) = arg_store.as_deref_mut() {
                        args[ohi * ow + owi] = best_i as u32;
                    }
                } else {
                    let mut sum = E::zero();
                    for dh in 0..window {
                        let row = (h0 + dh) * d.w;
                        for dw in 0..window {
                            sum += plane_src[row + w0 + dw];
                        }
                    }
                    chunk[ohi * ow + owi] = sum * inv_area;
                }
            }
        }
    };

    if is_max {
        data.par_chunks_mut(spatial_out)
            .zip(argmax.par_chunks_mut(spatial_out))
            .enumerate()
            .for_each(|(plane, (chunk, args))| work(plane, chunk, Some(args)));
    } else {
        data.par_chunks_mut(spatial_out)
            .enumerate()
            .for_each(|(plane, chunk)| work(plane, chunk, None));
    }
    drop(src);
    Ok((out_dims, (data, argmax)))
}

/// Softmax cross-entropy, mean over the batch; log-sum-exp stabilized.
/// Logits are `(n, k)`; labels are class indices.
pub fn softmax_cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    let d = logits.dims();
    if d.h != 1 || d.w != 1 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expects (n, k) logits, got {d}"),
        ));
    }
    let (n, k) = (d.n, d.c);
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!(
            "label {bad} outside valid classes 0..{k}"
        )));
    }
    let src = logits.data();
    let mut probs = vec![E::zero(); n * k];
    let mut total = E::zero();
    for i in 0..n {
        let row = &src[i * k..(i + 1) * k];
        let max = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
        let mut denom = E::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        for (j, &v) in row.iter().enumerate() {
            probs[i * k + j] = (v - lse).exp();
        }
        total += lse - row[labels[i]];
    }
    drop(src);
    let loss = total / E::from_f64(n as f64);
    Tensor::from_op(
        Dims::new(1, 1, 1, 1),
        vec![loss],
        "softmax_cross_entropy",
        Op::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        },
    )
}

/// Adds `delta` into the per-pass gradient buffer of `t` (if it tracks).
fn contribute<E: Element>(pass: &mut HashMap<u64, Vec<E>>, t: &Tensor<E>, delta: Vec<E>) {
    if !t.tracks() {
        return;
    }
    match pass.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (g, d) in e.get_mut().iter_mut().zip(&delta) {
                *g += *d;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(delta);
        }
    }
}

pub(crate) fn backprop<E: Element>(
    node: &Inner<E>,
    out_grad: &[E],
    pass: &mut HashMap<u64, Vec<E>>,
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
            groups,
        } => {
            let grads = super::conv::conv2d_backward(
                input,
                weight,
                bias.as_ref(),
                *stride,
                *padding,
                *groups,
                node.dims,
                out_grad,
            )?;
            contribute(pass, input, grads.input);
            contribute(pass, weight, grads.weight);
            if let (Some(b), Some(db)) = (bias.as_ref(), grads.bias) {
                contribute(pass, b, db);
            }
        }
        Op::MaxPool { input, argmax } => {
            let d = input.dims();
            let spatial_in = d.spatial();
            let spatial_out = node.dims.spatial();
            let mut dx = vec![E::zero(); d.count()];
            for plane in 0..d.n * d.c {
                let base_in = plane * spatial_in;
                let base_out = plane * spatial_out;
                for i in 0..spatial_out {
                    dx[base_in + argmax[base_out + i] as usize] += out_grad[base_out + i];
                }
            }
            contribute(pass, input, dx);
        }
        Op::AvgPool {
            input,
            window,
            stride,
        } => {
            let d = input.dims();
            let od = node.dims;
            let inv_area = E::one() / E::from_f64((window * window) as f64);
            let mut dx = vec![E::zero(); d.count()];
            for plane in 0..d.n * d.c {
                let base_in = plane * d.spatial();
                let base_out = plane * od.spatial();
                for ohi in 0..od.h {
                    for owi in 0..od.w {
                        let g = out_grad[base_out + ohi * od.w + owi] * inv_area;
                        for dh in 0..*window {
                            let row = base_in + (ohi * stride + dh) * d.w + owi * stride;
                            for dw in 0..*window {
                                dx[row + dw] += g;
                            }
                        }
                    }
                }
            }
            contribute(pass, input, dx);
        }
        Op::GlobalAvgPool { input } => {
            let d = input.dims();
            let spatial = d.spatial();
            let inv = E::one() / E::from_f64(spatial as f64);
            let mut dx = vec![E::zero(); d.count()];
            dx.chunks_mut(spatial).enumerate().for_each(|(plane, chunk)| {
                let g = out_grad[plane] * inv;
                for v in chunk {
                    *v = g;
                }
            });
            contribute(pass, input, dx);
        }
        Op::GlobalMaxPool { input, argmax } => {
            let d = input.dims();
            let spatial = d.spatial();
            let mut dx = vec![E::zero(); d.count()];
            for plane in 0..d.n * d.c {
                dx[plane * spatial + argmax[plane] as usize] += out_grad[plane];
            }
            contribute(pass, input, dx);
        }
        Op::Relu { input } => {
            let x = input.data();
            let dx = binary_map(out_grad, &x, |g, v| if v > E::zero() { g } else { E::zero() });
            drop(x);
            contribute(pass, input, dx);
        }
        Op::Sigmoid { input } => {
            let y = node.data.read().expect("lock");
            let dx = binary_map(out_grad, &y, |g, yv| g * yv * (E::one() - yv));
            drop(y);
            contribute(pass, input, dx);
        }
        Op::Abs { input } => {
            let x = input.data();
            let dx = binary_map(out_grad, &x, |g, v| {
                if v > E::zero() {
                    g
                } else if v < E::zero() {
                    -g
                } else {
                    E::zero()
                }
            });
            drop(x);
            contribute(pass, input, dx);
        }
        Op::BatchNorm {
            input,
            scale,
            shift,
            mean,
            invstd,
            train,
        } => {
            let d = input.dims();
            let spatial = d.spatial();
            let per_channel = d.n * spatial;
            let x = input.data();
            let sc = scale.data();

            let mut dscale = vec![E::zero(); d.c];
            let mut dshift = vec![E::zero(); d.c];
            dscale
                .par_iter_mut()
                .zip(dshift.par_iter_mut())
                .enumerate()
                .for_each(|(c, (ds, db))| {
                    let mut s2 = E::zero();
                    let mut s = E::zero();
                    for n in 0..d.n {
                        let base = (n * d.c + c) * spatial;
                        for i in 0..spatial {
                            let g = out_grad[base + i];
                            let xhat = (x[base + i] - mean[c]) * invstd[c];
                            s2 += g * xhat;
                            s += g;
                        }
                    }
                    *ds = s2;
                    *db = s;
                });

            let mut dx = vec![E::zero(); d.count()];
            if *train {
                let inv_n = E::one() / E::from_f64(per_channel as f64);
                dx.par_chunks_mut(spatial).enumerate().for_each(|(plane, chunk)| {
                    let c = plane % d.c;
                    let base = plane * spatial;
                    let k = sc[c] * invstd[c] * inv_n;
                    let nn = E::from_f64(per_channel as f64);
                    for (i, o) in chunk.iter_mut().enumerate() {
                        let g = out_grad[base + i];
                        let xhat = (x[base + i] - mean[c]) * invstd[c];
                        *o = k * (nn * g - dshift[c] - xhat * dscale[c]);
                    }
                });
            } else {
                dx.par_chunks_mut(spatial).enumerate().for_each(|(plane, chunk)| {
                    let c = plane % d.c;
                    let base = plane * spatial;
                    let k = sc[c] * invstd[c];
                    for (i, o) in chunk.iter_mut().enumerate() {
                        *o = out_grad[base + i] * k;
                    }
                });
            }
            drop(x);
            drop(sc);
            contribute(pass, input, dx);
            let cdims = Dims::new(1, d.c, 1, 1);
            debug_assert_eq!(cdims.count(), dscale.len());
            contribute(pass, scale, dscale);
            contribute(pass, shift, dshift);
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let xd = input.dims();
            let wd = weight.dims();
            let (n, dfeat, k) = (xd.n, xd.c, wd.n);
            let x = input.data();
            let w = weight.data();
            let gv = ndarray::ArrayView2::from_shape((n, k), out_grad).expect("view");

            let mut dx = vec![E::zero(); n * dfeat];
            {
                let wv = ndarray::ArrayView2::from_shape((k, dfeat), &w[..]).expect("view");
                let mut dxv = ndarray::ArrayViewMut2::from_shape((n, dfeat), &mut dx[..]).expect("view");
                ndarray::linalg::general_mat_mul(E::one(), &gv, &wv, E::zero(), &mut dxv);
            }
            let mut dw = vec![E::zero(); k * dfeat];
            {
                let xv = ndarray::ArrayView2::from_shape((n, dfeat), &x[..]).expect("view");
                let mut dwv = ndarray::ArrayViewMut2::from_shape((k, dfeat), &mut dw[..]).expect("view");
                ndarray::linalg::general_mat_mul(E::one(), &gv.t(), &xv, E::zero(), &mut dwv);
            }
            drop(x);
            drop(w);
            contribute(pass, input, dx);
            contribute(pass, weight, dw);
            if let Some(b) = bias {
                let mut db = vec![E::zero(); k];
                for row in out_grad.chunks(k) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                contribute(pass, b, db);
            }
        }
        Op::Add { a, b } => {
            let od = node.dims;
            for t in [a, b] {
                if !t.tracks() {
                    continue;
                }
                let delta = if t.dims() == od {
                    out_grad.to_vec()
                } else {
                    broadcast_backward(t.dims(), od, |n, c, h, w| out_grad[od.offset(n, c, h, w)])
                };
                contribute(pass, t, delta);
            }
        }
        Op::Mul { a, b } => {
            let od = node.dims;
            for (t, other) in [(a, b), (b, a)] {
                if !t.tracks() {
                    continue;
                }
                let ov = other.data();
                let odims = other.dims();
                let delta = if t.dims() == od && odims == od {
                    binary_map(out_grad, &ov, |g, v| g * v)
                } else {
                    broadcast_backward(t.dims(), od, |n, c, h, w| {
                        out_grad[od.offset(n, c, h, w)] * ov[bcast_offset(odims, n, c, h, w)]
                    })
                };
                drop(ov);
                contribute(pass, t, delta);
            }
        }
        Op::Scale { input, factor } => {
            let alpha = factor.data()[0];
            if factor.tracks() {
                let x = input.data();
                let prods = binary_map(out_grad, &x, |g, v| g * v);
                drop(x);
                contribute(pass, factor, vec![det_sum(&prods)]);
            }
            let dx = unary_map(out_grad, |g| g * alpha);
            contribute(pass, input, dx);
        }
        Op::Reshape { input } => {
            contribute(pass, input, out_grad.to_vec());
        }
        Op::Sum { input } => {
            let g = out_grad[0];
            contribute(pass, input, vec![g; input.dims().count()]);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let d = logits.dims();
            let (n, k) = (d.n, d.c);
            let g = out_grad[0] / E::from_f64(n as f64);
            let mut dl = vec![E::zero(); n * k];
            for i in 0..n {
                for j in 0..k {
                    let indicator = if labels[i] == j { E::one() } else { E::zero() };
                    dl[i * k + j] = (probs[i * k + j] - indicator) * g;
                }
            }
            contribute(pass, logits, dl);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(Dims::new(dims.0, dims.1, dims.2, dims.3), data).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_hand_cases() {
        let x = t((1, 1, 1, 3), vec![-3.0, 0.0, 3.0]);
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 0.0, 3.0]);
        let s = t((1, 1, 1, 1), vec![0.0]).sigmoid().unwrap();
        assert_eq!(s.item().unwrap(), 0.5);
        // Strictly inside (0, 1) for moderate magnitudes.
        let probe = t((1, 1, 1, 2), vec![-12.0, 12.0]).sigmoid().unwrap().to_vec();
        assert!(probe[0] > 0.0 && probe[1] < 1.0);
    }

    #[test]
    fn pooling_hand_case() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.max_pool2d(2, 2).unwrap().item().unwrap(), 4.0);
        assert_eq!(x.avg_pool2d(2, 2).unwrap().item().unwrap(), 2.5);
    }

    #[test]
    fn pooling_on_constant_tensor() {
        let x = Tensor::<f32>::full(Dims::new(2, 3, 6, 6), 1.25).unwrap();
        for v in x.max_pool2d(2, 2).unwrap().to_vec() {
            assert_eq!(v, 1.25);
        }
        for v in x.avg_pool2d(2, 2).unwrap().to_vec() {
            assert!((v - 1.25).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_window_too_large_is_shape_error() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2));
        assert!(matches!(
            x.max_pool2d(3, 1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn global_pools_ramp_and_constant() {
        let ramp: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let x = t((1, 1, 3, 3), ramp);
        assert_eq!(x.global_avg_pool().unwrap().item().unwrap(), 4.0);
        assert_eq!(x.global_max_pool().unwrap().item().unwrap(), 8.0);

        // Per-channel constants force avg == max, the DP-gate equality case.
        let mut data = vec![0.0f32; 2 * 3 * 4 * 4];
        for c in 0..3 {
            for i in 0..2 * 4 * 4 {
                let n = i / 16;
                data[(n * 3 + c) * 16 + (i % 16)] = c as f32 + 0.5;
            }
        }
        let x = t((2, 3, 4, 4), data);
        assert_eq!(
            x.global_avg_pool().unwrap().to_vec(),
            x.global_max_pool().unwrap().to_vec()
        );
    }

    #[test]
    fn batch_norm_definition_and_eval_purity() {
        let mut rng_vals = Vec::new();
        let mut seed = 123u64;
        for _ in 0..4 * 3 * 5 * 5 {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            rng_vals.push(((seed >> 33) as f32 / (1u64 << 31) as f32) * 4.0 - 2.0);
        }
        let x = t((4, 3, 5, 5), rng_vals);
        let ones = Tensor::full(Dims::new(1, 3, 1, 1), 1.0f32).unwrap();
        let zeros = Tensor::zeros(Dims::new(1, 3, 1, 1));
        let rm = Tensor::zeros(Dims::new(1, 3, 1, 1));
        let rv = Tensor::full(Dims::new(1, 3, 1, 1), 1.0f32).unwrap();
        let y = x
            .batch_norm(&ones, &zeros, &rm, &rv, Mode::Train, 0.1, 1e-5)
            .unwrap();
        let out = y.to_vec();
        let spatial = 25;
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for n in 0..4 {
                for i in 0..spatial {
                    let v = out[(n * 3 + c) * spatial + i] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let count = (4 * spatial) as f64;
            let mean = sum / count;
            let var = sq / count - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }

        // Eval twice: identical outputs, no state mutation.
        let rm_snapshot = rm.to_vec();
        let e1 = x
            .batch_norm(&ones, &zeros, &rm, &rv, Mode::Eval, 0.1, 1e-5)
            .unwrap();
        let e2 = x
            .batch_norm(&ones, &zeros, &rm, &rv, Mode::Eval, 0.1, 1e-5)
            .unwrap();
        assert_eq!(e1.to_vec(), e2.to_vec());
        assert_eq!(rm.to_vec(), rm_snapshot);
    }

    #[test]
    fn batch_norm_batch_of_one_is_config_error() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 2, 3, 3));
        let ones = Tensor::full(Dims::new(1, 2, 1, 1), 1.0f32).unwrap();
        let zeros = Tensor::zeros(Dims::new(1, 2, 1, 1));
        let err = x
            .batch_norm(&ones, &zeros, &zeros, &ones, Mode::Train, 0.1, 1e-5)
            .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("Eval"), "message should suggest Eval: {msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = t((2, 3, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = t((3, 3, 1, 1), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero_bias = Tensor::zeros(Dims::new(1, 3, 1, 1));
        let y = x.linear(&eye, Some(&zero_bias)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let zeros_w = Tensor::zeros(Dims::new(2, 3, 1, 1));
        let bias = t((1, 2, 1, 1), vec![0.25, -1.5]);
        let y = x.linear(&zeros_w, Some(&bias)).unwrap();
        assert_eq!(y.to_vec(), vec![0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn linear_inner_dim_mismatch() {
        let x = Tensor::<f32>::zeros(Dims::new(2, 3, 1, 1));
        let w = Tensor::<f32>::zeros(Dims::new(4, 5, 1, 1));
        assert!(matches!(x.linear(&w, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = t((1, 2, 1, 1), vec![0.0, 0.0]);
        let loss = softmax_cross_entropy(&logits, &[1]).unwrap().item().unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);

        let logits = t((1, 2, 1, 1), vec![20.0, -20.0]);
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap().item().unwrap();
        assert!(loss < 1e-8, "saturated correct loss {loss}");

        let logits = t((1, 2, 1, 1), vec![0.0, 0.0]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn broadcast_add_and_mul() {
        let a = t((1, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = t((1, 2, 1, 1), vec![10.0, 100.0]);
        let sum = a.add(&b).unwrap();
        assert_eq!(
            sum.to_vec(),
            vec![11.0, 12.0, 13.0, 14.0, 105.0, 106.0, 107.0, 108.0]
        );
        let prod = a.mul(&b).unwrap();
        assert_eq!(
            prod.to_vec(),
            vec![10.0, 20.0, 30.0, 40.0, 500.0, 600.0, 700.0, 800.0]
        );
        let bad = t((1, 3, 1, 1), vec![1.0, 2.0, 3.0]);
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn broadcast_backward_reduces_over_spatial() {
        let a = t((1, 2, 2, 2), vec![1.0; 8]);
        let b = t((1, 2, 1, 1), vec![3.0, 4.0]).requires_grad();
        let y = a.mul(&b).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        // d/db sums a over the broadcast spatial cells: 4 ones per channel.
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn scale_by_scalar_param() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let alpha = Tensor::scalar(2.0f32).unwrap().requires_grad();
        let y = x.scale_by(&alpha).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(alpha.grad().unwrap(), vec![10.0]);
    }
}
