//! Naive reference implementations.
//!
//! Every routine here is written straight from the defining formula with
//! plain nested loops and no shortcuts, independent of the optimized paths
//! in [`crate::tensor`]. The test suites compare against these oracles; keep
//! them boring.

use crate::tensor::{Dims, Element, PaddingMode, Tensor};

/// Fetches `(c, y, x)` from a virtually padded plane.
fn fetch<E: Element>(data: &[E], d: Dims, n: usize, c: usize, y: isize, x: isize, padding: PaddingMode) -> E {
    let (h, w) = (d.h as isize, d.w as isize);
    match padding {
        PaddingMode::Zero(_) => {
            if y < 0 || y >= h || x < 0 || x >= w {
                E::zero()
            } else {
                data[d.offset(n, c, y as usize, x as usize)]
            }
        }
        PaddingMode::Replicate(_) => {
            let yc = y.clamp(0, h - 1) as usize;
            let xc = x.clamp(0, w - 1) as usize;
            data[d.offset(n, c, yc, xc)]
        }
    }
}

/// Cross-correlation by definition: seven nested loops.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: PaddingMode,
    groups: usize,
) -> Vec<E> {
    let d = input.dims();
    let wd = weight.dims();
    let (oc, icg, kh, kw) = (wd.n, wd.c, wd.h, wd.w);
    let ocg = oc / groups;
    let p = padding.amount() as isize;
    let oh = (d.h + 2 * padding.amount() - kh) / stride + 1;
    let ow = (d.w + 2 * padding.amount() - kw) / stride + 1;
    let x = input.data();
    let w = weight.data();
    let b = bias.map(|b| b.to_vec());
    let mut out = vec![E::zero(); d.n * oc * oh * ow];
    for n in 0..d.n {
        for o in 0..oc {
            let group = o / ocg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.as_ref().map_or(E::zero(), |b| b[o]);
                    for ci in 0..icg {
                        let c = group * icg + ci;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * stride + ki) as isize - p;
                                let xx = (j * stride + kj) as isize - p;
                                let v = fetch(&x, d, n, c, y, xx, padding);
                                acc = acc + v * w[wd.offset(o, ci, ki, kj)];
                            }
                        }
                    }
                    out[((n * oc + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

pub fn max_pool2d<E: Element>(input: &Tensor<E>, window: usize, stride: usize) -> Vec<E> {
    let d = input.dims();
    let oh = (d.h - window) / stride + 1;
    let ow = (d.w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = x[d.offset(n, c, i * stride, j * stride)];
                    for ki in 0..window {
                        for kj in 0..window {
                            let v = x[d.offset(n, c, i * stride + ki, j * stride + kj)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    out
}

pub fn avg_pool2d<E: Element>(input: &Tensor<E>, window: usize, stride: usize) -> Vec<E> {
    let d = input.dims();
    let oh = (d.h - window) / stride + 1;
    let ow = (d.w - window) / stride + 1;
    let x = input.data();
    let area = E::from_f64((window * window) as f64);
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut sum = E::zero();
                    for ki in 0..window {
                        for kj in 0..window {
                            sum = sum + x[d.offset(n, c, i * stride + ki, j * stride + kj)];
                        }
                    }
                    out.push(sum / area);
                }
            }
        }
    }
    out
}

pub fn global_avg_pool<E: Element>(input: &Tensor<E>) -> Vec<E> {
    let d = input.dims();
    let x = input.data();
    let count = E::from_f64(d.spatial() as f64);
    let mut out = Vec::with_capacity(d.n * d.c);
    for n in 0..d.n {
        for c in 0..d.c {
            let mut sum = E::zero();
            for h in 0..d.h {
                for w in 0..d.w {
                    sum = sum + x[d.offset(n, c, h, w)];
                }
            }
            out.push(sum / count);
        }
    }
    out
}

pub fn global_max_pool<E: Element>(input: &Tensor<E>) -> Vec<E> {
    let d = input.dims();
    let x = input.data();
    let mut out = Vec::with_capacity(d.n * d.c);
    for n in 0..d.n {
        for c in 0..d.c {
            let mut best = x[d.offset(n, c, 0, 0)];
            for h in 0..d.h {
                for w in 0..d.w {
                    let v = x[d.offset(n, c, h, w)];
                    if v > best {
                        best = v;
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

/// `y = x W^T + b` by definition.
pub fn linear<E: Element>(input: &Tensor<E>, weight: &Tensor<E>, bias: Option<&Tensor<E>>) -> Vec<E> {
    let xd = input.dims();
    let wd = weight.dims();
    let (n, d, k) = (xd.n, xd.c, wd.n);
    let x = input.data();
    let w = weight.data();
    let b = bias.map(|b| b.to_vec());
    let mut out = vec![E::zero(); n * k];
    for i in 0..n {
        for o in 0..k {
            let mut acc = b.as_ref().map_or(E::zero(), |b| b[o]);
            for j in 0..d {
                acc = acc + x[i * d + j] * w[o * d + j];
            }
            out[i * k + o] = acc;
        }
    }
    out
}

/// Bilinear resize of a `(c, h, w)` plane stack, pixel centers aligned
/// (`src = (dst + 0.5) * scale - 0.5`), edge clamped.
pub fn bilinear_resize(src: &[f32], c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * th * tw];
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ty in 0..th {
            let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = (fy - y0 as f64) as f32;
            for tx in 0..tw {
                let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = (fx - x0 as f64) as f32;
                let top = plane[y0 * w + x0] * (1.0 - dx) + plane[y0 * w + x1] * dx;
                let bot = plane[y1 * w + x0] * (1.0 - dx) + plane[y1 * w + x1] * dx;
                out[(ci * th + ty) * tw + tx] = top * (1.0 - dy) + bot * dy;
            }
        }
    }
    out
}

/// AUC by brute-force pairwise enumeration:
/// `P(score+ > score-) + 0.5 * P(tie)`.
pub fn auc_pairwise(scores: &[(f64, u8)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|(_, l)| *l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().filter(|(_, l)| *l == 0).map(|(s, _)| *s).collect();
    assert!(!pos.is_empty() && !neg.is_empty(), "both classes required");
    let mut num = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                num += 1.0;
            } else if p == n {
                num += 0.5;
            }
        }
    }
    num / (pos.len() as f64 * neg.len() as f64)
}

/// An independently written Adam, scalar arithmetic in f64, bias-corrected.
pub struct ReferenceAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl ReferenceAdam {
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        ReferenceAdam {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(t));
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Central finite difference of `loss` w.r.t. one element of `param`.
/// Restores the original value before returning.
pub fn central_difference<E: Element>(
    param: &Tensor<E>,
    index: usize,
    h: f64,
    mut loss: impl FnMut() -> f64,
) -> f64 {
    let orig = param.to_vec();
    let mut bumped = orig.clone();
    bumped[index] = bumped[index] + E::from_f64(h);
    param.set_data(&bumped).expect("set_data");
    let plus = loss();
    bumped[index] = orig[index] - E::from_f64(h);
    param.set_data(&bumped).expect("set_data");
    let minus = loss();
    param.set_data(&orig).expect("set_data");
    (plus - minus) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}
