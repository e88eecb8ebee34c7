//! 2-D convolution: im2col + GEMM per sample, with a direct loop for the
//! depthwise 3x3 case the fixed gradient-operator layers hit constantly.
//!
//! Convention is cross-correlation (no kernel flip). Batch work is
//! parallelized per sample; weight-gradient accumulation runs over fixed
//! sample chunks folded in order, so results do not depend on thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::ops::Op;
use super::{Dims, Element, PaddingMode, Tensor};
use crate::error::{Error, Result};

/// Samples per weight-gradient partial.
const SAMPLE_CHUNK: usize = 8;

#[derive(Clone, Copy)]
struct Geom {
    ic: usize,
    oc: usize,
    icg: usize,
    ocg: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    replicate: bool,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn kdim(&self) -> usize {
        self.icg * self.kh * self.kw
    }

    fn n_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn depthwise3x3(&self) -> bool {
        self.groups == self.ic && self.icg == 1 && self.ocg == 1 && self.kh == 3 && self.kw == 3
    }
}

fn geometry(
    input: Dims,
    weight: Dims,
    stride: usize,
    padding: PaddingMode,
    groups: usize,
) -> Result<Geom> {
    let (oc, icg, kh, kw) = (weight.n, weight.c, weight.h, weight.w);
    if groups == 0 || stride == 0 {
        return Err(Error::shape("conv2d", "stride and groups must be positive".to_string()));
    }
    if input.c % groups != 0 || icg * groups != input.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {input} with groups={groups} is incompatible with weight {weight}: \
                 expected weight in-channels {}, got {icg}",
                input.c / groups.max(1)
            ),
        ));
    }
    if oc % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("out channels {oc} not divisible by groups {groups}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel spatial dims must be odd, got {kh}x{kw}"),
        ));
    }
    let pad = padding.amount();
    let ph = input.h + 2 * pad;
    let pw = input.w + 2 * pad;
    if ph < kh || pw < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {ph}x{pw}"),
        ));
    }
    Ok(Geom {
        ic: input.c,
        oc,
        icg,
        ocg: oc / groups,
        groups,
        kh,
        kw,
        stride,
        pad,
        replicate: matches!(padding, PaddingMode::Replicate(_)),
        h: input.h,
        w: input.w,
        ph,
        pw,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    })
}

/// Copies one sample `(ic, h, w)` into a padded buffer `(ic, ph, pw)`.
fn pad_sample<E: Element>(src: &[E], g: &Geom, dst: &mut [E]) {
    for c in 0..g.ic {
        let sp = &src[c * g.h * g.w..][..g.h * g.w];
        let dp = &mut dst[c * g.ph * g.pw..][..g.ph * g.pw];
        pad_plane(sp, g, dp);
    }
}

fn pad_plane<E: Element>(sp: &[E], g: &Geom, dp: &mut [E]) {
    if g.pad == 0 {
        dp.copy_from_slice(sp);
        return;
    }
    if g.replicate {
        for phi in 0..g.ph {
            let sh = phi.saturating_sub(g.pad).min(g.h - 1);
            let srow = &sp[sh * g.w..(sh + 1) * g.w];
            let drow = &mut dp[phi * g.pw..(phi + 1) * g.pw];
            for (pwi, d) in drow.iter_mut().enumerate() {
                let sw = pwi.saturating_sub(g.pad).min(g.w - 1);
                *d = srow[sw];
            }
        }
    } else {
        dp.fill(E::zero());
        for hh in 0..g.h {
            let drow = (hh + g.pad) * g.pw + g.pad;
            dp[drow..drow + g.w].copy_from_slice(&sp[hh * g.w..(hh + 1) * g.w]);
        }
    }
}

/// Folds a padded-gradient buffer back onto `(ic, h, w)`. Zero padding drops
/// the borders; replicate padding accumulates border cells into the edge
/// pixels they were copied from.
fn unpad_accumulate<E: Element>(dpad: &[E], g: &Geom, out: &mut [E]) {
    for c in 0..g.ic {
        let sp = &dpad[c * g.ph * g.pw..][..g.ph * g.pw];
        let dp = &mut out[c * g.h * g.w..][..g.h * g.w];
        unpad_plane(sp, g, dp);
    }
}

fn unpad_plane<E: Element>(sp: &[E], g: &Geom, dp: &mut [E]) {
    if g.pad == 0 {
        for (o, s) in dp.iter_mut().zip(sp) {
            *o += *s;
        }
        return;
    }
    if g.replicate {
        for phi in 0..g.ph {
            let th = phi.saturating_sub(g.pad).min(g.h - 1);
            for pwi in 0..g.pw {
                let tw = pwi.saturating_sub(g.pad).min(g.w - 1);
                dp[th * g.w + tw] += sp[phi * g.pw + pwi];
            }
        }
    } else {
        for hh in 0..g.h {
            let srow = (hh + g.pad) * g.pw + g.pad;
            for (o, s) in dp[hh * g.w..(hh + 1) * g.w].iter_mut().zip(&sp[srow..srow + g.w]) {
                *o += *s;
            }
        }
    }
}

/// Unrolls one group of a padded sample into `(icg*kh*kw, oh*ow)` columns.
fn im2col<E: Element>(pad: &[E], g: &Geom, group: usize, col: &mut [E]) {
    let n_cols = g.n_cols();
    let mut row = 0usize;
    for ci in 0..g.icg {
        let plane = &pad[(group * g.icg + ci) * g.ph * g.pw..][..g.ph * g.pw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * n_cols..(row + 1) * n_cols];
                let mut idx = 0usize;
                for ohi in 0..g.oh {
                    let src = (ohi * g.stride + ki) * g.pw + kj;
                    if g.stride == 1 {
                        dst[idx..idx + g.ow].copy_from_slice(&plane[src..src + g.ow]);
                        idx += g.ow;
                    } else {
                        for owi in 0..g.ow {
                            dst[idx] = plane[src + owi * g.stride];
                            idx += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `(icg*kh*kw, oh*ow)` columns back into the padded buffer.
fn col2im<E: Element>(dcol: &[E], g: &Geom, group: usize, dpad: &mut [E]) {
    let n_cols = g.n_cols();
    let mut row = 0usize;
    for ci in 0..g.icg {
        let plane_off = (group * g.icg + ci) * g.ph * g.pw;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &dcol[row * n_cols..(row + 1) * n_cols];
                let mut idx = 0usize;
                for ohi in 0..g.oh {
                    let dst = plane_off + (ohi * g.stride + ki) * g.pw + kj;
                    for owi in 0..g.ow {
                        dpad[dst + owi * g.stride] += src[idx];
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// 2-D convolution (cross-correlation). Weight is
    /// `(out_c, in_c/groups, kh, kw)`; bias, when present, is a per-output-
    /// channel vector `(1, out_c, 1, 1)`.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: PaddingMode,
        groups: usize,
    ) -> Result<Tensor<E>> {
        let g = geometry(self.dims(), weight.dims(), stride, padding, groups)?;
        if let Some(b) = bias {
            if b.dims() != Dims::new(1, g.oc, 1, 1) {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias dims {} do not match out channels {}", b.dims(), g.oc),
                ));
            }
        }
        let d = self.dims();
        let out_dims = Dims::new(d.n, g.oc, g.oh, g.ow);
        let input = self.data();
        let wdata = weight.data();
        let bias_data = bias.map(|b| b.to_vec());
        let n_cols = g.n_cols();
        let mut out = vec![E::zero(); out_dims.count()];

        if g.depthwise3x3() {
            out.par_chunks_mut(n_cols).enumerate().for_each(|(plane, dst)| {
                let c = plane % g.oc;
                let src = &input[plane * g.h * g.w..][..g.h * g.w];
                let mut padded = vec![E::zero(); g.ph * g.pw];
                pad_plane(src, &g, &mut padded);
                let k = &wdata[c * 9..(c + 1) * 9];
                depthwise3x3_plane(&padded, &g, k, dst);
                if let Some(b) = &bias_data {
                    let bc = b[c];
                    for v in dst.iter_mut() {
                        *v += bc;
                    }
                }
            });
        } else {
            let sample_len = d.c * d.h * d.w;
            let kdim = g.kdim();
            out.par_chunks_mut(g.oc * n_cols).enumerate().for_each(|(s, out_s)| {
                let mut padded = vec![E::zero(); g.ic * g.ph * g.pw];
                pad_sample(&input[s * sample_len..][..sample_len], &g, &mut padded);
                let mut col = vec![E::zero(); kdim * n_cols];
                for group in 0..g.groups {
                    im2col(&padded, &g, group, &mut col);
                    let wv = ArrayView2::from_shape(
                        (g.ocg, kdim),
                        &wdata[group * g.ocg * kdim..(group + 1) * g.ocg * kdim],
                    )
                    .expect("weight view");
                    let cv = ArrayView2::from_shape((kdim, n_cols), &col[..]).expect("col view");
                    let dst = &mut out_s[group * g.ocg * n_cols..(group + 1) * g.ocg * n_cols];
                    let mut ov = ArrayViewMut2::from_shape((g.ocg, n_cols), dst).expect("out view");
                    general_mat_mul(E::one(), &wv, &cv, E::zero(), &mut ov);
                }
                if let Some(b) = &bias_data {
                    for (o, row) in out_s.chunks_mut(n_cols).enumerate() {
                        let bo = b[o];
                        for v in row.iter_mut() {
                            *v += bo;
                        }
                    }
                }
            });
        }
        drop(input);
        drop(wdata);

        Tensor::from_op(
            out_dims,
            out,
            "conv2d",
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                padding,
                groups,
            },
        )
    }
}

#[inline]
fn depthwise3x3_plane<E: Element>(padded: &[E], g: &Geom, k: &[E], dst: &mut [E]) {
    let (k0, k1, k2, k3, k4, k5, k6, k7, k8) =
        (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]);
    for ohi in 0..g.oh {
        let r0 = &padded[(ohi * g.stride) * g.pw..][..g.pw];
        let r1 = &padded[(ohi * g.stride + 1) * g.pw..][..g.pw];
        let r2 = &padded[(ohi * g.stride + 2) * g.pw..][..g.pw];
        let row = &mut dst[ohi * g.ow..(ohi + 1) * g.ow];
        if g.stride == 1 {
            for (owi, v) in row.iter_mut().enumerate() {
                *v = r0[owi] * k0
                    + r0[owi + 1] * k1
                    + r0[owi + 2] * k2
                    + r1[owi] * k3
                    + r1[owi + 1] * k4
                    + r1[owi + 2] * k5
                    + r2[owi] * k6
                    + r2[owi + 1] * k7
                    + r2[owi + 2] * k8;
            }
        } else {
            for (owi, v) in row.iter_mut().enumerate() {
                let b = owi * g.stride;
                *v = r0[b] * k0
                    + r0[b + 1] * k1
                    + r0[b + 2] * k2
                    + r1[b] * k3
                    + r1[b + 1] * k4
                    + r1[b + 2] * k5
                    + r2[b] * k6
                    + r2[b + 1] * k7
                    + r2[b + 2] * k8;
            }
        }
    }
}

pub(crate) struct ConvGrads<E> {
    pub input: Vec<E>,
    pub weight: Vec<E>,
    pub bias: Option<Vec<E>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: PaddingMode,
    groups: usize,
    out_dims: Dims,
    dout: &[E],
) -> Result<ConvGrads<E>> {
    let g = geometry(input.dims(), weight.dims(), stride, padding, groups)?;
    let d = input.dims();
    let n_cols = g.n_cols();
    let kdim = g.kdim();
    let sample_len = d.c * d.h * d.w;
    let x = input.data();
    let wdata = weight.data();

    // d/d bias: per-channel sum over batch and spatial, batch-major order.
    let dbias = bias.map(|_| {
        let mut db = vec![E::zero(); g.oc];
        db.par_iter_mut().enumerate().for_each(|(o, acc)| {
            let mut s = E::zero();
            for n in 0..d.n {
                let base = (n * g.oc + o) * n_cols;
                for &gv in &dout[base..base + n_cols] {
                    s += gv;
                }
            }
            *acc = s;
        });
        db
    });

    let mut dinput = vec![E::zero(); d.count()];
    let mut dweight = vec![E::zero(); weight.dims().count()];

    if g.depthwise3x3() {
        if input.tracks() {
            dinput.par_chunks_mut(g.h * g.w).enumerate().for_each(|(plane, dst)| {
                let c = plane % g.oc;
                let k = &wdata[c * 9..(c + 1) * 9];
                let gsl = &dout[plane * n_cols..(plane + 1) * n_cols];
                let mut dpad = vec![E::zero(); g.ph * g.pw];
                for ohi in 0..g.oh {
                    for owi in 0..g.ow {
                        let gv = gsl[ohi * g.ow + owi];
                        let base = (ohi * g.stride) * g.pw + owi * g.stride;
                        for ki in 0..3 {
                            let row = base + ki * g.pw;
                            dpad[row] += gv * k[ki * 3];
                            dpad[row + 1] += gv * k[ki * 3 + 1];
                            dpad[row + 2] += gv * k[ki * 3 + 2];
                        }
                    }
                }
                unpad_plane(&dpad, &g, dst);
            });
        }
        if weight.tracks() {
            dweight.par_chunks_mut(9).enumerate().for_each(|(c, dk)| {
                let mut padded = vec![E::zero(); g.ph * g.pw];
                for n in 0..d.n {
                    let plane = n * g.oc + c;
                    pad_plane(&x[plane * g.h * g.w..][..g.h * g.w], &g, &mut padded);
                    let gsl = &dout[plane * n_cols..(plane + 1) * n_cols];
                    for ohi in 0..g.oh {
                        for owi in 0..g.ow {
                            let gv = gsl[ohi * g.ow + owi];
                            let base = (ohi * g.stride) * g.pw + owi * g.stride;
                            for ki in 0..3 {
                                let row = base + ki * g.pw;
                                dk[ki * 3] += gv * padded[row];
                                dk[ki * 3 + 1] += gv * padded[row + 1];
                                dk[ki * 3 + 2] += gv * padded[row + 2];
                            }
                        }
                    }
                }
            });
        }
    } else {
        if input.tracks() {
            dinput.par_chunks_mut(sample_len).enumerate().for_each(|(s, dst)| {
                let mut dpad = vec![E::zero(); g.ic * g.ph * g.pw];
                let mut dcol = vec![E::zero(); kdim * n_cols];
                for group in 0..g.groups {
                    let wv = ArrayView2::from_shape(
                        (g.ocg, kdim),
                        &wdata[group * g.ocg * kdim..(group + 1) * g.ocg * kdim],
                    )
                    .expect("weight view");
                    let gv = ArrayView2::from_shape(
                        (g.ocg, n_cols),
                        &dout[(s * g.oc + group * g.ocg) * n_cols..][..g.ocg * n_cols],
                    )
                    .expect("grad view");
                    let mut dcv =
                        ArrayViewMut2::from_shape((kdim, n_cols), &mut dcol[..]).expect("dcol view");
                    general_mat_mul(E::one(), &wv.t(), &gv, E::zero(), &mut dcv);
                    col2im(&dcol, &g, group, &mut dpad);
                }
                unpad_accumulate(&dpad, &g, dst);
            });
        }
        if weight.tracks() {
            // Fixed-size sample chunks; partials folded in chunk order keep
            // the reduction deterministic under any thread count.
            let chunks: Vec<std::ops::Range<usize>> = (0..d.n)
                .step_by(SAMPLE_CHUNK)
                .map(|s| s..(s + SAMPLE_CHUNK).min(d.n))
                .collect();
            let partials: Vec<Vec<E>> = chunks
                .par_iter()
                .map(|range| {
                    let mut dw = vec![E::zero(); g.oc * kdim];
                    let mut padded = vec![E::zero(); g.ic * g.ph * g.pw];
                    let mut col = vec![E::zero(); kdim * n_cols];
                    for s in range.clone() {
                        pad_sample(&x[s * sample_len..][..sample_len], &g, &mut padded);
                        for group in 0..g.groups {
                            im2col(&padded, &g, group, &mut col);
                            let gv = ArrayView2::from_shape(
                                (g.ocg, n_cols),
                                &dout[(s * g.oc + group * g.ocg) * n_cols..][..g.ocg * n_cols],
                            )
                            .expect("grad view");
                            let cv =
                                ArrayView2::from_shape((kdim, n_cols), &col[..]).expect("col view");
                            let mut dwv = ArrayViewMut2::from_shape(
                                (g.ocg, kdim),
                                &mut dw[group * g.ocg * kdim..(group + 1) * g.ocg * kdim],
                            )
                            .expect("dw view");
                            general_mat_mul(E::one(), &gv, &cv.t(), E::one(), &mut dwv);
                        }
                    }
                    dw
                })
                .collect();
            for partial in partials {
                for (acc, v) in dweight.iter_mut().zip(&partial) {
                    *acc += *v;
                }
            }
        }
    }
    debug_assert_eq!(out_dims.count(), dout.len());

    Ok(ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    })
}
