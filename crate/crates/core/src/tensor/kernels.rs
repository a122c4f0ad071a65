//! Raw slice kernels behind the graph ops: convolution via im2col + GEMM,
//! group normalization and single-head attention. Batch items are processed
//! independently (optionally in parallel) and reduced in index order.

use super::real::{gemm, MatRef, Real};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]`.
pub fn im2col<F: Real>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kj - pad, valid for ox in [lo, hi)
                        let shift = kj as isize - pad;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (g.w as isize - shift).clamp(0, wo as isize) as usize;
                        out_row[..lo].fill(F::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        out_row[hi.max(lo)..].fill(F::zero());
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            *o = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[C, H, W]`.
pub fn col2im_add<F: Real>(col: &[F], g: &ConvGeom, x: &mut [F]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `weight` is `[Cout, Cin, k, k]`, output `[B, Cout, Ho, Wo]`.
pub fn conv2d_forward<F: Real>(x: &[F], weight: &[F], bias: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let hw_out = g.out_h() * g.out_w();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * hw_out;
    let mut out = vec![F::zero(); g.batch * out_per];
    par::for_each_chunk(&mut out, out_per, |b, ob| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let wmat = MatRef::new(weight, g.cout, g.col_rows());
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_exact_mut(hw_out).enumerate() {
                row.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        if g.is_pointwise() {
            gemm(F::one(), wmat, MatRef::new(xb, g.cin, hw_out), beta, ob);
        } else {
            let mut col = vec![F::zero(); g.col_rows() * hw_out];
            im2col(xb, g, &mut col);
            gemm(F::one(), wmat, MatRef::new(&col, g.col_rows(), hw_out), beta, ob);
        }
    });
    out
}

pub struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn conv2d_backward<F: Real>(
    x: &[F],
    weight: &[F],
    grad_out: &[F],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<F> {
    let hw_out = g.out_h() * g.out_w();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * hw_out;
    let rows = g.col_rows();
    let wsize = g.cout * rows;

    // Per-item (dinput, dweight) computed independently, reduced in order.
    let parts: Vec<(Vec<F>, Vec<F>)> = par::map_range(g.batch, |b| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let gb = MatRef::new(&grad_out[b * out_per..(b + 1) * out_per], g.cout, hw_out);
        let wmat = MatRef::new(weight, g.cout, rows);
        let mut dx = Vec::new();
        let mut dw = Vec::new();
        if g.is_pointwise() {
            if need_weight {
                dw = vec![F::zero(); wsize];
                gemm(F::one(), gb, MatRef::new(xb, g.cin, hw_out).t(), F::zero(), &mut dw);
            }
            if need_input {
                dx = vec![F::zero(); in_per];
                gemm(F::one(), wmat.t(), gb, F::zero(), &mut dx);
            }
        } else {
            if need_weight {
                let mut col = vec![F::zero(); rows * hw_out];
                im2col(xb, g, &mut col);
                dw = vec![F::zero(); wsize];
                gemm(F::one(), gb, MatRef::new(&col, rows, hw_out).t(), F::zero(), &mut dw);
            }
            if need_input {
                let mut dcol = vec![F::zero(); rows * hw_out];
                gemm(F::one(), wmat.t(), gb, F::zero(), &mut dcol);
                dx = vec![F::zero(); in_per];
                col2im_add(&dcol, g, &mut dx);
            }
        }
        (dx, dw)
    });

    let input = need_input.then(|| {
        let mut all = Vec::with_capacity(g.batch * in_per);
        for (dx, _) in &parts {
            all.extend_from_slice(dx);
        }
        all
    });
    let weight = need_weight.then(|| {
        let mut acc = vec![F::zero(); wsize];
        for (_, dw) in &parts {
            for (a, &d) in acc.iter_mut().zip(dw) {
                *a += d;
            }
        }
        acc
    });
    let bias = need_bias.then(|| {
        let mut acc = vec![F::zero(); g.cout];
        for b in 0..g.batch {
            for (co, a) in acc.iter_mut().enumerate() {
                let s = b * out_per + co * hw_out;
                *a += grad_out[s..s + hw_out].iter().copied().sum::<F>();
            }
        }
        acc
    });
    ConvGrads { input, weight, bias }
}

#[derive(Clone, Copy, Debug)]
pub struct NormGeom {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub groups: usize,
}

impl NormGeom {
    fn group_len(&self) -> usize {
        self.channels / self.groups * self.spatial
    }
}

/// Returns `(y, xhat, rstd)`; `xhat` and `rstd` feed the backward pass.
pub fn group_norm_forward<F: Real>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    g: &NormGeom,
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let per = g.channels * g.spatial;
    let cpg = g.channels / g.groups;
    let glen = g.group_len();
    let parts: Vec<(Vec<F>, Vec<F>, Vec<F>)> = par::map_range(g.batch, |b| {
        let xb = &x[b * per..(b + 1) * per];
        let mut y = vec![F::zero(); per];
        let mut xhat = vec![F::zero(); per];
        let mut rstds = Vec::with_capacity(g.groups);
        let n = F::from_f64(glen as f64);
        for gi in 0..g.groups {
            let seg = &xb[gi * glen..(gi + 1) * glen];
            let mean = seg.iter().copied().sum::<F>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rstd = F::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for c in 0..cpg {
                let ch = gi * cpg + c;
                let base = ch * g.spatial;
                for s in 0..g.spatial {
                    let xh = (xb[base + s] - mean) * rstd;
                    xhat[base + s] = xh;
                    y[base + s] = xh * gamma[ch] + beta[ch];
                }
            }
        }
        (y, xhat, rstds)
    });
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(g.batch * g.groups);
    for (a, b, c) in parts {
        y.extend(a);
        xhat.extend(b);
        rstd.extend(c);
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<F: Real>(
    grad: &[F],
    xhat: &[F],
    rstd: &[F],
    gamma: &[F],
    g: &NormGeom,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let per = g.channels * g.spatial;
    let cpg = g.channels / g.groups;
    let glen = g.group_len();
    let n = F::from_f64(glen as f64);
    let parts: Vec<(Vec<F>, Vec<F>, Vec<F>)> = par::map_range(g.batch, |b| {
        let gb = &grad[b * per..(b + 1) * per];
        let xb = &xhat[b * per..(b + 1) * per];
        let mut dx = vec![F::zero(); per];
        let mut dgamma = vec![F::zero(); g.channels];
        let mut dbeta = vec![F::zero(); g.channels];
        for gi in 0..g.groups {
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for c in 0..cpg {
                let ch = gi * cpg + c;
                let base = ch * g.spatial;
                for s in 0..g.spatial {
                    let d = gb[base + s] * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xb[base + s];
                    dgamma[ch] += gb[base + s] * xb[base + s];
                    dbeta[ch] += gb[base + s];
                }
            }
            let mean_d = sum_d / n;
            let mean_dx = sum_dx / n;
            let r = rstd[b * g.groups + gi];
            for c in 0..cpg {
                let ch = gi * cpg + c;
                let base = ch * g.spatial;
                for s in 0..g.spatial {
                    let d = gb[base + s] * gamma[ch];
                    dx[base + s] = r * (d - mean_d - xb[base + s] * mean_dx);
                }
            }
        }
        (dx, dgamma, dbeta)
    });
    let mut dx = Vec::with_capacity(grad.len());
    let mut dgamma = vec![F::zero(); g.channels];
    let mut dbeta = vec![F::zero(); g.channels];
    for (a, b, c) in parts {
        dx.extend(a);
        for (acc, v) in dgamma.iter_mut().zip(b) {
            *acc += v;
        }
        for (acc, v) in dbeta.iter_mut().zip(c) {
            *acc += v;
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub batch: usize,
    pub channels: usize,
    pub nq: usize,
    pub nk: usize,
}

/// Single-head attention over channel-major token layouts.
///
/// `q` is `[B, C, Nq]`, `k` and `v` are `[B, C, Nk]`. Returns the output
/// `[B, C, Nq]` and the row-softmax probabilities `[B, Nq, Nk]`.
pub fn attention_forward<F: Real>(q: &[F], k: &[F], v: &[F], g: &AttnGeom) -> (Vec<F>, Vec<F>) {
    let (c, nq, nk) = (g.channels, g.nq, g.nk);
    let scale = F::one() / F::from_f64(c as f64).sqrt();
    let parts: Vec<(Vec<F>, Vec<F>)> = par::map_range(g.batch, |b| {
        let qb = MatRef::new(&q[b * c * nq..(b + 1) * c * nq], c, nq);
        let kb = MatRef::new(&k[b * c * nk..(b + 1) * c * nk], c, nk);
        let vb = MatRef::new(&v[b * c * nk..(b + 1) * c * nk], c, nk);
        let mut p = vec![F::zero(); nq * nk];
        gemm(scale, qb.t(), kb, F::zero(), &mut p);
        for row in p.chunks_exact_mut(nk) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let mut o = vec![F::zero(); c * nq];
        gemm(F::one(), vb, MatRef::new(&p, nq, nk).t(), F::zero(), &mut o);
        (o, p)
    });
    let mut out = Vec::with_capacity(g.batch * c * nq);
    let mut probs = Vec::with_capacity(g.batch * nq * nk);
    for (o, p) in parts {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<F: Real>(
    grad: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    g: &AttnGeom,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (c, nq, nk) = (g.channels, g.nq, g.nk);
    let scale = F::one() / F::from_f64(c as f64).sqrt();
    let parts: Vec<(Vec<F>, Vec<F>, Vec<F>)> = par::map_range(g.batch, |b| {
        let go = MatRef::new(&grad[b * c * nq..(b + 1) * c * nq], c, nq);
        let qb = MatRef::new(&q[b * c * nq..(b + 1) * c * nq], c, nq);
        let kb = MatRef::new(&k[b * c * nk..(b + 1) * c * nk], c, nk);
        let vb = MatRef::new(&v[b * c * nk..(b + 1) * c * nk], c, nk);
        let pb = &probs[b * nq * nk..(b + 1) * nq * nk];
        let pm = MatRef::new(pb, nq, nk);

        let mut dv = vec![F::zero(); c * nk];
        gemm(F::one(), go, pm, F::zero(), &mut dv);

        let mut ds = vec![F::zero(); nq * nk];
        gemm(F::one(), go.t(), vb, F::zero(), &mut ds);
        for (drow, prow) in ds.chunks_exact_mut(nk).zip(pb.chunks_exact(nk)) {
            let dot: F = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - dot);
            }
        }
        let dsm = MatRef::new(&ds, nq, nk);
        let mut dq = vec![F::zero(); c * nq];
        gemm(scale, kb, dsm.t(), F::zero(), &mut dq);
        let mut dk = vec![F::zero(); c * nk];
        gemm(scale, qb, dsm, F::zero(), &mut dk);
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(k.len());
    let mut dv = Vec::with_capacity(v.len());
    for (a, b, cc) in parts {
        dq.extend(a);
        dk.extend(b);
        dv.extend(cc);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.cout * ho * wo];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..g.cin {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += x[((b * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.cin + ci) * g.k + ki) * g.k + kj];
                                }
                            }
                        }
                        out[((b * g.cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 8, 8), (1, 1, 0, 4, 3), (3, 2, 0, 7, 7)] {
            let g = ConvGeom { batch: 2, cin: 3, h, w, cout: 4, k, stride, pad };
            let x: Vec<f64> = (0..g.batch * g.cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..g.cout * g.cin * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let fast = conv2d_forward(&x, &wt, None, &g);
            let slow = naive_conv(&x, &wt, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { batch: 1, cin: 2, h: 5, w: 4, cout: 1, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let rows = 2 * 9;
        let n = g.out_h() * g.out_w();
        let y: Vec<f64> = (0..rows * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut col = vec![0.0; rows * n];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 40];
        col2im_add(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
