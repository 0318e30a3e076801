//! Raw forward/backward kernels used by the graph ops. All feature maps are
//! NCHW; convolution weights are `[out, in, k, k]`.

use crate::float::{gemm, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }
}

/// Valid `ox` range for kernel offset `kx`: `0 <= ox*s + kx - p < w`.
fn valid_range(len_out: usize, len_in: usize, s: usize, kofs: usize, p: usize) -> (usize, usize) {
    let lo = if p > kofs { (p - kofs).div_ceil(s) } else { 0 };
    let hi = if len_in + p > kofs { ((len_in + p - kofs - 1) / s + 1).min(len_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds samples `n0..n0+cn` into a `[c*k*k, cn*ho*wo]` patch matrix.
/// `dst` must be zeroed where padding applies.
fn unfold<T: Float>(x: &[T], g: &ConvGeom, n0: usize, cn: usize, dst: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let ncols = cn * ho * wo;
    let (s, p) = (g.stride, g.pad);
    let hw = g.h * g.w;
    for c in 0..g.c {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(ho, g.h, s, ky, p);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(wo, g.w, s, kx, p);
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut dst[row * ncols..(row + 1) * ncols];
                for b in 0..cn {
                    let src = &x[((n0 + b) * g.c + c) * hw..((n0 + b) * g.c + c + 1) * hw];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let base = (b * ho + oy) * wo;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo * s + kx - p;
                        if s == 1 {
                            dst_row[base + ox_lo..base + ox_hi]
                                .copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for (d, v) in dst_row[base + ox_lo..base + ox_hi]
                                .iter_mut()
                                .zip(src_row[ix0..].iter().step_by(s))
                            {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`unfold`]: adds the patch matrix back into samples `n0..n0+cn`.
fn fold<T: Float>(cols: &[T], g: &ConvGeom, n0: usize, cn: usize, x: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let ncols = cn * ho * wo;
    let (s, p) = (g.stride, g.pad);
    let hw = g.h * g.w;
    for c in 0..g.c {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(ho, g.h, s, ky, p);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(wo, g.w, s, kx, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..cn {
                    let dst = &mut x[((n0 + b) * g.c + c) * hw..((n0 + b) * g.c + c + 1) * hw];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let base = (b * ho + oy) * wo;
                        let ix0 = ox_lo * s + kx - p;
                        for (d, v) in dst_row[ix0..]
                            .iter_mut()
                            .step_by(s)
                            .zip(&src_row[base + ox_lo..base + ox_hi])
                        {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `x` into a `[c*k*k, n*ho*wo]` patch matrix.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    unfold(x, g, 0, g.n, &mut cols);
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back to NCHW.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    fold(cols, g, 0, g.n, &mut x);
    x
}

/// `[o, n*hw]` matrix -> NCHW `[n, o, hw]`.
pub fn mat_to_nchw<T: Float>(m: &[T], n: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    scatter_chunk(m, 0, n, o, hw, &mut out);
    out
}

/// Inverse of [`mat_to_nchw`].
pub fn nchw_to_mat<T: Float>(x: &[T], n: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    gather_chunk(x, 0, n, o, hw, &mut out);
    out
}

/// Writes a `[o, cn*hw]` chunk matrix into NCHW samples `n0..n0+cn`.
fn scatter_chunk<T: Float>(m: &[T], n0: usize, cn: usize, o: usize, hw: usize, out: &mut [T]) {
    for oc in 0..o {
        for b in 0..cn {
            out[((n0 + b) * o + oc) * hw..((n0 + b) * o + oc + 1) * hw]
                .copy_from_slice(&m[(oc * cn + b) * hw..(oc * cn + b + 1) * hw]);
        }
    }
}

/// Reads NCHW samples `n0..n0+cn` into a `[o, cn*hw]` chunk matrix.
fn gather_chunk<T: Float>(x: &[T], n0: usize, cn: usize, o: usize, hw: usize, out: &mut [T]) {
    for oc in 0..o {
        for b in 0..cn {
            out[(oc * cn + b) * hw..(oc * cn + b + 1) * hw]
                .copy_from_slice(&x[((n0 + b) * o + oc) * hw..((n0 + b) * o + oc + 1) * hw]);
        }
    }
}

/// Columns per gemm: large enough for efficient kernels, small enough that
/// the patch matrix stays cache resident.
const CHUNK_COLS: usize = 2048;

fn chunk_samples(g: &ConvGeom) -> usize {
    let (ho, wo) = g.out_hw();
    (CHUNK_COLS / (ho * wo).max(1)).clamp(1, g.n.max(1))
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d_forward<T: Float>(
    x: &[T],
    g: &ConvGeom,
    weight: &[T],
    out_ch: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let mut out = vec![T::zero(); g.n * out_ch * hw];
    let step = chunk_samples(g);
    let mut cols = vec![T::zero(); g.rows() * step * hw];
    let mut m = vec![T::zero(); out_ch * step * hw];
    for n0 in (0..g.n).step_by(step) {
        let cn = step.min(g.n - n0);
        let ncols = cn * hw;
        let cols = &mut cols[..g.rows() * ncols];
        if is_pointwise(g) {
            gather_chunk(x, n0, cn, g.c, hw, cols);
        } else {
            if g.pad > 0 || g.stride > 1 {
                cols.fill(T::zero());
            }
            unfold(x, g, n0, cn, cols);
        }
        let m = &mut m[..out_ch * ncols];
        gemm(out_ch, g.rows(), ncols, weight, false, cols, false, m, false);
        if let Some(b) = bias {
            for (oc, row) in m.chunks_mut(ncols).enumerate() {
                let bv = b[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        scatter_chunk(m, n0, cn, out_ch, hw, &mut out);
    }
    out
}

pub struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    grad_out: &[T],
    x: &[T],
    g: &ConvGeom,
    weight: &[T],
    out_ch: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let pointwise = is_pointwise(g);
    let step = chunk_samples(g);
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); out_ch * g.rows()]);
    let mut db = need_b.then(|| vec![T::zero(); out_ch]);
    let mut gm = vec![T::zero(); out_ch * step * hw];
    let mut cols = vec![T::zero(); g.rows() * step * hw];
    for n0 in (0..g.n).step_by(step) {
        let cn = step.min(g.n - n0);
        let ncols = cn * hw;
        let gm = &mut gm[..out_ch * ncols];
        gather_chunk(grad_out, n0, cn, out_ch, hw, gm);
        let cols = &mut cols[..g.rows() * ncols];
        if let Some(db) = db.as_mut() {
            for (acc, row) in db.iter_mut().zip(gm.chunks(ncols)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            if pointwise {
                gather_chunk(x, n0, cn, g.c, hw, cols);
            } else {
                if g.pad > 0 || g.stride > 1 {
                    cols.fill(T::zero());
                }
                unfold(x, g, n0, cn, cols);
            }
            gemm(out_ch, ncols, g.rows(), gm, false, cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(g.rows(), out_ch, ncols, weight, true, gm, false, cols, false);
            if pointwise {
                scatter_chunk(cols, n0, cn, g.c, hw, dx);
            } else {
                fold(cols, g, n0, cn, dx);
            }
        }
    }
    ConvGrads {
        x: dx,
        weight: dw,
        bias: db,
    }
}

pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group norm over `[n, c, spatial]`; channels of a group are contiguous.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupNormCache<T>) {
    let cg = c / groups;
    let block = cg * spatial;
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * groups];
    let inv = T::one() / T::of(block as f64);
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cg) * spatial;
            let xs = &x[off..off + block];
            let mean = xs.iter().copied().sum::<T>() * inv;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let r = T::one() / (var + eps).sqrt();
            rstd[b * groups + gi] = r;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                for s in 0..spatial {
                    let i = off + ci * spatial + s;
                    let xh = (x[i] - mean) * r;
                    xhat[i] = xh;
                    y[i] = xh * ga + be;
                }
            }
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

/// Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Float>(
    grad_out: &[T],
    cache: &GroupNormCache<T>,
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let block = cg * spatial;
    let inv = T::one() / T::of(block as f64);
    let mut dx = vec![T::zero(); grad_out.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); block];
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cg) * spatial;
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for s in 0..spatial {
                    let i = off + ci * spatial + s;
                    let go = grad_out[i];
                    let xh = cache.xhat[i];
                    dgamma[ch] += go * xh;
                    dbeta[ch] += go;
                    let d = go * gamma[ch];
                    dxhat[ci * spatial + s] = d;
                    m1 += d;
                    m2 += d * xh;
                }
            }
            m1 *= inv;
            m2 *= inv;
            let r = cache.rstd[b * groups + gi];
            for j in 0..block {
                dx[off + j] = r * (dxhat[j] - m1 - cache.xhat[off + j] * m2);
            }
        }
    }
    (dx, dgamma, dbeta)
}
