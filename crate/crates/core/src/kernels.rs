//! Raw numeric loops shared by the tape ops.
//!
//! All reductions use a fixed accumulation order so results are bit-identical
//! across runs.

use crate::tensor::Float;

/// Dot product with eight independent lanes, summed in a fixed order.
#[inline]
pub fn dot<S: Float>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

#[inline]
pub fn axpy<S: Float>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Four output rows share each load of `b`, over column tiles that fit in
/// L1. Every `c` element still accumulates over `k` in ascending order.
pub fn gemm_nn<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    const TILE: usize = 256;
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let arow = |r: usize| &a[(i + r) * k..(i + r + 1) * k];
        let (a0, a1, a2, a3) = (arow(0), arow(1), arow(2), arow(3));
        for j0 in (0..n).step_by(TILE) {
            let j1 = (j0 + TILE).min(n);
            let (t0, t1, t2, t3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for kk in 0..k {
                let br = &b[kk * n + j0..kk * n + j1];
                let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                for (j, &bv) in br.iter().enumerate() {
                    t0[j] = t0[j] + x0 * bv;
                    t1[j] = t1[j] + x1 * bv;
                    t2[j] = t2[j] + x2 * bv;
                    t3[j] = t3[j] + x3 * bv;
                }
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], crow);
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn gemm_nt<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            c[i * k + j] = c[i * k + j] + dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<S: Float>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki != S::zero() {
                axpy(aki, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Kernel, stride and zero padding for a (depth, height, width) convolution.
/// 2-D and 1-D convolutions use a depth (and height) extent of one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvDims {
    pub fn rows(&self, g: &ConvGeom) -> usize {
        self.c_in * g.kernel.iter().product::<usize>()
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.input.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }
}

/// Output extent along one axis, or `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `z·stride + tap − pad` falls inside `[0, input)`.
#[inline]
fn valid_span(output: usize, input: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap).div_ceil(stride).min(output);
    let hi = if input + pad > tap {
        ((input + pad - tap - 1) / stride + 1).min(output)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one sample `[c_in, D, H, W]` into columns `[rows, positions]`.
pub fn im2col<S: Float>(x: &[S], d: &ConvDims, g: &ConvGeom, col: &mut [S]) {
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let p = od * oh * ow;
    let mut r = 0;
    for c in 0..d.c_in {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &mut col[r * p..(r + 1) * p];
                    let mut q = 0;
                    for zd in 0..od {
                        let zi = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let hi = (zh * sh + b) as isize - ph as isize;
                            let valid = zi >= 0 && zi < id as isize && hi >= 0 && hi < ih as isize;
                            if !valid {
                                row[q..q + ow].iter_mut().for_each(|v| *v = S::zero());
                                q += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + hi as usize) * iw;
                            let (lo, hi) = valid_span(ow, iw, sw, e, pw);
                            let out = &mut row[q..q + ow];
                            out[..lo].iter_mut().for_each(|v| *v = S::zero());
                            out[hi..].iter_mut().for_each(|v| *v = S::zero());
                            let first = base + lo * sw + e - pw;
                            if sw == 1 {
                                out[lo..hi].copy_from_slice(&xc[first..first + (hi - lo)]);
                            } else {
                                for (o, zw) in out[lo..hi].iter_mut().zip(0..) {
                                    *o = xc[first + zw * sw];
                                }
                            }
                            q += ow;
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Scatter-adds columns back into one sample's input gradient.
pub fn col2im<S: Float>(col: &[S], d: &ConvDims, g: &ConvGeom, gx: &mut [S]) {
    let [id, ih, iw] = d.input;
    let [od, oh, ow] = d.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let p = od * oh * ow;
    let mut r = 0;
    for c in 0..d.c_in {
        let gc = &mut gx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &col[r * p..(r + 1) * p];
                    let mut q = 0;
                    for zd in 0..od {
                        let zi = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let hi = (zh * sh + b) as isize - ph as isize;
                            if !(zi >= 0 && zi < id as isize && hi >= 0 && hi < ih as isize) {
                                q += ow;
                                continue;
                            }
                            let base = (zi as usize * ih + hi as usize) * iw;
                            let (lo, hi) = valid_span(ow, iw, sw, e, pw);
                            let first = base + lo * sw + e - pw;
                            for (zw, &v) in row[q + lo..q + hi].iter().enumerate() {
                                let t = &mut gc[first + zw * sw];
                                *t = *t + v;
                            }
                            q += ow;
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

pub fn conv_forward<S: Float>(x: &[S], k: &[S], d: &ConvDims, g: &ConvGeom) -> Vec<S> {
    let rows = d.rows(g);
    let p = d.out_positions();
    let mut out = vec![S::zero(); d.batch * d.c_out * p];
    let mut col = vec![S::zero(); rows * p];
    for n in 0..d.batch {
        im2col(&x[n * d.in_len()..(n + 1) * d.in_len()], d, g, &mut col);
        let o = &mut out[n * d.c_out * p..(n + 1) * d.c_out * p];
        gemm_nn(d.c_out, rows, p, k, &col, o);
    }
    out
}

/// Returns `(grad_x, grad_k)`; either is skipped when not requested.
pub fn conv_backward<S: Float>(
    x: &[S],
    k: &[S],
    gout: &[S],
    d: &ConvDims,
    g: &ConvGeom,
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let rows = d.rows(g);
    let p = d.out_positions();
    let mut gx = want_x.then(|| vec![S::zero(); d.batch * d.in_len()]);
    let mut gk = want_k.then(|| vec![S::zero(); d.c_out * rows]);
    let mut col = vec![S::zero(); rows * p];
    for n in 0..d.batch {
        let go = &gout[n * d.c_out * p..(n + 1) * d.c_out * p];
        if let Some(gk) = gk.as_mut() {
            im2col(&x[n * d.in_len()..(n + 1) * d.in_len()], d, g, &mut col);
            gemm_nt(d.c_out, rows, p, go, &col, gk);
        }
        if let Some(gx) = gx.as_mut() {
            col.iter_mut().for_each(|v| *v = S::zero());
            gemm_tn(rows, d.c_out, p, k, go, &mut col);
            col2im(&col, d, g, &mut gx[n * d.in_len()..(n + 1) * d.in_len()]);
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // bᵀ laid out as 2x3 gives the same product through gemm_nt
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        gemm_nt(2, 2, 3, &a, &bt, &mut c2);
        assert_eq!(c, c2);

        // aᵀ laid out as 3x2 through gemm_tn
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0f64; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn out_extent() {
        assert_eq!(conv_out_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_extent(32, 7, 2, 3), Some(16));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
    }
}
