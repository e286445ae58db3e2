//! Flat-slice numeric kernels behind the graph ops.
//!
//! Everything is row-major and single-threaded; the inner loops are shaped
//! so the compiler can vectorize them (axpy and dot forms).

use crate::scalar::Scalar;

/// out = A (m x k) · B (k x n)
pub fn matmul<P: Scalar>(m: usize, k: usize, n: usize, a: &[P], b: &[P], out: &mut [P]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        orow.iter_mut().for_each(|x| *x = P::zero());
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// out = A (m x k) · Bᵀ where B is (n x k)
pub fn matmul_nt<P: Scalar>(m: usize, k: usize, n: usize, a: &[P], b: &[P], out: &mut [P]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = P::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
}

/// out += Aᵀ · B where A is (m x k), B is (m x n); out is (k x n)
pub fn matmul_tn_acc<P: Scalar>(m: usize, k: usize, n: usize, a: &[P], b: &[P], out: &mut [P]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// out += A (m x k) · B (k x n)
pub fn matmul_acc<P: Scalar>(m: usize, k: usize, n: usize, a: &[P], b: &[P], out: &mut [P]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// out += A (m x k) · Bᵀ where B is (n x k)
pub fn matmul_nt_acc<P: Scalar>(m: usize, k: usize, n: usize, a: &[P], b: &[P], out: &mut [P]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = P::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// Output spatial size of a convolution axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one sample (c x h x w) into rows of receptive fields:
/// cols is (oh*ow) x (c*kh*kw), row-major.
#[allow(clippy::too_many_arguments)]
pub fn im2col<P: Scalar>(
    input: &[P],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [P],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(cols.len(), oh * ow * c * kh * kw);
    let q = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * q..(oy * ow + ox + 1) * q];
            let iy0 = (oy * stride) as isize - padding as isize;
            let ix0 = (ox * stride) as isize - padding as isize;
            let mut idx = 0;
            for ch in 0..c {
                let plane = &input[ch * h * w..(ch + 1) * h * w];
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        row[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            P::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds unfolded gradient rows back onto the input layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<P: Scalar>(
    cols: &[P],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dinput: &mut [P],
) {
    let q = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * q..(oy * ow + ox + 1) * q];
            let iy0 = (oy * stride) as isize - padding as isize;
            let ix0 = (ox * stride) as isize - padding as isize;
            let mut idx = 0;
            for ch in 0..c {
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            let at = ch * h * w + iy as usize * w + ix as usize;
                            dinput[at] = dinput[at] + row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

pub fn sigmoid<P: Scalar>(x: P) -> P {
    P::one() / (P::one() + (-x).exp())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<P: Scalar>(rows: usize, n: usize, x: &[P], out: &mut [P]) {
    for r in 0..rows {
        let xi = &x[r * n..(r + 1) * n];
        let oi = &mut out[r * n..(r + 1) * n];
        let mx = xi.iter().fold(P::neg_infinity(), |m, &v| m.max(v));
        let mut sum = P::zero();
        for (o, &v) in oi.iter_mut().zip(xi) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = P::one() / sum;
        oi.iter_mut().for_each(|o| *o = *o * inv);
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<P: Scalar>(rows: usize, n: usize, x: &[P], out: &mut [P]) {
    for r in 0..rows {
        let xi = &x[r * n..(r + 1) * n];
        let oi = &mut out[r * n..(r + 1) * n];
        let mx = xi.iter().fold(P::neg_infinity(), |m, &v| m.max(v));
        let mut sum = P::zero();
        for &v in xi {
            sum = sum + (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in oi.iter_mut().zip(xi) {
            *o = v - lse;
        }
    }
}
