//! Slice-level kernels shared by the forward and backward passes.

use super::Float;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_at_acc<T: Float>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let g_row = &g[p * n..(p + 1) * n];
        for i in 0..k {
            let a_pi = a[p * k + i];
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += a_pi * gv;
            }
        }
    }
}

pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Causal dilated 1-D convolution, `x: [c_in, t]`, `w: [c_out, c_in, k]`.
///
/// Tap `j` reads `x[t - (k-1-j)·dilation]`, so the last tap is the current
/// sample and left padding is implicit zeros.
pub fn conv1d_causal<T: Float>(
    x: &[T],
    w: &[T],
    c_in: usize,
    c_out: usize,
    k: usize,
    t: usize,
    dilation: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c_out * t];
    for o in 0..c_out {
        let out_row = &mut out[o * t..(o + 1) * t];
        for c in 0..c_in {
            let x_row = &x[c * t..(c + 1) * t];
            for j in 0..k {
                let wv = w[(o * c_in + c) * k + j];
                let shift = (k - 1 - j) * dilation;
                if shift >= t || wv == T::zero() {
                    continue;
                }
                for (ov, &xv) in out_row[shift..].iter_mut().zip(&x_row[..t - shift]) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d_causal`] with respect to `x` and `w`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_causal_backward<T: Float>(
    x: &[T],
    w: &[T],
    g: &[T],
    c_in: usize,
    c_out: usize,
    k: usize,
    t: usize,
    dilation: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for o in 0..c_out {
            let g_row = &g[o * t..(o + 1) * t];
            for c in 0..c_in {
                let dx_row = &mut dx[c * t..(c + 1) * t];
                for j in 0..k {
                    let wv = w[(o * c_in + c) * k + j];
                    let shift = (k - 1 - j) * dilation;
                    if shift >= t || wv == T::zero() {
                        continue;
                    }
                    for (dv, &gv) in dx_row[..t - shift].iter_mut().zip(&g_row[shift..]) {
                        *dv += wv * gv;
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for o in 0..c_out {
            let g_row = &g[o * t..(o + 1) * t];
            for c in 0..c_in {
                let x_row = &x[c * t..(c + 1) * t];
                for j in 0..k {
                    let shift = (k - 1 - j) * dilation;
                    if shift >= t {
                        continue;
                    }
                    let mut acc = T::zero();
                    for (&gv, &xv) in g_row[shift..].iter().zip(&x_row[..t - shift]) {
                        acc += gv * xv;
                    }
                    dw[(o * c_in + c) * k + j] += acc;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Float>(x: T) -> T {
    let (c, a, half) = (T::cst(GELU_C), T::cst(GELU_A), T::cst(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let (c, a, half) = (T::cst(GELU_C), T::cst(GELU_A), T::cst(0.5));
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::cst(3.0) * a * x * x)
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid<T: Float>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
