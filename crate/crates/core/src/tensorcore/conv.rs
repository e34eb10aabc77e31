//! Size-preserving 2D convolution kernels (im2col + GEMM).
//!
//! Layouts: input `[Cin, H, W]`, kernel `[Cout, Cin, k, k]`, bias `[Cout]`,
//! output `[Cout, H, W]`. Zero padding of `(k - 1) / 2` on each spatial side.

use matrixmultiply::dgemm;

/// Unfold `input` into a `[Cin*k*k, H*W]` column matrix.
pub(crate) fn im2col(input: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 < x1 {
                        let s0 = (x0 as isize + dx) as usize;
                        dst_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column matrix back onto `[Cin, H, W]`, accumulating overlaps.
pub(crate) fn col2im_add(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 < x1 {
                        let d0 = (x0 as isize + dx) as usize;
                        for (d, s) in dst_row[d0..d0 + (x1 - x0)].iter_mut().zip(&src_row[x0..x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Returns the output and the column matrix needed by the backward pass.
pub(crate) fn forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let hw = d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let cols = if d.k == 1 {
        input.to_vec()
    } else {
        im2col(input, d.cin, d.h, d.w, d.k)
    };
    let mut out = vec![0.0; d.cout * hw];
    for (co, &b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(b);
    }
    // out[Cout, HW] += kernel[Cout, CKK] * cols[CKK, HW]
    unsafe {
        dgemm(
            d.cout,
            ckk,
            hw,
            1.0,
            kernel.as_ptr(),
            ckk as isize,
            1,
            cols.as_ptr(),
            hw as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    (out, cols)
}

/// Gradients with respect to input, kernel and bias given the output gradient.
/// The kernel gradient is skipped when `cols` is `None`, the input gradient
/// unless `want_input`; skipped gradients come back empty.
pub(crate) fn backward(
    grad_out: &[f64],
    kernel: &[f64],
    cols: Option<&[f64]>,
    d: &ConvDims,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = d.h * d.w;
    let ckk = d.cin * d.k * d.k;

    let grad_bias: Vec<f64> = (0..d.cout)
        .map(|co| grad_out[co * hw..(co + 1) * hw].iter().sum())
        .collect();

    // grad_kernel[Cout, CKK] = grad_out[Cout, HW] * cols^T[HW, CKK]
    let mut grad_kernel = Vec::new();
    if let Some(cols) = cols {
        grad_kernel = vec![0.0; d.cout * ckk];
        unsafe {
            dgemm(
                d.cout,
                hw,
                ckk,
                1.0,
                grad_out.as_ptr(),
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                hw as isize,
                0.0,
                grad_kernel.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
    }

    if !want_input {
        return (Vec::new(), grad_kernel, grad_bias);
    }
    // grad_cols[CKK, HW] = kernel^T[CKK, Cout] * grad_out[Cout, HW]
    let mut grad_cols = vec![0.0; ckk * hw];
    unsafe {
        dgemm(
            ckk,
            d.cout,
            hw,
            1.0,
            kernel.as_ptr(),
            1,
            ckk as isize,
            grad_out.as_ptr(),
            hw as isize,
            1,
            0.0,
            grad_cols.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    let grad_input = if d.k == 1 {
        grad_cols
    } else {
        let mut gi = vec![0.0; d.cin * hw];
        col2im_add(&grad_cols, d.cin, d.h, d.w, d.k, &mut gi);
        gi
    };
    (grad_input, grad_kernel, grad_bias)
}
