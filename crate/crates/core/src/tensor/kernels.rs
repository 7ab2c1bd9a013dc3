//! Dense numeric kernels shared by the tape operations.

use crate::parallel;

/// Rows of the output matrix handled per task. Fixed so that sequential and
/// parallel builds partition the work identically.
const GEMM_ROW_CHUNK: usize = 16;

/// Storage layout of a matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored row-major with the logical shape.
    Normal,
    /// Stored row-major as the transpose of the logical shape.
    Transposed,
}

/// `c = a · b + beta · c` for logical shapes `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    parallel::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |chunk_idx, c_chunk| {
        let row0 = chunk_idx * GEMM_ROW_CHUNK;
        let rows = c_chunk.len() / n;
        let a_off = row0 * rsa as usize;
        let a_part = &a[a_off..];
        // SAFETY: every index touched is `r*rsa + p*csa` for r < rows, p < k,
        // which lies inside `a_part`; `b` and `c_chunk` are likewise covered
        // by their strides and lengths.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_part.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Output extent of a strided window sweep.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfolds `x: c×h×w` into a `(c·k·k) × (ho·wo)` patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let plane = ho * wo;
    let mut cols = vec![0.0; c * k * k * plane];
    parallel::for_each_chunk_mut(&mut cols, k * k * plane, |ch, block| {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut block[(ky * k + kx) * plane..(ky * k + kx + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: folds a patch matrix back, summing overlaps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let plane = ho * wo;
    let mut x = vec![0.0; c * h * w];
    parallel::for_each_chunk_mut(&mut x, h * w, |ch, dst| {
        let block = &cols[ch * k * k * plane..(ch + 1) * k * k * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &block[(ky * k + kx) * plane..(ky * k + kx + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    });
    x
}
