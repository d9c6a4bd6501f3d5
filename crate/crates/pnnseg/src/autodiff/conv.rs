//! Convolution kernels: im2col + GEMM, and the block-disjoint transposed
//! convolution (kernel size == stride).
//!
//! All buffers are flat row-major f64. Single-threaded GEMM keeps results
//! bit-deterministic.

/// c[m x n] = alpha * a[m x k] @ b[k x n] + beta * c, all row-major.
fn gemm_nn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m x n] = alpha * a[m x k] @ b'[n x k]^T + beta * c.
fn gemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m x n] = alpha * a'[k x m]^T @ b[k x n] + beta * c.
fn gemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Geometry of one conv2d application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image (C, H, W) into patch columns [(C*kh*kw) x (oh*ow)].
fn im2col(d: &ConvDims, image: &[f64], cols: &mut [f64]) {
    let positions = d.positions();
    for c in 0..d.cin {
        let plane = &image[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let out_row = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let dst = &mut out_row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *slot = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add patch columns back onto the image.
fn col2im(d: &ConvDims, cols: &[f64], image_grad: &mut [f64]) {
    let positions = d.positions();
    for c in 0..d.cin {
        let plane = &mut image_grad[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src_row = &cols[row * positions..(row + 1) * positions];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in src_row[oy * d.ow..(oy + 1) * d.ow].iter().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward conv2d. `weight` is [Cout, Cin, kh, kw], `bias` is [Cout].
pub(crate) fn conv2d_forward(d: &ConvDims, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let positions = d.positions();
    let patch = d.patch_len();
    let mut out = vec![0.0; d.batch * d.cout * positions];
    let mut cols = vec![0.0; patch * positions];
    for n in 0..d.batch {
        im2col(d, &input[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w], &mut cols);
        let out_n = &mut out[n * d.cout * positions..(n + 1) * d.cout * positions];
        gemm_nn(d.cout, patch, positions, 1.0, weight, &cols, 0.0, out_n);
        for o in 0..d.cout {
            let b = bias[o];
            for v in &mut out_n[o * positions..(o + 1) * positions] {
                *v += b;
            }
        }
    }
    out
}

/// Backward conv2d. Accumulates into the provided gradient buffers; any of
/// them may be absent when that input does not need a gradient.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    mut d_weight: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
) {
    let positions = d.positions();
    let patch = d.patch_len();
    let mut cols = vec![0.0; patch * positions];
    let mut d_cols = vec![0.0; patch * positions];
    for n in 0..d.batch {
        let d_out_n = &d_out[n * d.cout * positions..(n + 1) * d.cout * positions];
        if let Some(db) = d_bias.as_deref_mut() {
            for o in 0..d.cout {
                db[o] += d_out_n[o * positions..(o + 1) * positions].iter().sum::<f64>();
            }
        }
        if d_weight.is_some() {
            im2col(d, &input[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w], &mut cols);
            let dw = d_weight.as_deref_mut().unwrap();
            // dW[Cout x patch] += dOut[Cout x P] @ cols[patch x P]^T
            gemm_nt(d.cout, positions, patch, 1.0, d_out_n, &cols, 1.0, dw);
        }
        if let Some(di) = d_input.as_deref_mut() {
            // dCols[patch x P] = W[Cout x patch]^T @ dOut[Cout x P]
            gemm_tn(patch, d.cout, positions, 1.0, weight, d_out_n, 0.0, &mut d_cols);
            col2im(d, &d_cols, &mut di[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w]);
        }
    }
}

/// Geometry of a transposed convolution with kernel == stride, so every
/// input pixel owns a disjoint (kh x kw) output block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvTransposeDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Forward transposed conv. `weight` is [Cin, Cout, k, k], `bias` is [Cout].
pub(crate) fn conv_transpose2d_forward(
    d: &ConvTransposeDims,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let block_rows = d.cout * kk;
    let mut out = vec![0.0; d.batch * d.cout * d.oh * d.ow];
    let mut blocks = vec![0.0; block_rows * hw];
    for n in 0..d.batch {
        let in_n = &input[n * d.cin * hw..(n + 1) * d.cin * hw];
        // blocks[(Cout*k*k) x (H*W)] = W[Cin x (Cout*k*k)]^T @ in[Cin x (H*W)]
        gemm_tn(block_rows, d.cin, hw, 1.0, weight, in_n, 0.0, &mut blocks);
        let out_n = &mut out[n * d.cout * d.oh * d.ow..(n + 1) * d.cout * d.oh * d.ow];
        for co in 0..d.cout {
            let b = bias[co];
            let plane = &mut out_n[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
            for ki in 0..d.k {
                for kj in 0..d.k {
                    let src = &blocks[((co * d.k + ki) * d.k + kj) * hw..((co * d.k + ki) * d.k + kj + 1) * hw];
                    for y in 0..d.h {
                        let dst_row = (y * d.k + ki) * d.ow;
                        for x in 0..d.w {
                            plane[dst_row + x * d.k + kj] = src[y * d.w + x] + b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward transposed conv, accumulating into the provided buffers.
pub(crate) fn conv_transpose2d_backward(
    d: &ConvTransposeDims,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    mut d_weight: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let block_rows = d.cout * kk;
    let mut d_blocks = vec![0.0; block_rows * hw];
    for n in 0..d.batch {
        let d_out_n = &d_out[n * d.cout * d.oh * d.ow..(n + 1) * d.cout * d.oh * d.ow];
        // Gather output-block gradients back into matrix form.
        for co in 0..d.cout {
            let plane = &d_out_n[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
            if let Some(db) = d_bias.as_deref_mut() {
                db[co] += plane.iter().sum::<f64>();
            }
            for ki in 0..d.k {
                for kj in 0..d.k {
                    let dst = &mut d_blocks[((co * d.k + ki) * d.k + kj) * hw..((co * d.k + ki) * d.k + kj + 1) * hw];
                    for y in 0..d.h {
                        let src_row = (y * d.k + ki) * d.ow;
                        for x in 0..d.w {
                            dst[y * d.w + x] = plane[src_row + x * d.k + kj];
                        }
                    }
                }
            }
        }
        if let Some(di) = d_input.as_deref_mut() {
            // dIn[Cin x HW] += W[Cin x (Cout*k*k)] @ dBlocks[(Cout*k*k) x HW]
            gemm_nn(d.cin, block_rows, hw, 1.0, weight,
                &d_blocks, 1.0, &mut di[n * d.cin * hw..(n + 1) * d.cin * hw]);
        }
        if let Some(dw) = d_weight.as_deref_mut() {
            let in_n = &input[n * d.cin * hw..(n + 1) * d.cin * hw];
            // dW[Cin x (Cout*k*k)] += in[Cin x HW] @ dBlocks[(Cout*k*k) x HW]^T
            gemm_nt(d.cin, hw, block_rows, 1.0, in_n, &d_blocks, 1.0, dw);
        }
    }
}
