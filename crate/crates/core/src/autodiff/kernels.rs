//! Dense kernels shared by the convolution ops.

/// `C = alpha * op(A) * op(B) + beta * C` with row-major operands.
///
/// `op(A)` is `m x k`, `op(B)` is `k x n`, `C` is `m x n`. When `trans_a`
/// is set, `a` holds a row-major `k x m` matrix (likewise for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths match the strides above, so every index
    // dgemm touches lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a valid strided correlation.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

/// Unfolds a `(C, H, W)` image into a `(C*kh*kw, Ho*Wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    cols: &mut [f64],
) {
    let ho = conv_out_len(height, kh, stride);
    let wo = conv_out_len(width, kw, stride);
    let npix = ho * wo;
    debug_assert_eq!(cols.len(), channels * kh * kw * npix);
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let src_row = &plane[(oy * stride + ky) * width..];
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        d.copy_from_slice(&src_row[kx..kx + wo]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src_row[ox * stride + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    x: &mut [f64],
) {
    let ho = conv_out_len(height, kh, stride);
    let wo = conv_out_len(width, kw, stride);
    let npix = ho * wo;
    for c in 0..channels {
        let plane = &mut x[c * height * width..(c + 1) * height * width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let base = (oy * stride + ky) * width + kx;
                    let s = &src[oy * wo..(oy + 1) * wo];
                    for (ox, v) in s.iter().enumerate() {
                        plane[base + ox * stride] += v;
                    }
                }
            }
        }
    }
}
