//! Orthonormal type-II discrete sine transform.
//!
//! `S[k][n] = sqrt(2/N) c_k sin(pi (n + 1/2)(k + 1) / N)` with
//! `c_{N-1} = 1/sqrt(2)` and `c_k = 1` otherwise. `S` is orthogonal, so the
//! inverse (DST-III) is its transpose.

use std::f64::consts::PI;

/// Row-major `N x N` orthonormal DST-II matrix.
pub fn dst2_matrix(n: usize) -> Vec<f64> {
    let scale = (2.0 / n as f64).sqrt();
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let ck = if k == n - 1 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        for j in 0..n {
            m[k * n + j] = scale * ck * (PI * (j as f64 + 0.5) * (k as f64 + 1.0) / n as f64).sin();
        }
    }
    m
}

/// Separable 2-D transform of one `H x W` plane: `S_H X S_W^T`, or
/// `S_H^T X S_W` when `transpose` is set.
pub fn dst2_plane(x: &[f64], h: usize, w: usize, sh: &[f64], sw: &[f64], transpose: bool) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    // along rows (width axis)
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for k in 0..w {
            let mut acc = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let coef = if transpose { sw[j * w + k] } else { sw[k * w + j] };
                acc += coef * v;
            }
            tmp[y * w + k] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for k in 0..h {
        for j in 0..h {
            let coef = if transpose { sh[j * h + k] } else { sh[k * h + j] };
            if coef == 0.0 {
                continue;
            }
            let src = &tmp[j * w..(j + 1) * w];
            let dst = &mut out[k * w..(k + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += coef * s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_is_orthonormal() {
        for n in [1, 2, 5, 8, 16] {
            let m = dst2_matrix(n);
            for a in 0..n {
                for b in 0..n {
                    let d: f64 = (0..n).map(|j| m[a * n + j] * m[b * n + j]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12, "n={n} a={a} b={b} d={d}");
                }
            }
        }
    }

    #[test]
    fn plane_round_trip() {
        let (h, w) = (6, 4);
        let sh = dst2_matrix(h);
        let sw = dst2_matrix(w);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = dst2_plane(&x, h, w, &sh, &sw, false);
        let back = dst2_plane(&y, h, w, &sh, &sw, true);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
