//! Dense f64 kernels used by the forward and backward passes.
//!
//! All reductions run in a fixed order so results are bitwise reproducible.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m, n] = sum_k a[m, k] * w[n, k] + bias[n]`; `w` is `n x k` (row per output).
pub(crate) fn linear(a: &[f64], rows: usize, w: &[f64], bias: Option<&[f64]>, n_out: usize) -> Vec<f64> {
    let k = a.len() / rows;
    debug_assert_eq!(w.len(), n_out * k);
    let mut out = vec![0.0; rows * n_out];
    for m in 0..rows {
        let arow = &a[m * k..(m + 1) * k];
        let orow = &mut out[m * n_out..(m + 1) * n_out];
        for (n, o) in orow.iter_mut().enumerate() {
            let v = dot(arow, &w[n * k..(n + 1) * k]);
            *o = match bias {
                Some(b) => v + b[n],
                None => v,
            };
        }
    }
    out
}

/// Backward of [`linear`]: accumulates `dw += dyᵀ a`, `db += Σ dy`, returns `da = dy w`.
pub(crate) fn linear_backward(
    dy: &[f64],
    a: &[f64],
    rows: usize,
    w: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let n_out = dy.len() / rows;
    let k = a.len() / rows;
    let mut da = vec![0.0; rows * k];
    for m in 0..rows {
        let dyrow = &dy[m * n_out..(m + 1) * n_out];
        let arow = &a[m * k..(m + 1) * k];
        let darow = &mut da[m * k..(m + 1) * k];
        for (n, &g) in dyrow.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, &w[n * k..(n + 1) * k], darow);
            axpy(g, arow, &mut dw[n * k..(n + 1) * k]);
        }
    }
    if let Some(db) = db {
        for m in 0..rows {
            for (b, g) in db.iter_mut().zip(&dy[m * n_out..(m + 1) * n_out]) {
                *b += g;
            }
        }
    }
    da
}

/// `a (m x k) · b (k x n)`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let v = a[i * k + p];
            if v != 0.0 {
                axpy(v, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-row layer norm. Returns output plus the normalized rows and reciprocal std for backward.
pub(crate) fn layer_norm(x: &[f64], width: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..width {
            let h = (row[i] - mean) * rs;
            xhat[r * width + i] = h;
            out[r * width + i] = h * gain[i] + bias[i];
        }
    }
    (out, xhat, rstd)
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    width: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / width;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let dyr = &dy[r * width..(r + 1) * width];
        let xr = &xhat[r * width..(r + 1) * width];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..width {
            dgain[i] += dyr[i] * xr[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xr[i];
        }
        mean_d /= width as f64;
        mean_dx /= width as f64;
        for i in 0..width {
            dx[r * width + i] = rstd[r] * (dxhat[i] - mean_d - xr[i] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-sum-exp of a row.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn linear_and_matmul_agree() {
        // a: 2x3, w: 4x3
        let a = [1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        let w: Vec<f64> = (0..12).map(|i| (i as f64 - 5.0) / 3.0).collect();
        let via_linear = linear(&a, 2, &w, None, 4);
        let via_matmul = matmul(&a, &transpose(&w, 4, 3), 2, 3, 4);
        for (x, y) in via_linear.iter().zip(&via_matmul) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 4.0];
        let (out, _, _) = layer_norm(&x, 4, &[1.0; 4], &[0.0; 4]);
        for r in 0..2 {
            let row = &out[r * 4..r * 4 + 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }
}
