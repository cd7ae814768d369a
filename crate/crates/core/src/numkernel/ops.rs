//! Pure forward kernels. Every function here is deterministic and allocation-only.

use super::matrix::Matrix;
use super::KernelError;

/// Width of the temporal convolution window (offsets -1, 0, +1).
pub const CONV_WIDTH: usize = 3;

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn check_conv(input: &Matrix, kernel: &Matrix, bias: &Matrix) -> Result<(), KernelError> {
    let din = input.cols();
    if input.rows() == 0 {
        return Err(KernelError::Shape {
            op: "conv1d",
            detail: "empty input sequence".into(),
        });
    }
    if kernel.rows() != CONV_WIDTH * din {
        return Err(KernelError::Shape {
            op: "conv1d",
            detail: format!(
                "kernel has {} rows, expected {} for input width {din}",
                kernel.rows(),
                CONV_WIDTH * din
            ),
        });
    }
    if bias.rows() != 1 || bias.cols() != kernel.cols() {
        return Err(KernelError::Shape {
            op: "conv1d",
            detail: format!("bias {}x{} for {} filters", bias.rows(), bias.cols(), kernel.cols()),
        });
    }
    Ok(())
}

/// Same-length temporal convolution before the activation.
///
/// `kernel` stacks three `Din×d` blocks for offsets -1, 0, +1; rows outside
/// `[0, L)` read as zero.
pub fn conv1d_linear(input: &Matrix, kernel: &Matrix, bias: &Matrix) -> Result<Matrix, KernelError> {
    check_conv(input, kernel, bias)?;
    let (len, din) = input.shape();
    let d = kernel.cols();
    let mut out = Matrix::zeros(len, d);
    for t in 0..len {
        let out_row = out.row_mut(t);
        out_row.copy_from_slice(bias.row(0));
        for k in 0..CONV_WIDTH {
            let src = t as isize + k as isize - 1;
            if src < 0 || src >= len as isize {
                continue;
            }
            let x = input.row(src as usize);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let w = kernel.row(k * din + i);
                for (o, wv) in out_row.iter_mut().zip(w) {
                    *o += xi * wv;
                }
            }
        }
    }
    Ok(out)
}

/// Temporal convolution followed by ReLU.
pub fn conv1d(input: &Matrix, kernel: &Matrix, bias: &Matrix) -> Result<Matrix, KernelError> {
    let mut out = conv1d_linear(input, kernel, bias)?;
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    Ok(out)
}

/// `(w · x) / (Σw + eps)` for a `1×L` weight row and an `L×d` matrix.
pub fn weighted_mean(weights: &Matrix, x: &Matrix, eps: f64) -> Result<Matrix, KernelError> {
    if weights.rows() != 1 || weights.cols() != x.rows() {
        return Err(KernelError::Shape {
            op: "weighted_mean",
            detail: format!(
                "weights {}x{} against {} frames",
                weights.rows(),
                weights.cols(),
                x.rows()
            ),
        });
    }
    let denom = weights.sum() + eps;
    let mut out = weights.matmul(x)?;
    for v in out.data_mut() {
        *v /= denom;
    }
    Ok(out)
}

/// Σ_r −ln max(p[r, target_r], floor).
pub fn nll_rows(probs: &Matrix, targets: &[usize], floor: f64) -> Result<f64, KernelError> {
    check_targets(probs, targets)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -probs.get(r, t).max(floor).ln())
        .sum())
}

pub(crate) fn check_targets(probs: &Matrix, targets: &[usize]) -> Result<(), KernelError> {
    if targets.len() != probs.rows() {
        return Err(KernelError::Shape {
            op: "nll",
            detail: format!("{} targets for {} rows", targets.len(), probs.rows()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= probs.cols()) {
        return Err(KernelError::Shape {
            op: "nll",
            detail: format!("target class {bad} outside {} classes", probs.cols()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn conv_identity_center_kernel() {
        let mut kernel = Matrix::zeros(6, 2);
        kernel.set(2, 0, 1.0);
        kernel.set(3, 1, 1.0);
        let input = Matrix::from_rows(&[[1.0, -2.0], [3.0, 4.0]]);
        let out = conv1d(&input, &kernel, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[1.0, 0.0], [3.0, 4.0]]));
    }

    #[test]
    fn conv_zero_input_leaves_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kernel = random(&mut rng, 6, 2);
        let out = conv1d(&Matrix::zeros(3, 2), &kernel, &Matrix::row_vector(&[0.5, -0.5])).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.5, 0.0]);
        }
    }

    #[test]
    fn conv_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random(&mut rng, 4, 2);
        let kernel = random(&mut rng, 6, 3);
        let bias = random(&mut rng, 1, 3);
        let out = conv1d(&input, &kernel, &bias).unwrap();
        for t in 0..4i64 {
            for j in 0..3 {
                let mut acc = bias.get(0, j);
                for off in -1i64..=1 {
                    let s = t + off;
                    if !(0..4).contains(&s) {
                        continue;
                    }
                    for i in 0..2 {
                        acc += input.get(s as usize, i) * kernel.get(((off + 1) * 2) as usize + i, j);
                    }
                }
                assert!((out.get(t as usize, j) - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let input = Matrix::zeros(3, 2);
        assert!(conv1d(&input, &Matrix::zeros(5, 2), &Matrix::zeros(1, 2)).is_err());
        assert!(conv1d(&input, &Matrix::zeros(6, 2), &Matrix::zeros(1, 3)).is_err());
        assert!(conv1d(&Matrix::zeros(0, 2), &Matrix::zeros(6, 2), &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        for x in [-3.0, -0.2, 0.7, 12.0] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
        // both branches against the naive formula where it is still exact enough
        for x in [-30.0f64, 30.0] {
            let s = sigmoid_scalar(x);
            assert!(s.is_finite() && s > 0.0 && s < 1.0);
            let naive = 1.0 / (1.0 + (-x).exp());
            assert!((s - naive).abs() <= 1e-15 * naive.max(1e-300));
        }
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let p = softmax_rows(&Matrix::filled(1, 4, 3.3));
        assert_eq!(p.row(0), &[0.25; 4]);
        let x = Matrix::row_vector(&[0.1, -1.0, 2.0]);
        let shifted = x.map(|v| v + 17.0);
        let a = softmax_rows(&x);
        let b = softmax_rows(&shifted);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits() {
        let big = softmax_rows(&Matrix::row_vector(&[1000.0, 1000.5]));
        let small = softmax_rows(&Matrix::row_vector(&[0.0, 0.5]));
        assert!(big.is_finite());
        assert_eq!(big, small);
        // direct two-class evaluation: 1 / (1 + e^0.5)
        assert!((small.get(0, 0) - 1.0 / (1.0 + 0.5f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn weighted_mean_hand_case() {
        let w = Matrix::row_vector(&[0.2, 0.6]);
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let m = weighted_mean(&w, &x, 0.0).unwrap();
        assert!((m.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn nll_values() {
        let p = Matrix::row_vector(&[0.7, 0.2, 0.1]);
        assert!((nll_rows(&p, &[1], 1e-12).unwrap() - 1.6094379124341003).abs() < 1e-12);
        let onehot = Matrix::row_vector(&[0.0, 1.0]);
        assert_eq!(nll_rows(&onehot, &[1], 1e-12).unwrap(), 0.0);
        assert!((nll_rows(&onehot, &[0], 1e-12).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(nll_rows(&p, &[3], 1e-12).is_err());
    }
}
