//! Value-level head computations, mirroring the graph built in [`super::graph`].

use crate::numkernel::{ops, softmax_rows, KernelError, Matrix};

/// Sentinel added to the pooling denominator so an all-zero attention row stays finite.
pub const POOL_EPS: f64 = 1e-8;
/// Probability floor inside the log of the clip loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// `sigmoid(W1 · Fᵀ)`, one row per class.
pub fn attention(frames: &Matrix, embeddings: &Matrix) -> Result<Matrix, KernelError> {
    Ok(ops::sigmoid(&embeddings.matmul_bt(frames)?))
}

pub fn select_row(attention: &Matrix, class: usize) -> Result<Matrix, KernelError> {
    if class >= attention.rows() {
        return Err(KernelError::Shape {
            op: "select_row",
            detail: format!("class {class} outside {} attention rows", attention.rows()),
        });
    }
    Ok(Matrix::row_vector(attention.row(class)))
}

/// Row-wise softmax of `F · W2`.
pub fn frame_scores(frames: &Matrix, classifier: &Matrix) -> Result<Matrix, KernelError> {
    Ok(softmax_rows(&frames.matmul(classifier)?))
}

pub fn pool(weights: &Matrix, frames: &Matrix) -> Result<Matrix, KernelError> {
    ops::weighted_mean(weights, frames, POOL_EPS)
}

pub fn clip_predict(pooled: &Matrix, classifier: &Matrix) -> Result<Matrix, KernelError> {
    Ok(softmax_rows(&pooled.matmul(classifier)?))
}

/// `−ln P[class]` with the probability floored at [`PROB_FLOOR`].
pub fn clip_loss(probs: &Matrix, class: usize) -> Result<f64, KernelError> {
    ops::nll_rows(probs, &[class], PROB_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::sigmoid_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(&mut rng, 4, 5);
        let zero = attention(&f, &Matrix::zeros(3, 5)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.5));

        let frames = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let emb = Matrix::from_rows(&[[0.0, 3.0]]);
        assert_eq!(attention(&frames, &emb).unwrap().get(0, 0), 0.5);

        let w1 = random(&mut rng, 3, 5);
        let a = attention(&f, &w1).unwrap();
        assert_eq!(a.shape(), (3, 4));
        for c in 0..3 {
            for t in 0..4 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += w1.get(c, k) * f.get(t, k);
                }
                assert!((a.get(c, t) - sigmoid_scalar(s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_row_cases() {
        let one = Matrix::from_rows(&[[0.1, 0.2]]);
        assert_eq!(select_row(&one, 0).unwrap(), one);
        let a = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]);
        assert_eq!(select_row(&a, 2).unwrap().row(0), &[0.5, 0.6]);
        assert!(select_row(&a, 3).is_err());
    }

    #[test]
    fn frame_score_cases() {
        let f = Matrix::from_rows(&[[1.0, -1.0], [0.5, 2.0]]);
        let d = frame_scores(&f, &Matrix::zeros(2, 4)).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let w2 = Matrix::from_rows(&[[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]);
        let d = frame_scores(&f, &w2).unwrap();
        for t in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|k| f.get(t, 0) * w2.get(0, k) + f.get(t, 1) * w2.get(1, k))
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..3 {
                assert!((d.get(t, k) - logits[k].exp() / z).abs() < 1e-12);
            }
        }
        // a column-constant shift of the logits leaves D unchanged
        let shifted = Matrix::hstack(&[&f, &Matrix::filled(2, 1, 1.0)]).unwrap();
        let w2s = Matrix::from_rows(&[[1.0, 0.0, -1.0], [0.5, 2.0, 0.0], [4.0, 4.0, 4.0]]);
        let ds = frame_scores(&shifted, &w2s).unwrap();
        for (a, b) in d.data().iter().zip(ds.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_cases() {
        let f = Matrix::from_rows(&[[1.0, 4.0], [3.0, 0.0], [2.0, 2.0]]);
        let uniform = pool(&Matrix::filled(1, 3, 0.7), &f).unwrap();
        assert!((uniform.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((uniform.get(0, 1) - 2.0).abs() < 1e-8);

        let onehot = pool(&Matrix::row_vector(&[0.0, 1.0, 0.0]), &f).unwrap();
        assert!((onehot.get(0, 0) - 3.0).abs() < 1e-7 && onehot.get(0, 1).abs() < 1e-7);

        let hand = pool(
            &Matrix::row_vector(&[0.2, 0.6]),
            &Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
        )
        .unwrap();
        assert!((hand.get(0, 0) - 0.25).abs() < 1e-7);
        assert!((hand.get(0, 1) - 0.75).abs() < 1e-7);

        let zeros = pool(&Matrix::zeros(1, 3), &f).unwrap();
        assert!(zeros.is_finite());
    }

    #[test]
    fn clip_prediction_cases() {
        let w2 = Matrix::from_rows(&[[1.0, -0.5, 2.0], [0.3, 0.3, -1.0]]);
        let p = clip_predict(&Matrix::zeros(1, 2), &w2).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let pooled = Matrix::row_vector(&[0.5, 2.0]);
        let p = clip_predict(&pooled, &w2).unwrap();
        let logits = [0.5 + 0.6, -0.25 + 0.6, 1.0 - 2.0];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for k in 0..3 {
            assert!((p.get(0, k) - logits[k].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_cases() {
        assert_eq!(clip_loss(&Matrix::row_vector(&[0.0, 1.0, 0.0]), 1).unwrap(), 0.0);
        let uniform = Matrix::filled(1, 5, 0.2);
        assert!((clip_loss(&uniform, 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        let p = Matrix::row_vector(&[0.7, 0.2, 0.1]);
        assert!((clip_loss(&p, 1).unwrap() - 1.6094379124341003).abs() < 1e-4);
    }
}
