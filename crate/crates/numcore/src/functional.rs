//! Value-level versions of the losses, used outside recorded graphs
//! (prediction, reporting, oracles).

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub(crate) fn softmax_slice(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row.iter().map(move |v| (v - max).exp() / z)
}

pub(crate) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

/// Softmax along the last axis, with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_finite() {
        return Err(NumError::NonFinite("softmax logits"));
    }
    let c = logits.channels();
    let data = logits.data().chunks(c).flat_map(softmax_slice).collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// `-log softmax(logits)[label]` for a single logit vector.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(NumError::Contract(format!(
            "label {label} outside [0, {})",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite("cross-entropy logits"));
    }
    Ok(-log_softmax_at(logits, label))
}

/// Right-hand side of [`mse`]: another tensor or a broadcast constant.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

/// Mean over all elements of squared differences.
pub fn mse(a: &Tensor, b: Target<'_>) -> Result<f64> {
    let n = a.len() as f64;
    match b {
        Target::Scalar(t) => Ok(a.data().iter().map(|v| (v - t) * (v - t)).sum::<f64>() / n),
        Target::Tensor(b) => {
            if a.shape() != b.shape() {
                return Err(NumError::Shape(format!("mse {:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let t = softmax(&Tensor::from_vec(vec![0.0; 3]).unwrap()).unwrap();
        for v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = softmax(&Tensor::from_vec(vec![0.0, 2f64.ln()]).unwrap()).unwrap();
        assert!((t.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let t = softmax(&Tensor::from_vec(vec![1000.0, 999.0]).unwrap()).unwrap();
        assert!(t.is_finite());
        assert!((t.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0; 6], 2).unwrap() - 6f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(&[80.0, 0.0, 0.0], 0).unwrap() < 1e-30);
        assert!(matches!(cross_entropy(&[0.0; 3], 3), Err(NumError::Contract(_))));
    }

    #[test]
    fn cross_entropy_direct_formula() {
        let z: [f64; 4] = [0.3, -1.2, 2.5, 0.7];
        for y in 0..4 {
            let direct = -z[y].exp().ln() + z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
            assert!((cross_entropy(&z, y).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_examples() {
        let x = Tensor::from_vec(vec![0.5, -2.0]).unwrap();
        assert_eq!(mse(&x, Target::Tensor(&x)).unwrap(), 0.0);
        let a = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        assert_eq!(mse(&a, Target::Tensor(&b)).unwrap(), 1.0);
        assert!(mse(&a, Target::Tensor(&Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn mse_to_uniform_is_variance_around_uniform() {
        let p = [0.5, 0.3, 0.2];
        let t = Tensor::from_vec(p.to_vec()).unwrap();
        let u = 1.0 / 3.0;
        let direct = p.iter().map(|v| (v - u).powi(2)).sum::<f64>() / 3.0;
        assert!((mse(&t, Target::Scalar(u)).unwrap() - direct).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in proptest::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
            let a = softmax(&Tensor::from_vec(z.clone()).unwrap()).unwrap();
            let b = softmax(&Tensor::from_vec(z.iter().map(|v| v + c).collect()).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
            prop_assert_eq!(a.argmax_rows(), b.argmax_rows());
            prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        }
    }
}
