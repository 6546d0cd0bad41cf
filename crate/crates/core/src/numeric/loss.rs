use super::Scalar;
use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|v| v / total).collect()
}

pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let log_total = logits.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    logits.iter().map(|&v| v - log_total).collect()
}

/// `softmax(logits / temperature)`.
pub fn softmax_temperature<S: Scalar>(logits: &[S], temperature: S) -> Result<Vec<S>> {
    if !(temperature > S::zero()) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<S> = logits.iter().map(|&v| v / temperature).collect();
    Ok(softmax(&scaled))
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy<S: Scalar>(logits: &[S], target: usize) -> Result<S> {
    if target >= logits.len() {
        return Err(Error::Index(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)[target])
}

pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Softmax straight from the definition, no stabilisation.
    fn naive_softmax(logits: &[f64]) -> Vec<f64> {
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|v| v / total).collect()
    }

    #[test]
    fn cross_entropy_values() {
        let ce = cross_entropy(&[0.0, 0.0, 0.0], 0).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);

        let oracle = |logits: &[f64], t: usize| -naive_softmax(logits)[t].ln();
        let ce = cross_entropy(&[10.0, 0.0, 0.0], 0).unwrap();
        assert!((ce - oracle(&[10.0, 0.0, 0.0], 0)).abs() < 1e-12);
        assert!((ce - 9.079e-5).abs() < 1e-8);
        let ce = cross_entropy(&[10.0, 0.0, 0.0], 1).unwrap();
        assert!((ce - oracle(&[10.0, 0.0, 0.0], 1)).abs() < 1e-12);
        assert!((ce - 10.0000908).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        assert!(matches!(cross_entropy(&[1.0f64, 2.0], 2), Err(Error::Index(_))));
    }

    #[test]
    fn temperature_softmax() {
        let p = softmax_temperature(&[2.0, 0.0], 2.0).unwrap();
        let oracle = naive_softmax(&[1.0, 0.0]);
        assert!((p[0] - oracle[0]).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);

        let logits = [0.3, -1.2, 2.5];
        let plain = softmax(&logits);
        let unit = softmax_temperature(&logits, 1.0).unwrap();
        assert_eq!(plain, unit);

        for t in [0.1, 1.0, 7.5] {
            let p = softmax_temperature(&[5.0, 5.0], t).unwrap();
            assert_eq!(p, vec![0.5, 0.5]);
        }
        assert!(matches!(softmax_temperature(&[1.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(softmax_temperature(&[1.0], -2.0), Err(Error::Argument(_))));
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3f64, -2.0, 1.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let ce = cross_entropy(&[0.0f32, 0.0, 0.0], 2).unwrap();
        assert!((ce - 3f32.ln()).abs() < 1e-6);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one(logits in prop::collection::vec(-30.0f64..30.0, 1..12), t in 0.05f64..10.0) {
                let p = softmax_temperature(&logits, t).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }

            #[test]
            fn cross_entropy_non_negative(logits in prop::collection::vec(-30.0f64..30.0, 1..12), pick in 0usize..12) {
                let target = pick % logits.len();
                prop_assert!(cross_entropy(&logits, target).unwrap() >= 0.0);
            }
        }
    }
}
