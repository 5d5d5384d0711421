//! Training objectives: adversarial (least squares), length, duration and
//! reconstruction losses, plus their weighted total.
//!
//! Every function takes plain numeric values. In particular
//! [`duration_loss`] has no link back to whatever produced its inputs, so the
//! stop-gradient contract (neither the encoder features nor the aligner's
//! expected durations receive gradient from it) holds by construction; only
//! [`duration_loss_grad`] with respect to the predictor output exists.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_length: f64,
    pub lambda_duration: f64,
    pub lambda_recon: f64,
    pub lambda_mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_length: 1.0,
            lambda_duration: 1.0,
            lambda_recon: 1.0,
            lambda_mel: 45.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_length", self.lambda_length),
            ("lambda_duration", self.lambda_duration),
            ("lambda_recon", self.lambda_recon),
            ("lambda_mel", self.lambda_mel),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How per-layer feature differences are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureReduction {
    /// Entrywise absolute sum per layer.
    #[default]
    Sum,
    /// Entrywise absolute mean per layer.
    LayerMean,
}

/// Discriminator scores and per-layer feature maps for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutputs {
    pub scores: Vec<f64>,
    pub feature_maps: Vec<Array2<f64>>,
}

/// Frames x bands matrix of log-magnitude mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelMatrix(pub Array2<f64>);

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `|total_frames - sum_i E[w_i]| / N`.
pub fn length_loss<S: Real>(expected: &[S], total_frames: usize) -> Result<S> {
    if expected.is_empty() {
        return Err(Error::invalid("length loss needs at least one token"));
    }
    let sum = expected.iter().fold(S::zero(), |acc, &v| acc + v);
    Ok((S::of(total_frames as f64) - sum).abs() / S::of(expected.len() as f64))
}

/// Gradient of [`length_loss`] with respect to each expected duration; zero at
/// the kink.
pub fn length_loss_grad(expected: &[f64], total_frames: usize) -> Result<Vec<f64>> {
    if expected.is_empty() {
        return Err(Error::invalid("length loss needs at least one token"));
    }
    let n = expected.len() as f64;
    let g = -sign(total_frames as f64 - expected.iter().sum::<f64>()) / n;
    Ok(vec![g; expected.len()])
}

/// `sum_i |predicted_i - expected_i| / N`. Both arguments are detached values.
pub fn duration_loss(predicted: &[f64], expected: &[f64]) -> Result<f64> {
    if predicted.len() != expected.len() {
        return Err(Error::shape(
            "duration vectors",
            predicted.len(),
            expected.len(),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("duration loss needs at least one token"));
    }
    finite(predicted, "predicted durations")?;
    finite(expected, "expected durations")?;
    let total: f64 = predicted
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / predicted.len() as f64)
}

/// Gradient of [`duration_loss`] with respect to the predictor output only.
pub fn duration_loss_grad(predicted: &[f64], expected: &[f64]) -> Result<Vec<f64>> {
    if predicted.len() != expected.len() {
        return Err(Error::shape(
            "duration vectors",
            predicted.len(),
            expected.len(),
        ));
    }
    let n = predicted.len() as f64;
    Ok(predicted
        .iter()
        .zip(expected)
        .map(|(a, b)| sign(a - b) / n)
        .collect())
}

fn mean_sq(values: &[f64], target: f64) -> f64 {
    values.iter().map(|v| (v - target).powi(2)).sum::<f64>() / values.len() as f64
}

/// `mean (D(z) - 1)^2 + mean D(G(x))^2`.
pub fn lsgan_discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::invalid(
            "discriminator loss needs real and fake scores",
        ));
    }
    finite(real_scores, "real scores")?;
    finite(fake_scores, "fake scores")?;
    Ok(mean_sq(real_scores, 1.0) + mean_sq(fake_scores, 0.0))
}

/// `mean (D(G(x)) - 1)^2`.
pub fn lsgan_generator_loss(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::invalid("generator loss needs fake scores"));
    }
    finite(fake_scores, "fake scores")?;
    Ok(mean_sq(fake_scores, 1.0))
}

/// `sum_t ||D_t(G(x)) - D_t(z)||_1` over discriminator layers.
pub fn feature_matching_loss(
    fake: &DiscriminatorOutputs,
    real: &DiscriminatorOutputs,
    reduction: FeatureReduction,
) -> Result<f64> {
    if fake.feature_maps.is_empty() {
        return Err(Error::invalid("feature matching needs at least one layer"));
    }
    if fake.feature_maps.len() != real.feature_maps.len() {
        return Err(Error::shape(
            "discriminator layer count",
            real.feature_maps.len(),
            fake.feature_maps.len(),
        ));
    }
    let mut total = 0.0;
    for (a, b) in fake.feature_maps.iter().zip(&real.feature_maps) {
        if a.dim() != b.dim() {
            return Err(Error::shape(
                "feature map",
                format!("{:?}", b.dim()),
                format!("{:?}", a.dim()),
            ));
        }
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        if !diff.is_finite() {
            return Err(Error::NonFinite("feature maps"));
        }
        total += match reduction {
            FeatureReduction::Sum => diff,
            FeatureReduction::LayerMean if a.is_empty() => 0.0,
            FeatureReduction::LayerMean => diff / a.len() as f64,
        };
    }
    Ok(total)
}

/// `||phi(G(x)) - phi(z)||_1` over all entries.
pub fn spectral_l1(fake_mel: &LogMelMatrix, real_mel: &LogMelMatrix) -> Result<f64> {
    if fake_mel.0.dim() != real_mel.0.dim() {
        return Err(Error::shape(
            "log-mel matrix",
            format!("{:?}", real_mel.0.dim()),
            format!("{:?}", fake_mel.0.dim()),
        ));
    }
    let total: f64 = fake_mel
        .0
        .iter()
        .zip(real_mel.0.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("log-mel matrices"));
    }
    Ok(total)
}

/// Feature matching plus `lambda_mel` times the spectral term.
pub fn reconstruction_loss(
    fake: &DiscriminatorOutputs,
    real: &DiscriminatorOutputs,
    fake_mel: &LogMelMatrix,
    real_mel: &LogMelMatrix,
    weights: &LossWeights,
    reduction: FeatureReduction,
) -> Result<f64> {
    Ok(feature_matching_loss(fake, real, reduction)?
        + weights.lambda_mel * spectral_l1(fake_mel, real_mel)?)
}

/// `adv + lambda_length length + lambda_duration duration + lambda_recon recon`.
pub fn total_generator_loss(
    adv_g: f64,
    length_l: f64,
    duration_l: f64,
    recon_l: f64,
    weights: &LossWeights,
) -> f64 {
    adv_g
        + weights.lambda_length * length_l
        + weights.lambda_duration * duration_l
        + weights.lambda_recon * recon_l
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn outputs(maps: Vec<Array2<f64>>) -> DiscriminatorOutputs {
        DiscriminatorOutputs {
            scores: vec![],
            feature_maps: maps,
        }
    }

    #[test]
    fn length_loss_values() {
        assert_eq!(length_loss(&[1.0, 1.0], 2).unwrap(), 0.0);
        assert_eq!(length_loss(&[1.0], 3).unwrap(), 2.0);
        assert_eq!(length_loss(&[2.0, 2.0], 2).unwrap(), 1.0);
        assert!(length_loss::<f64>(&[], 2).is_err());
    }

    #[test]
    fn length_loss_gradient_sign() {
        assert_eq!(length_loss_grad(&[1.0], 3).unwrap(), vec![-1.0]);
        assert_eq!(length_loss_grad(&[2.0, 2.0], 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(length_loss_grad(&[1.0, 1.0], 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn duration_loss_values() {
        assert_eq!(duration_loss(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert_eq!(duration_loss(&[2.0, 3.0], &[1.0, 1.0]).unwrap(), 1.5);
        assert_eq!(duration_loss(&[0.0], &[0.0]).unwrap(), 0.0);
        assert!(duration_loss(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(
            duration_loss_grad(&[2.0, 1.0], &[1.0, 1.0]).unwrap(),
            vec![0.5, 0.0]
        );
    }

    #[test]
    fn lsgan_values() {
        assert_eq!(lsgan_discriminator_loss(&[1.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(lsgan_discriminator_loss(&[0.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(lsgan_discriminator_loss(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(lsgan_generator_loss(&[1.0]).unwrap(), 0.0);
        assert_eq!(lsgan_generator_loss(&[0.0]).unwrap(), 1.0);
        assert_eq!(lsgan_generator_loss(&[0.5]).unwrap(), 0.25);
        assert!(lsgan_discriminator_loss(&[], &[0.0]).is_err());
        assert!(lsgan_generator_loss(&[]).is_err());
    }

    #[test]
    fn feature_matching_values() {
        let a = outputs(vec![array![[1.0, 2.0]], array![[3.0], [4.0]]]);
        assert_eq!(
            feature_matching_loss(&a, &a, FeatureReduction::Sum).unwrap(),
            0.0
        );

        let fake = outputs(vec![array![[1.0, 2.0]]]);
        let real = outputs(vec![array![[0.0, 0.0]]]);
        assert_eq!(
            feature_matching_loss(&fake, &real, FeatureReduction::Sum).unwrap(),
            3.0
        );
        assert_eq!(
            feature_matching_loss(&fake, &real, FeatureReduction::LayerMean).unwrap(),
            1.5
        );

        let fake = outputs(vec![array![[1.0, 0.0]], array![[0.0], [5.0]]]);
        let real = outputs(vec![array![[0.0, 0.0]], array![[0.0], [4.0]]]);
        assert_eq!(
            feature_matching_loss(&fake, &real, FeatureReduction::Sum).unwrap(),
            2.0
        );

        let bad = outputs(vec![array![[1.0]]]);
        assert!(feature_matching_loss(&bad, &real, FeatureReduction::Sum).is_err());
        assert!(
            feature_matching_loss(&outputs(vec![]), &outputs(vec![]), FeatureReduction::Sum)
                .is_err()
        );
    }

    #[test]
    fn spectral_values() {
        let a = LogMelMatrix(array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(spectral_l1(&a, &a).unwrap(), 0.0);
        let b = LogMelMatrix(a.0.mapv(|v| v + 0.5));
        assert_eq!(spectral_l1(&a, &b).unwrap(), 2.0);
        let mut c = a.clone();
        c.0[[1, 0]] += 3.0;
        assert_eq!(spectral_l1(&c, &a).unwrap(), 3.0);
        assert!(spectral_l1(&a, &LogMelMatrix(array![[1.0]])).is_err());
    }

    #[test]
    fn reconstruction_combines_terms() {
        let fake = outputs(vec![array![[1.0, 2.0]]]);
        let real = outputs(vec![array![[0.0, 0.0]]]);
        let a = LogMelMatrix(array![[0.0]]);
        let b = LogMelMatrix(array![[0.1]]);
        let w = LossWeights::default();
        let r = reconstruction_loss(&fake, &real, &a, &b, &w, FeatureReduction::Sum).unwrap();
        assert!((r - (3.0 + 45.0 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_values() {
        let w = LossWeights::default();
        assert_eq!(total_generator_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_generator_loss(1.0, 1.0, 1.0, 1.0, &w), 4.0);
        let w = LossWeights {
            lambda_length: 2.0,
            lambda_duration: 0.0,
            lambda_recon: 0.0,
            lambda_mel: 0.0,
        };
        assert_eq!(total_generator_loss(0.7, 3.0, 5.0, 9.0, &w), 0.7 + 6.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            lambda_mel: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    proptest! {
        #[test]
        fn duration_loss_is_a_scaled_metric(
            a in prop::collection::vec(0.0f64..10.0, 1..8),
            shift in prop::collection::vec(-3.0f64..3.0, 8),
            other in prop::collection::vec(0.0f64..10.0, 8),
        ) {
            let n = a.len();
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let c = &other[..n];
            let ab = duration_loss(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, duration_loss(&b, &a).unwrap());
            let ac = duration_loss(&a, c).unwrap();
            let cb = duration_loss(c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn losses_are_invariant_to_joint_permutation(
            pairs in prop::collection::vec((0.0f64..6.0, 0.0f64..6.0), 1..8),
            total in 0usize..40,
            rot in 0usize..8,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let k = rot % a.len();
            let mut ar = a.clone();
            let mut br = b.clone();
            ar.rotate_left(k);
            br.rotate_left(k);
            ar.reverse();
            br.reverse();
            let d0 = duration_loss(&a, &b).unwrap();
            let d1 = duration_loss(&ar, &br).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-12);
            let l0 = length_loss(&a, total).unwrap();
            let l1 = length_loss(&ar, total).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-12);
            prop_assert!(l0 >= 0.0);
        }

        #[test]
        fn total_is_linear_in_each_component(
            comps in prop::array::uniform4(0.0f64..5.0),
            w in prop::array::uniform3(0.0f64..4.0),
            bump in 0.0f64..3.0,
        ) {
            let weights = LossWeights { lambda_length: w[0], lambda_duration: w[1], lambda_recon: w[2], lambda_mel: 1.0 };
            let base = total_generator_loss(comps[0], comps[1], comps[2], comps[3], &weights);
            let bumped = total_generator_loss(comps[0], comps[1] + bump, comps[2], comps[3], &weights);
            prop_assert!((bumped - base - w[0] * bump).abs() < 1e-12);
            let bumped = total_generator_loss(comps[0], comps[1], comps[2], comps[3] + bump, &weights);
            prop_assert!((bumped - base - w[2] * bump).abs() < 1e-12);
        }
    }
}
