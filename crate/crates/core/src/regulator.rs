//! Hard, inference-time path: sampled or rounded integer durations and the
//! classic length regulator that repeats each token embedding.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::{AttentionMatrix, DurationParams, ExpandedSequence, HiddenSequence};
use crate::real::Real;

/// Integer frame count per token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DurationVector(pub Vec<usize>);

impl DurationVector {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for DurationVector {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Runs up to `M` Bernoulli trials per token and stops at the first success;
/// a token with no success gets duration zero.
pub fn sample_durations<R: Rng + ?Sized>(params: &DurationParams, rng: &mut R) -> DurationVector {
    let p = params.view();
    let out = p
        .outer_iter()
        .map(|row| {
            row.iter()
                .position(|&pm| rng.random::<f64>() < pm)
                .map_or(0, |k| k + 1)
        })
        .collect();
    DurationVector(out)
}

/// Rounds each expected duration to the nearest frame (ties to even) and
/// clamps to `[0, max_duration]`.
pub fn discretize_durations(expected: &[f64], max_duration: usize) -> Result<DurationVector> {
    expected
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::NonFinite("expected durations"));
            }
            Ok(v.round_ties_even().clamp(0.0, max_duration as f64) as usize)
        })
        .collect::<Result<Vec<_>>>()
        .map(DurationVector)
}

/// Multiplies every duration by `factor` and discretizes again.
pub fn scale_durations(
    durations: &[f64],
    factor: f64,
    max_duration: usize,
) -> Result<DurationVector> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!(
            "duration scale must be positive, got {factor}"
        )));
    }
    let scaled: Vec<f64> = durations.iter().map(|d| d * factor).collect();
    discretize_durations(&scaled, max_duration)
}

/// Repeats token `i`'s embedding `d_i` times, in token order.
pub fn expand<S: Real>(h: &HiddenSequence<S>, d: &DurationVector) -> Result<ExpandedSequence<S>> {
    if h.n_tokens() != d.len() {
        return Err(Error::shape("duration count", h.n_tokens(), d.len()));
    }
    let hv = h.view();
    let mut y = Array2::zeros((d.total(), h.dim()));
    let mut row = 0;
    for (i, &di) in d.as_slice().iter().enumerate() {
        for _ in 0..di {
            y.row_mut(row).assign(&hv.row(i));
            row += 1;
        }
    }
    Ok(ExpandedSequence::new(y))
}

/// Binary alignment: `s[i, j] = 1` iff frame `j` (1-based) falls in token
/// `i`'s block `(sum_{k<i} d_k, sum_{k<=i} d_k]`. Frames past the total are
/// left empty; blocks past `frames` are cut off.
pub fn hard_attention(d: &DurationVector, frames: usize) -> AttentionMatrix {
    let mut s = Array2::zeros((d.len(), frames));
    let mut start = 0;
    for (i, &di) in d.as_slice().iter().enumerate() {
        for j in start..(start + di).min(frames) {
            s[[i, j]] = 1.0;
        }
        start += di;
    }
    AttentionMatrix::from_array_unchecked(s)
}
