//! Brute-force reference values by exhaustive enumeration.
//!
//! Nothing here shares code with the forward kernel: the length distribution
//! comes from enumerating raw Bernoulli trial sequences, and `q`, `s` and the
//! expectations come from summing over every joint duration assignment.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::kernel::{DurationParams, LengthProbability};

/// Largest number of outcomes any enumeration will visit.
pub const MAX_OUTCOMES: u128 = 10_000_000;

/// One joint duration assignment and its probability `prod_i l[i, d_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub durations: Vec<usize>,
    pub probability: f64,
}

fn guard(base: u128, exponent: usize) -> Result<u128> {
    let mut total: u128 = 1;
    for _ in 0..exponent {
        total = total.saturating_mul(base);
        if total > MAX_OUTCOMES {
            return Err(Error::TooLarge {
                outcomes: total,
                bound: MAX_OUTCOMES,
            });
        }
    }
    Ok(total)
}

/// Iterator over all `(M + 1)^N` joint outcomes in lexicographic order.
#[derive(Debug, Clone)]
pub struct Outcomes<'a> {
    l: &'a LengthProbability,
    next: Option<Vec<usize>>,
    remaining: u128,
}

impl Iterator for Outcomes<'_> {
    type Item = JointOutcome;

    fn next(&mut self) -> Option<JointOutcome> {
        let current = self.next.take()?;
        let lv = self.l.view();
        let probability = current
            .iter()
            .enumerate()
            .map(|(i, &d)| lv[[i, d]])
            .product();
        let top = self.l.max_duration();
        let mut succ = current.clone();
        let mut pos = succ.len();
        let advanced = loop {
            if pos == 0 {
                break false;
            }
            pos -= 1;
            if succ[pos] < top {
                succ[pos] += 1;
                break true;
            }
            succ[pos] = 0;
        };
        if advanced {
            self.next = Some(succ);
        }
        self.remaining -= 1;
        Some(JointOutcome {
            durations: current,
            probability,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (n, Some(n))
    }
}

/// Every joint assignment exactly once; refuses instances above
/// [`MAX_OUTCOMES`].
pub fn enumerate(l: &LengthProbability) -> Result<Outcomes<'_>> {
    let n = l.n_tokens();
    if n == 0 {
        return Err(Error::invalid("enumeration needs at least one token"));
    }
    let remaining = guard(l.max_duration() as u128 + 1, n)?;
    Ok(Outcomes {
        l,
        next: Some(vec![0; n]),
        remaining,
    })
}

/// Length distribution by summing over all `2^M` trial sequences per token:
/// the duration of a sequence is the position of its first success.
pub fn oracle_length(params: &DurationParams) -> Result<LengthProbability> {
    let p = params.view();
    let (n, m) = p.dim();
    let sequences = guard(2, m)? as u64;
    let mut l = Array2::zeros((n, m + 1));
    for i in 0..n {
        for bits in 0..sequences {
            let mut prob = 1.0;
            for k in 0..m {
                let pk = p[[i, k]];
                prob *= if bits >> k & 1 == 1 { pk } else { 1.0 - pk };
            }
            let duration = if bits == 0 {
                0
            } else {
                bits.trailing_zeros() as usize + 1
            };
            l[[i, duration]] += prob;
        }
    }
    Ok(LengthProbability::from_array_unchecked(l))
}

/// Reference values for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleValues {
    /// `N x (T + 2)`; the last column holds totals above `T`.
    pub q: Array2<f64>,
    /// `N x T`.
    pub s: Array2<f64>,
    pub expected: Array1<f64>,
    /// `P(sum_i w_i >= j)` for `j = 1..=T`.
    pub coverage: Array1<f64>,
    /// Total probability of all outcomes.
    pub mass: f64,
}

/// Computes `q`, `s`, `E[w]` and the coverage probabilities in one pass over
/// every joint outcome.
pub fn oracle_values(l: &LengthProbability, frames: usize) -> Result<OracleValues> {
    if frames < 1 {
        return Err(Error::invalid("target frame count T must be at least 1"));
    }
    let n = l.n_tokens();
    let mut q = Array2::zeros((n, frames + 2));
    let mut s = Array2::zeros((n, frames));
    let mut expected = Array1::zeros(n);
    let mut coverage = Array1::zeros(frames);
    let mut mass = 0.0;
    for outcome in enumerate(l)? {
        let prob = outcome.probability;
        mass += prob;
        let mut start = 0;
        for (i, &d) in outcome.durations.iter().enumerate() {
            expected[i] += prob * d as f64;
            let end = start + d;
            q[[i, end.min(frames + 1)]] += prob;
            // Frame j (1-based) belongs to token i iff start < j <= end.
            for j in (start + 1)..=end.min(frames) {
                s[[i, j - 1]] += prob;
            }
            start = end;
        }
        for j in 1..=start.min(frames) {
            coverage[j - 1] += prob;
        }
    }
    Ok(OracleValues {
        q,
        s,
        expected,
        coverage,
        mass,
    })
}

pub fn oracle_q(l: &LengthProbability, frames: usize) -> Result<Array2<f64>> {
    Ok(oracle_values(l, frames)?.q)
}

pub fn oracle_s(l: &LengthProbability, frames: usize) -> Result<Array2<f64>> {
    Ok(oracle_values(l, frames)?.s)
}

pub fn oracle_expected(l: &LengthProbability) -> Result<Array1<f64>> {
    let n = l.n_tokens();
    let mut expected = Array1::zeros(n);
    for outcome in enumerate(l)? {
        for (i, &d) in outcome.durations.iter().enumerate() {
            expected[i] += outcome.probability * d as f64;
        }
    }
    Ok(expected)
}
