//! Hand-written reverse-mode gradients for the duration kernel.
//!
//! The computation graph is fixed: `logits -> p -> l -> (q, E[w]) -> s -> y`.
//! Each stage has an explicit backward function taking the stored forward
//! values and an upstream cotangent; [`backward_align`] chains them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::{
    align, tail_sums, Alignment, AttentionMatrix, CumulativeDurationDistribution, DurationParams,
    HiddenSequence, LengthProbability, EPS,
};
use crate::real::{sigmoid, Real};

fn expect_shape(
    what: &'static str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(
            what,
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", actual.0, actual.1),
        ));
    }
    Ok(())
}

/// Gradient of the length probability with respect to the Bernoulli
/// parameters.
///
/// With `l[m] = p[m] prod_{k<m} (1 - p[k])` and `l[0] = prod_k (1 - p[k])`:
///
/// * `dl[m]/dp[m] = l[m] / p[m]`
/// * `dl[m]/dp[k] = -l[m] / (1 - p[k])` for `k < m`, and likewise for `l[0]`.
///
/// Parameters sitting on the clamp boundary are differentiated at the clamped
/// value.
pub fn backward_length_probability(
    params: &DurationParams,
    l: &LengthProbability,
    dl: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let p = params.view();
    let lv = l.view();
    let (n, m) = p.dim();
    expect_shape("length probability", (n, m + 1), lv.dim())?;
    expect_shape("length probability cotangent", lv.dim(), dl.dim())?;
    let mut dp = Array2::zeros((n, m));
    for i in 0..n {
        // suffix[k] = dl[0] l[0] + sum_{t > k} dl[t] l[t]
        let mut suffix = dl[[i, 0]] * lv[[i, 0]];
        for k in (1..=m).rev() {
            let pk = p[[i, k - 1]];
            dp[[i, k - 1]] = dl[[i, k]] * lv[[i, k]] / pk - suffix / (1.0 - pk);
            suffix += dl[[i, k]] * lv[[i, k]];
        }
    }
    Ok(dp)
}

/// Gradient of the running-total distribution with respect to `l`.
///
/// Walks the convolution chain backwards: the cotangent of row `i` feeds both
/// `l[i, :]` (correlation with row `i - 1` of `q`) and row `i - 1` itself
/// (correlation with `l[i, :]`), including the absorbing overflow cell.
pub fn backward_cumulative(
    l: &LengthProbability,
    q: &CumulativeDurationDistribution,
    dq: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let lv = l.view();
    let qv = q.view();
    let n = lv.nrows();
    let width = lv.ncols();
    let frames = q.frames();
    let overflow = frames + 1;
    expect_shape("cumulative distribution", (n, frames + 2), qv.dim())?;
    expect_shape("cumulative distribution cotangent", qv.dim(), dq.dim())?;

    let mut dl = Array2::zeros((n, width));
    let mut g: Vec<f64> = dq.row(n - 1).to_vec();
    let mut delta = vec![0.0; frames + 2];
    delta[0] = 1.0;
    for i in (0..n).rev() {
        let li = lv.row(i);
        let prev: Vec<f64> = if i == 0 {
            delta.clone()
        } else {
            qv.row(i - 1).to_vec()
        };
        for k in 0..width {
            let mut acc = g[overflow] * prev[overflow];
            for (m, &pm) in prev.iter().enumerate().take(frames + 1) {
                acc += g[(m + k).min(overflow)] * pm;
            }
            dl[[i, k]] = acc;
        }
        if i > 0 {
            let total: f64 = li.sum();
            let mut next: Vec<f64> = dq.row(i - 1).to_vec();
            for (m, slot) in next.iter_mut().enumerate().take(frames + 1) {
                let mut acc = 0.0;
                for (k, &lk) in li.iter().enumerate() {
                    acc += g[(m + k).min(overflow)] * lk;
                }
                *slot += acc;
            }
            next[overflow] += g[overflow] * total;
            g = next;
        }
    }
    Ok(dl)
}

/// Gradient of the attention matrix with respect to `l` and `q`.
///
/// Returns `(dL/dl, dL/dq)`; the last row of `dL/dq` and its overflow column
/// are always zero because the attention never reads them.
pub fn backward_attention(
    l: &LengthProbability,
    q: &CumulativeDurationDistribution,
    s: &AttentionMatrix,
    ds: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let lv = l.view();
    let qv = q.view();
    let (n, width) = lv.dim();
    let max_dur = width - 1;
    let frames = q.frames();
    expect_shape("cumulative distribution", (n, frames + 2), qv.dim())?;
    expect_shape("attention", (n, frames), s.view().dim())?;
    expect_shape("attention cotangent", (n, frames), ds.dim())?;

    let mut dl = Array2::zeros((n, width));
    let mut dq = Array2::zeros(qv.dim());
    for i in 0..n {
        let tail = tail_sums(l.row(i));
        let mut dtail = vec![0.0; max_dur + 2];
        for j in 1..=frames {
            let g = ds[[i, j - 1]];
            if g == 0.0 {
                continue;
            }
            for m in j.saturating_sub(max_dur)..j {
                let r = j - m;
                if i == 0 {
                    if m == 0 {
                        dtail[r] += g;
                    }
                } else {
                    dtail[r] += g * qv[[i - 1, m]];
                    dq[[i - 1, m]] += g * tail[r];
                }
            }
        }
        // tail[r] = sum_{k >= r} l[k], so dl[k] = sum_{r <= k} dtail[r].
        let mut run = 0.0;
        for k in 1..=max_dur {
            run += dtail[k];
            dl[[i, k]] = run;
        }
    }
    Ok((dl, dq))
}

/// Gradient of `y = s^T h`: returns `(dL/ds, dL/dh)`.
pub fn backward_upsample(
    s: &AttentionMatrix,
    h: &HiddenSequence,
    dy: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let sv = s.view();
    let hv = h.view();
    expect_shape("expanded cotangent", (sv.ncols(), hv.ncols()), dy.dim())?;
    if sv.nrows() != hv.nrows() {
        return Err(Error::shape(
            "token count of attention and hidden sequence",
            sv.nrows(),
            hv.nrows(),
        ));
    }
    let ds = hv.dot(&dy.t());
    let dh = sv.dot(&dy);
    Ok((ds, dh))
}

/// Gradient of `E[w_i] = sum_m m l[i, m]` with respect to `l`.
pub fn backward_expected_durations(
    l: &LengthProbability,
    d_expected: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    let (n, width) = l.view().dim();
    if d_expected.len() != n {
        return Err(Error::shape(
            "expected duration cotangent",
            n,
            d_expected.len(),
        ));
    }
    Ok(Array2::from_shape_fn((n, width), |(i, m)| {
        d_expected[i] * m as f64
    }))
}

/// Gradient through `p = clamp(sigmoid(z))`. Entries whose raw sigmoid falls
/// outside `(EPS, 1 - EPS)` receive zero.
pub fn backward_noisy_sigmoid(
    preactivation: ArrayView2<'_, f64>,
    dp: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    expect_shape("parameter cotangent", preactivation.dim(), dp.dim())?;
    let mut out = Array2::zeros(dp.dim());
    for ((idx, &z), &g) in preactivation.indexed_iter().zip(dp.iter()) {
        let raw: f64 = sigmoid(z);
        if raw > EPS && raw < 1.0 - EPS {
            out[idx] = g * raw * (1.0 - raw);
        }
    }
    Ok(out)
}

/// Forward values recorded for one backward pass.
///
/// The noise draw is part of the stored preactivation and is treated as a
/// constant.
#[derive(Debug, Clone)]
pub struct GradientTape {
    alignment: Alignment,
    hidden: HiddenSequence,
}

impl GradientTape {
    /// Runs [`align`] and keeps every intermediate.
    pub fn record<R: Rng + ?Sized>(
        logits: ArrayView2<'_, f64>,
        hidden: &HiddenSequence,
        frames: usize,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let alignment = align(logits, hidden, frames, noise_std, rng)?;
        Ok(Self {
            alignment,
            hidden: hidden.clone(),
        })
    }

    pub fn from_parts(alignment: Alignment, hidden: HiddenSequence) -> Result<Self> {
        if alignment.attention.n_tokens() != hidden.n_tokens()
            || alignment.expanded.dim() != hidden.dim()
        {
            return Err(Error::shape(
                "tape alignment vs hidden sequence",
                format!(
                    "{} tokens, width {}",
                    alignment.attention.n_tokens(),
                    alignment.expanded.dim()
                ),
                format!("{} tokens, width {}", hidden.n_tokens(), hidden.dim()),
            ));
        }
        Ok(Self { alignment, hidden })
    }

    pub fn alignment(&self) -> &Alignment {
        &self.alignment
    }

    pub fn hidden(&self) -> &HiddenSequence {
        &self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignGradients {
    pub logits: Array2<f64>,
    pub hidden: Array2<f64>,
}

/// Chains every backward stage from the upsampled output and the expected
/// durations down to the logits and the hidden sequence.
pub fn backward_align(
    tape: &GradientTape,
    dy: ArrayView2<'_, f64>,
    d_expected: ArrayView1<'_, f64>,
) -> Result<AlignGradients> {
    let a = &tape.alignment;
    let (ds, dh) = backward_upsample(&a.attention, &tape.hidden, dy)?;
    let (dl_att, dq) = backward_attention(&a.length, &a.cumulative, &a.attention, ds.view())?;
    let mut dl = backward_cumulative(&a.length, &a.cumulative, dq.view())?;
    dl += &dl_att;
    dl += &backward_expected_durations(&a.length, d_expected)?;
    let dp = backward_length_probability(&a.params, &a.length, dl.view())?;
    let logits = backward_noisy_sigmoid(a.preactivation.view(), dp.view())?;
    Ok(AlignGradients { logits, hidden: dh })
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    /// `|a - n| / max(|a|, |n|, 1e-8)`, maximised over coordinates.
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    pub eps: f64,
    pub tolerance: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)`.
///
/// `f` is evaluated in the scalar type `S`; the step is formed and the
/// difference taken in `S` as well, so a wider type removes the cancellation
/// error of plain `f64`.
pub fn numeric_gradient<S, F>(f: F, x0: &[f64], eps: f64) -> Result<Vec<f64>>
where
    S: Real,
    F: Fn(&[S]) -> S,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut x: Vec<S> = x0.iter().map(|&v| S::of(v)).collect();
    let step = S::of(eps);
    let mut out = Vec::with_capacity(x0.len());
    for k in 0..x0.len() {
        let orig = x[k];
        x[k] = orig + step;
        let plus = f(&x);
        x[k] = orig - step;
        let minus = f(&x);
        x[k] = orig;
        out.push(((plus - minus) / (step + step)).as_f64());
    }
    Ok(out)
}

/// Compares `analytic` with central differences of `f` around `x0`.
///
/// A non-finite forward value or gradient marks the report as failed rather
/// than erroring.
pub fn finite_difference_check<S, F>(
    f: F,
    x0: &[f64],
    analytic: &[f64],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    S: Real,
    F: Fn(&[S]) -> S,
{
    if analytic.len() != x0.len() {
        return Err(Error::shape(
            "analytic gradient length",
            x0.len(),
            analytic.len(),
        ));
    }
    let numeric = numeric_gradient(f, x0, eps)?;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let mut finite = true;
    for (k, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let (abs, rel) = if a.is_finite() && n.is_finite() {
            ((a - n).abs(), relative_error(a, n))
        } else {
            finite = false;
            (f64::INFINITY, f64::INFINITY)
        };
        max_abs = max_abs.max(abs);
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some(k);
        }
    }
    Ok(GradCheckReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        worst_index: worst,
        eps,
        tolerance,
        passed: finite && max_rel <= tolerance,
        analytic: analytic.to_vec(),
        numeric,
    })
}

pub(crate) fn flatten(a: ArrayView2<'_, f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

pub(crate) fn reshape<S: Real>(x: &[S], rows: usize, cols: usize) -> Array2<S> {
    Array2::from_shape_vec((rows, cols), x.to_vec()).expect("length matches shape")
}

/// `sum_k c_k x_k` evaluated in `S`.
pub(crate) fn contract<S: Real>(weights: ArrayView2<'_, f64>, values: ArrayView2<'_, S>) -> S {
    weights
        .iter()
        .zip(values.iter())
        .fold(S::zero(), |acc, (&w, &v)| acc + S::of(w) * v)
}

pub(crate) fn contract1<S: Real>(weights: ArrayView1<'_, f64>, values: &Array1<S>) -> S {
    weights
        .iter()
        .zip(values.iter())
        .fold(S::zero(), |acc, (&w, &v)| acc + S::of(w) * v)
}
