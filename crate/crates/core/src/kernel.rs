//! Forward computation of the stochastic duration model.
//!
//! Every token `i` owns `M` Bernoulli parameters `p[i, m]`. Its duration is the
//! index of the first successful trial, or zero when all `M` trials fail. From
//! these per-token length distributions we build
//!
//! * the distribution of the running total duration of the first `i` tokens
//!   (a chain of discrete convolutions, truncated at `T` frames with an
//!   overflow bucket), and
//! * the soft attention matrix `s[i, j] = P(frame j belongs to token i)`,
//!
//! which yields a differentiable, monotonic replacement for the hard length
//! regulator: `E[y_j] = sum_i s[i, j] * h_i`.
//!
//! All routines are generic over [`Real`] so the same code runs in `f64` and in
//! double-double precision.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};

/// Clamp applied to every Bernoulli parameter so `log1p(-p)` stays finite.
pub const EPS: f64 = 1e-7;

/// Per-token Bernoulli parameters, `N x M`, clamped to `[EPS, 1 - EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationParams<S = f64> {
    p: Array2<S>,
}

impl<S: Real> DurationParams<S> {
    /// Validates shape and range, then clamps into `[EPS, 1 - EPS]`.
    pub fn new(p: Array2<S>) -> Result<Self> {
        let (n, m) = p.dim();
        if n == 0 || m == 0 {
            return Err(Error::invalid(format!(
                "duration parameters need at least one token and one trial, got {n}x{m}"
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("duration parameters"));
        }
        if p.iter().any(|&v| v < S::zero() || v > S::one()) {
            return Err(Error::invalid("duration parameters must lie in [0, 1]"));
        }
        Ok(Self::clamped(p))
    }

    /// Wraps a matrix without clamping or validation. Used when
    /// differentiating with respect to arbitrary perturbations of `p`.
    pub fn from_array_unchecked(p: Array2<S>) -> Self {
        Self { p }
    }

    pub(crate) fn clamped(mut p: Array2<S>) -> Self {
        let lo = S::of(EPS);
        let hi = S::one() - lo;
        p.mapv_inplace(|v| v.max(lo).min(hi));
        Self { p }
    }

    pub fn n_tokens(&self) -> usize {
        self.p.nrows()
    }

    pub fn max_duration(&self) -> usize {
        self.p.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, S> {
        self.p.view()
    }

    pub fn into_inner(self) -> Array2<S> {
        self.p
    }
}

/// `l[i, m] = P(w_i = m)` for `m = 0..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthProbability<S = f64> {
    l: Array2<S>,
}

impl<S: Real> LengthProbability<S> {
    /// Wraps a matrix after checking that every row is a distribution.
    pub fn try_from_array(l: Array2<S>) -> Result<Self> {
        check_distribution_rows(l.view(), "length probability")?;
        if l.ncols() < 2 {
            return Err(Error::invalid(
                "length probability needs at least two columns",
            ));
        }
        Ok(Self { l })
    }

    /// Wraps a matrix without validation. Used when differentiating with
    /// respect to arbitrary perturbations of `l`.
    pub fn from_array_unchecked(l: Array2<S>) -> Self {
        Self { l }
    }

    pub fn n_tokens(&self) -> usize {
        self.l.nrows()
    }

    pub fn max_duration(&self) -> usize {
        self.l.ncols() - 1
    }

    pub fn view(&self) -> ArrayView2<'_, S> {
        self.l.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, S> {
        self.l.row(i)
    }

    pub fn into_inner(self) -> Array2<S> {
        self.l
    }
}

/// Distribution of the running total duration, `N x (T + 2)`.
///
/// Column `j <= T` holds `P(w_1 + ... + w_i = j)`; the last column holds the
/// overflow mass `P(w_1 + ... + w_i > T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeDurationDistribution<S = f64> {
    q: Array2<S>,
}

impl<S: Real> CumulativeDurationDistribution<S> {
    pub fn try_from_array(q: Array2<S>) -> Result<Self> {
        if q.ncols() < 3 {
            return Err(Error::invalid(
                "cumulative distribution needs T >= 1 plus the overflow column",
            ));
        }
        check_distribution_rows(q.view(), "cumulative duration distribution")?;
        Ok(Self { q })
    }

    pub fn from_array_unchecked(q: Array2<S>) -> Self {
        Self { q }
    }

    pub fn n_tokens(&self) -> usize {
        self.q.nrows()
    }

    /// Target frame count `T`.
    pub fn frames(&self) -> usize {
        self.q.ncols() - 2
    }

    pub fn overflow(&self, i: usize) -> S {
        self.q[[i, self.q.ncols() - 1]]
    }

    pub fn view(&self) -> ArrayView2<'_, S> {
        self.q.view()
    }

    pub fn into_inner(self) -> Array2<S> {
        self.q
    }
}

/// Soft alignment, `N x T`; column `j` is output frame `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix<S = f64> {
    s: Array2<S>,
}

impl<S: Real> AttentionMatrix<S> {
    pub fn try_from_array(s: Array2<S>) -> Result<Self> {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention matrix"));
        }
        Ok(Self { s })
    }

    pub fn from_array_unchecked(s: Array2<S>) -> Self {
        Self { s }
    }

    pub fn n_tokens(&self) -> usize {
        self.s.nrows()
    }

    pub fn frames(&self) -> usize {
        self.s.ncols()
    }

    /// `sum_i s[i, j]` for each frame.
    pub fn coverage(&self) -> Array1<S> {
        self.s.sum_axis(Axis(0))
    }

    pub fn view(&self) -> ArrayView2<'_, S> {
        self.s.view()
    }

    pub fn into_inner(self) -> Array2<S> {
        self.s
    }
}

/// Token embeddings, `N x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence<S = f64> {
    h: Array2<S>,
}

impl<S: Real> HiddenSequence<S> {
    pub fn new(h: Array2<S>) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hidden sequence"));
        }
        Ok(Self { h })
    }

    pub fn n_tokens(&self) -> usize {
        self.h.nrows()
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, S> {
        self.h.view()
    }

    pub fn into_inner(self) -> Array2<S> {
        self.h
    }
}

/// Upsampled sequence, `T x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedSequence<S = f64> {
    y: Array2<S>,
}

impl<S: Real> ExpandedSequence<S> {
    pub fn new(y: Array2<S>) -> Self {
        Self { y }
    }

    pub fn frames(&self) -> usize {
        self.y.nrows()
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, S> {
        self.y.view()
    }

    pub fn into_inner(self) -> Array2<S> {
        self.y
    }
}

fn check_distribution_rows<S: Real>(m: ArrayView2<'_, S>, what: &'static str) -> Result<()> {
    if m.nrows() == 0 {
        return Err(Error::invalid(format!("{what} has no rows")));
    }
    let tol = S::of(1e-9);
    for (i, row) in m.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        if row.iter().any(|&v| v < -tol || v > S::one() + tol) {
            return Err(Error::invalid(format!(
                "{what}: row {i} has entries outside [0, 1]"
            )));
        }
        let total = row.iter().fold(S::zero(), |acc, &v| acc + v);
        if (total - S::one()).abs() > tol {
            return Err(Error::invalid(format!(
                "{what}: row {i} sums to {:?}, not 1",
                total.as_f64()
            )));
        }
    }
    Ok(())
}

/// Draws `noise_std * g` with `g` i.i.d. standard normal.
pub fn draw_noise<R: Rng + ?Sized>(
    shape: (usize, usize),
    noise_std: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise std must be finite and non-negative, got {noise_std}"
        )));
    }
    if noise_std == 0.0 {
        return Ok(Array2::zeros(shape));
    }
    Ok(Array2::from_shape_simple_fn(shape, || {
        let g: f64 = StandardNormal.sample(rng);
        noise_std * g
    }))
}

/// `p = clamp(sigmoid(logits + noise_std * g))`.
pub fn apply_noisy_sigmoid<R: Rng + ?Sized>(
    logits: ArrayView2<'_, f64>,
    noise_std: f64,
    rng: &mut R,
) -> Result<DurationParams> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let noise = draw_noise(logits.dim(), noise_std, rng)?;
    params_from_preactivation(&logits + &noise)
}

/// `p = clamp(sigmoid(pre))` without any noise.
pub fn params_from_preactivation<S: Real>(pre: Array2<S>) -> Result<DurationParams<S>> {
    if pre.nrows() == 0 || pre.ncols() == 0 {
        return Err(Error::invalid("logits must be at least 1x1"));
    }
    if pre.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(DurationParams::clamped(pre.mapv(sigmoid)))
}

/// Per-token length distribution:
/// `l[i, m] = p[i, m] * prod_{k < m} (1 - p[i, k])` and
/// `l[i, 0] = prod_{k <= M} (1 - p[i, k])`.
///
/// The survival products are accumulated as sums of `log1p(-p)`.
pub fn length_probability<S: Real>(params: &DurationParams<S>) -> LengthProbability<S> {
    let p = params.view();
    let (n, m) = p.dim();
    let mut l = Array2::zeros((n, m + 1));
    for i in 0..n {
        let mut log_survival = S::zero();
        for k in 0..m {
            let pk = p[[i, k]];
            l[[i, k + 1]] = pk * log_survival.exp();
            log_survival = log_survival + (-pk).ln_1p();
        }
        l[[i, 0]] = log_survival.exp();
    }
    LengthProbability { l }
}

/// Running-total distribution `q`, truncated at `frames` with an overflow cell.
///
/// Row `i` is the convolution of row `i - 1` with `l[i, :]`, starting from a
/// point mass at zero. Mass landing beyond `frames` is absorbed by the
/// overflow column and stays there.
pub fn cumulative_duration<S: Real>(
    l: &LengthProbability<S>,
    frames: usize,
) -> Result<CumulativeDurationDistribution<S>> {
    if frames < 1 {
        return Err(Error::invalid("target frame count T must be at least 1"));
    }
    let lv = l.view();
    let n = lv.nrows();
    let overflow = frames + 1;
    let mut q = Array2::zeros((n, frames + 2));
    let mut prev = vec![S::zero(); frames + 2];
    prev[0] = S::one();
    for i in 0..n {
        let li = lv.row(i);
        let mut row = vec![S::zero(); frames + 2];
        for (m, &pm) in prev.iter().enumerate().take(frames + 1) {
            for (k, &lk) in li.iter().enumerate() {
                let j = (m + k).min(overflow);
                row[j] = row[j] + pm * lk;
            }
        }
        let total = li.iter().fold(S::zero(), |acc, &v| acc + v);
        row[overflow] = row[overflow] + prev[overflow] * total;
        for (j, v) in row.iter().enumerate() {
            q[[i, j]] = *v;
        }
        prev = row;
    }
    Ok(CumulativeDurationDistribution { q })
}

/// Reverse cumulative sum of `l[i, 1..=M]`: `tail[r] = sum_{k >= r} l[i, k]`,
/// indexed so `tail[0]` is unused and `tail[r]` for `r in 1..=M`.
pub(crate) fn tail_sums<S: Real>(li: ArrayView1<'_, S>) -> Vec<S> {
    let m = li.len() - 1;
    let mut tail = vec![S::zero(); m + 2];
    for r in (1..=m).rev() {
        tail[r] = tail[r + 1] + li[r];
    }
    tail
}

/// Soft alignment
/// `s[i, j] = sum_{m < j} q[i - 1, m] * tail_i[j - m]`, with `q[0, :]` a point
/// mass at zero so the first row reduces to `tail_1[j]`.
pub fn attention_probability<S: Real>(
    l: &LengthProbability<S>,
    q: &CumulativeDurationDistribution<S>,
) -> Result<AttentionMatrix<S>> {
    if l.n_tokens() != q.n_tokens() {
        return Err(Error::shape(
            "token count of l and q",
            l.n_tokens(),
            q.n_tokens(),
        ));
    }
    let frames = q.frames();
    let n = l.n_tokens();
    let max_dur = l.max_duration();
    let qv = q.view();
    let mut s = Array2::zeros((n, frames));
    for i in 0..n {
        let tail = tail_sums(l.row(i));
        for j in 1..=frames {
            let lo = j.saturating_sub(max_dur);
            let mut acc = S::zero();
            for m in lo..j {
                let prev = if i == 0 {
                    if m == 0 {
                        S::one()
                    } else {
                        S::zero()
                    }
                } else {
                    qv[[i - 1, m]]
                };
                acc = acc + prev * tail[j - m];
            }
            s[[i, j - 1]] = acc;
        }
    }
    Ok(AttentionMatrix { s })
}

/// `E[w_i] = sum_m m * l[i, m]`.
pub fn expected_durations<S: Real>(l: &LengthProbability<S>) -> Array1<S> {
    l.view()
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(S::zero(), |acc, (m, &v)| acc + S::of(m as f64) * v)
        })
        .collect()
}

/// `y[j, :] = sum_i s[i, j] * h[i, :]`, i.e. `s^T h`.
pub fn expected_upsample<S: Real>(
    s: &AttentionMatrix<S>,
    h: &HiddenSequence<S>,
) -> Result<ExpandedSequence<S>> {
    if s.n_tokens() != h.n_tokens() {
        return Err(Error::shape(
            "token count of attention and hidden sequence",
            s.n_tokens(),
            h.n_tokens(),
        ));
    }
    let sv = s.view();
    let hv = h.view();
    let (n, frames) = sv.dim();
    let d = hv.ncols();
    let mut y = Array2::zeros((frames, d));
    for j in 0..frames {
        for i in 0..n {
            let w = sv[[i, j]];
            if w == S::zero() {
                continue;
            }
            for c in 0..d {
                y[[j, c]] = y[[j, c]] + w * hv[[i, c]];
            }
        }
    }
    Ok(ExpandedSequence { y })
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Alignment<S = f64> {
    /// Logits plus the noise draw, i.e. the sigmoid input.
    pub preactivation: Array2<S>,
    pub params: DurationParams<S>,
    pub length: LengthProbability<S>,
    pub cumulative: CumulativeDurationDistribution<S>,
    pub attention: AttentionMatrix<S>,
    pub expanded: ExpandedSequence<S>,
    pub expected: Array1<S>,
}

/// Full forward pass: noisy sigmoid, length probability, cumulative
/// distribution, attention, expected upsampling and expected durations.
pub fn align<R: Rng + ?Sized>(
    logits: ArrayView2<'_, f64>,
    h: &HiddenSequence,
    frames: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Alignment> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let noise = draw_noise(logits.dim(), noise_std, rng)?;
    align_preactivated(&logits + &noise, h, frames)
}

/// Forward pass from a sigmoid input that already includes any noise.
pub fn align_preactivated<S: Real>(
    preactivation: Array2<S>,
    h: &HiddenSequence<S>,
    frames: usize,
) -> Result<Alignment<S>> {
    if preactivation.nrows() != h.n_tokens() {
        return Err(Error::shape(
            "token count of logits and hidden sequence",
            preactivation.nrows(),
            h.n_tokens(),
        ));
    }
    let params = params_from_preactivation(preactivation.clone())?;
    let length = length_probability(&params);
    let cumulative = cumulative_duration(&length, frames)?;
    let attention = attention_probability(&length, &cumulative)?;
    let expanded = expected_upsample(&attention, h)?;
    let expected = expected_durations(&length);
    Ok(Alignment {
        preactivation,
        params,
        length,
        cumulative,
        attention,
        expanded,
        expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(p: Array2<f64>) -> DurationParams {
        DurationParams::new(p).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_logit_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = apply_noisy_sigmoid(array![[0.0]].view(), 0.0, &mut rng).unwrap();
        assert_eq!(p.view()[[0, 0]], 0.5);
    }

    #[test]
    fn saturated_logit_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = apply_noisy_sigmoid(array![[40.0, -40.0]].view(), 0.0, &mut rng).unwrap();
        assert_eq!(p.view()[[0, 0]], 1.0 - EPS);
        assert_eq!(p.view()[[0, 1]], EPS);
    }

    #[test]
    fn noisy_sigmoid_mean_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = Array2::zeros((1, 100_000));
        let p = apply_noisy_sigmoid(logits.view(), 1.0, &mut rng).unwrap();
        let mean = p.view().mean().unwrap();
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn non_finite_logit_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = apply_noisy_sigmoid(array![[f64::NAN]].view(), 0.0, &mut rng);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(apply_noisy_sigmoid(array![[0.0]].view(), -1.0, &mut rng).is_err());
    }

    #[test]
    fn certain_success_gives_unit_duration() {
        let l = length_probability(&params(array![[1.0 - EPS]]));
        assert_abs_diff_eq!(l.view()[[0, 0]], EPS, epsilon = 1e-15);
        assert_abs_diff_eq!(l.view()[[0, 1]], 1.0 - EPS, epsilon = 1e-15);
    }

    #[test]
    fn fair_coins_length_probability() {
        let l = length_probability(&params(array![[0.5, 0.5]]));
        assert_abs_diff_eq!(l.view(), array![[0.25, 0.5, 0.25]].view(), epsilon = 1e-15);
    }

    #[test]
    fn params_reject_out_of_range() {
        assert!(DurationParams::new(array![[1.5]]).is_err());
        assert!(DurationParams::new(Array2::<f64>::zeros((0, 3))).is_err());
        assert!(DurationParams::new(array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn two_unit_tokens_sum_to_two() {
        let l = length_probability(&params(array![[1.0 - EPS], [1.0 - EPS]]));
        let q = cumulative_duration(&l, 3).unwrap();
        assert_eq!(q.frames(), 3);
        assert_abs_diff_eq!(q.view()[[1, 2]], 1.0, epsilon = 1e-6);
        for j in [0, 1, 3] {
            assert_abs_diff_eq!(q.view()[[1, j]], 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn fair_coin_pair_total_of_two() {
        let l = length_probability(&params(array![[0.5, 0.5], [0.5, 0.5]]));
        let q = cumulative_duration(&l, 4).unwrap();
        assert_abs_diff_eq!(q.view()[[1, 2]], 0.375, epsilon = 1e-15);
    }

    #[test]
    fn overflow_keeps_rows_normalized() {
        let l = length_probability(&params(array![[0.2, 0.1, 0.3], [0.4, 0.2, 0.3]]));
        let q = cumulative_duration(&l, 2).unwrap();
        for row in q.view().outer_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        assert!(q.overflow(1) > 0.0);
        assert!(cumulative_duration(&l, 0).is_err());
    }

    #[test]
    fn identity_alignment() {
        let l = length_probability(&params(array![[1.0 - EPS], [1.0 - EPS]]));
        let q = cumulative_duration(&l, 2).unwrap();
        let s = attention_probability(&l, &q).unwrap();
        assert_abs_diff_eq!(
            s.view(),
            array![[1.0, 0.0], [0.0, 1.0]].view(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn single_token_attention_is_tail_mass() {
        let l = length_probability(&params(array![[0.5, 0.5]]));
        let q = cumulative_duration(&l, 2).unwrap();
        let s = attention_probability(&l, &q).unwrap();
        assert_abs_diff_eq!(s.view(), array![[0.75, 0.25]].view(), epsilon = 1e-15);
    }

    #[test]
    fn attention_rejects_mismatched_inputs() {
        let l1 = length_probability(&params(array![[0.5, 0.5]]));
        let l2 = length_probability(&params(array![[0.5, 0.5], [0.3, 0.2]]));
        let q = cumulative_duration(&l2, 3).unwrap();
        assert!(matches!(
            attention_probability(&l1, &q),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn expected_duration_cases() {
        let e = expected_durations(&length_probability(&params(array![[1.0 - EPS]])));
        assert_abs_diff_eq!(e[0], 1.0, epsilon = 1e-6);
        let e = expected_durations(&length_probability(&params(array![[0.5, 0.5]])));
        assert_abs_diff_eq!(e[0], 1.0, epsilon = 1e-15);
        let e = expected_durations(&length_probability(&params(array![[EPS, EPS, EPS]])));
        assert_abs_diff_eq!(e[0], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn upsample_cases() {
        let h = HiddenSequence::new(array![[1.0, -2.0], [3.0, 0.5]]).unwrap();
        let eye = AttentionMatrix::try_from_array(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(expected_upsample(&eye, &h).unwrap().view(), h.view());

        let s = AttentionMatrix::try_from_array(array![[0.75, 0.25]]).unwrap();
        let h = HiddenSequence::new(array![[2.0]]).unwrap();
        assert_eq!(
            expected_upsample(&s, &h).unwrap().view(),
            array![[1.5], [0.5]].view()
        );

        let s = AttentionMatrix::try_from_array(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let h = HiddenSequence::new(array![[1.0, 1.0], [2.0, 2.0]]).unwrap();
        let y = expected_upsample(&s, &h).unwrap();
        assert_eq!(y.view().row(1).to_vec(), vec![0.0, 0.0]);

        let bad = HiddenSequence::new(array![[1.0]]).unwrap();
        assert!(expected_upsample(&s, &bad).is_err());
    }

    #[test]
    fn align_identity_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = array![[40.0], [40.0]];
        let h = HiddenSequence::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let a = align(logits.view(), &h, 2, 0.0, &mut rng).unwrap();
        assert_abs_diff_eq!(a.expanded.view(), h.view(), epsilon = 1e-6);
        assert_abs_diff_eq!(a.expected[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn align_fair_coin_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = HiddenSequence::new(array![[2.0]]).unwrap();
        let a = align(array![[0.0, 0.0]].view(), &h, 2, 0.0, &mut rng).unwrap();
        assert_abs_diff_eq!(
            a.attention.view(),
            array![[0.75, 0.25]].view(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            a.expanded.view(),
            array![[1.5], [0.5]].view(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(a.expected[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn align_rejects_token_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = HiddenSequence::new(array![[2.0], [1.0]]).unwrap();
        assert!(align(array![[0.0, 0.0]].view(), &h, 2, 0.0, &mut rng).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (LengthProbability, usize)> {
            (
                1usize..=8,
                1usize..=8,
                1usize..=16,
                prop::collection::vec(-8.0f64..8.0, 64),
            )
                .prop_map(|(n, m, t, z)| {
                    let pre = Array2::from_shape_vec((n, m), z[..n * m].to_vec()).unwrap();
                    (
                        length_probability(&params_from_preactivation(pre).unwrap()),
                        t,
                    )
                })
        }

        proptest! {
            #[test]
            fn length_and_cumulative_rows_are_distributions((l, t) in instance()) {
                for row in l.view().outer_iter() {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
                let q = cumulative_duration(&l, t).unwrap();
                for row in q.view().outer_iter() {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                }
            }

            #[test]
            fn coverage_is_tail_of_total_duration((l, t) in instance()) {
                let q = cumulative_duration(&l, t).unwrap();
                let s = attention_probability(&l, &q).unwrap();
                let last = q.view().row(q.n_tokens() - 1).to_owned();
                let coverage = s.coverage();
                for j in 1..=t {
                    let tail: f64 = last.iter().skip(j).sum();
                    prop_assert!((coverage[j - 1] - tail).abs() <= 1e-9);
                }
                for w in coverage.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
                prop_assert!(s.view().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
            }

            #[test]
            fn upsample_is_linear_in_hidden(
                (l, t) in instance(),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
                h in prop::collection::vec(-2.0f64..2.0, 48),
            ) {
                let n = l.n_tokens();
                let q = cumulative_duration(&l, t).unwrap();
                let s = attention_probability(&l, &q).unwrap();
                let h1 = Array2::from_shape_vec((n, 3), h[..3 * n].to_vec()).unwrap();
                let h2 = Array2::from_shape_vec((n, 3), h[24..24 + 3 * n].to_vec()).unwrap();
                let mix = HiddenSequence::new(&h1 * a + &h2 * b).unwrap();
                let y1 = expected_upsample(&s, &HiddenSequence::new(h1).unwrap()).unwrap();
                let y2 = expected_upsample(&s, &HiddenSequence::new(h2).unwrap()).unwrap();
                let y = expected_upsample(&s, &mix).unwrap();
                let combo = &y1.view() * a + &y2.view() * b;
                for (u, v) in y.view().iter().zip(combo.iter()) {
                    prop_assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }
}
