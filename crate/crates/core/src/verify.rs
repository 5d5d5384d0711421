//! Randomized verification: kernel versus enumeration oracle, and analytic
//! gradients versus double-double central differences.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grad::{
    backward_align, backward_attention, backward_cumulative, backward_length_probability,
    backward_upsample, contract, contract1, finite_difference_check, flatten, reshape,
    GradCheckReport, GradientTape,
};
use crate::kernel::{
    align_preactivated, attention_probability, cumulative_duration, expected_durations,
    expected_upsample, length_probability, params_from_preactivation, AttentionMatrix,
    CumulativeDurationDistribution, DurationParams, HiddenSequence, LengthProbability,
};
use crate::losses::{length_loss, length_loss_grad};
use crate::oracle::{oracle_length, oracle_values};
use crate::real::{DoubleDouble, Real};

/// Size bounds for random instances; each dimension is drawn uniformly from
/// `1..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceLimits {
    pub max_tokens: usize,
    pub max_duration: usize,
    pub max_frames: usize,
    pub max_dim: usize,
}

impl InstanceLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0
            || self.max_duration == 0
            || self.max_frames == 0
            || self.max_dim == 0
        {
            return Err(Error::invalid("instance limits must all be at least 1"));
        }
        Ok(())
    }
}

/// One random problem: logits, a fixed noise draw, hidden states and `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub logits: Array2<f64>,
    pub noise: Array2<f64>,
    pub hidden: Array2<f64>,
    pub frames: usize,
}

impl Instance {
    pub fn preactivation(&self) -> Array2<f64> {
        &self.logits + &self.noise
    }

    pub fn params(&self) -> Result<DurationParams> {
        params_from_preactivation(self.preactivation())
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let g: f64 = StandardNormal.sample(rng);
        std * g
    })
}

/// Draws logits from `Normal(0, logit_std^2)`, hidden states from a standard
/// normal and, when `noise_std > 0`, a constant noise draw.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    limits: &InstanceLimits,
    logit_std: f64,
    noise_std: f64,
) -> Result<Instance> {
    limits.validate()?;
    let n = rng.random_range(1..=limits.max_tokens);
    let m = rng.random_range(1..=limits.max_duration);
    let frames = rng.random_range(1..=limits.max_frames);
    let d = rng.random_range(1..=limits.max_dim);
    let logits = normal(rng, (n, m), logit_std);
    let noise = if noise_std > 0.0 {
        normal(rng, (n, m), noise_std)
    } else {
        Array2::zeros((n, m))
    };
    let hidden = normal(rng, (n, d), 1.0);
    Ok(Instance {
        logits,
        noise,
        hidden,
        frames,
    })
}

/// Largest entrywise deviations between the kernel and the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleComparison {
    pub length: f64,
    pub cumulative: f64,
    pub attention: f64,
    pub expected: f64,
    /// `max_j |sum_i s[i, j] - P(sum w >= j)|`.
    pub coverage: f64,
    /// `max_i |sum_j l[i, j] - 1|` and the same for `q`.
    pub normalization: f64,
}

impl OracleComparison {
    pub fn max_error(&self) -> f64 {
        [
            self.length,
            self.cumulative,
            self.attention,
            self.expected,
            self.coverage,
            self.normalization,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn max_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn max_row_error(m: &Array2<f64>) -> f64 {
    m.rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Runs the kernel and the oracle on the same parameters. With `inject_fault`
/// the kernel's attention matrix is perturbed by `1e-6` before comparison, so
/// a correct harness must report a failure.
pub fn compare_with_oracle(
    params: &DurationParams,
    frames: usize,
    inject_fault: bool,
) -> Result<OracleComparison> {
    let l = length_probability(params);
    let q = cumulative_duration(&l, frames)?;
    let mut s = attention_probability(&l, &q)?.into_inner();
    if inject_fault {
        s[[0, 0]] += 1e-6;
    }
    let e = expected_durations(&l);

    let l_ref = oracle_length(params)?;
    let reference = oracle_values(&l_ref, frames)?;
    let column_sums = s.sum_axis(ndarray::Axis(0));
    let l_arr = l.into_inner();
    let q_arr = q.into_inner();
    Ok(OracleComparison {
        length: max_diff(&l_arr, l_ref.view()),
        cumulative: max_diff(&q_arr, &reference.q),
        attention: max_diff(&s, &reference.s),
        expected: max_diff(&e, &reference.expected),
        coverage: max_diff(&column_sums, &reference.coverage),
        normalization: max_row_error(&l_arr)
            .max(max_row_error(&q_arr))
            .max((reference.mass - 1.0).abs()),
    })
}

/// Gradient check of one stage of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: &'static str,
    pub report: GradCheckReport,
}

/// Stage names in the order [`check_gradients`] reports them.
pub const GRADIENT_STAGES: [&str; 6] = [
    "length_probability",
    "cumulative",
    "attention",
    "expected_upsample",
    "length_loss",
    "end_to_end",
];

/// Checks every backward stage of `instance` against central differences
/// evaluated in double-double precision. Each stage contracts its output with
/// a random cotangent drawn from `rng` to obtain a scalar.
pub fn check_gradients<R: Rng + ?Sized>(
    instance: &Instance,
    eps: f64,
    tolerance: f64,
    rng: &mut R,
) -> Result<Vec<StageReport>> {
    let (n, m) = instance.logits.dim();
    let t = instance.frames;
    let d = instance.hidden.ncols();
    let hidden = HiddenSequence::new(instance.hidden.clone())?;
    let params = instance.params()?;
    let l = length_probability(&params);
    let q = cumulative_duration(&l, t)?;
    let s = attention_probability(&l, &q)?;
    let mut out = Vec::with_capacity(GRADIENT_STAGES.len());
    let mut push = |stage, report| out.push(StageReport { stage, report });

    let c = normal(rng, (n, m + 1), 1.0);
    let dp = backward_length_probability(&params, &l, c.view())?;
    push(
        GRADIENT_STAGES[0],
        finite_difference_check(
            |x: &[DoubleDouble]| {
                let p = DurationParams::from_array_unchecked(reshape(x, n, m));
                contract(c.view(), length_probability(&p).view())
            },
            &flatten(params.view()),
            &flatten(dp.view()),
            eps,
            tolerance,
        )?,
    );

    let c = normal(rng, (n, t + 2), 1.0);
    let dl = backward_cumulative(&l, &q, c.view())?;
    push(
        GRADIENT_STAGES[1],
        finite_difference_check(
            |x: &[DoubleDouble]| {
                let l = LengthProbability::from_array_unchecked(reshape(x, n, m + 1));
                let q = cumulative_duration(&l, t).expect("frames validated");
                contract(c.view(), q.view())
            },
            &flatten(l.view()),
            &flatten(dl.view()),
            eps,
            tolerance,
        )?,
    );

    let c = normal(rng, (n, t), 1.0);
    let (dl, dq) = backward_attention(&l, &q, &s, c.view())?;
    let split = n * (m + 1);
    let mut x0 = flatten(l.view());
    x0.extend(flatten(q.view()));
    let mut analytic = flatten(dl.view());
    analytic.extend(flatten(dq.view()));
    push(
        GRADIENT_STAGES[2],
        finite_difference_check(
            |x: &[DoubleDouble]| {
                let l = LengthProbability::from_array_unchecked(reshape(&x[..split], n, m + 1));
                let q = CumulativeDurationDistribution::from_array_unchecked(reshape(
                    &x[split..],
                    n,
                    t + 2,
                ));
                contract(
                    c.view(),
                    attention_probability(&l, &q).expect("shapes agree").view(),
                )
            },
            &x0,
            &analytic,
            eps,
            tolerance,
        )?,
    );

    let c = normal(rng, (t, d), 1.0);
    let (ds, dh) = backward_upsample(&s, &hidden, c.view())?;
    let split = n * t;
    let mut x0 = flatten(s.view());
    x0.extend(flatten(hidden.view()));
    let mut analytic = flatten(ds.view());
    analytic.extend(flatten(dh.view()));
    push(
        GRADIENT_STAGES[3],
        finite_difference_check(
            |x: &[DoubleDouble]| {
                let s = AttentionMatrix::from_array_unchecked(reshape(&x[..split], n, t));
                let h = HiddenSequence::new(reshape(&x[split..], n, d)).expect("finite");
                contract(
                    c.view(),
                    expected_upsample(&s, &h).expect("shapes agree").view(),
                )
            },
            &x0,
            &analytic,
            eps,
            tolerance,
        )?,
    );

    let noise = instance.noise.mapv(DoubleDouble::of);
    let tape = GradientTape::from_parts(
        align_preactivated(instance.preactivation(), &hidden, t)?,
        hidden.clone(),
    )?;
    let expected = tape.alignment().expected.to_vec();
    let dloss = Array1::from(length_loss_grad(&expected, t)?);
    let g = backward_align(&tape, Array2::zeros((t, d)).view(), dloss.view())?;
    push(
        GRADIENT_STAGES[4],
        finite_difference_check(
            |x: &[DoubleDouble]| {
                let pre = reshape(x, n, m) + &noise;
                let p = params_from_preactivation(pre).expect("finite logits");
                let e = expected_durations(&length_probability(&p));
                length_loss(e.as_slice().expect("contiguous"), t).expect("non-empty")
            },
            &flatten(instance.logits.view()),
            &flatten(g.logits.view()),
            eps,
            tolerance,
        )?,
    );

    let dy = normal(rng, (t, d), 1.0);
    let de = Array1::from_shape_simple_fn(n, || {
        let g: f64 = StandardNormal.sample(rng);
        g
    });
    let lambda = 1.0;
    let d_expected = &de + &(dloss.mapv(|v| lambda * v));
    let g = backward_align(&tape, dy.view(), d_expected.view())?;
    let split = n * m;
    let mut x0 = flatten(instance.logits.view());
    x0.extend(flatten(instance.hidden.view()));
    let mut analytic = flatten(g.logits.view());
    analytic.extend(flatten(g.hidden.view()));
    push(
        GRADIENT_STAGES[5],
        finite_difference_check(
            |x: &[DoubleDouble]| {
                let pre = reshape(&x[..split], n, m) + &noise;
                let h = HiddenSequence::new(reshape(&x[split..], n, d)).expect("finite");
                let a = align_preactivated(pre, &h, t).expect("valid instance");
                let e = a.expected.as_slice().expect("contiguous");
                contract(dy.view(), a.expanded.view())
                    + contract1(de.view(), &a.expected)
                    + DoubleDouble::of(lambda) * length_loss(e, t).expect("non-empty")
            },
            &x0,
            &analytic,
            eps,
            tolerance,
        )?,
    );
    Ok(out)
}

/// Worst relative error over a set of stage reports, with its stage.
pub fn worst_stage(reports: &[StageReport]) -> Option<&StageReport> {
    reports
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LIMITS: InstanceLimits = InstanceLimits {
        max_tokens: 4,
        max_duration: 5,
        max_frames: 10,
        max_dim: 3,
    };

    #[test]
    fn random_instances_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, &LIMITS, 2.0, 0.0).unwrap();
            let (n, m) = inst.logits.dim();
            assert!((1..=4).contains(&n) && (1..=5).contains(&m));
            assert!((1..=10).contains(&inst.frames));
            assert_eq!(inst.hidden.nrows(), n);
            assert!(inst.noise.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn oracle_agrees_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, &LIMITS, 2.0, 1.0).unwrap();
            let cmp = compare_with_oracle(&inst.params().unwrap(), inst.frames, false).unwrap();
            assert!(cmp.max_error() <= 1e-9, "{cmp:?}");
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = random_instance(&mut rng, &LIMITS, 2.0, 0.0).unwrap();
        let cmp = compare_with_oracle(&inst.params().unwrap(), inst.frames, true).unwrap();
        assert!(cmp.attention > 1e-9);
    }

    #[test]
    fn gradients_pass_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..10 {
            let noise = if k % 2 == 0 { 1.0 } else { 0.0 };
            let inst = random_instance(&mut rng, &LIMITS, 2.0, noise).unwrap();
            let reports = check_gradients(&inst, 1e-5, 1e-5, &mut rng).unwrap();
            assert_eq!(reports.len(), GRADIENT_STAGES.len());
            for r in &reports {
                assert!(
                    r.report.passed,
                    "instance {k} stage {}: {:?}",
                    r.stage, r.report
                );
            }
        }
    }
}
