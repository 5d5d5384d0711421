//! Toy alignment learning: fit per-token logits so the expected upsampling of
//! fixed embeddings reproduces a target sequence built with hidden ground-truth
//! durations.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward_align, GradientTape};
use crate::kernel::{align_preactivated, draw_noise, HiddenSequence, LengthProbability};
use crate::losses::{length_loss, length_loss_grad, LossWeights};
use crate::regulator::{discretize_durations, expand, DurationVector};

/// Embeddings, ground-truth durations and the target they expand to.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub hidden: HiddenSequence,
    pub durations: DurationVector,
    pub target: Array2<f64>,
    pub max_duration: usize,
}

impl SyntheticTask {
    /// `T = sum_i d*_i`.
    pub fn frames(&self) -> usize {
        self.durations.total()
    }

    pub fn n_tokens(&self) -> usize {
        self.durations.len()
    }

    /// Adds i.i.d. `Normal(0, std^2)` noise to the target.
    pub fn with_target_noise(mut self, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = draw_noise(self.target.dim(), std, &mut rng)?;
        self.target += &noise;
        Ok(self)
    }
}

/// Durations uniform in `[1, max_duration]`, embeddings standard normal.
pub fn make_task(
    n_tokens: usize,
    max_duration: usize,
    embed_dim: usize,
    seed: u64,
) -> Result<SyntheticTask> {
    if n_tokens == 0 || max_duration == 0 || embed_dim == 0 {
        return Err(Error::invalid(
            "task needs at least one token, one frame of duration and one embedding dimension",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let durations = DurationVector(
        (0..n_tokens)
            .map(|_| rng.random_range(1..=max_duration))
            .collect(),
    );
    let h = Array2::from_shape_simple_fn((n_tokens, embed_dim), || {
        let g: f64 = StandardNormal.sample(&mut rng);
        g
    });
    let hidden = HiddenSequence::new(h)?;
    let target = expand(&hidden, &durations)?.into_inner();
    Ok(SyntheticTask {
        hidden,
        durations,
        target,
        max_duration,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    /// Noise std at step 0.
    pub noise_std: f64,
    /// Fraction of the run over which the noise decays linearly to zero.
    pub noise_decay_fraction: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 2e-2,
            optimizer: Optimizer::Adam,
            beta1: 0.8,
            beta2: 0.99,
            noise_std: 1.0,
            noise_decay_fraction: 0.8,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_decay_fraction) {
            return Err(Error::invalid(format!(
                "noise_decay_fraction must lie in [0, 1], got {}",
                self.noise_decay_fraction
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        self.weights.validate()
    }

    /// Linear decay from `noise_std` to zero over the first
    /// `noise_decay_fraction * steps` steps.
    pub fn noise_at(&self, step: usize) -> f64 {
        let horizon = self.noise_decay_fraction * self.steps as f64;
        if horizon <= 0.0 {
            return 0.0;
        }
        self.noise_std * (1.0 - step as f64 / horizon).max(0.0)
    }
}

/// Duration error and sharpness of an alignment against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEvaluation {
    /// Mean `|round(E[w_i]) - d*_i|`.
    pub duration_mae: f64,
    /// Mean over tokens of `1 - max_m l[i, m]`.
    pub discreteness: f64,
    /// Fraction of tokens with `round(E[w_i]) == d*_i`.
    pub hard_match_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Noise-free objective before the first update.
    pub initial_loss: f64,
    /// Training objective at each step, with that step's noise.
    pub losses: Vec<f64>,
    /// Noise-free discreteness after each step.
    pub discreteness: Vec<f64>,
    pub final_loss: f64,
    pub expected_durations: Vec<f64>,
    pub target_durations: Vec<usize>,
    pub evaluation: AlignmentEvaluation,
    pub final_logits: Vec<Vec<f64>>,
    /// Set when a non-finite loss stopped training early.
    pub diverged: bool,
    pub wall_time_secs: f64,
}

/// Mean over tokens of `1 - max_m l[i, m]`.
pub fn discreteness(l: &LengthProbability) -> f64 {
    let lv = l.view();
    let total: f64 = lv
        .outer_iter()
        .map(|row| 1.0 - row.iter().copied().fold(0.0, f64::max))
        .sum();
    total / lv.nrows() as f64
}

/// Noise-free comparison of the alignment encoded by `logits` with the task's
/// ground-truth durations.
pub fn evaluate_alignment(
    logits: &Array2<f64>,
    task: &SyntheticTask,
) -> Result<AlignmentEvaluation> {
    let a = align_preactivated(logits.clone(), &task.hidden, task.frames().max(1))?;
    let rounded = discretize_durations(a.expected.as_slice().expect("contiguous"), logits.ncols())?;
    let n = task.n_tokens() as f64;
    let (abs_err, matches) = rounded
        .as_slice()
        .iter()
        .zip(task.durations.as_slice())
        .fold((0usize, 0usize), |(e, m), (&r, &t)| {
            (e + r.abs_diff(t), m + usize::from(r == t))
        });
    Ok(AlignmentEvaluation {
        duration_mae: abs_err as f64 / n,
        discreteness: discreteness(&a.length),
        hard_match_rate: matches as f64 / n,
    })
}

/// `lambda_length * length_loss + lambda_recon * ||y - y*||^2` and its
/// gradient with respect to the logits.
fn objective(
    preactivation: Array2<f64>,
    task: &SyntheticTask,
    weights: &LossWeights,
) -> Result<(f64, Array2<f64>, LengthProbability)> {
    let frames = task.frames();
    let tape = GradientTape::from_parts(
        align_preactivated(preactivation, &task.hidden, frames)?,
        task.hidden.clone(),
    )?;
    let a = tape.alignment();
    let diff = &a.expanded.view() - &task.target;
    let sq = diff.iter().map(|v| v * v).sum::<f64>();
    let expected = a.expected.as_slice().expect("contiguous");
    let loss = weights.lambda_length * length_loss(expected, frames)? + weights.lambda_recon * sq;
    let dy = diff.mapv(|v| weights.lambda_recon * 2.0 * v);
    let de = Array1::from(length_loss_grad(expected, frames)?) * weights.lambda_length;
    let g = backward_align(&tape, dy.view(), de.view())?;
    Ok((loss, g.logits, a.length.clone()))
}

/// Hazard `p[m] = 1 / (M - m + 1)`, which makes every duration in `1..=M`
/// equally likely and keeps later trials reachable so they receive gradient.
fn initial_logits(task: &SyntheticTask) -> Array2<f64> {
    let m = task.max_duration;
    Array2::from_shape_fn((task.n_tokens(), m), |(_, k)| {
        let p = (1.0 / (m - k) as f64).clamp(0.01, 0.99);
        (p / (1.0 - p)).ln()
    })
}

/// Fits logits to `task` by first-order descent on the noisy objective.
pub fn train(task: &SyntheticTask, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if task.frames() == 0 {
        return Err(Error::invalid("task has no frames to align"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logits = initial_logits(task);
    let (initial_loss, _, _) = objective(logits.clone(), task, &config.weights)?;
    let mut m1 = Array2::<f64>::zeros(logits.dim());
    let mut m2 = Array2::<f64>::zeros(logits.dim());
    let mut losses = Vec::with_capacity(config.steps);
    let mut sharpness = Vec::with_capacity(config.steps);
    let mut diverged = false;

    for step in 0..config.steps {
        let noise = draw_noise(logits.dim(), config.noise_at(step), &mut rng)?;
        let (loss, grad, _) = objective(&logits + &noise, task, &config.weights)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        losses.push(loss);
        match config.optimizer {
            Optimizer::Sgd => logits.scaled_add(-config.learning_rate, &grad),
            Optimizer::Adam => {
                let t = (step + 1) as i32;
                m1.zip_mut_with(&grad, |m, &g| {
                    *m = config.beta1 * *m + (1.0 - config.beta1) * g
                });
                m2.zip_mut_with(&grad, |v, &g| {
                    *v = config.beta2 * *v + (1.0 - config.beta2) * g * g
                });
                let c1 = 1.0 - config.beta1.powi(t);
                let c2 = 1.0 - config.beta2.powi(t);
                ndarray::Zip::from(&mut logits)
                    .and(&m1)
                    .and(&m2)
                    .for_each(|z, &m, &v| {
                        *z -= config.learning_rate * (m / c1) / ((v / c2).sqrt() + 1e-8);
                    });
            }
        }
        if logits.iter().any(|z| !z.is_finite()) {
            diverged = true;
            break;
        }
        let (_, _, l) = objective(logits.clone(), task, &config.weights)?;
        sharpness.push(discreteness(&l));
    }

    let (final_loss, _, l) = objective(logits.clone(), task, &config.weights)?;
    let expected = crate::kernel::expected_durations(&l).to_vec();
    Ok(TrainReport {
        initial_loss,
        losses,
        discreteness: sharpness,
        final_loss,
        expected_durations: expected,
        target_durations: task.durations.0.clone(),
        evaluation: evaluate_alignment(&logits, task)?,
        final_logits: logits.outer_iter().map(|r| r.to_vec()).collect(),
        diverged,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
