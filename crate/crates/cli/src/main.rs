use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use duralign::io::{read_matrix, write_matrix, write_pgm};
use duralign::kernel::{align, align_preactivated, params_from_preactivation};
use duralign::oracle::enumerate;
use duralign::regulator::sample_durations;
use duralign::trainer::train;
use duralign::verify::{
    check_gradients, compare_with_oracle, random_instance, InstanceLimits, OracleComparison,
    StageReport,
};
use duralign::{ConfigFile, HiddenSequence, LengthProbability};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Differentiable stochastic duration alignment toolkit.
#[derive(Debug, Parser)]
#[command(name = "duralign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the forward pass and write every intermediate.
    Align(AlignArgs),
    /// Draw durations by sequential Bernoulli trials.
    Sample(SampleArgs),
    /// Compare the kernel with exhaustive enumeration on random instances.
    OracleCheck(OracleArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradArgs),
    /// Learn an alignment on a synthetic task.
    TrainToy(TrainArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Random seed; defaults to $DURALIGN_SEED, then 0.
    #[arg(long, env = "DURALIGN_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// N x M logits.
    #[arg(long)]
    logits: PathBuf,
    /// N x D hidden states.
    #[arg(long)]
    hidden: PathBuf,
    /// Target frame count T.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    frames: u64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// N x M logits; trials use `sigmoid(logits)` without noise.
    #[arg(long)]
    logits: PathBuf,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    n_samples: u64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct Parallelism {
    /// Worker threads; results are merged in instance order.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    n_instances: u64,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    #[arg(long, default_value_t = 5)]
    max_m: usize,
    #[arg(long, default_value_t = 12)]
    max_t: usize,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// Perturb the kernel output so the check must fail.
    #[arg(long)]
    inject_bug: bool,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    parallel: Parallelism,
}

#[derive(Debug, Args)]
struct GradArgs {
    #[arg(long, default_value_t = 100)]
    n_instances: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    #[arg(long, default_value_t = 5)]
    max_m: usize,
    #[arg(long, default_value_t = 10)]
    max_t: usize,
    #[arg(long, default_value_t = 3)]
    max_d: usize,
    #[arg(long, default_value_t = 2.0)]
    logit_std: f64,
    /// Std of the fixed noise added to each instance's logits.
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    parallel: Parallelism,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON config; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Whether a command's own checks passed; errors are reported separately.
enum Status {
    Passed,
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Align(a) => cmd_align(a),
        Command::Sample(a) => cmd_sample(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::TrainToy(a) => cmd_train_toy(a),
    };
    match result {
        Ok(Status::Passed) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> anyhow::Result<Array2<f64>> {
    read_matrix(path).with_context(|| format!("reading {}", path.display()))
}

fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn save(dir: &Path, name: &str, m: ndarray::ArrayView2<'_, f64>) -> anyhow::Result<()> {
    let path = out_file(dir, name);
    write_matrix(&path, m).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn instance_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn run_ordered<T, F>(jobs: u64, n: u64, f: F) -> anyhow::Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> anyhow::Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(usize::try_from(jobs).unwrap_or(usize::MAX))
        .build()?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

fn cmd_align(a: AlignArgs) -> anyhow::Result<Status> {
    let logits = read(&a.logits)?;
    let hidden = HiddenSequence::new(read(&a.hidden)?)?;
    let frames = usize::try_from(a.frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.seed);
    let al = align(logits.view(), &hidden, frames, a.noise_std, &mut rng)?;
    create_dir(&a.out_dir)?;
    save(&a.out_dir, "l.csv", al.length.view())?;
    save(&a.out_dir, "q.csv", al.cumulative.view())?;
    save(&a.out_dir, "s.csv", al.attention.view())?;
    save(&a.out_dir, "expanded.csv", al.expanded.view())?;
    save(
        &a.out_dir,
        "expected_durations.csv",
        al.expected.view().insert_axis(Axis(1)),
    )?;
    write_pgm(&out_file(&a.out_dir, "s.pgm"), al.attention.view())?;
    println!(
        "aligned {} tokens to {frames} frames; expected durations {:?}",
        hidden.n_tokens(),
        al.expected.to_vec()
    );
    Ok(Status::Passed)
}

fn cmd_sample(a: SampleArgs) -> anyhow::Result<Status> {
    let logits = read(&a.logits)?;
    let params = params_from_preactivation(logits)?;
    let (n, m) = (params.n_tokens(), params.max_duration());
    let k = usize::try_from(a.n_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.seed);
    let mut draws = Array2::zeros((k, n));
    let mut hist = Array2::<f64>::zeros((n, m + 1));
    for mut row in draws.outer_iter_mut() {
        for (i, &d) in sample_durations(&params, &mut rng)
            .as_slice()
            .iter()
            .enumerate()
        {
            row[i] = d as f64;
            hist[[i, d]] += 1.0;
        }
    }
    hist /= k as f64;
    create_dir(&a.out_dir)?;
    save(&a.out_dir, "durations.csv", draws.view())?;
    save(&a.out_dir, "histogram.csv", hist.view())?;
    let l = duralign::kernel::length_probability(&params);
    println!("token  duration  empirical  exact");
    for i in 0..n {
        for d in 0..=m {
            println!(
                "{i:>5}  {d:>8}  {:>9.4}  {:>5.4}",
                hist[[i, d]],
                l.view()[[i, d]]
            );
        }
    }
    Ok(Status::Passed)
}

fn limits(n: usize, m: usize, t: usize, d: usize) -> anyhow::Result<InstanceLimits> {
    let limits = InstanceLimits {
        max_tokens: n,
        max_duration: m,
        max_frames: t,
        max_dim: d,
    };
    limits.validate()?;
    Ok(limits)
}

fn cmd_oracle_check(a: OracleArgs) -> anyhow::Result<Status> {
    let lim = limits(a.max_n, a.max_m, a.max_t, 1)?;
    // Refuse before any work if the largest possible instance is too big.
    let largest = LengthProbability::from_array_unchecked(Array2::zeros((a.max_n, a.max_m + 1)));
    enumerate(&largest)?;
    let results: Vec<(usize, usize, OracleComparison)> =
        run_ordered(a.parallel.jobs, a.n_instances, |k| {
            let mut rng = instance_rng(a.seed.seed, k);
            let inst = random_instance(&mut rng, &lim, 2.0, 0.0)?;
            let cmp = compare_with_oracle(&inst.params()?, inst.frames, a.inject_bug)?;
            Ok((inst.logits.nrows(), inst.logits.ncols(), cmp))
        })?;
    let mut failures = 0;
    let mut worst = (0.0, 0);
    for (k, (n, m, cmp)) in results.iter().enumerate() {
        let err = cmp.max_error();
        if err > a.tolerance {
            failures += 1;
            println!("FAIL instance {k} (N={n}, M={m}): {cmp:?}");
        }
        if err >= worst.0 {
            worst = (err, k);
        }
    }
    println!(
        "{} instances, {failures} failed, max abs error {:.3e} (instance {}), tolerance {:.0e}",
        results.len(),
        worst.0,
        worst.1,
        a.tolerance
    );
    Ok(if failures == 0 {
        Status::Passed
    } else {
        Status::Failed
    })
}

fn cmd_gradcheck(a: GradArgs) -> anyhow::Result<Status> {
    let lim = limits(a.max_n, a.max_m, a.max_t, a.max_d)?;
    let results: Vec<Vec<StageReport>> = run_ordered(a.parallel.jobs, a.n_instances, |k| {
        let mut rng = instance_rng(a.seed.seed, k);
        let inst = random_instance(&mut rng, &lim, a.logit_std, a.noise_std)?;
        Ok(check_gradients(&inst, a.eps, a.tolerance, &mut rng)?)
    })?;
    let mut failures = 0;
    let mut worst: Option<(usize, &StageReport)> = None;
    for (k, reports) in results.iter().enumerate() {
        for r in reports {
            if !r.report.passed {
                failures += 1;
                println!(
                    "FAIL instance {k} stage {}: rel error {:.3e}",
                    r.stage, r.report.max_rel_error
                );
            }
            if worst.is_none_or(|(_, w)| r.report.max_rel_error > w.report.max_rel_error) {
                worst = Some((k, r));
            }
        }
    }
    println!(
        "{} instances, {failures} failing stages, eps {:e}, tolerance {:e}",
        results.len(),
        a.eps,
        a.tolerance
    );
    if let Some((k, w)) = worst {
        if let Some(i) = w.report.worst_index {
            println!(
                "worst: instance {k} stage {} coordinate {i}: analytic {:e} numeric {:e} rel error {:.3e}",
                w.stage, w.report.analytic[i], w.report.numeric[i], w.report.max_rel_error
            );
        }
    }
    Ok(if failures == 0 {
        Status::Passed
    } else {
        Status::Failed
    })
}

fn cmd_train_toy(a: TrainArgs) -> anyhow::Result<Status> {
    let config: ConfigFile = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ConfigFile::default(),
    };
    config.validate()?;
    let task = config.task()?;
    let report = train(&task, &config.train_config())?;
    let logits = Array2::from_shape_vec(
        (task.n_tokens(), task.max_duration),
        report.final_logits.concat(),
    )?;
    let al = align_preactivated(logits, &task.hidden, task.frames())?;

    create_dir(&a.out_dir)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out_file(&a.out_dir, "report.json"), json + "\n")?;
    let losses = Array2::from_shape_vec((report.losses.len(), 1), report.losses.clone())?;
    save(&a.out_dir, "losses.csv", losses.view())?;
    save(&a.out_dir, "s.csv", al.attention.view())?;
    write_pgm(&out_file(&a.out_dir, "s.pgm"), al.attention.view())?;

    let e = report.evaluation;
    println!(
        "{} steps: loss {:.4} -> {:.4}, duration MAE {:.3}, match rate {:.3}, discreteness {:.4}",
        report.losses.len(),
        report.initial_loss,
        report.final_loss,
        e.duration_mae,
        e.hard_match_rate,
        e.discreteness
    );
    if report.diverged {
        println!("training diverged");
        return Ok(Status::Failed);
    }
    Ok(Status::Passed)
}
