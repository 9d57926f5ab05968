//! `periodic`: curves, gradient checks, analysis reports, training runs and
//! tap histograms for the score functions in `periodic-core`.
//!
//! Exit codes: 0 on success, 1 on invalid flags or arguments, 2 when the
//! requested work fails at run time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use periodic_core::analysis::{self, CurveSeries};
use periodic_core::harness::{self, DatasetSpec, OptimizerSpec, TrainConfig};
use periodic_core::scorefn::{self, ScoreFunctionKind, KIND_NAMES};
use periodic_core::tinynn::{DemoConfig, ScoreScale};

const KIND_HELP: &str = "Score kinds: softmax, taylor-softmax, sm-softmax, sm-taylor-softmax, \
sin-max-constant, sin-max, cos-max, sin2-max, sin2-max-shifted, sin-softmax, siren-max";

#[derive(Parser)]
#[command(name = "periodic", version, about = "Periodic alternatives to softmax: curves, checks and a toy attention demo", after_help = KIND_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Diagonal-gradient curve of one score kind, written as CSV plus a meta JSON.
    Curves(CurvesArgs),
    /// Compare analytic Jacobians with central differences on random rows.
    Gradcheck(GradcheckArgs),
    /// Run an analysis report and write it as CSV.
    Analyze(AnalyzeArgs),
    /// Train the attention demo and write a JSON Lines run log.
    Train(TrainArgs),
    /// Histogram the gradient taps of a run.
    Taps(TapsArgs),
}

/// Parameters of the parameterized kinds.
#[derive(Args, Clone, Copy)]
struct KindParams {
    /// Series order for taylor-softmax and sm-taylor-softmax.
    #[arg(long, default_value_t = scorefn::DEFAULT_TAYLOR_ORDER)]
    taylor_order: u32,
    /// Numerator margin for sm-softmax and sm-taylor-softmax.
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Phase for sin2-max-shifted, in radians.
    #[arg(long, default_value_t = scorefn::DEFAULT_PHASE)]
    phase: f64,
}

impl KindParams {
    fn resolve(&self, name: &str) -> Result<ScoreFunctionKind, CliError> {
        let kind: ScoreFunctionKind = name.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
        let built = match kind {
            ScoreFunctionKind::TaylorSoftmax { .. } => ScoreFunctionKind::taylor(self.taylor_order),
            ScoreFunctionKind::SmSoftmax { .. } => ScoreFunctionKind::soft_margin(self.margin),
            ScoreFunctionKind::SmTaylorSoftmax { .. } => {
                ScoreFunctionKind::soft_margin_taylor(self.taylor_order, self.margin)
            }
            ScoreFunctionKind::Sin2MaxShifted { .. } => ScoreFunctionKind::sin2_shifted(self.phase),
            other => Ok(other),
        };
        built.map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Args)]
struct CurvesArgs {
    /// Score kind.
    #[arg(long = "fn")]
    kind: String,
    /// Off-sum M held fixed along the curve. Required unless --prenorm.
    #[arg(long, allow_negative_numbers = true)]
    m: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, allow_negative_numbers = true)]
    x_max: f64,
    /// Number of points, endpoints included.
    #[arg(long)]
    steps: usize,
    /// Sweep one input of a pre-normalized row instead (other inputs evenly spaced on [-1, 1]).
    #[arg(long)]
    prenorm: bool,
    /// Row length for --prenorm.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: KindParams,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Score kind, or `all`.
    #[arg(long = "fn")]
    kind: String,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    tol: f64,
    #[command(flatten)]
    params: KindParams,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    /// Saturated fraction of diagonal gradients per kind.
    Saturation,
    /// Extreme |diagonal gradient| against the off-sum M, one column per kind.
    ExtremumVsM,
    /// Sin-max-constant deviation from uniform against the row length.
    Submersion,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    report: Report,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the Monte Carlo reports.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Draws per kind (saturation) or per row length (submersion).
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Row length for the saturation report.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Standard deviation of saturation inputs.
    #[arg(long, default_value_t = 8.0)]
    scale: f64,
    /// Gradient magnitude below which an entry counts as saturated.
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[command(flatten)]
    params: KindParams,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    #[value(name = "inv_dmodel")]
    InvDModel,
    #[value(name = "inv_sqrt_dmodel")]
    InvSqrtDModel,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    score: String,
    #[arg(long)]
    depth: usize,
    /// `synthetic` or `cifar100:<path>:<subset>`.
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    seed: u64,
    /// Row-normalize raw attention scores before the score function.
    #[arg(long)]
    prenorm: bool,
    #[arg(long, value_enum, default_value = "inv_dmodel")]
    scale: ScaleArg,
    /// Tap every k-th step; 0 disables taps.
    #[arg(long, default_value_t = 0)]
    tap_every: usize,
    /// Samples kept per layer per tapped step.
    #[arg(long, default_value_t = 256)]
    tap_cap: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Run log path; taps go to `<stem>.taps.jsonl` beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: KindParams,
}

#[derive(Args)]
struct TapsArgs {
    /// Run log written by `train` with --tap-every > 0.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    bins: usize,
    /// Lower edge of the binned range; defaults to the smallest tapped input.
    #[arg(long, allow_negative_numbers = true)]
    x_min: Option<f64>,
    /// Upper edge of the binned range; defaults to the largest tapped input.
    #[arg(long, allow_negative_numbers = true)]
    x_max: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn curves(args: CurvesArgs) -> Result<(), CliError> {
    let kind = args.params.resolve(&args.kind)?;
    if !(args.x_min < args.x_max) {
        return Err(CliError::Usage("--x-min must be below --x-max".into()));
    }
    if args.steps < 2 {
        return Err(CliError::Usage("--steps must be at least 2".into()));
    }
    let curve = if args.prenorm {
        if args.dim < 3 {
            return Err(CliError::Usage("--dim must be at least 3 with --prenorm".into()));
        }
        analysis::prenorm_gradient_curve(kind, args.dim, args.x_min, args.x_max, args.steps)
    } else {
        let m = args.m.ok_or_else(|| CliError::Usage("--m is required without --prenorm".into()))?;
        analysis::gradient_curve(kind, m, args.x_min, args.x_max, args.steps)
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    if curve.nan_count() == curve.len() {
        return Err(runtime("every point of the curve is guarded"));
    }
    write_curve(&curve, &args.out)?;
    println!("wrote {} points ({} guarded) to {}", curve.len(), curve.nan_count(), args.out.display());
    Ok(())
}

fn write_curve(curve: &CurveSeries, path: &Path) -> Result<(), CliError> {
    curve.write(path).map(|_| ()).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if args.dim < 2 {
        return Err(CliError::Usage("--dim must be at least 2".into()));
    }
    if !(args.tol > 0.0) {
        return Err(CliError::Usage("--tol must be positive".into()));
    }
    let kinds: Vec<ScoreFunctionKind> = if args.kind == "all" {
        KIND_NAMES.iter().map(|n| args.params.resolve(n)).collect::<Result<_, _>>()?
    } else {
        vec![args.params.resolve(&args.kind)?]
    };
    let mut failed = 0;
    for kind in kinds {
        let r = scorefn::gradient_check(kind, args.dim, args.trials, args.seed, args.tol)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        println!(
            "{:<18} max_rel_error {:.3e}  failed {:>3}  skipped {:>3}  {}",
            kind.name(),
            r.max_rel_error,
            r.failed,
            r.skipped,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} kind(s) exceeded --tol {}", args.tol)));
    }
    Ok(())
}

/// Off-sums for the extremum report: 0.1 to 10 in steps of 0.1.
fn extremum_m_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 / 10.0).collect()
}

/// Row lengths for the submersion report.
const SUBMERSION_DIMS: [usize; 4] = [4, 16, 64, 256];

fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let kinds: Vec<ScoreFunctionKind> =
        KIND_NAMES.iter().map(|n| args.params.resolve(n)).collect::<Result<_, _>>()?;
    let mut csv = String::new();
    match args.report {
        Report::Saturation => {
            csv.push_str("kind,fraction_saturated,sample_count,skipped_trials,input_scale,epsilon\n");
            for kind in kinds {
                let r = analysis::saturation_fraction(kind, args.dim, args.trials, args.scale, args.epsilon, args.seed)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    kind.name(),
                    r.fraction_saturated,
                    r.sample_count,
                    r.skipped_trials,
                    r.input_scale,
                    r.epsilon
                );
            }
        }
        Report::ExtremumVsM => {
            let m_values = extremum_m_grid();
            let curves: Vec<CurveSeries> = kinds
                .iter()
                .map(|&k| analysis::extremum_vs_m_curve(k, &m_values))
                .collect::<Result<_, _>>()
                .map_err(runtime)?;
            csv.push('m');
            for k in &kinds {
                csv.push(',');
                csv.push_str(k.name());
            }
            csv.push('\n');
            for (i, m) in m_values.iter().enumerate() {
                let _ = write!(csv, "{m}");
                for c in &curves {
                    let y = c.y_values[i];
                    if y.is_nan() {
                        csv.push(',');
                    } else {
                        let _ = write!(csv, ",{y}");
                    }
                }
                csv.push('\n');
            }
        }
        Report::Submersion => {
            csv.push_str("d,mean_max_deviation\n");
            for d in SUBMERSION_DIMS {
                let v = analysis::submersion_deviation(d, args.trials, args.seed)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                let _ = writeln!(csv, "{d},{v}");
            }
        }
    }
    write_file(&args.out, &csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn parse_dataset(spec: &str) -> Result<DatasetSpec, CliError> {
    if spec == "synthetic" {
        return Ok(DatasetSpec::default_synthetic());
    }
    let bad = || CliError::Usage(format!("--dataset must be `synthetic` or `cifar100:<path>:<subset>`, got `{spec}`"));
    let rest = spec.strip_prefix("cifar100:").ok_or_else(bad)?;
    let (path, subset) = rest.rsplit_once(':').ok_or_else(bad)?;
    let subset_size: usize = subset.parse().map_err(|_| bad())?;
    if path.is_empty() || subset_size < 2 {
        return Err(bad());
    }
    Ok(DatasetSpec::Cifar100 { path: PathBuf::from(path), subset_size })
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let kind = args.params.resolve(&args.score)?;
    let dataset = parse_dataset(&args.dataset)?;
    let mut demo = match &dataset {
        DatasetSpec::Synthetic { num_classes, .. } => DemoConfig::synthetic(kind, args.depth, *num_classes),
        DatasetSpec::Cifar100 { .. } => DemoConfig::cifar100(kind, args.depth),
    };
    demo.attention.prenormalize = args.prenorm;
    demo.attention.score_scale = match args.scale {
        ScaleArg::InvDModel => ScoreScale::InvDModel,
        ScaleArg::InvSqrtDModel => ScoreScale::InvSqrtDModel,
    };
    let cfg = TrainConfig {
        demo,
        dataset,
        optimizer: OptimizerSpec::Adam { lr: args.lr, beta1: 0.9, beta2: 0.999 },
        steps: args.steps,
        batch_size: args.batch_size,
        seed: args.seed,
        tap_every: args.tap_every,
        tap_cap: args.tap_cap,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = harness::train_with_taps(&cfg).map_err(|e| match e {
        harness::HarnessError::Config(msg) => CliError::Usage(msg),
        other => runtime(other),
    })?;
    out.log.write(&args.out).map_err(runtime)?;
    if cfg.tap_every > 0 {
        let taps_path = harness::taps_path_for(&args.out);
        harness::write_taps(&taps_path, &out.taps).map_err(runtime)?;
    }
    match (out.log.breakdown, out.log.final_eval_accuracy) {
        (Some(b), _) => println!("breakdown at step {}: {:?}", b.step, b.cause),
        (None, Some(acc)) => println!("final eval accuracy {acc:.4}"),
        (None, None) => {}
    }
    Ok(())
}

fn taps(args: TapsArgs) -> Result<(), CliError> {
    if args.bins < 2 {
        return Err(CliError::Usage("--bins must be at least 2".into()));
    }
    let taps_path = harness::taps_path_for(&args.run);
    if !taps_path.exists() {
        return Err(CliError::Usage(format!("run has no taps ({} not found)", taps_path.display())));
    }
    let records = harness::read_taps(&taps_path).map_err(runtime)?;
    let samples = records.iter().flat_map(|r| r.samples.iter());
    let (lo, hi) = samples.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.x), hi.max(s.x)));
    if !lo.is_finite() {
        return Err(CliError::Usage("run has no tapped samples".into()));
    }
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let range = (args.x_min.unwrap_or(lo), args.x_max.unwrap_or(hi));
    let hists = harness::aggregate_taps(&records, args.bins, range).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&args.out, &harness::histograms_to_csv(&hists))?;
    println!("wrote {} histograms over [{}, {}] to {}", hists.len(), range.0, range.1, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Curves(a) => curves(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a),
        Command::Taps(a) => taps(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(msg) | CliError::Runtime(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_specs() {
        assert_eq!(parse_dataset("synthetic").unwrap(), DatasetSpec::default_synthetic());
        assert_eq!(
            parse_dataset("cifar100:/data/c:100/train.bin:512").unwrap(),
            DatasetSpec::Cifar100 { path: PathBuf::from("/data/c:100/train.bin"), subset_size: 512 }
        );
        for bad in ["cifar100:/x", "cifar100::5", "cifar100:/x:many", "mnist"] {
            assert!(parse_dataset(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn kind_params_apply_to_parameterized_kinds() {
        let p = KindParams { taylor_order: 4, margin: 0.5, phase: 1.0 };
        assert_eq!(p.resolve("sm-taylor-softmax").unwrap(), ScoreFunctionKind::soft_margin_taylor(4, 0.5).unwrap());
        assert_eq!(p.resolve("sin2-max-shifted").unwrap(), ScoreFunctionKind::sin2_shifted(1.0).unwrap());
        assert_eq!(p.resolve("cos-max").unwrap(), ScoreFunctionKind::CosMax);
        let bad = KindParams { taylor_order: 2, margin: -1.0, phase: 0.0 };
        assert!(matches!(bad.resolve("sm-softmax"), Err(CliError::Usage(_))));
    }
}
