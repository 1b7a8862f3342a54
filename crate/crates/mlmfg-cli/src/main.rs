//! `mlmfg` — solve multi-leader–multi-follower games by Fischer–Burmeister
//! smoothing with a decreasing-epsilon homotopy, run the verification suite,
//! and emit plot-ready CSV traces.
//!
//! Exit codes: 0 success, 2 usage, 3 instance/validation failure,
//! 4 solver or output failure, 5 check failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlmfg::{
    build_quadratic_model, builtin_instance, load_instance, run_homotopy, stationarity_report,
    validate_instance, GameModel, HomotopyOptions, HomotopyTrajectory, ProblemInstance,
    QuadraticModel, Schedule, StationarityReport,
};
use nalgebra::DVector;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_SOLVER: u8 = 4;
const EXIT_CHECK: u8 = 5;

#[derive(Parser)]
#[command(
    name = "mlmfg",
    version,
    about = "Stationary Nash equilibria of multi-leader-multi-follower games \
             via smoothed KKT systems and a decreasing-epsilon homotopy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the homotopy and write trajectory.csv, report.json, summary.txt.
    Solve(RunArgs),
    /// Run the cross-validation suite against the instance.
    Check(CheckArgs),
    /// Emit a plot-ready per-epsilon CSV for one quantity.
    Trace(TraceArgs),
}

#[derive(Args)]
struct InstanceArgs {
    /// Path to an instance file (JSON, schema version 1).
    #[arg(long, conflicts_with = "builtin")]
    instance: Option<PathBuf>,
    /// Name of a built-in instance (default: hori-fukushima-ext).
    #[arg(long)]
    builtin: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Initial smoothing parameter.
    #[arg(long, default_value_t = 1.0)]
    eps0: f64,
    /// Multiplicative decay of the smoothing parameter, in (0, 1).
    #[arg(long, default_value_t = 0.9)]
    ratio: f64,
    /// Number of homotopy steps.
    #[arg(long, default_value_t = 75)]
    steps: usize,
    /// Initial leader strategies, comma-separated (default: the built-in
    /// instance's reference start, zeros for file instances).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long, default_value = "mlmfg_out")]
    out: PathBuf,
    /// Seed for randomized checks (recorded in the summary).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Retry a failed step once via a half-step warm-up solve.
    #[arg(long)]
    retry_halve: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Seed of the randomized sweeps.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recompute the quantities stored in a report.json and compare.
    #[arg(long)]
    from_report: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Which quantity to trace.
    #[arg(value_enum)]
    quantity: Quantity,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Quantity {
    X,
    Y,
    Residuals,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MLMFG_LOG")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve(args) => cmd_solve(&args),
        Command::Check(args) => cmd_check(&args),
        Command::Trace(args) => cmd_trace(&args),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

type CmdError = (u8, String);

fn load_model(args: &InstanceArgs) -> Result<(QuadraticModel, String), CmdError> {
    let (inst, label): (ProblemInstance, String) = match (&args.instance, &args.builtin) {
        (Some(path), None) => {
            let (inst, warnings) = load_instance(path)
                .map_err(|e| (EXIT_VALIDATION, format!("loading {}: {e}", path.display())))?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            (inst, path.display().to_string())
        }
        (None, name) => {
            let name = name.as_deref().unwrap_or("hori-fukushima-ext");
            let inst = builtin_instance(name).ok_or((
                EXIT_USAGE,
                format!("unknown builtin instance `{name}` (available: hori-fukushima-ext)"),
            ))?;
            (inst, format!("builtin:{name}"))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let report = validate_instance(&inst);
    if !report.passed() {
        return Err((
            EXIT_VALIDATION,
            format!("instance {label} failed validation:\n  {}", report.violations.join("\n  ")),
        ));
    }
    let model = build_quadratic_model(inst)
        .map_err(|e| (EXIT_VALIDATION, format!("building model from {label}: {e}")))?;
    Ok((model, label))
}

fn resolve_x0(args: &RunArgs, model: &QuadraticModel, label: &str) -> Result<DVector<f64>, CmdError> {
    let n = model.dims().n();
    match &args.x0 {
        Some(values) => {
            if values.len() != n {
                return Err((
                    EXIT_USAGE,
                    format!("--x0 has {} entries, instance needs n = {n}", values.len()),
                ));
            }
            Ok(DVector::from_vec(values.clone()))
        }
        None => {
            if label.starts_with("builtin:") {
                Ok(DVector::from_element(n, 3.0))
            } else {
                Ok(DVector::zeros(n))
            }
        }
    }
}

fn cmd_solve(args: &RunArgs) -> Result<(), CmdError> {
    let (model, label) = load_model(&args.instance)?;
    let x0 = resolve_x0(args, &model, &label)?;
    let schedule = Schedule {
        eps0: args.eps0,
        ratio: args.ratio,
        steps: args.steps,
    };
    schedule
        .validate()
        .map_err(|e| (EXIT_USAGE, format!("invalid schedule: {e}")))?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| (EXIT_SOLVER, format!("creating {}: {e}", args.out.display())))?;

    let started = std::time::Instant::now();
    let options = HomotopyOptions {
        retry_halve: args.retry_halve,
    };
    let trajectory = match run_homotopy(&model, &schedule, &x0, &options) {
        Ok(t) => t,
        Err(e) => {
            if let mlmfg::HomotopyError::SolverFailureAt { ref partial, .. } = e {
                // leave the partial trajectory behind for diagnosis
                let _ = write_trajectory_csv(&args.out.join("trajectory.csv"), partial, &model);
            }
            return Err((EXIT_SOLVER, e.to_string()));
        }
    };
    let elapsed = started.elapsed().as_secs_f64();
    let report = stationarity_report(&model, &trajectory);

    write_trajectory_csv(&args.out.join("trajectory.csv"), &trajectory, &model)
        .map_err(|e| (EXIT_SOLVER, e))?;
    let report_json = serde_json::to_string_pretty(&report).expect("report serialization");
    std::fs::write(args.out.join("report.json"), report_json)
        .map_err(|e| (EXIT_SOLVER, format!("writing report.json: {e}")))?;
    write_summary(
        &args.out.join("summary.txt"),
        &label,
        &schedule,
        &x0,
        args.seed,
        &trajectory,
        &report,
        elapsed,
    )
    .map_err(|e| (EXIT_SOLVER, e))?;

    println!(
        "solved {label}: {} steps, final eps {:.6e}, projection residual {:.3e}",
        trajectory.records.len(),
        report.eps_final,
        report.projection_residual
    );
    println!("{}", report.stationarity_label);
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<(), CmdError> {
    let (model, label) = load_model(&args.instance)?;

    if let Some(report_path) = &args.from_report {
        let text = std::fs::read_to_string(report_path)
            .map_err(|e| (EXIT_VALIDATION, format!("reading {}: {e}", report_path.display())))?;
        let stored: StationarityReport = serde_json::from_str(&text)
            .map_err(|e| (EXIT_VALIDATION, format!("parsing {}: {e}", report_path.display())))?;
        let (fresh, mismatch) = mlmfg::checks::recheck_report(&model, &stored);
        println!(
            "stored:     projection_residual {:.17e}  comp_product_error {:.17e}",
            stored.projection_residual, stored.comp_product_error
        );
        println!(
            "recomputed: projection_residual {:.17e}  comp_product_error {:.17e}",
            fresh.projection_residual, fresh.comp_product_error
        );
        println!("max mismatch: {mismatch:.3e}");
        if mismatch > 1e-12 {
            return Err((
                EXIT_CHECK,
                format!("report recomputation mismatch {mismatch:.3e} exceeds 1e-12"),
            ));
        }
        println!("report re-check OK");
        return Ok(());
    }

    println!("running verification suite on {label} (seed {})", args.seed);
    let results = mlmfg::checks::run_checks(model.instance(), args.seed);
    let mut failures = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:34} {}", r.name, r.detail);
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err((EXIT_CHECK, format!("{failures} check(s) failed")));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<(), CmdError> {
    let trajectory_path = args.run.out.join("trajectory.csv");
    if !trajectory_path.exists() {
        log::info!("no trajectory at {}; solving inline", trajectory_path.display());
        cmd_solve(&args.run)?;
    }
    let (header, rows) = read_csv(&trajectory_path).map_err(|e| (EXIT_SOLVER, e))?;
    let col = |name: &str| -> Result<usize, CmdError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or((EXIT_SOLVER, format!("trajectory.csv lacks column {name}")))
    };
    let prefix_cols = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                h.starts_with(prefix)
                    && h[prefix.len()..].chars().all(|c| c.is_ascii_digit())
            })
            .map(|(i, _)| i)
            .collect()
    };

    let (names, indices): (Vec<String>, Vec<usize>) = match args.quantity {
        Quantity::X => {
            let idx = prefix_cols("x_");
            (idx.iter().map(|&i| header[i].clone()).collect(), idx)
        }
        Quantity::Y => {
            let idx = prefix_cols("y_");
            (idx.iter().map(|&i| header[i].clone()).collect(), idx)
        }
        Quantity::Residuals => {
            let idx = vec![
                col("ncp_residual")?,
                col("vi_residual")?,
                col("follower_comp_error")?,
            ];
            (idx.iter().map(|&i| header[i].clone()).collect(), idx)
        }
    };

    let k_col = col("k")?;
    let eps_col = col("eps")?;
    let name = match args.quantity {
        Quantity::X => "x",
        Quantity::Y => "y",
        Quantity::Residuals => "residuals",
    };
    let out_path = args.run.out.join(format!("trace_{name}.csv"));
    let mut out = String::new();
    out.push_str("k,eps");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for row in &rows {
        out.push_str(&row[k_col]);
        out.push(',');
        out.push_str(&row[eps_col]);
        for &i in &indices {
            out.push(',');
            out.push_str(&row[i]);
        }
        out.push('\n');
    }
    std::fs::write(&out_path, out)
        .map_err(|e| (EXIT_SOLVER, format!("writing {}: {e}", out_path.display())))?;
    println!("wrote {}", out_path.display());
    Ok(())
}

/// 17-significant-digit decimal text: lossless binary64 round-trip.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_trajectory_csv(
    path: &Path,
    trajectory: &HomotopyTrajectory,
    model: &QuadraticModel,
) -> Result<(), String> {
    let dims = model.dims();
    let mut text = String::from("k,eps");
    for i in 1..=dims.n() {
        text.push_str(&format!(",x_{i}"));
    }
    for i in 1..=dims.m() {
        text.push_str(&format!(",y_{i}"));
    }
    for i in 1..=dims.l() {
        text.push_str(&format!(",z_{i}"));
    }
    for i in 1..=dims.l() {
        text.push_str(&format!(",lambda_{i}"));
    }
    text.push_str(
        ",ncp_residual,vi_residual,follower_comp_error,newton_iters_leader,newton_iters_follower\n",
    );
    for rec in &trajectory.records {
        text.push_str(&rec.k.to_string());
        text.push(',');
        text.push_str(&fmt(rec.eps));
        for v in rec.x.iter().chain(rec.y.iter()).chain(rec.z.iter()).chain(rec.lambda.iter()) {
            text.push(',');
            text.push_str(&fmt(*v));
        }
        text.push(',');
        text.push_str(&fmt(rec.ncp_residual));
        text.push(',');
        text.push_str(&fmt(rec.vi_residual));
        text.push(',');
        text.push_str(&fmt(rec.follower_comp_error));
        text.push(',');
        text.push_str(&rec.newton_iters_leader.to_string());
        text.push(',');
        text.push_str(&rec.newton_iters_follower.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| format!("writing {}: {e}", path.display()))
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| format!("{} is empty", path.display()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

#[allow(clippy::too_many_arguments)]
fn write_summary(
    path: &Path,
    label: &str,
    schedule: &Schedule,
    x0: &DVector<f64>,
    seed: u64,
    trajectory: &HomotopyTrajectory,
    report: &StationarityReport,
    elapsed: f64,
) -> Result<(), String> {
    let last = trajectory.records.last().expect("nonempty trajectory");
    let total_leader: usize = trajectory.records.iter().map(|r| r.newton_iters_leader).sum();
    let total_follower: usize = trajectory.records.iter().map(|r| r.newton_iters_follower).sum();
    let x0_str: Vec<String> = x0.iter().map(|v| format!("{v}")).collect();
    let x_str: Vec<String> = report.x_final.iter().map(|v| format!("{v:.12}")).collect();
    let y_str: Vec<String> = last.y.iter().map(|v| format!("{v:.12}")).collect();
    let cauchy = report
        .cauchy_tail
        .map(|c| format!("{c:.3e}"))
        .unwrap_or_else(|| "n/a (single step)".to_string());
    let text = format!(
        "instance:            {label}\n\
         schedule:            eps_k = {} * {}^k, k = 0..{}\n\
         x0:                  [{}]\n\
         seed:                {seed}\n\
         steps completed:     {}\n\
         final eps:           {:.10e}\n\
         final x:             [{}]\n\
         final y:             [{}]\n\
         ncp residual:        {:.3e}\n\
         projection residual: {:.3e}\n\
         comp product error:  {:.3e}\n\
         cauchy tail:         {cauchy}\n\
         strict compl.:       {}\n\
         label:               {}\n\
         leader newton iters: {total_leader}\n\
         follower newton its: {total_follower}\n\
         wall time:           {elapsed:.3} s\n",
        schedule.eps0,
        schedule.ratio,
        schedule.steps - 1,
        x0_str.join(", "),
        trajectory.records.len(),
        report.eps_final,
        x_str.join(", "),
        y_str.join(", "),
        last.ncp_residual,
        report.projection_residual,
        report.comp_product_error,
        report.strict_complementarity,
        report.stationarity_label,
    );
    std::fs::write(path, text).map_err(|e| format!("writing {}: {e}", path.display()))
}
