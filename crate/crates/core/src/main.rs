//! Command line entry point: run experiments, build budget schedules, verify
//! the analytical bounds, and benchmark the kernel modes.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pasa_core::analysis::deviation_counterexample_search;
use pasa_core::blockstats::{global_and_grouped_means, partition, BlockStatistics};
use pasa_core::budget::{
    average_curves, build_schedule, dense_prefix_len, l1_curve, read_curve_csv,
    read_trajectory_csv, restrict_to_sparse, synth_three_phase, write_curve_csv,
    VelocityTrajectory,
};
use pasa_core::harness::{generate_instance, run_experiment, ExperimentConfig};
use pasa_core::kernel::{piecewise_attention, scaled_variant_equivalences, CompensationMode};
use pasa_core::numerics::Matrix;
use pasa_core::oracle::dense_attention;
use pasa_core::rng::{hash_words, CounterRng};
use pasa_core::routing::{density_to_k, route, RngContext};
use pasa_core::{analysis, Error, Result};

#[derive(Parser)]
#[command(
    name = "pasa",
    version,
    about = "Piecewise block-sparse attention testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and write a JSON report.
    Run(RunArgs),
    /// Build a budget schedule from trajectories, a curve file, or synthetic data.
    Schedule(ScheduleArgs),
    /// Run the bound and equivalence suites; exit nonzero on any violation.
    Verify(VerifyArgs),
    /// Wall-clock timing of the kernel modes at growing sequence lengths.
    Bench(BenchArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// Plain key=value config file; command line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    bias_beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    dense_frac: Option<f64>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    mode: Option<CompensationMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    correlation_strength: Option<f64>,
    #[arg(long)]
    drift_rate: Option<f64>,
    /// Fix top-k at this count instead of following the schedule.
    #[arg(long)]
    force_k: Option<usize>,
    /// Worker threads for trials; never changes the report bytes.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-step CSV table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Trajectory CSV files (step,v0,v1,...), one per calibration signal.
    #[arg(long = "trajectory")]
    trajectories: Vec<PathBuf>,
    /// Calibration curve CSV (step,l1) covering every timestep.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Generate this many synthetic three-phase trajectories instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 50)]
    total_steps: usize,
    #[arg(long, default_value_t = 0.2)]
    dense_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Schedule JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the averaged full curve as CSV.
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random draws per bound suite.
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "256,512,1024")]
    sizes: String,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    #[arg(long, default_value_t = 0.15)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Schedule(args) => cmd_schedule(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        apply_config_file(&mut cfg, path)?;
    }
    apply_cli_overrides(&mut cfg, &args);

    let report = run_experiment(&cfg, args.workers.max(1))?;
    let json = report.to_json();
    match &args.out {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv())?;
    }

    if args.out.is_some() {
        println!(
            "mode {} | sparsity {:.4} | mean rel error {:.3e} | residual bound {}/{} | group SS {}/{}",
            report.config.mode,
            report.aggregates.realized_sparsity,
            report.aggregates.mean_rel_frobenius,
            report.bound_checks.residual_bound_satisfied,
            report.bound_checks.residual_bound_checked,
            report.bound_checks.sum_of_squares_groups_satisfied,
            report.bound_checks.sum_of_squares_groups_checked,
        );
    }
    Ok(report.all_invariants_passed())
}

fn apply_config_file(cfg: &mut ExperimentConfig, path: &PathBuf) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Io(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let parse_err =
            |e: String| Error::Io(format!("{}:{}: bad {key}: {e}", path.display(), lineno + 1));
        match key {
            "seq_len" => {
                cfg.seq_len = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
            }
            "head_dim" => {
                cfg.head_dim = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
            }
            "block_size" => {
                cfg.block_size = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
            }
            "group_size" => {
                cfg.group_size = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
            }
            "rho" => {
                cfg.rho = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
            }
            "bias_beta" => {
                cfg.bias_beta = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
            }
            "epsilon" => {
                cfg.epsilon = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
            }
            "dense_frac" => {
                cfg.dense_frac = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
            }
            "total_steps" => {
                cfg.total_steps = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
            }
            "mode" => cfg.mode = value.parse()?,
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
            }
            "num_trials" | "trials" => {
                cfg.num_trials = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
            }
            "correlation_strength" => {
                cfg.correlation_strength = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
            }
            "drift_rate" => {
                cfg.drift_rate = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
            }
            "force_k" => {
                cfg.force_k = Some(
                    value
                        .parse()
                        .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
                )
            }
            other => {
                return Err(Error::Io(format!(
                    "{}:{}: unknown config key '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(())
}

fn apply_cli_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    macro_rules! set {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                cfg.$field = v;
            }
        };
    }
    set!(seq_len, args.seq_len);
    set!(head_dim, args.head_dim);
    set!(block_size, args.block_size);
    set!(group_size, args.group_size);
    set!(rho, args.rho);
    set!(bias_beta, args.bias_beta);
    set!(epsilon, args.epsilon);
    set!(dense_frac, args.dense_frac);
    set!(total_steps, args.total_steps);
    set!(mode, args.mode);
    set!(seed, args.seed);
    set!(num_trials, args.trials);
    set!(correlation_strength, args.correlation_strength);
    set!(drift_rate, args.drift_rate);
    if args.force_k.is_some() {
        cfg.force_k = args.force_k;
    }
}

fn cmd_schedule(args: ScheduleArgs) -> Result<bool> {
    let sources = [
        !args.trajectories.is_empty(),
        args.curve.is_some(),
        args.synthetic.is_some(),
    ];
    if sources.iter().filter(|&&s| s).count() > 1 {
        return Err(Error::InvalidArgument(
            "pick one of --trajectory, --curve, --synthetic".into(),
        ));
    }

    let full_curve: Vec<f64> = if let Some(path) = &args.curve {
        read_curve_csv(BufReader::new(fs::File::open(path)?))?
    } else {
        let trajectories: Vec<VelocityTrajectory> = if !args.trajectories.is_empty() {
            args.trajectories
                .iter()
                .map(|p| read_trajectory_csv(BufReader::new(fs::File::open(p)?)))
                .collect::<Result<_>>()?
        } else {
            let count = args.synthetic.unwrap_or(10).max(1);
            (0..count)
                .map(|i| {
                    synth_three_phase(args.total_steps, hash_words(&[args.seed, 0x5EED, i as u64]))
                })
                .collect()
        };
        let curves: Vec<Vec<f64>> = trajectories.iter().map(l1_curve).collect();
        average_curves(&curves)?
    };

    let total_steps = full_curve.len() + 1;
    if args.curve.is_none() && !args.trajectories.is_empty() && total_steps != args.total_steps {
        eprintln!("note: using {total_steps} timesteps from the trajectory files");
    }
    let dense_prefix = dense_prefix_len(total_steps, args.dense_frac);
    let sparse = restrict_to_sparse(&full_curve, total_steps, dense_prefix)?;
    let schedule = build_schedule(&sparse, args.rho, total_steps, args.dense_frac)?;

    if let Some(path) = &args.curve_out {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &full_curve)?;
        fs::write(path, buf)?;
    }
    let json = schedule.to_json();
    match &args.out {
        Some(path) => {
            fs::write(path, json + "\n")?;
            println!(
                "schedule: {} steps, dense prefix {}, mean density {:.4}, {} clip events",
                schedule.total_steps,
                schedule.dense_prefix,
                schedule.mean_density(),
                schedule.clip_events.len()
            );
        }
        None => println!("{json}"),
    }
    Ok(true)
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let mut all_ok = true;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{}: {name} ({detail})", if ok { "PASS" } else { "FAIL" });
        all_ok &= ok;
    };

    // Weighted-residual bound on random draws.
    let mut rng = CounterRng::from_words(&[args.seed, 0x1E1A]);
    let mut min_margin = f64::INFINITY;
    let mut residual_ok = true;
    for draw in 0..args.draws {
        let n_b = 3 + (rng.next_u64() % 14) as usize;
        let d = 1 + (rng.next_u64() % 6) as usize;
        let group_size = 1 + (rng.next_u64() % n_b as u64) as usize;
        let h: Vec<Matrix> = (0..n_b)
            .map(|j| {
                let mut hr = CounterRng::from_words(&[args.seed, 0xDA7A, draw as u64, j as u64]);
                Matrix::from_fn(d, d, |_, _| hr.normal())
            })
            .collect();
        let means = global_and_grouped_means(&h, group_size)?;
        let alphas: Vec<f64> = (0..n_b).map(|_| 3.0 * rng.uniform_open01()).collect();
        let unselected: Vec<usize> = (0..n_b).filter(|_| rng.next_u64() & 1 == 0).collect();
        let check = analysis::weighted_residual_check(&h, &means, &alphas, &unselected)?;
        residual_ok &= check.satisfied;
        min_margin = min_margin.min(check.margin);
    }
    report(
        "weighted group residual bound",
        residual_ok,
        format!("{} draws, min margin {min_margin:.3e}", args.draws),
    );

    // Within-group sum-of-squares inequality on random draws.
    let mut prop_ok = true;
    for draw in 0..args.draws {
        let n_b = 2 + (rng.next_u64() % 15) as usize;
        let d = 1 + (rng.next_u64() % 6) as usize;
        let group_size = 1 + (rng.next_u64() % n_b as u64) as usize;
        let h: Vec<Matrix> = (0..n_b)
            .map(|j| {
                let mut hr = CounterRng::from_words(&[args.seed, 0xD0D0, draw as u64, j as u64]);
                Matrix::from_fn(d, d, |_, _| hr.normal())
            })
            .collect();
        let means = global_and_grouped_means(&h, group_size)?;
        let result = analysis::group_sum_of_squares_check(&h, &means.group_of, &means.global)?;
        prop_ok &= result.satisfied;
    }
    report(
        "within-group sum of squares",
        prop_ok,
        format!("{} draws", args.draws),
    );

    // Per-block deviations can still favor the global mean.
    let found = deviation_counterexample_search(1000, args.seed);
    report(
        "per-block deviation counterexample",
        found,
        "searched 1000 draws".into(),
    );

    // Grouping collapse identities on random instances.
    let mut equiv_ok = true;
    let mut max_dev = 0.0f64;
    for seed in 0..50u64 {
        let cfg = ExperimentConfig {
            seq_len: 64,
            head_dim: 8,
            block_size: 8,
            group_size: 3,
            seed: hash_words(&[args.seed, 0xE01, seed]),
            ..Default::default()
        };
        let inst = generate_instance(&cfg, RngContext::default());
        let part = partition(cfg.seq_len, cfg.block_size)?;
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, cfg.group_size)?;
        let plan = route(
            inst.q(),
            &stats,
            &cfg.routing(cfg.seed),
            RngContext::default(),
            2,
            cfg.scale(),
        )?;
        let eq = scaled_variant_equivalences(&inst, &plan, &stats)?;
        equiv_ok &= eq.satisfied(1e-12);
        max_dev = max_dev
            .max(eq.single_group_dev)
            .max(eq.singleton_groups_dev);
    }
    report(
        "grouping collapse identities",
        equiv_ok,
        format!("50 seeds, max deviation {max_dev:.3e}"),
    );

    Ok(all_ok)
}

fn cmd_bench(args: BenchArgs) -> Result<bool> {
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad size: {e}")))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("seq_len,num_blocks,k,mode,wall_ms\n");
    for &s in &sizes {
        let cfg = ExperimentConfig {
            seq_len: s,
            head_dim: args.head_dim,
            block_size: args.block_size,
            group_size: args.group_size,
            rho: args.rho,
            seed: args.seed,
            ..Default::default()
        }
        .normalized()?;
        let inst = generate_instance(&cfg, RngContext::default());
        let part = partition(cfg.seq_len, cfg.block_size)?;
        let stats = BlockStatistics::compute(inst.k(), inst.v(), &part, cfg.group_size)?;
        let k = density_to_k(cfg.rho, cfg.num_blocks());
        let plan = route(
            inst.q(),
            &stats,
            &cfg.routing(cfg.seed),
            RngContext::default(),
            k,
            cfg.scale(),
        )?;

        let time = |f: &dyn Fn() -> Result<Matrix>| -> Result<f64> {
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let start = Instant::now();
                f()?;
                best = best.min(start.elapsed().as_secs_f64() * 1e3);
            }
            Ok(best)
        };

        let ms = time(&|| dense_attention(&inst))?;
        csv.push_str(&format!(
            "{},{},{},dense,{ms:.3}\n",
            cfg.seq_len,
            cfg.num_blocks(),
            k
        ));
        for mode in CompensationMode::ALL {
            let ms = time(&|| piecewise_attention(&inst, &plan, &stats, mode))?;
            csv.push_str(&format!(
                "{},{},{},{},{ms:.3}\n",
                cfg.seq_len,
                cfg.num_blocks(),
                k,
                mode
            ));
        }
    }

    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(true)
}
