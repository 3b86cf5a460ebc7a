//! `hmlmc`: experiments for the CVA-VaR estimator. Every subcommand writes CSV
//! files and a `status` file into `--out`.

mod config;
mod output;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use config::{Config, Mode};
use hmlmc::cva::{nested_mc_oracle, offline_precompute, var_root_find, CvaProblem};
use hmlmc::driver::{evaluate_level, mlmc_run, start_level_ratios, LevelStats, RunResult};
use output::Output;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "hmlmc", version, about = "Hierarchical MLMC for the probability of a large CVA loss")]
struct Cli {
    /// TOML experiment file; defaults describe the reference problem.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Absolute RMS tolerance for `estimate` and `var`.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// adaptive, fixed_gamma1, fixed_gamma2 or oracle.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Statistics of the Heaviside corrections per level.
    Levels,
    /// Total cost of the estimator over a list of tolerances.
    Complexity,
    /// One estimate of the loss probability.
    Estimate,
    /// Threshold for a target loss probability by bisection.
    Var,
    /// Plain nested Monte Carlo reference estimate.
    Oracle,
    /// Offline expectations and portfolio weights.
    Precompute,
}

struct Run {
    cfg: Config,
    seed: u64,
    mode: Mode,
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    let run = Run {
        seed: cli.seed.unwrap_or(cfg.experiment.seed),
        mode: cli.mode.unwrap_or_else(|| cfg.mode()),
        tol: cli.tol.unwrap_or(cfg.experiment.tol),
        cfg,
    };
    if !(run.tol > 0.0) {
        bail!("--tol must be positive");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build()?;
    let mut out = Output::create(&cli.out)?;
    let result = pool.install(|| dispatch(cli.command, &run, &mut out));
    out.finish(result.as_ref().err())?;
    result
}

fn dispatch(cmd: Command, run: &Run, out: &mut Output) -> Result<()> {
    if run.mode == Mode::Oracle && !matches!(cmd, Command::Estimate | Command::Oracle | Command::Precompute) {
        bail!("oracle mode only applies to estimate and oracle");
    }
    match cmd {
        Command::Levels => levels(run, out),
        Command::Complexity => complexity(run, out),
        Command::Estimate if run.mode == Mode::Oracle => oracle(run, out),
        Command::Estimate => estimate(run, out),
        Command::Var => var(run, out),
        Command::Oracle => oracle(run, out),
        Command::Precompute => precompute(run, out),
    }
}

fn problem(run: &Run) -> Result<CvaProblem> {
    run.cfg.problem().context("building the CVA problem")
}

fn levels(run: &Run, out: &mut Output) -> Result<()> {
    let problem = problem(run)?;
    let adaptive = run.cfg.adaptive(run.mode);
    let e = &run.cfg.experiment;
    let mut table = out.csv("levels.csv", "level,cost,M,V,kurtosis")?;
    let mut stats = BTreeMap::<u32, LevelStats>::new();
    for &l in &e.levels {
        let s = evaluate_level(&problem, l, 0..e.samples, &adaptive, run.seed, run.cfg.driver.batch)?;
        table.row(format_args!("{l},{},{},{},{}", s.mean_cost(), s.count, s.variance(), s.kurtosis()))?;
        println!("level {l}: V = {:.4e}, cost = {:.4e}", s.variance(), s.mean_cost());
        stats.insert(l, s);
    }
    table.close()?;
    let mut ell0 = out.csv("ell0.csv", "level,R")?;
    for (l, r) in start_level_ratios(&stats) {
        ell0.row(format_args!("{l},{r}"))?;
    }
    ell0.close()
}

fn estimate_header() -> &'static str {
    "tol,estimate,std_error,cost,warmup_cost,start_level,max_level,bias_target_met"
}

fn estimate_row(r: &RunResult) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.tol, r.estimate, r.std_error, r.total_cost, r.warmup_cost, r.start_level, r.max_level, r.bias_target_met
    )
}

fn complexity(run: &Run, out: &mut Output) -> Result<()> {
    let problem = problem(run)?;
    let driver = run.cfg.driver(run.mode);
    let e = &run.cfg.experiment;
    let mut raw = out.csv("complexity.csv", "tol,cost")?;
    let mut norm = out.csv("complexity_normalized.csv", "tol,cost")?;
    let mut detail = out.csv("complexity_runs.csv", estimate_header())?;
    for &tol in &e.tols {
        let r = mlmc_run(&problem, &driver, tol, run.seed).with_context(|| format!("tol = {tol}"))?;
        raw.row(format_args!("{tol},{}", r.total_cost))?;
        norm.row(format_args!("{},{}", tol / e.normalization, r.total_cost))?;
        detail.row(format_args!("{}", estimate_row(&r)))?;
        println!("tol {tol:e}: eta = {:.5} ± {:.2e}, cost = {:.4e}", r.estimate, r.std_error, r.total_cost as f64);
    }
    raw.close()?;
    norm.close()?;
    detail.close()
}

fn estimate(run: &Run, out: &mut Output) -> Result<()> {
    let problem = problem(run)?;
    let r = mlmc_run(&problem, &run.cfg.driver(run.mode), run.tol, run.seed)?;
    let mut summary = out.csv("estimate.csv", estimate_header())?;
    summary.row(format_args!("{}", estimate_row(&r)))?;
    summary.close()?;
    let mut table =
        out.csv("estimate_levels.csv", "level,samples,mean,variance_hat,bias_hat,empirical_variance,kurtosis,mean_cost,mean_eta")?;
    for s in &r.levels {
        table.row(format_args!(
            "{},{},{},{},{},{},{},{},{}",
            s.level, s.samples, s.mean, s.variance_hat, s.bias_hat, s.empirical_variance, s.kurtosis, s.mean_cost, s.mean_eta
        ))?;
    }
    table.close()?;
    println!("eta = {:.6} ± {:.2e} (levels {}..={}, cost {:.4e})", r.estimate, r.std_error, r.start_level, r.max_level, r.total_cost as f64);
    println!("{:>5} {:>9} {:>12} {:>12} {:>12}", "level", "samples", "mean", "V_hat", "E_hat");
    for s in &r.levels {
        println!("{:>5} {:>9} {:>12.4e} {:>12.4e} {:>12.4e}", s.level, s.samples, s.mean, s.variance_hat, s.bias_hat);
    }
    Ok(())
}

fn var(run: &Run, out: &mut Output) -> Result<()> {
    let problem = problem(run)?;
    let v = &run.cfg.var;
    let vcfg = hmlmc::cva::VarConfig { eta_tol: run.tol.min(v.eta_tol), ..run.cfg.var() };
    let res = var_root_find(&problem, v.eta, (v.bracket[0], v.bracket[1]), &vcfg, &run.cfg.driver(run.mode), run.seed)?;
    let mut trace = out.csv("var_trace.csv", "iter,low,high,lambda,eta,std_error")?;
    for (i, s) in res.trace.iter().enumerate() {
        trace.row(format_args!("{i},{},{},{},{},{}", s.low, s.high, s.lambda, s.eta, s.std_error))?;
    }
    trace.close()?;
    let mut summary = out.csv("var.csv", "eta_target,l_eta")?;
    summary.row(format_args!("{},{}", v.eta, res.l_eta))?;
    summary.close()?;
    println!("L_eta = {:.6e} for eta = {}", res.l_eta, v.eta);
    Ok(())
}

fn oracle(run: &Run, out: &mut Output) -> Result<()> {
    let problem = problem(run)?;
    let o = run.cfg.oracle();
    let r = nested_mc_oracle(&problem, &o, run.seed)?;
    let mut t = out.csv("oracle.csv", "estimate,std_error,outer,middle,inner,steps_middle,steps_inner,cost")?;
    t.row(format_args!(
        "{},{},{},{},{},{},{},{}",
        r.estimate, r.std_error, o.outer, o.middle, o.inner, o.steps_middle, o.steps_inner, r.cost_units
    ))?;
    t.close()?;
    println!("eta (nested MC) = {:.6} ± {:.2e}", r.estimate, r.std_error);
    Ok(())
}

fn precompute(run: &Run, out: &mut Output) -> Result<()> {
    let p = run.cfg.portfolio()?;
    let credit = run.cfg.credit();
    let off = offline_precompute(&p, &credit, run.cfg.loss.offline_accuracy)?;
    let mut t = out.csv("precompute.csv", "name,value")?;
    for (i, (w, k)) in p.options.iter().enumerate() {
        t.row(format_args!("weight_{i},{w}"))?;
        t.row(format_args!("strike_{i},{k}"))?;
    }
    for (name, v) in [
        ("e_pre_default", off.e_pre_default),
        ("e_chi", off.e_chi),
        ("e_delta", off.e_delta),
        ("p_window", off.p_window),
        ("cva_initial", off.cva_initial),
    ] {
        t.row(format_args!("{name},{v}"))?;
        println!("{name:>14} = {v:.10e}");
    }
    t.close()
}
