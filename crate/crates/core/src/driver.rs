//! Outer multilevel Monte Carlo over Heaviside corrections.
//!
//! Level statistics, Bayesian variance and bias estimates for `{−1, 0, 1}`
//! valued corrections, sample allocation, maximum- and start-level choice,
//! and the driver loop itself.
//!
//! Outer sample `m` at level `ℓ` is always generated from the key path
//! `(seed, ℓ, m)`, so extending a level with more samples, or evaluating it
//! on a different number of threads, never changes existing draws.

use crate::error::{Error, Result};
use crate::outer::{heaviside_correction, AdaptiveConfig, HeavisideCorrection, RefinementMode, YSampler};
use crate::rng::StreamKey;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// The outer problem: maps a scenario key to the sampler of `Y` for that scenario.
pub trait OuterProblem: Sync {
    fn scenario(&self, key: &StreamKey) -> Result<Box<dyn YSampler + '_>>;
}

/// Key of outer sample `index` at `level`.
pub fn outer_key(seed: u64, level: u32, index: u64) -> StreamKey {
    StreamKey::path(seed, &[u64::from(level), index])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelStats {
    pub count: u64,
    /// `Σx, Σx², Σx³, Σx⁴` of the correction values.
    pub sums: [f64; 4],
    pub cost_sum: u64,
    pub nu_plus: u64,
    pub nu_minus: u64,
    /// Samples whose fine sign alone was 1; the single-level estimator at this level.
    pub fine_ones: u64,
    pub fine_cost_sum: u64,
    pub eta_sum: u64,
}

impl LevelStats {
    pub fn push(&mut self, h: &HeavisideCorrection) {
        let x = f64::from(h.value);
        self.count += 1;
        self.sums[0] += x;
        self.sums[1] += x * x;
        self.sums[2] += x * x * x;
        self.sums[3] += x * x * x * x;
        self.cost_sum += h.cost_units;
        match h.value {
            1 => self.nu_plus += 1,
            -1 => self.nu_minus += 1,
            _ => {}
        }
        self.fine_ones += u64::from(h.fine_sign);
        self.fine_cost_sum += h.fine_cost_units;
        self.eta_sum += u64::from(h.fine.eta_refinements);
    }

    pub fn merge(&self, other: &LevelStats) -> LevelStats {
        let mut sums = self.sums;
        for (s, o) in sums.iter_mut().zip(other.sums) {
            *s += o;
        }
        LevelStats {
            count: self.count + other.count,
            sums,
            cost_sum: self.cost_sum + other.cost_sum,
            nu_plus: self.nu_plus + other.nu_plus,
            nu_minus: self.nu_minus + other.nu_minus,
            fine_ones: self.fine_ones + other.fine_ones,
            fine_cost_sum: self.fine_cost_sum + other.fine_cost_sum,
            eta_sum: self.eta_sum + other.eta_sum,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sums[0] / self.count as f64
    }

    pub fn second_moment(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sums[1] / self.count as f64
    }

    /// Empirical (biased) variance of the corrections.
    pub fn variance(&self) -> f64 {
        (self.second_moment() - self.mean().powi(2)).max(0.0)
    }

    /// Raw fourth central moment over the squared variance; NaN when the variance is 0.
    pub fn kurtosis(&self) -> f64 {
        let n = self.count as f64;
        let m = self.mean();
        let (s1, s2, s3, s4) = (self.sums[0] / n, self.sums[1] / n, self.sums[2] / n, self.sums[3] / n);
        let c4 = s4 - 4.0 * m * s3 + 6.0 * m * m * s2 - 3.0 * m.powi(3) * s1;
        let var = self.variance();
        if var > 0.0 {
            c4 / (var * var)
        } else {
            f64::NAN
        }
    }

    pub fn mean_cost(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.cost_sum as f64 / self.count as f64
    }

    pub fn fine_mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.fine_ones as f64 / self.count as f64
    }

    pub fn fine_mean_cost(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.fine_cost_sum as f64 / self.count as f64
    }

    /// Variance of the fine sign with a uniform prior on its probability.
    pub fn fine_variance(&self) -> f64 {
        let p = (self.fine_ones as f64 + 1.0) / (self.count as f64 + 2.0);
        p * (1.0 - p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BayesianConfig {
    pub k: f64,
    pub j: f64,
    pub a0: f64,
    pub beta: f64,
    pub e0: f64,
    pub alpha: f64,
}

impl Default for BayesianConfig {
    fn default() -> Self {
        BayesianConfig { k: 1.0, j: 1.0, a0: 0.5, beta: 1.0, e0: 0.5, alpha: 1.0 }
    }
}

impl BayesianConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1.0 && self.j >= 1.0) {
            return Err(Error::InvalidParameter("prior strengths k, j must be at least 1".into()));
        }
        if !(self.a0 > 0.0 && self.a0 < 1.0 && self.e0 > 0.0 && self.e0 < 1.0) {
            return Err(Error::InvalidParameter("rate constants a0, e0 must lie in (0, 1)".into()));
        }
        if !(self.beta > 0.0 && self.alpha > 0.0) {
            return Err(Error::InvalidParameter("rates alpha, beta must be positive".into()));
        }
        Ok(())
    }
}

/// A Bayesian point estimate; `clamped` is set when the prior pseudo-count
/// went negative and was clamped to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub value: f64,
    pub clamped: bool,
}

pub fn bayes_variance(stats: &LevelStats, cfg: &BayesianConfig, level: u32) -> Posterior {
    let raw = 2.0 * cfg.k * ((cfg.beta * level as f64).exp2() / cfg.a0 - 1.0);
    let c = raw.max(0.0);
    let num = (stats.nu_plus + stats.nu_minus) as f64 + 2.0 * cfg.k;
    let den = stats.count as f64 + 2.0 * cfg.k + c - 1.0;
    Posterior { value: (num / den.max(1.0)).min(1.0), clamped: raw < 0.0 }
}

pub fn bayes_bias(stats: &LevelStats, cfg: &BayesianConfig, level: u32) -> Posterior {
    let raw = cfg.j * ((cfg.alpha * level as f64).exp2() / cfg.e0 - 1.0) - 2.0;
    let d = raw.max(0.0);
    let num = stats.nu_plus.abs_diff(stats.nu_minus) as f64 + cfg.j;
    let den = stats.count as f64 + cfg.j + d - 1.0;
    Posterior { value: (num / den.max(1.0)).min(1.0), clamped: raw < 0.0 }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub a0: f64,
    pub beta: f64,
    pub e0: f64,
    pub alpha: f64,
    /// Set when some constant fell back to its theoretical value.
    pub fallback: bool,
}

/// Theoretical variance rate: `β = 1` adaptive, `γ/2` fixed.
pub fn theoretical_beta(mode: RefinementMode) -> f64 {
    match mode {
        RefinementMode::Adaptive => 1.0,
        RefinementMode::Fixed { gamma } => f64::from(gamma) / 2.0,
    }
}

fn log2_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Least-squares fit of `log₂ V_ℓ ≈ log₂ a₀ − βℓ` and `log₂ E_ℓ ≈ log₂ e₀ − αℓ`
/// over the given correction levels. `V_ℓ` is the second moment `(ν⁺+ν⁻)/M`
/// and `E_ℓ = |ν⁺−ν⁻|/M`.
pub fn fit_rate_constants(levels: &[(u32, LevelStats)], mode: RefinementMode) -> RateFit {
    let theory = theoretical_beta(mode);
    let points = |f: &dyn Fn(&LevelStats) -> f64| -> Vec<(f64, f64)> {
        levels
            .iter()
            .filter(|(_, s)| s.count > 0)
            .map(|(l, s)| (f64::from(*l), f(s)))
            .filter(|(_, v)| *v > 0.0)
            .map(|(l, v)| (l, v.log2()))
            .collect()
    };
    let v_points = points(&|s| (s.nu_plus + s.nu_minus) as f64 / s.count as f64);
    let e_points = points(&|s| s.nu_plus.abs_diff(s.nu_minus) as f64 / s.count as f64);

    let mut fallback = false;
    let (a0, beta) = match log2_fit(&v_points) {
        Some((c, slope)) if slope < 0.0 && c.is_finite() => (c.exp2(), -slope),
        _ => {
            fallback = true;
            (0.5, theory)
        }
    };
    let (e0, alpha) = match log2_fit(&e_points) {
        Some((c, slope)) if slope < 0.0 && c.is_finite() => (c.exp2(), -slope),
        _ => {
            fallback = true;
            (0.5, beta)
        }
    };
    let clamp = |x: f64| x.clamp(1e-6, 0.999);
    RateFit { a0: clamp(a0), beta, e0: clamp(e0), alpha, fallback }
}

/// `M_ℓ = ⌈(θ tol²)⁻¹ √(V_ℓ/C_ℓ) Σ_j √(V_j C_j)⌉`.
pub fn allocate_samples(variances: &[f64], costs: &[f64], tol: f64, theta: f64) -> Vec<u64> {
    let total: f64 = variances.iter().zip(costs).map(|(v, c)| (v * c).sqrt()).sum();
    variances
        .iter()
        .zip(costs)
        .map(|(v, c)| ((v / c).sqrt() * total / (theta * tol * tol)).ceil() as u64)
        .collect()
}

/// Smallest `L` whose extrapolated remaining bias `Ê_L/(2^α − 1)` is at most
/// `√(1−θ)·tol`. `bias` holds `(ℓ, Ê_ℓ)` for the correction levels above the
/// start level in increasing order; beyond the last one `Ê` is extrapolated
/// with rate `α`. Returns `(L, capped)`.
pub fn choose_max_level(
    start_level: u32,
    bias: &[(u32, f64)],
    alpha: f64,
    tol: f64,
    theta: f64,
    max_level: u32,
) -> (u32, bool) {
    let target = (1.0 - theta).sqrt() * tol * (alpha.exp2() - 1.0);
    let floor = start_level + 1;
    for &(l, e) in bias {
        if l >= floor && e <= target {
            return (l.min(max_level), l > max_level);
        }
    }
    let (last_l, last_e) = match bias.last() {
        Some(&p) => p,
        None => return (floor.min(max_level), floor > max_level),
    };
    let mut l = last_l.max(floor);
    let mut e = last_e;
    while e > target && l < max_level {
        l += 1;
        e *= (-alpha).exp2();
    }
    (l, e > target)
}

/// Ratio of the cost of a two-level estimator on `(ℓ₀, ℓ₀+1)` to a single-level
/// estimator at `ℓ₀+1`.
pub fn start_level_ratio(v_start: f64, c_start: f64, v_corr: f64, c_corr: f64, v_next: f64, c_next: f64) -> f64 {
    ((v_start * c_start).sqrt() + (v_corr * c_corr).sqrt()).powi(2) / (v_next * c_next)
}

/// Advances `ℓ₀` from `first` while `R_{ℓ₀} > 1`. Returns `ℓ₀` and the
/// computed `(ℓ, R_ℓ)` values.
pub fn optimal_start_level(stats: &BTreeMap<u32, LevelStats>, first: u32) -> Result<(u32, Vec<(u32, f64)>)> {
    let mut l0 = first;
    let mut trace = Vec::new();
    loop {
        let cur = stats.get(&l0).filter(|s| s.count > 0).ok_or(Error::MissingStats(l0))?;
        let next = match stats.get(&(l0 + 1)).filter(|s| s.count > 0) {
            Some(n) => n,
            None if trace.is_empty() => return Err(Error::MissingStats(l0 + 1)),
            None => return Ok((l0, trace)),
        };
        let r = start_level_ratio(
            cur.fine_variance(),
            cur.fine_mean_cost().max(1.0),
            next.second_moment(),
            next.mean_cost().max(1.0),
            next.fine_variance(),
            next.fine_mean_cost().max(1.0),
        );
        trace.push((l0, r));
        if r > 1.0 {
            l0 += 1;
        } else {
            return Ok((l0, trace));
        }
    }
}

/// `R_ℓ` for every level whose successor also has statistics.
pub fn start_level_ratios(stats: &BTreeMap<u32, LevelStats>) -> Vec<(u32, f64)> {
    stats
        .iter()
        .filter(|(_, s)| s.count > 0)
        .filter_map(|(&l, cur)| {
            let next = stats.get(&(l + 1)).filter(|s| s.count > 0)?;
            let r = start_level_ratio(
                cur.fine_variance(),
                cur.fine_mean_cost().max(1.0),
                next.second_moment(),
                next.mean_cost().max(1.0),
                next.fine_variance(),
                next.fine_mean_cost().max(1.0),
            );
            Some((l, r))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverConfig {
    pub adaptive: AdaptiveConfig,
    pub bayes: BayesianConfig,
    pub theta: f64,
    pub warmup_samples: u64,
    /// Number of correction levels above the first used to fit the rates.
    pub warmup_levels: u32,
    pub min_start_level: u32,
    pub max_level: u32,
    /// Outer samples evaluated per parallel batch.
    pub batch: u64,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            adaptive: AdaptiveConfig::default(),
            bayes: BayesianConfig::default(),
            theta: 0.5,
            warmup_samples: 1000,
            warmup_levels: 3,
            min_start_level: 0,
            max_level: 12,
            batch: 4096,
        }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        self.adaptive.validate()?;
        self.bayes.validate()?;
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidParameter("theta must lie in (0, 1)".into()));
        }
        if self.warmup_levels < 2 || self.warmup_samples == 0 {
            return Err(Error::InvalidParameter("warm-up needs at least 2 levels and 1 sample".into()));
        }
        if self.max_level <= self.min_start_level + self.warmup_levels {
            return Err(Error::InvalidParameter("max_level must exceed the warm-up levels".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be positive".into()));
        }
        Ok(())
    }
}

/// One outer sample at `level`.
pub fn sample_correction<P: OuterProblem + ?Sized>(
    problem: &P,
    level: u32,
    start_level: u32,
    index: u64,
    cfg: &AdaptiveConfig,
    seed: u64,
) -> Result<HeavisideCorrection> {
    let sampler = problem.scenario(&outer_key(seed, level, index))?;
    heaviside_correction(sampler.as_ref(), level, start_level, cfg)
}

/// Statistics of outer samples `range` at `level`, evaluated in parallel and
/// reduced in index order. Corrections are always taken against `ℓ − 1`
/// (none at level 0); the fine sign is tracked alongside.
pub fn evaluate_level<P: OuterProblem + ?Sized>(
    problem: &P,
    level: u32,
    range: std::ops::Range<u64>,
    cfg: &AdaptiveConfig,
    seed: u64,
    batch: u64,
) -> Result<LevelStats> {
    let mut stats = LevelStats::default();
    let mut start = range.start;
    while start < range.end {
        let end = (start + batch.max(1)).min(range.end);
        let draws: Vec<Result<HeavisideCorrection>> = (start..end)
            .into_par_iter()
            .map(|i| sample_correction(problem, level, 0, i, cfg, seed))
            .collect();
        for d in draws {
            stats.push(&d?);
        }
        start = end;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSummary {
    pub level: u32,
    pub samples: u64,
    pub mean: f64,
    pub variance_hat: f64,
    pub bias_hat: f64,
    pub empirical_variance: f64,
    pub kurtosis: f64,
    pub mean_cost: f64,
    pub mean_eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub estimate: f64,
    /// `√(Σ V̂_ℓ/M_ℓ)` with the Bayesian variances.
    pub std_error: f64,
    pub levels: Vec<LevelSummary>,
    /// Cost of every sample in the final telescoping sum.
    pub total_cost: u64,
    /// Cost of warm-up samples at levels outside the final sum.
    pub warmup_cost: u64,
    pub tol: f64,
    pub start_level: u32,
    pub max_level: u32,
    pub rates: RateFit,
    pub start_ratios: Vec<(u32, f64)>,
    pub bias_target_met: bool,
}

struct Levels<'a, P: OuterProblem + ?Sized> {
    problem: &'a P,
    cfg: &'a DriverConfig,
    seed: u64,
    stats: BTreeMap<u32, LevelStats>,
}

impl<P: OuterProblem + ?Sized> Levels<'_, P> {
    fn extend_to(&mut self, level: u32, n: u64) -> Result<()> {
        let have = self.stats.get(&level).map_or(0, |s| s.count);
        if n > have {
            let add = evaluate_level(self.problem, level, have..n, &self.cfg.adaptive, self.seed, self.cfg.batch)?;
            let merged = self.stats.get(&level).copied().unwrap_or_default().merge(&add);
            self.stats.insert(level, merged);
        }
        Ok(())
    }

    fn get(&self, level: u32) -> LevelStats {
        self.stats.get(&level).copied().unwrap_or_default()
    }
}

pub fn mlmc_run<P: OuterProblem + ?Sized>(problem: &P, cfg: &DriverConfig, tol: f64, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let mut lv = Levels { problem, cfg, seed, stats: BTreeMap::new() };
    let first = cfg.min_start_level;

    // warm-up on the coarsest levels
    for l in first..=first + cfg.warmup_levels {
        lv.extend_to(l, cfg.warmup_samples)?;
    }

    // start level: advance while a two-level estimator beats a single level
    let mut start_ratios = Vec::new();
    let mut l0 = first;
    loop {
        lv.extend_to(l0 + 1, cfg.warmup_samples)?;
        let (chosen, trace) = optimal_start_level(&lv.stats, l0)?;
        for t in trace {
            if !start_ratios.iter().any(|&(l, _)| l == t.0) {
                start_ratios.push(t);
            }
        }
        if chosen == l0 || chosen + 1 >= cfg.max_level {
            l0 = chosen.min(cfg.max_level - 1);
            break;
        }
        l0 = chosen;
    }

    // rate constants from the corrections just above the start level
    let fit_top = (l0 + cfg.warmup_levels).min(cfg.max_level);
    for l in l0 + 1..=fit_top {
        lv.extend_to(l, cfg.warmup_samples)?;
    }
    let fit_levels: Vec<(u32, LevelStats)> = (l0 + 1..=fit_top).map(|l| (l, lv.get(l))).collect();
    let rates = fit_rate_constants(&fit_levels, cfg.adaptive.mode);
    let bayes = BayesianConfig { a0: rates.a0, beta: rates.beta, e0: rates.e0, alpha: rates.alpha, ..cfg.bayes };

    let cost_growth = match cfg.adaptive.mode {
        RefinementMode::Adaptive => 2.0,
        RefinementMode::Fixed { gamma } => f64::from(gamma).exp2(),
    };
    let mut big_l = l0 + 1;
    let mut bias_met = false;
    for _ in 0..1000 {
        let levels: Vec<u32> = (l0..=big_l).collect();
        let mut vars = Vec::with_capacity(levels.len());
        let mut costs = Vec::with_capacity(levels.len());
        for &l in &levels {
            let s = lv.get(l);
            if l == l0 {
                vars.push(s.fine_variance());
                costs.push(s.fine_mean_cost().max(1.0));
            } else {
                vars.push(bayes_variance(&s, &bayes, l).value);
                let c = if s.count > 0 { s.mean_cost() } else { costs.last().copied().unwrap_or(1.0) * cost_growth };
                costs.push(c.max(1.0));
            }
        }
        let alloc = allocate_samples(&vars, &costs, tol, cfg.theta);
        let mut grew = false;
        for (&l, &m) in levels.iter().zip(&alloc) {
            if m > lv.get(l).count {
                lv.extend_to(l, m)?;
                grew = true;
            }
        }
        let bias: Vec<(u32, f64)> =
            levels.iter().filter(|&&l| l > l0).map(|&l| (l, bayes_bias(&lv.get(l), &bayes, l).value)).collect();
        let (want, capped) = choose_max_level(l0, &bias, bayes.alpha, tol, cfg.theta, cfg.max_level);
        bias_met = !capped;
        if want > big_l {
            big_l = want;
            continue;
        }
        if !grew {
            break;
        }
    }

    let mut levels = Vec::new();
    let mut estimate = 0.0;
    let mut var_sum = 0.0;
    let mut total_cost = 0;
    for l in l0..=big_l {
        let s = lv.get(l);
        let (mean, v_hat, mean_cost, emp_var) = if l == l0 {
            let p = s.fine_mean();
            (p, s.fine_variance(), s.fine_mean_cost(), p * (1.0 - p))
        } else {
            (s.mean(), bayes_variance(&s, &bayes, l).value, s.mean_cost(), s.variance())
        };
        estimate += mean;
        var_sum += v_hat / s.count.max(1) as f64;
        total_cost += if l == l0 { s.fine_cost_sum } else { s.cost_sum };
        levels.push(LevelSummary {
            level: l,
            samples: s.count,
            mean,
            variance_hat: v_hat,
            bias_hat: if l == l0 { f64::NAN } else { bayes_bias(&s, &bayes, l).value },
            empirical_variance: emp_var,
            kurtosis: s.kurtosis(),
            mean_cost,
            mean_eta: s.eta_sum as f64 / s.count.max(1) as f64,
        });
    }
    let warmup_cost = lv
        .stats
        .iter()
        .map(|(&l, s)| match l {
            l if l < l0 || l > big_l => s.cost_sum,
            l if l == l0 => s.cost_sum - s.fine_cost_sum,
            _ => 0,
        })
        .sum();
    Ok(RunResult {
        estimate,
        std_error: var_sum.sqrt(),
        levels,
        total_cost,
        warmup_cost,
        tol,
        start_level: l0,
        max_level: big_l,
        rates,
        start_ratios,
        bias_target_met: bias_met,
    })
}

/// `mlmc_run` for each tolerance; per-run errors are kept and the sweep continues.
pub fn complexity_sweep<P: OuterProblem + ?Sized>(
    problem: &P,
    tols: &[f64],
    cfg: &DriverConfig,
    seed: u64,
) -> Vec<(f64, Result<RunResult>)> {
    tols.iter().map(|&tol| (tol, mlmc_run(problem, cfg, tol, seed))).collect()
}

/// Per-level statistics for a fixed number of outer samples per level.
pub fn level_statistics<P: OuterProblem + ?Sized>(
    problem: &P,
    levels: &[u32],
    samples: u64,
    cfg: &AdaptiveConfig,
    seed: u64,
    batch: u64,
) -> Result<Vec<(u32, LevelStats)>> {
    levels
        .iter()
        .map(|&l| Ok((l, evaluate_level(problem, l, 0..samples, cfg, seed, batch)?)))
        .collect()
}
