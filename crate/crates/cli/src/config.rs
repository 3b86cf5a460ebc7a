//! TOML experiment configuration. Every field has a default, so an empty file
//! (or no file) describes the reference CVA-VaR problem.

use anyhow::{bail, Context, Result};
use hmlmc::cva::{CreditModel, CvaProblem, LossVariant, OracleConfig, Portfolio, VarConfig};
use hmlmc::driver::{BayesianConfig, DriverConfig};
use hmlmc::inner::InnerConfig;
use hmlmc::outer::{AdaptiveConfig, RefinementMode};
use serde::Deserialize;
use std::path::Path;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub portfolio: PortfolioSection,
    pub credit: CreditSection,
    pub loss: LossSection,
    pub inner: InnerSection,
    pub outer: OuterSection,
    pub driver: DriverSection,
    pub experiment: ExperimentSection,
    pub oracle: OracleSection,
    pub var: VarSection,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioSection {
    pub spot: f64,
    pub drift: f64,
    pub vol: f64,
    pub rate: f64,
    pub maturity: f64,
    pub strikes: [f64; 2],
    /// Value at time 0; weights then follow from delta neutrality.
    pub value: f64,
}

impl Default for PortfolioSection {
    fn default() -> Self {
        PortfolioSection {
            spot: 1.0,
            drift: 0.1,
            vol: 0.1,
            rate: 0.01,
            maturity: 1.0,
            strikes: hmlmc::cva::DEFAULT_STRIKES,
            value: hmlmc::cva::DEFAULT_VALUE,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CreditSection {
    pub c0: f64,
    /// Relative spread volatility; defaults to 0.008/c0.
    pub sigma_cs: Option<f64>,
    pub lgd: f64,
    pub horizon_days: f64,
}

impl Default for CreditSection {
    fn default() -> Self {
        CreditSection { c0: 0.05, sigma_cs: None, lgd: 0.6, horizon_days: 10.0 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub threshold: f64,
    pub variant: String,
    /// Inclusive middle-level range of the delta control variate; empty disables it.
    pub cv_levels: Vec<u32>,
    pub offline_accuracy: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { threshold: 5e-4, variant: "III".into(), cv_levels: vec![0, 2], offline_accuracy: 1e-7 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InnerSection {
    pub inner_zeta: f64,
    pub middle_zeta: f64,
    pub batch_base: usize,
    pub max_level: u32,
    pub allow_limit_zeta: bool,
}

impl Default for InnerSection {
    fn default() -> Self {
        let d = InnerConfig::default();
        InnerSection {
            inner_zeta: d.inner_zeta,
            middle_zeta: d.middle_zeta,
            batch_base: d.inner_batch_base,
            max_level: d.max_level.unwrap_or(30),
            allow_limit_zeta: d.allow_limit_zeta,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OuterSection {
    pub mode: String,
    pub r: f64,
    pub c: f64,
    pub base_samples: usize,
}

impl Default for OuterSection {
    fn default() -> Self {
        OuterSection { mode: "adaptive".into(), r: 1.95, c: 1.0, base_samples: 8 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DriverSection {
    pub theta: f64,
    pub warmup_samples: u64,
    pub warmup_levels: u32,
    pub min_start_level: u32,
    pub max_level: u32,
    pub batch: u64,
    pub bayes_k: f64,
    pub bayes_j: f64,
}

impl Default for DriverSection {
    fn default() -> Self {
        let d = DriverConfig::default();
        DriverSection {
            theta: d.theta,
            warmup_samples: d.warmup_samples,
            warmup_levels: d.warmup_levels,
            min_start_level: d.min_start_level,
            max_level: d.max_level,
            batch: d.batch,
            bayes_k: d.bayes.k,
            bayes_j: d.bayes.j,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub tol: f64,
    /// Sorted descending.
    pub tols: Vec<f64>,
    pub levels: Vec<u32>,
    pub samples: u64,
    /// Reported tolerances are also divided by this (the reference `η`).
    pub normalization: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seed: 1,
            tol: 2e-3,
            tols: vec![3.2e-2, 1.9e-2, 1.14e-2, 6.8e-3, 4e-3],
            levels: (2..=7).collect(),
            samples: 10_000,
            normalization: hmlmc::cva::REFERENCE_ETA,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub outer: u64,
    pub middle: u64,
    pub inner: u64,
    pub steps_middle: usize,
    pub steps_inner: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { outer: 10_000, middle: 64, inner: 64, steps_middle: 8, steps_inner: 16 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VarSection {
    pub eta: f64,
    pub bracket: [f64; 2],
    pub eta_tol: f64,
    pub lambda_tol: f64,
    pub max_iter: u32,
}

impl Default for VarSection {
    fn default() -> Self {
        VarSection { eta: 0.02, bracket: [0.0, 2e-3], eta_tol: 3e-3, lambda_tol: 2e-5, max_iter: 30 }
    }
}

/// Estimator mode selected by `--mode` or `outer.mode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Adaptive,
    Fixed(u32),
    Oracle,
}

impl std::str::FromStr for Mode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "adaptive" => Mode::Adaptive,
            "oracle" => Mode::Oracle,
            "fixed" | "fixed_gamma1" => Mode::Fixed(1),
            "fixed_gamma2" => Mode::Fixed(2),
            other => match other.strip_prefix("fixed_gamma").and_then(|g| g.parse().ok()) {
                Some(g) if g > 0 => Mode::Fixed(g),
                _ => bail!("unknown mode {other:?}; expected adaptive, fixed_gamma1, fixed_gamma2 or oracle"),
            },
        })
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.tols.iter().any(|t| !(*t > 0.0)) || !(e.tol > 0.0) {
            bail!("tolerances must be positive");
        }
        if e.tols.windows(2).any(|w| w[0] <= w[1]) {
            bail!("experiment.tols must be sorted in strictly descending order");
        }
        if !(e.normalization > 0.0) {
            bail!("experiment.normalization must be positive");
        }
        if !matches!(self.loss.cv_levels.len(), 0 | 2) {
            bail!("loss.cv_levels must be empty or [low, high]");
        }
        self.outer.mode.parse::<Mode>()?;
        self.loss.variant.parse::<LossVariant>()?;
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.outer.mode.parse().expect("validated")
    }

    pub fn portfolio(&self) -> Result<Portfolio> {
        let p = &self.portfolio;
        Ok(Portfolio::delta_neutral(
            p.strikes[0],
            p.strikes[1],
            p.value,
            p.spot,
            p.rate,
            p.vol,
            p.drift,
            p.maturity,
        )?)
    }

    pub fn credit(&self) -> CreditModel {
        let c = &self.credit;
        CreditModel {
            c0: c.c0,
            sigma_cs: c.sigma_cs.unwrap_or(0.008 / c.c0),
            lgd: c.lgd,
            horizon: c.horizon_days / 365.0,
        }
    }

    pub fn inner(&self) -> InnerConfig {
        let i = &self.inner;
        InnerConfig {
            inner_zeta: i.inner_zeta,
            middle_zeta: i.middle_zeta,
            inner_batch_base: i.batch_base,
            max_level: Some(i.max_level),
            allow_limit_zeta: i.allow_limit_zeta,
            ..InnerConfig::default()
        }
    }

    pub fn adaptive(&self, mode: Mode) -> AdaptiveConfig {
        let o = &self.outer;
        let mode = match mode {
            Mode::Fixed(gamma) => RefinementMode::Fixed { gamma },
            _ => RefinementMode::Adaptive,
        };
        AdaptiveConfig { r: o.r, c: o.c, base_samples: o.base_samples, mode }
    }

    pub fn driver(&self, mode: Mode) -> DriverConfig {
        let d = &self.driver;
        DriverConfig {
            adaptive: self.adaptive(mode),
            bayes: BayesianConfig { k: d.bayes_k, j: d.bayes_j, ..BayesianConfig::default() },
            theta: d.theta,
            warmup_samples: d.warmup_samples,
            warmup_levels: d.warmup_levels,
            min_start_level: d.min_start_level,
            max_level: d.max_level,
            batch: d.batch,
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        let o = &self.oracle;
        OracleConfig {
            outer: o.outer,
            middle: o.middle,
            inner: o.inner,
            steps_middle: o.steps_middle,
            steps_inner: o.steps_inner,
        }
    }

    pub fn var(&self) -> VarConfig {
        VarConfig { eta_tol: self.var.eta_tol, lambda_tol: self.var.lambda_tol, max_iter: self.var.max_iter }
    }

    /// Builds the problem, computing the offline terms.
    pub fn problem(&self) -> Result<CvaProblem> {
        let portfolio = self.portfolio()?;
        let credit = self.credit();
        let offline = hmlmc::cva::offline_precompute(&portfolio, &credit, self.loss.offline_accuracy)?;
        let cv = match self.loss.cv_levels[..] {
            [lo, hi] => Some((lo, hi)),
            _ => None,
        };
        Ok(CvaProblem::new(
            portfolio,
            credit,
            offline,
            self.loss.threshold,
            self.loss.variant.parse()?,
            cv,
            self.inner(),
        )?)
    }
}
