//! Heaviside correction terms for the outer expectation.
//!
//! For one outer scenario, the middle expectation is estimated by averaging
//! i.i.d. draws of `Y` held in a [`SamplePool`]. At level `ℓ` the fine
//! estimate uses `M₀·2^{ℓ+η}` draws, where the refinement count `η` grows
//! while the sample mean is statistically close to zero (adaptive mode), or
//! `M₀·2^{γℓ}` draws in fixed mode. The coarse estimate at `ℓ − 1` reads a
//! prefix of the same pool.

use crate::error::{Error, Result};
use crate::inner::CorrectionSample;

pub fn heaviside(x: f64) -> u8 {
    u8::from(x >= 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RefinementMode {
    Adaptive,
    Fixed { gamma: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveConfig {
    pub r: f64,
    pub c: f64,
    pub base_samples: usize,
    pub mode: RefinementMode,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig { r: 1.95, c: 1.0, base_samples: 8, mode: RefinementMode::Adaptive }
    }
}

impl AdaptiveConfig {
    pub fn fixed(gamma: u32) -> Self {
        AdaptiveConfig { mode: RefinementMode::Fixed { gamma }, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 1.0) {
            return Err(Error::InvalidParameter(format!("refinement exponent r must exceed 1, got {}", self.r)));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidParameter(format!("confidence constant c must be positive, got {}", self.c)));
        }
        if self.base_samples < 2 {
            return Err(Error::InvalidParameter("base sample count must be at least 2".into()));
        }
        if let RefinementMode::Fixed { gamma } = self.mode {
            if gamma == 0 {
                return Err(Error::InvalidParameter("fixed-mode gamma must be positive".into()));
            }
        }
        Ok(())
    }

    /// Refinement threshold `c·2^{(ℓ(1−r)−η)/r}` on `|mean|/sd`.
    pub fn threshold(&self, level: u32, eta: u32) -> f64 {
        self.c * ((level as f64 * (1.0 - self.r) - eta as f64) / self.r).exp2()
    }
}

/// Draws of `Y` for one fixed outer scenario, addressed by index.
pub trait YSampler: Sync {
    fn sample(&self, index: u64) -> Result<CorrectionSample>;
}

impl<F> YSampler for F
where
    F: Fn(u64) -> Result<CorrectionSample> + Sync,
{
    fn sample(&self, index: u64) -> Result<CorrectionSample> {
        self(index)
    }
}

/// Growable pool of `Y` draws with O(1) prefix mean, sd and cost.
pub struct SamplePool<'a, S: YSampler + ?Sized> {
    sampler: &'a S,
    // running Welford state after each prefix length n = 1, 2, ...
    means: Vec<f64>,
    m2s: Vec<f64>,
    costs: Vec<u64>,
}

impl<'a, S: YSampler + ?Sized> SamplePool<'a, S> {
    pub fn new(sampler: &'a S) -> Self {
        SamplePool { sampler, means: Vec::new(), m2s: Vec::new(), costs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn ensure(&mut self, n: usize) -> Result<()> {
        self.means.reserve(n.saturating_sub(self.len()));
        while self.len() < n {
            let i = self.len();
            let s = self.sampler.sample(i as u64)?;
            let (mean, m2, cost) = match i {
                0 => (0.0, 0.0, 0),
                _ => (self.means[i - 1], self.m2s[i - 1], self.costs[i - 1]),
            };
            let delta = s.value - mean;
            let mean = mean + delta / (i + 1) as f64;
            self.means.push(mean);
            self.m2s.push(m2 + delta * (s.value - mean));
            self.costs.push(cost + s.cost_units);
        }
        Ok(())
    }

    /// Mean, sample sd and cumulative cost of the first `n` draws.
    pub fn prefix(&self, n: usize) -> (f64, f64, u64) {
        assert!(n >= 1 && n <= self.len(), "prefix {n} outside pool of {}", self.len());
        let sd = if n > 1 { (self.m2s[n - 1].max(0.0) / (n - 1) as f64).sqrt() } else { 0.0 };
        (self.means[n - 1], sd, self.costs[n - 1])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RefinedEstimate {
    pub mean: f64,
    pub sample_sd: f64,
    pub eta_refinements: u32,
    pub samples_used: usize,
    pub cost_units: u64,
}

/// `|mean|/sd`, infinite when the sd vanishes and the mean does not.
fn normalized_distance(mean: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        mean.abs() / sd
    } else if mean != 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

pub fn adaptive_refine<S: YSampler + ?Sized>(
    pool: &mut SamplePool<'_, S>,
    level: u32,
    cfg: &AdaptiveConfig,
) -> Result<RefinedEstimate> {
    let (mut n, adaptive) = match cfg.mode {
        RefinementMode::Adaptive => (cfg.base_samples << level, true),
        RefinementMode::Fixed { gamma } => (cfg.base_samples << (gamma * level), false),
    };
    let mut eta = 0;
    loop {
        pool.ensure(n)?;
        let (mean, sd, cost) = pool.prefix(n);
        if adaptive && eta < level && normalized_distance(mean, sd) < cfg.threshold(level, eta) {
            eta += 1;
            n *= 2;
            continue;
        }
        return Ok(RefinedEstimate {
            mean,
            sample_sd: sd,
            eta_refinements: eta,
            samples_used: n,
            cost_units: cost,
        });
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeavisideCorrection {
    pub value: i8,
    /// Cost of every pool draw consumed by fine and coarse.
    pub cost_units: u64,
    /// Cost of the fine estimate alone.
    pub fine_cost_units: u64,
    pub fine_sign: u8,
    pub coarse_sign: u8,
    pub fine: RefinedEstimate,
    pub coarse: Option<RefinedEstimate>,
}

/// `𝕳(E_{ℓ+η_ℓ}) − 𝕳(E_{ℓ−1+η_{ℓ−1}})` for one scenario, or the fine sign
/// alone at the start level.
pub fn heaviside_correction<S: YSampler + ?Sized>(
    sampler: &S,
    level: u32,
    start_level: u32,
    cfg: &AdaptiveConfig,
) -> Result<HeavisideCorrection> {
    if level < start_level {
        return Err(Error::InvalidParameter(format!("level {level} below start level {start_level}")));
    }
    let mut pool = SamplePool::new(sampler);
    let fine = adaptive_refine(&mut pool, level, cfg)?;
    let fine_sign = heaviside(fine.mean);
    let coarse = if level > start_level { Some(adaptive_refine(&mut pool, level - 1, cfg)?) } else { None };
    let coarse_sign = coarse.map_or(0, |c| heaviside(c.mean));
    let (_, _, cost) = pool.prefix(pool.len());
    Ok(HeavisideCorrection {
        value: fine_sign as i8 - coarse_sign as i8,
        cost_units: cost,
        fine_cost_units: fine.cost_units,
        fine_sign,
        coarse_sign,
        fine,
        coarse,
    })
}
