//! One-dimensional SDE simulation with the Milstein scheme.
//!
//! Fine/coarse couplings never resample: a coarse increment is always the sum
//! of the two fine increments it covers, so both paths see the same Brownian
//! motion. The Black–Scholes closed forms at the bottom of this module exist
//! for reference values and offline quantities, not for the estimators.

use crate::error::{Error, Result};
use crate::rng::IncrementStream;
use statrs::function::erf::erfc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    Physical,
    RiskNeutral,
}

/// Drift `a(t, x)`, volatility `b(t, x)` and `∂b/∂x` of `dX = a dt + b dW`.
pub trait SdeModel: Sync {
    fn drift(&self, t: f64, x: f64) -> f64;
    fn volatility(&self, t: f64, x: f64) -> f64;
    fn volatility_derivative(&self, t: f64, x: f64) -> f64;
    fn measure(&self) -> Measure;
}

/// Geometric Brownian motion `dX = m X dt + σ X dW`, with `m = μ` under the
/// physical measure and `m = r` under the risk-neutral one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gbm {
    pub rate: f64,
    pub vol: f64,
    pub measure: Measure,
}

impl Gbm {
    pub fn physical(mu: f64, vol: f64) -> Self {
        Gbm { rate: mu, vol, measure: Measure::Physical }
    }

    pub fn risk_neutral(r: f64, vol: f64) -> Self {
        Gbm { rate: r, vol, measure: Measure::RiskNeutral }
    }
}

impl SdeModel for Gbm {
    #[inline]
    fn drift(&self, _t: f64, x: f64) -> f64 {
        self.rate * x
    }
    #[inline]
    fn volatility(&self, _t: f64, x: f64) -> f64 {
        self.vol * x
    }
    #[inline]
    fn volatility_derivative(&self, _t: f64, _x: f64) -> f64 {
        self.vol
    }
    fn measure(&self) -> Measure {
        self.measure
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    pub terminal_state: f64,
    /// Cost units: one per Milstein step.
    pub steps_taken: u64,
    pub intermediate_states: Option<Vec<(f64, f64)>>,
}

impl PathResult {
    fn terminal(x: f64, steps: usize) -> Self {
        PathResult { terminal_state: x, steps_taken: steps as u64, intermediate_states: None }
    }
}

/// One Milstein step from `(t, x)` with time step `h` and Brownian increment `dw`.
#[inline(always)]
pub fn milstein_step<M: SdeModel + ?Sized>(model: &M, t: f64, x: f64, h: f64, dw: f64) -> f64 {
    let b = model.volatility(t, x);
    x + model.drift(t, x) * h
        + b * dw
        + 0.5 * b * model.volatility_derivative(t, x) * (dw * dw - h)
}

fn check_interval(t_start: f64, t_end: f64, n_steps: usize, x0: f64) -> Result<()> {
    if !(t_end > t_start) {
        return Err(Error::InvalidParameter(format!(
            "t_end ({t_end}) must exceed t_start ({t_start})"
        )));
    }
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be positive".into()));
    }
    if !x0.is_finite() {
        return Err(Error::InvalidParameter("initial state must be finite".into()));
    }
    Ok(())
}

/// Evolves `x0` over `[t_start, t_start + h·dw.len()]` using the given
/// Brownian increments (already scaled by `√h`).
pub fn milstein_with_increments<M: SdeModel + ?Sized>(
    model: &M,
    t_start: f64,
    h: f64,
    x0: f64,
    dw: &[f64],
) -> Result<f64> {
    let mut x = x0;
    let mut t = t_start;
    for (step, &w) in dw.iter().enumerate() {
        x = milstein_step(model, t, x, h, w);
        if !x.is_finite() {
            return Err(Error::PathBlowUp { step });
        }
        t += h;
    }
    Ok(x)
}

/// Pairwise sums of fine increments: the Brownian increments of the path
/// with half as many steps.
pub fn coarsen_increments(fine: &[f64]) -> Vec<f64> {
    debug_assert!(fine.len() % 2 == 0);
    fine.chunks_exact(2).map(|p| p[0] + p[1]).collect()
}

fn draw_increments(n_steps: usize, h: f64, increments: &mut IncrementStream) -> Vec<f64> {
    let sqrt_h = h.sqrt();
    (0..n_steps).map(|_| sqrt_h * increments.normal()).collect()
}

pub fn milstein_evolve<M: SdeModel + ?Sized>(
    model: &M,
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    x0: f64,
    increments: &mut IncrementStream,
) -> Result<PathResult> {
    check_interval(t_start, t_end, n_steps, x0)?;
    let h = (t_end - t_start) / n_steps as f64;
    let dw = draw_increments(n_steps, h, increments);
    let x = milstein_with_increments(model, t_start, h, x0, &dw)?;
    Ok(PathResult::terminal(x, n_steps))
}

/// As [`milstein_evolve`] but records every `(time, state)` pair.
pub fn milstein_trajectory<M: SdeModel + ?Sized>(
    model: &M,
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    x0: f64,
    increments: &mut IncrementStream,
) -> Result<PathResult> {
    check_interval(t_start, t_end, n_steps, x0)?;
    let h = (t_end - t_start) / n_steps as f64;
    let sqrt_h = h.sqrt();
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = x0;
    states.push((t_start, x));
    for step in 0..n_steps {
        let t = t_start + step as f64 * h;
        x = milstein_step(model, t, x, h, sqrt_h * increments.normal());
        if !x.is_finite() {
            return Err(Error::PathBlowUp { step });
        }
        states.push((t_start + (step + 1) as f64 * h, x));
    }
    Ok(PathResult {
        terminal_state: x,
        steps_taken: n_steps as u64,
        intermediate_states: Some(states),
    })
}

/// Fine path with `n_fine` steps and coarse path with `n_fine / 2` steps on
/// the same Brownian motion.
pub fn coupled_evolve<M: SdeModel + ?Sized>(
    model: &M,
    t_start: f64,
    t_end: f64,
    n_fine: usize,
    x0: f64,
    increments: &mut IncrementStream,
) -> Result<(PathResult, PathResult)> {
    check_interval(t_start, t_end, n_fine, x0)?;
    if n_fine % 2 != 0 {
        return Err(Error::InvalidParameter("n_fine must be even".into()));
    }
    let h = (t_end - t_start) / n_fine as f64;
    let fine_dw = draw_increments(n_fine, h, increments);
    let coarse_dw = coarsen_increments(&fine_dw);
    let fine = milstein_with_increments(model, t_start, h, x0, &fine_dw)?;
    let coarse = milstein_with_increments(model, t_start, 2.0 * h, x0, &coarse_dw)?;
    Ok((PathResult::terminal(fine, n_fine), PathResult::terminal(coarse, n_fine / 2)))
}

/// Paths driven by `+W` and `-W`, consuming the same stream positions.
pub fn antithetic_pair_evolve<M: SdeModel + ?Sized>(
    model: &M,
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    x0: f64,
    increments: &mut IncrementStream,
) -> Result<(PathResult, PathResult)> {
    check_interval(t_start, t_end, n_steps, x0)?;
    let h = (t_end - t_start) / n_steps as f64;
    let dw = draw_increments(n_steps, h, increments);
    let plus = milstein_with_increments(model, t_start, h, x0, &dw)?;
    let neg: Vec<f64> = dw.iter().map(|w| -w).collect();
    let minus = milstein_with_increments(model, t_start, h, x0, &neg)?;
    Ok((PathResult::terminal(plus, n_steps), PathResult::terminal(minus, n_steps)))
}

/// Exact GBM transition: `x0·exp((m − σ²/2)t + σ√t·z)`.
pub fn lognormal_exact_sample(x0: f64, drift_rate: f64, vol: f64, t: f64, z: f64) -> f64 {
    x0 * ((drift_rate - 0.5 * vol * vol) * t + vol * t.sqrt() * z).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn d1_d2(spot: f64, strike: f64, rate: f64, vol: f64, tau: f64) -> (f64, f64) {
    let sd = vol * tau.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * tau) / sd;
    (d1, d1 - sd)
}

pub fn black_scholes_call(spot: f64, strike: f64, rate: f64, vol: f64, time_to_maturity: f64) -> f64 {
    let df = (-rate * time_to_maturity).exp();
    if time_to_maturity <= 0.0 || vol <= 0.0 {
        return (spot - strike * df).max(0.0);
    }
    let (d1, d2) = d1_d2(spot, strike, rate, vol, time_to_maturity);
    spot * normal_cdf(d1) - strike * df * normal_cdf(d2)
}

/// Call delta `N(d₁)`; a step function in the zero-volatility limit.
pub fn black_scholes_delta(spot: f64, strike: f64, rate: f64, vol: f64, time_to_maturity: f64) -> f64 {
    if time_to_maturity <= 0.0 || vol <= 0.0 {
        let df = (-rate * time_to_maturity.max(0.0)).exp();
        return if spot > strike * df { 1.0 } else { 0.0 };
    }
    let (d1, _) = d1_d2(spot, strike, rate, vol, time_to_maturity);
    normal_cdf(d1)
}
