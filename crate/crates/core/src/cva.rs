//! CVA-VaR problem: a GBM stock, a European portfolio, a flat-credit default
//! model with a lognormal spread shock at the risk horizon, and the loss
//! `Λ − L_η` in three variance-reduced forms.
//!
//! The middle stage simulates, for a default time `τ` drawn conditionally on
//! `H ≤ τ ≤ T`, the stock at `τ` started from the horizon scenario `s_H`
//! and (for the control variates) from `S₀` along `±W` up to `H`. The inner
//! stage values the portfolio at `τ` by simulation to `T`.

use crate::driver::{mlmc_run, DriverConfig, OuterProblem, RunResult};
use crate::error::{Error, Result};
use crate::inner::{
    randomized_middle_estimate, CorrectionSample, InnerConfig, InnerPayoff, LevelDistribution, LossSpec, LossTerm,
    MiddleDraw, NestedProblem,
};
use crate::outer::YSampler;
use crate::quad::{normal_expectation, sign_changes, Rule};
use crate::rng::{IncrementStream, StreamKey};
use crate::sde::{black_scholes_call, black_scholes_delta, lognormal_exact_sample, milstein_step, Gbm, SdeModel};
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct Portfolio {
    /// `(weight, strike)` of each European call.
    pub options: Vec<(f64, f64)>,
    pub maturity: f64,
    pub rate: f64,
    pub vol: f64,
    /// Physical drift `μ`.
    pub drift: f64,
    pub spot: f64,
}

impl Portfolio {
    pub fn validate(&self) -> Result<()> {
        if !(self.spot > 0.0 && self.maturity > 0.0 && self.vol >= 0.0) {
            return Err(Error::InvalidParameter("portfolio needs spot > 0, maturity > 0, vol >= 0".into()));
        }
        if self.options.iter().any(|&(w, k)| !(k > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("strikes must be positive and weights finite".into()));
        }
        Ok(())
    }

    pub fn payoff(&self, s: f64) -> f64 {
        self.options.iter().map(|&(w, k)| w * (s - k).max(0.0)).sum()
    }

    /// `Π'(s)`, with the right derivative at the strikes.
    pub fn payoff_slope(&self, s: f64) -> f64 {
        self.options.iter().filter(|&&(_, k)| s > k).map(|&(w, _)| w).sum()
    }

    /// `V_t(x) = E^Q[e^{−r(T−t)} Π(S_T) | S_t = x]`.
    pub fn value(&self, x: f64, t: f64) -> f64 {
        let ttm = self.maturity - t;
        self.options.iter().map(|&(w, k)| w * black_scholes_call(x, k, self.rate, self.vol, ttm)).sum()
    }

    pub fn delta(&self, x: f64, t: f64) -> f64 {
        let ttm = self.maturity - t;
        self.options.iter().map(|&(w, k)| w * black_scholes_delta(x, k, self.rate, self.vol, ttm)).sum()
    }

    /// Two calls at strikes `k0`, `k1` weighted to value `v0` at `t = 0` with zero delta.
    pub fn delta_neutral(
        k0: f64,
        k1: f64,
        v0: f64,
        spot: f64,
        rate: f64,
        vol: f64,
        drift: f64,
        maturity: f64,
    ) -> Result<Self> {
        let (w0, w1) = delta_neutral_weights(k0, k1, v0, spot, rate, vol, maturity)?;
        let p = Portfolio { options: vec![(w0, k0), (w1, k1)], maturity, rate, vol, drift, spot };
        p.validate()?;
        Ok(p)
    }
}

/// Solves `[price₀ price₁; delta₀ delta₁]·(c̃₀, c̃₁) = (v0, 0)`.
pub fn delta_neutral_weights(
    k0: f64,
    k1: f64,
    v0_target: f64,
    spot: f64,
    rate: f64,
    vol: f64,
    maturity: f64,
) -> Result<(f64, f64)> {
    let (p0, p1) = (black_scholes_call(spot, k0, rate, vol, maturity), black_scholes_call(spot, k1, rate, vol, maturity));
    let (d0, d1) = (black_scholes_delta(spot, k0, rate, vol, maturity), black_scholes_delta(spot, k1, rate, vol, maturity));
    let det = p0 * d1 - p1 * d0;
    let scale = (p0 * d1).abs().max((p1 * d0).abs());
    if !(det.abs() > 1e-12 * scale) {
        return Err(Error::DegenerateStrikes);
    }
    Ok((v0_target * d1 / det, -v0_target * d0 / det))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CreditModel {
    pub c0: f64,
    pub sigma_cs: f64,
    pub lgd: f64,
    /// Risk horizon `H` in years.
    pub horizon: f64,
}

impl Default for CreditModel {
    fn default() -> Self {
        CreditModel { c0: 0.05, sigma_cs: 0.008 / 0.05, lgd: 0.6, horizon: 10.0 / 365.0 }
    }
}

impl CreditModel {
    pub fn validate(&self, maturity: f64) -> Result<()> {
        if !(self.c0 > 0.0 && self.sigma_cs > 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidParameter("c0, sigma_cs and horizon must be positive".into()));
        }
        if !(self.lgd > 0.0 && self.lgd <= 1.0) {
            return Err(Error::InvalidParameter(format!("LGD must lie in (0, 1], got {}", self.lgd)));
        }
        if !(self.horizon < maturity) {
            return Err(Error::InvalidParameter("risk horizon must precede maturity".into()));
        }
        Ok(())
    }

    /// Default intensity `c₀/LGD` at time 0.
    pub fn intensity(&self) -> f64 {
        self.c0 / self.lgd
    }

    /// `p̃ = P(H ≤ τ ≤ T)`.
    pub fn window_probability(&self, maturity: f64) -> f64 {
        let k = self.intensity();
        (-k * self.horizon).exp() - (-k * maturity).exp()
    }
}

/// Inverse-CDF draw of `τ` given `H ≤ τ ≤ T`; `u = 0` gives `H`, `u = 1` gives `T`.
pub fn sample_default_conditional(credit: &CreditModel, maturity: f64, u: f64) -> f64 {
    let k = credit.intensity();
    let a = (-k * credit.horizon).exp();
    let b = (-k * maturity).exp();
    let tau = -(a - u * (a - b)).ln() / k;
    tau.clamp(credit.horizon, maturity)
}

/// `g_τ(c_H)·e^{c_H H/LGD}` with `g_t(x) = x e^{−(x−c₀)t/LGD}/c₀`.
pub fn g_factor(credit: &CreditModel, c_h: f64, tau: f64) -> f64 {
    c_h / credit.c0 * (-(c_h - credit.c0) * tau / credit.lgd).exp() * (c_h * credit.horizon / credit.lgd).exp()
}

/// Which control variates enter the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossVariant {
    /// `Λ^I`: change of measure on `τ` only.
    Basic,
    /// `Λ^II`: adds the linearised credit control variate.
    CreditCv,
    /// `Λ^III`: adds antithetic pre-horizon paths and the delta control variate.
    Full,
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" | "basic" => Ok(LossVariant::Basic),
            "II" | "2" | "credit" => Ok(LossVariant::CreditCv),
            "III" | "3" | "full" => Ok(LossVariant::Full),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Basic => "I",
            LossVariant::CreditCv => "II",
            LossVariant::Full => "III",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskScenario {
    pub s_h: f64,
    pub c_h: f64,
    /// Threshold adjusted for the loss variant in use.
    pub threshold: f64,
}

/// Expectations independent of the horizon scenario. The control-variate
/// terms are restricted to defaults in `[H, T]`, matching the window the
/// loss is sampled on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OfflineTerms {
    /// `E^Q[1{τ<H} U_τ(S_τ)]`
    pub e_pre_default: f64,
    /// `E^Q[1{H≤τ≤T} χ_τ(S_τ)]`
    pub e_chi: f64,
    /// `E^Q[1{H≤τ≤T} ∇_{S₀}U_τ(S_τ)]`
    pub e_delta: f64,
    pub p_window: f64,
    /// `CVA₀ = E^Q[U_τ(S_τ)]`
    pub cva_initial: f64,
}

pub fn threshold_adjust(
    l_eta: f64,
    s_h: f64,
    c_h: f64,
    offline: &OfflineTerms,
    credit: &CreditModel,
    spot: f64,
    variant: LossVariant,
) -> f64 {
    let l1 = l_eta + offline.e_pre_default;
    if variant == LossVariant::Basic {
        return l1;
    }
    let l2 = l1 - (c_h - credit.c0) * offline.e_chi;
    if variant == LossVariant::CreditCv {
        return l2;
    }
    l2 - (s_h - spot) * offline.e_delta
}

pub fn sample_risk_scenario(
    portfolio: &Portfolio,
    credit: &CreditModel,
    offline: &OfflineTerms,
    l_eta: f64,
    variant: LossVariant,
    z_s: f64,
    z_c: f64,
) -> RiskScenario {
    let h = credit.horizon;
    let s_h = lognormal_exact_sample(portfolio.spot, portfolio.drift, portfolio.vol, h, z_s);
    let c_h = lognormal_exact_sample(credit.c0, 0.0, credit.sigma_cs, h, z_c);
    let threshold = threshold_adjust(l_eta, s_h, c_h, offline, credit, portfolio.spot, variant);
    RiskScenario { s_h, c_h, threshold }
}

/// `(E[V_τ(S_τ)⁺], E[1{V_τ>0} V_τ'(S_τ) S_τ/S₀])` with `S_τ` the risk-neutral
/// stock at `τ` started from `S₀`.
fn exposure_moments(p: &Portfolio, tau: f64, rule: &Rule) -> (f64, f64) {
    if tau <= 0.0 || p.vol == 0.0 {
        let x = p.spot * (p.rate * tau).exp();
        let v = p.value(x, tau);
        return if v > 0.0 { (v, p.delta(x, tau) * x / p.spot) } else { (0.0, 0.0) };
    }
    let x = |z: f64| lognormal_exact_sample(p.spot, p.rate, p.vol, tau, z);
    let roots = sign_changes(|z| p.value(x(z), tau), 360);
    let e = normal_expectation(rule, &roots, |z| p.value(x(z), tau).max(0.0));
    let d = normal_expectation(rule, &roots, |z| {
        let s = x(z);
        if p.value(s, tau) > 0.0 {
            p.delta(s, tau) * s / p.spot
        } else {
            0.0
        }
    });
    (e, d)
}

fn offline_at(p: &Portfolio, credit: &CreditModel, n: usize) -> [f64; 4] {
    let rule = Rule::new(n);
    let k = credit.intensity();
    let (h, t) = (credit.horizon, p.maturity);
    let lgd = credit.lgd;
    let pre = rule.integrate(0.0, h, |tau| {
        let (e, _) = exposure_moments(p, tau, &rule);
        k * (-k * tau).exp() * lgd * (-p.rate * tau).exp() * e
    });
    // τ = T − (T−H)v² smooths the √(T−τ) behaviour at maturity
    let (mut chi, mut delta, mut window) = (0.0, 0.0, 0.0);
    let half = 0.5;
    let (nodes, weights) = crate::quad::gauss_legendre(n);
    for (x, w) in nodes.iter().zip(&weights) {
        let v = half * (x + 1.0);
        let tau = t - (t - h) * v * v;
        let jac = 2.0 * (t - h) * v * half * w;
        let (e, d) = exposure_moments(p, tau, &rule);
        let dens = k * (-k * tau).exp() * lgd * (-p.rate * tau).exp() * jac;
        chi += dens * (1.0 / credit.c0 - tau / lgd) * e;
        delta += dens * d;
        window += dens * e;
    }
    [pre, chi, delta, pre + window]
}

/// Offline terms by Gauss–Legendre quadrature over `τ` of Black–Scholes
/// exposures, doubling the rule until two successive results agree to
/// relative accuracy `accuracy`.
pub fn offline_precompute(portfolio: &Portfolio, credit: &CreditModel, accuracy: f64) -> Result<OfflineTerms> {
    portfolio.validate()?;
    credit.validate(portfolio.maturity)?;
    if !(accuracy > 0.0) {
        return Err(Error::InvalidParameter("accuracy must be positive".into()));
    }
    let mut n = 16;
    let mut prev = offline_at(portfolio, credit, n);
    let mut achieved = f64::INFINITY;
    while n < 1024 {
        n *= 2;
        let cur = offline_at(portfolio, credit, n);
        let scale = cur.iter().map(|v| v.abs()).fold(0.0, f64::max);
        achieved = prev
            .iter()
            .zip(&cur)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12 * scale).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        prev = cur;
        if achieved <= accuracy {
            return Ok(OfflineTerms {
                e_pre_default: cur[0],
                e_chi: cur[1],
                e_delta: cur[2],
                p_window: credit.window_probability(portfolio.maturity),
                cva_initial: cur[3],
            });
        }
    }
    Err(Error::QuadratureNotConverged { achieved })
}

/// Layout of the inner-expectation slots: middle states `[S^{H,s_H}, S⁺, S⁻]`
/// (only the first two for `Λ^I`, `Λ^II`), each with the discounted payoff and,
/// for `Λ^III`, the pathwise delta integrand.
pub fn slot_layout(variant: LossVariant) -> (usize, usize) {
    match variant {
        LossVariant::Full => (3, 2),
        _ => (2, 1),
    }
}

/// `Λ^X p̃ − L^X` as a loss over the inner means. `include_delta` adds the
/// delta control variate together with its threshold compensation.
pub fn build_loss_spec(
    scenario: &RiskScenario,
    tau: f64,
    credit: &CreditModel,
    portfolio: &Portfolio,
    offline: &OfflineTerms,
    variant: LossVariant,
    include_delta: bool,
) -> Result<LossSpec> {
    let (lo, hi) = (credit.horizon, portfolio.maturity);
    if !(tau >= lo - 1e-12 && tau <= hi + 1e-12) {
        return Err(Error::DefaultOutsideWindow { tau, lower: lo, upper: hi });
    }
    let a = offline.p_window * credit.lgd * (-portfolio.rate * tau).exp();
    let g = g_factor(credit, scenario.c_h, tau);
    let kappa = (scenario.c_h - credit.c0) * (1.0 / credit.c0 - tau / credit.lgd);
    let pos = |coeff: f64, slot: usize| LossTerm::PositivePart { coeff, shift: 0.0, slot };
    let mut offset = -scenario.threshold;
    let terms = match variant {
        LossVariant::Basic => vec![pos(a * g, 0), pos(-a, 1)],
        LossVariant::CreditCv => vec![pos(a * g, 0), pos(-a * (1.0 + kappa), 1)],
        LossVariant::Full => {
            let mut t = vec![pos(a * g, 0), pos(-0.5 * a * (1.0 + kappa), 2), pos(-0.5 * a * (1.0 + kappa), 4)];
            let shift = scenario.s_h - portfolio.spot;
            if include_delta {
                let coeff = -0.5 * a * shift;
                t.push(LossTerm::Gated { coeff, gate: 2, value: 3 });
                t.push(LossTerm::Gated { coeff, gate: 4, value: 5 });
            } else {
                offset -= shift * offline.e_delta;
            }
            t
        }
    };
    Ok(LossSpec { terms, constant_offset: offset })
}

/// Discounted payoff `e^{−r(T−τ)}Π(S_T)` and, optionally, the pathwise delta
/// integrand `e^{−r(T−τ)}Π'(S_T)S_T/S₀`. The delta integrand is discontinuous
/// in `S_T`, so its randomized estimator would have unbounded variance; it is
/// taken on the one-step inner path instead, which is harmless because the
/// delta control variate telescopes out above its level range.
#[derive(Clone, Debug)]
pub struct CvaPayoff {
    pub portfolio: Portfolio,
    pub with_delta: bool,
}

impl InnerPayoff for CvaPayoff {
    fn components(&self) -> usize {
        1 + usize::from(self.with_delta)
    }

    fn eval(&self, tau: f64, x: f64, out: &mut [f64]) {
        let p = &self.portfolio;
        let df = (-p.rate * (p.maturity - tau)).exp();
        out[0] = df * p.payoff(x);
        if self.with_delta {
            out[1] = df * p.payoff_slope(x) * x / p.spot;
        }
    }

    fn randomized(&self, component: usize) -> bool {
        component == 0
    }
}

/// Advances `fine` (and `coarse`, with half the steps) over `[t0, t1]`;
/// state `i` is driven by `signs[i]·W`. Returns the steps taken.
#[allow(clippy::too_many_arguments)]
fn coupled_segment<M: SdeModel>(
    model: &M,
    t0: f64,
    t1: f64,
    n: usize,
    fine: &mut [f64],
    coarse: Option<&mut [f64]>,
    signs: &[f64],
    normals: &mut IncrementStream,
) -> Result<u64> {
    let h = (t1 - t0) / n as f64;
    let sq = h.sqrt();
    let mut t = t0;
    match coarse {
        None => {
            for step in 0..n {
                let dw = sq * normals.normal();
                for (x, s) in fine.iter_mut().zip(signs) {
                    *x = milstein_step(model, t, *x, h, s * dw);
                }
                if fine.iter().any(|x| !x.is_finite()) {
                    return Err(Error::PathBlowUp { step });
                }
                t += h;
            }
            Ok((n * fine.len()) as u64)
        }
        Some(coarse) => {
            debug_assert!(n % 2 == 0);
            for pair in 0..n / 2 {
                let dw1 = sq * normals.normal();
                let dw2 = sq * normals.normal();
                for ((x, c), s) in fine.iter_mut().zip(coarse.iter_mut()).zip(signs) {
                    let y = milstein_step(model, t, *x, h, s * dw1);
                    *x = milstein_step(model, t + h, y, h, s * dw2);
                    *c = milstein_step(model, t, *c, 2.0 * h, s * (dw1 + dw2));
                }
                if fine.iter().chain(coarse.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::PathBlowUp { step: 2 * pair + 1 });
                }
                t += 2.0 * h;
            }
            Ok((fine.len() * (n + n / 2)) as u64)
        }
    }
}

/// The full CVA-VaR problem for a fixed threshold.
#[derive(Clone, Debug)]
pub struct CvaProblem {
    pub portfolio: Portfolio,
    pub credit: CreditModel,
    pub offline: OfflineTerms,
    pub l_eta: f64,
    pub variant: LossVariant,
    /// Middle levels (inclusive) at which the delta control variate is used.
    pub cv_levels: Option<(u32, u32)>,
    pub inner: InnerConfig,
    q_model: Gbm,
    payoff: CvaPayoff,
}

impl CvaProblem {
    pub fn new(
        portfolio: Portfolio,
        credit: CreditModel,
        offline: OfflineTerms,
        l_eta: f64,
        variant: LossVariant,
        cv_levels: Option<(u32, u32)>,
        inner: InnerConfig,
    ) -> Result<Self> {
        portfolio.validate()?;
        credit.validate(portfolio.maturity)?;
        inner.validate()?;
        let q_model = Gbm::risk_neutral(portfolio.rate, portfolio.vol);
        let payoff = CvaPayoff { portfolio: portfolio.clone(), with_delta: variant == LossVariant::Full };
        Ok(CvaProblem { portfolio, credit, offline, l_eta, variant, cv_levels, inner, q_model, payoff })
    }

    pub fn with_threshold(&self, l_eta: f64) -> Self {
        CvaProblem { l_eta, ..self.clone() }
    }

    pub fn with_variant(&self, variant: LossVariant) -> Self {
        let payoff = CvaPayoff { portfolio: self.portfolio.clone(), with_delta: variant == LossVariant::Full };
        CvaProblem { variant, payoff, ..self.clone() }
    }

    pub fn risk_neutral_model(&self) -> &Gbm {
        &self.q_model
    }

    pub fn uses_delta_cv(&self, middle_level: u32) -> bool {
        self.variant == LossVariant::Full && self.cv_levels.is_some_and(|(lo, hi)| (lo..=hi).contains(&middle_level))
    }

    pub fn scenario_from_normals(&self, z_s: f64, z_c: f64) -> RiskScenario {
        sample_risk_scenario(&self.portfolio, &self.credit, &self.offline, self.l_eta, self.variant, z_s, z_c)
    }

    /// Scenario of the outer key: two normals from lane 0.
    pub fn scenario_for_key(&self, key: &StreamKey) -> RiskScenario {
        let mut s = key.stream(0);
        let z_s = s.normal();
        let z_c = s.normal();
        self.scenario_from_normals(z_s, z_c)
    }

    pub fn nested(&self, scenario: RiskScenario) -> ScenarioProblem<'_> {
        ScenarioProblem { cva: self, scenario }
    }

    /// Middle states at `τ` with `n` steps on each of `[0, H]` and `[H, τ]`.
    fn middle_states(
        &self,
        scenario: &RiskScenario,
        tau: f64,
        n: usize,
        coarse: bool,
        normals: &mut IncrementStream,
    ) -> Result<(Vec<f64>, Vec<f64>, u64)> {
        let (n_states, _) = slot_layout(self.variant);
        let signs = [1.0, 1.0, -1.0];
        let s0 = self.portfolio.spot;
        let h = self.credit.horizon;
        let mut fine = vec![scenario.s_h, s0, s0];
        let mut crs = fine.clone();
        fine.truncate(n_states);
        crs.truncate(n_states);
        let mut cost = coupled_segment(
            &self.q_model,
            0.0,
            h,
            n,
            &mut fine[1..],
            coarse.then_some(&mut crs[1..]),
            &signs[1..n_states],
            normals,
        )?;
        if tau > h {
            cost += coupled_segment(
                &self.q_model,
                h,
                tau,
                n,
                &mut fine,
                coarse.then_some(&mut crs[..]),
                &[1.0; 3][..n_states],
                normals,
            )?;
        }
        if !coarse {
            crs.clear();
        }
        Ok((fine, crs, cost))
    }

    fn loss(&self, scenario: &RiskScenario, tau: f64, include_delta: bool) -> Result<LossSpec> {
        build_loss_spec(scenario, tau, &self.credit, &self.portfolio, &self.offline, self.variant, include_delta)
    }
}

/// The middle/inner problem below one fixed horizon scenario.
pub struct ScenarioProblem<'a> {
    pub cva: &'a CvaProblem,
    pub scenario: RiskScenario,
}

impl NestedProblem for ScenarioProblem<'_> {
    type InnerModel = Gbm;
    type Payoff = CvaPayoff;

    fn inner_model(&self) -> &Gbm {
        &self.cva.q_model
    }

    fn payoff(&self) -> &CvaPayoff {
        &self.cva.payoff
    }

    fn maturity(&self) -> f64 {
        self.cva.portfolio.maturity
    }

    fn middle(&self, level: u32, scalars: &mut IncrementStream, normals: &mut IncrementStream) -> Result<MiddleDraw> {
        let c = self.cva;
        let tau = sample_default_conditional(&c.credit, c.portfolio.maturity, scalars.uniform());
        let (fine_states, coarse_states, cost) = c.middle_states(&self.scenario, tau, 1 << level, level > 0, normals)?;
        let fine_loss = c.loss(&self.scenario, tau, c.uses_delta_cv(level))?;
        let coarse_loss = if level > 0 { c.loss(&self.scenario, tau, c.uses_delta_cv(level - 1))? } else { fine_loss.clone() };
        Ok(MiddleDraw { t1: tau, fine_states, coarse_states, fine_loss, coarse_loss, cost_units: cost })
    }
}

/// Draws of `Y` for one scenario; draw `i` uses the key's child `i`.
pub struct ScenarioSampler<'a> {
    problem: ScenarioProblem<'a>,
    key: StreamKey,
    middle: LevelDistribution,
}

impl<'a> ScenarioSampler<'a> {
    pub fn new(cva: &'a CvaProblem, scenario: RiskScenario, key: StreamKey) -> Self {
        ScenarioSampler { problem: cva.nested(scenario), key, middle: cva.inner.middle_distribution() }
    }

    pub fn scenario(&self) -> RiskScenario {
        self.problem.scenario
    }
}

impl YSampler for ScenarioSampler<'_> {
    fn sample(&self, index: u64) -> Result<CorrectionSample> {
        let (s, _) = randomized_middle_estimate(&self.problem, &self.middle, &self.problem.cva.inner, &self.key.child(index))?;
        Ok(s)
    }
}

impl OuterProblem for CvaProblem {
    fn scenario(&self, key: &StreamKey) -> Result<Box<dyn YSampler + '_>> {
        Ok(Box::new(ScenarioSampler::new(self, self.scenario_for_key(key), *key)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    pub outer: u64,
    pub middle: u64,
    pub inner: u64,
    /// Milstein steps on each of `[0, H]` and `[H, τ]`.
    pub steps_middle: usize,
    pub steps_inner: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub cost_units: u64,
}

const ORACLE_SALT: u64 = 0x6f72_6163_6c65;

/// Plain triple-nested Monte Carlo for `η`: per outer scenario, the mean over
/// `middle` default/path draws of the loss evaluated at `inner`-sample
/// averages; delta control variates (variant `Λ^III`) are always included.
pub fn nested_mc_oracle(problem: &CvaProblem, cfg: &OracleConfig, seed: u64) -> Result<OracleEstimate> {
    if cfg.outer == 0 || cfg.middle == 0 || cfg.inner == 0 || cfg.steps_middle == 0 || cfg.steps_inner == 0 {
        return Err(Error::InvalidParameter("oracle counts must be at least 1".into()));
    }
    let (n_states, n_comp) = slot_layout(problem.variant);
    let t_end = problem.portfolio.maturity;
    let root = StreamKey::new(seed ^ ORACLE_SALT);
    let per_outer: Vec<Result<(f64, u64)>> = (0..cfg.outer)
        .into_par_iter()
        .map(|i| {
            let key = root.child(i);
            let scen = problem.scenario_for_key(&key);
            let mut acc = 0.0;
            let mut cost = 0u64;
            let mut sums = [0.0; 6];
            let mut out = [0.0; 6];
            for j in 0..cfg.middle {
                let mkey = key.child(j);
                let tau = sample_default_conditional(&problem.credit, t_end, mkey.stream(0).uniform());
                let mut normals = mkey.stream(1);
                let (states, _, c) = problem.middle_states(&scen, tau, cfg.steps_middle, false, &mut normals)?;
                cost += c;
                let mut inner = mkey.stream(2);
                sums.fill(0.0);
                for _ in 0..cfg.inner {
                    let mut x = [0.0; 3];
                    x[..n_states].copy_from_slice(&states);
                    if t_end > tau {
                        cost += coupled_segment(
                            &problem.q_model,
                            tau,
                            t_end,
                            cfg.steps_inner,
                            &mut x[..n_states],
                            None,
                            &[1.0; 3][..n_states],
                            &mut inner,
                        )?;
                    }
                    for (s, &xs) in x[..n_states].iter().enumerate() {
                        problem.payoff.eval(tau, xs, &mut out[s * n_comp..(s + 1) * n_comp]);
                    }
                    for (a, o) in sums.iter_mut().zip(&out).take(n_states * n_comp) {
                        *a += o;
                    }
                }
                for a in sums.iter_mut() {
                    *a /= cfg.inner as f64;
                }
                acc += problem.loss(&scen, tau, true)?.evaluate(&sums[..n_states * n_comp]);
            }
            Ok((f64::from(crate::outer::heaviside(acc / cfg.middle as f64)), cost))
        })
        .collect();
    let mut xs = Vec::with_capacity(per_outer.len());
    let mut cost = 0;
    for r in per_outer {
        let (x, c) = r?;
        xs.push(x);
        cost += c;
    }
    let (estimate, std_error) = jackknife_mean(&xs);
    Ok(OracleEstimate { estimate, std_error, cost_units: cost })
}

/// Mean and its jackknife standard error.
pub fn jackknife_mean(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let total: f64 = xs.iter().sum();
    let mean = total / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let loo_var: f64 = xs.iter().map(|x| ((total - x) / (n - 1.0) - mean).powi(2)).sum();
    (mean, ((n - 1.0) / n * loo_var).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarConfig {
    /// Tolerance on `η`; each evaluation of `F(λ)` runs MLMC at a third of it.
    pub eta_tol: f64,
    /// Stop once the bracket is narrower than this.
    pub lambda_tol: f64,
    pub max_iter: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarStep {
    pub low: f64,
    pub high: f64,
    pub lambda: f64,
    pub eta: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarResult {
    pub l_eta: f64,
    pub trace: Vec<VarStep>,
}

/// Bisection on `F(λ) = η̂(λ) − η_target`. Every evaluation reuses `seed`, so
/// all thresholds see the same scenarios.
pub fn var_root_find(
    problem: &CvaProblem,
    eta_target: f64,
    bracket: (f64, f64),
    cfg: &VarConfig,
    driver: &DriverConfig,
    seed: u64,
) -> Result<VarResult> {
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) {
        return Err(Error::InvalidParameter("bracket must satisfy low < high".into()));
    }
    if eta_target >= 1.0 {
        return Ok(VarResult { l_eta: lo, trace: Vec::new() });
    }
    let eval = |lambda: f64| -> Result<RunResult> { mlmc_run(&problem.with_threshold(lambda), driver, cfg.eta_tol / 3.0, seed) };
    let f_lo = eval(lo)?;
    let f_hi = eval(hi)?;
    if !(f_lo.estimate - eta_target > 3.0 * f_lo.std_error && eta_target - f_hi.estimate > 3.0 * f_hi.std_error) {
        return Err(Error::BracketNoSignChange { low: lo, high: hi });
    }
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iter {
        if hi - lo <= cfg.lambda_tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let r = eval(mid)?;
        if r.estimate >= eta_target {
            lo = mid;
        } else {
            hi = mid;
        }
        trace.push(VarStep { low: lo, high: hi, lambda: mid, eta: r.estimate, std_error: r.std_error });
    }
    Ok(VarResult { l_eta: 0.5 * (lo + hi), trace })
}

/// Strikes of the reference portfolio.
pub const DEFAULT_STRIKES: [f64; 2] = [0.875, 1.075];
/// Value at time 0 of the reference portfolio.
pub const DEFAULT_VALUE: f64 = 0.275;
/// `η` of the reference problem at `L_η = 5·10⁻⁴`, by deterministic quadrature.
pub const REFERENCE_ETA: f64 = 0.02006;

/// The reference portfolio: `S₀ = 1`, `μ = σ = 0.1`, `r = 1%`, `T = 1`, two
/// calls at [`DEFAULT_STRIKES`] worth [`DEFAULT_VALUE`] with zero delta.
pub fn default_portfolio() -> Portfolio {
    let [k0, k1] = DEFAULT_STRIKES;
    Portfolio::delta_neutral(k0, k1, DEFAULT_VALUE, 1.0, 0.01, 0.1, 0.1, 1.0).expect("distinct strikes")
}
