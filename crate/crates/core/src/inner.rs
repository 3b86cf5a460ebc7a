//! Randomised (unbiased) multilevel estimators for the two inner conditional
//! expectations.
//!
//! The innermost expectation `E[g(X_T) | X_t1]` is replaced by a single
//! Milstein level correction `Δ_k g` at a random level `k ~ p`, reweighted by
//! `1/p_k`. The middle expectation `E[f(E[g | X_t1]) | X_t0]` uses the
//! antithetic correction `Δ^ant_ℓ f`: one fine average over `M_ℓ` inner draws
//! against the mean of `f` over the two halves of the same draws, each half
//! evaluated at the coarse middle state. Drawing `ℓ ~ q` and dividing by
//! `q_ℓ` gives the random variable `Y` with `E[Y | X_t0]` equal to the middle
//! expectation.

use crate::error::{Error, Result};
use crate::rng::{IncrementStream, StreamKey};
use crate::sde::{milstein_step, SdeModel};
use std::ops::Range;

/// Lanes of a [`StreamKey`] used by one draw of `Y`.
pub mod lanes {
    /// Uniforms: middle level, problem scalars, then one per inner level draw.
    pub const SCALARS: u64 = 0;
    pub const MIDDLE: u64 = 1;
    pub const INNER: u64 = 2;
}

/// Geometric level distribution `p_k ∝ 2^{-ζk}`, optionally truncated at
/// `max_level` and renormalised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelDistribution {
    zeta: f64,
    max_level: Option<u32>,
    // total untruncated mass kept by the truncation
    mass: f64,
}

impl LevelDistribution {
    pub fn new(zeta: f64, max_level: Option<u32>) -> Result<Self> {
        if !(zeta > 0.0 && zeta.is_finite()) {
            return Err(Error::InvalidParameter(format!("level exponent must be positive, got {zeta}")));
        }
        let mass = match max_level {
            Some(cap) => 1.0 - (-zeta * (cap as f64 + 1.0)).exp2(),
            None => 1.0,
        };
        Ok(LevelDistribution { zeta, max_level, mass })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn max_level(&self) -> Option<u32> {
        self.max_level
    }

    pub fn pmf(&self, k: u32) -> f64 {
        if self.max_level.is_some_and(|cap| k > cap) {
            return 0.0;
        }
        (1.0 - (-self.zeta).exp2()) * (-self.zeta * k as f64).exp2() / self.mass
    }

    /// Inverse-transform sample for `u ∈ [0, 1)`.
    pub fn sample(&self, u: f64) -> u32 {
        // P(k >= n) = (2^{-ζn} - (1 - mass)) / mass
        let tail = 1.0 - u * self.mass;
        let k = (-tail.log2() / self.zeta).floor();
        let k = if k.is_finite() && k > 0.0 { k as u32 } else { 0 };
        match self.max_level {
            Some(cap) => k.min(cap),
            None => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerConfig {
    /// Cost exponent of the inner corrections; the schemes here assume 1.
    pub gamma: f64,
    pub inner_zeta: f64,
    pub middle_zeta: f64,
    /// `M₀`: the antithetic correction at middle level `ℓ` averages `M₀·2^ℓ` inner draws.
    pub inner_batch_base: usize,
    /// Truncation of both level distributions.
    pub max_level: Option<u32>,
    /// Permits `inner_zeta = 3/2`, the limiting case with only `3 − ε` moments.
    pub allow_limit_zeta: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            gamma: 1.0,
            inner_zeta: 1.4,
            middle_zeta: 1.25,
            inner_batch_base: 2,
            max_level: Some(30),
            allow_limit_zeta: false,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        let upper_ok = self.inner_zeta < 1.5 || (self.allow_limit_zeta && self.inner_zeta == 1.5);
        if !(self.inner_zeta > 1.0 && upper_ok) {
            return Err(Error::InvalidParameter(format!(
                "inner_zeta must lie in (1, 3/2), got {}",
                self.inner_zeta
            )));
        }
        if !(self.middle_zeta > 1.0 && self.middle_zeta < 1.5) {
            return Err(Error::InvalidParameter(format!(
                "middle_zeta must lie in (1, 3/2), got {}",
                self.middle_zeta
            )));
        }
        if self.inner_batch_base == 0 {
            return Err(Error::InvalidParameter("inner_batch_base must be positive".into()));
        }
        if self.gamma != 1.0 {
            return Err(Error::InvalidParameter("only gamma = 1 is supported".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self, level: u32) -> usize {
        self.inner_batch_base << level
    }

    pub fn inner_distribution(&self) -> LevelDistribution {
        LevelDistribution::new(self.inner_zeta, self.max_level).expect("validated exponent")
    }

    pub fn middle_distribution(&self) -> LevelDistribution {
        LevelDistribution::new(self.middle_zeta, self.max_level).expect("validated exponent")
    }
}

/// One multilevel correction draw and the Milstein steps it consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorrectionSample {
    pub value: f64,
    pub cost_units: u64,
}

/// A term of the piecewise-linear loss `f`, reading the inner means by slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossTerm {
    /// `coeff · max(0, x[slot] − shift)`
    PositivePart { coeff: f64, shift: f64, slot: usize },
    /// `coeff · 1{x[gate] > 0} · x[value]`; not Lipschitz, so only used on a
    /// fixed range of middle levels.
    Gated { coeff: f64, gate: usize, value: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
    pub constant_offset: f64,
}

impl LossSpec {
    pub fn constant(c: f64) -> Self {
        LossSpec { terms: Vec::new(), constant_offset: c }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.constant_offset, |acc, term| {
            acc + match *term {
                LossTerm::PositivePart { coeff, shift, slot } => coeff * (x[slot] - shift).max(0.0),
                LossTerm::Gated { coeff, gate, value } => {
                    if x[gate] > 0.0 {
                        coeff * x[value]
                    } else {
                        0.0
                    }
                }
            }
        })
    }

    /// `Σ|c_j|` over the positive-part terms; `None` if a gated term is present.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        self.terms.iter().try_fold(0.0, |acc, term| match *term {
            LossTerm::PositivePart { coeff, .. } => Some(acc + coeff.abs()),
            LossTerm::Gated { .. } => None,
        })
    }

    pub fn max_slot(&self) -> Option<usize> {
        self.terms
            .iter()
            .map(|t| match *t {
                LossTerm::PositivePart { slot, .. } => slot,
                LossTerm::Gated { gate, value, .. } => gate.max(value),
            })
            .max()
    }
}

/// Vector-valued payoff `g` evaluated at the end of the inner interval.
pub trait InnerPayoff: Sync {
    fn components(&self) -> usize;
    /// `t1` is the start of the inner interval; `x` the terminal state.
    fn eval(&self, t1: f64, x: f64, out: &mut [f64]);
    /// Components that are not randomized are estimated on the single-step
    /// path driven by the total increment, without level differences or
    /// weights. Their mean is then biased, so they may only enter terms that
    /// telescope away.
    fn randomized(&self, _component: usize) -> bool {
        true
    }
}

/// Scalar payoff from a closure.
pub struct FnPayoff<F>(pub F);

impl<F: Fn(f64) -> f64 + Sync> InnerPayoff for FnPayoff<F> {
    fn components(&self) -> usize {
        1
    }
    fn eval(&self, _t1: f64, x: f64, out: &mut [f64]) {
        out[0] = (self.0)(x);
    }
}

/// Maximum number of middle states times payoff components.
pub const MAX_SLOTS: usize = 16;

/// Level-`k` inner correction `g(X_T,k) − g(X_T,k−1)` for every start state,
/// all driven by the same Brownian path on `[t1, t_end]`. Level `k` uses
/// `2^k` steps; at `k = 0` only the fine term is used. Components that are
/// not [randomized](InnerPayoff::randomized) get `g` on the one-step path
/// instead. Results go to `out[state · components + component]`; returns the
/// steps taken.
pub fn inner_level_difference<M, G>(
    model: &M,
    payoff: &G,
    t1: f64,
    t_end: f64,
    states: &[f64],
    k: u32,
    normals: &mut IncrementStream,
    out: &mut [f64],
) -> Result<u64>
where
    M: SdeModel + ?Sized,
    G: InnerPayoff + ?Sized,
{
    let ns = states.len();
    let nc = payoff.components();
    debug_assert!(ns * nc <= out.len() && ns <= MAX_SLOTS);
    if !(t_end > t1) {
        return Err(Error::InvalidParameter(format!("inner interval [{t1}, {t_end}] is empty")));
    }
    let n_fine = 1usize << k;
    let h = (t_end - t1) / n_fine as f64;
    let sqrt_h = h.sqrt();
    let mut fine = [0.0f64; MAX_SLOTS];
    let mut coarse = [0.0f64; MAX_SLOTS];
    fine[..ns].copy_from_slice(states);
    coarse[..ns].copy_from_slice(states);

    if k == 0 {
        let dw = sqrt_h * normals.normal();
        for (s, x) in fine[..ns].iter_mut().enumerate() {
            *x = milstein_step(model, t1, *x, h, dw);
            if !x.is_finite() {
                return Err(Error::PathBlowUp { step: 0 });
            }
            payoff.eval(t1, *x, &mut out[s * nc..(s + 1) * nc]);
        }
        return Ok(ns as u64);
    }

    let mut t = t1;
    let mut w_total = 0.0;
    for pair in 0..n_fine / 2 {
        let dw1 = sqrt_h * normals.normal();
        let dw2 = sqrt_h * normals.normal();
        let dwc = dw1 + dw2;
        let mut finite = true;
        for s in 0..ns {
            let x = milstein_step(model, t, fine[s], h, dw1);
            fine[s] = milstein_step(model, t + h, x, h, dw2);
            coarse[s] = milstein_step(model, t, coarse[s], 2.0 * h, dwc);
            finite &= fine[s].is_finite() && coarse[s].is_finite();
        }
        if !finite {
            return Err(Error::PathBlowUp { step: 2 * pair + 1 });
        }
        w_total += dwc;
        t += 2.0 * h;
    }
    let fixed = (0..nc).any(|c| !payoff.randomized(c));
    let mut gc = [0.0f64; MAX_SLOTS];
    let mut g1 = [0.0f64; MAX_SLOTS];
    for s in 0..ns {
        let slot = &mut out[s * nc..(s + 1) * nc];
        payoff.eval(t1, fine[s], slot);
        payoff.eval(t1, coarse[s], &mut gc[..nc]);
        if fixed {
            let x1 = milstein_step(model, t1, states[s], t_end - t1, w_total);
            payoff.eval(t1, x1, &mut g1[..nc]);
        }
        for (c, (o, gcc)) in slot.iter_mut().zip(&gc[..nc]).enumerate() {
            if payoff.randomized(c) {
                *o -= gcc;
            } else {
                *o = g1[c];
            }
        }
    }
    let extra = if fixed { ns } else { 0 };
    Ok((ns * (n_fine + n_fine / 2) + extra) as u64)
}

/// `Δ_k g` for a single start state.
pub fn inner_correction<M, F>(
    model: &M,
    t1: f64,
    t_end: f64,
    x_t1: f64,
    k: u32,
    g: F,
    increments: &mut IncrementStream,
) -> Result<CorrectionSample>
where
    M: SdeModel + ?Sized,
    F: Fn(f64) -> f64 + Sync,
{
    if !x_t1.is_finite() {
        return Err(Error::InvalidParameter("x_t1 must be finite".into()));
    }
    let mut out = [0.0];
    let cost = inner_level_difference(model, &FnPayoff(g), t1, t_end, &[x_t1], k, increments, &mut out)?;
    Ok(CorrectionSample { value: out[0], cost_units: cost })
}

/// `Δ_k g / p_k` with `k ~ dist`, an unbiased draw of `E[g(X_T) | X_t1 = x_t1]`.
pub fn randomized_inner_estimate<M, F>(
    model: &M,
    t1: f64,
    t_end: f64,
    x_t1: f64,
    dist: &LevelDistribution,
    g: F,
    key: &StreamKey,
) -> Result<CorrectionSample>
where
    M: SdeModel + ?Sized,
    F: Fn(f64) -> f64 + Sync,
{
    let k = dist.sample(key.stream(lanes::SCALARS).uniform());
    let mut normals = key.stream(lanes::INNER);
    let s = inner_correction(model, t1, t_end, x_t1, k, g, &mut normals)?;
    Ok(CorrectionSample { value: s.value / dist.pmf(k), cost_units: s.cost_units })
}

/// Middle-stage states at level `ℓ` (and `ℓ − 1`) sharing one Brownian path,
/// together with the losses applied to the inner means at each.
#[derive(Clone, Debug, PartialEq)]
pub struct MiddleDraw {
    pub t1: f64,
    pub fine_states: Vec<f64>,
    /// Empty at level 0.
    pub coarse_states: Vec<f64>,
    pub fine_loss: LossSpec,
    pub coarse_loss: LossSpec,
    pub cost_units: u64,
}

/// A triple-nested problem below the outer scenario: the middle simulation
/// to `t1` and the inner payoff at `T`.
pub trait NestedProblem: Sync {
    type InnerModel: SdeModel;
    type Payoff: InnerPayoff;

    fn inner_model(&self) -> &Self::InnerModel;
    fn payoff(&self) -> &Self::Payoff;
    /// End of the inner interval.
    fn maturity(&self) -> f64;
    fn middle(
        &self,
        level: u32,
        scalars: &mut IncrementStream,
        normals: &mut IncrementStream,
    ) -> Result<MiddleDraw>;
}

/// Index ranges of the two coarse half-averages at middle level `ℓ > 0`:
/// a disjoint split of the `M_ℓ` fine draws.
pub fn antithetic_halves(batch: usize) -> (Range<usize>, Range<usize>) {
    let half = batch / 2;
    (0..half, half..batch)
}

/// One draw of `Δ^ant_ℓ f`, given the outer scenario baked into `problem`.
pub fn antithetic_middle_correction<P: NestedProblem + ?Sized>(
    problem: &P,
    level: u32,
    cfg: &InnerConfig,
    key: &StreamKey,
) -> Result<CorrectionSample> {
    let mut scalars = key.stream(lanes::SCALARS);
    antithetic_middle_correction_with(problem, level, cfg, key, &mut scalars)
}

fn antithetic_middle_correction_with<P: NestedProblem + ?Sized>(
    problem: &P,
    level: u32,
    cfg: &InnerConfig,
    key: &StreamKey,
    scalars: &mut IncrementStream,
) -> Result<CorrectionSample> {
    let mut middle_normals = key.stream(lanes::MIDDLE);
    let mid = problem.middle(level, scalars, &mut middle_normals)?;
    let nc = problem.payoff().components();
    let nf = mid.fine_states.len();
    let ncs = mid.coarse_states.len();
    let fine_slots = nf * nc;
    let coarse_slots = ncs * nc;
    if fine_slots > MAX_SLOTS || coarse_slots > MAX_SLOTS {
        return Err(Error::InvalidParameter("too many middle states".into()));
    }
    let dist = cfg.inner_distribution();
    let batch = cfg.batch_size(level);
    let (first, _) = antithetic_halves(batch);
    let has_coarse = level > 0 && ncs > 0;
    let mut randomized = [true; MAX_SLOTS];
    for (c, r) in randomized[..nc].iter_mut().enumerate() {
        *r = problem.payoff().randomized(c);
    }

    let mut inner = key.stream(lanes::INNER);
    let mut sum_fine = [0.0f64; MAX_SLOTS];
    let mut sum_half = [[0.0f64; MAX_SLOTS]; 2];
    let mut buf = [0.0f64; MAX_SLOTS];
    let mut cost = mid.cost_units;
    let t_end = problem.maturity();

    for m in 0..batch {
        let k = dist.sample(scalars.uniform());
        let w = 1.0 / dist.pmf(k);
        let mut weight = [1.0f64; MAX_SLOTS];
        for (c, wc) in weight[..nc].iter_mut().enumerate() {
            if randomized[c] {
                *wc = w;
            }
        }
        // one Brownian path on [t1, T] shared by every fine and coarse middle state
        let mut states = [0.0f64; MAX_SLOTS];
        states[..nf].copy_from_slice(&mid.fine_states);
        if has_coarse {
            states[nf..nf + ncs].copy_from_slice(&mid.coarse_states);
        }
        let n_states = if has_coarse { nf + ncs } else { nf };
        let mut out = [0.0f64; 2 * MAX_SLOTS];
        cost += inner_level_difference(
            problem.inner_model(),
            problem.payoff(),
            mid.t1,
            t_end,
            &states[..n_states],
            k,
            &mut inner,
            &mut out,
        )?;
        for (i, (acc, v)) in sum_fine[..fine_slots].iter_mut().zip(&out[..fine_slots]).enumerate() {
            *acc += v * weight[i % nc];
        }
        if has_coarse {
            let half = usize::from(!first.contains(&m));
            for (i, (acc, v)) in sum_half[half][..coarse_slots]
                .iter_mut()
                .zip(&out[fine_slots..fine_slots + coarse_slots])
                .enumerate()
            {
                *acc += v * weight[i % nc];
            }
        }
    }

    for (b, s) in buf[..fine_slots].iter_mut().zip(&sum_fine[..fine_slots]) {
        *b = s / batch as f64;
    }
    let mut value = mid.fine_loss.evaluate(&buf[..fine_slots]);
    if has_coarse {
        let half_n = (batch / 2) as f64;
        let mut coarse_sum = 0.0;
        for h in &sum_half {
            for (b, s) in buf[..coarse_slots].iter_mut().zip(&h[..coarse_slots]) {
                *b = s / half_n;
            }
            coarse_sum += mid.coarse_loss.evaluate(&buf[..coarse_slots]);
        }
        value -= 0.5 * coarse_sum;
    }
    Ok(CorrectionSample { value, cost_units: cost })
}

/// One draw of `Y = Δ^ant_ℓ̂ f / q_ℓ̂` with `ℓ̂ ~ q`. Also returns `ℓ̂`.
pub fn randomized_middle_estimate<P: NestedProblem + ?Sized>(
    problem: &P,
    middle_dist: &LevelDistribution,
    cfg: &InnerConfig,
    key: &StreamKey,
) -> Result<(CorrectionSample, u32)> {
    let mut scalars = key.stream(lanes::SCALARS);
    let level = middle_dist.sample(scalars.uniform());
    let s = antithetic_middle_correction_with(problem, level, cfg, key, &mut scalars)?;
    Ok((
        CorrectionSample { value: s.value / middle_dist.pmf(level), cost_units: s.cost_units },
        level,
    ))
}

/// A single-factor nested problem with a fixed `t1`: GBM (or any SDE) from a
/// known `X_t0` to `t1` at level `ℓ` with `2^ℓ` steps, then the inner payoff
/// on `[t1, T]`. The same loss is used at every middle level.
pub struct FixedTimeProblem<M, G> {
    pub model: M,
    pub payoff: G,
    pub t0: f64,
    pub x_t0: f64,
    pub t1: f64,
    pub maturity: f64,
    pub loss: LossSpec,
}

impl<M: SdeModel, G: InnerPayoff> NestedProblem for FixedTimeProblem<M, G> {
    type InnerModel = M;
    type Payoff = G;

    fn inner_model(&self) -> &M {
        &self.model
    }
    fn payoff(&self) -> &G {
        &self.payoff
    }
    fn maturity(&self) -> f64 {
        self.maturity
    }

    fn middle(
        &self,
        level: u32,
        _scalars: &mut IncrementStream,
        normals: &mut IncrementStream,
    ) -> Result<MiddleDraw> {
        let n = 1usize << level;
        let h = (self.t1 - self.t0) / n as f64;
        let sqrt_h = h.sqrt();
        let dw: Vec<f64> = (0..n).map(|_| sqrt_h * normals.normal()).collect();
        let fine = crate::sde::milstein_with_increments(&self.model, self.t0, h, self.x_t0, &dw)?;
        let (coarse_states, coarse_cost) = if level > 0 {
            let dwc = crate::sde::coarsen_increments(&dw);
            let c = crate::sde::milstein_with_increments(&self.model, self.t0, 2.0 * h, self.x_t0, &dwc)?;
            (vec![c], n / 2)
        } else {
            (Vec::new(), 0)
        };
        Ok(MiddleDraw {
            t1: self.t1,
            fine_states: vec![fine],
            coarse_states,
            fine_loss: self.loss.clone(),
            coarse_loss: self.loss.clone(),
            cost_units: (n + coarse_cost) as u64,
        })
    }
}
