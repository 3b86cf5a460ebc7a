//! Test oracles written independently of the library: closed-form
//! Black–Scholes with statrs' normal distribution and composite Simpson
//! quadrature.
#![allow(dead_code)]

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub struct Market {
    pub spot: f64,
    pub drift: f64,
    pub vol: f64,
    pub rate: f64,
    pub maturity: f64,
    /// `(weight, strike)`
    pub options: Vec<(f64, f64)>,
}

pub struct Credit {
    pub c0: f64,
    pub sigma_cs: f64,
    pub lgd: f64,
    pub horizon: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

pub fn phi(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn bs_call(s: f64, k: f64, r: f64, vol: f64, ttm: f64) -> f64 {
    if ttm <= 0.0 {
        return (s - k).max(0.0);
    }
    let sd = vol * ttm.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * vol * vol) * ttm) / sd;
    s * phi(d1) - k * (-r * ttm).exp() * phi(d1 - sd)
}

pub fn bs_delta(s: f64, k: f64, r: f64, vol: f64, ttm: f64) -> f64 {
    if ttm <= 0.0 {
        return if s > k { 1.0 } else { 0.0 };
    }
    let sd = vol * ttm.sqrt();
    phi(((s / k).ln() + (r + 0.5 * vol * vol) * ttm) / sd)
}

/// Composite Simpson on `[a, b]` with `n` (even) panels.
pub fn simpson<F: FnMut(f64) -> f64>(a: f64, b: f64, n: usize, mut f: F) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// `E[g(Z)]`, `Z ~ N(0,1)`, by Simpson on `[−8, 8]`.
pub fn gauss_expect<F: FnMut(f64) -> f64>(n: usize, mut g: F) -> f64 {
    let n01 = std_normal();
    simpson(-8.0, 8.0, n, |z| g(z) * n01.pdf(z))
}

/// `E[g(Z)]` with Simpson on each piece of `[−8, 8]` cut at the roots of
/// `sign`, so that jumps of `g` at those roots cost no accuracy.
pub fn gauss_expect_split<S: Fn(f64) -> f64, F: FnMut(f64) -> f64>(n: usize, sign: S, mut g: F) -> f64 {
    let n01 = std_normal();
    let grid: Vec<f64> = (0..=400).map(|i| -8.0 + 16.0 * i as f64 / 400.0).collect();
    let mut cuts = vec![-8.0];
    for w in grid.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        if (sign(a) > 0.0) != (sign(b) > 0.0) {
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if (sign(m) > 0.0) == (sign(a) > 0.0) {
                    a = m;
                } else {
                    b = m;
                }
            }
            cuts.push(0.5 * (a + b));
        }
    }
    cuts.push(8.0);
    cuts.windows(2).map(|w| simpson(w[0], w[1], n, |z| g(z) * n01.pdf(z))).sum()
}

impl Market {
    pub fn value(&self, x: f64, t: f64) -> f64 {
        self.options.iter().map(|&(w, k)| w * bs_call(x, k, self.rate, self.vol, self.maturity - t)).sum()
    }

    pub fn delta(&self, x: f64, t: f64) -> f64 {
        self.options.iter().map(|&(w, k)| w * bs_delta(x, k, self.rate, self.vol, self.maturity - t)).sum()
    }

    /// `E^Q[V_τ(S_τ)⁺ | S_{t0} = s]`
    pub fn expected_exposure(&self, s: f64, t0: f64, tau: f64, n: usize) -> f64 {
        let dt = tau - t0;
        if dt <= 0.0 {
            return self.value(s, tau).max(0.0);
        }
        let mu = (self.rate - 0.5 * self.vol * self.vol) * dt;
        gauss_expect(n, |z| self.value(s * (mu + self.vol * dt.sqrt() * z).exp(), tau).max(0.0))
    }
}

/// CVA seen at time `t0` (undiscounted to 0 by the rate, which is applied
/// from time 0) with spread `c` and stock `s` at `t0`, over defaults in `[t0, T]`.
pub fn cva_from(m: &Market, cr: &Credit, s: f64, c: f64, t0: f64, n_tau: usize, n_z: usize) -> f64 {
    let t = m.maturity;
    // τ = T − (T − t0)v²
    simpson(0.0, 1.0, n_tau, |v| {
        let tau = t - (t - t0) * v * v;
        let jac = 2.0 * (t - t0) * v;
        let dens = c / cr.lgd * (-c * (tau - t0) / cr.lgd).exp();
        jac * dens * cr.lgd * (-m.rate * tau).exp() * m.expected_exposure(s, t0, tau, n_z)
    })
}

/// `η = P(CVA_H − CVA_0 > L)`, integrating the stock shock by Simpson and
/// solving for the spread shock at which the loss crosses `L`.
pub fn exact_eta(m: &Market, cr: &Credit, threshold: f64, n_outer: usize, n_tau: usize, n_z: usize) -> f64 {
    let h = cr.horizon;
    let t = m.maturity;
    let cva0 = cva_from(m, cr, m.spot, cr.c0, 0.0, n_tau, n_z);
    let n01 = std_normal();
    let taus: Vec<f64> = (0..=n_tau).map(|i| i as f64 / n_tau as f64).collect();
    simpson(-8.0, 8.0, n_outer, |z1| {
        let s = m.spot * ((m.drift - 0.5 * m.vol * m.vol) * h + m.vol * h.sqrt() * z1).exp();
        let ex: Vec<f64> = taus.iter().map(|v| m.expected_exposure(s, h, t - (t - h) * v * v, n_z)).collect();
        let loss = |z2: f64| {
            let c = cr.c0 * (-0.5 * cr.sigma_cs * cr.sigma_cs * h + cr.sigma_cs * h.sqrt() * z2).exp();
            let hstep = 1.0 / n_tau as f64;
            let mut acc = 0.0;
            for (i, (v, e)) in taus.iter().zip(&ex).enumerate() {
                let tau = t - (t - h) * v * v;
                let w = if i == 0 || i == n_tau { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * 2.0 * (t - h) * v * c / cr.lgd * (-c * (tau - h) / cr.lgd).exp() * cr.lgd * (-m.rate * tau).exp() * e;
            }
            acc * hstep / 3.0 - cva0 - threshold
        };
        let (mut lo, mut hi) = (-12.0, 12.0);
        let p = if loss(hi) <= 0.0 {
            0.0
        } else if loss(lo) > 0.0 {
            1.0
        } else {
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if loss(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            1.0 - phi(0.5 * (lo + hi))
        };
        p * n01.pdf(z1)
    })
}

/// Delta-neutral pair of calls worth `value`, by Cramer's rule.
pub fn delta_neutral_market(strikes: [f64; 2], value: f64) -> Market {
    let (s, r, vol, t) = (1.0, 0.01, 0.1, 1.0);
    let [k0, k1] = strikes;
    let (p0, p1) = (bs_call(s, k0, r, vol, t), bs_call(s, k1, r, vol, t));
    let (d0, d1) = (bs_delta(s, k0, r, vol, t), bs_delta(s, k1, r, vol, t));
    let det = p0 * d1 - p1 * d0;
    let w = (value * d1 / det, -value * d0 / det);
    Market { spot: s, drift: 0.1, vol, rate: r, maturity: t, options: vec![(w.0, k0), (w.1, k1)] }
}

pub fn reference_market() -> Market {
    delta_neutral_market(hmlmc::cva::DEFAULT_STRIKES, hmlmc::cva::DEFAULT_VALUE)
}

pub fn reference_credit() -> Credit {
    Credit { c0: 0.05, sigma_cs: 0.008 / 0.05, lgd: 0.6, horizon: 10.0 / 365.0 }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
