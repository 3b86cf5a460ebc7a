//! Library results against the independent oracles in `common`.

mod common;

use common::*;
use hmlmc::cva::{
    build_loss_spec, default_portfolio, offline_precompute, sample_default_conditional, CreditModel, CvaProblem,
    LossVariant, REFERENCE_ETA,
};
use hmlmc::driver::{evaluate_level, mlmc_run, DriverConfig};
use hmlmc::inner::{randomized_inner_estimate, InnerConfig, LevelDistribution};
use hmlmc::outer::AdaptiveConfig;
use hmlmc::rng::StreamKey;
use hmlmc::sde::Gbm;

fn library_credit() -> CreditModel {
    let c = reference_credit();
    CreditModel { c0: c.c0, sigma_cs: c.sigma_cs, lgd: c.lgd, horizon: c.horizon }
}

#[test]
fn default_portfolio_matches_oracle_weights() {
    let m = reference_market();
    let p = default_portfolio();
    for ((w, k), (wo, ko)) in p.options.iter().zip(&m.options) {
        assert_eq!(k, ko);
        assert!((w - wo).abs() < 1e-10 * wo.abs(), "{w} vs {wo}");
    }
    assert!((m.value(1.0, 0.0) - hmlmc::cva::DEFAULT_VALUE).abs() < 1e-12);
    assert!(m.delta(1.0, 0.0).abs() < 1e-12);
}

#[test]
fn offline_terms_match_simpson() {
    let m = reference_market();
    let cr = reference_credit();
    let off = offline_precompute(&default_portfolio(), &library_credit(), 1e-7).unwrap();
    let k = cr.c0 / cr.lgd;
    let (h, t) = (cr.horizon, m.maturity);
    let dens = |tau: f64| k * (-k * tau).exp() * cr.lgd * (-m.rate * tau).exp();

    let cva0 = cva_from(&m, &cr, m.spot, cr.c0, 0.0, 400, 400);
    assert!((off.cva_initial - cva0).abs() < 1e-6 * cva0, "{} vs {cva0}", off.cva_initial);

    let pre = simpson(0.0, h, 40, |tau| dens(tau) * m.expected_exposure(m.spot, 0.0, tau, 400));
    assert!((off.e_pre_default - pre).abs() < 1e-6 * pre, "{} vs {pre}", off.e_pre_default);

    // window terms with τ = T − (T − H)v²
    let window = |f: &dyn Fn(f64) -> f64| {
        simpson(0.0, 1.0, 200, |v| {
            let tau = t - (t - h) * v * v;
            2.0 * (t - h) * v * dens(tau) * f(tau)
        })
    };
    let chi = window(&|tau| (1.0 / cr.c0 - tau / cr.lgd) * m.expected_exposure(m.spot, 0.0, tau, 400));
    assert!((off.e_chi - chi).abs() < 1e-6 * chi.abs(), "{} vs {chi}", off.e_chi);

    // the delta term as a spot derivative of the window exposure
    let exposure = |spot: f64, tau: f64| {
        let mu = (m.rate - 0.5 * m.vol * m.vol) * tau;
        let sd = m.vol * tau.sqrt();
        let s = |z: f64| spot * (mu + sd * z).exp();
        gauss_expect_split(400, |z| m.value(s(z), tau), |z| m.value(s(z), tau).max(0.0))
    };
    let bump = 1e-4;
    let delta = window(&|tau| (exposure(m.spot + bump, tau) - exposure(m.spot - bump, tau)) / (2.0 * bump));
    assert!((off.e_delta - delta).abs() < 2e-5 * delta.abs(), "{} vs {delta}", off.e_delta);

    let p = simpson(h, t, 100, |tau| k * (-k * tau).exp());
    assert!((off.p_window - p).abs() < 1e-12);
}

#[test]
fn reference_eta_matches_quadrature() {
    let eta = exact_eta(&reference_market(), &reference_credit(), 5e-4, 200, 64, 200);
    assert!((eta - REFERENCE_ETA).abs() < 2e-4, "quadrature {eta}, pinned {REFERENCE_ETA}");
}

#[test]
fn randomized_inner_matches_black_scholes() {
    let model = Gbm::risk_neutral(0.01, 0.1);
    let dist = LevelDistribution::new(1.4, Some(30)).unwrap();
    let n = 100_000u64;
    let xs: Vec<f64> = (0..n)
        .map(|i| {
            let key = StreamKey::path(2024, &[i]);
            randomized_inner_estimate(&model, 0.0, 1.0, 1.0, &dist, |x| (-0.01f64).exp() * (x - 1.05).max(0.0), &key)
                .unwrap()
                .value
        })
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let se = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n * (n - 1)) as f64).sqrt();
    let exact = bs_call(1.0, 1.05, 0.01, 0.1, 1.0);
    assert!((mean - exact).abs() < 3.0 * se, "mean {mean}, exact {exact}, se {se}");
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn conditional_default_sampler_ks() {
    let cr = reference_credit();
    let k = cr.c0 / cr.lgd;
    let (h, t) = (cr.horizon, 1.0);
    let cdf = |x: f64| ((-k * h).exp() - (-k * x).exp()) / ((-k * h).exp() - (-k * t).exp());
    let n = 20_000;
    let mut u = StreamKey::new(99).stream(0);
    let draws: Vec<f64> = (0..n).map(|_| sample_default_conditional(&library_credit(), t, u.uniform())).collect();
    let d = ks_statistic(draws, cdf);
    assert!(d < 1.628 / (n as f64).sqrt(), "KS distance {d}");
}

/// With exact inner values, the credit and delta control variates leave the
/// mean of the loss unchanged and reduce its spread.
#[test]
fn control_variates_preserve_mean() {
    let m = reference_market();
    let p = default_portfolio();
    let cr = library_credit();
    let off = offline_precompute(&p, &cr, 1e-7).unwrap();
    let problem = CvaProblem::new(p.clone(), cr, off, 5e-4, LossVariant::Full, Some((0, 2)), InnerConfig::default()).unwrap();
    let (r, vol) = (m.rate, m.vol);
    let n = 4000;
    for (zs, zc) in [(1.5, -0.5), (-1.0, 2.0)] {
        let mut diffs = Vec::with_capacity(n);
        let mut keys = StreamKey::new(5).stream(0);
        for _ in 0..n {
            let tau = sample_default_conditional(&cr, m.maturity, keys.uniform());
            let z = keys.normal();
            let scen = problem.scenario_from_normals(zs, zc);
            let sh = scen.s_h;
            let w = vol * (tau - cr.horizon).sqrt() * z;
            let drift = (r - 0.5 * vol * vol) * (tau - cr.horizon);
            let w0 = vol * cr.horizon.sqrt() * keys.normal();
            let d0 = (r - 0.5 * vol * vol) * cr.horizon;
            let s_h_path = sh * (drift + w).exp();
            let s_plus = (d0 + w0 + drift + w).exp();
            let s_minus = (d0 - w0 + drift + w).exp();
            let slots = |s: f64| [m.value(s, tau), m.delta(s, tau) * s];
            let [a0, a1] = slots(s_h_path);
            let [b0, b1] = slots(s_plus);
            let [c0, c1] = slots(s_minus);
            let basic_s = hmlmc::cva::sample_risk_scenario(&p, &cr, &off, 5e-4, LossVariant::Basic, zs, zc);
            let basic = build_loss_spec(&basic_s, tau, &cr, &p, &off, LossVariant::Basic, false).unwrap();
            let full = build_loss_spec(&scen, tau, &cr, &p, &off, LossVariant::Full, true).unwrap();
            // antithetic average of the S₀ paths for the basic loss too
            let lb = 0.5 * (basic.evaluate(&[a0, b0]) + basic.evaluate(&[a0, c0]));
            let lf = full.evaluate(&[a0, a1, b0, b1, c0, c1]);
            diffs.push((lb, lf));
        }
        let d: Vec<f64> = diffs.iter().map(|(b, f)| b - f).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let se = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n * (n - 1)) as f64).sqrt();
        assert!(mean.abs() < 3.0 * se + 1e-12, "scenario ({zs}, {zc}): mean difference {mean}, se {se}");
    }
}

#[test]
fn level_statistics_independent_of_thread_count() {
    let p = default_portfolio();
    let cr = library_credit();
    let off = offline_precompute(&p, &cr, 1e-6).unwrap();
    let problem = CvaProblem::new(p, cr, off, 5e-4, LossVariant::Full, Some((0, 2)), InnerConfig::default()).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| evaluate_level(&problem, 2, 0..64, &AdaptiveConfig::default(), 11, 7).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn driver_certain_threshold() {
    // a threshold far below any loss gives η = 1 exactly
    let p = default_portfolio();
    let cr = library_credit();
    let off = offline_precompute(&p, &cr, 1e-6).unwrap();
    let problem = CvaProblem::new(p, cr, off, -1.0, LossVariant::Full, Some((0, 2)), InnerConfig::default()).unwrap();
    let cfg = DriverConfig { warmup_samples: 20, max_level: 6, ..DriverConfig::default() };
    let r = mlmc_run(&problem, &cfg, 0.05, 3).unwrap();
    assert_eq!(r.estimate, 1.0);
}

/// `E[1{τ₀≥H} F(τ₀) g_τ₀(c_H) e^{c_H H/LGD}] = E[F(τ_H)]` with `τ₀ ~ Exp(c₀/LGD)`
/// and `τ_H − H ~ Exp(c_H/LGD)`, by paired draws from the same uniforms.
#[test]
fn measure_change_identity() {
    let cr = library_credit();
    let t = 1.0;
    for c_h in [0.04, 0.05, 0.065] {
        let n = 200_000;
        let mut u = StreamKey::path(31, &[(c_h * 1000.0) as u64]).stream(0);
        let fs: [&dyn Fn(f64) -> f64; 2] = [&|x| x, &|x| if x <= t { 1.0 } else { 0.0 }];
        for (fi, f) in fs.iter().enumerate() {
            let mut d = Vec::with_capacity(n);
            for _ in 0..n {
                let v = u.uniform();
                let tau0 = -(1.0 - v).ln() * cr.lgd / cr.c0;
                let tau_h = cr.horizon - (1.0 - v).ln() * cr.lgd / c_h;
                let lhs = if tau0 >= cr.horizon { f(tau0) * hmlmc::cva::g_factor(&cr, c_h, tau0) } else { 0.0 };
                d.push(lhs - f(tau_h));
            }
            let mean = d.iter().sum::<f64>() / n as f64;
            let se = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n * (n - 1)) as f64).sqrt();
            assert!(mean.abs() < 3.0 * se, "c_H {c_h}, F #{fi}: {mean} vs se {se}");
        }
    }
}

/// Sampling `τ` on `[H, T]` and scaling by `p̃` matches the unconditional mean.
#[test]
fn importance_sampling_identity() {
    let cr = library_credit();
    let t = 1.0;
    let k = cr.intensity();
    let x = |tau: f64| (-0.01 * tau).exp() * (1.0 + tau).sqrt();
    let n = 200_000;
    let mut u = StreamKey::new(41).stream(0);
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let tau = -(1.0 - u.uniform()).ln() / k;
        a.push(if (cr.horizon..=t).contains(&tau) { x(tau) } else { 0.0 });
        b.push(cr.window_probability(t) * x(sample_default_conditional(&cr, t, u.uniform())));
    }
    let ms = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n as f64;
        (m, v.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n * (n - 1)) as f64)
    };
    let ((ma, va), (mb, vb)) = (ms(&a), ms(&b));
    assert!((ma - mb).abs() < 3.0 * (va + vb).sqrt(), "{ma} vs {mb}");
    let exact = simpson(cr.horizon, t, 200, |s| k * (-k * s).exp() * x(s));
    assert!((mb - exact).abs() < 3.0 * vb.sqrt());
}

#[test]
fn var_bisection_is_monotone() {
    let p = default_portfolio();
    let cr = library_credit();
    let off = offline_precompute(&p, &cr, 1e-6).unwrap();
    let problem = CvaProblem::new(p, cr, off, 0.0, LossVariant::Full, Some((0, 2)), InnerConfig::default()).unwrap();
    // capped levels keep the bulk thresholds cheap
    let driver = DriverConfig { warmup_samples: 100, warmup_levels: 2, max_level: 5, ..DriverConfig::default() };
    let cfg = hmlmc::cva::VarConfig { eta_tol: 0.1, lambda_tol: 2e-4, max_iter: 4 };
    let res = hmlmc::cva::var_root_find(&problem, 0.1, (0.0, 1.5e-3), &cfg, &driver, 9).unwrap();
    // quadrature puts eta = 0.1 near a threshold of 2e-4
    assert!(res.l_eta > 0.0 && res.l_eta < 8e-4, "{}", res.l_eta);
    let mut width = 1.5e-3;
    for s in &res.trace {
        assert!(s.low <= s.lambda && s.lambda <= s.high);
        assert!(s.high - s.low <= 0.5 * width + 1e-15);
        width = s.high - s.low;
        assert_eq!(s.eta >= 0.1, s.low == s.lambda);
    }
    let degenerate = hmlmc::cva::var_root_find(&problem, 1.0, (-1e-3, 2e-3), &cfg, &driver, 9).unwrap();
    assert_eq!(degenerate.l_eta, -1e-3);
    assert!(hmlmc::cva::var_root_find(&problem, 0.1, (1e-3, 0.0), &cfg, &driver, 9).is_err());
}
