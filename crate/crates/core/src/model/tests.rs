use super::*;
use nsum_testkit::{central_gradient, poisson_gamma_ln_pmf};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Gamma, Normal};

fn random_instance(rng: &mut ChaCha8Rng, r: usize, k: usize, m: usize) -> NsumModel {
    let munis: Vec<usize> = (0..r).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
    let counts: Vec<Vec<u32>> = (0..r)
        .map(|_| (0..k).map(|_| rng.random_range(0..15)).collect())
        .collect();
    NsumModel::new(k, m, munis, &counts, HyperConfig::default()).unwrap()
}

/// All prior terms plus log-Jacobians, written out with library densities.
fn prior_by_hand(model: &NsumModel, theta: &[f64]) -> f64 {
    let layout = model.layout();
    let h = model.hyper();
    let p = model.constrain(theta);
    let half_normal = |x: f64, s: f64| 2.0 * Normal::new(0.0, s).unwrap().pdf(x);
    let mut lp = 0.0;
    for k in 0..layout.groups {
        lp += half_normal(p.mu_rho[k], h.sigma_mu_rho).ln() + theta[layout.mu_rho(k)];
        lp += half_normal(p.sigma2_rho[k], h.tau).ln() + theta[layout.sigma2_rho(k)];
        lp += half_normal(p.w[k], h.sigma_w).ln() + theta[layout.w(k)];
        let alpha = p.mu_rho[k] * p.mu_rho[k] / p.sigma2_rho[k];
        let beta = p.mu_rho[k] / p.sigma2_rho[k];
        let g = Gamma::new(alpha, beta).unwrap();
        for m in 0..layout.munis {
            lp += g.ln_pdf(p.rho[k][m]) + theta[layout.rho(k, m)];
        }
    }
    let normal = Normal::new(h.mu_delta, p.sigma_delta).unwrap();
    lp += p.delta.iter().map(|&d| normal.ln_pdf(d)).sum::<f64>();
    let upper = h.sigma_delta_upper;
    let s = p.sigma_delta / upper;
    lp += -upper.ln() + (upper * s * (1.0 - s)).ln();
    lp
}

#[test]
fn geometric_special_cases() {
    assert!((nb_log_pmf(0, 1.0, 1.0).unwrap() - 0.5f64.ln()).abs() < 1e-14);
    assert!((nb_log_pmf(3, 1.0, 1.0).unwrap() - (1.0f64 / 16.0).ln()).abs() < 1e-14);
}

#[test]
fn pmf_matches_poisson_gamma_integral() {
    let oracle = poisson_gamma_ln_pmf(2, 0.5, 0.3);
    assert!((nb_log_pmf(2, 0.5, 0.3).unwrap() - oracle).abs() < 1e-8);
}

#[test]
fn pmf_rejects_bad_domain() {
    assert!(matches!(nb_log_pmf(1, 0.0, 1.0), Err(ModelError::Domain(_))));
    assert!(matches!(nb_log_pmf(1, 1.0, -2.0), Err(ModelError::Domain(_))));
    assert!(nb_log_pmf(1, f64::NAN, 1.0).is_err());
}

#[test]
fn pmf_normalises_with_the_right_moments() {
    for &(mu, w) in &[(50.0, 0.01), (0.0271, 0.0105), (5.4438, 33.8608), (50.0, 35.0), (1.0, 0.3)] {
        let (mut total, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for y in 0..=1_000_000u32 {
            let p = nb_log_pmf(y, mu, w).unwrap().exp();
            let yf = y as f64;
            total += p;
            m1 += p * yf;
            m2 += p * yf * yf;
        }
        let var = m2 - m1 * m1;
        assert!((total - 1.0).abs() < 1e-8, "mu={mu} w={w} total={total}");
        // The heaviest tail loses visible mass past 10⁶; moments are only checked
        // where truncation is negligible.
        if w >= 0.3 {
            assert!(((m1 - mu) / mu).abs() < 1e-6, "mean {m1} vs {mu}");
            let v = mu + mu * mu / w;
            assert!(((var - v) / v).abs() < 1e-6, "var {var} vs {v}");
        }
    }
}

#[test]
fn zero_count_cell_is_closed_form() {
    for &(mu, w) in &[(0.3f64, 0.0105f64), (2.0, 1.0), (40.0, 35.0)] {
        let expect = w * (w / (w + mu)).ln();
        assert!((nb_log_pmf(0, mu, w).unwrap() - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }
}

#[test]
fn likelihood_in_mu_peaks_at_the_count() {
    let w = 2.0;
    for y in [1u32, 4, 12, 40] {
        let grid: Vec<f64> = (1..=400).map(|j| j as f64 * 0.25).collect();
        let best = grid
            .iter()
            .copied()
            .max_by(|a, b| {
                nb_log_pmf(y, *a, w).unwrap().total_cmp(&nb_log_pmf(y, *b, w).unwrap())
            })
            .unwrap();
        assert!((best - y as f64).abs() < 1e-12, "y={y} argmax={best}");
    }
}

#[test]
fn prior_only_density_at_origin() {
    let model = NsumModel::new(3, 2, vec![], &[], HyperConfig::default()).unwrap();
    let theta = vec![0.0; model.layout().dim()];
    let lp = model.log_posterior(&theta).unwrap();
    assert!((lp - prior_by_hand(&model, &theta)).abs() < 1e-10);

    // At θ = 0: every positive is 1, so α = β = 1 and each ρ term is ln e⁻¹ = −1.
    let hn = |s: f64| (2.0f64 / std::f64::consts::PI).sqrt().ln() - s.ln() - 0.5 / (s * s);
    let expect = 3.0 * (hn(10.0) + hn(1.0) + hn(10.0)) - 6.0 + (1.5f64 * 0.25).ln() - 1.5f64.ln();
    assert!((lp - expect).abs() < 1e-10, "{lp} vs {expect}");
}

#[test]
fn log_posterior_is_likelihood_plus_priors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let model = random_instance(&mut rng, 7, 3, 2);
        let theta: Vec<f64> = (0..model.layout().dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lp = model.log_posterior(&theta).unwrap();
        let slow = model.log_likelihood(&model.constrain(&theta)) + prior_by_hand(&model, &theta);
        assert!((lp - slow).abs() < 1e-9 * slow.abs().max(1.0), "{lp} vs {slow}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_instance(&mut rng, 6, 3, 2);
    for _ in 0..5 {
        let theta: Vec<f64> = (0..model.layout().dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = model.grad_log_posterior(&theta).unwrap();
        let fd = central_gradient(|t| model.log_posterior(t).unwrap(), &theta, 1e-5);
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() / f.abs().max(1.0) < 1e-5, "{a} vs {f}");
        }
    }
}

#[test]
fn gradient_vanishes_where_ascent_stops() {
    // The joint posterior has no mode: σ_δ → 0 with every δ_i at μ_δ is an
    // unbounded funnel. With σ_δ held fixed and a single municipality (which
    // keeps the ρ funnel bounded) the conditional density does have one.
    let counts: Vec<Vec<u32>> = vec![vec![3, 0], vec![9, 2], vec![5, 1], vec![14, 4], vec![6, 0]];
    let model = NsumModel::new(2, 1, vec![0; 5], &counts, HyperConfig::default()).unwrap();
    let lp = |t: &[f64]| model.log_posterior(t).unwrap();
    let mut theta = vec![0.0; model.layout().dim()];
    theta[model.layout().delta(0)..model.layout().delta(0) + 5].fill(5.5);
    let free = model.layout().sigma_delta();
    let masked_grad = |t: &[f64]| {
        let mut g = model.grad_log_posterior(t).unwrap();
        g[free] = 0.0;
        g
    };
    let mut grad = masked_grad(&theta);
    let mut step = 1e-3;
    for _ in 0..500 {
        // Barzilai–Borwein step, halved until the ascent condition holds.
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let f0 = lp(&theta);
        let mut next: Vec<f64>;
        loop {
            next = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            if lp(&next) >= f0 + 1e-4 * step * g2 || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        let next_grad = masked_grad(&next);
        let (mut ss, mut sy) = (0.0, 0.0);
        for j in 0..theta.len() {
            let s = next[j] - theta[j];
            let y = next_grad[j] - grad[j];
            ss += s * s;
            sy += s * y;
        }
        if sy < 0.0 {
            step = (ss / -sy).min(10.0);
        }
        theta = next;
        grad = next_grad;
        if grad.iter().all(|g| g.abs() < 1e-9) {
            break;
        }
    }
    let max = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    assert!(max < 1e-4, "‖∇‖∞ = {max}");
}

#[test]
fn silent_respondent_above_prior_mean_is_pulled_down() {
    let model = NsumModel::new(2, 1, vec![0, 0], &[vec![0, 0], vec![4, 7]], HyperConfig::default()).unwrap();
    let layout = model.layout();
    let mut theta = vec![0.0; layout.dim()];
    theta[layout.delta(0)] = 7.0;
    theta[layout.delta(1)] = 5.5;
    let grad = model.grad_log_posterior(&theta).unwrap();
    assert!(grad[layout.delta(0)] < 0.0);
}

#[test]
fn origin_constrains_to_unit_positives() {
    let model = NsumModel::new(2, 3, vec![0, 2], &[vec![1, 1], vec![0, 2]], HyperConfig::default()).unwrap();
    let p = model.constrain(&vec![0.0; model.layout().dim()]);
    assert!(p.mu_rho.iter().chain(&p.sigma2_rho).chain(&p.w).all(|&v| v == 1.0));
    assert!(p.rho.iter().flatten().all(|&v| v == 1.0));
    assert!(p.delta.iter().all(|&v| v == 0.0));
    assert_eq!(p.sigma_delta, 0.75);
}

#[test]
fn exp_jacobian_is_the_raw_coordinate() {
    let model = NsumModel::new(2, 1, vec![], &[], HyperConfig::default()).unwrap();
    let layout = model.layout();
    let base = vec![0.0; layout.dim()];
    let hn = |x: f64| half_normal_ln_pdf(x, 10.0);
    for a in [-2.0, -0.3, 0.7, 1.9] {
        let mut theta = base.clone();
        theta[layout.w(1)] = a;
        let diff = model.log_posterior(&theta).unwrap() - model.log_posterior(&base).unwrap();
        assert!((diff - (hn(a.exp()) - hn(1.0)) - a).abs() < 1e-12);
    }
}

#[test]
fn unconstrain_rejects_out_of_support() {
    let model = NsumModel::new(2, 1, vec![0], &[vec![1, 2]], HyperConfig::default()).unwrap();
    let mut p = model.constrain(&vec![0.0; model.layout().dim()]);
    p.sigma_delta = 1.5;
    assert!(model.unconstrain(&p).is_err());
    p.sigma_delta = 0.5;
    p.w[0] = 0.0;
    assert!(model.unconstrain(&p).is_err());
}

#[test]
fn shifting_delta_and_rho_together_leaves_likelihood_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_instance(&mut rng, 8, 3, 2);
    let theta: Vec<f64> = (0..model.layout().dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = model.constrain(&theta);
    let mut shifted = p.clone();
    for d in &mut shifted.delta {
        *d += 0.8;
    }
    for r in shifted.rho.iter_mut().flatten() {
        *r += 0.8;
    }
    let (a, b) = (model.log_likelihood(&p), model.log_likelihood(&shifted));
    assert!((a - b).abs() < 1e-9 * a.abs());
}

#[test]
fn wrong_length_theta_is_rejected() {
    let model = NsumModel::new(2, 1, vec![0], &[vec![1, 2]], HyperConfig::default()).unwrap();
    assert_eq!(
        model.log_posterior(&[0.0; 3]),
        Err(ModelError::DimensionMismatch {
            expected: model.layout().dim(),
            found: 3
        })
    );
}

#[test]
fn param_names_follow_layout() {
    let layout = Layout::new(2, 2, 1);
    let names = layout.param_names();
    assert_eq!(names.len(), layout.dim());
    assert_eq!(names[layout.rho(1, 0)], "rho[1][0]");
    assert_eq!(names[layout.w(0)], "w[0]");
    assert_eq!(names[layout.delta(0)], "delta[0]");
    assert_eq!(names[layout.sigma_delta()], "sigma_delta");
}

#[test]
fn constrain_into_agrees_with_named_constrain() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = random_instance(&mut rng, 5, 2, 2);
    let layout = model.layout();
    let theta: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut flat = vec![0.0; layout.dim()];
    model.constrain_into(&theta, &mut flat);
    let p = model.constrain(&theta);
    assert_eq!(flat[layout.rho(1, 1)], p.rho[1][1]);
    assert_eq!(flat[layout.delta(3)], p.delta[3]);
    assert_eq!(flat[layout.sigma_delta()], p.sigma_delta);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn constrain_round_trips(theta in prop::collection::vec(-8.0f64..8.0, 3 * 2 + 2 * 3 + 4 + 1)) {
        let model = NsumModel::new(2, 3, vec![0, 1, 2, 0], &[vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 0]], HyperConfig::default()).unwrap();
        let back = model.unconstrain(&model.constrain(&theta)).unwrap();
        for (a, b) in theta.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn log_posterior_is_finite_everywhere(theta in prop::collection::vec(-30.0f64..30.0, 3 * 2 + 2 * 2 + 3 + 1)) {
        let model = NsumModel::new(2, 2, vec![0, 1, 1], &[vec![0, 40], vec![3, 0], vec![120, 2]], HyperConfig::default()).unwrap();
        let lp = model.log_posterior(&theta).unwrap();
        prop_assert!(lp.is_finite(), "lp = {}", lp);
        prop_assert!(model.grad_log_posterior(&theta).unwrap().iter().all(|g| g.is_finite()));
    }
}
