//! The partially pooled scale-up model.
//!
//! Counts follow `y_ik ~ NegBin(mean = exp(δ_i − ρ_{k,m(i)}), dispersion = w_k)`,
//! where `exp(−ρ_km)` is the prevalence of group `k` in municipality `m` and
//! `exp(δ_i)` is respondent `i`'s network size. Prevalences are pooled through
//! `ρ_km ~ Gamma(α_k, β_k)` with the Gamma written in terms of its mean `μ_ρk`
//! and variance `σ²_ρk`. Hyperpriors:
//!
//! * `μ_ρk ~ HalfNormal(σ_μρ)`, `σ²_ρk ~ HalfNormal(τ)`, `w_k ~ HalfNormal(σ_w)`
//! * `δ_i ~ Normal(μ_δ, σ_δ²)` with `μ_δ` fixed and `σ_δ ~ Uniform(0, upper)`
//!
//! Sampling happens on an unconstrained vector (see [`Layout`]); positives are
//! log-transformed and `σ_δ` goes through a scaled logistic.

pub mod math;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ard::ARDataset;
use crate::sampler::LogDensity;
use math::{
    digamma, digamma_rising, half_normal_ln_pdf, ln_factorial, ln_gamma, ln_rising, softplus,
    softplus_sigmoid, LN_2PI,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Log mass of the negative binomial with mean `mu` and dispersion `w`:
/// `Γ(y+w) / (Γ(w) y!) · (w/(w+μ))^w · (μ/(w+μ))^y`.
pub fn nb_log_pmf(y: u32, mu: f64, w: f64) -> Result<f64, ModelError> {
    if !(mu > 0.0) || !(w > 0.0) || !mu.is_finite() || !w.is_finite() {
        return Err(ModelError::Domain(format!(
            "negative binomial needs mu > 0 and w > 0, got mu={mu}, w={w}"
        )));
    }
    Ok(nb_log_pmf_log_mean(y, mu.ln(), w))
}

fn nb_log_pmf_log_mean(y: u32, log_mu: f64, w: f64) -> f64 {
    let x = log_mu - w.ln();
    let sp = softplus(x);
    let y_f = y as f64;
    ln_rising(w, y) - ln_factorial(y) + y_f * x - (w + y_f) * sp
}

/// Prior hyperparameters and fixed constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    /// Scale of the half-normal prior on each `μ_ρk`.
    pub sigma_mu_rho: f64,
    /// Scale of the half-normal prior on each `σ²_ρk`.
    pub tau: f64,
    /// Scale of the half-normal prior on each `w_k`.
    pub sigma_w: f64,
    /// Fixed mean of the log-degree distribution.
    pub mu_delta: f64,
    /// Upper bound of the uniform prior on `σ_δ`.
    pub sigma_delta_upper: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            sigma_mu_rho: 10.0,
            tau: 1.0,
            sigma_w: 10.0,
            mu_delta: 5.5,
            sigma_delta_upper: 1.5,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("sigma_mu_rho", self.sigma_mu_rho),
            ("tau", self.tau),
            ("sigma_w", self.sigma_w),
            ("sigma_delta_upper", self.sigma_delta_upper),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.mu_delta.is_finite() {
            return Err(ModelError::Domain("mu_delta must be finite".into()));
        }
        Ok(())
    }
}

/// Offsets into the flat parameter vector
/// `[μ_ρ (K) | σ²_ρ (K) | ρ (K×M, row-major by group) | w (K) | δ (R) | σ_δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub groups: usize,
    pub munis: usize,
    pub respondents: usize,
}

impl Layout {
    pub fn new(groups: usize, munis: usize, respondents: usize) -> Self {
        Self {
            groups,
            munis,
            respondents,
        }
    }
    pub fn dim(&self) -> usize {
        3 * self.groups + self.groups * self.munis + self.respondents + 1
    }
    pub fn mu_rho(&self, k: usize) -> usize {
        k
    }
    pub fn sigma2_rho(&self, k: usize) -> usize {
        self.groups + k
    }
    pub fn rho(&self, k: usize, m: usize) -> usize {
        2 * self.groups + k * self.munis + m
    }
    pub fn w(&self, k: usize) -> usize {
        2 * self.groups + self.groups * self.munis + k
    }
    pub fn delta(&self, i: usize) -> usize {
        3 * self.groups + self.groups * self.munis + i
    }
    pub fn sigma_delta(&self) -> usize {
        self.dim() - 1
    }
    pub fn param_names(&self) -> Vec<String> {
        let (k, m, r) = (self.groups, self.munis, self.respondents);
        let mut names = Vec::with_capacity(self.dim());
        names.extend((0..k).map(|k| format!("mu_rho[{k}]")));
        names.extend((0..k).map(|k| format!("sigma2_rho[{k}]")));
        for g in 0..k {
            names.extend((0..m).map(|mm| format!("rho[{g}][{mm}]")));
        }
        names.extend((0..k).map(|k| format!("w[{k}]")));
        names.extend((0..r).map(|i| format!("delta[{i}]")));
        names.push("sigma_delta".to_string());
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub layout: Layout,
    pub muni_of_respondent: Vec<usize>,
}

/// Parameters on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedParams {
    pub mu_rho: Vec<f64>,
    pub sigma2_rho: Vec<f64>,
    /// `rho[k][m]`
    pub rho: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma_delta: f64,
}

/// Map the unconstrained vector onto natural-scale parameters.
pub fn constrain(layout: &Layout, hyper: &HyperConfig, theta: &[f64]) -> ConstrainedParams {
    let (k, m) = (layout.groups, layout.munis);
    let exp_slice = |r: std::ops::Range<usize>| theta[r].iter().map(|v| v.exp()).collect();
    ConstrainedParams {
        mu_rho: exp_slice(0..k),
        sigma2_rho: exp_slice(k..2 * k),
        rho: (0..k)
            .map(|g| exp_slice(layout.rho(g, 0)..layout.rho(g, 0) + m))
            .collect(),
        w: exp_slice(layout.w(0)..layout.w(0) + k),
        delta: theta[layout.delta(0)..layout.delta(0) + layout.respondents].to_vec(),
        sigma_delta: scaled_logistic(theta[layout.sigma_delta()], hyper.sigma_delta_upper),
    }
}

/// Inverse of [`constrain`].
pub fn unconstrain(
    layout: &Layout,
    hyper: &HyperConfig,
    params: &ConstrainedParams,
) -> Result<Vec<f64>, ModelError> {
    let (k, m) = (layout.groups, layout.munis);
    let shape_ok = params.mu_rho.len() == k
        && params.sigma2_rho.len() == k
        && params.rho.len() == k
        && params.rho.iter().all(|r| r.len() == m)
        && params.w.len() == k
        && params.delta.len() == layout.respondents;
    if !shape_ok {
        return Err(ModelError::Domain("parameter shapes do not match layout".into()));
    }
    let mut theta = Vec::with_capacity(layout.dim());
    let mut push_log = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            theta.push(v.ln());
            Ok(())
        } else {
            Err(ModelError::Domain(format!("{name} must be positive, got {v}")))
        }
    };
    for &v in &params.mu_rho {
        push_log("mu_rho", v)?;
    }
    for &v in &params.sigma2_rho {
        push_log("sigma2_rho", v)?;
    }
    for row in &params.rho {
        for &v in row {
            push_log("rho", v)?;
        }
    }
    for &v in &params.w {
        push_log("w", v)?;
    }
    if params.delta.iter().any(|d| !d.is_finite()) {
        return Err(ModelError::Domain("delta must be finite".into()));
    }
    theta.extend_from_slice(&params.delta);
    let (s, upper) = (params.sigma_delta, hyper.sigma_delta_upper);
    if !(s > 0.0 && s < upper) {
        return Err(ModelError::Domain(format!(
            "sigma_delta must lie in (0, {upper}), got {s}"
        )));
    }
    theta.push((s / (upper - s)).ln());
    Ok(theta)
}

fn scaled_logistic(v: f64, upper: f64) -> f64 {
    upper * softplus_sigmoid(v).1
}

/// The model bound to a count matrix.
#[derive(Debug, Clone)]
pub struct NsumModel {
    dims: ModelDims,
    hyper: HyperConfig,
    /// Row-major R×K.
    counts: Vec<u32>,
    /// Per group: `(value, multiplicity)` of each distinct nonzero count.
    histograms: Vec<Vec<(u32, u32)>>,
    ln_factorial_total: f64,
}

impl NsumModel {
    /// Bind counts (`counts[i][k]`) for respondents living in `muni_of_respondent[i]`.
    /// `R = 0` is allowed and yields the prior.
    pub fn new(
        groups: usize,
        munis: usize,
        muni_of_respondent: Vec<usize>,
        counts: &[Vec<u32>],
        hyper: HyperConfig,
    ) -> Result<Self, ModelError> {
        hyper.validate()?;
        if groups == 0 || munis == 0 {
            return Err(ModelError::Domain("need at least one group and municipality".into()));
        }
        if counts.len() != muni_of_respondent.len() {
            return Err(ModelError::DimensionMismatch {
                expected: muni_of_respondent.len(),
                found: counts.len(),
            });
        }
        if let Some(bad) = counts.iter().find(|row| row.len() != groups) {
            return Err(ModelError::DimensionMismatch {
                expected: groups,
                found: bad.len(),
            });
        }
        if muni_of_respondent.iter().any(|&m| m >= munis) {
            return Err(ModelError::Domain("respondent municipality out of range".into()));
        }
        let flat: Vec<u32> = counts.iter().flatten().copied().collect();
        let histograms = (0..groups)
            .map(|k| {
                let mut vals: Vec<u32> = counts.iter().map(|r| r[k]).filter(|&y| y > 0).collect();
                vals.sort_unstable();
                let mut hist: Vec<(u32, u32)> = Vec::new();
                for v in vals {
                    match hist.last_mut() {
                        Some((last, c)) if *last == v => *c += 1,
                        _ => hist.push((v, 1)),
                    }
                }
                hist
            })
            .collect();
        let ln_factorial_total = flat.iter().map(|&y| ln_factorial(y)).sum();
        Ok(Self {
            dims: ModelDims {
                layout: Layout::new(groups, munis, counts.len()),
                muni_of_respondent,
            },
            hyper,
            counts: flat,
            histograms,
            ln_factorial_total,
        })
    }

    pub fn from_dataset(data: &ARDataset, hyper: HyperConfig) -> Result<Self, ModelError> {
        Self::new(
            data.n_groups(),
            data.n_municipalities(),
            data.muni_of_respondent().to_vec(),
            data.counts(),
            hyper,
        )
    }

    pub fn layout(&self) -> Layout {
        self.dims.layout
    }
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }
    pub fn hyper(&self) -> &HyperConfig {
        &self.hyper
    }

    fn check_len(&self, theta: &[f64]) -> Result<(), ModelError> {
        let expected = self.dims.layout.dim();
        if theta.len() != expected {
            return Err(ModelError::DimensionMismatch {
                expected,
                found: theta.len(),
            });
        }
        Ok(())
    }

    /// Unnormalised log posterior on the unconstrained scale, including every
    /// normalising constant of the priors and the log-Jacobian of the transforms.
    pub fn log_posterior(&self, theta: &[f64]) -> Result<f64, ModelError> {
        self.check_len(theta)?;
        let mut grad = vec![0.0; theta.len()];
        Ok(self.eval(theta, &mut grad))
    }

    pub fn grad_log_posterior(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_len(theta)?;
        let mut grad = vec![0.0; theta.len()];
        self.eval(theta, &mut grad);
        Ok(grad)
    }

    pub fn constrain(&self, theta: &[f64]) -> ConstrainedParams {
        constrain(&self.dims.layout, &self.hyper, theta)
    }

    pub fn unconstrain(&self, params: &ConstrainedParams) -> Result<Vec<f64>, ModelError> {
        unconstrain(&self.dims.layout, &self.hyper, params)
    }

    /// Count log likelihood summed cell by cell through [`nb_log_pmf`].
    pub fn log_likelihood(&self, params: &ConstrainedParams) -> f64 {
        let k_n = self.dims.layout.groups;
        let mut total = 0.0;
        for (i, &m) in self.dims.muni_of_respondent.iter().enumerate() {
            for k in 0..k_n {
                let log_mu = params.delta[i] - params.rho[k][m];
                total += nb_log_pmf_log_mean(self.counts[i * k_n + k], log_mu, params.w[k]);
            }
        }
        total
    }

    /// Log posterior with its gradient written into `grad`.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let layout = &self.dims.layout;
        let (kn, mn, rn) = (layout.groups, layout.munis, layout.respondents);
        let h = &self.hyper;
        grad.fill(0.0);
        let mut lp = 0.0;

        let log_rho = &theta[layout.rho(0, 0)..layout.rho(0, 0) + kn * mn];
        let rho: Vec<f64> = log_rho.iter().map(|u| u.exp()).collect();
        let log_w = &theta[layout.w(0)..layout.w(0) + kn];
        let w: Vec<f64> = log_w.iter().map(|v| v.exp()).collect();
        let delta = &theta[layout.delta(0)..layout.delta(0) + rn];

        // Likelihood. `g_rho` collects ∂ℓ/∂ρ on the natural scale, `g_w` ∂ℓ/∂w
        // without the digamma terms (added from the histograms below).
        let mut g_rho = vec![0.0; kn * mn];
        let mut g_w = vec![0.0; kn];
        let delta_off = layout.delta(0);
        for (i, (&m, &d)) in self.dims.muni_of_respondent.iter().zip(delta).enumerate() {
            let row = &self.counts[i * kn..(i + 1) * kn];
            let mut g_delta = 0.0;
            for k in 0..kn {
                let y = row[k] as f64;
                let x = d - rho[k * mn + m] - log_w[k];
                let (sp, p) = softplus_sigmoid(x);
                lp += y * x - (w[k] + y) * sp;
                let q = 1.0 - p;
                let g_eta = y * q - w[k] * p;
                g_delta += g_eta;
                g_rho[k * mn + m] -= g_eta;
                g_w[k] += p - sp - y * q / w[k];
            }
            grad[delta_off + i] = g_delta;
        }
        for k in 0..kn {
            for &(v, c) in &self.histograms[k] {
                lp += c as f64 * ln_rising(w[k], v);
                g_w[k] += c as f64 * digamma_rising(w[k], v);
            }
        }
        lp -= self.ln_factorial_total;

        // ρ_km ~ Gamma(α_k, β_k) with α = μ²/σ², β = μ/σ².
        for k in 0..kn {
            let a = theta[layout.mu_rho(k)];
            let b = theta[layout.sigma2_rho(k)];
            let ln_beta = a - b;
            let alpha = (2.0 * a - b).exp();
            let beta = ln_beta.exp();
            let us = &log_rho[k * mn..(k + 1) * mn];
            let rs = &rho[k * mn..(k + 1) * mn];
            let sum_u: f64 = us.iter().sum();
            let sum_r: f64 = rs.iter().sum();
            let mf = mn as f64;
            // (α−1)·ln ρ plus the log-Jacobian ln ρ.
            lp += mf * (alpha * ln_beta - ln_gamma(alpha)) + alpha * sum_u - beta * sum_r;
            let d_alpha = mf * (ln_beta - digamma(alpha)) + sum_u;
            let d_beta = mf * alpha / beta - sum_r;
            grad[layout.mu_rho(k)] += 2.0 * alpha * d_alpha + beta * d_beta;
            grad[layout.sigma2_rho(k)] -= alpha * d_alpha + beta * d_beta;
            for m in 0..mn {
                let r = rs[m];
                grad[layout.rho(k, m)] = (g_rho[k * mn + m] - beta) * r + alpha;
            }
        }

        // Half-normal hyperpriors, each with the log-Jacobian of exp.
        for k in 0..kn {
            for (idx, scale) in [
                (layout.mu_rho(k), h.sigma_mu_rho),
                (layout.sigma2_rho(k), h.tau),
                (layout.w(k), h.sigma_w),
            ] {
                let u = theta[idx];
                let x = u.exp();
                lp += half_normal_ln_pdf(x, scale) + u;
                grad[idx] += 1.0 - x * x / (scale * scale);
            }
            grad[layout.w(k)] += w[k] * g_w[k];
        }

        // δ_i ~ Normal(μ_δ, σ_δ²), σ_δ = upper · logistic(v) ~ Uniform(0, upper).
        let v = theta[layout.sigma_delta()];
        let upper = h.sigma_delta_upper;
        let (sp_v, s) = softplus_sigmoid(v);
        let sigma = upper * s;
        let var = sigma * sigma;
        let mut ss = 0.0;
        for (i, &d) in delta.iter().enumerate() {
            let z = d - h.mu_delta;
            ss += z * z;
            grad[delta_off + i] -= z / var;
        }
        let rf = rn as f64;
        lp += -rf * (0.5 * LN_2PI + sigma.ln()) - ss / (2.0 * var);
        lp -= upper.ln();
        // ln J = ln upper + ln s + ln(1 − s); softplus(v) − v = softplus(−v).
        let ln_s = -(sp_v - v);
        let ln_1ms = -sp_v;
        lp += upper.ln() + ln_s + ln_1ms;
        let d_sigma = -rf / sigma + ss / (var * sigma);
        grad[layout.sigma_delta()] = d_sigma * upper * s * (1.0 - s) + (1.0 - 2.0 * s);

        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }
}

impl LogDensity for NsumModel {
    fn dim(&self) -> usize {
        self.dims.layout.dim()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(theta, grad)
    }

    fn constrain_into(&self, theta: &[f64], out: &mut [f64]) {
        let layout = &self.dims.layout;
        let sd = layout.sigma_delta();
        let delta = layout.delta(0)..layout.delta(0) + layout.respondents;
        for (j, (o, &t)) in out.iter_mut().zip(theta).enumerate() {
            *o = if j == sd {
                scaled_logistic(t, self.hyper.sigma_delta_upper)
            } else if delta.contains(&j) {
                t
            } else {
                t.exp()
            };
        }
    }

    fn param_names(&self) -> Vec<String> {
        self.dims.layout.param_names()
    }

    fn layout(&self) -> Option<Layout> {
        Some(self.dims.layout)
    }
}

#[cfg(test)]
mod tests;
