//! Synthetic surveys drawn from the model's own generative story.

mod study;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ard::{ARDataset, ArdError, GroupSpec, Metadata, Municipality};
use crate::rng::{self, tags};

pub use study::{run_simulation_study, CellFailure, FitModel, StudyConfig, StudyResult, StudyRow};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Ard(#[from] ArdError),
}

/// Shape and rate of the Gamma with the given mean and variance.
pub fn gamma_from_mean_var(mu: f64, var: f64) -> Result<(f64, f64), SimError> {
    if !(mu > 0.0 && var > 0.0 && mu.is_finite() && var.is_finite()) {
        return Err(SimError::Domain(format!(
            "gamma needs positive mean and variance, got ({mu}, {var})"
        )));
    }
    Ok((mu * mu / var, mu / var))
}

/// Everything about a simulated population except the realised `ρ` and `δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTemplate {
    pub group_names: Vec<String>,
    pub mu_rho: Vec<f64>,
    pub sigma_rho: Vec<f64>,
    pub w: Vec<f64>,
    pub mu_delta: f64,
    pub sigma_delta: f64,
    /// The first `n_known` groups are treated as known.
    pub n_known: usize,
    pub population: u64,
}

impl Default for SimTemplate {
    /// Six groups, four of them known.
    fn default() -> Self {
        Self {
            group_names: ["known1", "known2", "known3", "known4", "hidden1", "hidden2"]
                .map(String::from)
                .to_vec(),
            mu_rho: vec![2.5, 3.5, 4.5, 5.0, 5.5, 6.5],
            sigma_rho: vec![1.0; 6],
            w: vec![35.0, 35.0, 35.0, 35.0, 2.0, 0.3],
            mu_delta: 5.5,
            sigma_delta: 1.0,
            n_known: 4,
            population: 50_000,
        }
    }
}

impl SimTemplate {
    pub fn validate(&self) -> Result<(), SimError> {
        let k = self.group_names.len();
        if k < 2 || self.mu_rho.len() != k || self.sigma_rho.len() != k || self.w.len() != k {
            return Err(SimError::Domain(
                "group names, mu_rho, sigma_rho and w must share a length of at least 2".into(),
            ));
        }
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if !positive(&self.mu_rho) || !positive(&self.sigma_rho) || !positive(&self.w) {
            return Err(SimError::Domain("mu_rho, sigma_rho and w must be positive".into()));
        }
        if !(self.sigma_delta > 0.0) || !self.mu_delta.is_finite() {
            return Err(SimError::Domain("sigma_delta must be positive".into()));
        }
        if self.n_known == 0 || self.n_known > k {
            return Err(SimError::Domain(format!("n_known must lie in 1..={k}")));
        }
        if self.population == 0 {
            return Err(SimError::Domain("population must be positive".into()));
        }
        Ok(())
    }
}

/// Realised parameters of one simulated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub group_names: Vec<String>,
    pub mu_rho: Vec<f64>,
    pub sigma_rho: Vec<f64>,
    pub w: Vec<f64>,
    pub mu_delta: f64,
    pub sigma_delta: f64,
    pub n_known: usize,
    pub populations: Vec<u64>,
    /// `rho[k][m]`
    pub rho: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
}

impl TrueParams {
    pub fn groups(&self) -> usize {
        self.mu_rho.len()
    }
    pub fn municipalities(&self) -> usize {
        self.populations.len()
    }

    /// True sizes `N_m · exp(−ρ_km)` as `[k][m]`.
    pub fn true_sizes(&self) -> Vec<Vec<f64>> {
        self.rho
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.populations)
                    .map(|(r, &n)| n as f64 * (-r).exp())
                    .collect()
            })
            .collect()
    }
}

/// Draw `ρ_km ~ Gamma` with the template's mean and variance, and
/// `δ_i ~ Normal(μ_δ, σ_δ²)`.
pub fn draw_true_params(
    template: &SimTemplate,
    munis: usize,
    respondents: usize,
    seed: u64,
) -> Result<TrueParams, SimError> {
    template.validate()?;
    if munis == 0 || respondents == 0 {
        return Err(SimError::Domain("need at least one municipality and respondent".into()));
    }
    let mut rng = rng::stream(seed, &[tags::TRUE_PARAMS]);
    let mut rho = Vec::with_capacity(template.mu_rho.len());
    for (&mu, &sd) in template.mu_rho.iter().zip(&template.sigma_rho) {
        let (alpha, beta) = gamma_from_mean_var(mu, sd * sd)?;
        let g = Gamma::new(alpha, 1.0 / beta).map_err(|e| SimError::Domain(e.to_string()))?;
        rho.push((0..munis).map(|_| g.sample(&mut rng)).collect());
    }
    let normal = Normal::new(template.mu_delta, template.sigma_delta)
        .map_err(|e| SimError::Domain(e.to_string()))?;
    let delta = (0..respondents).map(|_| normal.sample(&mut rng)).collect();
    Ok(TrueParams {
        group_names: template.group_names.clone(),
        mu_rho: template.mu_rho.clone(),
        sigma_rho: template.sigma_rho.clone(),
        w: template.w.clone(),
        mu_delta: template.mu_delta,
        sigma_delta: template.sigma_delta,
        n_known: template.n_known,
        populations: vec![template.population; munis],
        rho,
        delta,
    })
}

/// Negative binomial with mean `mu` and dispersion `w`, as a Gamma–Poisson mixture.
pub fn sample_negbin<R: Rng + ?Sized>(rng: &mut R, mu: f64, w: f64) -> u32 {
    let lambda = Gamma::new(w, mu / w)
        .expect("positive gamma parameters")
        .sample(rng);
    if !(lambda > 0.0) {
        return 0;
    }
    let y: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
    y.min(u32::MAX as f64) as u32
}

/// `n` respondents in each of `munis` municipalities, grouped by municipality.
pub fn balanced_assignment(munis: usize, per_municipality: usize) -> Vec<usize> {
    (0..munis).flat_map(|m| std::iter::repeat_n(m, per_municipality)).collect()
}

/// Counts `y_ik ~ NegBin(exp(δ_i − ρ_{k,m(i)}), w_k)`. The first `n_known`
/// groups are marked known with their realised prevalences.
pub fn simulate_ard(params: &TrueParams, muni_of_respondent: &[usize], seed: u64) -> Result<ARDataset, SimError> {
    let (kn, mn) = (params.groups(), params.municipalities());
    if muni_of_respondent.len() != params.delta.len() {
        return Err(SimError::Domain(format!(
            "{} assignments for {} respondents",
            muni_of_respondent.len(),
            params.delta.len()
        )));
    }
    if muni_of_respondent.iter().any(|&m| m >= mn) {
        return Err(SimError::Domain("assignment names an unknown municipality".into()));
    }
    let mut rng = rng::stream(seed, &[tags::COUNTS]);
    let counts: Vec<Vec<u32>> = muni_of_respondent
        .iter()
        .zip(&params.delta)
        .map(|(&m, &d)| {
            (0..kn)
                .map(|k| sample_negbin(&mut rng, (d - params.rho[k][m]).exp(), params.w[k]))
                .collect()
        })
        .collect();
    let groups = (0..kn)
        .map(|k| {
            let known = k < params.n_known;
            GroupSpec {
                id: k,
                name: params.group_names[k].clone(),
                known,
                known_prevalence: known.then(|| params.rho[k].iter().map(|r| (-r).exp()).collect()),
            }
        })
        .collect();
    let municipalities = params
        .populations
        .iter()
        .enumerate()
        .map(|(id, &population)| Municipality {
            id,
            name: format!("m{id:03}"),
            population,
        })
        .collect();
    let metadata = Metadata::new(groups, municipalities, None, format!("simulated, seed {seed}"))?;
    let ids = (0..counts.len()).map(|i| format!("r{i}")).collect();
    Ok(ARDataset::new(metadata, ids, muni_of_respondent.to_vec(), counts)?)
}
