//! Hamiltonian Monte Carlo with warmup adaptation.
//!
//! Each transition draws a Gaussian momentum under a diagonal metric and runs a
//! leapfrog trajectory whose step count is drawn uniformly from
//! `⌈t_min / ε⌉..=⌈t_max / ε⌉` (clamped to `1..=leapfrog_max_steps`), followed
//! by a Metropolis correction. Warmup opens with a bounded L-BFGS climb from
//! the random initial point, which pulls hierarchical models out of the far
//! tails where a diagonal metric crawls. During the rest of warmup the step
//! size `ε` is tuned by dual averaging towards `target_accept`, and the
//! diagonal metric is re-estimated from the unconstrained draws of a sequence
//! of doubling windows (the last and longest of which spans the second half of
//! warmup).

mod draws;
mod lbfgs;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Layout;
use crate::rng::{self, tags, StreamRng};

pub use draws::{DrawsIoError, IterStats, PosteriorDraws};

/// Energy error beyond which a trajectory is flagged divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;
const MIN_STEP_SIZE: f64 = 1e-12;
const METRIC_FLOOR: f64 = 1e-6;
/// Iteration cap of the L-BFGS climb that opens warmup.
const WARMUP_ASCENT_ITERS: usize = 1000;
/// The climb is undone if the step size it leaves room for shrinks by more than this.
const ASCENT_MAX_STEP_SHRINK: f64 = 1e-3;
const TMIN: f64 = std::f64::consts::FRAC_PI_4;
const TMAX: f64 = 3.0 * std::f64::consts::FRAC_PI_4;

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density at `theta`; writes the gradient into `grad`.
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    /// Map an unconstrained point to the scale draws are reported on.
    fn constrain_into(&self, theta: &[f64], out: &mut [f64]) {
        out.copy_from_slice(theta);
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|j| format!("theta[{j}]")).collect()
    }

    fn layout(&self) -> Option<Layout> {
        None
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("chain {chain}: step size adaptation failed (step size {step_size:e})")]
    AdaptationFailure { chain: usize, step_size: f64 },
    #[error("chain {chain}: could not find an initial point with finite log density")]
    NoFiniteInit { chain: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub leapfrog_max_steps: usize,
    /// Lower end of the jittered trajectory duration `steps · ε`.
    pub integration_time_min: f64,
    /// Upper end of the jittered trajectory duration.
    pub integration_time_max: f64,
    pub seed: u64,
    /// Half-width of the uniform box the unconstrained initial point is drawn from.
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            iterations: 5000,
            warmup: 3000,
            target_accept: 0.8,
            leapfrog_max_steps: 1024,
            integration_time_min: TMIN,
            integration_time_max: TMAX,
            seed: 0,
            init_jitter: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let fail = |msg: &str| Err(SamplerError::InvalidConfig(msg.to_string()));
        if self.chains < 1 || self.iterations < 1 || self.leapfrog_max_steps < 1 {
            return fail("chains, iterations and leapfrog_max_steps must be at least 1");
        }
        if self.warmup >= self.iterations {
            return fail("warmup must be smaller than iterations");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return fail("target_accept must lie in (0, 1)");
        }
        if !(self.integration_time_min > 0.0
            && self.integration_time_min <= self.integration_time_max
            && self.integration_time_max.is_finite())
        {
            return fail("integration times must satisfy 0 < min <= max < inf");
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return fail("init_jitter must be non-negative");
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        self.iterations - self.warmup
    }
}

/// Initial unconstrained point: every coordinate uniform on `[-jitter, jitter]`.
pub fn init_chain(dim: usize, seed: u64, chain: usize, jitter: f64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[tags::INIT, chain as u64]);
    init_from(&mut rng, dim, jitter)
}

fn init_from(rng: &mut StreamRng, dim: usize, jitter: f64) -> Vec<f64> {
    if jitter == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim).map(|_| rng.random_range(-jitter..=jitter)).collect()
}

/// Run `cfg.chains` independent chains (in parallel) and collect their kept draws.
pub fn sample<D: LogDensity>(model: &D, cfg: &SamplerConfig) -> Result<PosteriorDraws, SamplerError> {
    cfg.validate()?;
    let results: Vec<Result<ChainOutput, SamplerError>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(model, cfg, c))
        .collect();
    let mut values = Vec::with_capacity(cfg.chains * cfg.kept() * model.dim());
    let mut stats = Vec::with_capacity(cfg.chains * cfg.kept());
    let mut warmup_divergences = Vec::with_capacity(cfg.chains);
    for r in results {
        let out = r?;
        values.extend(out.values);
        stats.extend(out.stats);
        warmup_divergences.push(out.warmup_divergences);
    }
    Ok(PosteriorDraws::new(
        model.param_names(),
        model.layout(),
        cfg.clone(),
        values,
        stats,
        warmup_divergences,
    ))
}

struct ChainOutput {
    values: Vec<f64>,
    stats: Vec<IterStats>,
    warmup_divergences: usize,
}

struct Transition {
    accept_stat: f64,
    divergent: bool,
    n_steps: usize,
}

/// One chain's mutable state plus scratch buffers.
struct Chain<'a, D: LogDensity> {
    model: &'a D,
    rng: StreamRng,
    theta: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
    inv_metric: Vec<f64>,
    q: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
}

impl<'a, D: LogDensity> Chain<'a, D> {
    fn draw_momentum(&mut self) {
        for (p, &im) in self.p.iter_mut().zip(&self.inv_metric) {
            let z: f64 = self.rng.sample(StandardNormal);
            *p = z / im.sqrt();
        }
    }

    fn kinetic(&self) -> f64 {
        0.5 * self
            .p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, im)| p * p * im)
            .sum::<f64>()
    }

    /// Integrate `n_steps` leapfrog steps from the current state into `q, p, g`.
    /// Returns the final log density and whether the energy error blew up.
    fn integrate(&mut self, eps: f64, n_steps: usize, h0: f64) -> (f64, usize, bool) {
        self.q.copy_from_slice(&self.theta);
        self.g.copy_from_slice(&self.grad);
        let mut lp = self.logp;
        for step in 1..=n_steps {
            for (p, g) in self.p.iter_mut().zip(&self.g) {
                *p += 0.5 * eps * g;
            }
            for ((q, p), im) in self.q.iter_mut().zip(&self.p).zip(&self.inv_metric) {
                *q += eps * im * p;
            }
            lp = self.model.logp_grad(&self.q, &mut self.g);
            for (p, g) in self.p.iter_mut().zip(&self.g) {
                *p += 0.5 * eps * g;
            }
            let h = -lp + self.kinetic();
            if !(h - h0 <= DIVERGENCE_THRESHOLD) {
                return (lp, step, true);
            }
        }
        (lp, n_steps, false)
    }

    fn transition(&mut self, eps: f64, n_steps: usize) -> Transition {
        self.draw_momentum();
        let h0 = -self.logp + self.kinetic();
        let (lp, taken, divergent) = self.integrate(eps, n_steps, h0);
        let h1 = -lp + self.kinetic();
        let accept_stat = if divergent || !h1.is_finite() {
            0.0
        } else {
            (h0 - h1).exp().min(1.0)
        };
        let u: f64 = self.rng.random();
        if u < accept_stat {
            std::mem::swap(&mut self.theta, &mut self.q);
            std::mem::swap(&mut self.grad, &mut self.g);
            self.logp = lp;
        }
        Transition {
            accept_stat,
            divergent,
            n_steps: taken,
        }
    }

    /// Energy change of a single leapfrog step from the current state, as ln acceptance.
    fn one_step_log_accept(&mut self, eps: f64) -> f64 {
        self.draw_momentum();
        let h0 = -self.logp + self.kinetic();
        let (lp, _, divergent) = self.integrate(eps, 1, h0);
        if divergent {
            return f64::NEG_INFINITY;
        }
        let h1 = -lp + self.kinetic();
        if h1.is_finite() {
            h0 - h1
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Double or halve `eps` until one-step acceptance crosses 0.8.
    fn reasonable_step_size(&mut self, mut eps: f64, chain: usize) -> Result<f64, SamplerError> {
        let threshold = 0.8f64.ln();
        let up = self.one_step_log_accept(eps) > threshold;
        for _ in 0..200 {
            let next = if up { eps * 2.0 } else { eps * 0.5 };
            if next < MIN_STEP_SIZE {
                return Err(SamplerError::AdaptationFailure {
                    chain,
                    step_size: next,
                });
            }
            if next > 1e7 {
                break;
            }
            let h = self.one_step_log_accept(next);
            if up && !(h > threshold) {
                break;
            }
            eps = next;
            if !up && !(h < threshold) {
                break;
            }
        }
        Ok(eps)
    }
}

/// Nesterov dual averaging of ln ε.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.t += 1.0;
        let eta = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let weight = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Metric estimation windows `[start, end)` over warmup iterations.
pub(crate) fn metric_windows(warmup: usize) -> Vec<(usize, usize)> {
    if warmup < 20 {
        return Vec::new();
    }
    let (init, term, base) = if 75 + 25 + 50 > warmup {
        let init = (0.15 * warmup as f64) as usize;
        let term = (0.1 * warmup as f64) as usize;
        (init, term, warmup - init - term)
    } else {
        (75, 50, 25)
    };
    let slow_end = warmup - term;
    let mut windows = Vec::new();
    let (mut start, mut size) = (init, base);
    while start < slow_end {
        let mut end = (start + size).min(slow_end);
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        windows.push((start, end));
        start = end;
        size *= 2;
    }
    windows
}

/// Streaming mean and variance (Welford).
#[derive(Debug, Clone)]
struct RunningVariance {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((mean, m2), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *mean;
            *mean += d / self.n;
            *m2 += d * (v - *mean);
        }
    }

    /// Sample variance shrunk towards 1e-3, floored at `METRIC_FLOOR`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0).max(1.0);
                ((n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))).max(METRIC_FLOOR)
            })
            .collect()
    }
}

/// Inclusive range of leapfrog step counts for step size `eps`.
fn step_range(cfg: &SamplerConfig, eps: f64) -> std::ops::RangeInclusive<usize> {
    let steps = |t: f64| {
        let n = (t / eps).ceil();
        if n.is_finite() {
            (n as usize).clamp(1, cfg.leapfrog_max_steps)
        } else {
            cfg.leapfrog_max_steps
        }
    };
    steps(cfg.integration_time_min)..=steps(cfg.integration_time_max)
}

fn run_chain<D: LogDensity>(
    model: &D,
    cfg: &SamplerConfig,
    chain_id: usize,
) -> Result<ChainOutput, SamplerError> {
    let dim = model.dim();
    let mut init_rng = rng::stream(cfg.seed, &[tags::INIT, chain_id as u64]);
    let mut theta = init_from(&mut init_rng, dim, cfg.init_jitter);
    let mut grad = vec![0.0; dim];
    let mut logp = model.logp_grad(&theta, &mut grad);
    let mut attempts = 0;
    while !(logp.is_finite() && grad.iter().all(|g| g.is_finite())) {
        attempts += 1;
        if attempts > 100 {
            return Err(SamplerError::NoFiniteInit { chain: chain_id });
        }
        theta = init_from(&mut init_rng, dim, cfg.init_jitter);
        logp = model.logp_grad(&theta, &mut grad);
    }

    let mut chain = Chain {
        model,
        rng: rng::stream(cfg.seed, &[tags::CHAIN, chain_id as u64]),
        theta,
        grad,
        logp,
        inv_metric: vec![1.0; dim],
        q: vec![0.0; dim],
        p: vec![0.0; dim],
        g: vec![0.0; dim],
    };

    let mut eps = chain.reasonable_step_size(1.0, chain_id)?;
    if cfg.warmup > 0 {
        // Keep the climb unless it slid into a funnel neck, which shows up as a
        // collapse of the usable step size.
        let start = (chain.theta.clone(), chain.grad.clone(), chain.logp);
        lbfgs::ascend(model, &mut chain.theta, &mut chain.grad, &mut chain.logp, WARMUP_ASCENT_ITERS, 1e-9);
        match chain.reasonable_step_size(1.0, chain_id) {
            Ok(e) if e >= ASCENT_MAX_STEP_SHRINK * eps => eps = e,
            _ => (chain.theta, chain.grad, chain.logp) = start,
        }
    }
    let mut adapt = DualAveraging::new(eps, cfg.target_accept);
    let windows = metric_windows(cfg.warmup);
    let mut window_idx = 0;
    let mut window_var = RunningVariance::new(dim);
    let mut warmup_divergences = 0;

    for it in 0..cfg.warmup {
        let n_steps = chain.rng.random_range(step_range(cfg, eps));
        let tr = chain.transition(eps, n_steps);
        warmup_divergences += tr.divergent as usize;
        eps = adapt.update(tr.accept_stat);
        if eps < MIN_STEP_SIZE || !eps.is_finite() {
            return Err(SamplerError::AdaptationFailure {
                chain: chain_id,
                step_size: eps,
            });
        }
        if let Some(&(start, end)) = windows.get(window_idx) {
            if it >= start && it < end {
                window_var.push(&chain.theta);
            }
            if it + 1 == end {
                chain.inv_metric = window_var.regularized();
                window_var = RunningVariance::new(dim);
                window_idx += 1;
                eps = chain.reasonable_step_size(eps, chain_id)?;
                adapt = DualAveraging::new(eps, cfg.target_accept);
            }
        }
    }
    if cfg.warmup > 0 {
        eps = adapt.final_step_size();
        if eps < MIN_STEP_SIZE || !eps.is_finite() {
            return Err(SamplerError::AdaptationFailure {
                chain: chain_id,
                step_size: eps,
            });
        }
    }

    let kept = cfg.kept();
    let mut values = vec![0.0; kept * dim];
    let mut stats = Vec::with_capacity(kept);
    for out in values.chunks_exact_mut(dim) {
        let n_steps = chain.rng.random_range(step_range(cfg, eps));
        let tr = chain.transition(eps, n_steps);
        model.constrain_into(&chain.theta, out);
        stats.push(IterStats {
            accept_stat: tr.accept_stat,
            step_size: eps,
            n_leapfrog: tr.n_steps as u32,
            divergent: tr.divergent,
            log_density: chain.logp,
        });
    }
    Ok(ChainOutput {
        values,
        stats,
        warmup_divergences,
    })
}
