//! Limited-memory BFGS ascent used to move a chain out of the far tails
//! before the first HMC warmup transition.

use std::collections::VecDeque;

use super::LogDensity;

const MEMORY: usize = 7;
const MAX_BACKTRACK: usize = 40;
const ARMIJO: f64 = 1e-4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Climb `model` from `theta` for at most `max_iters` iterations, stopping
/// early once an iteration improves the log density by less than `tol`
/// (relative). `theta`, `grad` and `logp` are updated in place and are left at
/// the best point seen; returns the number of density evaluations.
pub(crate) fn ascend<D: LogDensity>(
    model: &D,
    theta: &mut Vec<f64>,
    grad: &mut Vec<f64>,
    logp: &mut f64,
    max_iters: usize,
    tol: f64,
) -> usize {
    let dim = theta.len();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut dir = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    let mut next_grad = vec![0.0; dim];
    let mut alpha = [0.0; MEMORY];
    let mut evals = 0;

    for _ in 0..max_iters {
        // Two-loop recursion on the ascent direction H·∇.
        dir.copy_from_slice(grad);
        for (j, (s, y, rho)) in history.iter().enumerate().rev() {
            alpha[j] = rho * dot(s, &dir);
            for (d, yv) in dir.iter_mut().zip(y) {
                *d -= alpha[j] * yv;
            }
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / grad.iter().map(|g| g.abs()).fold(1.0, f64::max),
        };
        for d in dir.iter_mut() {
            *d *= gamma;
        }
        for (j, (s, y, rho)) in history.iter().enumerate() {
            let beta = rho * dot(y, &dir);
            for (d, sv) in dir.iter_mut().zip(s) {
                *d += (alpha[j] - beta) * sv;
            }
        }
        let mut slope = dot(grad, &dir);
        if !(slope > 0.0) {
            history.clear();
            let scale = 1.0 / grad.iter().map(|g| g.abs()).fold(1.0, f64::max);
            for (d, g) in dir.iter_mut().zip(grad.iter()) {
                *d = scale * g;
            }
            slope = dot(grad, &dir);
            if !(slope > 0.0) {
                break;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            for ((n, t), d) in next.iter_mut().zip(theta.iter()).zip(&dir) {
                *n = t + step * d;
            }
            let lp = model.logp_grad(&next, &mut next_grad);
            evals += 1;
            if lp.is_finite()
                && next_grad.iter().all(|g| g.is_finite())
                && lp >= *logp + ARMIJO * step * slope
            {
                accepted = Some(lp);
                break;
            }
            step *= 0.5;
        }
        let Some(lp) = accepted else { break };

        let s: Vec<f64> = next.iter().zip(theta.iter()).map(|(a, b)| a - b).collect();
        // Ascent on f is descent on −f, whose gradient change is −(g₁ − g₀).
        let y: Vec<f64> = grad.iter().zip(&next_grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let gain = lp - *logp;
        std::mem::swap(theta, &mut next);
        std::mem::swap(grad, &mut next_grad);
        *logp = lp;
        if gain <= tol * (1.0 + lp.abs()) {
            break;
        }
    }
    evals
}
