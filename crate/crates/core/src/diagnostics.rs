//! Convergence diagnostics and the accuracy metric of the simulation study.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::sampler::PosteriorDraws;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least {needed} draws per split, got {found}")]
    TooFewDraws { needed: usize, found: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split R̂: every chain is cut in half and the halves are compared as if they
/// were separate chains. Chains are truncated to the shortest length.
///
/// Returns `+∞` when any split has zero variance.
pub fn split_rhat<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64, DiagnosticsError> {
    let n_min = chains.iter().map(|c| c.as_ref().len()).min().unwrap_or(0);
    let half = n_min / 2;
    if half < 4 {
        return Err(DiagnosticsError::TooFewDraws {
            needed: 4,
            found: half,
        });
    }
    let mut splits: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c.as_ref()[..n_min];
        // An odd draw out is dropped from the middle.
        splits.push(&c[..half]);
        splits.push(&c[n_min - half..]);
    }
    let vars: Vec<f64> = splits.iter().map(|s| sample_var(s)).collect();
    if vars.iter().any(|&v| !(v > 0.0)) {
        return Ok(f64::INFINITY);
    }
    let means: Vec<f64> = splits.iter().map(|s| mean(s)).collect();
    let n = half as f64;
    let w = mean(&vars);
    let b_over_n = sample_var(&means);
    Ok(((w * (n - 1.0) / n + b_over_n) / w).sqrt())
}

/// Effective sample size from the multi-chain autocorrelation, summed with
/// Geyer's initial monotone positive sequence and capped at 1.5 × total draws.
pub fn ess<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64, DiagnosticsError> {
    let n = chains.iter().map(|c| c.as_ref().len()).min().unwrap_or(0);
    let m = chains.len();
    if n < 2 || m == 0 {
        return Err(DiagnosticsError::Degenerate(format!(
            "ess needs at least 2 draws per chain, got {n}"
        )));
    }
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let c = &c.as_ref()[..n];
            let mu = mean(c);
            c.iter().map(|x| x - mu).collect()
        })
        .collect();
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(&c.as_ref()[..n])).collect();
    let nf = n as f64;
    let acov = |lag: usize| -> f64 {
        let total: f64 = centered
            .iter()
            .map(|c| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / nf)
            .sum();
        total / m as f64
    };
    let acov0 = acov(0);
    let w = acov0 * nf / (nf - 1.0);
    let b_over_n = if m > 1 { sample_var(&chain_means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    if !(var_plus > 0.0) || !(w > 0.0) {
        return Err(DiagnosticsError::Degenerate("zero variance".into()));
    }
    let rho = |lag: usize| 1.0 - (w - acov(lag)) / var_plus;

    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let r0 = if lag == 0 { 1.0 } else { rho(lag) };
        let pair = r0 + rho(lag + 1);
        if !(pair > 0.0) {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        lag += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / 1.5);
    Ok((total / tau).min(1.5 * total))
}

/// Mean absolute relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct Mare {
    /// Per municipality; `None` where an estimate was missing.
    pub per_municipality: Vec<Option<f64>>,
    /// Average over municipalities with complete estimates.
    pub overall: f64,
    pub skipped: usize,
}

/// `est[k][m]` and `truth[k][m]`, averaged over `groups` within each
/// municipality and then across municipalities. A non-finite estimate drops its
/// municipality from the average.
pub fn mare(est: &[Vec<f64>], truth: &[Vec<f64>], groups: &[usize]) -> Result<Mare, DiagnosticsError> {
    if groups.is_empty() {
        return Err(DiagnosticsError::Shape("no groups selected".into()));
    }
    if est.len() != truth.len() {
        return Err(DiagnosticsError::Shape("estimate and truth group counts differ".into()));
    }
    let munis = truth.first().map_or(0, Vec::len);
    for &k in groups {
        if k >= truth.len() || truth[k].len() != munis || est[k].len() != munis {
            return Err(DiagnosticsError::Shape(format!("group {k} has the wrong shape")));
        }
        if let Some(t) = truth[k].iter().find(|t| !(**t > 0.0)) {
            return Err(DiagnosticsError::Domain(format!("truth must be positive, got {t}")));
        }
    }
    let per_municipality: Vec<Option<f64>> = (0..munis)
        .map(|m| {
            let mut total = 0.0;
            for &k in groups {
                let e = est[k][m];
                if !e.is_finite() {
                    return None;
                }
                total += (e - truth[k][m]).abs() / truth[k][m];
            }
            Some(total / groups.len() as f64)
        })
        .collect();
    let complete: Vec<f64> = per_municipality.iter().flatten().copied().collect();
    let overall = if complete.is_empty() {
        f64::NAN
    } else {
        mean(&complete)
    };
    Ok(Mare {
        skipped: munis - complete.len(),
        per_municipality,
        overall,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    /// NaN when the draws are degenerate.
    pub ess: f64,
}

/// R̂ and ESS for every parameter, computed in parallel.
pub fn summarize(draws: &PosteriorDraws) -> Vec<ParamDiagnostics> {
    (0..draws.dim())
        .into_par_iter()
        .map(|j| {
            let chains = draws.param_chains(j);
            ParamDiagnostics {
                name: draws.names()[j].clone(),
                rhat: split_rhat(&chains).unwrap_or(f64::NAN),
                ess: ess(&chains).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

pub fn write_diagnostics_csv<W: Write>(rows: &[ParamDiagnostics], writer: W) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(["parameter", "rhat", "ess"])?;
    for r in rows {
        wtr.write_record([r.name.clone(), r.rhat.to_string(), r.ess.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Draws of the selected parameters, one row per draw.
pub fn write_trace_csv<W: Write>(draws: &PosteriorDraws, params: &[usize], writer: W) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend(params.iter().map(|&j| draws.names()[j].clone()));
    wtr.write_record(&header)?;
    for c in 0..draws.chains() {
        for t in 0..draws.kept() {
            let d = draws.draw(c, t);
            let mut rec = vec![c.to_string(), t.to_string()];
            rec.extend(params.iter().map(|&j| d[j].to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
