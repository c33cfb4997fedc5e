use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{balanced_assignment, draw_true_params, simulate_ard, SimError, SimTemplate};
use crate::diagnostics::mare;
use crate::estimator::{estimates_from_draws, scale_draws, standard_nsum, KnownPrevalence};
use crate::model::{HyperConfig, NsumModel};
use crate::rng::{derive_seed, tags};
use crate::sampler::{sample, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Respondents per municipality.
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub municipalities: usize,
    pub template: SimTemplate,
    /// Sampler settings for the pooled fits; the seed is replaced per cell.
    pub sampler: SamplerConfig,
    pub hyper: HyperConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitModel {
    Pooled,
    Standard,
}

impl fmt::Display for FitModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitModel::Pooled => "pooled",
            FitModel::Standard => "standard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub size: usize,
    pub replicate: usize,
    pub model: FitModel,
    /// MARE over the unknown groups.
    pub mare: f64,
    /// MARE over every group.
    pub mare_all: f64,
    /// Municipalities left out because the estimate was missing.
    pub skipped: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub size: usize,
    pub replicate: usize,
    pub model: FitModel,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub failures: Vec<CellFailure>,
}

impl StudyResult {
    /// `size,replicate,model,mare,seed` with MARE over unknown groups.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        self.write_with(writer, |r| r.mare)
    }

    /// Same columns, MARE over all groups.
    pub fn write_all_groups_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        self.write_with(writer, |r| r.mare_all)
    }

    fn write_with<W: Write>(&self, writer: W, value: impl Fn(&StudyRow) -> f64) -> csv::Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record(["size", "replicate", "model", "mare", "seed"])?;
        for r in &self.rows {
            wtr.write_record([
                r.size.to_string(),
                r.replicate.to_string(),
                r.model.to_string(),
                value(r).to_string(),
                r.seed.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn mares(&self, size: usize, model: FitModel) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.size == size && r.model == model)
            .map(|r| r.mare)
            .collect()
    }
}

struct CellOutcome {
    rows: Vec<StudyRow>,
    failures: Vec<CellFailure>,
}

/// Seed of the `(size, replicate)` cell.
pub fn cell_seed(seed: u64, size: usize, replicate: usize) -> u64 {
    derive_seed(seed, &[tags::STUDY_CELL, size as u64, replicate as u64])
}

/// Simulate, fit both estimators and score every `(size, replicate)` cell.
/// Cells run in parallel; a failed fit is recorded and the study continues.
pub fn run_simulation_study(cfg: &StudyConfig) -> Result<StudyResult, SimError> {
    if cfg.sizes.is_empty() || cfg.sizes.contains(&0) {
        return Err(SimError::Domain("sizes must be non-empty and positive".into()));
    }
    if cfg.replicates == 0 || cfg.municipalities == 0 {
        return Err(SimError::Domain("replicates and municipalities must be positive".into()));
    }
    cfg.template.validate()?;
    cfg.sampler
        .validate()
        .map_err(|e| SimError::Domain(e.to_string()))?;
    let cells: Vec<(usize, usize)> = cfg
        .sizes
        .iter()
        .flat_map(|&s| (0..cfg.replicates).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<Result<CellOutcome, SimError>> = cells
        .par_iter()
        .map(|&(size, rep)| run_cell(cfg, size, rep))
        .collect();
    let mut result = StudyResult::default();
    for o in outcomes {
        let o = o?;
        result.rows.extend(o.rows);
        result.failures.extend(o.failures);
    }
    Ok(result)
}

fn run_cell(cfg: &StudyConfig, size: usize, replicate: usize) -> Result<CellOutcome, SimError> {
    let seed = cell_seed(cfg.seed, size, replicate);
    let m = cfg.municipalities;
    let assignment = balanced_assignment(m, size);
    let params = draw_true_params(&cfg.template, m, assignment.len(), seed)?;
    let data = simulate_ard(&params, &assignment, seed)?;
    let truth = params.true_sizes();
    let unknown: Vec<usize> = (params.n_known..params.groups()).collect();
    let all: Vec<usize> = (0..params.groups()).collect();

    let mut out = CellOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    let mut record = |model: FitModel, est: Result<Vec<Vec<f64>>, String>| {
        let scored = est.and_then(|est| {
            let a = mare(&est, &truth, &unknown).map_err(|e| e.to_string())?;
            let b = mare(&est, &truth, &all).map_err(|e| e.to_string())?;
            Ok((a, b))
        });
        match scored {
            Ok((a, b)) => out.rows.push(StudyRow {
                size,
                replicate,
                model,
                mare: a.overall,
                mare_all: b.overall,
                skipped: a.skipped,
                seed,
            }),
            Err(message) => out.failures.push(CellFailure {
                size,
                replicate,
                model,
                seed,
                message,
            }),
        }
    };

    record(FitModel::Pooled, fit_pooled(cfg, &data, seed));
    record(
        FitModel::Standard,
        standard_nsum(&data).map(|s| s.as_grid()).map_err(|e| e.to_string()),
    );
    Ok(out)
}

/// Posterior medians of `N_km` after scaling.
fn fit_pooled(cfg: &StudyConfig, data: &crate::ard::ARDataset, seed: u64) -> Result<Vec<Vec<f64>>, String> {
    let model = NsumModel::from_dataset(data, cfg.hyper).map_err(|e| e.to_string())?;
    let sampler = SamplerConfig {
        seed,
        ..cfg.sampler.clone()
    };
    let draws = sample(&model, &sampler).map_err(|e| e.to_string())?;
    let known = KnownPrevalence::from_metadata(data.metadata()).map_err(|e| e.to_string())?;
    let scaled = scale_draws(&draws, &known).map_err(|e| e.to_string())?;
    let table = estimates_from_draws(&scaled, data.municipalities()).map_err(|e| e.to_string())?;
    Ok(table.medians())
}
