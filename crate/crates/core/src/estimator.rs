//! Population sizes from posterior draws, and the classical scale-up baseline.
//!
//! The sampler treats every group as unknown, so `ρ` is only identified up to a
//! shift shared with `δ`. Each draw is calibrated by subtracting
//! `c = mean over known cells of (ρ_km + ln p_km)`, after which the geometric
//! mean of estimated over true prevalence on the known cells is exactly one.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ard::{ARDataset, Metadata, Municipality};
use crate::model::Layout;
use crate::sampler::PosteriorDraws;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("no known group cells to scale against")]
    NoKnownGroups,
    #[error("draws carry no model layout")]
    MissingLayout,
    #[error("invalid known prevalence: {0}")]
    InvalidPrevalence(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// True prevalences of the known `(group, municipality)` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownPrevalence {
    cells: Vec<(usize, usize, f64)>,
}

impl KnownPrevalence {
    pub fn new(cells: Vec<(usize, usize, f64)>) -> Result<Self, EstimatorError> {
        if cells.is_empty() {
            return Err(EstimatorError::NoKnownGroups);
        }
        if let Some(&(k, m, p)) = cells.iter().find(|c| !(c.2 > 0.0 && c.2 <= 1.0)) {
            return Err(EstimatorError::InvalidPrevalence(format!(
                "cell ({k}, {m}) has prevalence {p}"
            )));
        }
        Ok(Self { cells })
    }

    pub fn from_metadata(meta: &Metadata) -> Result<Self, EstimatorError> {
        Self::new(meta.known_cells())
    }

    pub fn cells(&self) -> &[(usize, usize, f64)] {
        &self.cells
    }
}

/// Calibrated `ρ̃` for every draw, stored unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledDraws {
    layout: Layout,
    n_draws: usize,
    /// `n_draws × (K·M)`, group-major within a draw.
    rho: Vec<f64>,
    shifts: Vec<f64>,
    clamped: usize,
}

impl ScaledDraws {
    pub fn layout(&self) -> Layout {
        self.layout
    }
    pub fn n_draws(&self) -> usize {
        self.n_draws
    }
    pub fn rho_tilde(&self, t: usize, k: usize, m: usize) -> f64 {
        let km = self.layout.groups * self.layout.munis;
        self.rho[t * km + k * self.layout.munis + m]
    }
    /// `exp(−ρ̃)`, clamped at 1.
    pub fn prevalence(&self, t: usize, k: usize, m: usize) -> f64 {
        (-self.rho_tilde(t, k, m).max(0.0)).exp()
    }
    /// The constant `c(t)` removed from each draw.
    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }
    /// Number of (draw, cell) pairs whose prevalence exceeded 1 before clamping.
    pub fn clamped_cells(&self) -> usize {
        self.clamped
    }
}

fn raw_rho(draws: &PosteriorDraws) -> Result<(Layout, Vec<f64>), EstimatorError> {
    let layout = draws.layout().ok_or(EstimatorError::MissingLayout)?;
    let km = layout.groups * layout.munis;
    let start = layout.rho(0, 0);
    let mut rho = Vec::with_capacity(draws.n_draws() * km);
    for d in draws.iter_draws() {
        rho.extend_from_slice(&d[start..start + km]);
    }
    Ok((layout, rho))
}

fn from_rho(layout: Layout, n_draws: usize, rho: Vec<f64>, shifts: Vec<f64>) -> ScaledDraws {
    let clamped = rho.iter().filter(|&&r| r < 0.0).count();
    ScaledDraws {
        layout,
        n_draws,
        rho,
        shifts,
        clamped,
    }
}

/// Shift every draw so that the known cells are matched on average in log space.
pub fn scale_draws(draws: &PosteriorDraws, known: &KnownPrevalence) -> Result<ScaledDraws, EstimatorError> {
    let (layout, mut rho) = raw_rho(draws)?;
    let shifts = scale_rho(layout, draws.n_draws(), &mut rho, known)?;
    Ok(from_rho(layout, draws.n_draws(), rho, shifts))
}

/// Apply the calibration in place to `n_draws × (K·M)` values of `ρ`,
/// returning the shift removed from each draw.
pub fn scale_rho(
    layout: Layout,
    n_draws: usize,
    rho: &mut [f64],
    known: &KnownPrevalence,
) -> Result<Vec<f64>, EstimatorError> {
    let (kn, mn) = (layout.groups, layout.munis);
    if rho.len() != n_draws * kn * mn {
        return Err(EstimatorError::Shape(format!(
            "expected {} values of rho, got {}",
            n_draws * kn * mn,
            rho.len()
        )));
    }
    if let Some(&(k, m, _)) = known.cells.iter().find(|c| c.0 >= kn || c.1 >= mn) {
        return Err(EstimatorError::Shape(format!("known cell ({k}, {m}) outside the layout")));
    }
    let log_p: Vec<(usize, f64)> = known.cells.iter().map(|&(k, m, p)| (k * mn + m, p.ln())).collect();
    let n_known = log_p.len() as f64;
    let mut shifts = Vec::with_capacity(n_draws);
    for row in rho.chunks_exact_mut(kn * mn) {
        let c = log_p.iter().map(|&(j, lp)| row[j] + lp).sum::<f64>() / n_known;
        for r in row.iter_mut() {
            *r -= c;
        }
        shifts.push(c);
    }
    Ok(shifts)
}

/// The raw draws of `ρ` wrapped as if scaled by zero, for before/after comparisons.
pub fn unscaled_draws(draws: &PosteriorDraws) -> Result<ScaledDraws, EstimatorError> {
    let (layout, rho) = raw_rho(draws)?;
    Ok(from_rho(layout, draws.n_draws(), rho, vec![0.0; draws.n_draws()]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Quantile by linear interpolation between order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile_sorted(&sorted, 0.5),
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
    }
}

/// `N_m · exp(−ρ̃_km)` for every draw.
pub fn size_draws(scaled: &ScaledDraws, municipalities: &[Municipality], k: usize, m: usize) -> Vec<f64> {
    let n_m = municipalities[m].population as f64;
    (0..scaled.n_draws).map(|t| n_m * scaled.prevalence(t, k, m)).collect()
}

/// National total `Σ_m N_m · exp(−ρ̃_km)` for every draw.
pub fn total_draws(scaled: &ScaledDraws, municipalities: &[Municipality], k: usize) -> Vec<f64> {
    (0..scaled.n_draws)
        .map(|t| {
            municipalities
                .iter()
                .enumerate()
                .map(|(m, muni)| muni.population as f64 * scaled.prevalence(t, k, m))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellEstimate {
    pub group: usize,
    pub municipality: usize,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTable {
    groups: usize,
    munis: usize,
    /// Group-major.
    cells: Vec<CellEstimate>,
    totals: Vec<Summary>,
}

impl EstimateTable {
    pub fn cells(&self) -> &[CellEstimate] {
        &self.cells
    }
    pub fn cell(&self, k: usize, m: usize) -> &CellEstimate {
        &self.cells[k * self.munis + m]
    }
    pub fn totals(&self) -> &[Summary] {
        &self.totals
    }
    pub fn groups(&self) -> usize {
        self.groups
    }
    pub fn munis(&self) -> usize {
        self.munis
    }

    /// Posterior medians as `[k][m]`.
    pub fn medians(&self) -> Vec<Vec<f64>> {
        (0..self.groups)
            .map(|k| (0..self.munis).map(|m| self.cell(k, m).summary.median).collect())
            .collect()
    }

    /// `group,municipality,mean,median,q025,q975`, groups by name.
    pub fn write_csv<W: Write>(&self, group_names: &[String], writer: W) -> csv::Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record(["group", "municipality", "mean", "median", "q025", "q975"])?;
        for c in &self.cells {
            let s = &c.summary;
            wtr.write_record([
                group_names[c.group].clone(),
                c.municipality.to_string(),
                s.mean.to_string(),
                s.median.to_string(),
                s.q025.to_string(),
                s.q975.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_totals_csv<W: Write>(&self, group_names: &[String], writer: W) -> csv::Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record(["group", "mean", "median", "q025", "q975"])?;
        for (k, s) in self.totals.iter().enumerate() {
            wtr.write_record([
                group_names[k].clone(),
                s.mean.to_string(),
                s.median.to_string(),
                s.q025.to_string(),
                s.q975.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Posterior summaries of every `N_km` and of each group's national total.
pub fn estimates_from_draws(scaled: &ScaledDraws, municipalities: &[Municipality]) -> Result<EstimateTable, EstimatorError> {
    let (kn, mn) = (scaled.layout.groups, scaled.layout.munis);
    if municipalities.len() != mn {
        return Err(EstimatorError::Shape(format!(
            "{} municipalities for a layout with {mn}",
            municipalities.len()
        )));
    }
    if scaled.n_draws == 0 {
        return Err(EstimatorError::Shape("no draws".into()));
    }
    let cells = (0..kn * mn)
        .into_par_iter()
        .map(|j| {
            let (k, m) = (j / mn, j % mn);
            CellEstimate {
                group: k,
                municipality: m,
                summary: summarize(&size_draws(scaled, municipalities, k, m)),
            }
        })
        .collect();
    let totals = (0..kn)
        .into_par_iter()
        .map(|k| summarize(&total_draws(scaled, municipalities, k)))
        .collect();
    Ok(EstimateTable {
        groups: kn,
        munis: mn,
        cells,
        totals,
    })
}

/// Insert thousands separators into a non-negative integer.
fn with_commas(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// `"<median> [95% CI (<q025>, <q975>)]"`, rounded to whole people.
pub fn format_headline(s: &Summary) -> String {
    format!(
        "{} [95% CI ({}, {})]",
        with_commas(s.median.round() as u64),
        s.q025.round() as u64,
        s.q975.round() as u64
    )
}

/// A posterior summary of a model-level quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperRow {
    pub group: Option<usize>,
    pub parameter: String,
    #[serde(flatten)]
    pub summary: Summary,
}

/// Per group: `μ_ρ`, `σ²_ρ`, `w`, and the typical expected count
/// `exp(δ̄ − ρ̄_k)` (δ̄ the respondent average, ρ̄_k the municipality average, both
/// unscaled); plus `σ_δ`.
pub fn hyper_summary(draws: &PosteriorDraws) -> Result<Vec<HyperRow>, EstimatorError> {
    let layout = draws.layout().ok_or(EstimatorError::MissingLayout)?;
    let column = |j: usize| -> Vec<f64> { draws.iter_draws().map(|d| d[j]).collect() };
    let mut rows = Vec::new();
    for k in 0..layout.groups {
        for (name, j) in [
            ("mu_rho", layout.mu_rho(k)),
            ("sigma2_rho", layout.sigma2_rho(k)),
            ("w", layout.w(k)),
        ] {
            rows.push(HyperRow {
                group: Some(k),
                parameter: name.to_string(),
                summary: summarize(&column(j)),
            });
        }
        if layout.respondents > 0 {
            let mu: Vec<f64> = draws
                .iter_draws()
                .map(|d| {
                    let r = layout.respondents as f64;
                    let delta_bar = d[layout.delta(0)..layout.delta(0) + layout.respondents].iter().sum::<f64>() / r;
                    let rho_bar = d[layout.rho(k, 0)..layout.rho(k, 0) + layout.munis].iter().sum::<f64>()
                        / layout.munis as f64;
                    (delta_bar - rho_bar).exp()
                })
                .collect();
            rows.push(HyperRow {
                group: Some(k),
                parameter: "mu_ikm".to_string(),
                summary: summarize(&mu),
            });
        }
    }
    rows.push(HyperRow {
        group: None,
        parameter: "sigma_delta".to_string(),
        summary: summarize(&column(layout.sigma_delta())),
    });
    Ok(rows)
}

pub fn write_hyper_csv<W: Write>(rows: &[HyperRow], group_names: &[String], writer: W) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(["group", "parameter", "mean", "median", "q025", "q975"])?;
    for r in rows {
        let s = &r.summary;
        wtr.write_record([
            r.group.map(|k| group_names[k].clone()).unwrap_or_default(),
            r.parameter.clone(),
            s.mean.to_string(),
            s.median.to_string(),
            s.q025.to_string(),
            s.q975.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Classical scale-up estimates, one municipality at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardNsum {
    /// `estimates[k][m]`; `None` where the municipality has no respondents or
    /// all of its respondents report zero ties to the known groups.
    pub estimates: Vec<Vec<Option<f64>>>,
    /// Municipalities whose estimates are missing.
    pub missing: Vec<usize>,
}

impl StandardNsum {
    /// Estimates as `[k][m]` with NaN marking missing cells.
    pub fn as_grid(&self) -> Vec<Vec<f64>> {
        self.estimates
            .iter()
            .map(|row| row.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect()
    }
}

/// Degrees by the known-group ratio `d̂_i = N_m · Σ_known y_ik / Σ_known N_km`,
/// then `N̂_km = N_m · Σ_i y_ik / Σ_i d̂_i` over respondents of municipality `m`.
pub fn standard_nsum(data: &ARDataset) -> Result<StandardNsum, EstimatorError> {
    let known: Vec<(usize, &Vec<f64>)> = data
        .groups()
        .iter()
        .filter_map(|g| g.known_prevalence.as_ref().map(|p| (g.id, p)))
        .collect();
    if known.is_empty() {
        return Err(EstimatorError::NoKnownGroups);
    }
    let (kn, mn) = (data.n_groups(), data.n_municipalities());
    let mut y_sum = vec![vec![0.0; mn]; kn];
    let mut known_ties = vec![0.0; mn];
    let mut respondents = vec![0usize; mn];
    for (row, &m) in data.counts().iter().zip(data.muni_of_respondent()) {
        respondents[m] += 1;
        for (k, &y) in row.iter().enumerate() {
            y_sum[k][m] += y as f64;
        }
        known_ties[m] += known.iter().map(|&(k, _)| row[k] as f64).sum::<f64>();
    }
    let mut estimates = vec![vec![None; mn]; kn];
    let mut missing = Vec::new();
    for (m, muni) in data.municipalities().iter().enumerate() {
        if respondents[m] == 0 || known_ties[m] == 0.0 {
            missing.push(m);
            continue;
        }
        let n_m = muni.population as f64;
        let known_size: f64 = known.iter().map(|(_, p)| p[m] * n_m).sum();
        let degree_total = n_m * known_ties[m] / known_size;
        for k in 0..kn {
            estimates[k][m] = Some(n_m * y_sum[k][m] / degree_total);
        }
    }
    Ok(StandardNsum { estimates, missing })
}
