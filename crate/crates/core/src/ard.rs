//! Aggregated relational data: the respondents × groups count matrix, its
//! metadata sidecar, and the paired-group imputation rule.
//!
//! On disk a dataset is two files. The count table is a CSV with header
//! `respondent_id,municipality_id,g_<name>...`; the sidecar is a JSON document
//! holding municipality populations, group specs (with known prevalences per
//! municipality) and an optional pair rule.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const RESPONDENT_COL: &str = "respondent_id";
const MUNICIPALITY_COL: &str = "municipality_id";
const GROUP_PREFIX: &str = "g_";

#[derive(Debug, Error)]
pub enum ArdError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{column}`")]
    MissingColumn { column: String },
    #[error("row {row}, column `{column}`: `{value}` is not a non-negative integer count")]
    NonIntegerCount {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: unknown municipality id `{id}`")]
    UnknownMunicipality { row: usize, id: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset has no respondents")]
    EmptyDataset,
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid pair rule: {0}")]
    InvalidPairRule(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub id: usize,
    pub name: String,
    pub known: bool,
    /// Proportion of each municipality's population in this group, indexed by
    /// municipality id. Present iff `known`.
    pub known_prevalence: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Municipality {
    pub id: usize,
    pub name: String,
    pub population: u64,
}

/// Fill rule for a pair of linked groups (e.g. traffickers and victims) when a
/// respondent reports one side of the pair but not the other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRule {
    pub group_a: usize,
    pub group_b: usize,
    pub b_per_a: f64,
    pub a_per_b: f64,
}

impl PairRule {
    pub fn validate(&self, n_groups: usize) -> Result<(), ArdError> {
        if self.group_a == self.group_b {
            return Err(ArdError::InvalidPairRule("group_a equals group_b".into()));
        }
        if self.group_a >= n_groups || self.group_b >= n_groups {
            return Err(ArdError::InvalidPairRule(format!(
                "group ids ({}, {}) out of range for {n_groups} groups",
                self.group_a, self.group_b
            )));
        }
        if !(self.b_per_a > 0.0 && self.b_per_a.is_finite())
            || !(self.a_per_b > 0.0 && self.a_per_b.is_finite())
        {
            return Err(ArdError::InvalidPairRule("fill constants must be positive".into()));
        }
        Ok(())
    }
}

/// Group and municipality descriptions, loadable without the count table.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub groups: Vec<GroupSpec>,
    pub municipalities: Vec<Municipality>,
    pub pair_rule: Option<PairRule>,
    pub meta: String,
}

impl Metadata {
    pub fn new(
        mut groups: Vec<GroupSpec>,
        mut municipalities: Vec<Municipality>,
        pair_rule: Option<PairRule>,
        meta: String,
    ) -> Result<Self, ArdError> {
        groups.sort_by_key(|g| g.id);
        municipalities.sort_by_key(|m| m.id);
        if municipalities.is_empty() {
            return Err(ArdError::InvalidMetadata("no municipalities".into()));
        }
        if groups.len() < 2 {
            return Err(ArdError::InvalidMetadata("at least two groups are required".into()));
        }
        for (expected, m) in municipalities.iter().enumerate() {
            if m.id != expected {
                return Err(ArdError::InvalidMetadata(format!(
                    "municipality ids must be dense 0..M-1; found {} at position {expected}",
                    m.id
                )));
            }
            if m.population < 1 {
                return Err(ArdError::InvalidMetadata(format!(
                    "municipality {} has zero population",
                    m.id
                )));
            }
        }
        let n_munis = municipalities.len();
        for (expected, g) in groups.iter().enumerate() {
            if g.id != expected {
                return Err(ArdError::InvalidMetadata(format!(
                    "group ids must be dense 0..K-1; found {} at position {expected}",
                    g.id
                )));
            }
            match (&g.known_prevalence, g.known) {
                (Some(p), true) => {
                    if p.len() != n_munis {
                        return Err(ArdError::InvalidMetadata(format!(
                            "group `{}` has {} prevalences for {n_munis} municipalities",
                            g.name,
                            p.len()
                        )));
                    }
                    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
                        return Err(ArdError::InvalidMetadata(format!(
                            "group `{}` prevalence {bad} outside (0, 1]",
                            g.name
                        )));
                    }
                }
                (None, false) => {}
                (None, true) => {
                    return Err(ArdError::InvalidMetadata(format!(
                        "known group `{}` lacks known_prevalence",
                        g.name
                    )))
                }
                (Some(_), false) => {
                    return Err(ArdError::InvalidMetadata(format!(
                        "unknown group `{}` carries known_prevalence",
                        g.name
                    )))
                }
            }
        }
        let mut names: Vec<&str> = groups.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(ArdError::InvalidMetadata("group names must be unique".into()));
        }
        if let Some(rule) = &pair_rule {
            rule.validate(groups.len())?;
        }
        Ok(Self {
            groups,
            municipalities,
            pair_rule,
            meta,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_municipalities(&self) -> usize {
        self.municipalities.len()
    }

    /// `(k, m, prevalence)` for every known cell.
    pub fn known_cells(&self) -> Vec<(usize, usize, f64)> {
        self.groups
            .iter()
            .filter_map(|g| g.known_prevalence.as_ref().map(|p| (g.id, p)))
            .flat_map(|(k, p)| p.iter().enumerate().map(move |(m, &v)| (k, m, v)))
            .collect()
    }
}

/// Respondents × groups counts with the municipality of every respondent.
#[derive(Debug, Clone, PartialEq)]
pub struct ARDataset {
    metadata: Metadata,
    respondent_ids: Vec<String>,
    muni_of_respondent: Vec<usize>,
    counts: Vec<Vec<u32>>,
}

impl ARDataset {
    pub fn new(
        metadata: Metadata,
        respondent_ids: Vec<String>,
        muni_of_respondent: Vec<usize>,
        counts: Vec<Vec<u32>>,
    ) -> Result<Self, ArdError> {
        if counts.is_empty() {
            return Err(ArdError::EmptyDataset);
        }
        let k = metadata.n_groups();
        if respondent_ids.len() != counts.len() || muni_of_respondent.len() != counts.len() {
            return Err(ArdError::InvalidMetadata(
                "respondent ids, municipalities and counts differ in length".into(),
            ));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(ArdError::RaggedRow {
                    row: i + 1,
                    expected: k,
                    found: row.len(),
                });
            }
        }
        if let Some((i, m)) = muni_of_respondent
            .iter()
            .enumerate()
            .find(|(_, &m)| m >= metadata.n_municipalities())
        {
            return Err(ArdError::UnknownMunicipality {
                row: i + 1,
                id: m.to_string(),
            });
        }
        Ok(Self {
            metadata,
            respondent_ids,
            muni_of_respondent,
            counts,
        })
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }
    pub fn groups(&self) -> &[GroupSpec] {
        &self.metadata.groups
    }
    pub fn municipalities(&self) -> &[Municipality] {
        &self.metadata.municipalities
    }
    pub fn respondent_ids(&self) -> &[String] {
        &self.respondent_ids
    }
    pub fn muni_of_respondent(&self) -> &[usize] {
        &self.muni_of_respondent
    }
    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }
    pub fn n_respondents(&self) -> usize {
        self.counts.len()
    }
    pub fn n_groups(&self) -> usize {
        self.metadata.n_groups()
    }
    pub fn n_municipalities(&self) -> usize {
        self.metadata.n_municipalities()
    }
}

// --- metadata JSON ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GroupDoc {
    id: usize,
    name: String,
    known: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    known_prevalence: Option<BTreeMap<usize, f64>>,
}

#[derive(Serialize, Deserialize)]
struct MetadataDoc {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    meta: String,
    municipalities: Vec<Municipality>,
    groups: Vec<GroupDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_rule: Option<PairRule>,
}

pub fn load_metadata(path: &Path) -> Result<Metadata, ArdError> {
    let doc: MetadataDoc = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let n_munis = doc.municipalities.len();
    let groups = doc
        .groups
        .into_iter()
        .map(|g| {
            let known_prevalence = match g.known_prevalence {
                None => None,
                Some(map) => {
                    let mut dense = vec![f64::NAN; n_munis];
                    for (m, v) in map {
                        if m >= n_munis {
                            return Err(ArdError::InvalidMetadata(format!(
                                "group `{}` has prevalence for unknown municipality {m}",
                                g.name
                            )));
                        }
                        dense[m] = v;
                    }
                    if dense.iter().any(|v| v.is_nan()) {
                        return Err(ArdError::InvalidMetadata(format!(
                            "group `{}` lacks a prevalence for some municipality",
                            g.name
                        )));
                    }
                    Some(dense)
                }
            };
            Ok(GroupSpec {
                id: g.id,
                name: g.name,
                known: g.known,
                known_prevalence,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Metadata::new(groups, doc.municipalities, doc.pair_rule, doc.meta)
}

pub fn save_metadata(metadata: &Metadata, path: &Path) -> Result<(), ArdError> {
    let doc = MetadataDoc {
        meta: metadata.meta.clone(),
        municipalities: metadata.municipalities.clone(),
        groups: metadata
            .groups
            .iter()
            .map(|g| GroupDoc {
                id: g.id,
                name: g.name.clone(),
                known: g.known,
                known_prevalence: g
                    .known_prevalence
                    .as_ref()
                    .map(|p| p.iter().copied().enumerate().collect()),
            })
            .collect(),
        pair_rule: metadata.pair_rule,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

// --- count table -----------------------------------------------------------

/// Load the count table at `csv_path` against the metadata sidecar at `meta_path`.
pub fn load_ard(csv_path: &Path, meta_path: &Path) -> Result<ARDataset, ArdError> {
    let metadata = load_metadata(meta_path)?;
    let reader = BufReader::new(File::open(csv_path)?);
    read_ard(reader, metadata)
}

pub fn read_ard<R: std::io::Read>(reader: R, metadata: Metadata) -> Result<ARDataset, ArdError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| ArdError::MissingColumn {
                column: name.to_string(),
            })
    };
    let resp_col = find(RESPONDENT_COL)?;
    let muni_col = find(MUNICIPALITY_COL)?;
    for h in header.iter() {
        if let Some(name) = h.trim().strip_prefix(GROUP_PREFIX) {
            if !metadata.groups.iter().any(|g| g.name == name) {
                return Err(ArdError::InvalidMetadata(format!(
                    "column `{h}` has no matching group in metadata"
                )));
            }
        }
    }
    let group_cols = metadata
        .groups
        .iter()
        .map(|g| find(&format!("{GROUP_PREFIX}{}", g.name)))
        .collect::<Result<Vec<_>, _>>()?;

    let n_munis = metadata.n_municipalities();
    let mut respondent_ids = Vec::new();
    let mut munis = Vec::new();
    let mut counts = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != header.len() {
            return Err(ArdError::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        let muni_raw = record[muni_col].trim();
        let m = muni_raw
            .parse::<usize>()
            .ok()
            .filter(|&m| m < n_munis)
            .ok_or_else(|| ArdError::UnknownMunicipality {
                row,
                id: muni_raw.to_string(),
            })?;
        let ys = group_cols
            .iter()
            .map(|&c| {
                let raw = record[c].trim();
                raw.parse::<u32>().map_err(|_| ArdError::NonIntegerCount {
                    row,
                    column: header[c].to_string(),
                    value: raw.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        respondent_ids.push(record[resp_col].trim().to_string());
        munis.push(m);
        counts.push(ys);
    }
    ARDataset::new(metadata, respondent_ids, munis, counts)
}

pub fn write_ard<W: std::io::Write>(data: &ARDataset, writer: W) -> Result<(), ArdError> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = vec![RESPONDENT_COL.to_string(), MUNICIPALITY_COL.to_string()];
    header.extend(data.groups().iter().map(|g| format!("{GROUP_PREFIX}{}", g.name)));
    wtr.write_record(&header)?;
    for ((id, m), row) in data
        .respondent_ids
        .iter()
        .zip(&data.muni_of_respondent)
        .zip(&data.counts)
    {
        let mut rec = vec![id.clone(), m.to_string()];
        rec.extend(row.iter().map(u32::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write the count table and its metadata sidecar.
pub fn save_ard(data: &ARDataset, csv_path: &Path, meta_path: &Path) -> Result<(), ArdError> {
    write_ard(data, BufWriter::new(File::create(csv_path)?))?;
    save_metadata(&data.metadata, meta_path)
}

// --- paired imputation -----------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputationReport {
    /// Cells of `group_b` filled because only `group_a` was reported.
    pub filled_b_from_a: usize,
    /// Cells of `group_a` filled because only `group_b` was reported.
    pub filled_a_from_b: usize,
}

fn fill_value(trigger: u32, per: f64) -> u32 {
    let v = (trigger as f64 * per + 0.5).floor();
    (v.min(u32::MAX as f64) as u32).max(1)
}

/// When a respondent reports one group of the pair but not the other, set the
/// missing count to `round(reported · fill)` (half-up, at least 1).
pub fn impute_paired_counts(
    data: &ARDataset,
    rule: &PairRule,
) -> Result<(ARDataset, ImputationReport), ArdError> {
    rule.validate(data.n_groups())?;
    let (a, b) = (rule.group_a, rule.group_b);
    let mut report = ImputationReport::default();
    let mut out = data.clone();
    for row in &mut out.counts {
        if row[a] > 0 && row[b] == 0 {
            row[b] = fill_value(row[a], rule.b_per_a);
            report.filled_b_from_a += 1;
        } else if row[b] > 0 && row[a] == 0 {
            row[a] = fill_value(row[b], rule.a_per_b);
            report.filled_a_from_b += 1;
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(k: usize, m: usize) -> Metadata {
        let groups = (0..k)
            .map(|id| GroupSpec {
                id,
                name: format!("grp{id}"),
                known: id == 0,
                known_prevalence: (id == 0).then(|| vec![0.1; m]),
            })
            .collect();
        let munis = (0..m)
            .map(|id| Municipality {
                id,
                name: format!("muni{id}"),
                population: 1000,
            })
            .collect();
        Metadata::new(groups, munis, None, String::new()).unwrap()
    }

    #[test]
    fn reads_small_table() {
        let csv = "respondent_id,municipality_id,g_grp0,g_grp1\nr1,0,2,0\nr2,0,1,1\nr3,0,0,5\n";
        let d = read_ard(csv.as_bytes(), meta(2, 1)).unwrap();
        assert_eq!(d.n_respondents(), 3);
        assert_eq!(d.n_groups(), 2);
        assert_eq!(d.n_municipalities(), 1);
        assert_eq!(d.counts(), &[vec![2, 0], vec![1, 1], vec![0, 5]]);
    }

    #[test]
    fn negative_count_names_row() {
        let csv = "respondent_id,municipality_id,g_grp0,g_grp1\nr1,0,-1,0\n";
        match read_ard(csv.as_bytes(), meta(2, 1)) {
            Err(ArdError::NonIntegerCount { row, column, value }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "g_grp0");
                assert_eq!(value, "-1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let m = meta(2, 1);
        let missing = "respondent_id,g_grp0,g_grp1\nr1,1,0\n";
        assert!(matches!(
            read_ard(missing.as_bytes(), m.clone()),
            Err(ArdError::MissingColumn { column }) if column == "municipality_id"
        ));
        let missing_group = "respondent_id,municipality_id,g_grp0\nr1,0,1\n";
        assert!(matches!(
            read_ard(missing_group.as_bytes(), m.clone()),
            Err(ArdError::MissingColumn { .. })
        ));
        let unknown = "respondent_id,municipality_id,g_grp0,g_grp1\nr1,0,1,0\nr2,4,0,0\n";
        assert!(matches!(
            read_ard(unknown.as_bytes(), m.clone()),
            Err(ArdError::UnknownMunicipality { row: 2, .. })
        ));
        let empty = "respondent_id,municipality_id,g_grp0,g_grp1\n";
        assert!(matches!(read_ard(empty.as_bytes(), m.clone()), Err(ArdError::EmptyDataset)));
        let frac = "respondent_id,municipality_id,g_grp0,g_grp1\nr1,0,1.5,0\n";
        assert!(matches!(
            read_ard(frac.as_bytes(), m),
            Err(ArdError::NonIntegerCount { .. })
        ));
    }

    #[test]
    fn metadata_invariants() {
        let munis = vec![Municipality {
            id: 0,
            name: "a".into(),
            population: 10,
        }];
        let g = |id, known, p: Option<Vec<f64>>| GroupSpec {
            id,
            name: format!("g{id}"),
            known,
            known_prevalence: p,
        };
        assert!(Metadata::new(vec![g(0, false, None)], munis.clone(), None, String::new()).is_err());
        assert!(Metadata::new(
            vec![g(0, true, None), g(1, false, None)],
            munis.clone(),
            None,
            String::new()
        )
        .is_err());
        assert!(Metadata::new(
            vec![g(0, true, Some(vec![1.5])), g(1, false, None)],
            munis.clone(),
            None,
            String::new()
        )
        .is_err());
        assert!(Metadata::new(
            vec![g(0, false, None), g(2, false, None)],
            munis.clone(),
            None,
            String::new()
        )
        .is_err());
        let bad_rule = PairRule {
            group_a: 0,
            group_b: 0,
            b_per_a: 1.0,
            a_per_b: 1.0,
        };
        assert!(Metadata::new(
            vec![g(0, true, Some(vec![1.0])), g(1, false, None)],
            munis,
            Some(bad_rule),
            String::new()
        )
        .is_err());
    }

    fn pair_data(rows: Vec<Vec<u32>>) -> ARDataset {
        let n = rows.len();
        ARDataset::new(
            meta(3, 1),
            (0..n).map(|i| i.to_string()).collect(),
            vec![0; n],
            rows,
        )
        .unwrap()
    }

    #[test]
    fn imputation_fills_missing_side() {
        let rule = PairRule {
            group_a: 1,
            group_b: 2,
            b_per_a: 1.5,
            a_per_b: 0.2,
        };
        let d = pair_data(vec![vec![4, 2, 0], vec![1, 0, 0], vec![0, 0, 3], vec![0, 2, 2]]);
        let (out, report) = impute_paired_counts(&d, &rule).unwrap();
        assert_eq!(out.counts()[0], vec![4, 2, 3]);
        assert_eq!(out.counts()[1], vec![1, 0, 0]);
        // 3 · 0.2 = 0.6 rounds to 1
        assert_eq!(out.counts()[2], vec![0, 1, 3]);
        assert_eq!(out.counts()[3], vec![0, 2, 2]);
        assert_eq!(
            report,
            ImputationReport {
                filled_b_from_a: 1,
                filled_a_from_b: 1
            }
        );
    }

    #[test]
    fn fill_rounds_half_up_with_floor_of_one() {
        assert_eq!(fill_value(1, 2.5), 3);
        assert_eq!(fill_value(1, 0.01), 1);
        assert_eq!(fill_value(3, 0.5), 2);
    }

    #[test]
    fn imputation_rejects_bad_rule() {
        let d = pair_data(vec![vec![0, 1, 0]]);
        let rule = PairRule {
            group_a: 1,
            group_b: 5,
            b_per_a: 1.0,
            a_per_b: 1.0,
        };
        assert!(impute_paired_counts(&d, &rule).is_err());
    }
}
