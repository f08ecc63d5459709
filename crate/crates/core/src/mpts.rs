//! Physiological time-series preprocessing.
//!
//! Raw irregular events go through outlier filtering, hourly mean binning,
//! forward-then-backward imputation, and truncation or last-row
//! replication to a fixed horizon of `T` hours. Cells are indexed
//! `(hour, feature)` with hour `h` (0-based row `h`) covering offsets
//! `[h, h + 1)`; an offset exactly on an edge belongs to the later bin.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Patients whose last record falls before this many hours are excluded.
pub const MIN_ADMISSION_HOURS: f64 = 12.0;

pub const STANDARD_HORIZONS: [usize; 5] = [12, 18, 24, 30, 36];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    pub hour_offset: f64,
    pub variable: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<f64>,
}

impl ValueRange {
    pub fn contains(&self, value: f64) -> bool {
        (self.min..=self.max).contains(&value)
    }

    /// Value used for a feature never observed in a patient's window.
    pub fn population_default(&self) -> f64 {
        self.default.unwrap_or(0.5 * (self.min + self.max))
    }
}

/// Clinically plausible closed interval per variable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidRangeTable {
    ranges: BTreeMap<String, ValueRange>,
}

impl ValidRangeTable {
    pub fn new(ranges: BTreeMap<String, ValueRange>) -> Result<Self> {
        let table = ValidRangeTable { ranges };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        for (name, r) in &self.ranges {
            if !(r.min < r.max) {
                return Err(Error::Config(format!(
                    "range for {name}: min {} must be below max {}",
                    r.min, r.max
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table: ValidRangeTable = io::read_json(path)?;
        table
            .validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(table)
    }

    pub fn get(&self, variable: &str) -> Option<&ValueRange> {
        self.ranges.get(variable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ValueRange)> {
        self.ranges.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Ordered feature names; the column index of a feature is its position here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Serialize for FeatureSchema {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureSchema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        FeatureSchema::new(names).map_err(serde::de::Error::custom)
    }
}

impl FeatureSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("feature schema is empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("feature {n} listed twice in schema")));
            }
        }
        Ok(FeatureSchema { names, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Row-major `hours × features` grid of optional cell values.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyGrid {
    hours: usize,
    features: usize,
    cells: Vec<Option<f64>>,
}

impl HourlyGrid {
    pub fn empty(hours: usize, features: usize) -> Self {
        HourlyGrid {
            hours,
            features,
            cells: vec![None; hours * features],
        }
    }

    pub fn from_columns(columns: &[Vec<Option<f64>>]) -> Self {
        let features = columns.len();
        let hours = columns.first().map_or(0, Vec::len);
        let mut g = HourlyGrid::empty(hours, features);
        for (j, col) in columns.iter().enumerate() {
            for (h, v) in col.iter().enumerate() {
                g.set(h, j, *v);
            }
        }
        g
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn get(&self, hour: usize, feature: usize) -> Option<f64> {
        self.cells[hour * self.features + feature]
    }

    pub fn set(&mut self, hour: usize, feature: usize, value: Option<f64>) {
        self.cells[hour * self.features + feature] = value;
    }

    pub fn column(&self, feature: usize) -> Vec<Option<f64>> {
        (0..self.hours).map(|h| self.get(h, feature)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }
}

/// One patient's complete `T × M` hourly matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMatrix {
    pub patient_id: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PatientMatrix {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.data[t * self.cols + j]
    }

    /// Every row replaced by the first (admission) row.
    pub fn first_row_replicated(&self) -> PatientMatrix {
        let first = self.row(0).to_vec();
        PatientMatrix {
            patient_id: self.patient_id.clone(),
            rows: self.rows,
            cols: self.cols,
            data: first.repeat(self.rows),
        }
    }
}

/// Drops events outside their variable's closed valid range, preserving order.
pub fn filter_outliers(
    events: &[EventRecord],
    ranges: &ValidRangeTable,
) -> Result<Vec<EventRecord>> {
    let mut missing: Vec<&str> = events
        .iter()
        .filter(|e| ranges.get(&e.variable).is_none())
        .map(|e| e.variable.as_str())
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Config(format!(
            "no valid range configured for: {}",
            missing.join(", ")
        )));
    }
    Ok(events
        .iter()
        .filter(|e| ranges.get(&e.variable).is_some_and(|r| r.contains(e.value)))
        .cloned()
        .collect())
}

/// Mean of each feature's values per hourly bin over the first `hours` bins.
///
/// Events for variables outside the schema or beyond the last bin are ignored.
pub fn bin_hourly(events: &[&EventRecord], schema: &FeatureSchema, hours: usize) -> HourlyGrid {
    let m = schema.len();
    let mut sums = vec![0.0; hours * m];
    let mut counts = vec![0usize; hours * m];
    for e in events {
        let Some(j) = schema.column(&e.variable) else {
            continue;
        };
        if !(e.hour_offset >= 0.0) {
            continue;
        }
        let h = e.hour_offset.floor() as usize;
        if h >= hours {
            continue;
        }
        sums[h * m + j] += e.value;
        counts[h * m + j] += 1;
    }
    let cells = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    HourlyGrid {
        hours,
        features: m,
        cells,
    }
}

/// Forward fill, then backward fill, per column. Columns with no
/// observation at all take `defaults[j]`.
pub fn impute(grid: &HourlyGrid, defaults: &[f64]) -> HourlyGrid {
    let mut out = grid.clone();
    for j in 0..grid.features {
        let mut last = None;
        for h in 0..grid.hours {
            match out.get(h, j) {
                Some(v) => last = Some(v),
                None => out.set(h, j, last),
            }
        }
        let mut next = None;
        for h in (0..grid.hours).rev() {
            match out.get(h, j) {
                Some(v) => next = Some(v),
                None => out.set(h, j, next),
            }
        }
        if next.is_none() {
            let d = defaults.get(j).copied().unwrap_or(0.0);
            for h in 0..grid.hours {
                out.set(h, j, Some(d));
            }
        }
    }
    out
}

/// Truncates or pads a grid to exactly `horizon` rows: output row `t`
/// (1-based) is input row `min(t, observed_hours)`.
pub fn fit_length(grid: &HourlyGrid, observed_hours: usize, horizon: usize) -> HourlyGrid {
    let src_rows = observed_hours.clamp(1, grid.hours.max(1));
    let mut out = HourlyGrid::empty(horizon, grid.features);
    for t in 0..horizon {
        let src = t.min(src_rows - 1);
        for j in 0..grid.features {
            out.set(t, j, grid.get(src, j));
        }
    }
    out
}

/// Per-feature z-scoring fitted on training matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits population mean and standard deviation over every row of every
    /// matrix. Constant features get a unit scale.
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a PatientMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in matrices {
            if sum.is_empty() {
                sum = vec![0.0; m.cols];
                sq = vec![0.0; m.cols];
            }
            if m.cols != sum.len() {
                return Err(Error::shape("standardize", &[sum.len()], &[m.cols]));
            }
            for t in 0..m.rows {
                for (j, &v) in m.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += m.rows;
        }
        if n == 0 {
            return Err(Error::Data("cannot fit a standardizer on zero rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| {
                let var = (q / n as f64 - mu * mu).max(0.0);
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, m: &PatientMatrix) -> Result<PatientMatrix> {
        if m.cols != self.mean.len() {
            return Err(Error::shape("standardize", &[self.mean.len()], &[m.cols]));
        }
        let data = m
            .data
            .chunks(m.cols)
            .flat_map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (mu, sd))| (v - mu) / sd)
            })
            .collect();
        Ok(PatientMatrix { data, ..m.clone() })
    }
}

/// Preprocessed MPTS cohort for one horizon, ordered by patient id.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub horizon: usize,
    pub schema: FeatureSchema,
    pub patients: Vec<(PatientMatrix, u8)>,
    /// Patients dropped for having fewer than [`MIN_ADMISSION_HOURS`] of records.
    pub excluded: Vec<String>,
}

impl Cohort {
    pub fn positives(&self) -> usize {
        self.patients.iter().filter(|(_, y)| *y == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.patients.len() - self.positives()
    }

    /// Z-scores every matrix with statistics from `train_ids` only.
    pub fn standardize(&mut self, train_ids: &[String]) -> Result<Standardizer> {
        let set: std::collections::HashSet<&str> = train_ids.iter().map(String::as_str).collect();
        let st = Standardizer::fit(
            self.patients
                .iter()
                .filter(|(m, _)| set.contains(m.patient_id.as_str()))
                .map(|(m, _)| m),
        )?;
        for (m, _) in &mut self.patients {
            *m = st.apply(m)?;
        }
        Ok(st)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRow {
    patient_id: String,
    label: u8,
}

pub fn read_events(path: &Path, schema: &FeatureSchema) -> Result<Vec<EventRecord>> {
    let rows: Vec<(u64, EventRecord)> =
        io::read_csv(path, &["patient_id", "hour_offset", "variable", "value"])?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, e) in rows {
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as usize,
            msg,
        };
        if !(e.hour_offset >= 0.0) || !e.hour_offset.is_finite() {
            return Err(bad(format!(
                "hour_offset {} must be a finite value >= 0",
                e.hour_offset
            )));
        }
        if !e.value.is_finite() {
            return Err(bad(format!("value {} is not finite", e.value)));
        }
        if schema.column(&e.variable).is_none() {
            return Err(bad(format!(
                "variable {:?} is not in the feature schema",
                e.variable
            )));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    let rows: Vec<(u64, LabelRow)> = io::read_csv(path, &["patient_id", "label"])?;
    let mut out = BTreeMap::new();
    for (line, r) in rows {
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as usize,
            msg,
        };
        if r.label > 1 {
            return Err(bad(format!("label {} must be 0 or 1", r.label)));
        }
        if out.insert(r.patient_id.clone(), r.label).is_some() {
            return Err(bad(format!("patient {} labeled twice", r.patient_id)));
        }
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, u8>) -> Result<()> {
    let rows: Vec<LabelRow> = labels
        .iter()
        .map(|(id, &label)| LabelRow {
            patient_id: id.clone(),
            label,
        })
        .collect();
    io::write_csv(path, &rows)
}

/// Hours with at least one record: the bin index of the last record plus one.
pub fn observed_hours(events: &[&EventRecord]) -> Option<(f64, usize)> {
    let last = events
        .iter()
        .map(|e| e.hour_offset)
        .fold(f64::NEG_INFINITY, f64::max);
    last.is_finite().then(|| (last, last.floor() as usize + 1))
}

/// One patient's events to a complete `horizon × M` matrix.
///
/// Binning and imputation only see the first `min(observed, horizon)` hours,
/// so no value from beyond the prediction window leaks in through the
/// backward fill.
pub fn patient_matrix(
    patient_id: &str,
    events: &[&EventRecord],
    schema: &FeatureSchema,
    defaults: &[f64],
    horizon: usize,
) -> Option<PatientMatrix> {
    let (_, observed) = observed_hours(events)?;
    let window = observed.min(horizon);
    let grid = bin_hourly(events, schema, window);
    let filled = impute(&grid, defaults);
    let fitted = fit_length(&filled, window, horizon);
    Some(PatientMatrix {
        patient_id: patient_id.to_string(),
        rows: horizon,
        cols: schema.len(),
        data: fitted.cells.iter().map(|c| c.expect("imputed")).collect(),
    })
}

/// Builds the cohort for horizon `horizon` from already parsed inputs.
pub fn assemble_cohort(
    events: &[EventRecord],
    ranges: &ValidRangeTable,
    schema: &FeatureSchema,
    labels: &BTreeMap<String, u8>,
    horizon: usize,
) -> Result<Cohort> {
    if horizon == 0 {
        return Err(Error::Config("horizon T must be at least 1".into()));
    }
    if !STANDARD_HORIZONS.contains(&horizon) {
        log::warn!("horizon T={horizon} is outside the standard set {STANDARD_HORIZONS:?}");
    }
    let defaults: Vec<f64> = schema
        .names()
        .iter()
        .map(|n| {
            ranges
                .get(n)
                .map(ValueRange::population_default)
                .ok_or_else(|| Error::Config(format!("no valid range configured for: {n}")))
        })
        .collect::<Result<_>>()?;
    let kept = filter_outliers(events, ranges)?;

    let mut by_patient: BTreeMap<&str, Vec<&EventRecord>> = BTreeMap::new();
    for e in &kept {
        by_patient.entry(e.patient_id.as_str()).or_default().push(e);
    }
    // Patients whose every event was an outlier still count as present.
    let mut all_ids: Vec<&str> = events.iter().map(|e| e.patient_id.as_str()).collect();
    all_ids.sort_unstable();
    all_ids.dedup();
    if let Some(unlabeled) = all_ids.iter().find(|id| !labels.contains_key(**id)) {
        return Err(Error::Data(format!(
            "patient {unlabeled} has events but no label"
        )));
    }

    let results: Vec<(String, Option<PatientMatrix>)> = all_ids
        .par_iter()
        .map(|&id| {
            let evs = by_patient.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let long_enough =
                observed_hours(evs).is_some_and(|(last, _)| last >= MIN_ADMISSION_HOURS);
            let m = long_enough
                .then(|| patient_matrix(id, evs, schema, &defaults, horizon))
                .flatten();
            (id.to_string(), m)
        })
        .collect();

    let mut patients = Vec::new();
    let mut excluded = Vec::new();
    for (id, m) in results {
        match m {
            Some(m) => {
                let y = labels[&id];
                patients.push((m, y));
            }
            None => excluded.push(id),
        }
    }
    excluded.extend(
        labels
            .keys()
            .filter(|id| all_ids.binary_search(&id.as_str()).is_err())
            .cloned(),
    );
    excluded.sort();
    if patients.is_empty() {
        return Err(Error::Data("cohort is empty after preprocessing".into()));
    }
    Ok(Cohort {
        horizon,
        schema: schema.clone(),
        patients,
        excluded,
    })
}

/// Reads the four input files and assembles the cohort.
pub fn load_cohort(
    events: &Path,
    ranges: &Path,
    schema: &Path,
    labels: &Path,
    horizon: usize,
) -> Result<Cohort> {
    let schema = FeatureSchema::load(schema)?;
    let ranges = ValidRangeTable::load(ranges)?;
    let events = read_events(events, &schema)?;
    let labels = read_labels(labels)?;
    assemble_cohort(&events, &ranges, &schema, &labels, horizon)
}
