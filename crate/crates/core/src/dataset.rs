//! Preprocessed per-horizon bundles: one record per patient holding the
//! imputed (unstandardized) matrix, the cleaned notes text and the label.
//!
//! On disk a bundle is a directory with `matrices.jsonl`, `texts.jsonl`,
//! `tokens.jsonl`, `vocab.json` and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mpts::{self, Cohort, FeatureSchema, PatientMatrix, ValidRangeTable};
use crate::notes::{self, NoteRecord, StopWords, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: u8,
    pub matrix: PatientMatrix,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub horizon: usize,
    pub features: Vec<String>,
    /// Ordered by patient id.
    pub records: Vec<PatientRecord>,
    pub excluded: Vec<String>,
}

/// Paths of the raw inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub events: PathBuf,
    pub notes: PathBuf,
    pub labels: PathBuf,
    pub ranges: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
}

impl InputPaths {
    /// The standard file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        InputPaths {
            events: dir.join("events.csv"),
            notes: dir.join("notes.csv"),
            labels: dir.join("labels.csv"),
            ranges: dir.join("ranges.json"),
            schema: dir.join("schema.json"),
            stopwords: None,
        }
    }

    /// Content hash of every input file, by role.
    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (role, path) in [
            ("events", &self.events),
            ("notes", &self.notes),
            ("labels", &self.labels),
            ("ranges", &self.ranges),
            ("schema", &self.schema),
        ] {
            out.insert(role.to_string(), io::content_hash(path)?);
        }
        if let Some(p) = &self.stopwords {
            out.insert("stopwords".into(), io::content_hash(p)?);
        }
        Ok(out)
    }
}

/// Raw inputs parsed once and reusable across horizons.
pub struct RawInputs {
    pub schema: FeatureSchema,
    pub ranges: ValidRangeTable,
    pub events: Vec<mpts::EventRecord>,
    pub labels: BTreeMap<String, u8>,
    pub notes: Vec<NoteRecord>,
    pub stopwords: StopWords,
}

impl RawInputs {
    pub fn load(paths: &InputPaths) -> Result<Self> {
        let schema = FeatureSchema::load(&paths.schema)?;
        let ranges = ValidRangeTable::load(&paths.ranges)?;
        let events = mpts::read_events(&paths.events, &schema)?;
        let labels = mpts::read_labels(&paths.labels)?;
        let notes = notes::read_notes(&paths.notes)?;
        let stopwords = match &paths.stopwords {
            Some(p) => StopWords::load(p)?,
            None => StopWords::default(),
        };
        Ok(RawInputs {
            schema,
            ranges,
            events,
            labels,
            notes,
            stopwords,
        })
    }

    pub fn dataset(&self, horizon: usize) -> Result<Dataset> {
        let cohort = mpts::assemble_cohort(
            &self.events,
            &self.ranges,
            &self.schema,
            &self.labels,
            horizon,
        )?;
        Ok(Dataset::from_cohort(&cohort, &self.notes, &self.stopwords))
    }
}

impl Dataset {
    pub fn from_cohort(cohort: &Cohort, notes: &[NoteRecord], stopwords: &StopWords) -> Self {
        let ids: Vec<String> = cohort
            .patients
            .iter()
            .map(|(m, _)| m.patient_id.clone())
            .collect();
        let mut texts = notes::patient_texts(notes, &ids, cohort.horizon, stopwords);
        let records = cohort
            .patients
            .iter()
            .map(|(m, y)| PatientRecord {
                patient_id: m.patient_id.clone(),
                label: *y,
                text: texts.remove(&m.patient_id).unwrap_or_default(),
                matrix: m.clone(),
            })
            .collect();
        Dataset {
            horizon: cohort.horizon,
            features: cohort.schema.names().to_vec(),
            records,
            excluded: cohort.excluded.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn summary(&self) -> CohortSummary {
        let positive = self.positives();
        CohortSummary {
            total: self.len(),
            negative: self.len() - positive,
            positive,
        }
    }
}

/// Table-1-style cohort counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct CohortSummary {
    pub total: usize,
    pub negative: usize,
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub horizon: usize,
    pub features: Vec<String>,
    pub cohort: CohortSummary,
    pub excluded: Vec<String>,
    /// Seed of the split whose training part fitted the vocabulary.
    pub vocab_seed: u64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub inputs: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TextRow {
    patient_id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct TokenRow {
    patient_id: String,
    #[serde(flatten)]
    tokens: TokenSequence,
}

#[derive(Serialize, Deserialize)]
struct MatrixRow {
    label: u8,
    #[serde(flatten)]
    matrix: PatientMatrix,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    io::ensure_parent(path)?;
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, &row)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Writes a bundle. `vocab` and `tokens` are the encoding fitted on one
/// split; training refits both on its own training part.
pub fn save_bundle(
    dir: &Path,
    data: &Dataset,
    vocab: &Vocabulary,
    tokens: &[TokenSequence],
    manifest: &BundleManifest,
) -> Result<()> {
    if tokens.len() != data.len() {
        return Err(Error::Data(format!(
            "{} token sequences for {} patients",
            tokens.len(),
            data.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(
        &dir.join("matrices.jsonl"),
        data.records.iter().map(|r| MatrixRow {
            label: r.label,
            matrix: r.matrix.clone(),
        }),
    )?;
    write_jsonl(
        &dir.join("texts.jsonl"),
        data.records.iter().map(|r| TextRow {
            patient_id: r.patient_id.clone(),
            text: r.text.clone(),
        }),
    )?;
    write_jsonl(
        &dir.join("tokens.jsonl"),
        data.records.iter().zip(tokens).map(|(r, t)| TokenRow {
            patient_id: r.patient_id.clone(),
            tokens: t.clone(),
        }),
    )?;
    vocab.save(&dir.join("vocab.json"))?;
    io::write_json(&dir.join("manifest.json"), manifest)
}

pub fn load_bundle(dir: &Path) -> Result<(Dataset, BundleManifest)> {
    let manifest: BundleManifest = io::read_json(&dir.join("manifest.json"))?;
    let matrices: Vec<MatrixRow> = read_jsonl(&dir.join("matrices.jsonl"))?;
    let texts_path = dir.join("texts.jsonl");
    let texts: Vec<TextRow> = read_jsonl(&texts_path)?;
    if texts.len() != matrices.len() {
        return Err(Error::Data(format!(
            "{}: {} texts for {} matrices",
            texts_path.display(),
            texts.len(),
            matrices.len()
        )));
    }
    let mut records = Vec::with_capacity(matrices.len());
    for (m, t) in matrices.into_iter().zip(texts) {
        if m.matrix.patient_id != t.patient_id {
            return Err(Error::Data(format!(
                "{}: patient {} is out of order with the matrices",
                texts_path.display(),
                t.patient_id
            )));
        }
        if m.matrix.rows != manifest.horizon || m.matrix.cols != manifest.features.len() {
            return Err(Error::Data(format!(
                "patient {}: matrix is {}x{}, bundle expects {}x{}",
                t.patient_id,
                m.matrix.rows,
                m.matrix.cols,
                manifest.horizon,
                manifest.features.len()
            )));
        }
        records.push(PatientRecord {
            patient_id: t.patient_id,
            label: m.label,
            matrix: m.matrix,
            text: t.text,
        });
    }
    Ok((
        Dataset {
            horizon: manifest.horizon,
            features: manifest.features.clone(),
            records,
            excluded: manifest.excluded.clone(),
        },
        manifest,
    ))
}

/// Token sequences of a saved bundle, in record order.
pub fn load_bundle_tokens(dir: &Path) -> Result<Vec<(String, TokenSequence)>> {
    let rows: Vec<TokenRow> = read_jsonl(&dir.join("tokens.jsonl"))?;
    Ok(rows.into_iter().map(|r| (r.patient_id, r.tokens)).collect())
}

/// Sub-directory of a bundle root holding horizon `t`.
pub fn horizon_dir(root: &Path, horizon: usize) -> PathBuf {
    root.join(format!("t{horizon}"))
}
