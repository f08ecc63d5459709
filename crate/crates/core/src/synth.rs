//! Label-controlled synthetic cohorts.
//!
//! Each patient gets a Bernoulli label, a stay length, hourly-ish vital and
//! lab measurements with a class-dependent mean shift, and a handful of
//! template notes mixing filler words with class phrases. Every patient
//! draws from its own ChaCha stream, so output does not depend on
//! generation order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mpts::{self, EventRecord, FeatureSchema, ValidRangeTable, ValueRange};
use crate::notes::{NoteRecord, LEAKAGE_TERMS};

/// Shift of a fully informative feature, in between-patient standard
/// deviations, at `mpts_signal = 1` and hour 0.
pub const SHIFT_SCALE: f64 = 1.0;

/// Sentences appended by [`inject_leakage_decoys`].
pub const DECOYS: [&str; 4] = [
    "Concern for septic shock.",
    "Rule out sepsis.",
    "Sepsis protocol initiated.",
    "Possible septicemia, cultures sent.",
];

struct FeatureSpec {
    name: &'static str,
    min: f64,
    max: f64,
    mean: f64,
    between_sd: f64,
    within_sd: f64,
    /// Direction of the positive-class shift.
    direction: f64,
}

const CATALOG: [FeatureSpec; 12] = [
    FeatureSpec {
        name: "heart_rate",
        min: 20.0,
        max: 250.0,
        mean: 85.0,
        between_sd: 12.0,
        within_sd: 6.0,
        direction: 1.0,
    },
    FeatureSpec {
        name: "resp_rate",
        min: 4.0,
        max: 60.0,
        mean: 18.0,
        between_sd: 3.0,
        within_sd: 2.0,
        direction: 1.0,
    },
    FeatureSpec {
        name: "temperature",
        min: 30.0,
        max: 43.0,
        mean: 37.0,
        between_sd: 0.5,
        within_sd: 0.3,
        direction: 1.0,
    },
    FeatureSpec {
        name: "sbp",
        min: 40.0,
        max: 250.0,
        mean: 120.0,
        between_sd: 14.0,
        within_sd: 8.0,
        direction: -1.0,
    },
    FeatureSpec {
        name: "lactate",
        min: 0.1,
        max: 30.0,
        mean: 1.6,
        between_sd: 0.5,
        within_sd: 0.3,
        direction: 1.0,
    },
    FeatureSpec {
        name: "wbc",
        min: 0.1,
        max: 100.0,
        mean: 9.0,
        between_sd: 2.5,
        within_sd: 1.0,
        direction: 1.0,
    },
    FeatureSpec {
        name: "dbp",
        min: 20.0,
        max: 150.0,
        mean: 70.0,
        between_sd: 9.0,
        within_sd: 5.0,
        direction: -1.0,
    },
    FeatureSpec {
        name: "spo2",
        min: 50.0,
        max: 100.0,
        mean: 95.0,
        between_sd: 1.5,
        within_sd: 1.0,
        direction: -1.0,
    },
    FeatureSpec {
        name: "glucose",
        min: 20.0,
        max: 800.0,
        mean: 130.0,
        between_sd: 25.0,
        within_sd: 12.0,
        direction: 1.0,
    },
    FeatureSpec {
        name: "creatinine",
        min: 0.1,
        max: 20.0,
        mean: 1.0,
        between_sd: 0.3,
        within_sd: 0.1,
        direction: 1.0,
    },
    FeatureSpec {
        name: "platelets",
        min: 5.0,
        max: 1000.0,
        mean: 240.0,
        between_sd: 50.0,
        within_sd: 15.0,
        direction: -1.0,
    },
    FeatureSpec {
        name: "age",
        min: 15.0,
        max: 100.0,
        mean: 62.0,
        between_sd: 14.0,
        within_sd: 0.0,
        direction: 1.0,
    },
];

pub const MAX_FEATURES: usize = CATALOG.len();

/// Class phrases and neutral filler for the notes generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhraseBank {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub filler: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for PhraseBank {
    fn default() -> Self {
        PhraseBank {
            positive: strings(&[
                "back pain",
                "very painful",
                "rigors overnight",
                "increasing confusion",
                "mottled skin",
                "poor urine output",
            ]),
            negative: strings(&[
                "stable",
                "great condition",
                "comfortable",
                "ambulating independently",
                "tolerating diet",
                "pleasant mood",
            ]),
            filler: strings(&[
                "patient",
                "resting",
                "bed",
                "monitor",
                "family",
                "visited",
                "medication",
                "given",
                "chart",
                "reviewed",
                "plan",
                "continue",
                "nurse",
                "shift",
                "vitals",
                "checked",
                "line",
                "intact",
                "awake",
                "alert",
                "oriented",
                "dressing",
                "changed",
                "labs",
                "drawn",
                "report",
                "received",
                "call",
                "light",
                "reach",
                "turned",
                "positioned",
                "education",
                "provided",
                "rounds",
                "completed",
            ]),
        }
    }
}

impl PhraseBank {
    pub fn load(path: &Path) -> Result<Self> {
        let bank: PhraseBank = io::read_json(path)?;
        bank.validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() || self.filler.is_empty() {
            return Err(Error::Config("phrase bank lists must be nonempty".into()));
        }
        if let Some(p) = self.positive.iter().find(|p| self.negative.contains(p)) {
            return Err(Error::Config(format!(
                "phrase {p:?} is both positive and negative"
            )));
        }
        let all = self
            .positive
            .iter()
            .chain(&self.negative)
            .chain(&self.filler);
        for p in all {
            let lower = p.to_lowercase();
            if LEAKAGE_TERMS.iter().any(|t| lower.contains(t)) {
                return Err(Error::Config(format!(
                    "phrase {p:?} contains a leakage term"
                )));
            }
        }
        Ok(())
    }

    /// Lowercase words of the positive phrases.
    pub fn positive_tokens(&self) -> Vec<String> {
        words(&self.positive)
    }

    pub fn negative_tokens(&self) -> Vec<String> {
        words(&self.negative)
    }

    pub fn filler_tokens(&self) -> Vec<String> {
        words(&self.filler)
    }
}

fn words(phrases: &[String]) -> Vec<String> {
    let mut out: Vec<String> = phrases
        .iter()
        .flat_map(|p| p.split_whitespace().map(|w| w.to_lowercase()))
        .collect();
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub prevalence: f64,
    /// Number of features, taken from the front of the built-in catalog.
    pub features: usize,
    /// How many of those features carry the class shift.
    pub signal_features: usize,
    pub mpts_signal: f64,
    pub notes_signal: f64,
    pub time_ramp: f64,
    /// Probability that a scheduled measurement is dropped.
    pub missingness: f64,
    /// Scheduled measurements per feature per hour (Poisson rate).
    pub measurement_rate: f64,
    pub min_stay_hours: f64,
    pub max_stay_hours: f64,
    /// Hours between progress notes.
    pub note_interval_hours: f64,
    /// Fraction of notes that get a leakage decoy sentence.
    pub leakage_rate: f64,
    /// Fraction of events replaced by out-of-range values.
    pub outlier_rate: f64,
    pub phrases: PhraseBank,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 2000,
            prevalence: 0.3,
            features: 8,
            signal_features: 4,
            mpts_signal: 0.5,
            notes_signal: 0.5,
            time_ramp: 0.0,
            missingness: 0.3,
            measurement_rate: 1.0,
            min_stay_hours: 14.0,
            max_stay_hours: 72.0,
            note_interval_hours: 8.0,
            leakage_rate: 0.0,
            outlier_rate: 0.0,
            phrases: PhraseBank::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("mpts_signal", self.mpts_signal),
            ("notes_signal", self.notes_signal),
            ("time_ramp", self.time_ramp),
            ("missingness", self.missingness),
            ("leakage_rate", self.leakage_rate),
            ("outlier_rate", self.outlier_rate),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth: {name} {v} outside [0, 1]")));
            }
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!(
                "synth: prevalence {} outside (0, 1)",
                self.prevalence
            )));
        }
        if self.n_patients < 10 {
            return Err(Error::Config(format!(
                "synth: n_patients {} below 10",
                self.n_patients
            )));
        }
        if self.features == 0 || self.features > MAX_FEATURES {
            return Err(Error::Config(format!(
                "synth: features must be in 1..={MAX_FEATURES}, got {}",
                self.features
            )));
        }
        if self.signal_features > self.features {
            return Err(Error::Config(
                "synth: signal_features exceeds features".into(),
            ));
        }
        if !(self.min_stay_hours > 0.0 && self.min_stay_hours <= self.max_stay_hours) {
            return Err(Error::Config(
                "synth: need 0 < min_stay_hours <= max_stay_hours".into(),
            ));
        }
        if !(self.measurement_rate > 0.0) || !(self.note_interval_hours > 0.0) {
            return Err(Error::Config(
                "synth: rates and intervals must be positive".into(),
            ));
        }
        self.phrases.validate()
    }

    /// Positive-minus-negative mean difference of feature `j` at `hour`, in
    /// the feature's units.
    pub fn class_shift(&self, feature: usize, hour: f64) -> f64 {
        if feature >= self.signal_features {
            return 0.0;
        }
        let f = &CATALOG[feature];
        f.direction
            * f.between_sd
            * SHIFT_SCALE
            * self.mpts_signal
            * (1.0 + self.time_ramp * hour / 36.0)
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::new(
            CATALOG[..self.features]
                .iter()
                .map(|f| f.name.to_string())
                .collect(),
        )
        .expect("catalog names are unique")
    }

    pub fn ranges(&self) -> ValidRangeTable {
        let map = CATALOG[..self.features]
            .iter()
            .map(|f| {
                (
                    f.name.to_string(),
                    ValueRange {
                        min: f.min,
                        max: f.max,
                        default: Some(f.mean),
                    },
                )
            })
            .collect();
        ValidRangeTable::new(map).expect("catalog ranges are valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub events: Vec<EventRecord>,
    pub notes: Vec<NoteRecord>,
    pub labels: BTreeMap<String, u8>,
    pub schema: FeatureSchema,
    pub ranges: ValidRangeTable,
}

struct PatientData {
    events: Vec<EventRecord>,
    notes: Vec<NoteRecord>,
    label: u8,
}

fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

pub fn patient_id(index: usize) -> String {
    format!("P{:05}", index + 1)
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn note_text(rng: &mut ChaCha8Rng, cfg: &SynthConfig, label: u8) -> String {
    const STOP: [&str; 6] = ["the", "and", "was", "is", "of", "with"];
    let bank = &cfg.phrases;
    let mut sentences = Vec::new();
    let n_filler = rng.random_range(2..=4);
    for _ in 0..n_filler {
        let len = rng.random_range(2..=4);
        let mut words = Vec::with_capacity(len + 1);
        for k in 0..len {
            if k > 0 && rng.random::<f64>() < 0.3 {
                words.push(STOP[rng.random_range(0..STOP.len())].to_string());
            }
            words.push(bank.filler[rng.random_range(0..bank.filler.len())].clone());
        }
        sentences.push(words.join(" "));
    }
    let phrase = if rng.random::<f64>() < cfg.notes_signal {
        Some(label)
    } else if rng.random::<f64>() < 0.5 {
        Some(u8::from(rng.random::<bool>()))
    } else {
        None
    };
    if let Some(class) = phrase {
        let list = if class == 1 {
            &bank.positive
        } else {
            &bank.negative
        };
        let p = list[rng.random_range(0..list.len())].clone();
        let at = rng.random_range(0..=sentences.len());
        sentences.insert(at, p);
    }
    let mut text = sentences
        .iter()
        .map(|s| {
            let mut c = s.chars();
            match c.next() {
                Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(". ");
    text.push('.');
    text
}

fn generate_patient(cfg: &SynthConfig, index: usize) -> PatientData {
    let mut rng = patient_rng(cfg.seed, index);
    let id = patient_id(index);
    let label = u8::from(rng.random::<f64>() < cfg.prevalence);
    let stay = rng.random_range(cfg.min_stay_hours..=cfg.max_stay_hours);
    let mut events = Vec::new();
    let mut intercepts = Vec::with_capacity(cfg.features);
    let poisson = Poisson::new(cfg.measurement_rate * stay).expect("positive rate");
    for (j, f) in CATALOG[..cfg.features].iter().enumerate() {
        let intercept = Normal::new(0.0, f.between_sd).expect("sd").sample(&mut rng);
        intercepts.push(intercept);
        if f.within_sd == 0.0 {
            // Static attribute, charted once at admission.
            let v = f.mean + intercept + f64::from(label) * cfg.class_shift(j, 0.0);
            events.push(EventRecord {
                patient_id: id.clone(),
                hour_offset: 0.0,
                variable: f.name.to_string(),
                value: round_to(v.clamp(f.min, f.max), 2),
            });
            continue;
        }
        let noise = Normal::new(0.0, f.within_sd).expect("sd");
        let count = poisson.sample(&mut rng) as usize;
        let mut times: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..stay)).collect();
        times.sort_by(f64::total_cmp);
        for t in times {
            let shift = f64::from(label) * cfg.class_shift(j, t);
            let v = f.mean + intercept + shift + noise.sample(&mut rng);
            if rng.random::<f64>() < cfg.missingness {
                continue;
            }
            events.push(EventRecord {
                patient_id: id.clone(),
                hour_offset: round_to(t, 3),
                variable: f.name.to_string(),
                value: round_to(v.clamp(f.min, f.max), 2),
            });
        }
    }
    // A discharge heart-rate check marks the end of the stay.
    let f0 = &CATALOG[0];
    let v = f0.mean + intercepts[0] + f64::from(label) * cfg.class_shift(0, stay);
    events.push(EventRecord {
        patient_id: id.clone(),
        hour_offset: round_to(stay, 3),
        variable: f0.name.to_string(),
        value: round_to(v.clamp(f0.min, f0.max), 2),
    });
    if cfg.outlier_rate > 0.0 {
        for e in &mut events {
            if rng.random::<f64>() < cfg.outlier_rate {
                let f = CATALOG
                    .iter()
                    .find(|f| f.name == e.variable)
                    .expect("catalog feature");
                let span = f.max - f.min;
                e.value = if rng.random::<bool>() {
                    f.max + span
                } else {
                    f.min - span
                };
            }
        }
    }
    events.sort_by(|a, b| a.hour_offset.total_cmp(&b.hour_offset));

    let mut notes = Vec::new();
    let mut t = rng.random_range(0.0..cfg.note_interval_hours.min(4.0));
    while t < stay {
        notes.push(NoteRecord {
            patient_id: id.clone(),
            hour_offset: round_to(t, 3),
            text: note_text(&mut rng, cfg, label),
        });
        t += cfg.note_interval_hours * rng.random_range(0.75..1.25);
    }
    PatientData {
        events,
        notes,
        label,
    }
}

/// Generates the whole cohort, applying decoy injection at
/// `cfg.leakage_rate`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let patients: Vec<PatientData> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(cfg, i))
        .collect();
    let mut events = Vec::new();
    let mut notes = Vec::new();
    let mut labels = BTreeMap::new();
    for (i, p) in patients.into_iter().enumerate() {
        labels.insert(patient_id(i), p.label);
        events.extend(p.events);
        notes.extend(p.notes);
    }
    let notes = inject_leakage_decoys(&notes, cfg.leakage_rate, cfg.seed);
    Ok(SynthCohort {
        events,
        notes,
        labels,
        schema: cfg.schema(),
        ranges: cfg.ranges(),
    })
}

/// Appends a decoy sentence mentioning sepsis to each note with probability
/// `rate`.
pub fn inject_leakage_decoys(notes: &[NoteRecord], rate: f64, seed: u64) -> Vec<NoteRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    notes
        .iter()
        .map(|n| {
            let mut n = n.clone();
            // Always draw both numbers so the stream does not depend on rate.
            let hit = rng.random::<f64>() < rate;
            let which = rng.random_range(0..DECOYS.len());
            if hit {
                n.text = format!("{} {}", n.text, DECOYS[which]);
            }
            n
        })
        .collect()
}

#[derive(Serialize)]
struct NoteRow<'a> {
    patient_id: &'a str,
    hour_offset: f64,
    text: &'a str,
}

impl SynthCohort {
    /// Writes `events.csv`, `notes.csv`, `labels.csv`, `ranges.json` and
    /// `schema.json` (plus `phrasebank.json`) into `dir`.
    pub fn write(&self, dir: &Path, phrases: &PhraseBank) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_csv(&dir.join("events.csv"), &self.events)?;
        let rows: Vec<NoteRow<'_>> = self
            .notes
            .iter()
            .map(|n| NoteRow {
                patient_id: &n.patient_id,
                hour_offset: n.hour_offset,
                text: &n.text,
            })
            .collect();
        io::write_csv(&dir.join("notes.csv"), &rows)?;
        mpts::write_labels(&dir.join("labels.csv"), &self.labels)?;
        io::write_json(&dir.join("ranges.json"), &self.ranges)?;
        io::write_json(&dir.join("schema.json"), &self.schema)?;
        io::write_json(&dir.join("phrasebank.json"), phrases)
    }
}
