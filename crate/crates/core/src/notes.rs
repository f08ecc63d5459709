//! Clinical-notes preprocessing: leakage-sentence removal, text cleaning,
//! per-horizon concatenation, vocabulary building and BERT-style encoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Substrings marking a sentence as label leakage.
pub const LEAKAGE_TERMS: [&str; 2] = ["sepsis", "septic"];

const DEFAULT_STOPWORDS: &str = include_str!("../assets/stopwords.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub patient_id: String,
    pub hour_offset: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl Default for StopWords {
    fn default() -> Self {
        StopWords::parse(DEFAULT_STOPWORDS)
    }
}

impl StopWords {
    /// One token per line; blank lines are ignored.
    pub fn parse(text: &str) -> Self {
        StopWords(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(StopWords::parse(&text))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercases, replaces everything but `[a-z0-9]` and whitespace with a
/// space, removes stop words, and collapses whitespace.
pub fn clean_text(text: &str, stopwords: &StopWords) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !stopwords.contains(t))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_leakage(sentence: &str) -> bool {
    let lower = sentence.to_lowercase();
    LEAKAGE_TERMS.iter().any(|t| lower.contains(t))
}

/// Removes every sentence mentioning a leakage term.
///
/// Sentences end at `.`, `!`, `?`, `;` or a newline. Text without a leakage
/// sentence is returned unchanged; otherwise the surviving sentences are
/// trimmed and rejoined as `"s1. s2."`.
pub fn drop_leakage_sentences(text: &str) -> String {
    let sentences: Vec<&str> = text.split(['.', '!', '?', ';', '\n']).collect();
    if !sentences.iter().any(|s| is_leakage(s)) {
        return text.to_string();
    }
    let kept: Vec<&str> = sentences
        .iter()
        .filter(|s| !is_leakage(s))
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    if kept.is_empty() {
        String::new()
    } else {
        format!("{}.", kept.join(". "))
    }
}

/// Concatenates one patient's notes recorded at or before `horizon` hours,
/// in time order (ties keep input order), each note leakage-filtered and
/// cleaned. Notes that clean to nothing are skipped.
pub fn concat_notes(notes: &[&NoteRecord], horizon: f64, stopwords: &StopWords) -> String {
    let mut within: Vec<&NoteRecord> = notes
        .iter()
        .copied()
        .filter(|n| n.hour_offset <= horizon)
        .collect();
    within.sort_by(|a, b| a.hour_offset.total_cmp(&b.hour_offset));
    within
        .iter()
        .map(|n| clean_text(&drop_leakage_sentences(&n.text), stopwords))
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token ↔ id map with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// The `token → id` map, as written to `vocab.json`.
    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.ids.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![String::new(); map.len()];
        for (tok, &id) in &map {
            let slot = tokens.get_mut(id).ok_or_else(|| {
                Error::Data(format!("vocabulary ids are not contiguous (id {id})"))
            })?;
            if !slot.is_empty() {
                return Err(Error::Data(format!("vocabulary id {id} assigned twice")));
            }
            *slot = tok.clone();
        }
        for (id, name) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*name) {
                return Err(Error::Data(format!("vocabulary must map {name} to {id}")));
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.to_map())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::from_map(io::read_json(path)?)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        Vocabulary::from_map(map).map_err(serde::de::Error::custom)
    }
}

/// Whitespace tokens with at least `min_frequency` occurrences, ordered by
/// descending count and then lexicographically, after the reserved ids.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_frequency: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for tok in doc.as_ref().split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_frequency.max(1) && !RESERVED.contains(t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(entries.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    /// `true` for positions holding real tokens (including CLS and SEP).
    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.max_len()).map(|i| i < self.true_length).collect()
    }

    pub fn decode(&self, vocab: &Vocabulary) -> Vec<String> {
        self.token_ids
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_string())
            .collect()
    }
}

/// `[CLS] tokens… [SEP]` padded with `[PAD]` to `max_len`. Text longer than
/// `max_len - 2` tokens keeps its head.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max_len {max_len} must be at least 2"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        text.split_whitespace()
            .take(max_len - 2)
            .map(|t| vocab.id(t)),
    );
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence {
        token_ids: ids,
        segment_ids: vec![0; max_len],
        position_ids: (0..max_len).collect(),
        true_length,
    })
}

pub fn read_notes(path: &Path) -> Result<Vec<NoteRecord>> {
    let rows: Vec<(u64, NoteRecord)> = io::read_csv(path, &["patient_id", "hour_offset", "text"])?;
    rows.into_iter()
        .map(|(line, n)| {
            if n.hour_offset >= 0.0 && n.hour_offset.is_finite() {
                Ok(n)
            } else {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line as usize,
                    msg: format!("hour_offset {} must be a finite value >= 0", n.hour_offset),
                })
            }
        })
        .collect()
}

/// Cleaned concatenated text per patient for a horizon; every id in
/// `patient_ids` gets an entry (empty when the patient has no notes).
pub fn patient_texts(
    notes: &[NoteRecord],
    patient_ids: &[String],
    horizon: usize,
    stopwords: &StopWords,
) -> BTreeMap<String, String> {
    let mut grouped: HashMap<&str, Vec<&NoteRecord>> = HashMap::new();
    for n in notes {
        grouped.entry(n.patient_id.as_str()).or_default().push(n);
    }
    patient_ids
        .iter()
        .map(|id| {
            let ns = grouped.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            (id.clone(), concat_notes(ns, horizon as f64, stopwords))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(h: f64, text: &str) -> NoteRecord {
        NoteRecord {
            patient_id: "p".into(),
            hour_offset: h,
            text: text.into(),
        }
    }

    #[test]
    fn cleaning_examples() {
        let sw = StopWords::default();
        assert_eq!(
            clean_text("The patient REMAINS stable.", &sw),
            "patient remains stable"
        );
        assert_eq!(clean_text("", &sw), "");
        assert_eq!(clean_text("BP 120/80!!", &sw), "bp 120 80");
        assert_eq!(clean_text("Très   bien\tok", &sw), "tr s bien ok");
    }

    #[test]
    fn shipped_stopwords_keep_phrase_words() {
        let sw = StopWords::default();
        assert!(sw.len() >= 50);
        assert!(sw.contains("the"));
        for w in ["very", "no", "not", "pain", "great"] {
            assert!(!sw.contains(w), "{w}");
        }
    }

    #[test]
    fn leakage_examples() {
        assert_eq!(
            drop_leakage_sentences("Concern for septic shock. Vitals stable."),
            "Vitals stable."
        );
        assert_eq!(
            drop_leakage_sentences("Vitals stable; no fever"),
            "Vitals stable; no fever"
        );
        assert_eq!(drop_leakage_sentences("Sepsis suspected"), "");
        assert_eq!(
            drop_leakage_sentences("ok!\nSEPSIS? fine; rule out septicemia"),
            "ok. fine."
        );
    }

    #[test]
    fn concat_filters_by_horizon_and_orders_by_time() {
        let sw = StopWords::default();
        let a = note(30.0, "late note");
        let b = note(2.0, "Early note.");
        let c = note(5.0, "The second one");
        assert_eq!(concat_notes(&[&a, &b], 12.0, &sw), "early note");
        assert_eq!(concat_notes(&[], 12.0, &sw), "");
        assert_eq!(concat_notes(&[&c, &b], 12.0, &sw), "early note second one");
        assert_eq!(concat_notes(&[&b], 2.0, &sw), "early note");
    }

    #[test]
    fn vocab_ordering_and_threshold() {
        let v = build_vocab(&["a a b"], 1).unwrap();
        assert_eq!(v.get("a"), Some(4));
        assert_eq!(v.get("b"), Some(5));
        assert_eq!(v.len(), 6);
        let v2 = build_vocab(&["a a b"], 2).unwrap();
        assert_eq!(v2.get("b"), None);
        assert_eq!(v2.id("b"), UNK);
        let tie = build_vocab(&["z y x"], 1).unwrap();
        assert_eq!(tie.tokens()[4..], ["x", "y", "z"]);
        assert!(build_vocab::<&str>(&[], 1).is_err());
        assert_eq!(
            build_vocab(&["q r", "r q"], 1).unwrap(),
            build_vocab(&["q r", "r q"], 1).unwrap()
        );
    }

    #[test]
    fn vocab_map_round_trip_and_validation() {
        let v = build_vocab(&["x y y"], 1).unwrap();
        assert_eq!(Vocabulary::from_map(v.to_map()).unwrap(), v);
        let mut bad = v.to_map();
        bad.insert("[CLS]".into(), 7);
        assert!(Vocabulary::from_map(bad).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(&["one two three"], 1).unwrap();
        let e = encode("", &v, 6).unwrap();
        assert_eq!(e.token_ids, vec![CLS, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(e.true_length, 2);

        let e = encode("one two three", &v, 8).unwrap();
        assert_eq!(e.token_ids.len(), 8);
        assert_eq!(e.true_length, 5);
        assert_eq!(e.position_ids, (0..8).collect::<Vec<_>>());
        assert_eq!(e.attention_mask().iter().filter(|k| **k).count(), 5);

        let e = encode("one two three unknown", &v, 4).unwrap();
        assert_eq!(e.token_ids, vec![CLS, v.id("one"), v.id("two"), SEP]);
        let e = encode("unknown", &v, 4).unwrap();
        assert_eq!(e.token_ids[1], UNK);
        assert!(encode("x", &v, 1).is_err());
    }
}
