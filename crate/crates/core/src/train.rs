//! Splitting, training, evaluation, grid search and the multi-seed,
//! multi-horizon protocol.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnm::CnmConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{auroc, Metrics, MetricsReport};
use crate::model::{AblationMode, HeadConfig, ModelConfig, MultimodalModel, Sample};
use crate::mpts::{PatientMatrix, Standardizer};
use crate::nn::Ctx;
use crate::notes::{self, Vocabulary};
use crate::ptsm::PtsmConfig;
use crate::tensor::{checkpoint, Activation, AdamConfig, AdamState, Tape, Tensor};

pub const MIN_COHORT: usize = 5;
pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.2;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    /// Activation of the time-series encoder FFN and the fusion head.
    pub activation: Activation,
    pub epochs: usize,
    /// Notes sequence length, including CLS and SEP.
    pub max_len: usize,
    /// Time-series encoder layers (N).
    pub layers: usize,
    /// Interpolation coefficient (I).
    pub interpolation: usize,
    /// Time-series embedding width (K).
    pub embed_dim: usize,
    pub heads: usize,
    pub d_ff: Option<usize>,
    pub cnm_d_model: usize,
    pub cnm_layers: usize,
    pub cnm_heads: usize,
    pub cnm_d_ff: Option<usize>,
    pub cnm_activation: Activation,
    pub head_hidden: Vec<usize>,
    pub class_weight: f64,
    pub min_token_freq: usize,
    pub threshold: f64,
    pub seed: u64,
    pub horizon: usize,
    /// When set, every seed reuses the split drawn with this seed.
    pub fixed_split_seed: Option<u64>,
    pub stratified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            dropout: 0.1,
            batch_size: 32,
            activation: Activation::Relu,
            epochs: 10,
            max_len: 64,
            layers: 2,
            interpolation: 12,
            embed_dim: 32,
            heads: 2,
            d_ff: None,
            cnm_d_model: 32,
            cnm_layers: 2,
            cnm_heads: 2,
            cnm_d_ff: None,
            cnm_activation: Activation::Gelu,
            head_hidden: vec![64],
            class_weight: 0.5,
            min_token_freq: 1,
            threshold: 0.5,
            seed: 0,
            horizon: 12,
            fixed_split_seed: None,
            stratified: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, features: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            ptsm: PtsmConfig {
                features,
                embed_dim: self.embed_dim,
                layers: self.layers,
                heads: self.heads,
                d_ff: self.d_ff,
                interpolation: self.interpolation,
                dropout: self.dropout,
                activation: self.activation,
            },
            cnm: CnmConfig {
                vocab_size,
                d_model: self.cnm_d_model,
                layers: self.cnm_layers,
                heads: self.cnm_heads,
                d_ff: self.cnm_d_ff,
                max_len: self.max_len,
                dropout: self.dropout,
                activation: self.cnm_activation,
            },
            head: HeadConfig {
                hidden: self.head_hidden.clone(),
                activation: self.activation,
                dropout: self.dropout,
                class_weight: self.class_weight,
            },
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.fixed_split_seed.unwrap_or(self.seed)
    }
}

/// Short content hash of a config with its seed and horizon cleared, so all
/// seeds and horizons of one hyperparameter point share it.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.seed = 0;
    c.horizon = 0;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    io::blob_hash(&bytes)[..12].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn split_sizes(n: usize) -> (usize, usize) {
    let test = (TEST_FRACTION * n as f64).round() as usize;
    let val = (VAL_FRACTION * (n - test) as f64).round() as usize;
    (test, val)
}

/// Uniform random split keyed by `seed`: 20% test, then 20% of the rest as
/// validation. With `stratified`, each class is split separately.
pub fn split(data: &Dataset, seed: u64, stratified: bool) -> Result<SplitSpec> {
    let n = data.len();
    if n < MIN_COHORT {
        return Err(Error::Data(format!(
            "cohort of {n} patients is too small to split (need at least {MIN_COHORT})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<String>> = if stratified {
        [0u8, 1]
            .iter()
            .map(|&y| {
                data.records
                    .iter()
                    .filter(|r| r.label == y)
                    .map(|r| r.patient_id.clone())
                    .collect()
            })
            .collect()
    } else {
        vec![data.ids()]
    };
    let mut spec = SplitSpec {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut ids in groups {
        ids.shuffle(&mut rng);
        let (t, v) = split_sizes(ids.len());
        spec.test.extend_from_slice(&ids[..t]);
        spec.val.extend_from_slice(&ids[t..t + v]);
        spec.train.extend_from_slice(&ids[t + v..]);
    }
    Ok(spec)
}

/// Model-ready samples of one split, with the standardizer and vocabulary
/// fitted on its training part.
#[derive(Debug, Clone)]
pub struct Fold {
    pub split: SplitSpec,
    pub standardizer: Standardizer,
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn make_sample(
    patient_id: &str,
    matrix: &PatientMatrix,
    text: &str,
    label: u8,
    standardizer: &Standardizer,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Sample> {
    let z = standardizer.apply(matrix)?;
    Ok(Sample {
        patient_id: patient_id.to_string(),
        matrix: Tensor::new(vec![z.rows, z.cols], z.data)?,
        tokens: notes::encode(text, vocab, max_len)?,
        label,
    })
}

pub fn prepare_fold(data: &Dataset, split: SplitSpec, cfg: &TrainConfig) -> Result<Fold> {
    let by_id: HashMap<&str, usize> = data
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.patient_id.as_str(), i))
        .collect();
    let lookup = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("split names unknown patient {id}")))
            })
            .collect()
    };
    let (tr, va, te) = (
        lookup(&split.train)?,
        lookup(&split.val)?,
        lookup(&split.test)?,
    );
    let standardizer = Standardizer::fit(tr.iter().map(|&i| &data.records[i].matrix))?;
    let corpus: Vec<&str> = tr.iter().map(|&i| data.records[i].text.as_str()).collect();
    let vocab = if corpus.iter().all(|t| t.trim().is_empty()) {
        Vocabulary::from_map(
            notes::RESERVED
                .iter()
                .enumerate()
                .map(|(i, t)| (t.to_string(), i))
                .collect(),
        )?
    } else {
        notes::build_vocab(&corpus, cfg.min_token_freq)?
    };
    let samples = |idx: &[usize]| -> Result<Vec<Sample>> {
        idx.iter()
            .map(|&i| {
                let r = &data.records[i];
                make_sample(
                    &r.patient_id,
                    &r.matrix,
                    &r.text,
                    r.label,
                    &standardizer,
                    &vocab,
                    cfg.max_len,
                )
            })
            .collect()
    };
    Ok(Fold {
        train: samples(&tr)?,
        val: samples(&va)?,
        test: samples(&te)?,
        split,
        standardizer,
        vocab,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 0 when no epoch ran and the initialization is returned.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_val_auroc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .and_then(|e| e.val_auroc)
    }
}

fn labels_of(samples: &[Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}

fn mean_loss(probs: &[f64], labels: &[u8], w: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| crate::tensor::weighted_bce(p, f64::from(y), w))
        .sum();
    total / probs.len().max(1) as f64
}

/// Mini-batch Adam on `fold.train`, keeping the parameters of the epoch with
/// the best validation AUROC (lowest validation loss if the validation set
/// has a single class). Validation and test samples are never trained on.
pub fn train(
    fold: &Fold,
    cfg: &TrainConfig,
    mode: AblationMode,
) -> Result<(MultimodalModel, TrainLog)> {
    cfg.validate()?;
    let features = fold
        .train
        .first()
        .map(|s| s.matrix.cols())
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    let mut model = MultimodalModel::new(cfg.model_config(features, fold.vocab.len()), cfg.seed)?;
    model.set_mode(mode);
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let w = cfg.class_weight;
    let val_labels = labels_of(&fold.val);

    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, crate::tensor::ParamSet)> = None;
    let mut order: Vec<usize> = (0..fold.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &fold.train[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
            let mut tape = Tape::new();
            let binding = model.params.bind(&mut tape);
            let mut ctx = Ctx::train(&mut rng);
            let out = model.forward(&mut tape, &binding, &mut ctx, &batch, mode)?;
            let loss = tape.weighted_bce(out.probs, &labels, w)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value,
                    epoch,
                    batch: bi,
                });
            }
            loss_sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.params.store_grads(&binding, &grads);
            adam.step(&mut model.params)?;
        }
        let val_probs = model.predict(&fold.val, mode)?;
        let val_loss = mean_loss(&val_probs, &val_labels, w);
        let val_auroc = auroc(&val_probs, &val_labels).ok();
        let score = val_auroc.unwrap_or(-val_loss);
        log::debug!(
            "{mode} epoch {epoch}: train loss {:.5}, val loss {val_loss:.5}, val auroc {val_auroc:?}",
            loss_sum / fold.train.len() as f64
        );
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / fold.train.len() as f64,
            val_loss,
            val_auroc,
        });
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            log.best_epoch = epoch;
            best = Some((score, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.params.zero_grad();
    Ok((model, log))
}

pub fn evaluate(
    model: &MultimodalModel,
    samples: &[Sample],
    mode: AblationMode,
    threshold: f64,
) -> Result<Metrics> {
    let probs = model.predict(samples, mode)?;
    Metrics::compute(&probs, &labels_of(samples), threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: AblationMode,
    pub horizon: usize,
    pub seed: u64,
    pub config_hash: String,
    pub val_auroc: Option<f64>,
    pub test: Metrics,
    pub param_count: usize,
    pub log: TrainLog,
}

/// Everything a training run produces.
pub struct RunArtifacts {
    pub result: RunResult,
    pub model: MultimodalModel,
    pub fold: Fold,
}

/// Split, fit, train and test one (config, mode) on a horizon's dataset.
pub fn run_once(data: &Dataset, cfg: &TrainConfig, mode: AblationMode) -> Result<RunArtifacts> {
    let spec = split(data, cfg.split_seed(), cfg.stratified)?;
    let fold = prepare_fold(data, spec, cfg)?;
    let (model, log) = train(&fold, cfg, mode)?;
    let test = evaluate(&model, &fold.test, mode, cfg.threshold)?;
    Ok(RunArtifacts {
        result: RunResult {
            mode,
            horizon: data.horizon,
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            val_auroc: log.best_val_auroc(),
            test,
            param_count: model.params.numel(),
            log,
        },
        model,
        fold,
    })
}

/// Everything needed to rebuild a trained model and its preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub mode: AblationMode,
    pub horizon: usize,
    pub features: Vec<String>,
    pub standardizer: Standardizer,
    pub vocab: Vocabulary,
    pub split: SplitSpec,
    pub best_epoch: usize,
}

pub fn save_checkpoint(
    path: &Path,
    art: &RunArtifacts,
    cfg: &TrainConfig,
    features: &[String],
) -> Result<()> {
    let meta = CheckpointMeta {
        train: cfg.clone(),
        model: art.model.config.clone(),
        mode: art.result.mode,
        horizon: art.result.horizon,
        features: features.to_vec(),
        standardizer: art.fold.standardizer.clone(),
        vocab: art.fold.vocab.clone(),
        split: art.fold.split.clone(),
        best_epoch: art.result.log.best_epoch,
    };
    let value = serde_json::to_value(&meta).map_err(|e| Error::json("checkpoint metadata", e))?;
    checkpoint::save(path, &art.model.params, &value)
}

pub fn load_checkpoint(path: &Path) -> Result<(MultimodalModel, CheckpointMeta)> {
    let (params, manifest) = checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.config)
        .map_err(|e| Error::json(format!("{}: checkpoint metadata", path.display()), e))?;
    let mut model = MultimodalModel::new(meta.model.clone(), 0)?;
    model.params.copy_from(&params)?;
    model.set_mode(meta.mode);
    Ok((model, meta))
}

/// Test samples of `data` under a checkpoint's split and preprocessing.
pub fn checkpoint_test_samples(data: &Dataset, meta: &CheckpointMeta) -> Result<Vec<Sample>> {
    if data.horizon != meta.horizon || data.features != meta.features {
        return Err(Error::Data(format!(
            "dataset (T={}, {} features) does not match the checkpoint (T={}, {} features)",
            data.horizon,
            data.features.len(),
            meta.horizon,
            meta.features.len()
        )));
    }
    let by_id: HashMap<&str, usize> = data
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.patient_id.as_str(), i))
        .collect();
    meta.split
        .test
        .iter()
        .map(|id| {
            let r = by_id
                .get(id.as_str())
                .map(|&i| &data.records[i])
                .ok_or_else(|| {
                    Error::Data(format!("checkpoint test patient {id} not in dataset"))
                })?;
            make_sample(
                &r.patient_id,
                &r.matrix,
                &r.text,
                r.label,
                &meta.standardizer,
                &meta.vocab,
                meta.model.cnm.max_len,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub runs: Vec<RunResult>,
    pub reports: Vec<(AblationMode, usize, MetricsReport)>,
}

impl ProtocolReport {
    pub fn report(&self, mode: AblationMode, horizon: usize) -> Option<&MetricsReport> {
        self.reports
            .iter()
            .find(|(m, h, _)| *m == mode && *h == horizon)
            .map(|(_, _, r)| r)
    }
}

/// Trains every (horizon, mode, seed) job. Jobs run in parallel; results keep
/// the fixed (horizon, mode, seed) order.
pub fn run_protocol(
    datasets: &[Dataset],
    base: &TrainConfig,
    modes: &[AblationMode],
    seeds: &[u64],
) -> Result<ProtocolReport> {
    let mut jobs = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        for &mode in modes {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.horizon = d.horizon;
                jobs.push((di, mode, cfg));
            }
        }
    }
    let runs: Vec<RunResult> = jobs
        .into_par_iter()
        .map(|(di, mode, cfg)| {
            let art = run_once(&datasets[di], &cfg, mode)?;
            log::info!(
                "T={} {mode} seed {}: test auroc {:.4}",
                cfg.horizon,
                cfg.seed,
                art.result.test.auroc
            );
            Ok(art.result)
        })
        .collect::<Result<_>>()?;
    let mut grouped: BTreeMap<(usize, usize), Vec<(u64, Metrics)>> = BTreeMap::new();
    for r in &runs {
        let mi = modes
            .iter()
            .position(|&m| m == r.mode)
            .expect("mode from list");
        let di = datasets
            .iter()
            .position(|d| d.horizon == r.horizon)
            .expect("horizon from list");
        grouped.entry((di, mi)).or_default().push((r.seed, r.test));
    }
    let reports = grouped
        .into_iter()
        .map(|((di, mi), per_seed)| {
            Ok((
                modes[mi],
                datasets[di].horizon,
                MetricsReport::aggregate(per_seed)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(ProtocolReport { runs, reports })
}

/// Candidate values per hyperparameter; an absent or empty list keeps the
/// base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub activation: Vec<Activation>,
    pub epochs: Vec<usize>,
    pub max_len: Vec<usize>,
    pub layers: Vec<usize>,
    pub interpolation: Vec<usize>,
    pub embed_dim: Vec<usize>,
    pub class_weight: Vec<f64>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl GridSpec {
    /// Full Cartesian product, in field order with the last field varying
    /// fastest.
    pub fn points(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = vec![base.clone()];
        macro_rules! expand {
            ($field:ident) => {{
                let values = axis(&self.$field, base.$field.clone());
                out = out
                    .into_iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| TrainConfig {
                            $field: v.clone(),
                            ..c.clone()
                        })
                    })
                    .collect();
            }};
        }
        expand!(learning_rate);
        expand!(dropout);
        expand!(batch_size);
        expand!(activation);
        expand!(epochs);
        expand!(max_len);
        expand!(layers);
        expand!(interpolation);
        expand!(embed_dim);
        expand!(class_weight);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub config: TrainConfig,
    pub mean_val_auroc: f64,
    pub param_count: usize,
    pub runs: Vec<RunResult>,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub points: Vec<GridPoint>,
    pub best: usize,
}

impl GridOutcome {
    pub fn best_point(&self) -> &GridPoint {
        &self.points[self.best]
    }
}

/// Evaluates every grid point over `seeds` and picks the highest mean
/// validation AUROC; ties go to the lower learning rate, then the smaller
/// model.
pub fn grid_search(
    data: &Dataset,
    base: &TrainConfig,
    grid: &GridSpec,
    seeds: &[u64],
    mode: AblationMode,
) -> Result<GridOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("grid search needs at least one seed".into()));
    }
    let configs = grid.points(base);
    let mut jobs = Vec::new();
    for (pi, c) in configs.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = c.clone();
            cfg.seed = seed;
            cfg.horizon = data.horizon;
            jobs.push((pi, cfg));
        }
    }
    let runs: Vec<(usize, RunResult)> = jobs
        .into_par_iter()
        .map(|(pi, cfg)| Ok((pi, run_once(data, &cfg, mode)?.result)))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(configs.len());
    for (pi, c) in configs.into_iter().enumerate() {
        let rs: Vec<RunResult> = runs
            .iter()
            .filter(|(p, _)| *p == pi)
            .map(|(_, r)| r.clone())
            .collect();
        let mean_val_auroc =
            rs.iter().map(|r| r.val_auroc.unwrap_or(0.5)).sum::<f64>() / rs.len() as f64;
        let test = MetricsReport::aggregate(rs.iter().map(|r| (r.seed, r.test)).collect())?;
        points.push(GridPoint {
            config: c,
            mean_val_auroc,
            param_count: rs[0].param_count,
            runs: rs,
            test,
        });
    }
    let best = (0..points.len())
        .min_by(|&a, &b| {
            let (pa, pb) = (&points[a], &points[b]);
            pb.mean_val_auroc
                .total_cmp(&pa.mean_val_auroc)
                .then(pa.config.learning_rate.total_cmp(&pb.config.learning_rate))
                .then(pa.param_count.cmp(&pb.param_count))
        })
        .expect("grid is never empty");
    Ok(GridOutcome { points, best })
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// `run`, `mean`, `std`, `grid` or `winner`.
    pub kind: String,
    pub mode: AblationMode,
    pub horizon: usize,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub val_auroc: Option<f64>,
    pub auroc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ResultRow {
    fn new(
        kind: &str,
        mode: AblationMode,
        horizon: usize,
        seed: Option<u64>,
        hash: &str,
        val: Option<f64>,
        m: &Metrics,
    ) -> Self {
        ResultRow {
            kind: kind.to_string(),
            mode,
            horizon,
            seed,
            config_hash: hash.to_string(),
            val_auroc: val,
            auroc: m.auroc,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
        }
    }
}

/// Per-run rows followed by mean and std rows for each (mode, horizon).
pub fn protocol_rows(report: &ProtocolReport) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (mode, horizon, agg) in &report.reports {
        let runs: Vec<&RunResult> = report
            .runs
            .iter()
            .filter(|r| r.mode == *mode && r.horizon == *horizon)
            .collect();
        let hash = runs.first().map(|r| r.config_hash.as_str()).unwrap_or("");
        for r in &runs {
            rows.push(ResultRow::new(
                "run",
                r.mode,
                r.horizon,
                Some(r.seed),
                &r.config_hash,
                r.val_auroc,
                &r.test,
            ));
        }
        rows.push(ResultRow::new(
            "mean", *mode, *horizon, None, hash, None, &agg.mean,
        ));
        rows.push(ResultRow::new(
            "std", *mode, *horizon, None, hash, None, &agg.std,
        ));
    }
    rows
}

/// One row per grid point (mean test metrics over seeds) plus a winner row.
pub fn grid_rows(outcome: &GridOutcome, mode: AblationMode, horizon: usize) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = outcome
        .points
        .iter()
        .map(|p| {
            ResultRow::new(
                "grid",
                mode,
                horizon,
                None,
                &config_hash(&p.config),
                Some(p.mean_val_auroc),
                &p.test.mean,
            )
        })
        .collect();
    let best = outcome.best_point();
    rows.push(ResultRow::new(
        "winner",
        mode,
        horizon,
        None,
        &config_hash(&best.config),
        Some(best.mean_val_auroc),
        &best.test.mean,
    ));
    rows
}

/// Provenance written next to results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}
