//! Command-line front end. One JSON config drives every subcommand; flags
//! override individual config keys.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::dataset::{self, BundleManifest, Dataset, InputPaths, RawInputs};
use crate::error::{Error, Result};
use crate::io;
use crate::model::AblationMode;
use crate::mpts::STANDARD_HORIZONS;
use crate::notes;
use crate::synth::{self, SynthConfig};
use crate::train::{self, GridSpec, ResultRow, RunManifest, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Directory holding the raw CSV/JSON inputs under their standard names.
    pub data_dir: Option<PathBuf>,
    /// Explicit input paths; take precedence over `data_dir`.
    pub inputs: Option<InputPaths>,
    /// Root of the preprocessed bundles, one `t{T}` directory per horizon.
    pub bundle_dir: Option<PathBuf>,
    /// Default output directory. `synth` and `preprocess` write to
    /// `data_dir` and `bundle_dir` first when those are set.
    pub output_dir: Option<PathBuf>,
    pub horizons: Vec<usize>,
    pub modes: Vec<AblationMode>,
    /// Mode used by `train` and `gridsearch`.
    pub mode: AblationMode,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            data_dir: None,
            inputs: None,
            bundle_dir: None,
            output_dir: None,
            horizons: STANDARD_HORIZONS.to_vec(),
            modes: AblationMode::ALL.to_vec(),
            mode: AblationMode::Full,
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            grid: GridSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = io::read_json(path)?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.horizons.is_empty() {
            return Err(Error::Config("horizons: empty list".into()));
        }
        if let Some(t) = self.horizons.iter().find(|&&t| t == 0) {
            return Err(Error::Config(format!("horizons: invalid horizon {t}")));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes: empty list".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: empty list".into()));
        }
        for p in self.grid.points(&self.train) {
            p.validate()
                .map_err(|e| Error::Config(format!("grid: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sepsis", version, about = "Multimodal early sepsis prediction")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of the command (synth seed, training seed, or the seed list).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel jobs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth,
    /// Build tensor-ready bundles for each horizon.
    Preprocess {
        /// Raw data directory; overrides `data_dir` and `inputs`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Horizons in hours; overrides `horizons`.
        #[arg(long = "horizon")]
        horizons: Vec<usize>,
    },
    /// Train one model and save a checkpoint.
    Train {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        mode: Option<AblationMode>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Score a checkpoint on its test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Grid search over the configured hyperparameter grid.
    Gridsearch {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        mode: Option<AblationMode>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Every configured mode at every configured horizon.
    Ablate {
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Export notes-encoder attention matrices for one patient.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        patient: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// One head; all heads of the layer when omitted.
        #[arg(long)]
        head: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Gridsearch { .. } => "gridsearch",
            Command::Ablate { .. } => "ablate",
            Command::Attention { .. } => "attention",
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = cli.common.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    pool.install(|| dispatch(cli, cfg))
}

fn dispatch(cli: &Cli, mut cfg: RunConfig) -> Result<()> {
    let start = Instant::now();
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| match cli.command {
            Command::Synth => cfg.data_dir.clone().or_else(|| cfg.output_dir.clone()),
            Command::Preprocess { .. } => cfg.bundle_dir.clone().or_else(|| cfg.output_dir.clone()),
            _ => cfg.output_dir.clone(),
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "{}: no output directory (--out or output_dir)",
                cli.command.name()
            ))
        })?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    log::info!("{} -> {}", cli.command.name(), out.display());
    match &cli.command {
        Command::Synth => {
            if let Some(s) = cli.common.seed {
                cfg.synth.seed = s;
            }
            cmd_synth(&cfg.synth, &out)
        }
        Command::Preprocess { data, horizons } => {
            if let Some(s) = cli.common.seed {
                cfg.train.seed = s;
            }
            if !horizons.is_empty() {
                cfg.horizons = horizons.clone();
            }
            let inputs = match data {
                Some(d) => InputPaths::in_dir(d),
                None => resolve_inputs(&cfg)?,
            };
            cmd_preprocess(&inputs, &cfg.horizons, &cfg.train, &out)
        }
        Command::Train {
            bundle,
            mode,
            horizon,
        } => {
            if let Some(s) = cli.common.seed {
                cfg.train.seed = s;
            }
            if let Some(t) = horizon {
                cfg.train.horizon = *t;
            }
            let root = bundle_root(&cfg, bundle.as_deref())?;
            cmd_train(
                &root,
                &cfg.train,
                mode.unwrap_or(cfg.mode),
                &out,
                &cfg,
                start,
            )
        }
        Command::Evaluate { checkpoint, bundle } => {
            let root = bundle_root(&cfg, bundle.as_deref())?;
            cmd_evaluate(checkpoint, &root, &out, start)
        }
        Command::Gridsearch {
            bundle,
            mode,
            horizon,
        } => {
            if let Some(s) = cli.common.seed {
                cfg.seeds = vec![s];
            }
            if let Some(t) = horizon {
                cfg.train.horizon = *t;
            }
            if let Some(m) = mode {
                cfg.mode = *m;
            }
            let root = bundle_root(&cfg, bundle.as_deref())?;
            cmd_gridsearch(&root, &cfg, &out, start)
        }
        Command::Ablate { bundle } => {
            if let Some(s) = cli.common.seed {
                cfg.seeds = vec![s];
            }
            let root = bundle_root(&cfg, bundle.as_deref())?;
            cmd_ablate(&root, &cfg, &out, start)
        }
        Command::Attention {
            checkpoint,
            bundle,
            patient,
            layer,
            head,
        } => {
            let root = bundle_root(&cfg, bundle.as_deref())?;
            cmd_attention(checkpoint, &root, patient, *layer, *head, &out).map(|_| ())
        }
    }
}

fn resolve_inputs(cfg: &RunConfig) -> Result<InputPaths> {
    if let Some(i) = &cfg.inputs {
        return Ok(i.clone());
    }
    cfg.data_dir
        .as_deref()
        .map(InputPaths::in_dir)
        .ok_or_else(|| Error::Config("preprocess: no inputs (--data, data_dir or inputs)".into()))
}

fn bundle_root(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.bundle_dir.clone())
        .ok_or_else(|| Error::Config("no bundle directory (--bundle or bundle_dir)".into()))
}

/// The bundle for horizon `t`: `root` itself when it is a single bundle,
/// otherwise `root/t{t}`.
fn bundle_for(root: &Path, horizon: usize) -> Result<(Dataset, BundleManifest)> {
    let dir = if root.join("manifest.json").is_file() {
        root.to_path_buf()
    } else {
        dataset::horizon_dir(root, horizon)
    };
    let (data, manifest) = dataset::load_bundle(&dir)?;
    if data.horizon != horizon {
        return Err(Error::Data(format!(
            "{}: bundle horizon {} but T={horizon} requested",
            dir.display(),
            data.horizon
        )));
    }
    Ok((data, manifest))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: &impl Serialize,
    seeds: Vec<u64>,
    inputs: std::collections::BTreeMap<String, String>,
    start: Instant,
) -> Result<()> {
    let config = serde_json::to_value(config).map_err(|e| Error::json("run manifest", e))?;
    io::write_json(
        &out.join(MANIFEST_FILE),
        &RunManifest {
            command: command.to_string(),
            config,
            seeds,
            inputs,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let cohort = synth::generate(cfg)?;
    cohort.write(out, &cfg.phrases)?;
    println!(
        "wrote {} patients ({} positive) to {}",
        cohort.labels.len(),
        cohort.labels.values().filter(|&&y| y == 1).count(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "PascalCase")]
struct SummaryRow {
    horizon: usize,
    total: usize,
    negative: usize,
    positive: usize,
    excluded: usize,
}

/// Writes `t{T}` bundles plus a `cohort_summary.csv` over all horizons.
pub fn cmd_preprocess(
    inputs: &InputPaths,
    horizons: &[usize],
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    let raw = RawInputs::load(inputs)?;
    let hashes = inputs.hashes()?;
    let mut summary = Vec::new();
    for &t in horizons {
        let data = raw.dataset(t)?;
        let spec = train::split(&data, cfg.split_seed(), cfg.stratified)?;
        let fold = train::prepare_fold(&data, spec, cfg)?;
        let tokens = data
            .records
            .iter()
            .map(|r| notes::encode(&r.text, &fold.vocab, cfg.max_len))
            .collect::<Result<Vec<_>>>()?;
        let cohort = data.summary();
        let manifest = BundleManifest {
            horizon: t,
            features: data.features.clone(),
            cohort,
            excluded: data.excluded.clone(),
            vocab_seed: cfg.split_seed(),
            max_len: cfg.max_len,
            vocab_size: fold.vocab.len(),
            inputs: hashes.clone(),
        };
        dataset::save_bundle(
            &dataset::horizon_dir(out, t),
            &data,
            &fold.vocab,
            &tokens,
            &manifest,
        )?;
        println!(
            "T={t}: Total {} Negative {} Positive {} (excluded {})",
            cohort.total,
            cohort.negative,
            cohort.positive,
            data.excluded.len()
        );
        summary.push(SummaryRow {
            horizon: t,
            total: cohort.total,
            negative: cohort.negative,
            positive: cohort.positive,
            excluded: data.excluded.len(),
        });
    }
    io::write_csv(&out.join("cohort_summary.csv"), &summary)
}

pub fn cmd_train(
    root: &Path,
    cfg: &TrainConfig,
    mode: AblationMode,
    out: &Path,
    run: &RunConfig,
    start: Instant,
) -> Result<()> {
    let (data, manifest) = bundle_for(root, cfg.horizon)?;
    let art = train::run_once(&data, cfg, mode)?;
    train::save_checkpoint(&out.join(CHECKPOINT_FILE), &art, cfg, &data.features)?;
    io::write_json(&out.join("train_log.json"), &art.result.log)?;
    let r = &art.result;
    let row = ResultRow {
        kind: "run".into(),
        mode,
        horizon: r.horizon,
        seed: Some(r.seed),
        config_hash: r.config_hash.clone(),
        val_auroc: r.val_auroc,
        auroc: r.test.auroc,
        f1: r.test.f1,
        precision: r.test.precision,
        recall: r.test.recall,
    };
    io::write_csv(&out.join(RESULTS_FILE), &[row])?;
    let mut recorded = run.clone();
    recorded.train = cfg.clone();
    recorded.mode = mode;
    write_manifest(
        out,
        "train",
        &recorded,
        vec![cfg.seed],
        manifest.inputs,
        start,
    )?;
    println!(
        "{mode} T={} seed {}: test AUROC {:.4} F1 {:.4} (best epoch {})",
        r.horizon, r.seed, r.test.auroc, r.test.f1, r.log.best_epoch
    );
    Ok(())
}

pub fn cmd_evaluate(checkpoint: &Path, root: &Path, out: &Path, start: Instant) -> Result<()> {
    let (model, meta) = train::load_checkpoint(checkpoint)?;
    let (data, manifest) = bundle_for(root, meta.horizon)?;
    let samples = train::checkpoint_test_samples(&data, &meta)?;
    let m = train::evaluate(&model, &samples, meta.mode, meta.train.threshold)?;
    io::write_json(&out.join("evaluation.json"), &m)?;
    let row = ResultRow {
        kind: "eval".into(),
        mode: meta.mode,
        horizon: meta.horizon,
        seed: Some(meta.train.seed),
        config_hash: train::config_hash(&meta.train),
        val_auroc: None,
        auroc: m.auroc,
        f1: m.f1,
        precision: m.precision,
        recall: m.recall,
    };
    io::write_csv(&out.join(RESULTS_FILE), &[row])?;
    let mut inputs = manifest.inputs;
    inputs.insert("checkpoint".into(), io::content_hash(checkpoint)?);
    write_manifest(
        out,
        "evaluate",
        &meta.train,
        vec![meta.train.seed],
        inputs,
        start,
    )?;
    println!(
        "{} T={}: test AUROC {:.4} F1 {:.4} precision {:.4} recall {:.4}",
        meta.mode, meta.horizon, m.auroc, m.f1, m.precision, m.recall
    );
    Ok(())
}

pub fn cmd_gridsearch(root: &Path, cfg: &RunConfig, out: &Path, start: Instant) -> Result<()> {
    let (data, manifest) = bundle_for(root, cfg.train.horizon)?;
    let outcome = train::grid_search(&data, &cfg.train, &cfg.grid, &cfg.seeds, cfg.mode)?;
    io::write_csv(
        &out.join(RESULTS_FILE),
        &train::grid_rows(&outcome, cfg.mode, data.horizon),
    )?;
    let best = outcome.best_point();
    io::write_json(&out.join("best_config.json"), &best.config)?;
    write_manifest(
        out,
        "gridsearch",
        cfg,
        cfg.seeds.clone(),
        manifest.inputs,
        start,
    )?;
    println!(
        "{} grid points; best {} (mean val AUROC {:.4}, test AUROC {:.4})",
        outcome.points.len(),
        train::config_hash(&best.config),
        best.mean_val_auroc,
        best.test.mean.auroc
    );
    Ok(())
}

pub fn cmd_ablate(root: &Path, cfg: &RunConfig, out: &Path, start: Instant) -> Result<()> {
    let mut datasets = Vec::new();
    let mut inputs = Default::default();
    for &t in &cfg.horizons {
        let (d, m) = bundle_for(root, t)?;
        inputs = m.inputs;
        datasets.push(d);
    }
    let report = train::run_protocol(&datasets, &cfg.train, &cfg.modes, &cfg.seeds)?;
    io::write_csv(&out.join(RESULTS_FILE), &train::protocol_rows(&report))?;
    let table = ablation_table(&report, &cfg.modes, &cfg.horizons);
    std::fs::write(out.join("ablation.txt"), &table)
        .map_err(|e| Error::io(out.join("ablation.txt"), e))?;
    write_manifest(out, "ablate", cfg, cfg.seeds.clone(), inputs, start)?;
    print!("{table}");
    Ok(())
}

/// Mode × horizon table of mean ± std test AUROC.
pub fn ablation_table(
    report: &train::ProtocolReport,
    modes: &[AblationMode],
    horizons: &[usize],
) -> String {
    let mut s = format!("{:<22}", "mode");
    for t in horizons {
        s.push_str(&format!("{:>18}", format!("T={t}")));
    }
    s.push('\n');
    for &m in modes {
        s.push_str(&format!("{:<22}", m.as_str()));
        for &t in horizons {
            let cell = match report.report(m, t) {
                Some(r) => format!("{:.3} ± {:.3}", r.mean.auroc, r.std.auroc),
                None => "-".into(),
            };
            s.push_str(&format!("{cell:>18}"));
        }
        s.push('\n');
    }
    s
}

/// Writes one CSV per exported head and returns their paths.
pub fn cmd_attention(
    checkpoint: &Path,
    root: &Path,
    patient: &str,
    layer: usize,
    head: Option<usize>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, meta) = train::load_checkpoint(checkpoint)?;
    let (layers, heads) = (meta.model.cnm.layers, meta.model.cnm.heads);
    if layer >= layers {
        return Err(Error::Config(format!(
            "--layer {layer} out of range (valid 0..={})",
            layers - 1
        )));
    }
    if let Some(h) = head {
        if h >= heads {
            return Err(Error::Config(format!(
                "--head {h} out of range (valid 0..={})",
                heads - 1
            )));
        }
    }
    if !meta.mode.uses_notes() {
        log::warn!(
            "checkpoint mode {} did not train the notes encoder",
            meta.mode
        );
    }
    let (data, _) = bundle_for(root, meta.horizon)?;
    let rec = data
        .records
        .iter()
        .find(|r| r.patient_id == patient)
        .ok_or_else(|| {
            Error::Data(format!(
                "patient {patient} not in bundle {}",
                root.display()
            ))
        })?;
    let sample = train::make_sample(
        &rec.patient_id,
        &rec.matrix,
        &rec.text,
        rec.label,
        &meta.standardizer,
        &meta.vocab,
        meta.model.cnm.max_len,
    )?;
    let weights = model.notes_attention(&sample)?;
    let labels = attention::token_labels(&sample.tokens, &meta.vocab);
    let selected: Vec<usize> = match head {
        Some(h) => vec![h],
        None => (0..heads).collect(),
    };
    let mut paths = Vec::new();
    for h in selected {
        let path = out.join(format!("attention_{patient}_l{layer}_h{h}.csv"));
        attention::write_attention_csv(&path, &weights[layer][h], &labels)?;
        println!("wrote {}", path.display());
        paths.push(path);
    }
    Ok(paths)
}
