//! Acceptance checks. Each test prints one PASS/FAIL line; run with
//! `--nocapture` to see them.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sepsis_core::attention::cls_attention_by_category;
use sepsis_core::cli;
use sepsis_core::cnm::CnmConfig;
use sepsis_core::dataset::{self, BundleManifest, Dataset, InputPaths, RawInputs};
use sepsis_core::metrics::{auroc, classification_metrics, Metrics};
use sepsis_core::model::{AblationMode, HeadConfig, ModelConfig, MultimodalModel, Sample};
use sepsis_core::mpts::{self, EventRecord, STANDARD_HORIZONS};
use sepsis_core::nn::Ctx;
use sepsis_core::notes::{self, TokenSequence, LEAKAGE_TERMS, PAD};
use sepsis_core::ptsm::{dense_interpolate, dense_interpolate_var, PtsmConfig};
use sepsis_core::synth::{self, SynthConfig};
use sepsis_core::tensor::{Activation, Tape, Tensor, Var};
use sepsis_core::train::{self, RunArtifacts, TrainConfig};

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------------------
// Gradient correctness

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. Below it the central difference
/// is dominated by roundoff (about 1e-11 absolute at this step size).
const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> sepsis_core::Result<Var> + 'a;

/// Scalarizes `out` with a fixed random projection so every output element
/// contributes a distinct weight.
fn project(tape: &mut Tape, out: Var) -> Var {
    if tape.value(out).len() == 1 {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 * 7919);
    let r = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let r = tape.constant(r);
    let y = tape.mul(out, r).unwrap();
    tape.sum(y)
}

fn loss_value(inputs: &[Tensor], f: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = project(&mut tape, out);
    tape.value(l).data()[0]
}

/// Max relative error between taped and central-difference gradients over
/// every element of every input.
fn gradcheck(inputs: &[Tensor], f: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = project(&mut tape, out);
    let grads = tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[i], t.len());
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (loss_value(&plus, f) - loss_value(&minus, f)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k], numeric));
        }
    }
    worst
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// Normal entries pushed at least 0.1 away from zero, so no difference
/// straddles the ReLU kink.
fn randn_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Box<Build<'static>>)> {
    let (r, c, k) = (
        rng.random_range(2..5),
        rng.random_range(2..5),
        rng.random_range(2..5),
    );
    let keep: Vec<bool> = {
        let mut m: Vec<bool> = (0..c).map(|_| rng.random_bool(0.6)).collect();
        m[rng.random_range(0..c)] = true;
        m
    };
    let ids: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let labels: Vec<f64> = (0..r)
        .map(|_| f64::from(rng.random_range(0..2u8)))
        .collect();
    let w = rng.random_range(0.1..0.9);
    let probs = Tensor::new(
        vec![r],
        (0..r).map(|_| rng.random_range(0.05..0.95)).collect(),
    )
    .unwrap();
    let drop_seed = rng.random::<u64>();
    let pick = rng.random_range(0..r);
    vec![
        (
            "matmul",
            vec![randn(rng, &[r, c]), randn(rng, &[c, k])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "transpose",
            vec![randn(rng, &[r, c])],
            Box::new(|t, v| t.transpose(v[0])),
        ),
        (
            "add",
            vec![randn(rng, &[r, c]), randn(rng, &[r, c])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "mul",
            vec![randn(rng, &[r, c]), randn(rng, &[r, c])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "add_bias",
            vec![randn(rng, &[r, c]), randn(rng, &[c])],
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        ),
        (
            "scale",
            vec![randn(rng, &[r, c])],
            Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
        ),
        (
            "softmax rows",
            vec![randn(rng, &[r, c])],
            Box::new(|t, v| t.softmax(v[0], 1)),
        ),
        (
            "softmax cols",
            vec![randn(rng, &[r, c])],
            Box::new(|t, v| t.softmax(v[0], 0)),
        ),
        (
            "masked_softmax",
            vec![randn(rng, &[r, c])],
            Box::new(move |t, v| t.masked_softmax(v[0], &keep)),
        ),
        (
            "relu",
            vec![randn_off_zero(rng, &[r, c])],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Relu))),
        ),
        (
            "selu",
            vec![randn_off_zero(rng, &[r, c])],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Selu))),
        ),
        (
            "gelu",
            vec![randn(rng, &[r, c])],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Gelu))),
        ),
        (
            "dropout",
            vec![randn(rng, &[r, c])],
            Box::new(move |t, v| {
                t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(drop_seed))
            }),
        ),
        (
            "layer_norm",
            vec![randn(rng, &[r, c]), randn(rng, &[c]), randn(rng, &[c])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "conv1d",
            vec![
                randn(rng, &[r + 2, c]),
                randn(rng, &[3, c, k]),
                randn(rng, &[k]),
            ],
            Box::new(|t, v| t.conv1d(v[0], v[1], Some(v[2]))),
        ),
        (
            "concat_cols",
            vec![randn(rng, &[r, c]), randn(rng, &[r, k])],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        ),
        (
            "concat_rows",
            vec![randn(rng, &[r, c]), randn(rng, &[k, c])],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        ),
        (
            "row",
            vec![randn(rng, &[r, c])],
            Box::new(move |t, v| t.row(v[0], pick)),
        ),
        (
            "col",
            vec![randn(rng, &[c, r])],
            Box::new(move |t, v| t.col(v[0], pick)),
        ),
        (
            "reshape",
            vec![randn(rng, &[r, c])],
            Box::new(move |t, v| t.reshape(v[0], &[c, r])),
        ),
        (
            "embedding",
            vec![randn(rng, &[c, k])],
            Box::new(move |t, v| t.embedding(v[0], &ids)),
        ),
        (
            "sum",
            vec![randn(rng, &[r, c])],
            Box::new(|t, v| Ok(t.sum(v[0]))),
        ),
        (
            "mean",
            vec![randn(rng, &[r, c])],
            Box::new(|t, v| Ok(t.mean(v[0]))),
        ),
        (
            "weighted_bce",
            vec![probs],
            Box::new(move |t, v| t.weighted_bce(v[0], &labels, w)),
        ),
        (
            "dense_interpolate",
            vec![randn(rng, &[r + 1, c])],
            Box::new(move |t, v| dense_interpolate_var(t, v[0], k)),
        ),
    ]
}

fn toy_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        ptsm: PtsmConfig {
            features: 3,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            d_ff: Some(16),
            interpolation: 2,
            dropout: 0.0,
            activation: Activation::Gelu,
        },
        cnm: CnmConfig {
            vocab_size: 12,
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: Some(16),
            max_len: 8,
            dropout: 0.0,
            activation: Activation::Gelu,
        },
        head: HeadConfig {
            hidden: vec![8],
            activation: Activation::Gelu,
            dropout: 0.0,
            class_weight: rng.random_range(0.2..0.8),
        },
    }
}

fn toy_sample(rng: &mut ChaCha8Rng, label: u8) -> Sample {
    let true_length = rng.random_range(3..=8);
    let mut ids = vec![notes::CLS];
    ids.extend((0..true_length - 2).map(|_| rng.random_range(4..12)));
    ids.push(notes::SEP);
    ids.resize(8, PAD);
    Sample {
        patient_id: "toy".into(),
        matrix: randn(rng, &[6, 3]),
        tokens: TokenSequence {
            token_ids: ids,
            segment_ids: vec![0; 8],
            position_ids: (0..8).collect(),
            true_length,
        },
        label,
    }
}

fn model_loss(model: &MultimodalModel, samples: &[Sample]) -> f64 {
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut rng);
    let out = model
        .forward(&mut tape, &b, &mut ctx, &refs, AblationMode::Full)
        .unwrap();
    let labels: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();
    let l = tape
        .weighted_bce(out.probs, &labels, model.config.head.class_weight)
        .unwrap();
    tape.value(l).data()[0]
}

/// Every parameter of the fused model on a two-sample batch. Returns the
/// worst relative error overall and among entries with magnitude >= 1e-5.
fn model_gradcheck(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_model_config(&mut rng);
    let mut model = MultimodalModel::new(cfg, seed).unwrap();
    model.set_mode(AblationMode::Full);
    let samples = vec![toy_sample(&mut rng, 1), toy_sample(&mut rng, 0)];
    let refs: Vec<&Sample> = samples.iter().collect();

    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let mut crng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::eval(&mut crng);
    let out = model
        .forward(&mut tape, &b, &mut ctx, &refs, AblationMode::Full)
        .unwrap();
    let labels: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();
    let l = tape
        .weighted_bce(out.probs, &labels, model.config.head.class_weight)
        .unwrap();
    let grads = tape.backward(l).unwrap();

    let ids: Vec<_> = model.params.ids().collect();
    let (mut worst, mut worst_large) = (0.0f64, 0.0f64);
    for (pi, id) in ids.into_iter().enumerate() {
        let n = model.params.get(id).len();
        let analytic = grads.get_or_zero(b.vars()[pi], n);
        for k in 0..n {
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let lp = model_loss(&model, &samples);
            model.params.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let lm = model_loss(&model, &samples);
            model.params.get_mut(id).data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let e = rel_err(analytic[k], numeric);
            worst = worst.max(e);
            if analytic[k].abs().max(numeric.abs()) >= 1e-5 {
                worst_large = worst_large.max(e);
            }
        }
    }
    (worst, worst_large)
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let mut worst_by_op: BTreeMap<&str, f64> = BTreeMap::new();
    for instance in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        for (name, inputs, f) in primitive_cases(&mut rng) {
            let e = gradcheck(&inputs, f.as_ref());
            let w = worst_by_op.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let per_instance: Vec<(f64, f64)> = (0..10).map(model_gradcheck).collect();
    let model_worst = per_instance.iter().map(|p| p.0).fold(0.0, f64::max);
    let model_worst_large = per_instance.iter().map(|p| p.1).fold(0.0, f64::max);
    let failing = per_instance.iter().filter(|p| p.0 >= GRAD_TOL).count();
    let elapsed = start.elapsed();
    let (op, op_worst) = worst_by_op
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (*k, *v))
        .unwrap();
    let pass = op_worst < GRAD_TOL && model_worst < GRAD_TOL && elapsed < Duration::from_secs(120);
    report(
        "gradient correctness",
        pass,
        &format!(
            "{} primitives x 10, worst {op_worst:.2e} ({op}); fused model x 10, worst {model_worst:.2e} ({failing} instances over tol; {model_worst_large:.2e} on entries >= 1e-5); tol {GRAD_TOL:.0e}; {:.1}s",
            worst_by_op.len(),
            elapsed.as_secs_f64()
        ),
    );
    for (name, e) in &worst_by_op {
        assert!(*e < GRAD_TOL, "{name}: relative error {e:.3e}");
    }
    assert!(
        model_worst < GRAD_TOL,
        "fused model: relative error {model_worst:.3e}"
    );
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
}

// ---------------------------------------------------------------------------
// Dense interpolation

/// Direct transcription of the published loop: for each time step t and each
/// interpolation slot m, accumulate (1 - |s - m| / I)^2 * e_t with s = I t / L.
fn brute_interpolate(e: &[Vec<f64>], coeff: usize) -> Vec<Vec<f64>> {
    let len = e.len();
    let d = e[0].len();
    let mut z = vec![vec![0.0; d]; coeff];
    for t in 1..=len {
        let s = coeff as f64 * t as f64 / len as f64;
        for m in 1..=coeff {
            let w = (1.0 - (s - m as f64).abs() / coeff as f64).powi(2);
            for j in 0..d {
                z[m - 1][j] += w * e[t - 1][j];
            }
        }
    }
    z
}

#[test]
fn dense_interpolation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (len, coeff, d) = (
            rng.random_range(1..=16),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let got = dense_interpolate(&Tensor::from_rows(&rows).unwrap(), coeff).unwrap();
        let want = brute_interpolate(&rows, coeff);
        for m in 0..coeff {
            for j in 0..d {
                worst = worst.max((got[m * d + j] - want[m][j]).abs());
            }
        }
    }
    let e1 = [1.5, -2.0, 0.25];
    let e2 = [4.0, 8.0, -1.0];
    let got =
        dense_interpolate(&Tensor::from_rows(&[e1.to_vec(), e2.to_vec()]).unwrap(), 2).unwrap();
    let want: Vec<f64> = (0..3)
        .map(|j| e1[j] + 0.25 * e2[j])
        .chain((0..3).map(|j| 0.25 * e1[j] + e2[j]))
        .collect();
    let exact = got == want;
    let pass = worst < 1e-12 && exact;
    report(
        "dense interpolation oracle",
        pass,
        &format!("100 random cases, max abs diff {worst:.2e} (tol 1e-12); L=2 I=2 hand case exact: {exact}"),
    );
    assert!(worst < 1e-12);
    assert!(exact, "got {got:?}, want {want:?}");
}

// ---------------------------------------------------------------------------
// Metrics

fn pair_count_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut worst_monotone = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse grid so ties are frequent.
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..20u8)) / 10.0 - 1.0)
            .collect();
        let a = auroc(&scores, &labels).unwrap();
        worst = worst.max((a - pair_count_auroc(&scores, &labels)).abs());
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
        for t in [exp, affine] {
            worst_monotone = worst_monotone.max((auroc(&t, &labels).unwrap() - a).abs());
        }
    }

    let mut worst_cls = 0.0f64;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let (tp, fp, tn, fn_) = if case == 0 {
            (0, 0, 5, 3)
        } else if case == 1 {
            (4, 0, 0, 0)
        } else {
            (
                rng.random_range(0..10),
                rng.random_range(0..10),
                rng.random_range(0..10),
                rng.random_range(0..10),
            )
        };
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (count, s, y) in [(tp, 0.9, 1u8), (fp, 0.7, 0), (tn, 0.2, 0), (fn_, 0.1, 1)] {
            for _ in 0..count {
                scores.push(s);
                labels.push(y);
            }
        }
        let (p, r, f) = classification_metrics(&scores, &labels, 0.5);
        let hp = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let hr = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let hf = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        worst_cls = worst_cls
            .max((p - hp).abs())
            .max((r - hr).abs())
            .max((f - hf).abs());
    }
    let pass = worst < 1e-12 && worst_monotone == 0.0 && worst_cls < 1e-12;
    report(
        "metric oracles",
        pass,
        &format!(
            "auroc vs pair counting max diff {worst:.2e} (50 cases, tol 1e-12); monotone transforms max diff {worst_monotone:.2e}; precision/recall/f1 vs confusion counts max diff {worst_cls:.2e} (20 cases)"
        ),
    );
    assert!(worst < 1e-12);
    assert_eq!(worst_monotone, 0.0);
    assert!(worst_cls < 1e-12);
}

// ---------------------------------------------------------------------------
// Pipeline properties

fn load_synth(cfg: &SynthConfig) -> (tempfile::TempDir, RawInputs) {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(cfg)
        .unwrap()
        .write(dir.path(), &cfg.phrases)
        .unwrap();
    let raw = RawInputs::load(&InputPaths::in_dir(dir.path())).unwrap();
    (dir, raw)
}

#[test]
fn pipeline_properties() {
    let cfg = SynthConfig {
        n_patients: 400,
        leakage_rate: 0.3,
        outlier_rate: 0.05,
        seed: 4,
        ..SynthConfig::default()
    };
    let (_dir, raw) = load_synth(&cfg);
    let outliers = raw
        .events
        .iter()
        .filter(|e| !raw.ranges.get(&e.variable).unwrap().contains(e.value))
        .count();
    let decoy_notes = raw
        .notes
        .iter()
        .filter(|n| {
            LEAKAGE_TERMS
                .iter()
                .any(|t| n.text.to_lowercase().contains(t))
        })
        .count();
    assert!(
        outliers > 0 && decoy_notes > 0,
        "injection produced nothing to filter"
    );

    let m = raw.schema.len();
    let mut leaked = 0usize;
    let mut bad_shape = 0usize;
    let mut matrices = 0usize;
    for &t in &STANDARD_HORIZONS {
        let data = raw.dataset(t).unwrap();
        let fold = train::prepare_fold(
            &data,
            train::split(&data, 0, false).unwrap(),
            &TrainConfig::default(),
        )
        .unwrap();
        for r in &data.records {
            matrices += 1;
            if r.matrix.rows != t || r.matrix.cols != m || r.matrix.data.len() != t * m {
                bad_shape += 1;
            }
            if r.matrix.data.iter().any(|v| !v.is_finite()) {
                bad_shape += 1;
            }
            let seq = notes::encode(&r.text, &fold.vocab, 512).unwrap();
            let stream = seq.decode(&fold.vocab).join(" ").to_lowercase();
            if LEAKAGE_TERMS
                .iter()
                .any(|term| stream.contains(term) || r.text.contains(term))
            {
                leaked += 1;
            }
        }
        if fold
            .vocab
            .tokens()
            .iter()
            .any(|tok| LEAKAGE_TERMS.iter().any(|term| tok.contains(term)))
        {
            leaked += 1;
        }
    }

    let filtered = mpts::filter_outliers(&raw.events, &raw.ranges).unwrap();
    let filter_idempotent = mpts::filter_outliers(&filtered, &raw.ranges).unwrap() == filtered;

    let defaults: Vec<f64> = raw
        .schema
        .names()
        .iter()
        .map(|n| raw.ranges.get(n).unwrap().population_default())
        .collect();
    let mut by_patient: BTreeMap<&str, Vec<&EventRecord>> = BTreeMap::new();
    for e in &filtered {
        by_patient.entry(e.patient_id.as_str()).or_default().push(e);
    }
    let mut impute_idempotent = true;
    let mut row_copy = true;
    for evs in by_patient.values() {
        let (_, observed) = mpts::observed_hours(evs).unwrap();
        let grid = mpts::bin_hourly(evs, &raw.schema, observed.min(36));
        let once = mpts::impute(&grid, &defaults);
        impute_idempotent &= once.is_complete() && mpts::impute(&once, &defaults) == once;
        for &t in &STANDARD_HORIZONS {
            let window = observed.min(t);
            let fitted = mpts::fit_length(
                &mpts::impute(&mpts::bin_hourly(evs, &raw.schema, window), &defaults),
                window,
                t,
            );
            let src = mpts::impute(&mpts::bin_hourly(evs, &raw.schema, window), &defaults);
            for hour in 1..=t {
                let from = hour.min(window);
                for j in 0..raw.schema.len() {
                    row_copy &= fitted.get(hour - 1, j) == src.get(from - 1, j);
                }
            }
        }
    }
    let pass = leaked == 0 && bad_shape == 0 && filter_idempotent && impute_idempotent && row_copy;
    report(
        "pipeline properties",
        pass,
        &format!(
            "{outliers} injected outliers, {decoy_notes} decoy notes; {matrices} matrices over T in {STANDARD_HORIZONS:?}: {leaked} leaked, {bad_shape} malformed; filter idempotent {filter_idempotent}, impute idempotent {impute_idempotent}, fit_length row copy {row_copy}"
        ),
    );
    assert_eq!(leaked, 0);
    assert_eq!(bad_shape, 0);
    assert!(filter_idempotent && impute_idempotent && row_copy);
}

// ---------------------------------------------------------------------------
// Learnability, ablation direction, attention

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn toy_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        batch_size: 32,
        epochs: 15,
        max_len: 40,
        layers: 1,
        interpolation: 4,
        embed_dim: 16,
        heads: 2,
        d_ff: Some(32),
        cnm_d_model: 16,
        cnm_layers: 1,
        cnm_heads: 2,
        cnm_d_ff: Some(32),
        head_hidden: vec![32],
        dropout: 0.1,
        ..TrainConfig::default()
    }
}

fn cohort(mpts_signal: f64, notes_signal: f64, time_ramp: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n_patients: 2000,
        prevalence: 0.3,
        mpts_signal,
        notes_signal,
        time_ramp,
        seed,
        ..SynthConfig::default()
    }
}

fn mean_auroc(data: &Dataset, mode: AblationMode) -> (f64, Vec<RunArtifacts>) {
    let runs: Vec<RunArtifacts> = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                horizon: data.horizon,
                ..toy_train()
            };
            train::run_once(data, &cfg, mode).unwrap()
        })
        .collect();
    let mean = runs.iter().map(|r| r.result.test.auroc).sum::<f64>() / runs.len() as f64;
    (mean, runs)
}

struct Learnability {
    dual: Dataset,
    dual_full: (f64, Vec<RunArtifacts>),
    dual_mpts: f64,
    dual_notes: f64,
    mpts_data_mpts: f64,
    mpts_data_notes: f64,
    notes_data_notes: f64,
    notes_data_mpts: f64,
    elapsed: Duration,
}

fn learnability() -> &'static Learnability {
    static CELL: OnceLock<Learnability> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let dual = load_synth(&cohort(0.7, 0.6, 0.0, 11))
            .1
            .dataset(12)
            .unwrap();
        let dual_full = mean_auroc(&dual, AblationMode::Full);
        let dual_mpts = mean_auroc(&dual, AblationMode::MptsOnly).0;
        let dual_notes = mean_auroc(&dual, AblationMode::NotesOnly).0;
        let mdata = load_synth(&cohort(1.0, 0.0, 0.0, 12))
            .1
            .dataset(12)
            .unwrap();
        let mpts_data_mpts = mean_auroc(&mdata, AblationMode::MptsOnly).0;
        let mpts_data_notes = mean_auroc(&mdata, AblationMode::NotesOnly).0;
        let ndata = load_synth(&cohort(0.0, 0.7, 0.0, 13))
            .1
            .dataset(12)
            .unwrap();
        let notes_data_notes = mean_auroc(&ndata, AblationMode::NotesOnly).0;
        let notes_data_mpts = mean_auroc(&ndata, AblationMode::MptsOnly).0;
        Learnability {
            dual,
            dual_full,
            dual_mpts,
            dual_notes,
            mpts_data_mpts,
            mpts_data_notes,
            notes_data_notes,
            notes_data_mpts,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn end_to_end_learnability() {
    let l = learnability();
    let full = l.dual_full.0;
    let chance = 0.43..=0.57;
    let checks = [
        full >= 0.90,
        l.mpts_data_mpts >= 0.85,
        chance.contains(&l.mpts_data_notes),
        l.notes_data_notes >= 0.85,
        chance.contains(&l.notes_data_mpts),
        l.elapsed <= Duration::from_secs(15 * 60),
    ];
    report(
        "end-to-end learnability",
        checks.iter().all(|&c| c),
        &format!(
            "dual FULL {full:.4} (>= 0.90); mpts-signal MPTS_ONLY {:.4} (>= 0.85), NOTES_ONLY {:.4} (in [0.43, 0.57]); notes-signal NOTES_ONLY {:.4} (>= 0.85), MPTS_ONLY {:.4} (in [0.43, 0.57]); {:.0}s (<= 900s)",
            l.mpts_data_mpts,
            l.mpts_data_notes,
            l.notes_data_notes,
            l.notes_data_mpts,
            l.elapsed.as_secs_f64()
        ),
    );
    assert!(checks.iter().all(|&c| c), "checks {checks:?}");
}

#[test]
fn ablation_direction() {
    let l = learnability();
    let full = l.dual_full.0;
    let best_single = l.dual_mpts.max(l.dual_notes);
    let modality_ok = full >= best_single - 0.01;

    let raw = load_synth(&cohort(0.7, 0.6, 0.5, 14)).1;
    let t12 = mean_auroc(&raw.dataset(12).unwrap(), AblationMode::Full).0;
    let t36 = mean_auroc(&raw.dataset(36).unwrap(), AblationMode::Full).0;
    let horizon_ok = t36 >= t12 - 0.01;
    report(
        "ablation direction",
        modality_ok && horizon_ok,
        &format!(
            "FULL {full:.4} vs max(MPTS_ONLY {:.4}, NOTES_ONLY {:.4}) - 0.01; ramp 0.5 FULL T=36 {t36:.4} vs T=12 {t12:.4} - 0.01",
            l.dual_mpts, l.dual_notes
        ),
    );
    assert!(modality_ok && horizon_ok);
}

fn read_attention_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r
        .headers()
        .unwrap()
        .iter()
        .skip(1)
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .skip(1)
                .map(|v| v.parse().unwrap())
                .collect()
        })
        .collect();
    (header, rows)
}

#[test]
fn attention_case_study() {
    let l = learnability();
    let art = &l.dual_full.1[0];
    let positives: Vec<Sample> = art
        .fold
        .test
        .iter()
        .filter(|s| s.label == 1)
        .take(20)
        .cloned()
        .collect();
    assert_eq!(positives.len(), 20);
    let bank = synth::PhraseBank::default();
    let mass = cls_attention_by_category(&art.model, &positives, &art.fold.vocab, &bank).unwrap();
    let directional = mass.positive > mass.filler;

    // Export through the command path and check every emitted row.
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    let tokens: Vec<TokenSequence> = l
        .dual
        .records
        .iter()
        .map(|r| notes::encode(&r.text, &art.fold.vocab, 40).unwrap())
        .collect();
    let manifest = BundleManifest {
        horizon: 12,
        features: l.dual.features.clone(),
        cohort: l.dual.summary(),
        excluded: l.dual.excluded.clone(),
        vocab_seed: 0,
        max_len: 40,
        vocab_size: art.fold.vocab.len(),
        inputs: BTreeMap::new(),
    };
    dataset::save_bundle(&bundle, &l.dual, &art.fold.vocab, &tokens, &manifest).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let cfg = TrainConfig {
        seed: 0,
        horizon: 12,
        ..toy_train()
    };
    train::save_checkpoint(&ckpt, art, &cfg, &l.dual.features).unwrap();
    let (mut worst_sum, mut worst_pad, mut rows_checked) = (0.0f64, 0.0f64, 0usize);
    for s in &positives {
        let paths = cli::cmd_attention(
            &ckpt,
            &bundle,
            &s.patient_id,
            0,
            None,
            &dir.path().join("att"),
        )
        .unwrap();
        for p in paths {
            let (header, rows) = read_attention_csv(&p);
            for row in rows {
                let (mut kept, mut pad) = (0.0, 0.0f64);
                for (label, w) in header.iter().zip(&row) {
                    if label.ends_with(":[PAD]") {
                        pad = pad.max(w.abs());
                    } else {
                        kept += w;
                    }
                }
                worst_sum = worst_sum.max((kept - 1.0).abs());
                worst_pad = worst_pad.max(pad);
                rows_checked += 1;
            }
        }
    }
    let pass = directional && worst_sum <= 1e-9 && worst_pad == 0.0;
    report(
        "attention case study",
        pass,
        &format!(
            "20 test positives, CLS attention per token: positive phrases {:.5}, filler {:.5}, negative phrases {:.5}; {rows_checked} exported rows, max |row sum - 1| {worst_sum:.2e} (tol 1e-9), max PAD weight {worst_pad:.1e}",
            mass.positive, mass.filler, mass.negative
        ),
    );
    assert!(directional, "{mass:?}");
    assert!(worst_sum <= 1e-9);
    assert_eq!(worst_pad, 0.0);
}

// ---------------------------------------------------------------------------
// Determinism and checkpoint round trip

fn sepsis(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_sepsis"))
        .args(args)
        .status()
        .expect("run sepsis binary");
    assert!(status.success(), "sepsis {args:?} failed");
}

fn pipeline_run(root: &Path, config: &Path) {
    let s = |p: &str| root.join(p).display().to_string();
    let c = config.display().to_string();
    sepsis(&["synth", "--config", &c, "--out", &s("data")]);
    sepsis(&[
        "preprocess",
        "--config",
        &c,
        "--data",
        &s("data"),
        "--out",
        &s("bundle"),
    ]);
    sepsis(&[
        "ablate",
        "--config",
        &c,
        "--bundle",
        &s("bundle"),
        "--out",
        &s("ablate"),
    ]);
    sepsis(&[
        "train",
        "--config",
        &c,
        "--bundle",
        &s("bundle"),
        "--out",
        &s("train"),
    ]);
    sepsis(&[
        "evaluate",
        "--config",
        &c,
        "--checkpoint",
        &s("train/model.ckpt"),
        "--bundle",
        &s("bundle"),
        "--out",
        &s("eval"),
    ]);
}

#[test]
fn determinism_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "synth": {"n_patients": 300, "mpts_signal": 0.7, "notes_signal": 0.6, "seed": 21},
  "horizons": [12, 24],
  "modes": ["MPTS_ONLY", "FULL"],
  "seeds": [0, 1],
  "train": {"epochs": 3, "max_len": 32, "layers": 1, "interpolation": 4, "embed_dim": 16,
            "heads": 2, "d_ff": 32, "cnm_d_model": 16, "cnm_layers": 1, "cnm_heads": 2,
            "cnm_d_ff": 32, "head_hidden": [16], "seed": 3}
}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline_run(&a, &config);
    pipeline_run(&b, &config);
    let read = |p: &Path| std::fs::read(p).unwrap();
    let mut identical = Vec::new();
    for f in [
        "data/events.csv",
        "data/notes.csv",
        "data/labels.csv",
        "bundle/t12/tokens.jsonl",
        "ablate/results.csv",
        "train/results.csv",
        "train/model.ckpt",
        "eval/results.csv",
    ] {
        identical.push((f, read(&a.join(f)) == read(&b.join(f))));
    }
    let all_identical = identical.iter().all(|(_, same)| *same);

    let rows = |p: &Path| -> Vec<Vec<String>> {
        csv::Reader::from_path(p)
            .unwrap()
            .records()
            .map(|r| r.unwrap().iter().map(str::to_string).collect())
            .collect()
    };
    let trained = rows(&a.join("train/results.csv"));
    let evaluated = rows(&a.join("eval/results.csv"));
    // auroc, f1, precision, recall as written, compared as text.
    let metrics_equal = trained[0][6..10] == evaluated[0][6..10];

    // In-process: reloaded parameters and metrics are bit-identical.
    let (data, _) = dataset::load_bundle(&dataset::horizon_dir(&a.join("bundle"), 12)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..toy_train()
    };
    let art = train::run_once(&data, &cfg, AblationMode::Full).unwrap();
    let ckpt = dir.path().join("inproc.ckpt");
    train::save_checkpoint(&ckpt, &art, &cfg, &data.features).unwrap();
    let (model, meta) = train::load_checkpoint(&ckpt).unwrap();
    let samples = train::checkpoint_test_samples(&data, &meta).unwrap();
    let again: Metrics =
        train::evaluate(&model, &samples, meta.mode, meta.train.threshold).unwrap();
    let bitwise = again == art.result.test
        && model
            .params
            .iter()
            .zip(art.model.params.iter())
            .all(|((_, x), (_, y))| x.data() == y.data());

    let ablate_rows = rows(&a.join("ablate/results.csv")).len();
    let pass = all_identical && metrics_equal && bitwise;
    report(
        "determinism and round trip",
        pass,
        &format!(
            "two pipeline runs byte-identical: {identical:?}; evaluate reproduces training metrics {metrics_equal}; in-process reload bitwise {bitwise}; ablate rows {ablate_rows}"
        ),
    );
    assert!(all_identical, "{identical:?}");
    assert!(metrics_equal, "{trained:?} vs {evaluated:?}");
    assert!(bitwise);
    assert_eq!(ablate_rows, 2 * 2 * (2 + 2));
}
