//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mcn_core::adaptation::{
    category_distance, domain_distance, sample_distance, AdaptationConfig, AdaptationLevel,
    DescriptorBatch, Modality,
};
use mcn_core::linalg::Matrix;
use mcn_core::model::{res_forward, Architecture, DropoutConfig, Mode, StreamModel};
use mcn_core::rnn::{lstm_sequence_forward, SequenceBatch};
use mcn_core::synthdata::{make_dataset, shuffle, split, Alignment, GeneratorConfig, Splits};
use mcn_core::train::{
    evaluate, gradient_check, init_stream_model, pretrain_auxiliary, sweep_lambda, train_stream,
    ProbeConfig, TrainConfig, DEFAULT_LAMBDA_GRID,
};
use mcn_cli::csvio::ProbabilityTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const HIDDEN: usize = 16;
const FRACTIONS: [f64; 3] = [0.63, 0.07, 0.3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// Independent reference computations

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Biased MMD² with the linear kernel, written as the literal double sums.
fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let gram = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for u in a {
            for v in b {
                s += dot(u, v);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    gram(x, x) + gram(y, y) - 2.0 * gram(x, y)
}

fn naive_category(aux: &DescriptorBatch, src: &DescriptorBatch) -> Option<f64> {
    let mut total = 0.0;
    let mut k = 0;
    let classes = aux.labels.iter().chain(&src.labels).copied().max()? + 1;
    for c in 0..classes {
        let pick = |b: &DescriptorBatch| -> Vec<Vec<f64>> {
            b.descriptors
                .iter()
                .zip(&b.labels)
                .filter(|(_, &l)| l == c)
                .map(|(d, _)| d.clone())
                .collect()
        };
        let (a, s) = (pick(aux), pick(src));
        if !a.is_empty() && !s.is_empty() {
            total += naive_mmd(&a, &s);
            k += 1;
        }
    }
    (k > 0).then(|| total / k as f64)
}

fn naive_sample(aux: &DescriptorBatch, src: &DescriptorBatch) -> f64 {
    let mut s = 0.0;
    for (a, r) in aux.descriptors.iter().zip(&src.descriptors) {
        s += a.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    s / src.len() as f64
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize, m: Modality) -> DescriptorBatch {
    let rows = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    DescriptorBatch::new(rows, labels, m).unwrap()
}

// ---------------------------------------------------------------------------
// Criteria

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut which = String::new();
    for arch in [Architecture::ResLstm, Architecture::VLstm] {
        for level in [
            AdaptationLevel::None,
            AdaptationLevel::Domain,
            AdaptationLevel::Category,
            AdaptationLevel::Sample,
            AdaptationLevel::Joint,
        ] {
            let r = gradient_check(arch, level, &ProbeConfig::default()).unwrap();
            if r.max_relative_error >= worst {
                worst = r.max_relative_error;
                which = format!("{}/{}", arch.as_str(), level.as_str());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {worst:.2e} ({which}) over 10 combinations in {elapsed:.1?}"),
    )
}

fn mmd_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let dim = rng.random_range(1..=16);
        let n = rng.random_range(1..=32);
        let m = rng.random_range(1..=32);
        let a = random_batch(&mut rng, m, dim, 3, Modality::Auxiliary);
        let s = random_batch(&mut rng, n, dim, 3, Modality::Source);
        let d = domain_distance(&a, &s).unwrap().value;
        let (ma, ms) = (mean(&a.descriptors), mean(&s.descriptors));
        let norm: f64 = ma.iter().zip(&ms).map(|(x, y)| (x - y) * (x - y)).sum();
        worst = worst.max((d - norm).abs());
    }
    outcome(worst <= 1e-10, format!("max |d_D - |mu_aux - mu_src|^2| = {worst:.2e} over 100 pairs"))
}

fn category_reduction() -> Outcome {
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let dim = rng.random_range(1..=16);
        let class = rng.random_range(0..5);
        let (m, n) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let mut a = random_batch(&mut rng, m, dim, 1, Modality::Auxiliary);
        let mut s = random_batch(&mut rng, n, dim, 1, Modality::Source);
        a.labels.iter_mut().for_each(|l| *l = class);
        s.labels.iter_mut().for_each(|l| *l = class);
        let c = category_distance(&a, &s).unwrap().value;
        let d = domain_distance(&a, &s).unwrap().value;
        worst = worst.max((c - d).abs());
    }
    outcome(worst <= 1e-12, format!("max |d_C - d_D| = {worst:.2e} over 20 single-class batches"))
}

fn zero_residual_identity() -> Outcome {
    let mut identical = 0;
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
        let (d, n, c, t) = (
            rng.random_range(1..=8),
            rng.random_range(1..=12),
            rng.random_range(2..=5),
            rng.random_range(1..=16),
        );
        let mut model = StreamModel::init(Architecture::ResLstm, d, n, c, DropoutConfig::default(), &mut rng).unwrap();
        model.zero_residual_path();
        let x = Matrix::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let batch = SequenceBatch::new(vec![x.clone()], vec![0], c).unwrap();
        let h = &res_forward(&batch, &model, Mode::Eval, &mut rng).unwrap()[0].hidden;
        let (z, _) = lstm_sequence_forward(&x, &model.first, None).unwrap();
        let bitwise = h.as_slice().iter().zip(z.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if bitwise && h.shape() == z.shape() {
            identical += 1;
        }
    }
    outcome(identical == 10, format!("{identical}/10 inputs bitwise identical"))
}

fn zero_lambda_equivalence() -> Outcome {
    let data = make_dataset(&GeneratorConfig::default()).unwrap();
    let s = split(&data, FRACTIONS, 0).unwrap();
    let base = TrainConfig {
        epochs: 7,
        ..TrainConfig::default()
    };
    let (enc, _) = pretrain_auxiliary(&s.train.auxiliary, HIDDEN, &TrainConfig { epochs: 5, ..base }).unwrap();
    let init = init_stream_model(Architecture::ResLstm, 24, HIDDEN, 5, &base).unwrap();
    let none = train_stream(init.clone(), &s.train, None, None, &base).unwrap();
    let cfg = TrainConfig {
        adaptation: AdaptationConfig::new(AdaptationLevel::Sample, 0.0),
        ..base
    };
    let sample = train_stream(init, &s.train, None, Some(&enc), &cfg).unwrap();
    let steps = none.steps.len().min(sample.steps.len());
    let worst = none
        .steps
        .iter()
        .zip(&sample.steps)
        .map(|(a, b)| (a.loss - b.loss).abs())
        .fold(0.0, f64::max);
    outcome(
        steps >= 50 && worst <= 1e-12,
        format!("{steps} steps, max loss difference {worst:.2e}"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + trial);
        let dim = rng.random_range(1..=16);
        let n = rng.random_range(1..=32);
        let m = rng.random_range(1..=32);
        let classes = rng.random_range(1..=4);
        let a = random_batch(&mut rng, m, dim, classes, Modality::Auxiliary);
        let s = random_batch(&mut rng, n, dim, classes, Modality::Source);
        let paired = random_batch(&mut rng, n, dim, classes, Modality::Auxiliary);
        worst = worst.max((domain_distance(&a, &s).unwrap().value - naive_mmd(&a.descriptors, &s.descriptors)).abs());
        if let Some(reference) = naive_category(&a, &s) {
            worst = worst.max((category_distance(&a, &s).unwrap().value - reference).abs());
        }
        worst = worst.max((sample_distance(&paired, &s).unwrap().value - naive_sample(&paired, &s)).abs());
    }
    outcome(worst <= 1e-9, format!("max deviation from double-loop evaluation {worst:.2e} over 50 batches"))
}

struct SeedRun {
    baseline: f64,
    selected: f64,
    selected_lambda: f64,
    splits: Splits,
    enc: mcn_core::model::AuxiliaryEncoder,
    init: StreamModel,
    cfg: TrainConfig,
}

fn benchmark_seed(seed: u64, alignment: Alignment, level: AdaptationLevel) -> SeedRun {
    let data = make_dataset(&GeneratorConfig {
        alignment,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let splits = split(&data, FRACTIONS, seed).unwrap();
    let cfg = TrainConfig {
        seed,
        adaptation: AdaptationConfig::new(level, 0.0),
        ..TrainConfig::default()
    };
    let (enc, _) = pretrain_auxiliary(&splits.train.auxiliary, HIDDEN, &cfg).unwrap();
    let init = init_stream_model(Architecture::ResLstm, 24, HIDDEN, 5, &cfg).unwrap();
    let sweep = sweep_lambda(&init, &splits.train, &splits.val, Some(&enc), &cfg, &DEFAULT_LAMBDA_GRID).unwrap();
    let acc = |m: &StreamModel| evaluate(m, &splits.test.source).unwrap().accuracy;
    let baseline = sweep.entries.iter().find(|e| e.lambda == 0.0).map(|e| acc(&e.outcome.model)).unwrap();
    let selected = acc(&sweep.selected().outcome.model);
    SeedRun {
        baseline,
        selected,
        selected_lambda: sweep.selected_lambda,
        splits,
        enc,
        init,
        cfg,
    }
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = v.collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn compensation(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let base = mean_of(runs.iter().map(|r| r.baseline));
    let adapted = mean_of(runs.iter().map(|r| r.selected));
    let lambdas: Vec<f64> = runs.iter().map(|r| r.selected_lambda).collect();
    outcome(
        adapted - base >= 0.03 && elapsed < Duration::from_secs(600),
        format!(
            "S-Res {:.2}% vs Res {:.2}% (gain {:+.2} pts, selected λ {lambdas:?}) in {elapsed:.1?}",
            100.0 * adapted,
            100.0 * base,
            100.0 * (adapted - base)
        ),
    )
}

fn unaligned_adaptation() -> Outcome {
    let runs: Vec<SeedRun> = (0..SEEDS)
        .map(|s| benchmark_seed(s, Alignment::Unaligned, AdaptationLevel::Domain))
        .collect();
    let base = mean_of(runs.iter().map(|r| r.baseline));
    let adapted = mean_of(runs.iter().map(|r| r.selected));
    let lambdas: Vec<f64> = runs.iter().map(|r| r.selected_lambda).collect();
    outcome(
        adapted - base >= 0.01,
        format!(
            "D-Res {:.2}% vs Res {:.2}% (gain {:+.2} pts, selected λ {lambdas:?})",
            100.0 * adapted,
            100.0 * base,
            100.0 * (adapted - base)
        ),
    )
}

fn negative_control(runs: &[SeedRun]) -> Outcome {
    let mut shuffled_acc = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let mut corrupted = r.splits.train.clone();
        let mut pairing = corrupted.pairing.clone().expect("sample-aligned benchmark");
        shuffle(&mut pairing, &mut ChaCha8Rng::seed_from_u64(5000 + seed as u64));
        corrupted.pairing = Some(pairing);
        let mut cfg = r.cfg;
        cfg.adaptation.lambda = r.selected_lambda;
        let out = train_stream(r.init.clone(), &corrupted, Some(&r.splits.val), Some(&r.enc), &cfg).unwrap();
        shuffled_acc.push(evaluate(&out.model, &r.splits.test.source).unwrap().accuracy);
    }
    let paired = mean_of(runs.iter().map(|r| r.selected));
    let shuffled = mean_of(shuffled_acc.into_iter());
    outcome(
        paired - shuffled >= 0.02,
        format!(
            "paired {:.2}% vs shuffled {:.2}% (drop {:.2} pts)",
            100.0 * paired,
            100.0 * shuffled,
            100.0 * (paired - shuffled)
        ),
    )
}

// ---------------------------------------------------------------------------
// Command-line criteria

fn mcn(args: &[&str], dir: &Path) -> bool {
    let status = Command::new(env!("CARGO_BIN_EXE_mcn"))
        .args(args)
        .current_dir(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("spawn mcn");
    status.success()
}

fn write_config(dir: &Path, json: &str) {
    std::fs::write(dir.join("config.json"), json).unwrap();
}

const PIPELINE_CONFIG: &str = r#"{
  "train": {"epochs": 4, "adaptation": {"level": "sample", "lambda": 0.1}}
}"#;

fn pipeline(dir: &Path) -> bool {
    write_config(dir, PIPELINE_CONFIG);
    let c = ["--config", "config.json"];
    mcn(&[&["gen"][..], &c].concat(), dir)
        && mcn(&[&["pretrain-aux", "--data", "dataset.mcnd"][..], &c].concat(), dir)
        && mcn(&[&["train", "--data", "dataset.mcnd", "--encoder", "encoder.mcnc"][..], &c].concat(), dir)
        && mcn(&[&["eval", "--data", "dataset.mcnd", "--checkpoint", "model.mcnc"][..], &c].concat(), dir)
}

fn fusion_correctness() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    write_config(dir, r#"{"train": {"epochs": 3}}"#);
    let c = ["--config", "config.json"];
    let mut ok = mcn(&[&["gen"][..], &c].concat(), dir);
    for (arch, sub) in [("res_lstm", "a"), ("v_lstm", "b")] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
        std::fs::write(
            dir.join(sub).join("config.json"),
            format!(r#"{{"train": {{"epochs": 3}}, "model": {{"architecture": "{arch}"}}}}"#),
        )
        .unwrap();
        let sc = ["--config", "config.json"];
        let d = dir.join(sub);
        ok &= mcn(&[&["train", "--data", "../dataset.mcnd"][..], &sc].concat(), &d);
        ok &= mcn(&[&["eval", "--data", "../dataset.mcnd", "--checkpoint", "model.mcnc"][..], &sc].concat(), &d);
    }
    ok &= mcn(&["fuse", "a/probabilities.csv", "b/probabilities.csv", "--out", "fused"], dir);
    if !ok {
        return outcome(false, "a pipeline command failed".into());
    }
    let read = |p: &str| ProbabilityTable::parse(&std::fs::read(dir.join(p)).unwrap(), Path::new(p)).unwrap();
    let (a, b, f) = (read("a/probabilities.csv"), read("b/probabilities.csv"), read("fused/fused.csv"));
    let mut entry_err: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    for ((pa, pb), pf) in a.probabilities.iter().zip(&b.probabilities).zip(&f.probabilities) {
        for ((x, y), z) in pa.iter().zip(pb).zip(pf) {
            entry_err = entry_err.max((0.5 * x + 0.5 * y - z).abs());
        }
        sum_err = sum_err.max((pf.iter().sum::<f64>() - 1.0).abs());
    }
    let rows_match = f.probabilities.len() == a.probabilities.len() && f.labels == a.labels;
    outcome(
        rows_match && entry_err <= 1e-12 && sum_err <= 1e-9,
        format!(
            "{} rows, max entry error {entry_err:.2e}, max |row sum - 1| {sum_err:.2e}",
            f.probabilities.len()
        ),
    )
}

fn determinism() -> Outcome {
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if !(pipeline(x.path()) && pipeline(y.path())) {
        return outcome(false, "a pipeline command failed".into());
    }
    let same = |name: &str| std::fs::read(x.path().join(name)).unwrap() == std::fs::read(y.path().join(name)).unwrap();
    let metrics = same("metrics.csv");
    let others: Vec<&str> = ["pretrain_metrics.csv", "eval.csv", "probabilities.csv", "model.mcnc"]
        .into_iter()
        .filter(|n| !same(n))
        .collect();
    outcome(
        metrics,
        format!(
            "metrics.csv byte-identical: {metrics}; other differing outputs: {others:?}"
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, o: Outcome| {
        println!("{} {:>2} {:<28} {}", if o.pass { "PASS" } else { "FAIL" }, id, name, o.detail);
        results.push((id, name, o));
    };
    record(1, "gradient fidelity", gradient_fidelity());
    record(2, "linear-kernel MMD identity", mmd_identity());
    record(3, "category->domain reduction", category_reduction());
    record(4, "zero-residual identity", zero_residual_identity());
    record(5, "lambda=0 equivalence", zero_lambda_equivalence());
    record(6, "oracle equivalence", oracle_equivalence());
    let start = Instant::now();
    let aligned: Vec<SeedRun> = (0..SEEDS)
        .map(|s| benchmark_seed(s, Alignment::Sample, AdaptationLevel::Sample))
        .collect();
    record(7, "compensation effect", compensation(&aligned, start.elapsed()));
    record(8, "unaligned adaptation", unaligned_adaptation());
    record(9, "negative control", negative_control(&aligned));
    record(10, "fusion correctness", fusion_correctness());
    record(11, "determinism", determinism());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
