use std::path::{Path, PathBuf};

use mcn_core::adaptation::AdaptationLevel;
use mcn_core::model::{encode_auxiliary, score_fusion, Architecture, AuxiliaryEncoder, Mode, StreamModel};
use mcn_core::synthdata::{make_dataset, split, MultimodalDataset, Splits};
use mcn_core::train::{
    evaluate, gradient_check, init_stream_model, pretrain_auxiliary, report_from_probabilities,
    sweep_lambda, train_stream, GRADCHECK_FLOOR,
};
use mcn_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::csvio::{self, ProbabilityTable};
use crate::error::{CliError, CliResult};
use crate::format::{self, Checkpoint, DatasetFile, Dims, ModelKind};
use crate::{Command, Common, SplitName};

/// Tolerance of the gradient check's maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const DATASET_FILE: &str = "dataset.mcnd";
pub const ENCODER_FILE: &str = "encoder.mcnc";
pub const MODEL_FILE: &str = "model.mcnc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const PROBABILITIES_FILE: &str = "probabilities.csv";
pub const FUSED_FILE: &str = "fused.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn new(common: &Common) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.generator.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(Ctx {
            cfg,
            out: common.out.clone(),
            force: common.force,
        })
    }

    /// Output paths under `--out`, refusing to clobber existing files unless
    /// `--force` was given. Checked before any work starts.
    fn outputs<const K: usize>(&self, names: [&str; K]) -> CliResult<[PathBuf; K]> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let paths = names.map(|n| self.out.join(n));
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(CliError::Exists { path: p.clone() });
            }
        }
        Ok(paths)
    }

    fn splits(&self, file: &DatasetFile) -> CliResult<Splits> {
        let seed = self.cfg.split.seed.unwrap_or(file.header.generator.seed);
        Ok(split(&file.data, self.cfg.split.fractions, seed)?)
    }
}

fn required(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{what} (or paths.{what} in the config)")))
}

fn shape_error(op: &'static str, lhs: String, rhs: String) -> CliError {
    CliError::Core(Error::Shape { op, lhs, rhs })
}

fn pick(splits: &Splits, which: SplitName) -> &MultimodalDataset {
    match which {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    }
}

fn load_stream(path: &Path, file: &DatasetFile) -> CliResult<StreamModel> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.stream_model(path)?;
    let h = &file.header;
    if model.input_size() != h.source_dim || model.num_classes() != h.classes {
        return Err(shape_error(
            "checkpoint vs dataset",
            format!("model D_in={} C={}", model.input_size(), model.num_classes()),
            format!("data D_src={} C={}", h.source_dim, h.classes),
        ));
    }
    Ok(model)
}

fn load_encoder(path: &Path, file: &DatasetFile) -> CliResult<AuxiliaryEncoder> {
    let ckpt = Checkpoint::load(path)?;
    let enc = ckpt.encoder(path)?;
    if enc.input_size() != file.header.aux_dim {
        return Err(shape_error(
            "encoder vs dataset",
            format!("encoder D_aux={}", enc.input_size()),
            format!("data D_aux={}", file.header.aux_dim),
        ));
    }
    Ok(enc)
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Gen { common } => gen(&Ctx::new(&common)?),
        Command::PretrainAux { common, data } => pretrain(&Ctx::new(&common)?, data),
        Command::Train {
            common,
            data,
            encoder,
        } => train(&Ctx::new(&common)?, data, encoder),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => eval(&Ctx::new(&common)?, checkpoint, data, split),
        Command::Fuse {
            common,
            inputs,
            weights,
        } => fuse(&Ctx::new(&common)?, &inputs, weights),
        Command::Gradcheck {
            common,
            arch,
            level,
        } => gradcheck(&Ctx::new(&common)?, &arch, &level),
        Command::SweepLambda {
            common,
            data,
            encoder,
        } => sweep(&Ctx::new(&common)?, data, encoder),
        Command::ExportEmbeddings {
            common,
            checkpoint,
            encoder,
            data,
            split,
        } => export_embeddings(&Ctx::new(&common)?, checkpoint, encoder, data, split),
    }
}

fn gen(ctx: &Ctx) -> CliResult<()> {
    let [path] = ctx.outputs([DATASET_FILE])?;
    let data = make_dataset(&ctx.cfg.generator)?;
    format::write_file(&path, &format::encode_dataset(&data, &ctx.cfg.generator))?;
    let c = data.num_classes();
    println!(
        "wrote {} ({} alignment, {} source / {} auxiliary samples)",
        path.display(),
        data.alignment.as_str(),
        data.source.len(),
        data.auxiliary.len()
    );
    println!(
        "class histogram: source {:?}, auxiliary {:?}",
        MultimodalDataset::class_histogram(data.source.labels(), c),
        MultimodalDataset::class_histogram(data.auxiliary.labels(), c)
    );
    Ok(())
}

fn pretrain(ctx: &Ctx, data: Option<PathBuf>) -> CliResult<()> {
    let data_path = required(&data, &ctx.cfg.paths.dataset, "data")?;
    let [ckpt_path, metrics_path] = ctx.outputs([ENCODER_FILE, PRETRAIN_METRICS_FILE])?;
    let file = format::load_dataset(&data_path)?;
    let splits = ctx.splits(&file)?;
    let n = ctx.cfg.model.hidden_size;
    let (enc, history) = pretrain_auxiliary(&splits.train.auxiliary, n, &ctx.cfg.train)?;
    let dims = Dims {
        d_in: file.header.aux_dim,
        n,
        c: file.header.classes,
    };
    let ckpt = Checkpoint::from_params(ModelKind::AuxEncoder, dims, ctx.cfg.train.seed, enc.lstm(), &ctx.cfg);
    format::write_file(&ckpt_path, &ckpt.encode())?;
    format::write_file(&metrics_path, &csvio::pretrain_metrics(&history))?;
    if let Some(last) = history.last() {
        println!(
            "pretrained auxiliary encoder: epoch {} ce {:.4} train accuracy {:.4}",
            last.epoch, last.ce, last.train_accuracy
        );
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn optional_encoder(
    ctx: &Ctx,
    flag: &Option<PathBuf>,
    file: &DatasetFile,
) -> CliResult<Option<AuxiliaryEncoder>> {
    if ctx.cfg.train.adaptation.level == AdaptationLevel::None {
        return Ok(None);
    }
    let path = required(flag, &ctx.cfg.paths.encoder, "encoder")?;
    load_encoder(&path, file).map(Some)
}

fn write_stream(
    ctx: &Ctx,
    cfg: &RunConfig,
    path: &Path,
    model: &StreamModel,
) -> CliResult<()> {
    let dims = Dims {
        d_in: model.input_size(),
        n: model.hidden_size(),
        c: model.num_classes(),
    };
    let kind = ModelKind::of(ctx.cfg.model.architecture);
    let ckpt = Checkpoint::from_params(kind, dims, cfg.train.seed, model, cfg);
    format::write_file(path, &ckpt.encode())
}

fn train(ctx: &Ctx, data: Option<PathBuf>, encoder: Option<PathBuf>) -> CliResult<()> {
    let data_path = required(&data, &ctx.cfg.paths.dataset, "data")?;
    let [model_path, metrics_path] = ctx.outputs([MODEL_FILE, METRICS_FILE])?;
    let file = format::load_dataset(&data_path)?;
    let splits = ctx.splits(&file)?;
    let enc = optional_encoder(ctx, &encoder, &file)?;
    let cfg = &ctx.cfg;
    let init = init_stream_model(
        cfg.model.architecture,
        file.header.source_dim,
        cfg.model.hidden_size,
        file.header.classes,
        &cfg.train,
    )?;
    let val = (!splits.val.source.is_empty()).then_some(&splits.val);
    let outcome = train_stream(init, &splits.train, val, enc.as_ref(), &cfg.train)?;
    write_stream(ctx, cfg, &model_path, &outcome.model)?;
    format::write_file(&metrics_path, &csvio::metrics(&outcome.epochs))?;
    if let Some(r) = outcome.epochs.last() {
        println!(
            "epoch {}: loss {:.4} (ce {:.4}, d {:.4}, λ {}) train acc {:.4} val acc {:.4}",
            r.epoch, r.loss, r.ce, r.distance, r.lambda, r.train_accuracy, r.val_accuracy
        );
    }
    println!("wrote {} and {}", model_path.display(), metrics_path.display());
    Ok(())
}

fn eval(
    ctx: &Ctx,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    which: SplitName,
) -> CliResult<()> {
    let data_path = required(&data, &ctx.cfg.paths.dataset, "data")?;
    let ckpt_path = required(&checkpoint, &ctx.cfg.paths.checkpoint, "checkpoint")?;
    let [eval_path, prob_path] = ctx.outputs([EVAL_FILE, PROBABILITIES_FILE])?;
    let file = format::load_dataset(&data_path)?;
    let model = load_stream(&ckpt_path, &file)?;
    let splits = ctx.splits(&file)?;
    let part = pick(&splits, which);
    let report = evaluate(&model, &part.source)?;

    let mut rows = vec![vec!["accuracy".into(), String::new(), csvio::real(report.accuracy)]];
    for (c, ap) in report.average_precision.iter().enumerate() {
        rows.push(vec!["average_precision".into(), c.to_string(), csvio::real(*ap)]);
    }
    format::write_file(&eval_path, &csvio::to_bytes(&["metric", "class", "value"], &rows))?;
    let table = ProbabilityTable {
        samples: (0..part.source.len()).collect(),
        labels: part.source.labels().to_vec(),
        probabilities: report.probabilities,
    };
    format::write_file(&prob_path, &table.to_bytes())?;
    println!("accuracy {:.4} on {} samples", report.accuracy, part.source.len());
    println!("wrote {} and {}", eval_path.display(), prob_path.display());
    Ok(())
}

fn fuse(ctx: &Ctx, inputs: &[PathBuf], weights: Option<Vec<f64>>) -> CliResult<()> {
    let weights = weights.unwrap_or_else(|| ctx.cfg.fuse.weights.clone());
    if weights.len() != inputs.len() {
        return Err(CliError::Usage(format!(
            "{} weights for {} probability files",
            weights.len(),
            inputs.len()
        )));
    }
    let [out_path] = ctx.outputs([FUSED_FILE])?;
    let tables = inputs
        .iter()
        .map(|p| ProbabilityTable::parse(&format::read_file(p)?, p))
        .collect::<CliResult<Vec<_>>>()?;
    let first = &tables[0];
    for (t, p) in tables.iter().zip(inputs).skip(1) {
        if t.samples != first.samples || t.labels != first.labels {
            return Err(CliError::format(p, "samples or labels differ from the first stream"));
        }
        if t.num_classes() != first.num_classes() {
            return Err(shape_error(
                "fuse",
                format!("{} classes", first.num_classes()),
                format!("{} classes", t.num_classes()),
            ));
        }
    }
    let probabilities = (0..first.samples.len())
        .map(|i| {
            let rows: Vec<&[f64]> = tables.iter().map(|t| t.probabilities[i].as_slice()).collect();
            score_fusion(&rows, &weights)
        })
        .collect::<mcn_core::Result<Vec<_>>>()?;
    let fused = ProbabilityTable {
        samples: first.samples.clone(),
        labels: first.labels.clone(),
        probabilities,
    };
    format::write_file(&out_path, &fused.to_bytes())?;
    let report = report_from_probabilities(fused.probabilities, &fused.labels, first.num_classes())?;
    println!("fused accuracy {:.4}", report.accuracy);
    println!("wrote {}", out_path.display());
    Ok(())
}

fn parse_choices<T: Copy>(value: &str, all: &[T], name: fn(T) -> &'static str) -> CliResult<Vec<T>> {
    if value == "all" {
        return Ok(all.to_vec());
    }
    all.iter()
        .copied()
        .find(|&v| name(v) == value)
        .map(|v| vec![v])
        .ok_or_else(|| {
            let names: Vec<&str> = all.iter().map(|&v| name(v)).collect();
            CliError::Usage(format!("unknown choice {value:?}; expected all or one of {names:?}"))
        })
}

fn gradcheck(ctx: &Ctx, arch: &str, level: &str) -> CliResult<()> {
    let archs = parse_choices(arch, &[Architecture::ResLstm, Architecture::VLstm], Architecture::as_str)?;
    let levels = parse_choices(
        level,
        &[
            AdaptationLevel::None,
            AdaptationLevel::Domain,
            AdaptationLevel::Category,
            AdaptationLevel::Sample,
            AdaptationLevel::Joint,
        ],
        AdaptationLevel::as_str,
    )?;
    let mut worst: f64 = 0.0;
    println!("relative error = |a - n| / max(|a|, |n|, {GRADCHECK_FLOOR:e})");
    for &a in &archs {
        for &l in &levels {
            let r = gradient_check(a, l, &ctx.cfg.probe)?;
            println!(
                "{:<9} {:<9} loss {:.6} max relative error {:.3e}",
                a.as_str(),
                l.as_str(),
                r.loss,
                r.max_relative_error
            );
            for b in &r.blocks {
                println!("    {:<14} {:>5} values  {:.3e}", b.name, b.size, b.max_relative_error);
            }
            worst = worst.max(r.max_relative_error);
        }
    }
    if !(worst <= GRADCHECK_TOLERANCE) {
        return Err(CliError::Tolerance(format!(
            "gradient check failed: max relative error {worst:.3e} > {GRADCHECK_TOLERANCE:e}"
        )));
    }
    println!("gradient check passed: max relative error {worst:.3e}");
    Ok(())
}

fn sweep(ctx: &Ctx, data: Option<PathBuf>, encoder: Option<PathBuf>) -> CliResult<()> {
    let data_path = required(&data, &ctx.cfg.paths.dataset, "data")?;
    let [sweep_path, model_path, metrics_path] =
        ctx.outputs([SWEEP_FILE, MODEL_FILE, METRICS_FILE])?;
    let file = format::load_dataset(&data_path)?;
    let splits = ctx.splits(&file)?;
    let enc = optional_encoder(ctx, &encoder, &file)?;
    let cfg = &ctx.cfg;
    let init = init_stream_model(
        cfg.model.architecture,
        file.header.source_dim,
        cfg.model.hidden_size,
        file.header.classes,
        &cfg.train,
    )?;
    let result = sweep_lambda(&init, &splits.train, &splits.val, enc.as_ref(), &cfg.train, &cfg.sweep.grid)?;
    let rows: Vec<Vec<String>> = result
        .entries
        .iter()
        .map(|e| {
            vec![
                csvio::real(e.lambda),
                csvio::real(e.val_accuracy),
                ((e.lambda == result.selected_lambda) as u8).to_string(),
            ]
        })
        .collect();
    format::write_file(&sweep_path, &csvio::to_bytes(&["lambda", "val_accuracy", "selected"], &rows))?;
    let best = result.selected();
    let mut echo = cfg.clone();
    echo.train.adaptation.lambda = best.lambda;
    write_stream(ctx, &echo, &model_path, &best.outcome.model)?;
    format::write_file(&metrics_path, &csvio::metrics(&best.outcome.epochs))?;
    for e in &result.entries {
        println!("λ {:<8} val accuracy {:.4}", e.lambda, e.val_accuracy);
    }
    println!("selected λ {}", result.selected_lambda);
    Ok(())
}

fn export_embeddings(
    ctx: &Ctx,
    checkpoint: Option<PathBuf>,
    encoder: Option<PathBuf>,
    data: Option<PathBuf>,
    which: SplitName,
) -> CliResult<()> {
    let data_path = required(&data, &ctx.cfg.paths.dataset, "data")?;
    let ckpt_path = required(&checkpoint, &ctx.cfg.paths.checkpoint, "checkpoint")?;
    let enc_path = required(&encoder, &ctx.cfg.paths.encoder, "encoder")?;
    let [out_path] = ctx.outputs([EMBEDDINGS_FILE])?;
    let file = format::load_dataset(&data_path)?;
    let model = load_stream(&ckpt_path, &file)?;
    let enc = load_encoder(&enc_path, &file)?;
    if enc.hidden_size() != model.hidden_size() {
        return Err(shape_error(
            "export-embeddings",
            format!("encoder N={}", enc.hidden_size()),
            format!("model N={}", model.hidden_size()),
        ));
    }
    let splits = ctx.splits(&file)?;
    let part = pick(&splits, which);

    // Eval mode draws nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward_batch(&part.source, Mode::Eval, &mut rng)?;
    let (_, aux) = encode_auxiliary(&part.auxiliary, &enc)?;
    let n = model.hidden_size();
    let mut header = vec!["sample".to_string(), "label".into(), "modality".into()];
    header.extend((0..n).map(|k| format!("d{k}")));
    let mut rows = Vec::with_capacity(fwd.len() + aux.len());
    let mut push = |i: usize, label: usize, modality: &str, values: &[f64]| {
        let mut row = vec![i.to_string(), label.to_string(), modality.to_string()];
        row.extend(values.iter().map(|&v| csvio::real(v)));
        rows.push(row);
    };
    for (i, (f, &l)) in fwd.iter().zip(part.source.labels()).enumerate() {
        push(i, l, "source", &f.descriptor);
    }
    for (i, (d, &l)) in aux.descriptors.iter().zip(&aux.labels).enumerate() {
        push(i, l, "auxiliary", d);
    }
    format::write_file(&out_path, &csvio::to_bytes(&header, &rows))?;
    println!("wrote {} ({} rows)", out_path.display(), rows.len());
    Ok(())
}
