//! Objective assembly, Adam, auxiliary pretraining, stream training, the λ
//! sweep and the finite-difference gradient checker.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adaptation_distance, AdaptationConfig, AdaptationLevel, DescriptorBatch, Modality,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{
    argmax, cross_entropy, encode_auxiliary, softmax, source_descriptors, Architecture,
    AuxiliaryEncoder, ClassifierHead, DropoutConfig, Mode, StreamModel,
};
use crate::params::{ParamBlock, ParamBlockMut, Parameters};
use crate::rnn::{
    dropout_forward, lstm_backward_into, lstm_sequence_forward, DropoutMask, LstmParams,
    SequenceBatch,
};
use crate::synthdata::{shuffle, sub_seed, MultimodalDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    /// Apply dropout to the residual LSTM's outputs as well.
    pub residual_dropout: bool,
    pub adaptation: AdaptationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 16,
            epochs: 30,
            dropout_rate: 0.5,
            residual_dropout: true,
            adaptation: AdaptationConfig::none(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be > 0".into()));
        }
        self.adaptation.validate()
    }

    pub fn dropout(&self) -> DropoutConfig {
        DropoutConfig {
            rate: self.dropout_rate,
            residual_path: self.residual_dropout,
        }
    }
}

/// `L = CE + λ d`.
pub fn total_loss(ce: f64, d: f64, lambda: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::InvariantViolation(format!("negative distance {d}")));
    }
    if lambda < 0.0 {
        return Err(Error::InvariantViolation(format!("negative lambda {lambda}")));
    }
    Ok(ce + lambda * d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let blocks = params.blocks();
        AdamState {
            m: blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            v: blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<P, G>(params: &mut P, grads: &G, state: &mut AdamState, cfg: &TrainConfig) -> Result<()>
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    let gb = grads.blocks();
    let pb = params.blocks_mut();
    if pb.len() != gb.len() || pb.len() != state.m.len() {
        return Err(Error::shape("adam_step", pb.len(), gb.len()));
    }
    for ((p, g), m) in pb.iter().zip(&gb).zip(&state.m) {
        if p.values.len() != g.values.len() || p.values.len() != m.len() {
            return Err(Error::shape("adam_step", &p.name, &g.name));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in pb.into_iter().zip(&gb).zip(&mut state.m).zip(&mut state.v) {
        for k in 0..m.len() {
            let gk = g.values[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p.values[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    pub distance: f64,
    pub lambda: f64,
    pub loss: f64,
    pub correct: usize,
    pub clamped: usize,
}

/// Forward + backward of the full objective on one batch. `aux` must be
/// present for any level other than `None`.
pub fn objective_and_gradients<R: Rng + ?Sized>(
    model: &StreamModel,
    batch: &SequenceBatch,
    aux: Option<&DescriptorBatch>,
    adaptation: &AdaptationConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(StepLoss, StreamModel)> {
    let fwd = model.forward_batch(batch, mode, rng)?;
    let mut probs = Vec::with_capacity(fwd.len());
    let mut correct = 0;
    for (f, &l) in fwd.iter().zip(batch.labels()) {
        let p = softmax(&f.logits)?;
        if argmax(&p) == l {
            correct += 1;
        }
        probs.push(p);
    }
    // The objective uses the batch mean of the summed cross-entropy.
    let summed = cross_entropy(&probs, batch.labels())?;
    let inv_n = 1.0 / batch.len() as f64;
    let ce = summed.loss * inv_n;

    let lambda = adaptation.lambda;
    let distance = match (adaptation.level, aux) {
        (AdaptationLevel::None, _) => None,
        (_, None) => {
            return Err(Error::Pairing(format!(
                "{} adaptation needs auxiliary descriptors",
                adaptation.level.as_str()
            )))
        }
        (_, Some(a)) => {
            let src = source_descriptors(&fwd, batch.labels())?;
            Some(adaptation_distance(adaptation, a, &src)?)
        }
    };
    let d_value = distance.as_ref().map_or(0.0, |d| d.value);
    let loss = total_loss(ce, d_value, lambda)?;

    let mut grads = model.zeros_like();
    let mut d_desc = vec![0.0; model.hidden_size()];
    for (i, (f, p)) in fwd.iter().zip(&probs).enumerate() {
        let mut d_logits = p.clone();
        d_logits[batch.labels()[i]] -= 1.0;
        d_logits.iter_mut().for_each(|v| *v *= inv_n);
        let dd = match &distance {
            Some(d) if lambda != 0.0 => {
                for (o, g) in d_desc.iter_mut().zip(&d.grad[i]) {
                    *o = lambda * g;
                }
                Some(d_desc.as_slice())
            }
            _ => None,
        };
        model.backward_sample(f, &d_logits, dd, &mut grads)?;
    }
    Ok((
        StepLoss {
            ce,
            distance: d_value,
            lambda,
            loss,
            correct,
            clamped: summed.clamped,
        },
        grads,
    ))
}

// ---------------------------------------------------------------------------
// Auxiliary pretraining

/// One LSTM layer with a mean-pooled linear head. Pretraining uses it as a
/// throwaway wrapper around the auxiliary encoder; it also serves as the
/// plain single-modality baseline.
#[derive(Debug, Clone)]
pub struct LstmClassifier {
    pub lstm: LstmParams,
    pub head: ClassifierHead,
}

impl Parameters for LstmClassifier {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = self.lstm.prefixed_blocks("aux_lstm");
        out.extend(self.head.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = self.lstm.prefixed_blocks_mut("aux_lstm");
        out.extend(self.head.blocks_mut());
        out
    }
}

impl LstmClassifier {
    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (h, _) = lstm_sequence_forward(x, &self.lstm, None)?;
        crate::model::classify(&h, &self.head)
    }

    fn step<R: Rng + ?Sized>(
        &self,
        batch: &SequenceBatch,
        rate: f64,
        rng: &mut R,
    ) -> Result<(f64, usize, LstmClassifier)> {
        let n = self.lstm.hidden_size();
        let mut grads = LstmClassifier {
            lstm: LstmParams::zeros(self.lstm.input_size(), n),
            head: ClassifierHead::zeros(n, self.head.num_classes()),
        };
        let mut ce = 0.0;
        let mut correct = 0;
        for (x, &label) in batch.features().iter().zip(batch.labels()) {
            let (h, tape) = lstm_sequence_forward(x, &self.lstm, None)?;
            let t_len = h.rows();
            let mut hd = Matrix::zeros(t_len, n);
            let mut masks: Vec<DropoutMask> = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let (v, m) = dropout_forward(h.row(t), rate, rng, true)?;
                hd.row_mut(t).copy_from_slice(&v);
                masks.push(m);
            }
            let mean = linalg::reduce_mean_rows(&hd)?;
            let logits = crate::model::classify(&hd, &self.head)?;
            let p = softmax(&logits)?;
            if argmax(&p) == label {
                correct += 1;
            }
            ce += cross_entropy(&[&p], &[label])?.loss;
            let mut dl = p;
            dl[label] -= 1.0;
            linalg::outer_acc(grads.head.w.as_mut_slice(), &dl, &mean);
            linalg::add_assign(&mut grads.head.b, &dl);
            let mut dm = vec![0.0; n];
            linalg::gemv_t_acc(&mut dm, self.head.w.as_slice(), &dl);
            let mut up = Matrix::zeros(t_len, n);
            for (t, m) in masks.iter().enumerate() {
                let row = up.row_mut(t);
                for (r, v) in row.iter_mut().zip(&dm) {
                    *r = v / t_len as f64;
                }
                m.apply(row);
            }
            lstm_backward_into(&up, &tape, &self.lstm, &mut grads.lstm)?;
        }
        Ok((ce, correct, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub ce: f64,
    pub train_accuracy: f64,
}

/// Trains a one-layer LSTM classifier with dropout on its outputs.
pub fn train_lstm_classifier(
    data: &SequenceBatch,
    hidden_size: usize,
    cfg: &TrainConfig,
) -> Result<(LstmClassifier, Vec<PretrainRecord>)> {
    cfg.validate()?;
    let classes: BTreeSet<usize> = data.labels().iter().copied().collect();
    if data.num_classes() < 2 || classes.len() < 2 {
        return Err(Error::Config(
            "classifier training needs at least 2 classes".into(),
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[STREAM_INIT, 0xA0]));
    let mut net = LstmClassifier {
        lstm: LstmParams::init(data.input_dim(), hidden_size, &mut init_rng),
        head: ClassifierHead::init(hidden_size, data.num_classes(), &mut init_rng),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[STREAM_SHUFFLE, 0xA0]));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[STREAM_DROPOUT, 0xA0]));
    let mut adam = AdamState::new(&net);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, &mut shuffle_rng);
        let mut ce = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.subset(chunk);
            let (c, _, grads) = net.step(&batch, cfg.dropout_rate, &mut drop_rng)?;
            ce += c;
            adam_step(&mut net, &grads, &mut adam, cfg)?;
        }
        let correct = data
            .features()
            .iter()
            .zip(data.labels())
            .map(|(x, &l)| net.logits(x).map(|g| (argmax(&g) == l) as usize))
            .sum::<Result<usize>>()?;
        history.push(PretrainRecord {
            epoch: epoch + 1,
            ce: ce / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((net, history))
}

pub fn evaluate_lstm_classifier(net: &LstmClassifier, data: &SequenceBatch) -> Result<EvalReport> {
    let probabilities = data
        .features()
        .iter()
        .map(|x| net.logits(x).and_then(|g| softmax(&g)))
        .collect::<Result<Vec<_>>>()?;
    report_from_probabilities(probabilities, data.labels(), net.head.num_classes())
}

/// Trains a one-layer LSTM on auxiliary sequences through a throwaway head,
/// then freezes it.
pub fn pretrain_auxiliary(
    aux: &SequenceBatch,
    hidden_size: usize,
    cfg: &TrainConfig,
) -> Result<(AuxiliaryEncoder, Vec<PretrainRecord>)> {
    let (net, history) = train_lstm_classifier(aux, hidden_size, cfg)?;
    Ok((AuxiliaryEncoder::frozen(net.lstm), history))
}

// ---------------------------------------------------------------------------
// Stream training

const STREAM_INIT: u64 = 0x11;
const STREAM_SHUFFLE: u64 = 0x12;
const STREAM_DROPOUT: u64 = 0x13;
const STREAM_AUX_SAMPLING: u64 = 0x14;

/// Fresh stream model with the initialization derived from `seed`.
pub fn init_stream_model(
    arch: Architecture,
    input_size: usize,
    hidden_size: usize,
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<StreamModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[STREAM_INIT]));
    StreamModel::init(arch, input_size, hidden_size, num_classes, cfg.dropout(), &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over steps of the batch-mean cross-entropy.
    pub ce: f64,
    /// Mean over steps of the (unscaled) adaptation distance.
    pub distance: f64,
    pub lambda: f64,
    /// Mean over steps of `CE + λ d`.
    pub loss: f64,
    pub train_accuracy: f64,
    /// `NaN` when no validation data was supplied.
    pub val_accuracy: f64,
    /// FNV digest of the epoch's shuffle order.
    pub shuffle_digest: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StreamModel,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepLoss>,
}

fn check_alignment(cfg: &AdaptationConfig, data: &MultimodalDataset) -> Result<()> {
    let paired = match cfg.level {
        AdaptationLevel::Sample => true,
        AdaptationLevel::Joint => cfg.joint_weights.sample > 0.0,
        _ => false,
    };
    if paired && data.pairing.is_none() {
        return Err(Error::Pairing(format!(
            "{} adaptation needs sample-aligned data, dataset is {}",
            cfg.level.as_str(),
            data.alignment.as_str()
        )));
    }
    let categorical = match cfg.level {
        AdaptationLevel::Category => true,
        AdaptationLevel::Joint => cfg.joint_weights.category > 0.0,
        _ => false,
    };
    if categorical {
        let aux: BTreeSet<usize> = data.auxiliary.labels().iter().copied().collect();
        if let Some(c) = data.source.labels().iter().find(|c| !aux.contains(c)) {
            return Err(Error::Pairing(format!(
                "category adaptation: class {c} has no auxiliary samples"
            )));
        }
    }
    Ok(())
}

/// Chooses the auxiliary descriptors that accompany a source batch.
struct AuxSampler<'a> {
    descriptors: &'a DescriptorBatch,
    pairing: Option<&'a [usize]>,
    by_class: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl<'a> AuxSampler<'a> {
    fn new(descriptors: &'a DescriptorBatch, data: &'a MultimodalDataset, seed: u64) -> Self {
        let mut by_class = vec![Vec::new(); data.num_classes()];
        for (i, &l) in descriptors.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        AuxSampler {
            descriptors,
            pairing: data.pairing.as_deref(),
            by_class,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, &[STREAM_AUX_SAMPLING])),
        }
    }

    fn batch_for(
        &mut self,
        level: AdaptationLevel,
        src_idx: &[usize],
        src_labels: &[usize],
    ) -> DescriptorBatch {
        match level {
            AdaptationLevel::Sample | AdaptationLevel::Joint if self.pairing.is_some() => {
                let p = self.pairing.expect("checked");
                let idx: Vec<usize> = src_idx.iter().map(|&i| p[i]).collect();
                self.descriptors.subset(&idx)
            }
            AdaptationLevel::Category | AdaptationLevel::Joint => {
                // Class-matched draws: the auxiliary histogram mirrors the source batch.
                let idx: Vec<usize> = src_labels
                    .iter()
                    .map(|&c| {
                        let pool = &self.by_class[c];
                        pool[self.rng.random_range(0..pool.len())]
                    })
                    .collect();
                self.descriptors.subset(&idx)
            }
            _ => {
                let mut pool: Vec<usize> = (0..self.descriptors.len()).collect();
                shuffle(&mut pool, &mut self.rng);
                pool.truncate(src_idx.len());
                self.descriptors.subset(&pool)
            }
        }
    }
}

fn digest(order: &[usize]) -> u64 {
    let mut h = crate::params::Fingerprint::new();
    for &i in order {
        h.write_u64(i as u64);
    }
    h.finish()
}

/// Trains a stream model on `train` with the objective `CE + λ d`.
///
/// The auxiliary encoder is only read; its checksum is verified around every
/// optimizer step.
pub fn train_stream(
    mut model: StreamModel,
    train: &MultimodalDataset,
    val: Option<&MultimodalDataset>,
    enc: Option<&AuxiliaryEncoder>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let adaptation = cfg.adaptation;
    check_alignment(&adaptation, train)?;
    if train.source.is_empty() {
        return Err(Error::EmptyInput("train_stream"));
    }
    model.dropout = cfg.dropout();

    let aux_desc = match adaptation.level {
        AdaptationLevel::None => None,
        _ => {
            let enc = enc.ok_or_else(|| {
                Error::State("adaptation requires a pretrained auxiliary encoder".into())
            })?;
            if enc.hidden_size() != model.hidden_size() {
                return Err(Error::shape(
                    "adaptation",
                    format!("auxiliary N={}", enc.hidden_size()),
                    format!("source N={}", model.hidden_size()),
                ));
            }
            Some(encode_auxiliary(&train.auxiliary, enc)?.1)
        }
    };
    let enc_checksum = enc.map(AuxiliaryEncoder::checksum);

    let mut sampler = aux_desc.as_ref().map(|d| AuxSampler::new(d, train, cfg.seed));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[STREAM_SHUFFLE]));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[STREAM_DROPOUT]));
    let mut adam = AdamState::new(&model);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.source.len()).collect();
        shuffle(&mut order, &mut shuffle_rng);
        let (mut ce, mut dist, mut loss, mut n_steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.source.subset(chunk);
            let aux = sampler
                .as_mut()
                .map(|s| s.batch_for(adaptation.level, chunk, batch.labels()));
            let (step, grads) = objective_and_gradients(
                &model,
                &batch,
                aux.as_ref(),
                &adaptation,
                Mode::Train,
                &mut drop_rng,
            )?;
            adam_step(&mut model, &grads, &mut adam, cfg)?;
            if let (Some(e), Some(sum)) = (enc, enc_checksum) {
                if e.checksum() != sum {
                    return Err(Error::InvariantViolation(
                        "auxiliary encoder changed during training".into(),
                    ));
                }
            }
            ce += step.ce;
            dist += step.distance;
            loss += step.loss;
            n_steps += 1;
            steps.push(step);
        }
        let k = n_steps as f64;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            steps: n_steps,
            ce: ce / k,
            distance: dist / k,
            lambda: adaptation.lambda,
            loss: loss / k,
            train_accuracy: evaluate(&model, &train.source)?.accuracy,
            val_accuracy: match val {
                Some(v) if !v.source.is_empty() => evaluate(&model, &v.source)?.accuracy,
                _ => f64::NAN,
            },
            shuffle_digest: digest(&order),
        });
    }
    Ok(TrainOutcome {
        model,
        epochs,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// One-vs-rest average precision per class; `NaN` for classes absent
    /// from the labels.
    pub average_precision: Vec<f64>,
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(model: &StreamModel, data: &SequenceBatch) -> Result<EvalReport> {
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward_batch(data, Mode::Eval, &mut rng)?;
    let probabilities = fwd
        .iter()
        .map(|f| softmax(&f.logits))
        .collect::<Result<Vec<_>>>()?;
    report_from_probabilities(probabilities, data.labels(), model.num_classes())
}

pub fn report_from_probabilities(
    probabilities: Vec<Vec<f64>>,
    labels: &[usize],
    num_classes: usize,
) -> Result<EvalReport> {
    if probabilities.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let average_precision = (0..num_classes)
        .map(|c| average_precision(&probabilities, labels, c))
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        average_precision,
        probabilities,
        predictions,
    })
}

/// Mean of precision@k over the ranks of the positives, ranking by the
/// class score (ties keep sample order).
pub fn average_precision(probabilities: &[Vec<f64>], labels: &[usize], class: usize) -> f64 {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| probabilities[b][class].total_cmp(&probabilities[a][class]));
    let positives = labels.iter().filter(|&&l| l == class).count();
    if positives == 0 {
        return f64::NAN;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == class {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    acc / positives as f64
}

// ---------------------------------------------------------------------------
// λ sweep

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub lambda: f64,
    pub val_accuracy: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub selected_lambda: f64,
}

impl SweepResult {
    pub fn selected(&self) -> &SweepEntry {
        self.entries
            .iter()
            .find(|e| e.lambda == self.selected_lambda)
            .expect("selected lambda comes from the entries")
    }
}

/// Trains one model per distinct λ from the same initialization and picks
/// the best validation accuracy (ties go to the smaller λ).
pub fn sweep_lambda(
    initial: &StreamModel,
    train: &MultimodalDataset,
    val: &MultimodalDataset,
    enc: Option<&AuxiliaryEncoder>,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if val.source.is_empty() {
        return Err(Error::Config("lambda sweep needs a validation split".into()));
    }
    let mut distinct: Vec<f64> = Vec::new();
    for &l in grid {
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::Config(format!("invalid lambda {l} in grid")));
        }
        if !distinct.contains(&l) {
            distinct.push(l);
        }
    }
    let mut entries = Vec::with_capacity(distinct.len());
    for lambda in distinct {
        let mut cfg = *base;
        cfg.adaptation.lambda = lambda;
        let outcome = train_stream(initial.clone(), train, Some(val), enc, &cfg)?;
        let val_accuracy = evaluate(&outcome.model, &val.source)?.accuracy;
        entries.push(SweepEntry {
            lambda,
            val_accuracy,
            outcome,
        });
    }
    let best = entries
        .iter()
        .max_by(|a, b| {
            a.val_accuracy
                .total_cmp(&b.val_accuracy)
                .then(b.lambda.total_cmp(&a.lambda))
        })
        .expect("grid is nonempty");
    let selected_lambda = best.lambda;
    Ok(SweepResult {
        entries,
        selected_lambda,
    })
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub input_dim: usize,
    pub hidden_size: usize,
    pub classes: usize,
    pub lambda: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seq_len: 4,
            batch_size: 6,
            input_dim: 5,
            hidden_size: 8,
            classes: 3,
            lambda: 1.0,
            step: 1e-5,
            seed: 2024,
        }
    }
}

/// Gradient magnitudes below this are compared absolutely: central
/// differences with a 1e-5 step carry ~1e-10 of roundoff, which swamps the
/// relative error of entries much smaller than this.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub size: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub arch: Architecture,
    pub level: AdaptationLevel,
    pub loss: f64,
    pub max_relative_error: f64,
    pub blocks: Vec<BlockError>,
}

/// The probe problem: random model, random labeled source sequences and the
/// descriptors of a random frozen auxiliary encoder.
pub struct Probe {
    pub model: StreamModel,
    pub batch: SequenceBatch,
    pub aux: DescriptorBatch,
}

pub fn build_probe(arch: Architecture, probe: &ProbeConfig) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let model = StreamModel::init(
        arch,
        probe.input_dim,
        probe.hidden_size,
        probe.classes,
        DropoutConfig::disabled(),
        &mut rng,
    )?;
    let seqs = |d: usize, rng: &mut ChaCha8Rng| -> Vec<Matrix> {
        (0..probe.batch_size)
            .map(|_| {
                let data = (0..probe.seq_len * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                Matrix::from_vec(probe.seq_len, d, data).expect("sized")
            })
            .collect()
    };
    let labels: Vec<usize> = (0..probe.batch_size).map(|i| i % probe.classes).collect();
    let batch = SequenceBatch::new(seqs(probe.input_dim, &mut rng), labels.clone(), probe.classes)?;
    let aux_dim = probe.input_dim + 1;
    let enc = AuxiliaryEncoder::frozen(LstmParams::init(aux_dim, probe.hidden_size, &mut rng));
    let aux_seqs = SequenceBatch::new(seqs(aux_dim, &mut rng), labels, probe.classes)?;
    let (_, aux) = encode_auxiliary(&aux_seqs, &enc)?;
    Ok(Probe { model, batch, aux })
}

fn probe_loss(p: &Probe, model: &StreamModel, adaptation: &AdaptationConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward_batch(&p.batch, Mode::Eval, &mut rng)?;
    let probs = fwd
        .iter()
        .map(|f| softmax(&f.logits))
        .collect::<Result<Vec<_>>>()?;
    let ce = cross_entropy(&probs, p.batch.labels())?.loss / p.batch.len() as f64;
    let d = match adaptation.level {
        AdaptationLevel::None => 0.0,
        _ => {
            let src = DescriptorBatch::new(
                fwd.iter().map(|f| f.descriptor.clone()).collect(),
                p.batch.labels().to_vec(),
                Modality::Source,
            )?;
            adaptation_distance(adaptation, &p.aux, &src)?.value
        }
    };
    total_loss(ce, d, adaptation.lambda)
}

/// Compares analytic gradients of `CE + λ d` with central differences for
/// every parameter of the probe model.
pub fn gradient_check(
    arch: Architecture,
    level: AdaptationLevel,
    probe: &ProbeConfig,
) -> Result<GradCheckReport> {
    let p = build_probe(arch, probe)?;
    let adaptation = AdaptationConfig::new(level, probe.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let aux = (level != AdaptationLevel::None).then_some(&p.aux);
    let (step, grads) =
        objective_and_gradients(&p.model, &p.batch, aux, &adaptation, Mode::Eval, &mut rng)?;

    let analytic: Vec<(String, Vec<f64>)> = grads
        .blocks()
        .into_iter()
        .map(|b| (b.name, b.values.to_vec()))
        .collect();
    let mut work = p.model.clone();
    let mut blocks = Vec::with_capacity(analytic.len());
    let h = probe.step;
    for (bi, (name, a)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..a.len() {
            let orig = work.blocks()[bi].values[k];
            work.blocks_mut()[bi].values[k] = orig + h;
            let plus = probe_loss(&p, &work, &adaptation)?;
            work.blocks_mut()[bi].values[k] = orig - h;
            let minus = probe_loss(&p, &work, &adaptation)?;
            work.blocks_mut()[bi].values[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(a[k], numeric));
        }
        blocks.push(BlockError {
            name: name.clone(),
            size: a.len(),
            max_relative_error: worst,
        });
    }
    let max_relative_error = blocks.iter().map(|b| b.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        arch,
        level,
        loss: step.loss,
        max_relative_error,
        blocks,
    })
}
