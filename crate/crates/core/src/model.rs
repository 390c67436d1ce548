//! Stream networks, the classifier head, the frozen auxiliary encoder and the
//! probability-level helpers (softmax, cross-entropy, score fusion).
//!
//! Both stream architectures have the same parameter layout: a first LSTM on
//! the input features, a second LSTM, a linear `N x N` layer and the head.
//!
//! * Residual (`Res-LSTM`): `z = lstm1(x)`, `R = lstm2(z)`, `H = fc(R) + z`.
//! * Vanilla (`V-LSTM`): `z = lstm1(x)`, `R = lstm2(z)`, `H = fc(R)`.
//!
//! In both cases the adaptation descriptor is the temporal mean of `R`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{DescriptorBatch, Modality};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::params::{ParamBlock, ParamBlockMut, Parameters};
use crate::rnn::{
    check_dropout_rate, dropout_forward, lstm_backward_into, lstm_sequence_forward, DropoutMask,
    LstmParams, SequenceBatch, TapeCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Residual adaptation block: skip connection around `lstm2 -> fc`.
    ResLstm,
    /// Plain stack with adaptation after the second LSTM layer.
    VLstm,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::ResLstm => "res_lstm",
            Architecture::VLstm => "v_lstm",
        }
    }

    fn block_prefixes(self) -> [&'static str; 3] {
        match self {
            Architecture::ResLstm => ["main_lstm", "res_lstm", "res_fc"],
            Architecture::VLstm => ["lstm1", "lstm2", "fc"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub rate: f64,
    /// Also drop the second LSTM's outputs before the FC layer.
    #[serde(default = "default_true")]
    pub residual_path: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            rate: 0.5,
            residual_path: true,
        }
    }
}

impl DropoutConfig {
    pub fn disabled() -> Self {
        DropoutConfig {
            rate: 0.0,
            residual_path: true,
        }
    }
}

/// `g = W_g · mean_t(h_t) + b_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(hidden_size: usize, num_classes: usize) -> Self {
        ClassifierHead {
            w: Matrix::zeros(num_classes, hidden_size),
            b: vec![0.0; num_classes],
        }
    }

    pub fn init<R: Rng + ?Sized>(hidden_size: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut head = ClassifierHead::zeros(hidden_size, num_classes);
        let s = 1.0 / (hidden_size as f64).sqrt();
        for v in head.w.as_mut_slice() {
            *v = rng.random_range(-s..=s);
        }
        head
    }

    pub fn num_classes(&self) -> usize {
        self.b.len()
    }

    fn logits_from_mean(&self, mean: &[f64]) -> Vec<f64> {
        let mut g = self.b.clone();
        linalg::gemv_acc(&mut g, self.w.as_slice(), mean);
        g
    }

    fn push_blocks<'a>(&'a self, out: &mut Vec<ParamBlock<'a>>) {
        out.push(ParamBlock {
            name: "head.w".into(),
            shape: self.w.shape(),
            values: self.w.as_slice(),
        });
        out.push(ParamBlock {
            name: "head.b".into(),
            shape: (self.b.len(), 1),
            values: &self.b,
        });
    }

    fn push_blocks_mut<'a>(&'a mut self, out: &mut Vec<ParamBlockMut<'a>>) {
        let shape = self.w.shape();
        out.push(ParamBlockMut {
            name: "head.w".into(),
            shape,
            values: self.w.as_mut_slice(),
        });
        let len = self.b.len();
        out.push(ParamBlockMut {
            name: "head.b".into(),
            shape: (len, 1),
            values: &mut self.b,
        });
    }
}

impl Parameters for ClassifierHead {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        self.push_blocks(&mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = Vec::new();
        self.push_blocks_mut(&mut out);
        out
    }
}

/// Logits from a hidden sequence: the head applied to its temporal mean.
pub fn classify(hidden: &Matrix, head: &ClassifierHead) -> Result<Vec<f64>> {
    if hidden.cols() != head.w.cols() {
        return Err(Error::shape(
            "classify",
            format!("N={}", head.w.cols()),
            format!("{}x{} hidden", hidden.rows(), hidden.cols()),
        ));
    }
    let mean = linalg::reduce_mean_rows(hidden).map_err(|_| Error::EmptyInput("classify"))?;
    Ok(head.logits_from_mean(&mean))
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Lowest index wins on exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// Sum over the batch of `-ln p(true class)`.
    pub loss: f64,
    /// Rows whose true-class probability had to be clamped to `PROB_FLOOR`.
    pub clamped: usize,
}

pub fn cross_entropy<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<CrossEntropy> {
    if probs.len() != labels.len() {
        return Err(Error::shape("cross_entropy", probs.len(), labels.len()));
    }
    let mut out = CrossEntropy {
        loss: 0.0,
        clamped: 0,
    };
    for (p, &l) in probs.iter().zip(labels) {
        let p = p.as_ref();
        let pt = *p
            .get(l)
            .ok_or_else(|| Error::Config(format!("label {l} out of range for {} classes", p.len())))?;
        if pt < PROB_FLOOR {
            out.clamped += 1;
        }
        out.loss -= pt.max(PROB_FLOOR).ln();
    }
    Ok(out)
}

/// Convex combination of per-stream class probabilities.
pub fn score_fusion<P: AsRef<[f64]>>(streams: &[P], weights: &[f64]) -> Result<Vec<f64>> {
    if streams.is_empty() {
        return Err(Error::EmptyInput("score_fusion"));
    }
    if streams.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} streams but {} fusion weights",
            streams.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Config(format!("negative fusion weight in {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("fusion weights sum to {sum}, not 1")));
    }
    let c = streams[0].as_ref().len();
    let mut fused = vec![0.0; c];
    for (p, &w) in streams.iter().zip(weights) {
        let p = p.as_ref();
        if p.len() != c {
            return Err(Error::shape("score_fusion", c, p.len()));
        }
        linalg::axpy(&mut fused, w, p);
    }
    Ok(fused)
}

/// Stream network shared by both architectures; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamModel {
    pub arch: Architecture,
    pub first: LstmParams,
    pub second: LstmParams,
    pub fc_w: Matrix,
    pub fc_b: Vec<f64>,
    pub head: ClassifierHead,
    pub dropout: DropoutConfig,
}

/// Per-sample activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleCache {
    first_tape: TapeCache,
    second_tape: TapeCache,
    z_masks: Vec<DropoutMask>,
    r_masks: Vec<DropoutMask>,
    /// FC inputs (post-dropout `R`).
    fc_in: Matrix,
    h_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleForward {
    /// Final hidden sequence fed to the head.
    pub hidden: Matrix,
    /// Second-LSTM hidden sequence (pre-dropout); the adaptation operand.
    pub residual: Matrix,
    pub descriptor: Vec<f64>,
    pub logits: Vec<f64>,
    pub cache: SampleCache,
}

impl StreamModel {
    pub fn zeros(
        arch: Architecture,
        input_size: usize,
        hidden_size: usize,
        num_classes: usize,
        dropout: DropoutConfig,
    ) -> Self {
        StreamModel {
            arch,
            first: LstmParams::zeros(input_size, hidden_size),
            second: LstmParams::zeros(hidden_size, hidden_size),
            fc_w: Matrix::zeros(hidden_size, hidden_size),
            fc_b: vec![0.0; hidden_size],
            head: ClassifierHead::zeros(hidden_size, num_classes),
            dropout,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        arch: Architecture,
        input_size: usize,
        hidden_size: usize,
        num_classes: usize,
        dropout: DropoutConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_dropout_rate(dropout.rate)?;
        if input_size == 0 || hidden_size == 0 || num_classes == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive, got D_in={input_size} N={hidden_size} C={num_classes}"
            )));
        }
        let first = LstmParams::init(input_size, hidden_size, rng);
        let second = LstmParams::init(hidden_size, hidden_size, rng);
        let mut fc_w = Matrix::zeros(hidden_size, hidden_size);
        let s = 1.0 / (hidden_size as f64).sqrt();
        for v in fc_w.as_mut_slice() {
            *v = rng.random_range(-s..=s);
        }
        let head = ClassifierHead::init(hidden_size, num_classes, rng);
        Ok(StreamModel {
            arch,
            first,
            second,
            fc_w,
            fc_b: vec![0.0; hidden_size],
            head,
            dropout,
        })
    }

    /// A zero-valued copy used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        StreamModel::zeros(
            self.arch,
            self.input_size(),
            self.hidden_size(),
            self.num_classes(),
            self.dropout,
        )
    }

    pub fn input_size(&self) -> usize {
        self.first.input_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.first.hidden_size()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Clears the residual path (second LSTM and FC) so that `H = z`.
    pub fn zero_residual_path(&mut self) {
        self.second.set_zero();
        self.fc_w.fill(0.0);
        self.fc_b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<SampleForward> {
        let n = self.hidden_size();
        let training = mode == Mode::Train;
        let rate = self.dropout.rate;
        let (z, first_tape) = lstm_sequence_forward(x, &self.first, None)?;
        let t_len = z.rows();

        let mut z_drop = Matrix::zeros(t_len, n);
        let mut z_masks = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (v, m) = dropout_forward(z.row(t), rate, rng, training)?;
            z_drop.row_mut(t).copy_from_slice(&v);
            z_masks.push(m);
        }

        let (r, second_tape) = lstm_sequence_forward(&z_drop, &self.second, None)?;
        if r.cols() != z_drop.cols() {
            return Err(Error::shape("residual skip", z_drop.cols(), r.cols()));
        }

        let drop_r = self.arch == Architecture::VLstm || self.dropout.residual_path;
        let mut fc_in = Matrix::zeros(t_len, n);
        let mut r_masks = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (v, m) = dropout_forward(r.row(t), rate, rng, training && drop_r)?;
            fc_in.row_mut(t).copy_from_slice(&v);
            r_masks.push(m);
        }

        let mut hidden = Matrix::zeros(t_len, n);
        for t in 0..t_len {
            let row = hidden.row_mut(t);
            row.copy_from_slice(&self.fc_b);
            linalg::gemv_acc(row, self.fc_w.as_slice(), fc_in.row(t));
            if self.arch == Architecture::ResLstm {
                linalg::add_assign(row, z_drop.row(t));
            }
        }

        let h_mean = linalg::reduce_mean_rows(&hidden)?;
        let logits = self.head.logits_from_mean(&h_mean);
        let descriptor = linalg::reduce_mean_rows(&r)?;
        Ok(SampleForward {
            hidden,
            residual: r,
            descriptor,
            logits,
            cache: SampleCache {
                first_tape,
                second_tape,
                z_masks,
                r_masks,
                fc_in,
                h_mean,
            },
        })
    }

    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        batch: &SequenceBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<SampleForward>> {
        if batch.input_dim() != self.input_size() {
            return Err(Error::shape(
                "stream forward",
                format!("D_in={}", self.input_size()),
                format!("D_in={}", batch.input_dim()),
            ));
        }
        batch
            .features()
            .iter()
            .map(|x| self.forward_sample(x, mode, rng))
            .collect()
    }

    /// Accumulates into `grads` the gradient of a loss whose partials are
    /// `d_logits` (w.r.t. the logits) and `d_descriptor` (w.r.t. the
    /// temporal mean of `R`).
    pub fn backward_sample(
        &self,
        fwd: &SampleForward,
        d_logits: &[f64],
        d_descriptor: Option<&[f64]>,
        grads: &mut StreamModel,
    ) -> Result<()> {
        let n = self.hidden_size();
        let cache = &fwd.cache;
        let t_len = fwd.hidden.rows();
        if d_logits.len() != self.num_classes() {
            return Err(Error::shape("backward d_logits", self.num_classes(), d_logits.len()));
        }

        linalg::outer_acc(grads.head.w.as_mut_slice(), d_logits, &cache.h_mean);
        linalg::add_assign(&mut grads.head.b, d_logits);
        let mut d_mean = vec![0.0; n];
        linalg::gemv_t_acc(&mut d_mean, self.head.w.as_slice(), d_logits);
        let inv_t = 1.0 / t_len as f64;
        let d_h: Vec<f64> = d_mean.iter().map(|v| v * inv_t).collect();

        let d_desc: Option<Vec<f64>> = match d_descriptor {
            Some(d) if d.len() != n => {
                return Err(Error::shape("backward d_descriptor", n, d.len()));
            }
            Some(d) => Some(d.iter().map(|v| v * inv_t).collect()),
            None => None,
        };

        // Every timestep receives the same dL/dH_t from the mean pooling.
        let mut d_r = Matrix::zeros(t_len, n);
        for t in 0..t_len {
            linalg::outer_acc(grads.fc_w.as_mut_slice(), &d_h, cache.fc_in.row(t));
            linalg::add_assign(&mut grads.fc_b, &d_h);
            let row = d_r.row_mut(t);
            linalg::gemv_t_acc(row, self.fc_w.as_slice(), &d_h);
            cache.r_masks[t].apply(row);
            if let Some(dd) = &d_desc {
                linalg::add_assign(row, dd);
            }
        }

        let mut d_z = lstm_backward_into(&d_r, &cache.second_tape, &self.second, &mut grads.second)?;
        for t in 0..t_len {
            let row = d_z.row_mut(t);
            if self.arch == Architecture::ResLstm {
                linalg::add_assign(row, &d_h);
            }
            cache.z_masks[t].apply(row);
        }
        lstm_backward_into(&d_z, &cache.first_tape, &self.first, &mut grads.first)?;
        Ok(())
    }
}

impl Parameters for StreamModel {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let [p1, p2, p3] = self.arch.block_prefixes();
        let mut out = self.first.prefixed_blocks(p1);
        out.extend(self.second.prefixed_blocks(p2));
        out.push(ParamBlock {
            name: format!("{p3}.w"),
            shape: self.fc_w.shape(),
            values: self.fc_w.as_slice(),
        });
        out.push(ParamBlock {
            name: format!("{p3}.b"),
            shape: (self.fc_b.len(), 1),
            values: &self.fc_b,
        });
        self.head.push_blocks(&mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let [p1, p2, p3] = self.arch.block_prefixes();
        let mut out = self.first.prefixed_blocks_mut(p1);
        out.extend(self.second.prefixed_blocks_mut(p2));
        let shape = self.fc_w.shape();
        out.push(ParamBlockMut {
            name: format!("{p3}.w"),
            shape,
            values: self.fc_w.as_mut_slice(),
        });
        let len = self.fc_b.len();
        out.push(ParamBlockMut {
            name: format!("{p3}.b"),
            shape: (len, 1),
            values: &mut self.fc_b,
        });
        self.head.push_blocks_mut(&mut out);
        out
    }
}

/// Forward pass of a Res-LSTM stream over a batch.
pub fn res_forward<R: Rng + ?Sized>(
    v: &SequenceBatch,
    m: &StreamModel,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<SampleForward>> {
    if m.arch != Architecture::ResLstm {
        return Err(Error::State("res_forward called on a V-LSTM model".into()));
    }
    m.forward_batch(v, mode, rng)
}

/// Forward pass of a V-LSTM stream over a batch.
pub fn v_forward<R: Rng + ?Sized>(
    v: &SequenceBatch,
    m: &StreamModel,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<SampleForward>> {
    if m.arch != Architecture::VLstm {
        return Err(Error::State("v_forward called on a Res-LSTM model".into()));
    }
    m.forward_batch(v, mode, rng)
}

/// Collects the source descriptors of a forward batch.
pub fn source_descriptors(fwd: &[SampleForward], labels: &[usize]) -> Result<DescriptorBatch> {
    DescriptorBatch::new(
        fwd.iter().map(|f| f.descriptor.clone()).collect(),
        labels.to_vec(),
        Modality::Source,
    )
}

/// One-layer LSTM over the auxiliary modality. Once frozen its parameters
/// can no longer be borrowed mutably.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryEncoder {
    lstm: LstmParams,
    frozen: bool,
}

impl AuxiliaryEncoder {
    pub fn new(lstm: LstmParams) -> Self {
        AuxiliaryEncoder {
            lstm,
            frozen: false,
        }
    }

    pub fn frozen(lstm: LstmParams) -> Self {
        AuxiliaryEncoder { lstm, frozen: true }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn lstm(&self) -> &LstmParams {
        &self.lstm
    }

    pub fn lstm_mut(&mut self) -> Result<&mut LstmParams> {
        if self.frozen {
            return Err(Error::State("auxiliary encoder is frozen".into()));
        }
        Ok(&mut self.lstm)
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.lstm.input_size()
    }

    pub fn checksum(&self) -> u64 {
        self.lstm.checksum()
    }
}

/// Encodes auxiliary sequences with the frozen encoder, returning the
/// hidden sequences and their temporal-mean descriptors.
pub fn encode_auxiliary(
    s: &SequenceBatch,
    enc: &AuxiliaryEncoder,
) -> Result<(Vec<Matrix>, DescriptorBatch)> {
    if !enc.is_frozen() {
        return Err(Error::State(
            "auxiliary encoder must be frozen before it feeds adaptation".into(),
        ));
    }
    if s.input_dim() != enc.input_size() {
        return Err(Error::shape(
            "encode_auxiliary",
            format!("D_aux={}", enc.input_size()),
            format!("D_aux={}", s.input_dim()),
        ));
    }
    let mut hidden = Vec::with_capacity(s.len());
    let mut descriptors = Vec::with_capacity(s.len());
    for x in s.features() {
        let (h, _) = lstm_sequence_forward(x, enc.lstm(), None)?;
        descriptors.push(linalg::reduce_mean_rows(&h)?);
        hidden.push(h);
    }
    let batch = DescriptorBatch::new(descriptors, s.labels().to_vec(), Modality::Auxiliary)?;
    Ok((hidden, batch))
}
