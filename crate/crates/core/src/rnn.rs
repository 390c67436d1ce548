//! Single-layer LSTM with exact backpropagation through time.
//!
//! Gate equations (no peepholes):
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)      f = σ(W_f x + U_f h + b_f)
//! o = σ(W_o x + U_o h + b_o)      g = tanh(W_g x + U_g h + b_g)
//! c' = f ⊙ c + i ⊙ g              h' = o ⊙ tanh(c')
//! ```
//!
//! The four gates are stored stacked in the order `i, f, o, g`, so `w` is
//! `4N x D_in`, `u` is `4N x N` and `b` has `4N` entries.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::params::{ParamBlock, ParamBlockMut, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Cell = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    input_size: usize,
    hidden_size: usize,
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmParams {
            input_size,
            hidden_size,
            w: Matrix::zeros(4 * hidden_size, input_size),
            u: Matrix::zeros(4 * hidden_size, hidden_size),
            b: vec![0.0; 4 * hidden_size],
        }
    }

    /// Uniform weights in `[-s, s]` with `s = 1/sqrt(input_size + hidden_size)`,
    /// forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let mut p = LstmParams::zeros(input_size, hidden_size);
        let s = 1.0 / ((input_size + hidden_size) as f64).sqrt();
        for v in p.w.as_mut_slice().iter_mut().chain(p.u.as_mut_slice()) {
            *v = rng.random_range(-s..=s);
        }
        p.gate_bias_mut(Gate::Forget).fill(1.0);
        p
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    /// `N x D_in` input weights of one gate.
    pub fn gate_input_weights(&self, gate: Gate) -> &[f64] {
        let n = self.hidden_size;
        let k = gate as usize;
        &self.w.as_slice()[k * n * self.input_size..(k + 1) * n * self.input_size]
    }

    pub fn gate_recurrent_weights(&self, gate: Gate) -> &[f64] {
        let n = self.hidden_size;
        let k = gate as usize;
        &self.u.as_slice()[k * n * n..(k + 1) * n * n]
    }

    pub fn gate_bias(&self, gate: Gate) -> &[f64] {
        let n = self.hidden_size;
        &self.b[gate as usize * n..(gate as usize + 1) * n]
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let n = self.hidden_size;
        &mut self.b[gate as usize * n..(gate as usize + 1) * n]
    }

    pub fn gate_input_weights_mut(&mut self, gate: Gate) -> &mut [f64] {
        let (n, d) = (self.hidden_size, self.input_size);
        let k = gate as usize;
        &mut self.w.as_mut_slice()[k * n * d..(k + 1) * n * d]
    }

    pub fn gate_recurrent_weights_mut(&mut self, gate: Gate) -> &mut [f64] {
        let n = self.hidden_size;
        let k = gate as usize;
        &mut self.u.as_mut_slice()[k * n * n..(k + 1) * n * n]
    }

    pub(crate) fn prefixed_blocks<'a>(&'a self, prefix: &str) -> Vec<ParamBlock<'a>> {
        vec![
            ParamBlock {
                name: format!("{prefix}.w"),
                shape: self.w.shape(),
                values: self.w.as_slice(),
            },
            ParamBlock {
                name: format!("{prefix}.u"),
                shape: self.u.shape(),
                values: self.u.as_slice(),
            },
            ParamBlock {
                name: format!("{prefix}.b"),
                shape: (self.b.len(), 1),
                values: &self.b,
            },
        ]
    }

    pub(crate) fn prefixed_blocks_mut<'a>(&'a mut self, prefix: &str) -> Vec<ParamBlockMut<'a>> {
        let (w_shape, u_shape, b_len) = (self.w.shape(), self.u.shape(), self.b.len());
        vec![
            ParamBlockMut {
                name: format!("{prefix}.w"),
                shape: w_shape,
                values: self.w.as_mut_slice(),
            },
            ParamBlockMut {
                name: format!("{prefix}.u"),
                shape: u_shape,
                values: self.u.as_mut_slice(),
            },
            ParamBlockMut {
                name: format!("{prefix}.b"),
                shape: (b_len, 1),
                values: &mut self.b,
            },
        ]
    }
}

impl Parameters for LstmParams {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        self.prefixed_blocks("lstm")
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        self.prefixed_blocks_mut("lstm")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden_size],
            c: vec![0.0; hidden_size],
        }
    }
}

/// Everything one forward step keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-activation gates stacked as `i, f, o, g`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TapeCache {
    pub steps: Vec<StepCache>,
    params_checksum: u64,
}

impl TapeCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Labeled batch of equal-length feature sequences, each stored `T x D_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    features: Vec<Matrix>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl SequenceBatch {
    pub fn new(features: Vec<Matrix>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape(
                "SequenceBatch::new",
                format!("{} sequences", features.len()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(first) = features.first() {
            for f in &features[1..] {
                if f.shape() != first.shape() {
                    return Err(Error::shape(
                        "SequenceBatch::new",
                        format!("{:?}", first.shape()),
                        format!("{:?}", f.shape()),
                    ));
                }
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(SequenceBatch {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.features.first().map_or(0, Matrix::rows)
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Matrix::cols)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[Matrix] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sequence(&self, i: usize) -> &Matrix {
        &self.features[i]
    }

    pub fn subset(&self, indices: &[usize]) -> SequenceBatch {
        SequenceBatch {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_state(p: &LstmParams, prev: &LstmState) -> Result<()> {
    let n = p.hidden_size;
    if prev.h.len() != n || prev.c.len() != n {
        return Err(Error::shape(
            "lstm state",
            format!("N={n}"),
            format!("h={}, c={}", prev.h.len(), prev.c.len()),
        ));
    }
    Ok(())
}

fn cell_step(x: &[f64], prev_h: &[f64], prev_c: &[f64], p: &LstmParams) -> StepCache {
    let n = p.hidden_size;
    let mut pre = p.b.clone();
    linalg::gemv_acc(&mut pre, p.w.as_slice(), x);
    linalg::gemv_acc(&mut pre, p.u.as_slice(), prev_h);
    for v in &mut pre[..3 * n] {
        *v = sigmoid(*v);
    }
    for v in &mut pre[3 * n..] {
        *v = v.tanh();
    }
    let gates = pre;
    let mut c = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    for j in 0..n {
        c[j] = gates[n + j] * prev_c[j] + gates[j] * gates[3 * n + j];
        tanh_c[j] = c[j].tanh();
    }
    StepCache {
        x: x.to_vec(),
        h_prev: prev_h.to_vec(),
        c_prev: prev_c.to_vec(),
        gates,
        c,
        tanh_c,
    }
}

impl StepCache {
    fn hidden(&self) -> Vec<f64> {
        let n = self.c.len();
        (0..n).map(|j| self.gates[2 * n + j] * self.tanh_c[j]).collect()
    }
}

pub fn lstm_cell_forward(
    x: &[f64],
    prev: &LstmState,
    p: &LstmParams,
) -> Result<(LstmState, StepCache)> {
    if x.len() != p.input_size {
        return Err(Error::shape("lstm_cell_forward", p.input_size, x.len()));
    }
    check_state(p, prev)?;
    let step = cell_step(x, &prev.h, &prev.c, p);
    let state = LstmState {
        h: step.hidden(),
        c: step.c.clone(),
    };
    Ok((state, step))
}

/// Runs the layer over a `T x D_in` sequence; row `t` of the result is the
/// hidden state after consuming inputs `0..=t`.
pub fn lstm_sequence_forward(
    seq: &Matrix,
    p: &LstmParams,
    initial: Option<&LstmState>,
) -> Result<(Matrix, TapeCache)> {
    if seq.rows() == 0 {
        return Err(Error::EmptyInput("lstm_sequence_forward"));
    }
    if seq.cols() != p.input_size {
        return Err(Error::shape(
            "lstm_sequence_forward",
            format!("D_in={}", p.input_size),
            format!("{}x{} sequence", seq.rows(), seq.cols()),
        ));
    }
    let n = p.hidden_size;
    let zero;
    let init = match initial {
        Some(s) => {
            check_state(p, s)?;
            s
        }
        None => {
            zero = LstmState::zeros(n);
            &zero
        }
    };
    let mut hidden = Matrix::zeros(seq.rows(), n);
    let mut steps = Vec::with_capacity(seq.rows());
    let mut h = init.h.clone();
    let mut c = init.c.clone();
    for (t, x) in seq.iter_rows().enumerate() {
        let step = cell_step(x, &h, &c, p);
        h = step.hidden();
        c.copy_from_slice(&step.c);
        hidden.row_mut(t).copy_from_slice(&h);
        steps.push(step);
    }
    Ok((
        hidden,
        TapeCache {
            steps,
            params_checksum: p.checksum(),
        },
    ))
}

/// Reverse-mode pass through a cached sequence. Parameter gradients are
/// added into `grads`; the returned `T x D_in` matrix holds input gradients.
pub fn lstm_backward_into(
    upstream: &Matrix,
    cache: &TapeCache,
    p: &LstmParams,
    grads: &mut LstmParams,
) -> Result<Matrix> {
    if cache.params_checksum != p.checksum() {
        return Err(Error::StaleCache);
    }
    let n = p.hidden_size;
    let d = p.input_size;
    if upstream.shape() != (cache.len(), n) {
        return Err(Error::shape(
            "lstm_backward",
            format!("{}x{}", cache.len(), n),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    if grads.hidden_size != n || grads.input_size != d {
        return Err(Error::shape(
            "lstm_backward gradient buffer",
            format!("{d}->{n}"),
            format!("{}->{}", grads.input_size, grads.hidden_size),
        ));
    }

    let mut dx = Matrix::zeros(cache.len(), d);
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut dz = vec![0.0; 4 * n];
    for t in (0..cache.len()).rev() {
        let s = &cache.steps[t];
        let up = upstream.row(t);
        for j in 0..n {
            let (ig, fg, og, gg) = (
                s.gates[j],
                s.gates[n + j],
                s.gates[2 * n + j],
                s.gates[3 * n + j],
            );
            let dh = up[j] + dh_next[j];
            let tc = s.tanh_c[j];
            let dc = dc_next[j] + dh * og * (1.0 - tc * tc);
            dz[j] = dc * gg * ig * (1.0 - ig);
            dz[n + j] = dc * s.c_prev[j] * fg * (1.0 - fg);
            dz[2 * n + j] = dh * tc * og * (1.0 - og);
            dz[3 * n + j] = dc * ig * (1.0 - gg * gg);
            dc_next[j] = dc * fg;
        }
        linalg::outer_acc(grads.w.as_mut_slice(), &dz, &s.x);
        linalg::outer_acc(grads.u.as_mut_slice(), &dz, &s.h_prev);
        linalg::add_assign(&mut grads.b, &dz);
        linalg::gemv_t_acc(dx.row_mut(t), p.w.as_slice(), &dz);
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        linalg::gemv_t_acc(&mut dh_next, p.u.as_slice(), &dz);
    }
    Ok(dx)
}

/// Gradients of a scalar loss whose derivative with respect to the hidden
/// sequence is `upstream`.
pub fn lstm_backward(
    upstream: &Matrix,
    cache: &TapeCache,
    p: &LstmParams,
) -> Result<(LstmParams, Matrix)> {
    let mut grads = LstmParams::zeros(p.input_size, p.hidden_size);
    let dx = lstm_backward_into(upstream, cache, p, &mut grads)?;
    Ok((grads, dx))
}

/// Per-entry multipliers: `0` for dropped units, `1/(1-rate)` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn keep_all(len: usize) -> Self {
        DropoutMask(vec![1.0; len])
    }

    pub fn apply(&self, v: &mut [f64]) {
        for (x, m) in v.iter_mut().zip(&self.0) {
            *x *= m;
        }
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. Inference (or a zero rate) is the identity.
pub fn dropout_forward<R: Rng + ?Sized>(
    h: &[f64],
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Vec<f64>, DropoutMask)> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok((h.to_vec(), DropoutMask::keep_all(h.len())));
    }
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..h.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let out = h.iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((out, DropoutMask(mask)))
}
