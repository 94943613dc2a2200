//! Recurrent cells with segment-scoped forward passes and exact backward
//! passes.
//!
//! All cells use the batch-major row convention: a state is a
//! `batch x hidden` matrix and each gate computes
//! `x · W_inputᵀ + h · W_recurrentᵀ + b`. Weight matrices are stored
//! `out x in`.
//!
//! Gate layouts (σ is the logistic sigmoid):
//!
//! * `VanillaRnn`: `h' = tanh(pre)`; `Irnn`: `h' = relu(pre)`.
//! * `Gru` gates `[reset, update, candidate]`:
//!   `r = σ(..)`, `z = σ(..)`, `n = tanh(x·Wnᵀ + (r ⊙ h)·Unᵀ + bn)`,
//!   `h' = (1 - z) ⊙ n + z ⊙ h`.
//! * `Lstm` gates `[input, forget, cell, output]`:
//!   `i, f, o = σ(..)`, `g = tanh(..)`, `c' = f ⊙ c + i ⊙ g`,
//!   `h' = o ⊙ tanh(c')`.
//!
//! The backward pass returns the gradient with respect to the segment's
//! initial state alongside the parameter gradients; that state gradient is
//! what a downstream client hands back upstream.

mod backward;
mod checkpoint;
mod forward;
pub mod gradcheck;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{sigmoid_binary_cross_entropy, softmax_cross_entropy, Activation, Matrix};

pub use backward::backward_segment;
pub use checkpoint::{decode_named_buffers, encode_named_buffers};
pub use forward::{forward_segment, output_forward, SegmentTape};

/// Mixed into the init seed for the output head so that gate weights drawn
/// from a seed do not depend on whether a head is present.
const HEAD_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    VanillaRnn,
    Irnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [
        CellKind::VanillaRnn,
        CellKind::Irnn,
        CellKind::Gru,
        CellKind::Lstm,
    ];

    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::VanillaRnn | CellKind::Irnn => &["cell"],
            CellKind::Gru => &["reset", "update", "candidate"],
            CellKind::Lstm => &["input", "forget", "cell", "output"],
        }
    }

    pub fn gate_count(self) -> usize {
        self.gate_names().len()
    }

    pub fn has_cell_state(self) -> bool {
        self == CellKind::Lstm
    }

    /// Activation of the plain recurrent cells.
    pub(crate) fn rnn_activation(self) -> Activation {
        match self {
            CellKind::Irnn => Activation::Relu,
            _ => Activation::Tanh,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::VanillaRnn => "rnn",
            CellKind::Irnn => "irnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" | "vanilla" => Ok(CellKind::VanillaRnn),
            "irnn" => Ok(CellKind::Irnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellDims {
    pub input: usize,
    pub hidden: usize,
    /// Width of the output head; 1 selects a single-logit binary head.
    pub output: usize,
}

/// One gate's weights: `w_input` is `hidden x input`, `w_recurrent` is
/// `hidden x hidden`, `bias` is `1 x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub w_input: Matrix,
    pub w_recurrent: Matrix,
    pub bias: Matrix,
}

impl Gate {
    fn zeros(input: usize, hidden: usize) -> Self {
        Gate {
            w_input: Matrix::zeros(hidden, input),
            w_recurrent: Matrix::zeros(hidden, hidden),
            bias: Matrix::zeros(1, hidden),
        }
    }
}

/// Fully-connected output layer, `weight` is `output x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Parameters of one split sub-network. Only the sub-network at the last
/// segment position carries an output head.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetworkParams {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub gates: Vec<Gate>,
    pub head: Option<OutputHead>,
}

/// Gradient buffers laid out exactly like [`SubNetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub gates: Vec<Gate>,
    pub head: Option<OutputHead>,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

/// Initializes the sub-network for segment `position` (1-based) of
/// `total_segments`. Weights are uniform in `±1/sqrt(fan_in)`, biases zero;
/// IRNN recurrent matrices start at the identity.
pub fn init_params(
    kind: CellKind,
    dims: CellDims,
    seed: u64,
    position: usize,
    total_segments: usize,
) -> Result<SubNetworkParams> {
    if dims.input == 0 || dims.hidden == 0 || dims.output == 0 {
        return Err(Error::Config(format!(
            "dimensions must be positive: {dims:?}"
        )));
    }
    if position == 0 || position > total_segments {
        return Err(Error::Config(format!(
            "segment position {position} outside 1..={total_segments}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_bound = 1.0 / (dims.input as f64).sqrt();
    let rec_bound = 1.0 / (dims.hidden as f64).sqrt();
    let gates = (0..kind.gate_count())
        .map(|_| {
            let w_input = uniform(dims.hidden, dims.input, in_bound, &mut rng);
            let w_recurrent = if kind == CellKind::Irnn {
                Matrix::identity(dims.hidden)
            } else {
                uniform(dims.hidden, dims.hidden, rec_bound, &mut rng)
            };
            Gate {
                w_input,
                w_recurrent,
                bias: Matrix::zeros(1, dims.hidden),
            }
        })
        .collect();
    let head = (position == total_segments).then(|| {
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_STREAM);
        OutputHead {
            weight: uniform(dims.output, dims.hidden, rec_bound, &mut head_rng),
            bias: Matrix::zeros(1, dims.output),
        }
    });
    Ok(SubNetworkParams {
        kind,
        input_dim: dims.input,
        hidden_dim: dims.hidden,
        gates,
        head,
    })
}

fn buffer_names(kind: CellKind, has_head: bool) -> Vec<String> {
    let mut names = Vec::new();
    for gate in kind.gate_names() {
        for part in ["w_input", "w_recurrent", "bias"] {
            names.push(format!("{}.{}.{}", kind.name(), gate, part));
        }
    }
    if has_head {
        names.push("head.weight".to_string());
        names.push("head.bias".to_string());
    }
    names
}

fn collect_buffers<'a>(gates: &'a [Gate], head: Option<&'a OutputHead>) -> Vec<&'a Matrix> {
    let mut out: Vec<&Matrix> = gates
        .iter()
        .flat_map(|g| [&g.w_input, &g.w_recurrent, &g.bias])
        .collect();
    if let Some(h) = head {
        out.push(&h.weight);
        out.push(&h.bias);
    }
    out
}

fn collect_buffers_mut<'a>(
    gates: &'a mut [Gate],
    head: Option<&'a mut OutputHead>,
) -> Vec<&'a mut Matrix> {
    let mut out: Vec<&mut Matrix> = gates
        .iter_mut()
        .flat_map(|g| [&mut g.w_input, &mut g.w_recurrent, &mut g.bias])
        .collect();
    if let Some(h) = head {
        out.push(&mut h.weight);
        out.push(&mut h.bias);
    }
    out
}

impl SubNetworkParams {
    pub fn dims(&self) -> CellDims {
        CellDims {
            input: self.input_dim,
            hidden: self.hidden_dim,
            output: self.output_dim().unwrap_or(0),
        }
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.weight.rows())
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Buffers in canonical order: per gate `w_input, w_recurrent, bias`,
    /// then `head.weight, head.bias`.
    pub fn buffers(&self) -> Vec<&Matrix> {
        collect_buffers(&self.gates, self.head.as_ref())
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        collect_buffers_mut(&mut self.gates, self.head.as_mut())
    }

    pub fn buffer_names(&self) -> Vec<String> {
        buffer_names(self.kind, self.has_head())
    }

    pub fn named_buffers(&self) -> Vec<(String, &Matrix)> {
        self.buffer_names()
            .into_iter()
            .zip(self.buffers())
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.buffers().iter().map(|m| m.data().len()).sum()
    }

    /// True when both parameter sets have the same kind, dims and buffer
    /// shapes.
    pub fn congruent(&self, other: &SubNetworkParams) -> bool {
        self.kind == other.kind
            && self.input_dim == other.input_dim
            && self.hidden_dim == other.hidden_dim
            && self.has_head() == other.has_head()
            && self
                .buffers()
                .iter()
                .zip(other.buffers())
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|m| m.is_finite())
    }

    /// Same layout with a fresh set of values; used to build random test
    /// instances.
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> SubNetworkParams {
        let mut out = self.clone();
        for buf in out.buffers_mut() {
            for v in buf.data_mut() {
                *v = f(*v);
            }
        }
        out
    }

    /// Serializes to the named-buffer checkpoint format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.named_buffers();
        let refs: Vec<(&str, &Matrix)> = named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        encode_named_buffers(&refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SubNetworkParams> {
        let buffers = decode_named_buffers(bytes)?;
        let prefix = buffers
            .first()
            .and_then(|(name, _)| name.split('.').next())
            .ok_or_else(|| Error::Format("checkpoint holds no buffers".into()))?;
        let kind: CellKind = prefix
            .parse()
            .map_err(|_| Error::Format(format!("unknown cell prefix `{prefix}`")))?;
        let gate_buffers = kind.gate_count() * 3;
        let has_head = match buffers.len() {
            n if n == gate_buffers => false,
            n if n == gate_buffers + 2 => true,
            n => {
                return Err(Error::Format(format!(
                    "{n} buffers do not match a {kind} sub-network"
                )))
            }
        };
        let expected = buffer_names(kind, has_head);
        for ((name, _), want) in buffers.iter().zip(&expected) {
            if name != want {
                return Err(Error::Format(format!(
                    "expected buffer `{want}`, found `{name}`"
                )));
            }
        }
        let (hidden_dim, input_dim) = buffers[0].1.shape();
        let mut iter = buffers.into_iter().map(|(_, m)| m);
        let gates: Vec<Gate> = (0..kind.gate_count())
            .map(|_| Gate {
                w_input: iter.next().expect("counted"),
                w_recurrent: iter.next().expect("counted"),
                bias: iter.next().expect("counted"),
            })
            .collect();
        let head = has_head.then(|| OutputHead {
            weight: iter.next().expect("counted"),
            bias: iter.next().expect("counted"),
        });
        let params = SubNetworkParams {
            kind,
            input_dim,
            hidden_dim,
            gates,
            head,
        };
        let template = ParamGrads::zeros_like(&params);
        let shapes_ok = params
            .buffers()
            .iter()
            .zip(template.buffers())
            .all(|(a, b)| a.same_shape(b));
        if !shapes_ok {
            return Err(Error::Format(
                "inconsistent buffer shapes in checkpoint".into(),
            ));
        }
        Ok(params)
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &SubNetworkParams) -> Self {
        ParamGrads {
            gates: (0..params.kind.gate_count())
                .map(|_| Gate::zeros(params.input_dim, params.hidden_dim))
                .collect(),
            head: params.head.as_ref().map(|h| OutputHead {
                weight: Matrix::zeros(h.weight.rows(), h.weight.cols()),
                bias: Matrix::zeros(1, h.bias.cols()),
            }),
        }
    }

    pub fn buffers(&self) -> Vec<&Matrix> {
        collect_buffers(&self.gates, self.head.as_ref())
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Matrix> {
        collect_buffers_mut(&mut self.gates, self.head.as_mut())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        let theirs = other.buffers();
        let mut ours = self.buffers_mut();
        if ours.len() != theirs.len() {
            return Err(Error::Shape("gradient sets differ in layout".into()));
        }
        for (a, b) in ours.iter_mut().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.buffers()
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.buffers()
            .iter()
            .all(|m| m.data().iter().all(|&v| v == 0.0))
    }
}

/// Recurrent state carried across time steps and across the split: `h` is
/// `batch x hidden`, `c` is present only for LSTM. Gradients with respect to
/// a state use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Matrix,
    pub c: Option<Matrix>,
}

pub type StateGrad = RecurrentState;

impl RecurrentState {
    pub fn zeros(kind: CellKind, batch: usize, hidden: usize) -> Self {
        RecurrentState {
            h: Matrix::zeros(batch, hidden),
            c: kind.has_cell_state().then(|| Matrix::zeros(batch, hidden)),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    pub fn hidden(&self) -> usize {
        self.h.cols()
    }

    /// Payload values, `h` then `c`.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.h
            .data()
            .iter()
            .chain(self.c.iter().flat_map(|c| c.data().iter()))
            .copied()
    }

    pub fn validate(&self, kind: CellKind, batch: usize, hidden: usize) -> Result<()> {
        if self.h.shape() != (batch, hidden) {
            return Err(Error::Shape(format!(
                "state h is {}x{}, expected {batch}x{hidden}",
                self.h.rows(),
                self.h.cols()
            )));
        }
        match (&self.c, kind.has_cell_state()) {
            (Some(c), true) if c.shape() == (batch, hidden) => Ok(()),
            (None, false) => Ok(()),
            (Some(_), true) => Err(Error::Shape("cell state batch disagrees with h".into())),
            (None, true) => Err(Error::Shape(format!("{kind} state needs a cell state"))),
            (Some(_), false) => Err(Error::Shape(format!("{kind} state has no cell state"))),
        }
    }

    pub fn dot(&self, other: &RecurrentState) -> Result<f64> {
        let mut acc = self.h.dot(&other.h)?;
        if let (Some(a), Some(b)) = (&self.c, &other.c) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }
}

/// Mean loss over a batch of logit rows and the gradient with respect to the
/// logits (already divided by the batch size). A single-logit head uses
/// sigmoid binary cross-entropy, wider heads use softmax cross-entropy.
pub fn batch_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let batch = logits.rows();
    if batch != labels.len() || batch == 0 {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            batch,
            labels.len()
        )));
    }
    let scale = 1.0 / batch as f64;
    let mut grad = Matrix::zeros(batch, logits.cols());
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        if row.len() == 1 {
            let (loss, g) = sigmoid_binary_cross_entropy(row[0], label)?;
            total += loss;
            grad.set(r, 0, g * scale);
        } else {
            let (loss, g) = softmax_cross_entropy(row, label)?;
            total += loss;
            for (dst, v) in grad.row_mut(r).iter_mut().zip(g) {
                *dst = v * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

/// In-place `θ ← θ - η·g` on every buffer. Zero steps leave values bitwise
/// untouched.
pub fn sgd_step(params: &mut SubNetworkParams, grads: &ParamGrads, lr: f64) -> Result<()> {
    let grad_bufs = grads.buffers();
    let mut param_bufs = params.buffers_mut();
    if param_bufs.len() != grad_bufs.len()
        || param_bufs
            .iter()
            .zip(&grad_bufs)
            .any(|(p, g)| !p.same_shape(g))
    {
        return Err(Error::Shape(
            "gradients are not congruent with parameters".into(),
        ));
    }
    for (p, g) in param_bufs.iter_mut().zip(grad_bufs) {
        for (theta, &dg) in p.data_mut().iter_mut().zip(g.data()) {
            let step = lr * dg;
            if step != 0.0 {
                *theta -= step;
            }
        }
    }
    Ok(())
}
