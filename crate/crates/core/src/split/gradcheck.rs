//! Checks of the split protocol against references that never split.
//!
//! * Tied equivalence: with every position sharing one set of cell weights,
//!   the chain must reproduce a single cell run over the concatenated
//!   sequence, and the per-position gradients must add up to its gradient.
//! * Chain finite differences: with independent weights per position, every
//!   staged gradient and the gradient relayed to position 1 must match
//!   central differences of the end-to-end loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::gradcheck::{central_difference, CheckReport, FD_EPSILON};
use crate::cells::{
    backward_segment, batch_loss, forward_segment, init_params, output_forward, CellDims, CellKind,
    ParamGrads, RecurrentState, SubNetworkParams,
};
use crate::data::{assign_segments, SampleId, SequenceRecord};
use crate::error::{Error, Result};
use crate::fed::IdBank;
use crate::linalg::Matrix;

use super::{chain_logits, decode_message, sl_stage_batch, ClientEndpoint, Message, MessageLog};

/// Relative tolerance for tied gradients.
pub const TIED_GRAD_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance for the tied forward loss.
pub const TIED_LOSS_TOLERANCE: f64 = 1e-12;

/// A random multi-segment batch and the sub-networks to train it with.
#[derive(Debug, Clone)]
pub struct ChainInstance {
    pub positions: Vec<SubNetworkParams>,
    pub records: Vec<SequenceRecord>,
    pub lengths: Vec<usize>,
}

impl ChainInstance {
    pub fn sample_ids(&self) -> Vec<SampleId> {
        self.records.iter().map(|r| r.sample_id).collect()
    }

    /// Client endpoints of one chain holding this instance's segments.
    pub fn endpoints(&self) -> Result<Vec<ClientEndpoint>> {
        let mut bank = IdBank::new();
        let assignment = assign_segments(
            &self.records,
            &[self.sample_ids()],
            &self.lengths,
            &mut bank,
        )?;
        Ok(assignment
            .clients
            .into_iter()
            .zip(&self.positions)
            .map(|(data, params)| ClientEndpoint::from_data(data, params.clone()))
            .collect())
    }

    /// Per-step batch inputs of position `s` (0-based).
    pub fn segment_inputs(&self, s: usize) -> Vec<Matrix> {
        let start: usize = self.lengths[..s].iter().sum();
        step_matrices(&self.records, start, self.lengths[s])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| r.label.expect("labelled"))
            .collect()
    }
}

fn step_matrices(records: &[SequenceRecord], start: usize, len: usize) -> Vec<Matrix> {
    (start..start + len)
        .map(|t| {
            let rows: Vec<&[f64]> = records.iter().map(|r| r.features.row(t)).collect();
            Matrix::from_rows(&rows)
        })
        .collect()
}

/// Builds a random chain of `segments` positions. With `tied`, every
/// position carries the same cell weights and only the last has a head.
pub fn random_chain(
    kind: CellKind,
    segments: usize,
    seed: u64,
    tied: bool,
) -> Result<ChainInstance> {
    if segments == 0 {
        return Err(Error::Config("need at least one segment".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = CellDims {
        input: rng.gen_range(1..=3),
        hidden: rng.gen_range(1..=4),
        output: if seed.is_multiple_of(2) { 1 } else { 3 },
    };
    let lengths: Vec<usize> = (0..segments).map(|_| rng.gen_range(1..=4)).collect();
    let batch = rng.gen_range(1..=3);
    let mut draw = |p: SubNetworkParams| p.map_values(|_| rng.gen_range(-0.9..0.9));
    let last = draw(init_params(kind, dims, seed, segments, segments)?);
    let positions = (1..segments)
        .map(|s| {
            let upstream = if tied {
                SubNetworkParams {
                    head: None,
                    ..last.clone()
                }
            } else {
                draw(init_params(kind, dims, seed + s as u64, s, segments)?)
            };
            Ok(upstream)
        })
        .chain(std::iter::once(Ok(last.clone())))
        .collect::<Result<Vec<_>>>()?;
    let steps: usize = lengths.iter().sum();
    let classes = dims.output.max(2);
    let records = (0..batch)
        .map(|b| SequenceRecord {
            sample_id: 100 + b as SampleId,
            features: Matrix::from_vec(
                steps,
                dims.input,
                (0..steps * dims.input)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            )
            .expect("sized"),
            label: Some(rng.gen_range(0..classes)),
        })
        .collect();
    Ok(ChainInstance {
        positions,
        records,
        lengths,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EquivalenceReport {
    pub loss_split: f64,
    pub loss_unsplit: f64,
    pub max_grad_rel_err: f64,
    pub compared: usize,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        (self.loss_split - self.loss_unsplit).abs() <= TIED_LOSS_TOLERANCE
            && self.max_grad_rel_err <= TIED_GRAD_TOLERANCE
            && self.compared > 0
    }

    /// Largest error as a multiple of its tolerance.
    pub fn severity(&self) -> f64 {
        ((self.loss_split - self.loss_unsplit).abs() / TIED_LOSS_TOLERANCE)
            .max(self.max_grad_rel_err / TIED_GRAD_TOLERANCE)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Runs one tied batch through the split protocol and through a single
/// unsplit cell, and compares losses and gradients.
pub fn tied_equivalence(kind: CellKind, segments: usize, seed: u64) -> Result<EquivalenceReport> {
    let inst = random_chain(kind, segments, seed, true)?;
    let full = inst.positions.last().expect("non-empty").clone();
    let labels = inst.labels();

    let steps: usize = inst.lengths.iter().sum();
    let all_steps = step_matrices(&inst.records, 0, steps);
    let state0 = RecurrentState::zeros(kind, labels.len(), full.hidden_dim);
    let (state, tape) = forward_segment(&full, &state0, &all_steps)?;
    let logits = output_forward(&full, &state)?;
    let (loss_unsplit, grad_logits) = batch_loss(&logits, &labels)?;
    let seed_grad = RecurrentState::zeros(kind, labels.len(), full.hidden_dim);
    let (unsplit, _) = backward_segment(&full, &tape, &seed_grad, Some(&grad_logits))?;

    let mut chain = inst.endpoints()?;
    let loss_split = sl_stage_batch(
        &mut chain,
        0,
        &inst.sample_ids(),
        0.0,
        &mut MessageLog::new(false),
    )?;
    let mut summed = ParamGrads::zeros_like(&full);
    for client in &chain {
        let staged = client.staged_grads().ok_or_else(|| {
            Error::Protocol(format!("client {} staged nothing", client.client_id))
        })?;
        summed.add_assign(&ParamGrads {
            gates: staged.gates.clone(),
            head: staged
                .head
                .clone()
                .or_else(|| ParamGrads::zeros_like(&full).head),
        })?;
    }
    let mut report = EquivalenceReport {
        loss_split,
        loss_unsplit,
        ..Default::default()
    };
    for (a, b) in summed.flatten().into_iter().zip(unsplit.flatten()) {
        report.compared += 1;
        report.max_grad_rel_err = report.max_grad_rel_err.max(rel(a, b));
    }
    Ok(report)
}

fn end_to_end_loss(positions: &[SubNetworkParams], inst: &ChainInstance) -> Result<f64> {
    let segments: Vec<Vec<Matrix>> = (0..positions.len())
        .map(|s| inst.segment_inputs(s))
        .collect();
    let logits = chain_logits(positions, &segments)?;
    Ok(batch_loss(&logits, &inst.labels())?.0)
}

/// Loss of positions `2..=S` started from `state` at the first boundary.
fn loss_from_boundary(inst: &ChainInstance, state: &RecurrentState) -> Result<f64> {
    let mut state = state.clone();
    for (s, params) in inst.positions.iter().enumerate().skip(1) {
        state = forward_segment(params, &state, &inst.segment_inputs(s))?.0;
    }
    let logits = output_forward(inst.positions.last().expect("non-empty"), &state)?;
    Ok(batch_loss(&logits, &inst.labels())?.0)
}

/// Finite-difference check of a random untied chain: every staged gradient
/// at every position and the state gradient relayed to position 1.
pub fn chain_fd_check(kind: CellKind, segments: usize, seed: u64) -> Result<CheckReport> {
    if segments < 2 {
        return Err(Error::Config(
            "a split chain needs at least two segments".into(),
        ));
    }
    let inst = random_chain(kind, segments, seed, false)?;
    let mut chain = inst.endpoints()?;
    let mut log = MessageLog::new(true);
    sl_stage_batch(&mut chain, 0, &inst.sample_ids(), 0.0, &mut log)?;

    let mut report = CheckReport::default();
    for (s, client) in chain.iter().enumerate() {
        let staged = client.staged_grads().expect("staged").clone();
        for (buffer, g) in staged.buffers().iter().enumerate() {
            for (index, &analytic) in g.data().iter().enumerate() {
                let mut positions = inst.positions.clone();
                let base = positions[s].buffers()[buffer].data()[index];
                let mut probe = |x: f64| {
                    positions[s].buffers_mut()[buffer].data_mut()[index] = x;
                    end_to_end_loss(&positions, &inst)
                };
                let numeric = fd(&mut probe, base)?;
                report.record(analytic, numeric);
            }
        }
    }

    let relayed = log
        .lines()
        .iter()
        .map(|l| decode_message(l))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .find_map(|m| match m {
            Message::Gradient(g) if g.segment_position == 1 => Some(g.grad_state),
            _ => None,
        })
        .ok_or_else(|| Error::Protocol("no gradient reached position 1".into()))?;
    let batch = inst.records.len();
    let zeros = RecurrentState::zeros(kind, batch, inst.positions[0].hidden_dim);
    let (boundary, _) = forward_segment(&inst.positions[0], &zeros, &inst.segment_inputs(0))?;
    let parts: usize = if kind.has_cell_state() { 2 } else { 1 };
    for part in 0..parts {
        let len = boundary.h.data().len();
        for index in 0..len {
            let mut state = boundary.clone();
            let base = *state_entry(&mut state, part, index);
            let mut probe = |x: f64| {
                *state_entry(&mut state, part, index) = x;
                loss_from_boundary(&inst, &state)
            };
            let numeric = fd(&mut probe, base)?;
            let analytic = if part == 0 {
                relayed.h.data()[index]
            } else {
                relayed.c.as_ref().expect("lstm").data()[index]
            };
            report.record(analytic, numeric);
        }
    }
    Ok(report)
}

fn state_entry(state: &mut RecurrentState, part: usize, index: usize) -> &mut f64 {
    if part == 0 {
        &mut state.h.data_mut()[index]
    } else {
        &mut state.c.as_mut().expect("cell state").data_mut()[index]
    }
}

fn fd(probe: &mut impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let mut err = None;
    let value = central_difference(
        |v| match probe(v) {
            Ok(l) => l,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        },
        x,
        FD_EPSILON,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// The split suite run by the `gradcheck` command: tied equivalence and
/// chain finite differences for every cell, S = 2 and 3.
pub fn split_suite(seeds: u64) -> Result<Vec<(CellKind, usize, EquivalenceReport, CheckReport)>> {
    let mut out = Vec::new();
    for kind in CellKind::ALL {
        for segments in [2, 3] {
            let mut worst: Option<EquivalenceReport> = None;
            let mut compared = 0;
            let mut fd_total = CheckReport::default();
            for seed in 0..seeds {
                let eq = tied_equivalence(kind, segments, 500 + seed)?;
                compared += eq.compared;
                if worst.as_ref().is_none_or(|w| eq.severity() > w.severity()) {
                    worst = Some(eq);
                }
                fd_total.merge(&chain_fd_check(kind, segments, 700 + seed)?);
            }
            let worst = EquivalenceReport {
                compared,
                ..worst.unwrap_or_default()
            };
            out.push((kind, segments, worst, fd_total));
        }
    }
    Ok(out)
}
