//! Client-to-client split training of one recurrent network whose segments
//! live on different clients.
//!
//! A chain holds one client per segment position. For a mini-batch, each
//! upstream client runs its segment and sends the final recurrent state
//! downstream ([`ActivationMsg`]). The last client owns the labels and the
//! output head: it computes the loss, backpropagates through its segment
//! and returns the gradient with respect to the state it received
//! ([`GradientMsg`]). Each upstream client in turn backpropagates that
//! gradient through its own tape and relays its own initial-state gradient
//! further up. Nothing else crosses a client boundary.
//!
//! Parameter updates are staged while the batch is in flight and only
//! applied once the whole backward chain has succeeded, so a failed batch
//! leaves every client at its pre-batch parameters.

mod audit;
mod codec;
pub mod gradcheck;

use std::collections::{BTreeMap, HashMap};

use crate::cells::{
    backward_segment, batch_loss, forward_segment, output_forward, sgd_step, ParamGrads,
    RecurrentState, SegmentTape, StateGrad, SubNetworkParams,
};
use crate::data::{ClientData, ClientId, SampleId, SegmentStore};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use audit::{audit_traffic, AuditReport};
pub use codec::{decode_message, encode_message};

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMsg {
    pub sample_ids: Vec<SampleId>,
    /// Position of the sending sub-network.
    pub segment_position: usize,
    pub round: u64,
    pub state: RecurrentState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMsg {
    pub sample_ids: Vec<SampleId>,
    /// Position of the receiving sub-network, i.e. the same boundary as the
    /// activation this message answers.
    pub segment_position: usize,
    pub round: u64,
    pub grad_state: StateGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Activation(ActivationMsg),
    Gradient(GradientMsg),
}

/// Identifies one in-flight mini-batch at a client.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BatchKey {
    pub round: u64,
    pub sample_ids: Vec<SampleId>,
}

#[derive(Debug, Clone)]
struct StagedUpdate {
    grads: ParamGrads,
    lr: f64,
}

/// One simulated client: the sub-network it trains for its segment
/// position, its local segments, and the state of in-flight batches.
#[derive(Debug, Clone)]
pub struct ClientEndpoint {
    pub client_id: ClientId,
    pub position: usize,
    pub params: SubNetworkParams,
    pub store: SegmentStore,
    tapes: HashMap<BatchKey, SegmentTape>,
    staged: Option<StagedUpdate>,
    version: u64,
}

/// Batch inputs gathered from a client's local store.
struct LocalBatch {
    steps: Vec<Matrix>,
    labels: Vec<Option<usize>>,
}

impl ClientEndpoint {
    pub fn new(
        client_id: ClientId,
        position: usize,
        params: SubNetworkParams,
        store: SegmentStore,
    ) -> Self {
        ClientEndpoint {
            client_id,
            position,
            params,
            store,
            tapes: HashMap::new(),
            staged: None,
            version: 0,
        }
    }

    pub fn from_data(data: ClientData, params: SubNetworkParams) -> Self {
        ClientEndpoint::new(data.client_id, data.position, params, data.store)
    }

    /// Number of committed parameter updates.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn staged_grads(&self) -> Option<&ParamGrads> {
        self.staged.as_ref().map(|s| &s.grads)
    }

    pub fn pending_batches(&self) -> usize {
        self.tapes.len()
    }

    /// Applies the staged update, if any.
    pub fn commit(&mut self) -> Result<bool> {
        match self.staged.take() {
            Some(update) => {
                sgd_step(&mut self.params, &update.grads, update.lr)?;
                self.version += 1;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Discards any staged update and the tape of `key`.
    pub fn rollback(&mut self, key: &BatchKey) {
        self.staged = None;
        self.tapes.remove(key);
    }

    fn stage(&mut self, grads: ParamGrads, lr: f64) -> Result<()> {
        if self.staged.is_some() {
            return Err(Error::Protocol(format!(
                "client {} already holds an unapplied update",
                self.client_id
            )));
        }
        self.staged = Some(StagedUpdate { grads, lr });
        Ok(())
    }

    fn gather(&self, sample_ids: &[SampleId]) -> Result<LocalBatch> {
        if sample_ids.is_empty() {
            return Err(Error::Protocol("empty batch".into()));
        }
        let segments = sample_ids
            .iter()
            .map(|id| {
                self.store.get(*id).ok_or_else(|| {
                    Error::Protocol(format!(
                        "client {} holds no segment of sample {id}",
                        self.client_id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (steps, width) = segments[0].features.shape();
        if segments
            .iter()
            .any(|s| s.features.shape() != (steps, width))
        {
            return Err(Error::Protocol(format!(
                "client {} holds segments of unequal length in one batch",
                self.client_id
            )));
        }
        let batch = segments.len();
        let steps = (0..steps)
            .map(|t| {
                let mut m = Matrix::zeros(batch, width);
                for (b, seg) in segments.iter().enumerate() {
                    m.row_mut(b).copy_from_slice(seg.features.row(t));
                }
                m
            })
            .collect();
        Ok(LocalBatch {
            steps,
            labels: segments.iter().map(|s| s.label).collect(),
        })
    }

    fn initial_state(
        &self,
        sample_ids: &[SampleId],
        incoming: Option<&ActivationMsg>,
    ) -> Result<RecurrentState> {
        match incoming {
            None if self.position == 1 => Ok(RecurrentState::zeros(
                self.params.kind,
                sample_ids.len(),
                self.params.hidden_dim,
            )),
            None => Err(Error::Protocol(format!(
                "client {} at position {} needs the upstream activation",
                self.client_id, self.position
            ))),
            Some(_) if self.position == 1 => Err(Error::Protocol(
                "the first segment does not accept an activation".into(),
            )),
            Some(msg) => {
                if msg.sample_ids != sample_ids {
                    return Err(Error::Protocol(format!(
                        "activation sample ids {:?} do not match batch {:?}",
                        msg.sample_ids, sample_ids
                    )));
                }
                if msg.segment_position + 1 != self.position {
                    return Err(Error::Protocol(format!(
                        "activation from position {} delivered to position {}",
                        msg.segment_position, self.position
                    )));
                }
                msg.state
                    .validate(self.params.kind, sample_ids.len(), self.params.hidden_dim)
                    .map_err(|e| Error::Protocol(format!("incoming activation: {e}")))?;
                Ok(msg.state.clone())
            }
        }
    }
}

/// Forward pass on an upstream client: runs the local segment from the
/// received state (zeros at position 1), keeps the tape for the backward
/// pass and returns the activation for position `s + 1`.
pub fn upstream_forward(
    client: &mut ClientEndpoint,
    round: u64,
    sample_ids: &[SampleId],
    incoming: Option<&ActivationMsg>,
) -> Result<ActivationMsg> {
    if client.params.has_head() {
        return Err(Error::Protocol(format!(
            "client {} owns the output head and cannot act as upstream",
            client.client_id
        )));
    }
    let key = BatchKey {
        round,
        sample_ids: sample_ids.to_vec(),
    };
    if client.tapes.contains_key(&key) {
        return Err(Error::Protocol(format!(
            "batch {key:?} is already in flight at client {}",
            client.client_id
        )));
    }
    let state0 = client.initial_state(sample_ids, incoming)?;
    let batch = client.gather(sample_ids)?;
    let (state, tape) = forward_segment(&client.params, &state0, &batch.steps)?;
    client.tapes.insert(key, tape);
    Ok(ActivationMsg {
        sample_ids: sample_ids.to_vec(),
        segment_position: client.position,
        round,
        state,
    })
}

#[derive(Debug, Clone)]
pub struct DownstreamOutcome {
    /// Absent when the chain has a single position.
    pub gradient: Option<GradientMsg>,
    pub loss: f64,
    pub logits: Matrix,
}

/// Training step on the label-holding client: forward from the received
/// state, loss, backward, staged update, and the gradient with respect to
/// the received state for the upstream neighbour.
pub fn downstream_train_step(
    client: &mut ClientEndpoint,
    round: u64,
    sample_ids: &[SampleId],
    incoming: Option<&ActivationMsg>,
    lr: f64,
) -> Result<DownstreamOutcome> {
    if !client.params.has_head() {
        return Err(Error::Protocol(format!(
            "client {} has no output head and cannot compute the loss",
            client.client_id
        )));
    }
    let state0 = client.initial_state(sample_ids, incoming)?;
    let batch = client.gather(sample_ids)?;
    let labels = batch
        .labels
        .iter()
        .zip(sample_ids)
        .map(|(l, id)| l.ok_or_else(|| Error::Protocol(format!("no label for sample {id}"))))
        .collect::<Result<Vec<_>>>()?;
    let (state, tape) = forward_segment(&client.params, &state0, &batch.steps)?;
    let logits = output_forward(&client.params, &state)?;
    let (loss, grad_logits) = batch_loss(&logits, &labels)?;
    let zero_seed = RecurrentState::zeros(
        client.params.kind,
        sample_ids.len(),
        client.params.hidden_dim,
    );
    let (grads, grad_state0) =
        backward_segment(&client.params, &tape, &zero_seed, Some(&grad_logits))?;
    client.stage(grads, lr)?;
    let gradient = incoming.map(|msg| GradientMsg {
        sample_ids: sample_ids.to_vec(),
        segment_position: msg.segment_position,
        round,
        grad_state: grad_state0,
    });
    Ok(DownstreamOutcome {
        gradient,
        loss,
        logits,
    })
}

/// Backward pass on an upstream client. Consumes the cached tape, stages
/// the update and, below position 1, returns the gradient to relay further
/// upstream.
pub fn upstream_backward(
    client: &mut ClientEndpoint,
    incoming: &GradientMsg,
    lr: f64,
) -> Result<Option<GradientMsg>> {
    if incoming.segment_position != client.position {
        return Err(Error::Protocol(format!(
            "gradient for position {} delivered to position {}",
            incoming.segment_position, client.position
        )));
    }
    let key = BatchKey {
        round: incoming.round,
        sample_ids: incoming.sample_ids.clone(),
    };
    let tape = client.tapes.remove(&key).ok_or_else(|| {
        Error::Protocol(format!(
            "client {} has no forward pass for round {} batch {:?} (stale or duplicate gradient)",
            client.client_id, incoming.round, incoming.sample_ids
        ))
    })?;
    incoming
        .grad_state
        .validate(client.params.kind, tape.batch(), client.params.hidden_dim)
        .map_err(|e| Error::Protocol(format!("incoming gradient: {e}")))?;
    let (grads, grad_state0) = backward_segment(&client.params, &tape, &incoming.grad_state, None)?;
    client.stage(grads, lr)?;
    Ok((client.position > 1).then(|| GradientMsg {
        sample_ids: incoming.sample_ids.clone(),
        segment_position: client.position - 1,
        round: incoming.round,
        grad_state: grad_state0,
    }))
}

/// Inter-client traffic of a run. Per-link counters are always kept; the
/// encoded lines only when tracing is on.
#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    keep_lines: bool,
    lines: Vec<String>,
    /// `(from, to) -> (activations, gradients)`
    links: BTreeMap<(ClientId, ClientId), (u64, u64)>,
}

impl MessageLog {
    pub fn new(keep_lines: bool) -> Self {
        MessageLog {
            keep_lines,
            ..Default::default()
        }
    }

    pub fn record(&mut self, from: ClientId, to: ClientId, msg: &Message) {
        let counters = self.links.entry((from, to)).or_default();
        match msg {
            Message::Activation(_) => counters.0 += 1,
            Message::Gradient(_) => counters.1 += 1,
        }
        if self.keep_lines {
            self.lines.push(encode_message(msg));
        }
    }

    pub fn keeps_lines(&self) -> bool {
        self.keep_lines
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn take_lines(&mut self) -> Vec<String> {
        std::mem::take(&mut self.lines)
    }

    pub fn links(&self) -> &BTreeMap<(ClientId, ClientId), (u64, u64)> {
        &self.links
    }

    pub fn append(&mut self, mut other: MessageLog) {
        self.lines.append(&mut other.lines);
        for (link, (a, g)) in other.links {
            let c = self.links.entry(link).or_default();
            c.0 += a;
            c.1 += g;
        }
    }
}

fn check_chain(chain: &[ClientEndpoint]) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::Config("empty chain".into()));
    }
    for (i, c) in chain.iter().enumerate() {
        if c.position != i + 1 {
            return Err(Error::Config(format!(
                "chain slot {} holds client {} at position {}",
                i + 1,
                c.client_id,
                c.position
            )));
        }
    }
    Ok(())
}

fn run_chain(
    chain: &mut [ClientEndpoint],
    round: u64,
    sample_ids: &[SampleId],
    lr: f64,
    log: &mut MessageLog,
) -> Result<f64> {
    let last = chain.len() - 1;
    let mut activation: Option<ActivationMsg> = None;
    for s in 0..last {
        let msg = upstream_forward(&mut chain[s], round, sample_ids, activation.as_ref())?;
        let msg = Message::Activation(msg);
        log.record(chain[s].client_id, chain[s + 1].client_id, &msg);
        let Message::Activation(msg) = msg else {
            unreachable!()
        };
        activation = Some(msg);
    }
    let outcome =
        downstream_train_step(&mut chain[last], round, sample_ids, activation.as_ref(), lr)?;
    let mut gradient = outcome.gradient;
    for s in (0..last).rev() {
        let msg = gradient
            .take()
            .ok_or_else(|| Error::Protocol("gradient chain ended early".into()))?;
        let msg = Message::Gradient(msg);
        log.record(chain[s + 1].client_id, chain[s].client_id, &msg);
        let Message::Gradient(msg) = msg else {
            unreachable!()
        };
        gradient = upstream_backward(&mut chain[s], &msg, lr)?;
    }
    if gradient.is_some() {
        return Err(Error::Protocol(
            "gradient relayed past the first segment".into(),
        ));
    }
    Ok(outcome.loss)
}

/// Runs one batch through the chain and leaves every client's update
/// staged. On error every client is rolled back.
pub fn sl_stage_batch(
    chain: &mut [ClientEndpoint],
    round: u64,
    sample_ids: &[SampleId],
    lr: f64,
    log: &mut MessageLog,
) -> Result<f64> {
    check_chain(chain)?;
    let mut local = MessageLog::new(log.keep_lines);
    match run_chain(chain, round, sample_ids, lr, &mut local) {
        Ok(loss) => {
            log.append(local);
            Ok(loss)
        }
        Err(e) => {
            let key = BatchKey {
                round,
                sample_ids: sample_ids.to_vec(),
            };
            for c in chain.iter_mut() {
                c.rollback(&key);
            }
            Err(e)
        }
    }
}

/// One mini-batch of split training over the whole chain: forward chain,
/// backward chain, then every client applies its update exactly once.
/// Returns the batch loss.
pub fn sl_train_batch(
    chain: &mut [ClientEndpoint],
    round: u64,
    sample_ids: &[SampleId],
    lr: f64,
    log: &mut MessageLog,
) -> Result<f64> {
    let loss = sl_stage_batch(chain, round, sample_ids, lr, log)?;
    for c in chain.iter_mut() {
        c.commit()?;
    }
    Ok(loss)
}

/// Forward-only pass through a chain of sub-networks for evaluation.
/// `segments[s]` holds the per-step inputs of position `s + 1`.
pub fn chain_logits(positions: &[SubNetworkParams], segments: &[Vec<Matrix>]) -> Result<Matrix> {
    if positions.len() != segments.len() || positions.is_empty() {
        return Err(Error::Config(format!(
            "{} sub-networks for {} segments",
            positions.len(),
            segments.len()
        )));
    }
    let batch = segments[0]
        .first()
        .map(Matrix::rows)
        .ok_or_else(|| Error::Shape("empty segment".into()))?;
    let first = &positions[0];
    let mut state = RecurrentState::zeros(first.kind, batch, first.hidden_dim);
    for (params, steps) in positions.iter().zip(segments) {
        state = forward_segment(params, &state, steps)?.0;
    }
    output_forward(positions.last().expect("non-empty"), &state)
}

#[cfg(test)]
mod tests;
