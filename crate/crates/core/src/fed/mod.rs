//! Server side: ID bank, client sampling, broadcast, per-position
//! aggregation and the round loop.
//!
//! Clients are numbered so that chain `c` is made of clients
//! `c·S .. c·S + S - 1`, the client at offset `s` holding segment
//! position `s + 1`. With `S = 1` every client is its own chain and a round
//! is exactly a federated-averaging round.

mod id_bank;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cells::{init_params, CellDims, CellKind, SubNetworkParams};
use crate::data::{split_features, Assignment, ClientId, SampleId, SequenceRecord};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{evaluate_metric, Metric, MetricsRow};
use crate::split::{chain_logits, sl_train_batch, ClientEndpoint, MessageLog};

pub use id_bank::IdBank;

/// Mixes several values into one seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        acc = z ^ (z >> 31);
    }
    acc
}

/// Per-position sub-networks held by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub positions: Vec<SubNetworkParams>,
}

impl GlobalModel {
    /// With `tied`, every position draws its cell weights from `seed`, so
    /// all positions start equal; otherwise position `s` uses a seed
    /// derived from `(seed, s)`.
    pub fn init(
        kind: CellKind,
        dims: CellDims,
        segments: usize,
        seed: u64,
        tied: bool,
    ) -> Result<Self> {
        let positions = (1..=segments)
            .map(|s| {
                let seed = if tied {
                    seed
                } else {
                    derive_seed(&[seed, s as u64])
                };
                init_params(kind, dims, seed, s, segments)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = GlobalModel { positions };
        model.validate()?;
        Ok(model)
    }

    pub fn segments(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.positions.first() else {
            return Err(Error::Config("global model has no positions".into()));
        };
        let last = self.positions.len() - 1;
        for (i, p) in self.positions.iter().enumerate() {
            if p.has_head() != (i == last) {
                return Err(Error::Config(format!(
                    "position {} {} an output head",
                    i + 1,
                    if p.has_head() { "has" } else { "lacks" }
                )));
            }
            if (p.kind, p.input_dim, p.hidden_dim)
                != (first.kind, first.input_dim, first.hidden_dim)
            {
                return Err(Error::Config(format!(
                    "position {} has different cell dimensions",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    /// Total client count `K`.
    pub clients: usize,
    /// Participation fraction `C_t`.
    pub frac: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub rounds: u64,
    pub segments: usize,
    /// Seed for client sampling and local batch order.
    pub seed: u64,
    /// Run selected chains on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frac > 0.0 && self.frac <= 1.0) {
            return Err(Error::Config(format!(
                "participation fraction {} outside (0, 1]",
                self.frac
            )));
        }
        if self.clients == 0 || self.batch_size == 0 || self.local_epochs == 0 || self.segments == 0
        {
            return Err(Error::Config(
                "clients, batch size, epochs and segments must be at least 1".into(),
            ));
        }
        if !self.clients.is_multiple_of(self.segments) {
            return Err(Error::Config(format!(
                "{} clients cannot form chains of {} segments",
                self.clients, self.segments
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn chains(&self) -> usize {
        self.clients / self.segments
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub position: usize,
    pub params: SubNetworkParams,
    /// Number of position-`s` segments the client trained on.
    pub samples: usize,
}

/// `max(round(frac·K), 1)`
pub fn participant_count(clients: usize, frac: f64) -> usize {
    ((frac * clients as f64).round() as usize).clamp(1, clients.max(1))
}

/// Uniform sample of `participant_count` client ids without replacement,
/// in ascending order.
pub fn select_clients(clients: usize, frac: f64, rng: &mut impl Rng) -> Result<Vec<ClientId>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!(
            "participation fraction {frac} outside (0, 1]"
        )));
    }
    if clients == 0 {
        return Ok(Vec::new());
    }
    let mut picked = index::sample(rng, clients, participant_count(clients, frac)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Copies of the global sub-network for each `(client, position)` target.
pub fn broadcast(
    model: &GlobalModel,
    targets: &[(ClientId, usize)],
) -> Result<Vec<(ClientId, SubNetworkParams)>> {
    targets
        .iter()
        .map(|&(client, position)| {
            position
                .checked_sub(1)
                .and_then(|i| model.positions.get(i))
                .map(|p| (client, p.clone()))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "client {client} has unknown segment position {position}"
                    ))
                })
        })
        .collect()
}

/// Sample-weighted mean of the position-`position` updates, summed in
/// ascending client-id order. Each result scalar is clamped to the range
/// of its inputs so rounding can never leave the convex hull. Returns
/// `None` when the updates hold no samples.
pub fn aggregate(updates: &[ClientUpdate], position: usize) -> Result<Option<SubNetworkParams>> {
    if let Some(u) = updates.iter().find(|u| u.position != position) {
        return Err(Error::Config(format!(
            "update from client {} is for position {}, aggregating position {position}",
            u.client_id, u.position
        )));
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().filter(|u| u.samples > 0).collect();
    order.sort_by_key(|u| u.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Config(format!(
            "duplicate client update for position {position}"
        )));
    }
    let total: usize = order.iter().map(|u| u.samples).sum();
    let Some(first) = order.first() else {
        return Ok(None);
    };
    if let Some(u) = order.iter().find(|u| !u.params.congruent(&first.params)) {
        return Err(Error::Shape(format!(
            "update from client {} is not congruent with client {}",
            u.client_id, first.client_id
        )));
    }
    let weights: Vec<f64> = order
        .iter()
        .map(|u| u.samples as f64 / total as f64)
        .collect();
    let inputs: Vec<Vec<&Matrix>> = order.iter().map(|u| u.params.buffers()).collect();
    let mut out = first.params.clone();
    for (b, target) in out.buffers_mut().into_iter().enumerate() {
        for (i, slot) in target.data_mut().iter_mut().enumerate() {
            let mut acc = weights[0] * inputs[0][b].data()[i];
            let (mut lo, mut hi) = (inputs[0][b].data()[i], inputs[0][b].data()[i]);
            for (w, bufs) in weights.iter().zip(&inputs).skip(1) {
                let v = bufs[b].data()[i];
                acc += w * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            *slot = acc.clamp(lo, hi);
        }
    }
    Ok(Some(out))
}

/// Shuffled mini-batches for one local epoch. The order depends only on
/// `(seed, round, chain, epoch)`.
pub fn batch_order(
    seed: u64,
    round: u64,
    chain: usize,
    epoch: usize,
    ids: &[SampleId],
    batch_size: usize,
) -> Vec<Vec<SampleId>> {
    let mut ids = ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        round,
        chain as u64,
        epoch as u64,
    ])));
    ids.chunks(batch_size.max(1))
        .map(<[SampleId]>::to_vec)
        .collect()
}

/// Test samples cut into the same segments as training, in fixed batches.
#[derive(Debug, Clone)]
pub struct EvalSet {
    batches: Vec<(Vec<Vec<Matrix>>, Vec<usize>)>,
}

impl EvalSet {
    pub fn new(records: &[SequenceRecord], lengths: &[usize], batch_size: usize) -> Result<Self> {
        let batches = records
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let labels = chunk
                    .iter()
                    .map(|r| {
                        r.label.ok_or_else(|| {
                            Error::Config(format!("test sample {} has no label", r.sample_id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pieces = chunk
                    .iter()
                    .map(|r| split_features(&r.features, lengths))
                    .collect::<Result<Vec<_>>>()?;
                let segments = lengths
                    .iter()
                    .enumerate()
                    .map(|(s, &len)| {
                        (0..len)
                            .map(|t| {
                                let rows: Vec<&[f64]> =
                                    pieces.iter().map(|p| p[s].row(t)).collect();
                                Matrix::from_rows(&rows)
                            })
                            .collect()
                    })
                    .collect();
                Ok((segments, labels))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet { batches })
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Chained forward pass without updates; logits stacked over all batches.
    pub fn logits(&self, positions: &[SubNetworkParams]) -> Result<(Matrix, Vec<usize>)> {
        let mut parts = Vec::with_capacity(self.batches.len());
        let mut labels = Vec::new();
        for (segments, l) in &self.batches {
            parts.push(chain_logits(positions, segments)?);
            labels.extend_from_slice(l);
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        Ok((Matrix::vstack(&refs)?, labels))
    }

    pub fn metric(&self, positions: &[SubNetworkParams], metric: Metric) -> Result<f64> {
        let (logits, labels) = self.logits(positions)?;
        evaluate_metric(metric, &logits, &labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u64,
    /// Mean over participating chains of each chain's mean batch loss.
    /// `None` when no chain took part.
    pub train_loss: Option<f64>,
    pub chains: Vec<usize>,
    /// `Σ_k n_s^k` per position.
    pub samples_per_position: Vec<usize>,
}

struct ChainResult {
    chain: usize,
    losses: Vec<f64>,
    log: MessageLog,
}

fn train_chain(
    cfg: &RoundConfig,
    round: u64,
    chain: usize,
    members: &mut [ClientEndpoint],
    keep_lines: bool,
) -> Result<ChainResult> {
    let ids = members[0].store.sample_ids();
    let mut log = MessageLog::new(keep_lines);
    let mut losses = Vec::new();
    for epoch in 0..cfg.local_epochs {
        for batch in batch_order(cfg.seed, round, chain, epoch, &ids, cfg.batch_size) {
            losses.push(sl_train_batch(members, round, &batch, cfg.lr, &mut log)?);
        }
    }
    Ok(ChainResult { chain, losses, log })
}

/// Where and how often to write per-position checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSpec {
    pub dir: PathBuf,
    pub every: u64,
}

/// Run-level options for [`Federation::run_training`].
pub struct TrainingOptions<'a> {
    pub metric: Metric,
    pub checkpoint: Option<CheckpointSpec>,
    pub trace: Option<&'a mut dyn Write>,
    /// Record wall time in `elapsed_ms`; otherwise the column is 0 so that
    /// output is reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for TrainingOptions<'_> {
    fn default() -> Self {
        TrainingOptions {
            metric: Metric::Accuracy,
            checkpoint: None,
            trace: None,
            wall_clock: false,
        }
    }
}

/// The server together with the simulated clients it coordinates.
#[derive(Debug, Clone)]
pub struct Federation {
    pub config: RoundConfig,
    pub global: GlobalModel,
    pub bank: IdBank,
    clients: Vec<ClientEndpoint>,
}

impl Federation {
    pub fn new(
        config: RoundConfig,
        global: GlobalModel,
        assignment: Assignment,
        bank: IdBank,
    ) -> Result<Self> {
        config.validate()?;
        global.validate()?;
        if global.segments() != config.segments || assignment.segments() != config.segments {
            return Err(Error::Config(format!(
                "model has {} positions, data {} segments, config {}",
                global.segments(),
                assignment.segments(),
                config.segments
            )));
        }
        if assignment.client_count() != config.clients {
            return Err(Error::Config(format!(
                "assignment has {} clients, config expects {}",
                assignment.client_count(),
                config.clients
            )));
        }
        let segments = config.segments;
        let clients = assignment
            .clients
            .into_iter()
            .enumerate()
            .map(|(i, data)| {
                if data.client_id != i || data.position != i % segments + 1 {
                    return Err(Error::Config(format!(
                        "client {} at position {} breaks the chain layout",
                        data.client_id, data.position
                    )));
                }
                let params = global.positions[data.position - 1].clone();
                Ok(ClientEndpoint::from_data(data, params))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            config,
            global,
            bank,
            clients,
        })
    }

    pub fn clients(&self) -> &[ClientEndpoint] {
        &self.clients
    }

    /// Chains taking part in `round`: those whose position-1 client is
    /// among the sampled clients.
    pub fn selected_chains(&self, round: u64) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, round, 0x5e1ec7]));
        let picked = select_clients(self.config.clients, self.config.frac, &mut rng)?;
        let s = self.config.segments;
        Ok(picked
            .into_iter()
            .filter(|c| c % s == 0)
            .map(|c| c / s)
            .collect())
    }

    /// One communication round: select, broadcast, local split training
    /// on every selected chain, collect, aggregate per position.
    pub fn run_round(&mut self, round: u64, log: &mut MessageLog) -> Result<RoundOutcome> {
        let segments = self.config.segments;
        let chains = self.selected_chains(round)?;
        if chains.is_empty() {
            log::warn!("round {round}: no complete chain selected, model unchanged");
            return Ok(RoundOutcome {
                round,
                train_loss: None,
                chains,
                samples_per_position: vec![0; segments],
            });
        }
        let targets: Vec<(ClientId, usize)> = chains
            .iter()
            .flat_map(|&c| (0..segments).map(move |s| (c * segments + s, s + 1)))
            .collect();
        for (client, params) in broadcast(&self.global, &targets)? {
            self.clients[client].params = params;
        }

        let cfg = &self.config;
        let keep_lines = log.keeps_lines();
        let mut work: Vec<(usize, &mut [ClientEndpoint])> = self
            .clients
            .chunks_mut(segments)
            .enumerate()
            .filter(|(c, _)| chains.binary_search(c).is_ok())
            .collect();
        let results: Vec<Result<ChainResult>> = if cfg.parallel {
            work.par_iter_mut()
                .map(|(c, members)| train_chain(cfg, round, *c, members, keep_lines))
                .collect()
        } else {
            work.iter_mut()
                .map(|(c, members)| train_chain(cfg, round, *c, members, keep_lines))
                .collect()
        };
        let mut chain_losses = Vec::with_capacity(results.len());
        for r in results {
            let r = r?;
            let mean = r.losses.iter().sum::<f64>() / r.losses.len().max(1) as f64;
            log::debug!(
                "round {round} chain {}: {} batches, loss {mean:.6}",
                r.chain,
                r.losses.len()
            );
            if !r.losses.is_empty() {
                chain_losses.push(mean);
            }
            log.append(r.log);
        }

        let mut samples_per_position = vec![0; segments];
        for s in 1..=segments {
            let updates: Vec<ClientUpdate> = chains
                .iter()
                .map(|&c| {
                    let client = &self.clients[c * segments + s - 1];
                    ClientUpdate {
                        client_id: client.client_id,
                        position: s,
                        params: client.params.clone(),
                        samples: client.store.len(),
                    }
                })
                .collect();
            samples_per_position[s - 1] = updates.iter().map(|u| u.samples).sum();
            match aggregate(&updates, s)? {
                Some(p) => self.global.positions[s - 1] = p,
                None => {
                    log::warn!("round {round}: no samples at position {s}, keeping previous model")
                }
            }
        }
        let train_loss = (!chain_losses.is_empty())
            .then(|| chain_losses.iter().sum::<f64>() / chain_losses.len() as f64);
        Ok(RoundOutcome {
            round,
            train_loss,
            chains,
            samples_per_position,
        })
    }

    /// Runs rounds `1..=T`, evaluating the aggregated model on `eval`
    /// after each one. Every row is handed to `sink` as soon as it exists.
    pub fn run_training(
        &mut self,
        eval: &EvalSet,
        opts: &mut TrainingOptions<'_>,
        mut sink: impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let start = Instant::now();
        let mut rows = Vec::new();
        for round in 1..=self.config.rounds {
            let mut log = MessageLog::new(opts.trace.is_some());
            let outcome = self.run_round(round, &mut log)?;
            if let Some(out) = opts.trace.as_mut() {
                for line in log.take_lines() {
                    writeln!(out, "{line}")?;
                }
            }
            if let Some(ck) = &opts.checkpoint {
                if ck.every > 0 && round % ck.every == 0 {
                    write_checkpoints(&ck.dir, round, &self.global)?;
                }
            }
            let test_metric = eval.metric(&self.global.positions, opts.metric)?;
            let row = MetricsRow {
                round,
                train_loss: outcome.train_loss.unwrap_or(f64::NAN),
                test_metric,
                elapsed_ms: if opts.wall_clock {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            sink(&row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

pub fn checkpoint_path(dir: &std::path::Path, round: u64, position: usize) -> PathBuf {
    dir.join(format!("round{round:05}_pos{position}.ckpt"))
}

/// One named-buffer file per position.
pub fn write_checkpoints(dir: &std::path::Path, round: u64, model: &GlobalModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, p) in model.positions.iter().enumerate() {
        std::fs::write(checkpoint_path(dir, round, i + 1), p.to_bytes())?;
    }
    Ok(())
}
