//! Run specification and the four training modes.
//!
//! | mode          | topology                                   |
//! |---------------|--------------------------------------------|
//! | `centralized` | one unsplit network, whole sequences       |
//! | `sl`          | one chain of `S` clients, no server        |
//! | `fedavg`      | `K` single-segment clients, server averages |
//! | `fedsl`       | `K / S` chains of `S` clients, server averages per position |

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use crate::cells::{
    backward_segment, batch_loss, forward_segment, output_forward, sgd_step, CellDims, CellKind,
    RecurrentState,
};
use crate::data::{
    assign_segments, load_idx_split, partition_iid, partition_noniid_shards, segment_lengths,
    synth_binary_task, DatasetSplit, SampleId, SequenceRecord, Sequencing, SynthConfig,
};
use crate::error::{Error, Result};
use crate::fed::{
    batch_order, derive_seed, CheckpointSpec, EvalSet, Federation, GlobalModel, IdBank,
    RoundConfig, TrainingOptions,
};
use crate::linalg::Matrix;
use crate::metrics::{CsvWriter, Metric, MetricsRow};
use crate::split::{sl_train_batch, ClientEndpoint, MessageLog};

/// Batch size used for test-set evaluation.
pub const EVAL_BATCH: usize = 256;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(Mode {
    Centralized => "centralized",
    Sl => "sl",
    Fedavg => "fedavg",
    Fedsl => "fedsl",
});

string_enum!(DatasetKind {
    MnistPixel => "mnist-pixel",
    MnistRow => "mnist-row",
    FashionRow => "fashion-row",
    Synthetic => "synthetic",
});

string_enum!(PartitionKind {
    Iid => "iid",
    Noniid => "noniid",
});

/// Shape of the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub steps: usize,
    pub features: usize,
    pub class_gap: f64,
    pub noise: f64,
    pub positive_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSpec {
            n_train: d.n_train,
            n_test: d.n_test,
            steps: d.steps,
            features: d.features,
            class_gap: d.class_gap,
            noise: d.noise,
            positive_rate: d.positive_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub mode: Mode,
    pub cell: CellKind,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Defaults to 2 for `sl` and `fedsl`. `fedavg` accepts only 1 and
    /// `centralized` ignores it.
    pub segments: Option<usize>,
    pub segment_lengths: Option<Vec<usize>>,
    pub clients: usize,
    pub frac: f64,
    pub rounds: u64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub partition: PartitionKind,
    pub shards_per_client: usize,
    pub seed: u64,
    pub init_seed: Option<u64>,
    pub sample_seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synth: SynthSpec,
    pub metric: Metric,
    /// Start every position from the same cell weights.
    pub tie_init: bool,
    pub parallel: bool,
    pub out: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub trace_messages: Option<PathBuf>,
    pub wall_clock: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            mode: Mode::Fedsl,
            cell: CellKind::Gru,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            segments: None,
            segment_lengths: None,
            clients: 10,
            frac: 1.0,
            rounds: 10,
            batch_size: 8,
            local_epochs: 1,
            lr: 0.1,
            hidden: 64,
            partition: PartitionKind::Iid,
            shards_per_client: 2,
            seed: 0,
            init_seed: None,
            sample_seed: None,
            data_seed: None,
            train_limit: None,
            test_limit: None,
            synth: SynthSpec::default(),
            metric: Metric::Accuracy,
            tie_init: false,
            parallel: false,
            out: None,
            checkpoint_every: None,
            checkpoint_dir: None,
            trace_messages: None,
            wall_clock: false,
        }
    }
}

/// Independent seed streams so one source of randomness can vary alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub sample: u64,
    pub data: u64,
}

impl RunSpec {
    pub fn seeds(&self) -> Seeds {
        Seeds {
            init: self
                .init_seed
                .unwrap_or_else(|| derive_seed(&[self.seed, 1])),
            sample: self
                .sample_seed
                .unwrap_or_else(|| derive_seed(&[self.seed, 2])),
            data: self
                .data_seed
                .unwrap_or_else(|| derive_seed(&[self.seed, 3])),
        }
    }

    /// Segment count after applying the mode rules.
    pub fn resolved_segments(&self) -> Result<usize> {
        let requested = self
            .segments
            .or(self.segment_lengths.as_ref().map(Vec::len));
        match self.mode {
            Mode::Centralized => Ok(1),
            Mode::Fedavg => match requested {
                None | Some(1) => Ok(1),
                Some(s) => Err(Error::Config(format!(
                    "fedavg requires exactly 1 segment, got {s}"
                ))),
            },
            Mode::Fedsl => match requested.unwrap_or(2) {
                s if s >= 2 => Ok(s),
                s => Err(Error::Config(format!(
                    "fedsl requires at least 2 segments, got {s}"
                ))),
            },
            Mode::Sl => match requested.unwrap_or(2) {
                0 => Err(Error::Config("sl needs at least 1 segment".into())),
                s => Ok(s),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let segments = self.resolved_segments()?;
        if self.batch_size == 0 || self.local_epochs == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "batch size, local epochs and hidden width must be positive".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if matches!(self.mode, Mode::Fedavg | Mode::Fedsl) {
            if !(self.frac > 0.0 && self.frac <= 1.0) {
                return Err(Error::Config(format!(
                    "--frac {} outside (0, 1]",
                    self.frac
                )));
            }
            if self.clients == 0 || !self.clients.is_multiple_of(segments) {
                return Err(Error::Config(format!(
                    "{} clients cannot form chains of {segments} consecutive clients",
                    self.clients
                )));
            }
        }
        if self.dataset != DatasetKind::Synthetic && self.data_dir.is_none() {
            return Err(Error::Config(format!(
                "dataset {} needs --data-dir",
                self.dataset
            )));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() && self.out.is_none() {
            return Err(Error::Config(
                "--checkpoint-every needs --checkpoint-dir or --out".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_dataset(spec: &RunSpec) -> Result<DatasetSplit> {
    let seq = match spec.dataset {
        DatasetKind::Synthetic => {
            let s = &spec.synth;
            return synth_binary_task(&SynthConfig {
                n_train: s.n_train,
                n_test: s.n_test,
                steps: s.steps,
                features: s.features,
                class_gap: s.class_gap,
                noise: s.noise,
                positive_rate: s.positive_rate,
                seed: spec.seeds().data,
            });
        }
        DatasetKind::MnistPixel => Sequencing::Pixel,
        DatasetKind::MnistRow | DatasetKind::FashionRow => Sequencing::Row,
    };
    let dir = spec
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config(format!("dataset {} needs --data-dir", spec.dataset)))?;
    load_idx_split(dir, seq, spec.train_limit, spec.test_limit)
}

/// Everything a run needs once the data is loaded.
struct Prepared {
    data: DatasetSplit,
    dims: CellDims,
    lengths: Vec<usize>,
    seeds: Seeds,
}

fn prepare(spec: &RunSpec) -> Result<Prepared> {
    spec.validate()?;
    let data = load_dataset(spec)?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Config(
            "dataset has an empty train or test split".into(),
        ));
    }
    let classes = data.class_count();
    if classes < 2 {
        return Err(Error::Config("dataset needs at least two classes".into()));
    }
    if spec.metric == Metric::Auc && classes > 2 {
        return Err(Error::Config(format!(
            "AUC needs a binary task, dataset has {classes} classes"
        )));
    }
    let dims = CellDims {
        input: data.feature_width(),
        hidden: spec.hidden,
        output: if classes == 2 { 1 } else { classes },
    };
    let lengths_override = match spec.mode {
        Mode::Centralized => None,
        _ => spec.segment_lengths.as_deref(),
    };
    let lengths = segment_lengths(data.steps(), spec.resolved_segments()?, lengths_override)?;
    Ok(Prepared {
        data,
        dims,
        lengths,
        seeds: spec.seeds(),
    })
}

fn train_ids(data: &DatasetSplit) -> Vec<SampleId> {
    let mut ids: Vec<SampleId> = data.train.iter().map(|r| r.sample_id).collect();
    ids.sort_unstable();
    ids
}

fn partition(
    spec: &RunSpec,
    data: &DatasetSplit,
    parts: usize,
    seed: u64,
) -> Result<Vec<Vec<SampleId>>> {
    match spec.partition {
        PartitionKind::Iid => partition_iid(&train_ids(data), parts, seed),
        PartitionKind::Noniid => {
            let labelled = data
                .train
                .iter()
                .map(|r| {
                    r.label.map(|l| (r.sample_id, l)).ok_or_else(|| {
                        Error::Config(format!("sample {} has no label", r.sample_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            partition_noniid_shards(&labelled, parts, spec.shards_per_client, seed)
        }
    }
}

/// Per-step batch matrices of whole sequences.
fn whole_sequence_steps(records: &[&SequenceRecord]) -> Vec<Matrix> {
    let steps = records[0].steps();
    (0..steps)
        .map(|t| {
            let rows: Vec<&[f64]> = records.iter().map(|r| r.features.row(t)).collect();
            Matrix::from_rows(&rows)
        })
        .collect()
}

type Sink<'a> = dyn FnMut(&MetricsRow) -> Result<()> + 'a;

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn elapsed_ms(&self) -> u64 {
        if self.enabled {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

fn run_centralized(
    spec: &RunSpec,
    prep: &Prepared,
    clock: &Clock,
    sink: &mut Sink<'_>,
) -> Result<Vec<MetricsRow>> {
    let mut params = GlobalModel::init(spec.cell, prep.dims, 1, prep.seeds.init, spec.tie_init)?
        .positions
        .remove(0);
    let by_id: HashMap<SampleId, &SequenceRecord> =
        prep.data.train.iter().map(|r| (r.sample_id, r)).collect();
    let ids = train_ids(&prep.data);
    let eval = EvalSet::new(&prep.data.test, &prep.lengths, EVAL_BATCH)?;
    let mut rows = Vec::new();
    for epoch in 1..=spec.rounds {
        let mut losses = Vec::new();
        for batch in batch_order(prep.seeds.sample, epoch, 0, 0, &ids, spec.batch_size) {
            let records: Vec<&SequenceRecord> = batch.iter().map(|id| by_id[id]).collect();
            let labels = records
                .iter()
                .map(|r| {
                    r.label.ok_or_else(|| {
                        Error::Config(format!("sample {} has no label", r.sample_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let steps = whole_sequence_steps(&records);
            let zeros = RecurrentState::zeros(spec.cell, records.len(), spec.hidden);
            let (state, tape) = forward_segment(&params, &zeros, &steps)?;
            let logits = output_forward(&params, &state)?;
            let (loss, grad_logits) = batch_loss(&logits, &labels)?;
            let (grads, _) = backward_segment(&params, &tape, &zeros, Some(&grad_logits))?;
            sgd_step(&mut params, &grads, spec.lr)?;
            losses.push(loss);
        }
        let row = MetricsRow {
            round: epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            test_metric: eval.metric(std::slice::from_ref(&params), spec.metric)?,
            elapsed_ms: clock.elapsed_ms(),
        };
        sink(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

fn run_sl(
    spec: &RunSpec,
    prep: &Prepared,
    clock: &Clock,
    trace: &mut Option<BufWriter<File>>,
    sink: &mut Sink<'_>,
) -> Result<Vec<MetricsRow>> {
    let segments = prep.lengths.len();
    let global = GlobalModel::init(
        spec.cell,
        prep.dims,
        segments,
        prep.seeds.init,
        spec.tie_init,
    )?;
    let mut bank = IdBank::new();
    let assignment = assign_segments(
        &prep.data.train,
        &[train_ids(&prep.data)],
        &prep.lengths,
        &mut bank,
    )?;
    let mut chain: Vec<ClientEndpoint> = assignment
        .clients
        .into_iter()
        .zip(global.positions)
        .map(|(d, p)| ClientEndpoint::from_data(d, p))
        .collect();
    let ids = chain[0].store.sample_ids();
    let eval = EvalSet::new(&prep.data.test, &prep.lengths, EVAL_BATCH)?;
    let mut rows = Vec::new();
    for round in 1..=spec.rounds {
        let mut log = MessageLog::new(trace.is_some());
        let mut losses = Vec::new();
        for epoch in 0..spec.local_epochs {
            for batch in batch_order(prep.seeds.sample, round, 0, epoch, &ids, spec.batch_size) {
                losses.push(sl_train_batch(
                    &mut chain, round, &batch, spec.lr, &mut log,
                )?);
            }
        }
        if let Some(out) = trace.as_mut() {
            for line in log.take_lines() {
                writeln!(out, "{line}")?;
            }
        }
        let positions: Vec<_> = chain.iter().map(|c| c.params.clone()).collect();
        let row = MetricsRow {
            round,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            test_metric: eval.metric(&positions, spec.metric)?,
            elapsed_ms: clock.elapsed_ms(),
        };
        sink(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

fn run_federated(
    spec: &RunSpec,
    prep: &Prepared,
    trace: &mut Option<BufWriter<File>>,
    sink: &mut Sink<'_>,
) -> Result<Vec<MetricsRow>> {
    let segments = prep.lengths.len();
    let config = RoundConfig {
        clients: spec.clients,
        frac: spec.frac,
        batch_size: spec.batch_size,
        local_epochs: spec.local_epochs,
        lr: spec.lr,
        rounds: spec.rounds,
        segments,
        seed: prep.seeds.sample,
        parallel: spec.parallel,
    };
    config.validate()?;
    let parts = partition(spec, &prep.data, config.chains(), prep.seeds.data)?;
    let mut bank = IdBank::new();
    let assignment = assign_segments(&prep.data.train, &parts, &prep.lengths, &mut bank)?;
    let global = GlobalModel::init(
        spec.cell,
        prep.dims,
        segments,
        prep.seeds.init,
        spec.tie_init,
    )?;
    let mut fed = Federation::new(config, global, assignment, bank)?;
    let eval = EvalSet::new(&prep.data.test, &prep.lengths, EVAL_BATCH)?;
    let checkpoint = spec.checkpoint_every.map(|every| CheckpointSpec {
        dir: spec
            .checkpoint_dir
            .clone()
            .or_else(|| spec.out.as_ref().map(|o| o.with_extension("ckpt.d")))
            .expect("validated"),
        every,
    });
    let mut opts = TrainingOptions {
        metric: spec.metric,
        checkpoint,
        trace: trace.as_mut().map(|w| w as &mut dyn Write),
        wall_clock: spec.wall_clock,
    };
    fed.run_training(&eval, &mut opts, |row| sink(row))
}

fn create(path: &std::path::Path) -> Result<File> {
    File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Runs `spec`, handing each metrics row to `sink` as it is produced.
pub fn run(
    spec: &RunSpec,
    mut sink: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    let clock = Clock {
        start: Instant::now(),
        enabled: spec.wall_clock,
    };
    let prep = prepare(spec)?;
    log::info!(
        "{} / {} on {}: {} train, {} test, segments {:?}",
        spec.mode,
        spec.cell,
        spec.dataset,
        prep.data.train.len(),
        prep.data.test.len(),
        prep.lengths
    );
    let mut trace = spec
        .trace_messages
        .as_deref()
        .map(|p| create(p).map(BufWriter::new))
        .transpose()?;
    let rows = match spec.mode {
        Mode::Centralized => run_centralized(spec, &prep, &clock, &mut sink),
        Mode::Sl => run_sl(spec, &prep, &clock, &mut trace, &mut sink),
        Mode::Fedavg | Mode::Fedsl => run_federated(spec, &prep, &mut trace, &mut sink),
    };
    if let Some(mut t) = trace {
        t.flush()?;
    }
    rows
}

/// Runs `spec` and streams the metrics table to `spec.out` when set.
pub fn execute(spec: &RunSpec) -> Result<Vec<MetricsRow>> {
    match &spec.out {
        Some(path) => {
            let mut csv = CsvWriter::new(BufWriter::new(create(path)?))?;
            run(spec, |row| csv.write_row(row))
        }
        None => run(spec, |_| Ok(())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: Mode) -> RunSpec {
        RunSpec {
            mode,
            hidden: 6,
            rounds: 3,
            clients: 4,
            lr: 0.2,
            synth: SynthSpec {
                n_train: 64,
                n_test: 32,
                steps: 8,
                features: 2,
                class_gap: 3.0,
                ..SynthSpec::default()
            },
            ..RunSpec::default()
        }
    }

    #[test]
    fn mode_rules() {
        let spec = |mode, segments| RunSpec {
            mode,
            segments,
            ..RunSpec::default()
        };
        assert!(spec(Mode::Fedavg, Some(2)).validate().is_err());
        assert_eq!(spec(Mode::Fedavg, None).resolved_segments().unwrap(), 1);
        assert!(spec(Mode::Fedsl, Some(1)).validate().is_err());
        assert_eq!(spec(Mode::Fedsl, None).resolved_segments().unwrap(), 2);
        assert_eq!(spec(Mode::Sl, Some(3)).resolved_segments().unwrap(), 3);
        assert_eq!(
            spec(Mode::Centralized, Some(2))
                .resolved_segments()
                .unwrap(),
            1
        );
        let odd = RunSpec {
            clients: 5,
            ..spec(Mode::Fedsl, Some(2))
        };
        assert!(odd.validate().is_err());
        let lengths = RunSpec {
            segment_lengths: Some(vec![4, 4, 8]),
            ..spec(Mode::Fedsl, None)
        };
        assert_eq!(lengths.resolved_segments().unwrap(), 3);
        let mnist = RunSpec {
            dataset: DatasetKind::MnistRow,
            ..RunSpec::default()
        };
        assert!(mnist.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), *m);
        }
        for d in DatasetKind::ALL {
            assert_eq!(d.to_string().parse::<DatasetKind>().unwrap(), *d);
        }
        assert!("fedprox".parse::<Mode>().is_err());
    }

    #[test]
    fn every_mode_runs() {
        for mode in Mode::ALL {
            let rows = run(&small(*mode), |_| Ok(())).unwrap();
            assert_eq!(rows.len(), 3, "{mode}");
            assert!(rows
                .iter()
                .all(|r| r.train_loss.is_finite() && (0.0..=1.0).contains(&r.test_metric)));
        }
    }

    #[test]
    fn seeds_are_separate_streams() {
        let s = RunSpec {
            seed: 5,
            ..RunSpec::default()
        }
        .seeds();
        assert!(s.init != s.sample && s.sample != s.data);
        let pinned = RunSpec {
            seed: 5,
            data_seed: Some(1),
            ..RunSpec::default()
        }
        .seeds();
        assert_eq!((pinned.init, pinned.data), (s.init, 1));
    }

    #[test]
    fn missing_idx_dir_names_the_path() {
        let spec = RunSpec {
            dataset: DatasetKind::MnistRow,
            data_dir: Some("/nonexistent/idx".into()),
            ..small(Mode::Fedsl)
        };
        let err = run(&spec, |_| Ok(())).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/idx"), "{err}");
    }

    #[test]
    fn auc_metric_on_binary_task() {
        let spec = RunSpec {
            metric: Metric::Auc,
            ..small(Mode::Fedsl)
        };
        let rows = run(&spec, |_| Ok(())).unwrap();
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.test_metric)));
    }
}
