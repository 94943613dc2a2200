//! Synthetic binary sequence task.
//!
//! Every step of every sample carries Gaussian noise. In the final quarter of
//! the steps the mean of all features shifts by `+class_gap/2` for the
//! positive class and `-class_gap/2` for the negative class, so the label is
//! only visible to whoever holds the last segment.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{DatasetSplit, SampleId, SequenceRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub steps: usize,
    pub features: usize,
    pub class_gap: f64,
    pub noise: f64,
    /// Probability of the positive class.
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 400,
            n_test: 200,
            steps: 16,
            features: 4,
            class_gap: 1.0,
            noise: 1.0,
            positive_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// First 0-based step of the label-bearing window.
    pub fn signal_start(&self) -> usize {
        self.steps - (self.steps / 4).max(1)
    }
}

pub fn synth_binary_task(cfg: &SynthConfig) -> Result<DatasetSplit> {
    if cfg.steps == 0 || cfg.features == 0 {
        return Err(Error::Config(
            "synthetic task needs steps and features".into(),
        ));
    }
    if cfg.class_gap.is_nan() || cfg.noise.is_nan() || cfg.class_gap < 0.0 || cfg.noise < 0.0 {
        return Err(Error::Config(
            "class gap and noise must be non-negative".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.positive_rate) {
        return Err(Error::Config("positive rate must lie in [0, 1]".into()));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = cfg.signal_start();
    let mut make = |id: SampleId| {
        let label = usize::from(rng.gen_bool(cfg.positive_rate));
        let shift = if label == 1 {
            cfg.class_gap / 2.0
        } else {
            -cfg.class_gap / 2.0
        };
        let mut data = Vec::with_capacity(cfg.steps * cfg.features);
        for t in 0..cfg.steps {
            let mean = if t >= start { shift } else { 0.0 };
            for _ in 0..cfg.features {
                data.push(mean + noise.sample(&mut rng));
            }
        }
        SequenceRecord {
            sample_id: id,
            features: Matrix::from_vec(cfg.steps, cfg.features, data).expect("sized"),
            label: Some(label),
        }
    };
    let train = (0..cfg.n_train as SampleId).map(&mut make).collect();
    let test = (cfg.n_train as SampleId..(cfg.n_train + cfg.n_test) as SampleId)
        .map(&mut make)
        .collect();
    Ok(DatasetSplit { train, test })
}

/// Writes records as text: a header line, then one
/// `sample_id,label,v0,v1,...` line per sample with values row-major.
pub fn write_flat_text(records: &[SequenceRecord], out: &mut impl Write) -> Result<()> {
    let (steps, features) = records
        .first()
        .map_or((0, 0), |r| (r.steps(), r.feature_width()));
    writeln!(
        out,
        "# sequences count={} steps={steps} features={features}",
        records.len()
    )?;
    for r in records {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        write!(out, "{},{label}", r.sample_id)?;
        for v in r.features.data() {
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_flat_text(input: impl BufRead) -> Result<Vec<SequenceRecord>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty sequence file".into()))??;
    let field = |key: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
            .ok_or_else(|| Error::Format(format!("header lacks `{key}`")))?
            .parse()
            .map_err(|e| Error::Format(format!("header `{key}`: {e}")))
    };
    let (count, steps, features) = (field("count")?, field("steps")?, field("features")?);
    let mut out = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        let mut parts = line.split(',');
        let bad = |what: &str| Error::Format(format!("bad {what} in `{line}`"));
        let sample_id = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("sample id"))?;
        let label = match parts.next().ok_or_else(|| bad("label"))? {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("label"))?),
        };
        let values = parts
            .map(|s| s.parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        out.push(SequenceRecord {
            sample_id,
            features: Matrix::from_vec(steps, features, values)?,
            label,
        });
    }
    if out.len() != count {
        return Err(Error::Format(format!(
            "header promises {count} records, found {}",
            out.len()
        )));
    }
    Ok(out)
}
