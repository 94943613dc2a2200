//! Dataset ingestion, sequentialization, segment splitting and client
//! partitioning.

mod idx;
mod partition;
mod synth;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::fed::IdBank;
use crate::linalg::Matrix;

pub use idx::{
    load_idx, load_idx_split, parse_idx_images, parse_idx_labels, read_idx_header,
    to_pixel_sequence, to_row_sequence, IdxDataset, IdxHeader, Sequencing, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use partition::{partition_iid, partition_noniid_shards};
pub use synth::{read_flat_text, synth_binary_task, write_flat_text, SynthConfig};

pub type SampleId = u64;
pub type ClientId = usize;

/// One sample: `features` is `steps x feature_width`, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub sample_id: SampleId,
    pub features: Matrix,
    pub label: Option<usize>,
}

impl SequenceRecord {
    pub fn steps(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SequenceRecord>,
    pub test: Vec<SequenceRecord>,
}

impl DatasetSplit {
    pub fn steps(&self) -> usize {
        self.train.first().map_or(0, SequenceRecord::steps)
    }

    pub fn feature_width(&self) -> usize {
        self.train.first().map_or(0, SequenceRecord::feature_width)
    }

    /// Number of classes implied by the largest label seen.
    pub fn class_count(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .filter_map(|r| r.label)
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Segment lengths for a `steps`-long sequence cut into `segments` parts.
/// Without an override the remainder goes to the first segment.
pub fn segment_lengths(
    steps: usize,
    segments: usize,
    lengths_override: Option<&[usize]>,
) -> Result<Vec<usize>> {
    if segments == 0 {
        return Err(Error::Config("need at least one segment".into()));
    }
    if let Some(lengths) = lengths_override {
        if lengths.len() != segments {
            return Err(Error::Config(format!(
                "{} segment lengths given for {segments} segments",
                lengths.len()
            )));
        }
        if lengths.contains(&0) {
            return Err(Error::Config("segment lengths must be positive".into()));
        }
        let total: usize = lengths.iter().sum();
        if total != steps {
            return Err(Error::Config(format!(
                "segment lengths sum to {total}, sequence has {steps} steps"
            )));
        }
        return Ok(lengths.to_vec());
    }
    let base = steps / segments;
    if base == 0 {
        return Err(Error::Config(format!(
            "cannot cut {steps} steps into {segments} segments"
        )));
    }
    let mut out = vec![base; segments];
    out[0] = steps - (segments - 1) * base;
    Ok(out)
}

/// Cuts a record's features at the cumulative `lengths`.
pub fn split_features(features: &Matrix, lengths: &[usize]) -> Result<Vec<Matrix>> {
    let total: usize = lengths.iter().sum();
    if total != features.rows() {
        return Err(Error::Shape(format!(
            "segments cover {total} steps, record has {}",
            features.rows()
        )));
    }
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let m = features.slice_rows(start, len);
            start += len;
            m
        })
        .collect()
}

/// A segment held by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSegment {
    pub features: Matrix,
    pub label: Option<usize>,
}

/// A client's local data: its segments keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentStore {
    segments: BTreeMap<SampleId, StoredSegment>,
}

impl SegmentStore {
    pub fn insert(&mut self, id: SampleId, segment: StoredSegment) {
        self.segments.insert(id, segment);
    }

    pub fn get(&self, id: SampleId) -> Option<&StoredSegment> {
        self.segments.get(&id)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Sample ids in ascending order.
    pub fn sample_ids(&self) -> Vec<SampleId> {
        self.segments.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SampleId, &StoredSegment)> {
        self.segments.iter().map(|(&k, v)| (k, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPlacement {
    pub client_id: ClientId,
    pub position: usize,
    /// 1-based first time step.
    pub start_step: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAssignment {
    pub sample_id: SampleId,
    pub segments: Vec<SegmentPlacement>,
    pub label_holder: ClientId,
}

/// One client's share after segment assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: ClientId,
    pub position: usize,
    pub store: SegmentStore,
}

/// Output of [`assign_segments`]: client stores, chain membership and the
/// per-sample placement table.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub segment_lengths: Vec<usize>,
    /// `chains[c]` lists the clients of chain `c` in segment order.
    pub chains: Vec<Vec<ClientId>>,
    /// Indexed by client id.
    pub clients: Vec<ClientData>,
    pub samples: Vec<SegmentAssignment>,
}

impl Assignment {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn segments(&self) -> usize {
        self.segment_lengths.len()
    }
}

/// Splits every record of each chain's partition into `lengths.len()`
/// segments and hands segment `s` to the chain's `s`-th client. Chain `c`
/// is made of the consecutive clients `c·S .. c·S + S - 1`. Every
/// (sample, client) pair is registered with the ID bank in segment order and
/// only the last segment carries the label.
pub fn assign_segments(
    records: &[SequenceRecord],
    partition: &[Vec<SampleId>],
    lengths: &[usize],
    bank: &mut IdBank,
) -> Result<Assignment> {
    let segments = lengths.len();
    if segments == 0 {
        return Err(Error::Config("need at least one segment".into()));
    }
    let by_id: HashMap<SampleId, &SequenceRecord> =
        records.iter().map(|r| (r.sample_id, r)).collect();
    let mut clients = Vec::with_capacity(partition.len() * segments);
    let mut chains = Vec::with_capacity(partition.len());
    let mut samples = Vec::new();
    for (chain_idx, ids) in partition.iter().enumerate() {
        let members: Vec<ClientId> = (0..segments).map(|s| chain_idx * segments + s).collect();
        let mut stores = vec![SegmentStore::default(); segments];
        for &id in ids {
            let record = by_id
                .get(&id)
                .ok_or_else(|| Error::Config(format!("partition names unknown sample {id}")))?;
            let pieces = split_features(&record.features, lengths)?;
            let mut placements = Vec::with_capacity(segments);
            let mut start = 1;
            for (s, piece) in pieces.into_iter().enumerate() {
                let client = members[s];
                let position = bank.register_segment(id, client);
                if position != s + 1 {
                    return Err(Error::Config(format!(
                        "sample {id} already registered; segment {} landed at position {position}",
                        s + 1
                    )));
                }
                let label = if s + 1 == segments {
                    record.label
                } else {
                    None
                };
                stores[s].insert(
                    id,
                    StoredSegment {
                        features: piece,
                        label,
                    },
                );
                placements.push(SegmentPlacement {
                    client_id: client,
                    position,
                    start_step: start,
                    length: lengths[s],
                });
                start += lengths[s];
            }
            samples.push(SegmentAssignment {
                sample_id: id,
                segments: placements,
                label_holder: members[segments - 1],
            });
        }
        for (s, store) in stores.into_iter().enumerate() {
            clients.push(ClientData {
                client_id: members[s],
                position: s + 1,
                store,
            });
        }
        chains.push(members);
    }
    Ok(Assignment {
        segment_lengths: lengths.to_vec(),
        chains,
        clients,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: SampleId, steps: usize, label: usize) -> SequenceRecord {
        let data = (0..steps * 2)
            .map(|k| id as f64 * 1000.0 + k as f64)
            .collect();
        SequenceRecord {
            sample_id: id,
            features: Matrix::from_vec(steps, 2, data).unwrap(),
            label: Some(label),
        }
    }

    #[test]
    fn default_and_override_lengths() {
        assert_eq!(segment_lengths(784, 2, None).unwrap(), vec![392, 392]);
        assert_eq!(
            segment_lengths(784, 3, Some(&[264, 260, 260])).unwrap(),
            vec![264, 260, 260]
        );
        assert_eq!(segment_lengths(784, 3, None).unwrap(), vec![262, 261, 261]);
        assert_eq!(segment_lengths(28, 2, None).unwrap(), vec![14, 14]);
        assert_eq!(segment_lengths(5, 1, None).unwrap(), vec![5]);
        assert!(segment_lengths(784, 3, Some(&[264, 260, 259])).is_err());
        assert!(segment_lengths(784, 2, Some(&[784])).is_err());
        assert!(segment_lengths(2, 3, None).is_err());
        assert!(segment_lengths(4, 0, None).is_err());
    }

    #[test]
    fn two_segment_assignment() {
        let records: Vec<_> = (0..4).map(|i| record(i, 784, (i % 10) as usize)).collect();
        let partition = vec![vec![0, 1], vec![2, 3]];
        let mut bank = IdBank::new();
        let a = assign_segments(&records, &partition, &[392, 392], &mut bank).unwrap();
        assert_eq!(a.chains, vec![vec![0, 1], vec![2, 3]]);
        let s0 = &a.samples[0];
        assert_eq!(
            s0.segments[0],
            SegmentPlacement {
                client_id: 0,
                position: 1,
                start_step: 1,
                length: 392
            }
        );
        assert_eq!(
            s0.segments[1],
            SegmentPlacement {
                client_id: 1,
                position: 2,
                start_step: 393,
                length: 392
            }
        );
        assert_eq!(s0.label_holder, 1);
        assert_eq!(a.clients[0].store.get(0).unwrap().label, None);
        assert_eq!(a.clients[1].store.get(0).unwrap().label, Some(0));
        for s in &a.samples {
            assert_eq!(bank.segments(s.sample_id).unwrap().len(), 2);
            let ids: Vec<_> = s.segments.iter().map(|p| p.client_id).collect();
            assert_eq!(bank.segments(s.sample_id).unwrap(), &ids[..]);
        }
    }

    #[test]
    fn single_segment_is_partition() {
        let records: Vec<_> = (0..3).map(|i| record(i, 6, 1)).collect();
        let partition = vec![vec![0, 2], vec![1]];
        let a = assign_segments(&records, &partition, &[6], &mut IdBank::new()).unwrap();
        assert_eq!(a.clients.len(), 2);
        assert_eq!(a.clients[0].store.sample_ids(), vec![0, 2]);
        assert_eq!(a.clients[1].store.get(1).unwrap().label, Some(1));
        assert_eq!(
            a.clients[0].store.get(2).unwrap().features,
            records[2].features
        );
    }

    #[test]
    fn reconstruction_is_identity() {
        let records: Vec<_> = (0..6).map(|i| record(i, 11, 0)).collect();
        let partition = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let a = assign_segments(&records, &partition, &[5, 3, 3], &mut IdBank::new()).unwrap();
        for r in &records {
            let sa = a
                .samples
                .iter()
                .find(|s| s.sample_id == r.sample_id)
                .unwrap();
            let parts: Vec<&Matrix> = sa
                .segments
                .iter()
                .map(|p| {
                    &a.clients[p.client_id]
                        .store
                        .get(r.sample_id)
                        .unwrap()
                        .features
                })
                .collect();
            assert_eq!(Matrix::vstack(&parts).unwrap(), r.features);
        }
    }

    #[test]
    fn unknown_or_duplicate_samples_rejected() {
        let records: Vec<_> = (0..2).map(|i| record(i, 4, 0)).collect();
        assert!(assign_segments(&records, &[vec![9]], &[2, 2], &mut IdBank::new()).is_err());
        let mut bank = IdBank::new();
        bank.register_segment(0, 42);
        assert!(assign_segments(&records, &[vec![0]], &[2, 2], &mut bank).is_err());
    }
}
