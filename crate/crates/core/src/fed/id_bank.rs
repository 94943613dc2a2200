use std::collections::{BTreeMap, BTreeSet};

use crate::data::{ClientId, SampleId};

/// Server-side registry of which clients hold which segments of each sample.
/// Only ids ever cross this interface; labels and features never do.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdBank {
    sample_ids: BTreeSet<SampleId>,
    segment_map: BTreeMap<SampleId, Vec<ClientId>>,
}

impl IdBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records that `client` produced the next segment of `sample`. An unseen
    /// sample starts a new list and its segment is position 1; a known sample
    /// appends the client and gets the next position.
    pub fn register_segment(&mut self, sample: SampleId, client: ClientId) -> usize {
        if self.sample_ids.insert(sample) {
            self.segment_map.insert(sample, vec![client]);
            1
        } else {
            let list = self
                .segment_map
                .get_mut(&sample)
                .expect("every registered sample has a segment list");
            list.push(client);
            list.len()
        }
    }

    pub fn contains(&self, sample: SampleId) -> bool {
        self.sample_ids.contains(&sample)
    }

    pub fn segments(&self, sample: SampleId) -> Option<&[ClientId]> {
        self.segment_map.get(&sample).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.sample_ids.iter().copied()
    }
}
