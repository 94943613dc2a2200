use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::SampleId;

/// Shuffles the ids with `seed` and deals them round-robin to `parts`
/// owners, so list sizes differ by at most one.
pub fn partition_iid(ids: &[SampleId], parts: usize, seed: u64) -> Result<Vec<Vec<SampleId>>> {
    if parts == 0 || parts > ids.len() {
        return Err(Error::Config(format!(
            "cannot partition {} samples across {parts} owners",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); parts];
    for (i, id) in shuffled.into_iter().enumerate() {
        out[i % parts].push(id);
    }
    Ok(out)
}

/// Label-sorted shards: sorts `(id, label)` pairs by label, cuts them into
/// `parts * shards_per_owner` contiguous shards (sizes within one of each
/// other) and gives each owner `shards_per_owner` shards chosen at random.
pub fn partition_noniid_shards(
    labelled: &[(SampleId, usize)],
    parts: usize,
    shards_per_owner: usize,
    seed: u64,
) -> Result<Vec<Vec<SampleId>>> {
    let shards = parts * shards_per_owner;
    if parts == 0 || shards_per_owner == 0 {
        return Err(Error::Config(
            "need at least one owner and one shard each".into(),
        ));
    }
    if labelled.len() < shards {
        return Err(Error::Config(format!(
            "{} samples cannot fill {shards} shards",
            labelled.len()
        )));
    }
    let mut sorted = labelled.to_vec();
    sorted.sort_by_key(|&(id, label)| (label, id));

    let base = sorted.len() / shards;
    let extra = sorted.len() % shards;
    let mut bounds = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        bounds.push((start, start + len));
        start += len;
    }

    let mut order: Vec<usize> = (0..shards).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let out = order
        .chunks(shards_per_owner)
        .map(|owned| {
            let mut ids: Vec<SampleId> = owned
                .iter()
                .flat_map(|&s| sorted[bounds[s].0..bounds[s].1].iter().map(|&(id, _)| id))
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    fn assert_exact_cover(parts: &[Vec<SampleId>], ids: &[SampleId]) {
        let mut all: Vec<SampleId> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        let mut want = ids.to_vec();
        want.sort_unstable();
        assert_eq!(all, want);
    }

    #[test]
    fn iid_single_owner() {
        let ids: Vec<SampleId> = (0..10).collect();
        let p = partition_iid(&ids, 1, 3).unwrap();
        assert_eq!(p.len(), 1);
        assert_exact_cover(&p, &ids);
    }

    #[test]
    fn iid_balanced_and_complete() {
        let ids: Vec<SampleId> = (0..100).collect();
        let p = partition_iid(&ids, 7, 11).unwrap();
        let sizes: Vec<usize> = p.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_exact_cover(&p, &ids);
        assert_eq!(p, partition_iid(&ids, 7, 11).unwrap());
        assert_ne!(p, partition_iid(&ids, 7, 12).unwrap());
        assert!(partition_iid(&ids[..3], 4, 0).is_err());
    }

    #[test]
    fn two_classes_one_shard_each() {
        let labelled: Vec<(SampleId, usize)> = (0..20).map(|i| (i, (i % 2) as usize)).collect();
        let p = partition_noniid_shards(&labelled, 2, 1, 5).unwrap();
        let label: HashMap<SampleId, usize> = labelled.iter().copied().collect();
        for owner in &p {
            let classes: BTreeSet<usize> = owner.iter().map(|id| label[id]).collect();
            assert_eq!(classes.len(), 1);
        }
    }

    #[test]
    fn shards_cover_everything_once() {
        let labelled: Vec<(SampleId, usize)> =
            (0..103).map(|i| (i, (i * 7 % 10) as usize)).collect();
        let p = partition_noniid_shards(&labelled, 5, 3, 9).unwrap();
        let ids: Vec<SampleId> = labelled.iter().map(|&(id, _)| id).collect();
        assert_exact_cover(&p, &ids);
        assert!(partition_noniid_shards(&labelled[..10], 5, 3, 9).is_err());
    }

    #[test]
    fn class_pure_shards_bound_label_diversity() {
        // 10 classes x 20 samples, 20 shards of 10: every shard is class-pure
        let labelled: Vec<(SampleId, usize)> = (0..200).map(|i| (i, (i % 10) as usize)).collect();
        let label: HashMap<SampleId, usize> = labelled.iter().copied().collect();
        for seed in 0..10 {
            let p = partition_noniid_shards(&labelled, 10, 2, seed).unwrap();
            for owner in &p {
                let classes: BTreeSet<usize> = owner.iter().map(|id| label[id]).collect();
                assert!(classes.len() <= 2);
            }
        }
    }
}
