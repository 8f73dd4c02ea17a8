use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use remind_core::geometry::{pose_descriptor, rot_z, CameraPose};
use remind_core::kv_cache::*;
use remind_core::numerics::Tensor;
use remind_core::Error;

const TOKENS: usize = 2;

fn entry(chunk_id: usize, positions: &[usize], anchor: bool) -> CacheEntry<f64> {
    let descs = positions
        .iter()
        .map(|&p| {
            pose_descriptor(&CameraPose::new(rot_z(p as f64 * 0.1), [0.0; 3], 1.0, 1.0)).unwrap()
        })
        .collect();
    let n = positions.len() * TOKENS;
    CacheEntry {
        chunk_id,
        keys: (0..2)
            .map(|l| Tensor::from_fn(n, 4, |r, c| (l * 1000 + chunk_id * 100 + r * 4 + c) as f64))
            .collect(),
        values: (0..2)
            .map(|l| {
                Tensor::from_fn(n, 4, |r, c| {
                    -((l * 1000 + chunk_id * 100 + r * 4 + c) as f64)
                })
            })
            .collect(),
        frame_positions: positions.to_vec(),
        pose_descriptors: descs,
        reliability: Reliability::Clean,
        anchor,
    }
}

#[test]
fn first_write_creates_one_entry() {
    let mut c = KvCache::new(2);
    c.write_chunk(entry(0, &[0, 1, 2], false)).unwrap();
    assert_eq!(c.len(), 1);
}

#[test]
fn gapped_write_preserves_positions() {
    let mut c = KvCache::new(2);
    c.write_chunk(entry(0, &[0, 1, 2], false)).unwrap();
    c.write_chunk(entry(4, &[12, 13, 14], false)).unwrap();
    assert_eq!(c.len(), 2);
    let h = c.read_history(10).unwrap();
    assert_eq!(h.positions, vec![0, 1, 2, 12, 13, 14]);
    assert_eq!(h.chunk_ids, vec![0, 0, 0, 4, 4, 4]);
}

#[test]
fn rewriting_positions_collides() {
    let mut c = KvCache::new(2);
    c.write_chunk(entry(0, &[0, 1, 2], false)).unwrap();
    let err = c.write_chunk(entry(1, &[0, 1, 2], false)).unwrap_err();
    assert!(matches!(err, Error::PositionCollision(0)));
    let err = c.write_chunk(entry(1, &[2, 3, 4], false)).unwrap_err();
    assert!(matches!(err, Error::PositionCollision(2)));
}

#[test]
fn empty_history_before_first_chunk() {
    let mut c = KvCache::new(2);
    c.write_chunk(entry(0, &[0, 1, 2], false)).unwrap();
    let h = c.read_history(0).unwrap();
    assert!(h.is_empty());
    assert_eq!(h.keys.len(), 2);
}

#[test]
fn history_concatenates_in_position_order() {
    let mut c = KvCache::new(2);
    let a = entry(0, &[0, 1, 2], false);
    let b = entry(1, &[3, 4], false);
    c.write_chunk(b.clone()).unwrap();
    c.write_chunk(a.clone()).unwrap();
    let h = c.read_history(2).unwrap();
    assert_eq!(h.frames(), 5);
    for l in 0..2 {
        assert_eq!(h.keys[l].rows(), 5 * TOKENS);
        let expect = Tensor::concat_rows(&[&a.keys[l], &b.keys[l]]).unwrap();
        assert_eq!(h.keys[l], expect);
        let expect = Tensor::concat_rows(&[&a.values[l], &b.values[l]]).unwrap();
        assert_eq!(h.values[l], expect);
    }
    let descs: Vec<_> = a
        .pose_descriptors
        .iter()
        .chain(&b.pose_descriptors)
        .copied()
        .collect();
    assert_eq!(h.descriptors, descs);
    // only chunk 0 precedes chunk 1
    assert_eq!(c.read_history(1).unwrap().positions, vec![0, 1, 2]);
}

#[test]
fn repeated_reads_are_identical() {
    let mut c = KvCache::new(2);
    c.write_chunk(entry(0, &[0, 1, 2], false)).unwrap();
    c.write_chunk(entry(3, &[9, 10, 11], false)).unwrap();
    let a = c.read_history(5).unwrap();
    let b = c.read_history(5).unwrap();
    assert_eq!(a, b);
    let bits = |h: &History<f64>| {
        h.keys
            .iter()
            .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn reference_gap_of_four_starts_targets_at_twelve() {
    let mut c = KvCache::new(2);
    c.prepend_reference(vec![entry(99, &[30, 31, 32], true)], 4, 3)
        .unwrap();
    assert_eq!(c.read_history(4).unwrap().positions, vec![0, 1, 2]);
    assert_eq!(c.next_write_position(), 12);
    assert_eq!(c.next_write_chunk(), 4);
    let target_start = c.next_write_position();
    c.write_chunk(entry(
        4,
        &[target_start, target_start + 1, target_start + 2],
        false,
    ))
    .unwrap();
    let h = c.read_history(5).unwrap();
    assert_eq!(h.positions, vec![0, 1, 2, 12, 13, 14]);
}

#[test]
fn unit_gap_abuts_reference() {
    let mut c = KvCache::new(2);
    c.prepend_reference(vec![entry(0, &[0, 1, 2], true)], 1, 3)
        .unwrap();
    assert_eq!(c.next_write_position(), 3);
}

#[test]
fn two_references_with_gap_four() {
    let mut c = KvCache::new(2);
    let refs = vec![
        entry(7, &[21, 22, 23], true),
        entry(8, &[24, 25, 26], false),
    ];
    c.prepend_reference(refs, 4, 3).unwrap();
    assert_eq!(
        c.positions().into_iter().collect::<Vec<_>>(),
        vec![0, 1, 2, 3, 4, 5]
    );
    assert_eq!(c.next_write_position(), 12);
    let mut c = KvCache::new(2);
    let refs = vec![entry(7, &[0, 1, 2], true), entry(8, &[3, 4, 5], false)];
    assert!(c.prepend_reference(refs, 1, 3).is_err());
}

#[test]
fn reference_after_targets_is_rejected() {
    let mut c = KvCache::new(2);
    c.write_chunk(entry(4, &[12, 13, 14], false)).unwrap();
    assert!(c
        .prepend_reference(vec![entry(0, &[0, 1, 2], true)], 4, 3)
        .is_err());
}

fn three_chunk_cache() -> KvCache<f64> {
    let mut c = KvCache::new(2);
    c.write_chunk(entry(0, &[0, 1, 2], true)).unwrap();
    c.write_chunk(entry(1, &[3, 4, 5], false)).unwrap();
    c.write_chunk(entry(2, &[6, 7, 8], false)).unwrap();
    c
}

#[test]
fn empty_drop_set_is_a_no_op() {
    let mut c = three_chunk_cache();
    let before = c.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.drop_nodes(&BTreeSet::new(), DropPolicy::Noise, &mut rng)
        .unwrap();
    assert_eq!(c, before);
}

#[test]
fn dropping_interruption_leaves_anchor_and_recovery() {
    let mut c = three_chunk_cache();
    let before = c.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.drop_nodes(&BTreeSet::from([1]), DropPolicy::Noise, &mut rng)
        .unwrap();
    assert_eq!(c.entries()[0], before.entries()[0]);
    assert_eq!(c.entries()[2], before.entries()[2]);
    assert_eq!(c.entries()[1].reliability, Reliability::Noise);
    assert_ne!(c.entries()[1].values, before.entries()[1].values);
}

#[test]
fn dropping_every_anchor_is_refused() {
    let mut c = three_chunk_cache();
    let before = c.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = c
        .drop_nodes(&BTreeSet::from([0, 1, 2]), DropPolicy::Remove, &mut rng)
        .unwrap_err();
    assert!(matches!(err, Error::ProtectedAnchor(_)));
    assert_eq!(c, before);
}

#[test]
fn noise_replacement_is_roughly_unit_gaussian() {
    let mut c = KvCache::new(1);
    let mut big = entry(1, &[3], false);
    big.keys = vec![Tensor::zeros(&[4000, 4])];
    big.values = vec![Tensor::zeros(&[4000, 4])];
    c.write_chunk(entry(0, &[0], true).clone_layer0()).unwrap();
    c.write_chunk(big).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    c.drop_nodes(&BTreeSet::from([1]), DropPolicy::Noise, &mut rng)
        .unwrap();
    let v = c.entries()[1].values[0].data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "var {var}");
}

trait Layer0 {
    fn clone_layer0(self) -> Self;
}

impl Layer0 for CacheEntry<f64> {
    fn clone_layer0(mut self) -> Self {
        self.keys.truncate(1);
        self.values.truncate(1);
        self
    }
}

proptest! {
    #[test]
    fn writes_keep_positions_unique_and_sorted(starts in proptest::collection::vec(0usize..40, 1..12)) {
        let mut c = KvCache::new(2);
        for (i, s) in starts.iter().enumerate() {
            let _ = c.write_chunk(entry(i, &[*s, s + 1], false));
        }
        let all: Vec<usize> = c.entries().iter().flat_map(|e| e.frame_positions.clone()).collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(all, sorted);
    }
}
