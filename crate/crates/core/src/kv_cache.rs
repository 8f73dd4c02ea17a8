//! Streaming key/value memory that keeps each chunk at its original rotary
//! positions.
//!
//! Keys are stored after projection but before rotation, values before the
//! camera residual. Both are applied at read time from the stored positions
//! and pose descriptors.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::PoseDescriptor;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    Clean,
    Degraded,
    Noise,
}

/// What happens to dropped entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    #[default]
    Noise,
    Remove,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry<T> {
    pub chunk_id: usize,
    /// Per layer, `[frames * tokens, heads * head_dim]`.
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    pub frame_positions: Vec<usize>,
    pub pose_descriptors: Vec<PoseDescriptor>,
    pub reliability: Reliability,
    pub anchor: bool,
}

impl<T: Real> CacheEntry<T> {
    pub fn frames(&self) -> usize {
        self.frame_positions.len()
    }

    pub fn first_position(&self) -> usize {
        self.frame_positions[0]
    }

    pub fn last_position(&self) -> usize {
        self.frame_positions[self.frames() - 1]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.keys
            .first()
            .map_or(0, |k| k.rows() / self.frames().max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_positions.is_empty() {
            return Err(invalid(format!(
                "cache entry {} has no frames",
                self.chunk_id
            )));
        }
        if self.frame_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!(
                "cache entry {} positions not strictly increasing: {:?}",
                self.chunk_id, self.frame_positions
            )));
        }
        if self.pose_descriptors.len() != self.frames() {
            return Err(shape(format!(
                "cache entry {}: {} descriptors for {} frames",
                self.chunk_id,
                self.pose_descriptors.len(),
                self.frames()
            )));
        }
        if self.keys.len() != self.values.len() || self.keys.is_empty() {
            return Err(shape(
                "cache entry needs matching, non-empty key and value layers",
            ));
        }
        let rows = self.keys[0].rows();
        if rows == 0 || !rows.is_multiple_of(self.frames()) {
            return Err(shape(format!(
                "cache entry {}: {rows} key rows for {} frames",
                self.chunk_id,
                self.frames()
            )));
        }
        for (k, v) in self.keys.iter().zip(&self.values) {
            if k.shape() != self.keys[0].shape()
                || v.rows() != rows
                || k.shape().len() != 2
                || v.shape().len() != 2
            {
                return Err(shape(format!(
                    "cache entry {}: per-layer shapes disagree",
                    self.chunk_id
                )));
            }
        }
        Ok(())
    }
}

/// Entries with `chunk_id < up_to_chunk`, concatenated in position order.
#[derive(Clone, Debug, PartialEq)]
pub struct History<T> {
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    pub positions: Vec<usize>,
    pub descriptors: Vec<PoseDescriptor>,
    /// Source chunk of every frame.
    pub chunk_ids: Vec<usize>,
    pub reliability: Vec<Reliability>,
}

impl<T> History<T> {
    pub fn frames(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    layers: usize,
    entries: Vec<CacheEntry<T>>,
    next_write_chunk: usize,
    next_write_position: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(layers: usize) -> Self {
        Self {
            layers,
            entries: Vec::new(),
            next_write_chunk: 0,
            next_write_position: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn entries(&self) -> &[CacheEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_write_chunk(&self) -> usize {
        self.next_write_chunk
    }

    /// Frame position the next streamed chunk starts at.
    pub fn next_write_position(&self) -> usize {
        self.next_write_position
    }

    pub fn positions(&self) -> BTreeSet<usize> {
        self.entries
            .iter()
            .flat_map(|e| e.frame_positions.iter().copied())
            .collect()
    }

    pub fn write_chunk(&mut self, entry: CacheEntry<T>) -> Result<()> {
        entry.validate()?;
        if entry.keys.len() != self.layers {
            return Err(shape(format!(
                "entry has {} layers, cache has {}",
                entry.keys.len(),
                self.layers
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.keys[0].cols() != entry.keys[0].cols()
                || first.values[0].cols() != entry.values[0].cols()
            {
                return Err(shape("entry feature width differs from cached entries"));
            }
        }
        let taken = self.positions();
        if let Some(&p) = entry.frame_positions.iter().find(|p| taken.contains(p)) {
            return Err(Error::PositionCollision(p));
        }
        if self.entries.iter().any(|e| e.chunk_id == entry.chunk_id) {
            return Err(invalid(format!("chunk {} already cached", entry.chunk_id)));
        }
        self.next_write_chunk = self.next_write_chunk.max(entry.chunk_id + 1);
        self.next_write_position = self.next_write_position.max(entry.last_position() + 1);
        let at = self
            .entries
            .partition_point(|e| e.first_position() < entry.first_position());
        self.entries.insert(at, entry);
        Ok(())
    }

    pub fn read_history(&self, up_to_chunk: usize) -> Result<History<T>> {
        let selected: Vec<&CacheEntry<T>> = self
            .entries
            .iter()
            .filter(|e| e.chunk_id < up_to_chunk)
            .collect();
        let mut keys = Vec::with_capacity(self.layers);
        let mut values = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let ks: Vec<&Tensor<T>> = selected.iter().map(|e| &e.keys[l]).collect();
            let vs: Vec<&Tensor<T>> = selected.iter().map(|e| &e.values[l]).collect();
            if ks.is_empty() {
                keys.push(Tensor::zeros(&[0, 0]));
                values.push(Tensor::zeros(&[0, 0]));
            } else {
                keys.push(Tensor::concat_rows(&ks)?);
                values.push(Tensor::concat_rows(&vs)?);
            }
        }
        let mut h = History {
            keys,
            values,
            positions: Vec::new(),
            descriptors: Vec::new(),
            chunk_ids: Vec::new(),
            reliability: Vec::new(),
        };
        for e in selected {
            h.positions.extend_from_slice(&e.frame_positions);
            h.descriptors.extend_from_slice(&e.pose_descriptors);
            h.chunk_ids
                .extend(std::iter::repeat_n(e.chunk_id, e.frames()));
            h.reliability
                .extend(std::iter::repeat_n(e.reliability, e.frames()));
        }
        Ok(h)
    }

    /// Places reference chunks at positions `0..refs*m` and moves the write
    /// head to frame `gap * m`, chunk `gap`.
    pub fn prepend_reference(
        &mut self,
        refs: Vec<CacheEntry<T>>,
        gap: usize,
        frames_per_chunk: usize,
    ) -> Result<()> {
        let m = frames_per_chunk;
        if m == 0 {
            return Err(invalid("frames_per_chunk must be positive"));
        }
        if refs.is_empty() {
            return Err(invalid("reference prepending needs at least one chunk"));
        }
        if gap < refs.len() {
            return Err(invalid(format!(
                "gap of {gap} chunks overlaps {} reference chunks",
                refs.len()
            )));
        }
        if !self.entries.is_empty() {
            return Err(invalid(
                "reference chunks must be prepended before any target is written",
            ));
        }
        for (i, mut r) in refs.into_iter().enumerate() {
            if r.frames() != m {
                return Err(shape(format!(
                    "reference chunk has {} frames, expected {m}",
                    r.frames()
                )));
            }
            r.chunk_id = i;
            r.frame_positions = (i * m..(i + 1) * m).collect();
            self.write_chunk(r)?;
        }
        self.next_write_chunk = gap;
        self.next_write_position = gap * m;
        Ok(())
    }

    /// Replaces or removes the listed chunks. At least one anchor must remain.
    pub fn drop_nodes(
        &mut self,
        chunk_ids: &BTreeSet<usize>,
        policy: DropPolicy,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if chunk_ids.is_empty() {
            return Ok(());
        }
        let survives = self
            .entries
            .iter()
            .any(|e| e.anchor && !chunk_ids.contains(&e.chunk_id));
        if !survives {
            return Err(Error::ProtectedAnchor(format!("dropping {chunk_ids:?}")));
        }
        match policy {
            DropPolicy::Remove => self.entries.retain(|e| !chunk_ids.contains(&e.chunk_id)),
            DropPolicy::Noise => {
                for e in self
                    .entries
                    .iter_mut()
                    .filter(|e| chunk_ids.contains(&e.chunk_id))
                {
                    for t in e.keys.iter_mut().chain(e.values.iter_mut()) {
                        for x in t.data_mut() {
                            *x = T::of(rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                    e.reliability = Reliability::Noise;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_descriptor, CameraPose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(chunk_id: usize, positions: &[usize], anchor: bool) -> CacheEntry<f64> {
        let d = pose_descriptor(&CameraPose::identity()).unwrap();
        let n = positions.len() * 2;
        CacheEntry {
            chunk_id,
            keys: vec![Tensor::from_fn(n, 4, |r, c| {
                (chunk_id * 100 + r * 4 + c) as f64
            })],
            values: vec![Tensor::from_fn(n, 4, |r, c| {
                -((chunk_id * 100 + r * 4 + c) as f64)
            })],
            frame_positions: positions.to_vec(),
            pose_descriptors: vec![d; positions.len()],
            reliability: Reliability::Clean,
            anchor,
        }
    }

    #[test]
    fn unsorted_positions_are_rejected() {
        let mut c = KvCache::new(1);
        assert!(c.write_chunk(entry(0, &[2, 1, 3], false)).is_err());
        assert!(c.write_chunk(entry(0, &[1, 1, 3], false)).is_err());
    }

    #[test]
    fn entries_stay_sorted_by_position() {
        let mut c = KvCache::new(1);
        c.write_chunk(entry(1, &[6, 7, 8], false)).unwrap();
        c.write_chunk(entry(0, &[0, 1, 2], false)).unwrap();
        let firsts: Vec<usize> = c.entries().iter().map(|e| e.first_position()).collect();
        assert_eq!(firsts, vec![0, 6]);
        assert_eq!(c.next_write_position(), 9);
    }

    #[test]
    fn drop_noise_keeps_positions() {
        let mut c = KvCache::new(1);
        c.write_chunk(entry(0, &[0, 1, 2], true)).unwrap();
        c.write_chunk(entry(1, &[3, 4, 5], false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        c.drop_nodes(&BTreeSet::from([1]), DropPolicy::Noise, &mut rng)
            .unwrap();
        assert_eq!(c.entries()[1].reliability, Reliability::Noise);
        assert_eq!(c.entries()[1].frame_positions, vec![3, 4, 5]);
        c.drop_nodes(&BTreeSet::from([1]), DropPolicy::Remove, &mut rng)
            .unwrap();
        assert_eq!(c.len(), 1);
    }
}
