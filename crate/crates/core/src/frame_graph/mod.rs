//! Frame graphs over latent chunks, and the synthetic worlds that produce them.

mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::nearest_pose_index;
use crate::numerics::{Real, Tensor};

pub use synth::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Anchor,
    Interruption,
    Recovery,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub chunk_id: usize,
    pub role: NodeRole,
    pub protected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGraph {
    pub nodes: Vec<GraphNode>,
    /// `(i, i + 1)` for consecutive chunks.
    pub chain_edges: Vec<(usize, usize)>,
    /// `(recovery, anchor)` pairs.
    pub memory_edges: Vec<(usize, usize)>,
    /// Inclusive chunk range of degraded observations.
    pub degradation_interval: Option<(usize, usize)>,
}

impl FrameGraph {
    /// Chain of plain nodes.
    pub fn plain(num_chunks: usize) -> Self {
        Self {
            nodes: (0..num_chunks)
                .map(|chunk_id| GraphNode {
                    chunk_id,
                    role: NodeRole::Plain,
                    protected: false,
                })
                .collect(),
            chain_edges: (1..num_chunks).map(|i| (i - 1, i)).collect(),
            memory_edges: Vec::new(),
            degradation_interval: None,
        }
    }

    /// Anchor directly before `[start, end]`, recovery directly after it
    /// unless `recovery` says otherwise or the clip ends first.
    pub fn with_interruption(
        num_chunks: usize,
        start: usize,
        end: usize,
        recovery: Option<usize>,
    ) -> Result<Self> {
        if start == 0 {
            return Err(Error::Graph(
                "degradation starts at the first chunk, leaving no clean anchor".into(),
            ));
        }
        if start > end || end >= num_chunks {
            return Err(Error::Graph(format!(
                "degradation interval [{start}, {end}] invalid for {num_chunks} chunks"
            )));
        }
        let mut g = Self::plain(num_chunks);
        let anchor = start - 1;
        g.nodes[anchor].role = NodeRole::Anchor;
        g.nodes[anchor].protected = true;
        for n in &mut g.nodes[start..=end] {
            n.role = NodeRole::Interruption;
        }
        let recovery = recovery.or(if end + 1 < num_chunks {
            Some(end + 1)
        } else {
            None
        });
        if let Some(r) = recovery {
            if r <= end || r >= num_chunks {
                return Err(Error::Graph(format!(
                    "recovery chunk {r} not after interval end {end}"
                )));
            }
            g.nodes[r].role = NodeRole::Recovery;
            g.memory_edges.push((r, anchor));
        }
        g.degradation_interval = Some((start, end));
        g.validate()?;
        Ok(g)
    }

    pub fn num_chunks(&self) -> usize {
        self.nodes.len()
    }

    fn with_role(&self, role: NodeRole) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.role == role)
            .map(|n| n.chunk_id)
            .collect()
    }

    pub fn anchors(&self) -> Vec<usize> {
        self.with_role(NodeRole::Anchor)
    }

    pub fn interruptions(&self) -> Vec<usize> {
        self.with_role(NodeRole::Interruption)
    }

    pub fn recoveries(&self) -> Vec<usize> {
        self.with_role(NodeRole::Recovery)
    }

    pub fn protected(&self) -> BTreeSet<usize> {
        self.nodes
            .iter()
            .filter(|n| n.protected)
            .map(|n| n.chunk_id)
            .collect()
    }

    pub fn role(&self, chunk: usize) -> Option<NodeRole> {
        self.nodes.get(chunk).map(|n| n.role)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Graph(m));
        for (i, n) in self.nodes.iter().enumerate() {
            if n.chunk_id != i {
                return bad(format!("node {i} carries chunk id {}", n.chunk_id));
            }
        }
        let n = self.nodes.len();
        let expected: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        if self.chain_edges != expected {
            return bad("chain edges must link consecutive chunks".into());
        }
        let interruptions = self.interruptions();
        if !interruptions.is_empty()
            && !self
                .nodes
                .iter()
                .any(|n| n.role == NodeRole::Anchor && n.protected)
        {
            return bad("interruptions present without a protected anchor".into());
        }
        for r in self.recoveries() {
            let ok = self
                .memory_edges
                .iter()
                .any(|&(from, to)| from == r && to < r && self.role(to) == Some(NodeRole::Anchor));
            if !ok {
                return bad(format!(
                    "recovery {r} lacks a memory edge to an earlier anchor"
                ));
            }
        }
        for &(from, to) in &self.memory_edges {
            if self.role(from) != Some(NodeRole::Recovery)
                || self.role(to) != Some(NodeRole::Anchor)
            {
                return bad(format!("memory edge {from}->{to} must go recovery->anchor"));
            }
            if let Some((s, e)) = self.degradation_interval {
                if !(to < s && e < from) {
                    return bad(format!(
                        "degradation [{s}, {e}] not strictly between anchor {to} and recovery {from}"
                    ));
                }
            }
        }
        match self.degradation_interval {
            Some((s, e)) => {
                if s > e || e >= n {
                    return bad(format!("degradation interval [{s}, {e}] out of range"));
                }
                let covered: Vec<usize> = (s..=e).collect();
                if covered != interruptions {
                    return bad("interruption nodes differ from the degradation interval".into());
                }
            }
            None => {
                if !interruptions.is_empty() {
                    return bad("interruption nodes without a degradation interval".into());
                }
            }
        }
        Ok(())
    }
}

/// Derives the frame graph of a clip from its interruption window.
pub fn build_graph(clip: &SyntheticClip, spec: Option<&InterruptionSpec>) -> Result<FrameGraph> {
    let m = clip.frames_per_chunk;
    let chunks = clip.num_chunks();
    let Some(spec) = spec.filter(|s| s.duration > 0) else {
        return Ok(FrameGraph::plain(chunks));
    };
    let frames = chunks * m;
    if spec.onset + spec.duration > frames {
        return Err(invalid(format!(
            "interruption window {}..{} exceeds {frames} frames",
            spec.onset,
            spec.onset + spec.duration
        )));
    }
    let start = spec.onset / m;
    let end = (spec.onset + spec.duration - 1) / m;
    if start == 0 {
        return Err(Error::Graph(
            "interruption window leaves no clean anchor chunk".into(),
        ));
    }
    let recovery = match spec.kind {
        InterruptionKind::CameraLoop => {
            // loop-return point: closest pose to the initial view after the turn
            let turn = spec.onset + spec.duration / 2;
            let ret = nearest_pose_index(&clip.poses, &clip.poses[0], turn)?;
            let chunk = ret / m;
            if chunk > end {
                Some(chunk)
            } else if end + 1 < chunks {
                Some(end + 1)
            } else {
                None
            }
        }
        _ => None,
    };
    FrameGraph::with_interruption(chunks, start, end, recovery)
}

/// Groups `[frames, ...]` into `[chunks, frames_per_chunk, ...]`, repeating
/// the last frame to fill an incomplete final chunk.
pub fn chunk_clip<T: Real>(frames: &Tensor<T>, frames_per_chunk: usize) -> Result<Tensor<T>> {
    if frames_per_chunk == 0 {
        return Err(invalid("frames_per_chunk must be positive"));
    }
    let shape = frames.shape();
    let Some((&n, rest)) = shape.split_first() else {
        return Err(invalid("chunk_clip needs a frame axis"));
    };
    if n == 0 {
        return Err(invalid("chunk_clip needs at least one frame"));
    }
    let per_frame: usize = rest.iter().product();
    let chunks = n.div_ceil(frames_per_chunk);
    let mut data = frames.data().to_vec();
    let last = frames.data()[(n - 1) * per_frame..].to_vec();
    for _ in n..chunks * frames_per_chunk {
        data.extend_from_slice(&last);
    }
    let mut out_shape = vec![chunks, frames_per_chunk];
    out_shape.extend_from_slice(rest);
    Tensor::new(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_graph_has_no_memory_edges() {
        let g = FrameGraph::plain(7);
        assert!(g.validate().is_ok());
        assert!(g.memory_edges.is_empty());
        assert!(g.nodes.iter().all(|n| n.role == NodeRole::Plain));
    }

    #[test]
    fn interruption_over_chunks_two_to_four() {
        let g = FrameGraph::with_interruption(7, 2, 4, None).unwrap();
        assert_eq!(g.anchors(), vec![1]);
        assert_eq!(g.interruptions(), vec![2, 3, 4]);
        assert_eq!(g.recoveries(), vec![5]);
        assert_eq!(g.memory_edges, vec![(5, 1)]);
        assert!(g.nodes[1].protected);
    }

    #[test]
    fn validation_catches_broken_graphs() {
        let mut g = FrameGraph::with_interruption(7, 2, 4, None).unwrap();
        g.nodes[1].protected = false;
        assert!(g.validate().is_err());

        let mut g = FrameGraph::with_interruption(7, 2, 4, None).unwrap();
        g.memory_edges.clear();
        assert!(g.validate().is_err());

        assert!(FrameGraph::with_interruption(7, 0, 2, None).is_err());
        assert!(FrameGraph::with_interruption(7, 3, 2, None).is_err());
    }

    #[test]
    fn window_reaching_clip_end_has_no_recovery() {
        let g = FrameGraph::with_interruption(4, 2, 3, None).unwrap();
        assert!(g.recoveries().is_empty());
        assert_eq!(g.anchors(), vec![1]);
    }

    #[test]
    fn chunking_examples() {
        let frames = Tensor::<f64>::from_fn(21, 2, |r, c| (r * 2 + c) as f64);
        let c = chunk_clip(&frames.clone().reshape(vec![21, 2]).unwrap(), 3).unwrap();
        assert_eq!(c.shape(), &[7, 3, 2]);

        let three = Tensor::<f64>::zeros(&[3, 4]);
        assert_eq!(chunk_clip(&three, 3).unwrap().shape(), &[1, 3, 4]);

        let twenty = Tensor::<f64>::from_fn(20, 1, |r, _| r as f64);
        let c = chunk_clip(&twenty, 3).unwrap();
        assert_eq!(c.shape(), &[7, 3, 1]);
        assert_eq!(&c.data()[18..], &[18.0, 19.0, 19.0]);

        assert!(chunk_clip(&three, 0).is_err());
    }
}
