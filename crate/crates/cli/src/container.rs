//! RMDS: the tensor container used for datasets and generated rollouts.
//!
//! Layout: `b"RMDS"`, u32 version, u64 header length, JSON header, the
//! tensors as little-endian f32 in header order, then a SHA-256 digest of
//! everything before it.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use remind_core::frame_graph::{
    FrameGraph, FrameView, InterruptionSpec, Scenario, SceneParams, SyntheticClip, WorldConfig,
};
use remind_core::geometry::CameraPose;
use remind_core::numerics::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Provenance;

pub const MAGIC: &[u8; 4] = b"RMDS";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub const DATASET_KIND: &str = "dataset";
pub const ROLLOUT_KIND: &str = "rollout";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub provenance: Provenance,
    pub tensors: Vec<TensorRecord>,
    pub payload_bytes: u64,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Header,
    pub tensors: Vec<Tensor<f64>>,
}

impl Container {
    pub fn new(
        kind: &str,
        provenance: Provenance,
        meta: serde_json::Value,
        named: Vec<(String, Tensor<f64>)>,
    ) -> Self {
        let tensors: Vec<TensorRecord> = named
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let payload_bytes = named.iter().map(|(_, t)| 4 * t.data().len() as u64).sum();
        Self {
            header: Header {
                kind: kind.to_string(),
                provenance,
                tensors,
                payload_bytes,
                meta,
            },
            tensors: named.into_iter().map(|(_, t)| t).collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out =
            Vec::with_capacity(16 + json.len() + self.header.payload_bytes as usize + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= 16 + DIGEST_LEN && &bytes[..4] == MAGIC,
            "not an RMDS container"
        );
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        ensure!(
            Sha256::digest(body).as_slice() == digest,
            "RMDS checksum mismatch"
        );
        let version = u32::from_le_bytes(body[4..8].try_into()?);
        ensure!(
            version == VERSION,
            "RMDS version {version}, expected {VERSION}"
        );
        let len = usize::try_from(u64::from_le_bytes(body[8..16].try_into()?))?;
        let rest = &body[16..];
        ensure!(
            len <= rest.len(),
            "RMDS header length {len} exceeds the file"
        );
        let header: Header = serde_json::from_slice(&rest[..len]).context("RMDS header")?;
        let payload = &rest[len..];
        let declared: u64 = header
            .tensors
            .iter()
            .map(|t| 4 * t.shape.iter().product::<usize>() as u64)
            .sum();
        ensure!(
            declared == header.payload_bytes && payload.len() as u64 == declared,
            "RMDS payload is {} bytes, header declares {} ({} from shapes)",
            payload.len(),
            header.payload_bytes,
            declared
        );
        let mut at = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for rec in &header.tensors {
            let n: usize = rec.shape.iter().product();
            let data = payload[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            at += 4 * n;
            tensors.push(Tensor::new(rec.shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

/// Everything a clip carries except its latents, which live in the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub scenario: Scenario,
    pub caption_tag: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub params: SceneParams,
    pub frames_per_chunk: usize,
    pub poses: Vec<CameraPose>,
    pub state: Vec<f64>,
    pub views: Vec<FrameView>,
    pub interruption: Option<InterruptionSpec>,
    pub graph: FrameGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub clip_count: usize,
    pub scenario_tags: Vec<String>,
    pub clips: Vec<ClipRecord>,
}

pub fn dataset_container(clips: &[SyntheticClip], provenance: Provenance) -> Result<Container> {
    let meta = DatasetMeta {
        clip_count: clips.len(),
        scenario_tags: clips
            .iter()
            .map(|c| c.scenario.name().to_string())
            .collect(),
        clips: clips
            .iter()
            .map(|c| ClipRecord {
                scenario: c.scenario,
                caption_tag: c.caption_tag.clone(),
                seed: c.seed,
                world: c.world.clone(),
                params: c.params.clone(),
                frames_per_chunk: c.frames_per_chunk,
                poses: c.poses.clone(),
                state: c.state.clone(),
                views: c.views.clone(),
                interruption: c.interruption,
                graph: c.graph.clone(),
            })
            .collect(),
    };
    let named = clips
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("clip{i}"), c.latents.clone()))
        .collect();
    Ok(Container::new(
        DATASET_KIND,
        provenance,
        serde_json::to_value(meta)?,
        named,
    ))
}

/// Clips stored in a dataset container; latents come back at f32 precision.
pub fn dataset_clips(container: &Container) -> Result<Vec<SyntheticClip>> {
    if container.header.kind != DATASET_KIND {
        bail!(
            "expected a {DATASET_KIND} container, found '{}'",
            container.header.kind
        );
    }
    let meta: DatasetMeta =
        serde_json::from_value(container.header.meta.clone()).context("dataset header")?;
    ensure!(
        meta.clip_count == meta.clips.len() && meta.clips.len() == container.tensors.len(),
        "dataset declares {} clips, stores {} records and {} tensors",
        meta.clip_count,
        meta.clips.len(),
        container.tensors.len()
    );
    meta.clips
        .into_iter()
        .zip(&container.tensors)
        .enumerate()
        .map(|(i, (r, latents))| {
            let s = latents.shape();
            ensure!(
                s.len() == 4 && s[1] == r.frames_per_chunk && s[0] * s[1] == r.state.len(),
                "clip {i}: latent shape {s:?} disagrees with its record"
            );
            Ok(SyntheticClip {
                scenario: r.scenario,
                caption_tag: r.caption_tag,
                seed: r.seed,
                world: r.world,
                params: r.params,
                frames_per_chunk: r.frames_per_chunk,
                latents: latents.clone(),
                poses: r.poses,
                state: r.state,
                views: r.views,
                interruption: r.interruption,
                graph: r.graph,
            })
        })
        .collect()
}
