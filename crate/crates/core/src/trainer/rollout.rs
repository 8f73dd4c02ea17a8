//! Chunk-by-chunk generation with a deterministic Euler sampler on the flow
//! field, reading history either from the KV cache or by recomputing it.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward, gaussian, patchify, unpatchify, ChunkInput, ModelConfig, ModelParams};
use crate::error::{invalid, shape, Error, Result};
use crate::frame_graph::Scenario;
use crate::geometry::PoseDescriptor;
use crate::kv_cache::{CacheEntry, DropPolicy, KvCache, Reliability};
use crate::numerics::{Graph, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    I2v,
    V2v,
    Refcache,
}

impl RolloutMode {
    pub fn name(self) -> &'static str {
        match self {
            RolloutMode::I2v => "i2v",
            RolloutMode::V2v => "v2v",
            RolloutMode::Refcache => "refcache",
        }
    }
}

impl FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [RolloutMode::I2v, RolloutMode::V2v, RolloutMode::Refcache]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown rollout mode '{s}'")))
    }
}

/// A conditioning chunk in cell layout `[m * cells, latent_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixChunk<T> {
    pub latents: Tensor<T>,
    pub descriptors: Vec<PoseDescriptor>,
    pub reliability: Reliability,
    pub anchor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRequest<T> {
    pub prefix: Vec<PrefixChunk<T>>,
    /// When set, the prefix is prepended as reference chunks and generation
    /// resumes at chunk `gap`.
    pub reference_gap: Option<usize>,
    /// Camera descriptors of every chunk to generate.
    pub targets: Vec<Vec<PoseDescriptor>>,
    pub noise_seed: u64,
    /// Prefix chunks (by index) to drop from the cache before generating.
    pub drop: BTreeSet<usize>,
    pub drop_policy: DropPolicy,
    pub scenario: Scenario,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOutput<T> {
    /// Generated chunks in cell layout.
    pub generated: Vec<Tensor<T>>,
    /// First frame position of every generated chunk.
    pub positions: Vec<usize>,
    pub cache: KvCache<T>,
}

fn check_request<T: Real>(cfg: &ModelConfig, req: &RolloutRequest<T>) -> Result<()> {
    let m = cfg.frames_per_chunk;
    for (i, p) in req.prefix.iter().enumerate() {
        if p.latents.shape() != [m * cfg.cells(), cfg.latent_dim] {
            return Err(shape(format!(
                "prefix chunk {i} has shape {:?}",
                p.latents.shape()
            )));
        }
        if p.descriptors.len() != m {
            return Err(shape(format!(
                "prefix chunk {i} has {} descriptors",
                p.descriptors.len()
            )));
        }
    }
    if let Some(t) = req.targets.iter().find(|t| t.len() != m) {
        return Err(shape(format!(
            "target chunk with {} descriptors for {m} frames",
            t.len()
        )));
    }
    if req.reference_gap.is_some() && req.prefix.is_empty() {
        return Err(invalid(
            "reference generation needs at least one reference chunk",
        ));
    }
    if req.prefix.is_empty() && !req.targets.is_empty() {
        return Err(invalid("generation needs at least one conditioning chunk"));
    }
    if let Some(&d) = req.drop.iter().find(|&&d| d >= req.prefix.len()) {
        return Err(invalid(format!("drop index {d} outside the prefix")));
    }
    Ok(())
}

fn noise_levels(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

/// Encodes a finished chunk (patch layout) at zero noise against the cache's
/// history and returns its entry.
#[allow(clippy::too_many_arguments)]
pub fn encode_chunk<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    cache: &KvCache<T>,
    x: &Tensor<T>,
    descriptors: &[PoseDescriptor],
    scenario: Scenario,
    position_chunk: usize,
    chunk_id: usize,
) -> Result<CacheEntry<T>> {
    let history = cache.read_history(chunk_id)?;
    let mut g = Graph::new();
    let vars = params.register_frozen(&mut g);
    let input = ChunkInput {
        x,
        sigma: 0.0,
        position_chunk,
        descriptors,
        scenario,
    };
    let out = forward(&mut g, cfg, &vars, Some(&history), &[input], None)?;
    let m = cfg.frames_per_chunk;
    Ok(CacheEntry {
        chunk_id,
        keys: out.keys.iter().map(|&k| g.value(k).clone()).collect(),
        values: out.values.iter().map(|&v| g.value(v).clone()).collect(),
        frame_positions: (position_chunk * m..(position_chunk + 1) * m).collect(),
        pose_descriptors: descriptors.to_vec(),
        reliability: Reliability::Clean,
        anchor: false,
    })
}

/// Streams generation through a [`KvCache`].
pub fn rollout<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    req: &RolloutRequest<T>,
) -> Result<RolloutOutput<T>> {
    check_request(cfg, req)?;
    let m = cfg.frames_per_chunk;
    let mut cache = KvCache::new(cfg.layers);
    for (i, p) in req.prefix.iter().enumerate() {
        let x = patchify(&p.latents, cfg)?;
        let mut e = encode_chunk(cfg, params, &cache, &x, &p.descriptors, req.scenario, i, i)?;
        e.reliability = p.reliability;
        e.anchor = p.anchor;
        cache.write_chunk(e)?;
    }
    if let Some(gap) = req.reference_gap {
        let refs = cache.entries().to_vec();
        cache = KvCache::new(cfg.layers);
        cache.prepend_reference(refs, gap, m)?;
    }
    let mut drop_rng = ChaCha8Rng::seed_from_u64(req.noise_seed ^ 0xd20f);
    cache.drop_nodes(&req.drop, req.drop_policy, &mut drop_rng)?;

    let mut rng = ChaCha8Rng::seed_from_u64(req.noise_seed);
    let sigmas = noise_levels(cfg.sampler_steps);
    let mut out = RolloutOutput {
        generated: Vec::new(),
        positions: Vec::new(),
        cache: KvCache::new(cfg.layers),
    };
    for descriptors in &req.targets {
        if cache.next_write_position() % m != 0 {
            return Err(invalid("cache write head is not chunk aligned"));
        }
        let position_chunk = cache.next_write_position() / m;
        let chunk_id = cache.next_write_chunk();
        let history = cache.read_history(chunk_id)?;
        let mut x: Tensor<T> = gaussian(&[cfg.tokens_per_chunk(), cfg.patch_dim()], &mut rng);
        for k in 0..cfg.sampler_steps {
            let mut g = Graph::new();
            let vars = params.register_frozen(&mut g);
            let input = ChunkInput {
                x: &x,
                sigma: sigmas[k],
                position_chunk,
                descriptors,
                scenario: req.scenario,
            };
            let f = forward(&mut g, cfg, &vars, Some(&history), &[input], None)?;
            euler_step(&mut x, g.value(f.pred), sigmas[k + 1] - sigmas[k]);
        }
        let e = encode_chunk(
            cfg,
            params,
            &cache,
            &x,
            descriptors,
            req.scenario,
            position_chunk,
            chunk_id,
        )?;
        cache.write_chunk(e)?;
        out.generated.push(unpatchify(&x, cfg)?);
        out.positions.push(position_chunk * m);
    }
    out.cache = cache;
    Ok(out)
}

fn euler_step<T: Real>(x: &mut Tensor<T>, pred: &Tensor<T>, dsigma: f64) {
    let d = T::of(dsigma);
    for (a, &b) in x.data_mut().iter_mut().zip(pred.data()) {
        *a = *a + d * b;
    }
}

/// Same sampler, but every step recomputes the whole chunk-causal sequence
/// instead of reading a cache. Dropping is not supported here.
pub fn rollout_full_context<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    req: &RolloutRequest<T>,
) -> Result<Vec<Tensor<T>>> {
    check_request(cfg, req)?;
    if !req.drop.is_empty() {
        return Err(invalid("full-context rollout does not drop chunks"));
    }
    let mut done: Vec<(Tensor<T>, usize, Vec<PoseDescriptor>)> = Vec::new();
    for (i, p) in req.prefix.iter().enumerate() {
        done.push((patchify(&p.latents, cfg)?, i, p.descriptors.clone()));
    }
    let start = match req.reference_gap {
        Some(gap) => {
            if gap < req.prefix.len() {
                return Err(invalid(format!(
                    "gap {gap} overlaps {} reference chunks",
                    req.prefix.len()
                )));
            }
            gap
        }
        None => req.prefix.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.noise_seed);
    let sigmas = noise_levels(cfg.sampler_steps);
    let mut generated = Vec::new();
    for (next, descriptors) in (start..).zip(&req.targets) {
        let mut x: Tensor<T> = gaussian(&[cfg.tokens_per_chunk(), cfg.patch_dim()], &mut rng);
        for k in 0..cfg.sampler_steps {
            let mut g = Graph::new();
            let vars = params.register_frozen(&mut g);
            let mut inputs: Vec<ChunkInput<'_, T>> = done
                .iter()
                .map(|(x, p, d)| ChunkInput {
                    x,
                    sigma: 0.0,
                    position_chunk: *p,
                    descriptors: d,
                    scenario: req.scenario,
                })
                .collect();
            inputs.push(ChunkInput {
                x: &x,
                sigma: sigmas[k],
                position_chunk: next,
                descriptors,
                scenario: req.scenario,
            });
            let f = forward(&mut g, cfg, &vars, None, &inputs, None)?;
            let rows = cfg.tokens_per_chunk();
            let pred = g.value(f.pred).slice_rows(done.len() * rows, rows)?;
            euler_step(&mut x, &pred, sigmas[k + 1] - sigmas[k]);
        }
        generated.push(unpatchify(&x, cfg)?);
        done.push((x, next, descriptors.clone()));
    }
    Ok(generated)
}
