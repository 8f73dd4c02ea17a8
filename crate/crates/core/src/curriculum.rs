//! Flow-matching objective, temporal-delta auxiliary loss and the training
//! regimes, each expressed as a [`TrainingPlan`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::frame_graph::FrameGraph;
use crate::numerics::{Real, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_GAMMA: f64 = 5.0;
/// Warmup before the delta loss is enabled, scaled down for small runs.
pub const DEFAULT_WARMUP: usize = 200;
pub const SIGMA_MIN: f64 = 0.02;
pub const SIGMA_MAX: f64 = 0.98;
/// Noise range used to corrupt history in the noisy-memory regime.
pub const NOISY_HISTORY: (f64, f64) = (0.8, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    AllHistory,
    NoisyMemory,
    NodeDrop,
    V2vFrontier,
    ReferenceCache,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::AllHistory,
        Regime::NoisyMemory,
        Regime::NodeDrop,
        Regime::V2vFrontier,
        Regime::ReferenceCache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::AllHistory => "all_history",
            Regime::NoisyMemory => "noisy_memory",
            Regime::NodeDrop => "node_drop",
            Regime::V2vFrontier => "v2v_frontier",
            Regime::ReferenceCache => "reference_cache",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| invalid(format!("unknown regime '{s}'")))
    }
}

/// Clean chunks placed ahead of the target at positions `0..refs*m`; the
/// target then resumes at chunk `gap`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePrepend {
    pub ref_chunks: Vec<usize>,
    pub gap: usize,
}

impl CachePrepend {
    pub fn first_target_position(&self, frames_per_chunk: usize) -> usize {
        self.gap * frames_per_chunk
    }
}

/// One slot of the sequence fed to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    /// Source chunk in the clip.
    pub chunk: usize,
    /// Chunk index that fixes the rotary positions of the slot.
    pub position_chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub regime: Regime,
    /// Per clip chunk.
    pub sigmas: Vec<f64>,
    pub loss_mask: Vec<bool>,
    pub drop_set: BTreeSet<usize>,
    pub cache_prepend: Option<CachePrepend>,
}

impl TrainingPlan {
    pub fn num_chunks(&self) -> usize {
        self.sigmas.len()
    }

    /// Sequence layout: reference chunks first when prepending, then every
    /// remaining target chunk at its own position.
    pub fn slots(&self) -> Vec<Slot> {
        match &self.cache_prepend {
            None => (0..self.num_chunks())
                .map(|c| Slot {
                    chunk: c,
                    position_chunk: c,
                })
                .collect(),
            Some(p) => p
                .ref_chunks
                .iter()
                .enumerate()
                .map(|(i, &c)| Slot {
                    chunk: c,
                    position_chunk: i,
                })
                .chain((p.gap..self.num_chunks()).map(|c| Slot {
                    chunk: c,
                    position_chunk: c,
                }))
                .collect(),
        }
    }

    pub fn validate(&self, graph: &FrameGraph) -> Result<()> {
        let n = graph.num_chunks();
        if self.sigmas.len() != n || self.loss_mask.len() != n {
            return Err(shape(format!(
                "plan covers {} chunks, graph has {n}",
                self.sigmas.len()
            )));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(invalid(format!("noise level {s} outside [0, 1]")));
        }
        if !self.loss_mask.iter().any(|&m| m) {
            return Err(invalid("loss mask selects no chunk"));
        }
        if let Some(&c) = self.drop_set.iter().find(|&&c| c >= n) {
            return Err(invalid(format!("dropped chunk {c} out of range")));
        }
        let protected = graph.protected();
        if let Some(c) = self.drop_set.intersection(&protected).next() {
            return Err(Error::ProtectedAnchor(format!("chunk {c} in drop set")));
        }
        if let Some(p) = &self.cache_prepend {
            if p.ref_chunks.is_empty() || p.gap < p.ref_chunks.len() || p.gap >= n {
                return Err(invalid(format!(
                    "reference prepend with {} chunks and gap {} invalid for {n} chunks",
                    p.ref_chunks.len(),
                    p.gap
                )));
            }
            let kept: Vec<usize> = self.slots().iter().map(|s| s.chunk).collect();
            if self
                .loss_mask
                .iter()
                .enumerate()
                .any(|(c, &m)| m && !kept[p.ref_chunks.len()..].contains(&c))
            {
                return Err(invalid(
                    "loss mask selects a chunk outside the target sequence",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub warmup: usize,
    pub gap_min: usize,
    pub gap_max: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            warmup: DEFAULT_WARMUP,
            gap_min: 2,
            gap_max: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub flow: f64,
    pub delta: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(flow: f64, delta: f64, lambda: f64) -> Result<Self> {
        let b = Self {
            flow,
            delta,
            lambda,
            total: flow + lambda * delta,
        };
        if ![b.flow, b.delta, b.lambda, b.total]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::NonFinite(format!("loss bundle {b:?}")));
        }
        if lambda < 0.0 {
            return Err(invalid(format!("negative loss weight {lambda}")));
        }
        Ok(b)
    }
}

fn check_sigma(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("noise level {s} outside [0, 1]")));
    }
    Ok(())
}

/// `x_t = (1 - σ) x0 + σ ε` and target `u = ε - x0` for fresh unit noise.
pub fn noise_sample<T: Real>(
    x0: &Tensor<T>,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_sigma(sigma)?;
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    noise_with(x0, sigma, &eps)
}

/// [`noise_sample`] with the noise supplied.
pub fn noise_with<T: Real>(
    x0: &Tensor<T>,
    sigma: f64,
    eps: &[f64],
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_sigma(sigma)?;
    if eps.len() != x0.len() {
        return Err(shape(format!(
            "{} noise values for {} elements",
            eps.len(),
            x0.len()
        )));
    }
    let s = T::of(sigma);
    let xt = x0
        .data()
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (T::one() - s) * x + s * T::of(e))
        .collect();
    let u = x0
        .data()
        .iter()
        .zip(eps)
        .map(|(&x, &e)| T::of(e) - x)
        .collect();
    Ok((
        Tensor::new(x0.shape().to_vec(), xt)?,
        Tensor::new(x0.shape().to_vec(), u)?,
    ))
}

/// Mean squared error over the chunks selected by `loss_mask`. The leading
/// axis of `pred` is split evenly into `loss_mask.len()` chunks.
pub fn flow_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, loss_mask: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if !loss_mask.iter().any(|&m| m) {
        return Err(invalid("loss mask selects no chunk"));
    }
    let per = chunk_len(pred, loss_mask.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (c, _) in loss_mask.iter().enumerate().filter(|(_, &m)| m) {
        for i in c * per..(c + 1) * per {
            let d = pred.data()[i].as_f64() - target.data()[i].as_f64();
            sum += d * d;
        }
        n += per;
    }
    Ok(sum / n as f64)
}

fn chunk_len<T: Real>(t: &Tensor<T>, chunks: usize) -> Result<usize> {
    if chunks == 0 || !t.len().is_multiple_of(chunks) {
        return Err(shape(format!(
            "{} elements do not split into {chunks} chunks",
            t.len()
        )));
    }
    Ok(t.len() / chunks)
}

fn frames_of<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let frames = *t
        .shape()
        .first()
        .ok_or_else(|| shape("tensor needs a frame axis"))?;
    if frames < 2 {
        return Err(invalid("temporal deltas need at least two frames"));
    }
    Ok((frames, t.len() / frames))
}

/// Mean over consecutive frame pairs and elements of
/// `((x̂_i - x̂_{i-1}) - (x_i - x_{i-1}))^2`; the leading axis is time.
pub fn delta_loss<T: Real>(x0_hat: &Tensor<T>, x0: &Tensor<T>) -> Result<f64> {
    if x0_hat.shape() != x0.shape() {
        return Err(shape(format!("{:?} vs {:?}", x0_hat.shape(), x0.shape())));
    }
    let (frames, per) = frames_of(x0)?;
    let a = x0_hat.data();
    let b = x0.data();
    let mut sum = 0.0;
    for i in 1..frames {
        for j in 0..per {
            let cur = i * per + j;
            let prev = cur - per;
            let d = (a[cur].as_f64() - a[prev].as_f64()) - (b[cur].as_f64() - b[prev].as_f64());
            sum += d * d;
        }
    }
    Ok(sum / ((frames - 1) * per) as f64)
}

/// `x_t - σ·û`, which returns `x0` exactly when `û = ε - x0`.
pub fn reconstruct_x0<T: Real>(xt: &Tensor<T>, pred: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if xt.shape() != pred.shape() {
        return Err(shape(format!("{:?} vs {:?}", xt.shape(), pred.shape())));
    }
    let s = T::of(sigma);
    let data = xt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&x, &p)| x - s * p)
        .collect();
    Tensor::new(xt.shape().to_vec(), data)
}

/// Population variance of every temporal difference in the batch; each clip
/// has time on its leading axis.
pub fn sigma_batch<T: Real>(batch: &[Tensor<T>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for clip in batch {
        let (frames, per) = frames_of(clip)?;
        let x = clip.data();
        for i in per..frames * per {
            let d = x[i].as_f64() - x[i - per].as_f64();
            n += 1;
            let delta = d - mean;
            mean += delta / n as f64;
            m2 += delta * (d - mean);
        }
    }
    Ok(m2 / n as f64)
}

/// `α·exp(-γ·σ_batch)` once `iter >= warmup`, zero before.
pub fn adaptive_weight(sigma_batch: f64, iter: usize, cfg: &CurriculumConfig) -> Result<f64> {
    if sigma_batch.is_nan() || sigma_batch < 0.0 {
        return Err(invalid(format!(
            "σ_batch must be non-negative, got {sigma_batch}"
        )));
    }
    if iter < cfg.warmup {
        return Ok(0.0);
    }
    Ok(cfg.alpha * (-cfg.gamma * sigma_batch).exp())
}

fn sample_sigma(rng: &mut impl Rng) -> f64 {
    rng.random_range(SIGMA_MIN..SIGMA_MAX)
}

fn inapplicable(regime: Regime, reason: &str) -> Error {
    Error::RegimeInapplicable {
        regime: regime.name().into(),
        reason: reason.into(),
    }
}

/// Whether `make_plan` can build `regime` for this graph.
pub fn applicable(graph: &FrameGraph, regime: Regime, cfg: &CurriculumConfig) -> bool {
    check_applicable(graph, regime, cfg).is_ok()
}

fn check_applicable(graph: &FrameGraph, regime: Regime, cfg: &CurriculumConfig) -> Result<()> {
    let n = graph.num_chunks();
    let fail = |r: &str| Err(inapplicable(regime, r));
    if n == 0 {
        return fail("empty graph");
    }
    match regime {
        Regime::AllHistory => Ok(()),
        Regime::NoisyMemory => {
            if n < 2 {
                return fail("needs at least one history chunk");
            }
            Ok(())
        }
        Regime::NodeDrop => {
            if graph.interruptions().is_empty() {
                return fail("no interruption nodes to drop");
            }
            match graph.recoveries().first() {
                Some(_) => Ok(()),
                None => fail("no recovery chunk to supervise"),
            }
        }
        Regime::V2vFrontier => match graph.degradation_interval {
            Some((_, end)) if end + 1 < n => Ok(()),
            Some(_) => fail("degradation reaches the last chunk"),
            None => fail("no degradation interval"),
        },
        Regime::ReferenceCache => {
            let hi = cfg.gap_max.min(n - 1);
            if n < 2 || cfg.gap_min.max(1) > hi {
                return fail("clip too short for a reference gap");
            }
            if let Some((_, end)) = graph.degradation_interval {
                if end + 1 >= n {
                    return fail("degradation reaches the last chunk");
                }
            }
            Ok(())
        }
    }
}

pub fn make_plan(
    graph: &FrameGraph,
    regime: Regime,
    cfg: &CurriculumConfig,
    rng: &mut impl Rng,
) -> Result<TrainingPlan> {
    check_applicable(graph, regime, cfg)?;
    let n = graph.num_chunks();
    let mut plan = TrainingPlan {
        regime,
        sigmas: vec![0.0; n],
        loss_mask: vec![false; n],
        drop_set: BTreeSet::new(),
        cache_prepend: None,
    };
    match regime {
        Regime::AllHistory => {
            for c in 0..n {
                plan.sigmas[c] = sample_sigma(rng);
                plan.loss_mask[c] = true;
            }
        }
        Regime::NoisyMemory => {
            let current = rng.random_range(1..n);
            for c in 0..n {
                plan.sigmas[c] = if c < current {
                    rng.random_range(NOISY_HISTORY.0..=NOISY_HISTORY.1)
                } else {
                    sample_sigma(rng)
                };
            }
            plan.loss_mask[current] = true;
        }
        Regime::NodeDrop => {
            let recovery = graph.recoveries()[0];
            for c in 0..n {
                if graph.nodes[c].role == crate::frame_graph::NodeRole::Interruption {
                    plan.drop_set.insert(c);
                    plan.sigmas[c] = 1.0;
                } else if c >= recovery {
                    plan.sigmas[c] = sample_sigma(rng);
                    plan.loss_mask[c] = true;
                }
            }
        }
        Regime::V2vFrontier => {
            let (_, end) = graph.degradation_interval.expect("checked above");
            frontier(&mut plan, end + 1, rng);
        }
        Regime::ReferenceCache => {
            let lo = cfg.gap_min.max(1);
            let hi = cfg.gap_max.min(n - 1);
            let gap = rng.random_range(lo..=hi);
            let start = match graph.degradation_interval {
                Some((_, end)) => (end + 1).max(gap),
                None => gap,
            };
            frontier(&mut plan, start, rng);
            plan.cache_prepend = Some(CachePrepend {
                ref_chunks: vec![0],
                gap,
            });
        }
    }
    plan.validate(graph)?;
    Ok(plan)
}

/// Clean prefix before `start`, supervised suffix from `start` on.
fn frontier(plan: &mut TrainingPlan, start: usize, rng: &mut impl Rng) {
    for c in start..plan.num_chunks() {
        plan.sigmas[c] = sample_sigma(rng);
        plan.loss_mask[c] = true;
    }
}

/// Uniform choice among the allowed regimes that apply to the graph, with
/// `weights` as relative sampling weights.
pub fn sample_regime(
    graph: &FrameGraph,
    weights: &[(Regime, f64)],
    cfg: &CurriculumConfig,
    rng: &mut impl Rng,
) -> Result<Regime> {
    let usable: Vec<(Regime, f64)> = weights
        .iter()
        .copied()
        .filter(|&(r, w)| w > 0.0 && applicable(graph, r, cfg))
        .collect();
    let total: f64 = usable.iter().map(|(_, w)| w).sum();
    if usable.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(invalid("no enabled regime applies to this clip"));
    }
    let mut u = rng.random_range(0.0..total);
    for &(r, w) in &usable {
        if u < w {
            return Ok(r);
        }
        u -= w;
    }
    Ok(usable[usable.len() - 1].0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
    }

    #[test]
    fn reconstruction_is_exact_for_true_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::from_fn(4, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let (xt, u) = noise_sample(&x0, 0.7, &mut rng).unwrap();
        let back = reconstruct_x0(&xt, &u, 0.7).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn loss_bundle_rejects_non_finite() {
        assert!(LossBundle::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(LossBundle::new(1.0, 2.0, -0.1).is_err());
        assert_eq!(LossBundle::new(1.0, 2.0, 0.5).unwrap().total, 2.0);
    }
}
