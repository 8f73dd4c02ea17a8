//! Can a memory scorer tell the clean pre-degradation anchor from a later,
//! corrupted entry at the same spatial address?
//!
//! A decoupled scorer adds independent spatial, temporal and content terms.
//! Under a spatial tie and an uninformative content term only the temporal
//! term is left, and it prefers the more recent (corrupted) entry. The joint
//! selector keeps only same-address candidates observed before the
//! degradation started and ranks them by content compatibility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryKey {
    pub time: f64,
    /// Spatial or camera-ray address.
    pub address: Vec<f64>,
    pub content: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContentTerm {
    /// Scores every candidate equally, as when the queried region is hidden.
    Uninformative,
    /// `weight * cos(x_q, x_j)`.
    Cosine { weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringScenario {
    pub anchor: MemoryKey,
    pub corrupted: MemoryKey,
    pub query: MemoryKey,
    /// Start of the degradation interval.
    pub tau_deg: f64,
    /// Decay of both temporal terms.
    pub beta: f64,
    /// `phi_sp = -spatial_weight * |s_q - s_j|^2`.
    pub spatial_weight: f64,
    pub content: ContentTerm,
    /// Tolerance under which two addresses count as the same.
    pub address_tol: f64,
    pub seed: u64,
}

impl Default for ScoringScenario {
    fn default() -> Self {
        let address = vec![0.25, -0.5];
        Self {
            anchor: MemoryKey {
                time: 3.0,
                address: address.clone(),
                content: vec![1.0, 0.5, 0.0, 0.0],
            },
            corrupted: MemoryKey {
                time: 9.0,
                address: address.clone(),
                content: vec![0.0, 0.0, 1.0, -1.0],
            },
            query: MemoryKey {
                time: 15.0,
                address,
                content: vec![0.9, 0.6, 0.1, 0.0],
            },
            tau_deg: 6.0,
            beta: 0.1,
            spatial_weight: 1.0,
            content: ContentTerm::Uninformative,
            address_tol: 1e-9,
            seed: 0,
        }
    }
}

impl ScoringScenario {
    pub fn validate(&self) -> Result<()> {
        let (a, c, q) = (self.anchor.time, self.corrupted.time, self.query.time);
        if ![a, c, q, self.tau_deg, self.beta, self.spatial_weight]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(invalid("scenario values must be finite"));
        }
        if !(a <= c && c < q) {
            return Err(invalid(format!("need t_a <= t_c < t_q, got {a}, {c}, {q}")));
        }
        if self.beta <= 0.0 {
            return Err(invalid("temporal decay must be positive"));
        }
        let dim = self.query.address.len();
        if self.anchor.address.len() != dim || self.corrupted.address.len() != dim {
            return Err(invalid("addresses differ in dimension"));
        }
        let cd = self.query.content.len();
        if cd == 0 || self.anchor.content.len() != cd || self.corrupted.content.len() != cd {
            return Err(invalid(
                "content vectors must be non-empty and equally sized",
            ));
        }
        Ok(())
    }

    fn candidates(&self) -> [&MemoryKey; 2] {
        [&self.anchor, &self.corrupted]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Anchor,
    Corrupted,
    /// No candidate satisfies the joint selector's predicates.
    Neither,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub choice: Choice,
    /// Scores of the anchor and the corrupted entry; `None` where the joint
    /// selector's predicates exclude the candidate.
    pub anchor_score: Option<f64>,
    pub corrupted_score: Option<f64>,
    pub tie: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupledChoices {
    pub recency: Selection,
    pub cache_order: Selection,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub trials: usize,
    pub recency_corrupted: usize,
    pub cache_order_corrupted: usize,
    pub joint_anchor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub scenario_params: ScoringScenario,
    pub decoupled_choice: DecoupledChoices,
    pub joint_choice: Selection,
    /// Outcomes over randomised contents, addresses and decay rates that keep
    /// the scenario's structure.
    pub randomized: TrialCounts,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Dense rank of `t` among the cached times (equal times share a rank); the
/// query sits one past the last cache slot.
fn cache_rank(times: &[f64], t: f64) -> f64 {
    let mut distinct: Vec<f64> = times.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    distinct.iter().filter(|&&x| x < t).count() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalScore {
    /// `-beta * (t_q - t_j)`.
    Recency,
    /// `-beta * (rank_q - rank_j)` over compact cache slots.
    CacheOrder,
}

/// Picks the higher score; exact ties go to the earlier time, then to the
/// anchor.
fn pick(scores: [Option<f64>; 2], times: [f64; 2]) -> (Choice, bool) {
    match scores {
        [None, None] => (Choice::Neither, false),
        [Some(_), None] => (Choice::Anchor, false),
        [None, Some(_)] => (Choice::Corrupted, false),
        [Some(a), Some(c)] => {
            if a > c {
                (Choice::Anchor, false)
            } else if c > a {
                (Choice::Corrupted, false)
            } else if times[1] < times[0] {
                (Choice::Corrupted, true)
            } else {
                (Choice::Anchor, true)
            }
        }
    }
}

fn selection(scores: [Option<f64>; 2], times: [f64; 2]) -> Selection {
    let (choice, tie) = pick(scores, times);
    Selection {
        choice,
        anchor_score: scores[0],
        corrupted_score: scores[1],
        tie,
    }
}

/// `phi_sp + phi_tmp + phi_cnt` for both candidates.
pub fn decoupled_scores(s: &ScoringScenario, temporal: TemporalScore) -> [f64; 2] {
    let cands = s.candidates();
    let cached: Vec<f64> = cands.iter().map(|k| k.time).collect();
    let query_rank = cache_rank(&cached, f64::INFINITY);
    cands.map(|k| {
        let sp = -s.spatial_weight * sq_dist(&s.query.address, &k.address);
        let tmp = match temporal {
            TemporalScore::Recency => -s.beta * (s.query.time - k.time),
            TemporalScore::CacheOrder => -s.beta * (query_rank - cache_rank(&cached, k.time)),
        };
        let cnt = match s.content {
            ContentTerm::Uninformative => 0.0,
            ContentTerm::Cosine { weight } => weight * cosine(&s.query.content, &k.content),
        };
        sp + tmp + cnt
    })
}

/// Same address, observed before the degradation, ranked by cosine
/// compatibility; excluded candidates score `None`.
pub fn joint_scores(s: &ScoringScenario) -> [Option<f64>; 2] {
    s.candidates().map(|k| {
        let same = sq_dist(&s.query.address, &k.address).sqrt() <= s.address_tol;
        let clean = k.time < s.tau_deg;
        (same && clean && k.time < s.query.time).then(|| cosine(&k.content, &s.query.content))
    })
}

fn evaluate(s: &ScoringScenario) -> (DecoupledChoices, Selection) {
    let times = [s.anchor.time, s.corrupted.time];
    let rec = decoupled_scores(s, TemporalScore::Recency).map(Some);
    let ord = decoupled_scores(s, TemporalScore::CacheOrder).map(Some);
    (
        DecoupledChoices {
            recency: selection(rec, times),
            cache_order: selection(ord, times),
        },
        selection(joint_scores(s), times),
    )
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Scores the scenario, then `trials` randomised copies drawn from the
/// scenario's seed: fresh shared address, anchor and corrupted contents, a
/// query content near the anchor's, and a rescaled decay.
pub fn identifiability_sim(
    scenario: &ScoringScenario,
    trials: usize,
) -> Result<IdentifiabilityReport> {
    scenario.validate()?;
    let (decoupled, joint) = evaluate(scenario);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut counts = TrialCounts {
        trials,
        ..TrialCounts::default()
    };
    let (ad, cd) = (scenario.query.address.len(), scenario.query.content.len());
    for _ in 0..trials {
        let mut s = scenario.clone();
        let address = normal_vec(ad, &mut rng);
        s.anchor.address = address.clone();
        s.corrupted.address = address.clone();
        s.query.address = address;
        s.anchor.content = normal_vec(cd, &mut rng);
        s.corrupted.content = normal_vec(cd, &mut rng);
        let jitter = normal_vec(cd, &mut rng);
        s.query.content = s
            .anchor
            .content
            .iter()
            .zip(&jitter)
            .map(|(a, j)| a + 0.3 * j)
            .collect();
        s.beta = scenario.beta * rng.random_range(0.5..1.5);
        let (d, j) = evaluate(&s);
        counts.recency_corrupted += usize::from(d.recency.choice == Choice::Corrupted);
        counts.cache_order_corrupted += usize::from(d.cache_order.choice == Choice::Corrupted);
        counts.joint_anchor += usize::from(j.choice == Choice::Anchor);
    }
    Ok(IdentifiabilityReport {
        scenario_params: scenario.clone(),
        decoupled_choice: decoupled,
        joint_choice: joint,
        randomized: counts,
    })
}
