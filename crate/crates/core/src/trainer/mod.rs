//! Training loop, checkpoints and streaming generation for the toy model.

mod checkpoint;
mod model;
mod rollout;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    adaptive_weight, sigma_batch, CurriculumConfig, LossBundle, Regime, TrainingPlan,
};
use crate::error::{invalid, shape, Error, Result};
use crate::frame_graph::{Scenario, SyntheticClip};
use crate::geometry::{pose_descriptor, PoseDescriptor};
use crate::numerics::{Graph, Tensor, Var};

pub use checkpoint::*;
pub use model::*;
pub use rollout::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

/// Parameters, moment estimates, step counter and generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f64>,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(cfg, seed)?;
        let zeros: Vec<Tensor<f64>> = params
            .leaves()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            params,
            m: zeros.clone(),
            v: zeros,
            iter: 0,
            // separate stream from the init draws
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_7a41),
        })
    }
}

/// Decoupled-weight-decay Adam on every leaf, with bias correction.
pub fn adamw_update(
    state: &mut TrainState,
    grads: &[Tensor<f64>],
    opt: &OptimizerConfig,
) -> Result<()> {
    let leaves = state.params.leaves_mut();
    if grads.len() != leaves.len() {
        return Err(shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            leaves.len()
        )));
    }
    let t = state.iter as i32 + 1;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (((p, g), m), v) in leaves
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.shape() != g.shape() {
            return Err(shape(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = opt.beta1 * md[i] + (1.0 - opt.beta1) * gi;
            vd[i] = opt.beta2 * vd[i] + (1.0 - opt.beta2) * gi * gi;
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            pd[i] -= opt.lr * (mh / (vh.sqrt() + opt.eps) + opt.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Clean latents of a clip as `[frames, cells * dim]`.
pub fn clip_frames(clip: &SyntheticClip) -> Tensor<f64> {
    let frames = clip.num_frames();
    Tensor::new(
        vec![frames, clip.latents.len() / frames],
        clip.latents.data().to_vec(),
    )
    .expect("latent layout is frame-major")
}

pub fn chunk_descriptors(clip: &SyntheticClip, chunk: usize) -> Result<Vec<PoseDescriptor>> {
    clip.chunk_poses(chunk)
        .iter()
        .map(pose_descriptor)
        .collect()
}

/// Noisy inputs and targets for one clip under a plan, in patch layout.
pub struct PreparedExample {
    pub x0: Vec<Tensor<f64>>,
    pub xt: Vec<Tensor<f64>>,
    pub target: Vec<Tensor<f64>>,
    pub sigmas: Vec<f64>,
    pub supervised: Vec<bool>,
    pub position_chunks: Vec<usize>,
    pub descriptors: Vec<Vec<PoseDescriptor>>,
    pub scenario: Scenario,
}

impl PreparedExample {
    pub fn inputs(&self) -> Vec<ChunkInput<'_, f64>> {
        (0..self.xt.len())
            .map(|i| ChunkInput {
                x: &self.xt[i],
                sigma: self.sigmas[i],
                position_chunk: self.position_chunks[i],
                descriptors: &self.descriptors[i],
                scenario: self.scenario,
            })
            .collect()
    }
}

/// Applies the plan's noise to a clip. Noise is drawn for every slot in order.
pub fn prepare_example(
    cfg: &ModelConfig,
    clip: &SyntheticClip,
    plan: &TrainingPlan,
    rng: &mut impl Rng,
) -> Result<PreparedExample> {
    plan.validate(&clip.graph)?;
    if clip.frames_per_chunk != cfg.frames_per_chunk
        || clip.dim() != cfg.latent_dim
        || clip.tokens() != cfg.cells()
    {
        return Err(shape(format!(
            "clip layout ({} frames/chunk, {} cells, dim {}) does not fit the model",
            clip.frames_per_chunk,
            clip.tokens(),
            clip.dim()
        )));
    }
    let mut ex = PreparedExample {
        x0: Vec::new(),
        xt: Vec::new(),
        target: Vec::new(),
        sigmas: Vec::new(),
        supervised: Vec::new(),
        position_chunks: Vec::new(),
        descriptors: Vec::new(),
        scenario: clip.scenario,
    };
    for slot in plan.slots() {
        let x0 = patchify(&clip.chunk(slot.chunk), cfg)?;
        let eps: Tensor<f64> = gaussian(x0.shape(), rng);
        let sigma = plan.sigmas[slot.chunk];
        let (xt, u) = crate::curriculum::noise_with(&x0, sigma, eps.data())?;
        ex.x0.push(x0);
        ex.xt.push(xt);
        ex.target.push(u);
        ex.sigmas.push(sigma);
        ex.supervised.push(plan.loss_mask[slot.chunk]);
        ex.position_chunks.push(slot.position_chunk);
        ex.descriptors.push(chunk_descriptors(clip, slot.chunk)?);
    }
    Ok(ex)
}

pub struct ExampleLoss {
    pub total: Var,
    pub flow: f64,
    pub delta: f64,
}

/// Flow loss over supervised slots plus `lambda` times the temporal-delta
/// loss over consecutive supervised frames.
pub fn example_loss(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    ex: &PreparedExample,
    lambda: f64,
) -> Result<ExampleLoss> {
    let out = forward(g, cfg, vars, None, &ex.inputs(), None)?;
    let tpc = cfg.tokens_per_chunk();
    let tpf = cfg.tokens_per_frame();
    let m = cfg.frames_per_chunk;
    let pd = cfg.patch_dim();

    let mut rows = Vec::new();
    let mut target = Vec::new();
    for (i, &sup) in ex.supervised.iter().enumerate() {
        if sup {
            rows.extend(i * tpc..(i + 1) * tpc);
            target.extend_from_slice(ex.target[i].data());
        }
    }
    if rows.is_empty() {
        return Err(invalid("example has no supervised chunk"));
    }
    let picked = g.gather_rows(out.pred, &rows)?;
    let target = g.constant(Tensor::new(vec![rows.len(), pd], target)?);
    let diff = g.sub(picked, target)?;
    let sq = g.square(diff);
    let flow = g.mean(sq);

    // frame pairs (prev, cur) with both frames supervised and adjacent in position
    let frame_pos = |slot: usize, f: usize| ex.position_chunks[slot] * m + f;
    let mut pairs = Vec::new();
    for s in 0..ex.xt.len() {
        if !ex.supervised[s] {
            continue;
        }
        for f in 0..m {
            let prev = if f > 0 {
                Some((s, f - 1))
            } else if s > 0
                && ex.supervised[s - 1]
                && frame_pos(s - 1, m - 1) + 1 == frame_pos(s, 0)
            {
                Some((s - 1, m - 1))
            } else {
                None
            };
            if let Some(p) = prev {
                pairs.push((p, (s, f)));
            }
        }
    }
    let (total, delta) = if pairs.is_empty() {
        (flow, 0.0)
    } else {
        let mut cur_rows = Vec::new();
        let mut prev_rows = Vec::new();
        let mut s_cur = Vec::new();
        let mut s_prev = Vec::new();
        let mut offset = Vec::new();
        for &((ps, pf), (cs, cf)) in &pairs {
            let pr = ps * tpc + pf * tpf;
            let cr = cs * tpc + cf * tpf;
            cur_rows.extend(cr..cr + tpf);
            prev_rows.extend(pr..pr + tpf);
            s_cur.extend(std::iter::repeat_n(ex.sigmas[cs], tpf * pd));
            s_prev.extend(std::iter::repeat_n(ex.sigmas[ps], tpf * pd));
            let (xc, xp) = (&ex.xt[cs], &ex.xt[ps]);
            let (oc, op) = (&ex.x0[cs], &ex.x0[ps]);
            for i in 0..tpf * pd {
                let ic = cf * tpf * pd + i;
                let ip = pf * tpf * pd + i;
                offset.push((xc.data()[ic] - xp.data()[ip]) - (oc.data()[ic] - op.data()[ip]));
            }
        }
        let n = cur_rows.len();
        let pc = g.gather_rows(out.pred, &cur_rows)?;
        let pp = g.gather_rows(out.pred, &prev_rows)?;
        let sc = g.constant(Tensor::new(vec![n, pd], s_cur)?);
        let sp = g.constant(Tensor::new(vec![n, pd], s_prev)?);
        let a = g.mul(pc, sc)?;
        let b = g.mul(pp, sp)?;
        let off = g.constant(Tensor::new(vec![n, pd], offset)?);
        let d = g.sub(off, a)?;
        let d = g.add(d, b)?;
        let sq = g.square(d);
        let delta = g.mean(sq);
        let dv = g.value(delta).data()[0];
        let weighted = g.scale(delta, lambda);
        (g.add(flow, weighted)?, dv)
    };
    Ok(ExampleLoss {
        total,
        flow: g.value(flow).data()[0],
        delta,
    })
}

/// Result of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: u64,
    pub loss: LossBundle,
    pub regime: String,
    pub grad_norm: f64,
}

/// One AdamW step on the mean loss over `batch`; noise comes from the
/// state's generator.
pub fn train_step(
    state: &mut TrainState,
    cfg: &ModelConfig,
    opt: &OptimizerConfig,
    curriculum: &CurriculumConfig,
    batch: &[(&SyntheticClip, TrainingPlan)],
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let clean: Vec<Tensor<f64>> = batch.iter().map(|(c, _)| clip_frames(c)).collect();
    let sb = sigma_batch(&clean)?;
    let lambda = adaptive_weight(sb, state.iter as usize, curriculum)?;
    let examples = batch
        .iter()
        .map(|(clip, plan)| prepare_example(cfg, clip, plan, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    let regimes: Vec<Regime> = batch.iter().map(|(_, p)| p.regime).collect();
    step_on_examples(state, cfg, opt, &examples, lambda, &regimes)
}

/// The optimisation half of [`train_step`], on examples whose noise is
/// already fixed. `regimes` labels the report only.
pub fn step_on_examples(
    state: &mut TrainState,
    cfg: &ModelConfig,
    opt: &OptimizerConfig,
    examples: &[PreparedExample],
    lambda: f64,
    regimes: &[Regime],
) -> Result<StepReport> {
    if examples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut grads: Vec<Tensor<f64>> = state
        .params
        .leaves()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let (mut flow, mut delta) = (0.0, 0.0);
    let scale = 1.0 / examples.len() as f64;
    for (i, ex) in examples.iter().enumerate() {
        let mut g = Graph::new();
        let vars = state.params.register(&mut g);
        let loss = example_loss(&mut g, cfg, &vars, ex, lambda)?;
        let total = g.value(loss.total).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {} (example {i}, flow {}, delta {}, lambda {lambda}, sigmas {:?})",
                state.iter, loss.flow, loss.delta, ex.sigmas
            )));
        }
        let mut gr = g.backward(loss.total)?;
        for (acc, v) in grads.iter_mut().zip(vars.leaves()) {
            let gv = gr.take(&g, *v);
            for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                *a += scale * b;
            }
        }
        flow += scale * loss.flow;
        delta += scale * loss.delta;
    }
    let norm = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient norm at iteration {}",
            state.iter
        )));
    }
    if opt.grad_clip > 0.0 && norm > opt.grad_clip {
        let c = opt.grad_clip / norm;
        for t in &mut grads {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }
    adamw_update(state, &grads, opt)?;
    let report = StepReport {
        iter: state.iter,
        loss: LossBundle::new(flow, delta, lambda)?,
        regime: regime_label(regimes),
        grad_norm: norm,
    };
    state.iter += 1;
    Ok(report)
}

fn regime_label(regimes: &[Regime]) -> String {
    let mut names: Vec<&str> = regimes.iter().map(|r| r.name()).collect();
    names.dedup();
    names.join("+")
}

/// Samples a batch: clips uniformly with replacement, then one regime for the
/// whole batch among those applicable to every chosen clip.
pub fn sample_batch<'a>(
    clips: &'a [SyntheticClip],
    batch_size: usize,
    weights: &[(Regime, f64)],
    curriculum: &CurriculumConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(&'a SyntheticClip, TrainingPlan)>> {
    if clips.is_empty() || batch_size == 0 {
        return Err(invalid("need clips and a positive batch size"));
    }
    let chosen: Vec<&SyntheticClip> = (0..batch_size)
        .map(|_| &clips[rng.random_range(0..clips.len())])
        .collect();
    let usable: Vec<(Regime, f64)> = weights
        .iter()
        .copied()
        .filter(|&(r, w)| {
            w > 0.0
                && chosen
                    .iter()
                    .all(|c| crate::curriculum::applicable(&c.graph, r, curriculum))
        })
        .collect();
    let regime = if usable.is_empty() {
        return Err(invalid(
            "no enabled regime applies to every clip in the batch",
        ));
    } else {
        crate::curriculum::sample_regime(&chosen[0].graph, &usable, curriculum, rng)?
    };
    chosen
        .into_iter()
        .map(|c| {
            Ok((
                c,
                crate::curriculum::make_plan(&c.graph, regime, curriculum, rng)?,
            ))
        })
        .collect()
}
