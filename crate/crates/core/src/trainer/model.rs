//! A small chunk-causal diffusion transformer over patchified latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    chunk_causal_mask_for, normal_tensor, pm_attention, AttentionCapture, AttentionConfig,
    AttentionInputs, AttentionMode, AttentionVars, AttentionWeights, FrameMeta, PhaseNetVars,
    TokenAddr, DEFAULT_ROPE_BASE,
};
use crate::error::{invalid, shape, Result};
use crate::frame_graph::Scenario;
use crate::geometry::PoseDescriptor;
use crate::kv_cache::History;
use crate::numerics::{Graph, Real, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub token_dim: usize,
    pub mlp_ratio: usize,
    /// Latent cells per token side.
    pub patch: usize,
    pub grid: usize,
    pub latent_dim: usize,
    pub frames_per_chunk: usize,
    pub mode: AttentionMode,
    pub offset_all_bands: bool,
    pub rope_base: f64,
    pub sigma_features: usize,
    pub sampler_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 16,
            token_dim: 16,
            mlp_ratio: 4,
            patch: 2,
            grid: 8,
            latent_dim: 16,
            frames_per_chunk: 3,
            mode: AttentionMode::Full,
            offset_all_bands: false,
            rope_base: DEFAULT_ROPE_BASE,
            sigma_features: 8,
            sampler_steps: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("token_dim", self.token_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("patch", self.patch),
            ("grid", self.grid),
            ("latent_dim", self.latent_dim),
            ("frames_per_chunk", self.frames_per_chunk),
            ("sampler_steps", self.sampler_steps),
        ] {
            if v == 0 {
                return Err(invalid(format!("model.{name} must be at least 1")));
            }
        }
        if !self.grid.is_multiple_of(self.patch) {
            return Err(invalid(format!(
                "grid {} not divisible by patch {}",
                self.grid, self.patch
            )));
        }
        if !self.sigma_features.is_multiple_of(2) {
            return Err(invalid("sigma_features must be even"));
        }
        self.attention().map(|_| ())
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        let mut a = AttentionConfig::new(self.heads, self.head_dim, self.mode)?;
        a.rope_base = self.rope_base;
        a.offset_all_bands = self.offset_all_bands;
        a.validate()?;
        Ok(a)
    }

    pub fn side(&self) -> usize {
        self.grid / self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.side() * self.side()
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_dim
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.frames_per_chunk * self.tokens_per_frame()
    }
}

/// Parameters of one block; `P` is a tensor for owned weights or a graph
/// handle once registered.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<P> {
    pub norm1: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub delta_v: P,
    pub delta_o: P,
    pub phase_w1: P,
    pub phase_b1: P,
    pub phase_w2: P,
    pub phase_b2: P,
    pub norm2: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

const LAYER_NAMES: [&str; 16] = [
    "norm1", "wq", "wk", "wv", "wo", "delta_v", "delta_o", "phase_w1", "phase_b1", "phase_w2",
    "phase_b2", "norm2", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
];

impl<P> Layer<P> {
    fn leaves(&self) -> [&P; 16] {
        [
            &self.norm1,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.delta_v,
            &self.delta_o,
            &self.phase_w1,
            &self.phase_b1,
            &self.phase_w2,
            &self.phase_b2,
            &self.norm2,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    fn leaves_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.norm1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.delta_v,
            &mut self.delta_o,
            &mut self.phase_w1,
            &mut self.phase_b1,
            &mut self.phase_w2,
            &mut self.phase_b2,
            &mut self.norm2,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Self {
            norm1: it.next()?,
            wq: it.next()?,
            wk: it.next()?,
            wv: it.next()?,
            wo: it.next()?,
            delta_v: it.next()?,
            delta_o: it.next()?,
            phase_w1: it.next()?,
            phase_b1: it.next()?,
            phase_w2: it.next()?,
            phase_b2: it.next()?,
            norm2: it.next()?,
            mlp_w1: it.next()?,
            mlp_b1: it.next()?,
            mlp_w2: it.next()?,
            mlp_b2: it.next()?,
        })
    }
}

impl Layer<Var> {
    fn attention(&self) -> AttentionVars {
        AttentionVars {
            wo: self.wo,
            delta_v: self.delta_v,
            delta_o: self.delta_o,
            phase: PhaseNetVars {
                w1: self.phase_w1,
                b1: self.phase_b1,
                w2: self.phase_w2,
                b2: self.phase_b2,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub w_in: P,
    pub b_in: P,
    pub pos: P,
    pub w_sigma: P,
    /// One learned row per scenario, standing in for caption conditioning.
    pub scenario: P,
    pub layers: Vec<Layer<P>>,
    pub norm_f: P,
    pub w_out: P,
    pub b_out: P,
}

pub type ModelParams<T> = Params<Tensor<T>>;
pub type ModelVars = Params<Var>;

impl<P> Params<P> {
    /// Every leaf in a fixed order shared by optimisers and checkpoints.
    pub fn leaves(&self) -> Vec<&P> {
        let mut v = vec![
            &self.w_in,
            &self.b_in,
            &self.pos,
            &self.w_sigma,
            &self.scenario,
        ];
        for l in &self.layers {
            v.extend(l.leaves());
        }
        v.extend([&self.norm_f, &self.w_out, &self.b_out]);
        v
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut v = vec![
            &mut self.w_in,
            &mut self.b_in,
            &mut self.pos,
            &mut self.w_sigma,
            &mut self.scenario,
        ];
        for l in &mut self.layers {
            v.extend(l.leaves_mut());
        }
        v.extend([&mut self.norm_f, &mut self.w_out, &mut self.b_out]);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["w_in", "b_in", "pos", "w_sigma", "scenario"]
            .map(String::from)
            .to_vec();
        for i in 0..self.layers.len() {
            v.extend(LAYER_NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        v.extend(["norm_f", "w_out", "b_out"].map(String::from));
        v
    }

    /// Rebuilds from leaves in [`Params::leaves`] order.
    pub fn from_leaves(layers: usize, leaves: Vec<P>) -> Result<Self> {
        let expected = 8 + 16 * layers;
        if leaves.len() != expected {
            return Err(shape(format!(
                "{} parameter tensors, expected {expected}",
                leaves.len()
            )));
        }
        let mut it = leaves.into_iter();
        let mut next = move || it.next().expect("count checked");
        let (w_in, b_in, pos, w_sigma, scenario) = (next(), next(), next(), next(), next());
        let mut body = std::iter::from_fn(|| Some(next()));
        let layers = (0..layers)
            .map(|_| Layer::from_iter(&mut body).expect("count checked"))
            .collect();
        let (norm_f, w_out, b_out) = (
            body.next().unwrap(),
            body.next().unwrap(),
            body.next().unwrap(),
        );
        Ok(Self {
            w_in,
            b_in,
            pos,
            w_sigma,
            scenario,
            layers,
            norm_f,
            w_out,
            b_out,
        })
    }

    pub fn map<Q>(&self, f: impl FnMut(&P) -> Q) -> Params<Q> {
        let leaves: Vec<Q> = self.leaves().into_iter().map(f).collect();
        Params::from_leaves(self.layers.len(), leaves).expect("same layout")
    }
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialisation. Every mode draws the same tensors, so models
    /// that differ only in attention mode start from identical weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.token_dim;
        let w = cfg.width();
        let p = cfg.patch_dim();
        let hidden = d * cfg.mlp_ratio;
        let acfg = cfg.attention()?;
        let std = |n: usize| 1.0 / (n as f64).sqrt();
        let w_in = normal_tensor(&[p, d], std(p), &mut rng);
        let pos = normal_tensor(&[cfg.tokens_per_frame(), d], 0.1, &mut rng);
        let w_sigma = normal_tensor(
            &[cfg.sigma_features.max(1), d],
            std(cfg.sigma_features.max(1)),
            &mut rng,
        );
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let wq = normal_tensor(&[d, w], std(d), &mut rng);
            let wk = normal_tensor(&[d, w], std(d), &mut rng);
            let wv = normal_tensor(&[d, w], std(d), &mut rng);
            let attn = AttentionWeights::<T>::init(&acfg, d, &mut rng);
            let mlp_w1 = normal_tensor(&[d, hidden], std(d), &mut rng);
            let mlp_w2 = normal_tensor(&[hidden, d], std(hidden), &mut rng);
            layers.push(Layer {
                norm1: Tensor::full(&[d], T::one()),
                wq,
                wk,
                wv,
                wo: attn.wo,
                delta_v: attn.delta_v,
                delta_o: attn.delta_o,
                phase_w1: attn.phase.w1,
                phase_b1: attn.phase.b1,
                phase_w2: attn.phase.w2,
                phase_b2: attn.phase.b2,
                norm2: Tensor::full(&[d], T::one()),
                mlp_w1,
                mlp_b1: Tensor::zeros(&[hidden]),
                mlp_w2,
                mlp_b2: Tensor::zeros(&[d]),
            });
        }
        let w_out = normal_tensor(&[d, p], std(d), &mut rng);
        let scenario = normal_tensor(&[Scenario::ALL.len(), d], 0.1, &mut rng);
        Ok(Self {
            w_in,
            b_in: Tensor::zeros(&[d]),
            pos,
            w_sigma,
            scenario,
            layers,
            norm_f: Tensor::full(&[d], T::one()),
            w_out,
            b_out: Tensor::zeros(&[p]),
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.map(|t| t.cast())
    }

    pub fn register(&self, g: &mut Graph<T>) -> ModelVars {
        self.map(|t| g.param(t.clone()))
    }

    /// Registers every tensor as a constant (no gradients needed).
    pub fn register_frozen(&self, g: &mut Graph<T>) -> ModelVars {
        self.map(|t| g.constant(t.clone()))
    }

    /// Rejects tensors whose shapes differ from a fresh init under `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let fresh = ModelParams::<T>::init(cfg, 0)?;
        if fresh.layers.len() != self.layers.len() {
            return Err(shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        for ((a, b), name) in self.leaves().iter().zip(fresh.leaves()).zip(fresh.names()) {
            if a.shape() != b.shape() {
                return Err(shape(format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }
}

/// `[frames * cells, latent_dim]` to `[frames * tokens, patch_dim]`.
pub fn patchify<T: Real>(cells: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (d, c) = (cfg.latent_dim, cfg.cells());
    if cells.shape().len() != 2 || cells.cols() != d || !cells.rows().is_multiple_of(c) {
        return Err(shape(format!(
            "cannot patchify {:?} with {c} cells of dim {d}",
            cells.shape()
        )));
    }
    let frames = cells.rows() / c;
    let (g, p, side) = (cfg.grid, cfg.patch, cfg.side());
    let pd = cfg.patch_dim();
    let mut out = vec![T::zero(); cells.len()];
    for f in 0..frames {
        for r in 0..g {
            for col in 0..g {
                let tok = (r / p) * side + col / p;
                let inner = ((r % p) * p + col % p) * d;
                let src = (f * c + r * g + col) * d;
                let dst = (f * cfg.tokens_per_frame() + tok) * pd + inner;
                out[dst..dst + d].copy_from_slice(&cells.data()[src..src + d]);
            }
        }
    }
    Tensor::new(vec![frames * cfg.tokens_per_frame(), pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (d, c, tpf) = (cfg.latent_dim, cfg.cells(), cfg.tokens_per_frame());
    if tokens.shape().len() != 2
        || tokens.cols() != cfg.patch_dim()
        || !tokens.rows().is_multiple_of(tpf)
    {
        return Err(shape(format!("cannot unpatchify {:?}", tokens.shape())));
    }
    let frames = tokens.rows() / tpf;
    let (g, p, side) = (cfg.grid, cfg.patch, cfg.side());
    let pd = cfg.patch_dim();
    let mut out = vec![T::zero(); tokens.len()];
    for f in 0..frames {
        for r in 0..g {
            for col in 0..g {
                let tok = (r / p) * side + col / p;
                let inner = ((r % p) * p + col % p) * d;
                let dst = (f * c + r * g + col) * d;
                let src = (f * tpf + tok) * pd + inner;
                out[dst..dst + d].copy_from_slice(&tokens.data()[src..src + d]);
            }
        }
    }
    Tensor::new(vec![frames * c, d], out)
}

/// Fourier features of a noise level: `sin, cos` of `π·2^k·σ`.
pub fn sigma_features(sigma: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n / 2 {
        let a = std::f64::consts::PI * (1u64 << k) as f64 * sigma;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// One chunk entering the network, in patch layout.
#[derive(Clone, Copy, Debug)]
pub struct ChunkInput<'a, T> {
    /// `[frames_per_chunk * tokens_per_frame, patch_dim]`.
    pub x: &'a Tensor<T>,
    pub sigma: f64,
    /// Rotary positions are `position_chunk * m + f`.
    pub position_chunk: usize,
    pub descriptors: &'a [PoseDescriptor],
    pub scenario: Scenario,
}

pub struct ForwardOut {
    /// Predicted velocity for every input token, in patch layout.
    pub pred: Var,
    /// Per layer, pre-rotation keys and pre-residual values of the input tokens.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Runs the chunks through the network. With `history`, cached keys and
/// values are visible to every chunk; among the chunks themselves attention is
/// chunk-causal.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    history: Option<&History<T>>,
    chunks: &[ChunkInput<'_, T>],
    mut capture: Option<&mut Vec<AttentionCapture<T>>>,
) -> Result<ForwardOut> {
    let acfg = cfg.attention()?;
    let m = cfg.frames_per_chunk;
    let tpf = cfg.tokens_per_frame();
    let tpc = cfg.tokens_per_chunk();
    let side = cfg.side();
    if chunks.is_empty() {
        return Err(invalid("forward needs at least one chunk"));
    }
    for c in chunks {
        if c.x.shape() != [tpc, cfg.patch_dim()] {
            return Err(shape(format!(
                "chunk input {:?}, expected [{tpc}, {}]",
                c.x.shape(),
                cfg.patch_dim()
            )));
        }
        if c.descriptors.len() != m {
            return Err(shape(format!(
                "{} descriptors for {m} frames",
                c.descriptors.len()
            )));
        }
        if !(0.0..=1.0).contains(&c.sigma) {
            return Err(invalid(format!("noise level {} outside [0, 1]", c.sigma)));
        }
    }

    let mut frames: Vec<FrameMeta> = Vec::new();
    let mut keys: Vec<TokenAddr> = Vec::new();
    let mut key_chunks: Vec<usize> = Vec::new();
    let hist_frames = history.map_or(0, |h| h.frames());
    if let Some(h) = history {
        for (f, (&position, &descriptor)) in h.positions.iter().zip(&h.descriptors).enumerate() {
            frames.push(FrameMeta {
                position,
                descriptor,
            });
            for t in 0..tpf {
                keys.push(TokenAddr {
                    frame: f,
                    row: t / side,
                    col: t % side,
                });
                key_chunks.push(0);
            }
        }
        for (l, k) in h.keys.iter().enumerate().take(cfg.layers) {
            if k.rows() != hist_frames * tpf || (hist_frames > 0 && k.cols() != cfg.width()) {
                return Err(shape(format!("history layer {l} keys {:?}", k.shape())));
            }
        }
        if h.keys.len() < cfg.layers || h.values.len() < cfg.layers {
            return Err(shape("history has fewer layers than the model"));
        }
    }
    let mut queries: Vec<TokenAddr> = Vec::new();
    let mut query_chunks: Vec<usize> = Vec::new();
    for (i, c) in chunks.iter().enumerate() {
        for f in 0..m {
            frames.push(FrameMeta {
                position: c.position_chunk * m + f,
                descriptor: c.descriptors[f],
            });
            let frame = frames.len() - 1;
            for t in 0..tpf {
                queries.push(TokenAddr {
                    frame,
                    row: t / side,
                    col: t % side,
                });
                query_chunks.push(i + 1);
            }
        }
    }
    keys.extend_from_slice(&queries);
    key_chunks.extend_from_slice(&query_chunks);
    let mask = chunk_causal_mask_for(&query_chunks, &key_chunks);
    let n = queries.len();

    let x_parts: Vec<&Tensor<T>> = chunks.iter().map(|c| c.x).collect();
    let x = g.constant(Tensor::concat_rows(&x_parts)?);
    let mut h = g.matmul(x, vars.w_in)?;
    h = g.add_row(h, vars.b_in)?;
    let pos_idx: Vec<usize> = (0..n).map(|i| i % tpf).collect();
    let pos = g.gather_rows(vars.pos, &pos_idx)?;
    h = g.add(h, pos)?;
    let sc_idx: Vec<usize> = chunks
        .iter()
        .flat_map(|c| std::iter::repeat_n(c.scenario.index(), tpc))
        .collect();
    let sc = g.gather_rows(vars.scenario, &sc_idx)?;
    h = g.add(h, sc)?;
    if cfg.sigma_features > 0 {
        let nf = cfg.sigma_features;
        let mut feats = Vec::with_capacity(n * nf);
        for c in chunks {
            let f = sigma_features(c.sigma, nf);
            for _ in 0..tpc {
                feats.extend(f.iter().map(|&v| T::of(v)));
            }
        }
        let feats = g.constant(Tensor::new(vec![n, nf], feats)?);
        let s = g.matmul(feats, vars.w_sigma)?;
        h = g.add(h, s)?;
    }

    let mut out_keys = Vec::with_capacity(cfg.layers);
    let mut out_values = Vec::with_capacity(cfg.layers);
    for (l, layer) in vars.layers.iter().enumerate() {
        let a = g.rms_norm(h, NORM_EPS);
        let a = g.mul_row(a, layer.norm1)?;
        let q = g.matmul(a, layer.wq)?;
        let k_new = g.matmul(a, layer.wk)?;
        let v_new = g.matmul(a, layer.wv)?;
        out_keys.push(k_new);
        out_values.push(v_new);
        let (k, v) = match history {
            Some(hist) if hist_frames > 0 => {
                let hk = g.constant(hist.keys[l].clone());
                let hv = g.constant(hist.values[l].clone());
                (g.concat_rows(&[hk, k_new])?, g.concat_rows(&[hv, v_new])?)
            }
            _ => (k_new, v_new),
        };
        let inputs = AttentionInputs {
            q,
            k,
            v,
            queries: &queries,
            keys: &keys,
            frames: &frames,
            mask: &mask,
        };
        let mut probs = capture.as_ref().map(|_| Vec::new());
        let o = pm_attention(g, &inputs, &acfg, &layer.attention(), probs.as_mut())?;
        if let (Some(c), Some(p)) = (capture.as_deref_mut(), probs) {
            c.push(p);
        }
        h = g.add(h, o)?;
        let b = g.rms_norm(h, NORM_EPS);
        let b = g.mul_row(b, layer.norm2)?;
        let z = g.matmul(b, layer.mlp_w1)?;
        let z = g.add_row(z, layer.mlp_b1)?;
        let z = g.silu(z);
        let z = g.matmul(z, layer.mlp_w2)?;
        let z = g.add_row(z, layer.mlp_b2)?;
        h = g.add(h, z)?;
    }
    let f = g.rms_norm(h, NORM_EPS);
    let f = g.mul_row(f, vars.norm_f)?;
    let pred = g.matmul(f, vars.w_out)?;
    let pred = g.add_row(pred, vars.b_out)?;
    Ok(ForwardOut {
        pred,
        keys: out_keys,
        values: out_values,
    })
}

/// Draws a unit-Gaussian tensor of the given shape.
pub fn gaussian<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    normal_tensor(shape, 1.0, rng)
}
