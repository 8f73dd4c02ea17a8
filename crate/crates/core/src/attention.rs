//! Camera-conditioned rotary self-attention.
//!
//! Queries and keys are rotated by `theta + delta`, where `theta` is the usual
//! rotary phase over (time, row, column) and `delta = h(c)` is a per-frame
//! offset produced by a small zero-initialised network from the pose
//! descriptor `c`. Values and outputs get zero-initialised residual
//! projections over `[features || 6-DoF embedding]`. At initialisation the
//! operator is exactly plain rotary attention.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::geometry::{PoseDescriptor, DESCRIPTOR_LEN, EMBEDDING_LEN};
use crate::numerics::{Graph, Real, Tensor, Var};

pub const PHASE_HIDDEN: usize = 64;
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Phase offsets on Q/K plus value/output residuals.
    Full,
    /// Phase offsets only; residuals held at zero.
    QkOnly,
    /// Residuals only; phase offsets held at zero.
    VoOnly,
    /// Two summed passes: rotary over time/space, and a camera-phase pass with
    /// no temporal term.
    Dual,
    /// Plain rotary attention, no camera conditioning.
    Rope,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 5] = [
        AttentionMode::Full,
        AttentionMode::QkOnly,
        AttentionMode::VoOnly,
        AttentionMode::Dual,
        AttentionMode::Rope,
    ];

    pub fn uses_phase_offset(self) -> bool {
        matches!(self, Self::Full | Self::QkOnly | Self::Dual)
    }

    pub fn uses_residuals(self) -> bool {
        matches!(self, Self::Full | Self::VoOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::QkOnly => "qk_only",
            Self::VoOnly => "vo_only",
            Self::Dual => "dual",
            Self::Rope => "rope",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown attention mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub mode: AttentionMode,
    pub temporal_bands: usize,
    pub row_bands: usize,
    pub col_bands: usize,
    pub rope_base: f64,
    /// Apply the camera offset to every band instead of only temporal ones.
    pub offset_all_bands: bool,
}

impl AttentionConfig {
    /// Half the bands carry time; the rest split between rows and columns.
    pub fn new(heads: usize, head_dim: usize, mode: AttentionMode) -> Result<Self> {
        if heads == 0 || head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "need heads >= 1 and an even head_dim, got {heads} x {head_dim}"
            )));
        }
        let bands = head_dim / 2;
        let temporal = bands.div_ceil(2);
        let row = (bands - temporal) / 2;
        let col = bands - temporal - row;
        let cfg = Self {
            heads,
            head_dim,
            mode,
            temporal_bands: temporal,
            row_bands: row,
            col_bands: col,
            rope_base: DEFAULT_ROPE_BASE,
            offset_all_bands: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(invalid("head_dim must be even and heads >= 1"));
        }
        if self.temporal_bands + self.row_bands + self.col_bands != self.bands() {
            return Err(invalid(format!(
                "band split {}+{}+{} does not cover {} bands",
                self.temporal_bands,
                self.row_bands,
                self.col_bands,
                self.bands()
            )));
        }
        if self.temporal_bands == 0 {
            return Err(invalid("at least one temporal band is required"));
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.head_dim / 2
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Number of bands receiving the camera offset.
    pub fn offset_bands(&self) -> usize {
        if self.offset_all_bands {
            self.bands()
        } else {
            self.temporal_bands
        }
    }
}

/// `omega_b = base^(-b / bands)`; the first band always has unit frequency.
pub fn band_frequencies(bands: usize, base: f64) -> Vec<f64> {
    (0..bands)
        .map(|b| base.powf(-(b as f64) / bands as f64))
        .collect()
}

/// Angle table `theta[p][b] = position_p * omega_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryPhase {
    pub frequencies: Vec<f64>,
    pub angles: Vec<Vec<f64>>,
}

pub fn rotary_phases(positions: &[usize], bands: usize) -> Result<RotaryPhase> {
    rotary_phases_with_base(positions, bands, DEFAULT_ROPE_BASE)
}

pub fn rotary_phases_with_base(
    positions: &[usize],
    bands: usize,
    base: f64,
) -> Result<RotaryPhase> {
    if bands == 0 {
        return Err(invalid("rotary phases need at least one band"));
    }
    let frequencies = band_frequencies(bands, base);
    let angles = positions
        .iter()
        .map(|&p| frequencies.iter().map(|w| p as f64 * w).collect())
        .collect();
    Ok(RotaryPhase {
        frequencies,
        angles,
    })
}

/// Rotates each consecutive pair of `x` (`[n, heads * 2 * bands]`) by the
/// matching angle in `angles` (`[n, bands]`).
pub fn apply_rotary<T: Real>(x: &Tensor<T>, angles: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    if !x.cols().is_multiple_of(2) {
        return Err(shape(format!(
            "rotary needs an even feature dim, got {}",
            x.cols()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let av = g.constant(angles.clone());
    let y = g.rotary(xv, av, heads)?;
    Ok(g.value(y).clone())
}

/// Boolean attention mask, row-major `[queries, keys]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    allowed: Rc<Vec<bool>>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(shape(format!(
                "mask {rows}x{cols} with {} entries",
                allowed.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            allowed: Rc::new(allowed),
        })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: Rc::new(vec![true; rows * cols]),
        }
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn entries(&self) -> &[bool] {
        &self.allowed
    }

    fn shared(&self) -> Rc<Vec<bool>> {
        self.allowed.clone()
    }
}

/// Full attention inside a chunk, causal across chunks.
pub fn chunk_causal_mask(num_chunks: usize, tokens_per_chunk: usize) -> Result<Mask> {
    if num_chunks == 0 || tokens_per_chunk == 0 {
        return Err(invalid(
            "chunk_causal_mask needs at least one chunk and one token",
        ));
    }
    let n = num_chunks * tokens_per_chunk;
    let allowed = (0..n * n)
        .map(|i| (i % n) / tokens_per_chunk <= (i / n) / tokens_per_chunk)
        .collect();
    Mask::new(n, n, allowed)
}

/// Mask for tokens carrying explicit chunk ids: key chunk <= query chunk.
pub fn chunk_causal_mask_for(query_chunks: &[usize], key_chunks: &[usize]) -> Mask {
    let allowed = query_chunks
        .iter()
        .flat_map(|&q| key_chunks.iter().map(move |&k| k <= q))
        .collect();
    Mask {
        rows: query_chunks.len(),
        cols: key_chunks.len(),
        allowed: Rc::new(allowed),
    }
}

/// Where a token sits: its frame (index into the frame table) and grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenAddr {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Per-frame conditioning: original rotary position and pose descriptor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMeta {
    pub position: usize,
    pub descriptor: PoseDescriptor,
}

/// Owned parameters of the phase-offset network `h`: 14 -> 64 -> bands, tanh hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOffsetNet<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> PhaseOffsetNet<T> {
    /// Hidden layer drawn from a scaled normal; output layer zero.
    pub fn init(out_bands: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: normal_tensor(
                &[DESCRIPTOR_LEN, PHASE_HIDDEN],
                1.0 / (DESCRIPTOR_LEN as f64).sqrt(),
                rng,
            ),
            b1: Tensor::zeros(&[PHASE_HIDDEN]),
            w2: Tensor::zeros(&[PHASE_HIDDEN, out_bands]),
            b2: Tensor::zeros(&[out_bands]),
        }
    }

    pub fn register(&self, g: &mut Graph<T>) -> PhaseNetVars {
        PhaseNetVars {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PhaseNetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `delta = h(c)` for each row of `descriptors` (`[frames, 14]`).
pub fn camera_phase_offset<T: Real>(
    g: &mut Graph<T>,
    net: &PhaseNetVars,
    descriptors: Var,
) -> Result<Var> {
    let h = g.matmul(descriptors, net.w1)?;
    let h = g.add_row(h, net.b1)?;
    let h = g.tanh(h);
    let out = g.matmul(h, net.w2)?;
    g.add_row(out, net.b2)
}

pub fn descriptor_matrix<T: Real>(frames: &[FrameMeta]) -> Tensor<T> {
    Tensor::from_fn(frames.len(), DESCRIPTOR_LEN, |r, c| {
        T::of(frames[r].descriptor.0[c])
    })
}

pub fn embedding_matrix<T: Real>(frames: &[FrameMeta]) -> Tensor<T> {
    Tensor::from_fn(frames.len(), EMBEDDING_LEN, |r, c| {
        T::of(frames[r].descriptor.0[c])
    })
}

/// Owned output projection and camera residuals of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    /// `W_O`: `[heads * head_dim, model_dim]`.
    pub wo: Tensor<T>,
    /// `W_dV`: `[heads * head_dim + 12, heads * head_dim]`, zero at init.
    pub delta_v: Tensor<T>,
    /// `W_dO`: `[heads * head_dim + 12, model_dim]`, zero at init.
    pub delta_o: Tensor<T>,
    pub phase: PhaseOffsetNet<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn init(cfg: &AttentionConfig, model_dim: usize, rng: &mut impl Rng) -> Self {
        let w = cfg.width();
        Self {
            wo: normal_tensor(&[w, model_dim], 1.0 / (w as f64).sqrt(), rng),
            delta_v: Tensor::zeros(&[w + EMBEDDING_LEN, w]),
            delta_o: Tensor::zeros(&[w + EMBEDDING_LEN, model_dim]),
            phase: PhaseOffsetNet::init(cfg.offset_bands(), rng),
        }
    }

    pub fn register(&self, g: &mut Graph<T>) -> AttentionVars {
        AttentionVars {
            wo: g.param(self.wo.clone()),
            delta_v: g.param(self.delta_v.clone()),
            delta_o: g.param(self.delta_o.clone()),
            phase: self.phase.register(g),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wo: Var,
    pub delta_v: Var,
    pub delta_o: Var,
    pub phase: PhaseNetVars,
}

pub fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Queries, keys and values after the input projections, with their addresses.
pub struct AttentionInputs<'a> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub queries: &'a [TokenAddr],
    pub keys: &'a [TokenAddr],
    /// Frame table indexed by [`TokenAddr::frame`].
    pub frames: &'a [FrameMeta],
    pub mask: &'a Mask,
}

/// Per-head attention probabilities, recorded when requested.
pub type AttentionCapture<T> = Vec<Tensor<T>>;

struct FrameTables {
    delta: Option<Var>,
    embeddings: Option<Var>,
}

/// Camera-conditioned rotary attention; returns `o` of shape `[queries, model_dim]`.
pub fn pm_attention<T: Real>(
    g: &mut Graph<T>,
    inputs: &AttentionInputs<'_>,
    cfg: &AttentionConfig,
    params: &AttentionVars,
    capture: Option<&mut AttentionCapture<T>>,
) -> Result<Var> {
    cfg.validate()?;
    let width = cfg.width();
    let nq = inputs.queries.len();
    let nk = inputs.keys.len();
    if g.value(inputs.q).rows() != nq
        || g.value(inputs.k).rows() != nk
        || g.value(inputs.v).rows() != nk
    {
        return Err(shape(format!(
            "q/k/v rows {}/{}/{} vs {nq} queries and {nk} keys",
            g.value(inputs.q).rows(),
            g.value(inputs.k).rows(),
            g.value(inputs.v).rows()
        )));
    }
    for v in [inputs.q, inputs.k, inputs.v] {
        if g.value(v).cols() != width {
            return Err(shape(format!(
                "projection width {} vs {width}",
                g.value(v).cols()
            )));
        }
    }
    if inputs.mask.rows != nq || inputs.mask.cols != nk {
        return Err(shape(format!(
            "mask {}x{} for {nq} queries and {nk} keys",
            inputs.mask.rows, inputs.mask.cols
        )));
    }
    if let Some(bad) = inputs
        .queries
        .iter()
        .chain(inputs.keys)
        .find(|t| t.frame >= inputs.frames.len())
    {
        return Err(shape(format!(
            "token frame {} outside frame table",
            bad.frame
        )));
    }

    let tables = FrameTables {
        delta: if cfg.mode.uses_phase_offset() {
            let d = g.constant(descriptor_matrix(inputs.frames));
            Some(camera_phase_offset(g, &params.phase, d)?)
        } else {
            None
        },
        embeddings: if cfg.mode.uses_residuals() {
            Some(g.constant(embedding_matrix(inputs.frames)))
        } else {
            None
        },
    };

    let v = match tables.embeddings {
        Some(e) => {
            let ek = frame_gather(g, e, inputs.keys)?;
            let cat = g.concat_cols(&[inputs.v, ek])?;
            let dv = g.matmul(cat, params.delta_v)?;
            g.add(inputs.v, dv)?
        }
        None => inputs.v,
    };

    let keep = capture.is_some();
    let y = match cfg.mode {
        AttentionMode::Dual => {
            let ya = attend(g, inputs, v, cfg, &tables, Branch::Rotary, keep)?;
            let yb = attend(g, inputs, v, cfg, &tables, Branch::CameraOnly, keep)?;
            let sum = g.add(ya.0, yb.0)?;
            if let Some(c) = capture {
                for (pa, pb) in ya.1.iter().zip(&yb.1) {
                    let avg = Tensor::new(
                        pa.shape().to_vec(),
                        pa.data()
                            .iter()
                            .zip(pb.data())
                            .map(|(&a, &b)| T::of(0.5) * (a + b))
                            .collect(),
                    )?;
                    c.push(avg);
                }
            }
            g.scale(sum, 0.5)
        }
        _ => {
            let (y, probs) = attend(g, inputs, v, cfg, &tables, Branch::Joint, keep)?;
            if let Some(c) = capture {
                c.extend(probs);
            }
            y
        }
    };

    let o = g.matmul(y, params.wo)?;
    match tables.embeddings {
        Some(e) => {
            let eq = frame_gather(g, e, inputs.queries)?;
            let cat = g.concat_cols(&[y, eq])?;
            let d = g.matmul(cat, params.delta_o)?;
            g.add(o, d)
        }
        None => Ok(o),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Branch {
    /// theta over time and space, plus delta when the mode uses it.
    Joint,
    /// theta over time and space only.
    Rotary,
    /// Spatial theta plus delta, no temporal term.
    CameraOnly,
}

fn frame_gather<T: Real>(g: &mut Graph<T>, table: Var, tokens: &[TokenAddr]) -> Result<Var> {
    let idx: Vec<usize> = tokens.iter().map(|t| t.frame).collect();
    g.gather_rows(table, &idx)
}

fn token_angles<T: Real>(
    g: &mut Graph<T>,
    tokens: &[TokenAddr],
    frames: &[FrameMeta],
    cfg: &AttentionConfig,
    tables: &FrameTables,
    branch: Branch,
) -> Result<Var> {
    let bands = cfg.bands();
    let wt = band_frequencies(cfg.temporal_bands, cfg.rope_base);
    let wr = band_frequencies(cfg.row_bands, cfg.rope_base);
    let wc = band_frequencies(cfg.col_bands, cfg.rope_base);
    let temporal = branch != Branch::CameraOnly;
    let theta = Tensor::from_fn(tokens.len(), bands, |r, b| {
        let t = tokens[r];
        let a = if b < cfg.temporal_bands {
            if temporal {
                frames[t.frame].position as f64 * wt[b]
            } else {
                0.0
            }
        } else if b < cfg.temporal_bands + cfg.row_bands {
            t.row as f64 * wr[b - cfg.temporal_bands]
        } else {
            t.col as f64 * wc[b - cfg.temporal_bands - cfg.row_bands]
        };
        T::of(a)
    });
    let theta = g.constant(theta);
    let delta = match (branch, tables.delta) {
        (Branch::Rotary, _) | (_, None) => return Ok(theta),
        (_, Some(d)) => d,
    };
    let dt = frame_gather(g, delta, tokens)?;
    let dt = if cfg.offset_bands() < bands {
        let pad = g.constant(Tensor::zeros(&[tokens.len(), bands - cfg.offset_bands()]));
        g.concat_cols(&[dt, pad])?
    } else {
        dt
    };
    g.add(theta, dt)
}

fn attend<T: Real>(
    g: &mut Graph<T>,
    inputs: &AttentionInputs<'_>,
    v: Var,
    cfg: &AttentionConfig,
    tables: &FrameTables,
    branch: Branch,
    keep_probs: bool,
) -> Result<(Var, Vec<Tensor<T>>)> {
    let aq = token_angles(g, inputs.queries, inputs.frames, cfg, tables, branch)?;
    let ak = token_angles(g, inputs.keys, inputs.frames, cfg, tables, branch)?;
    let q = g.rotary(inputs.q, aq, cfg.heads)?;
    let k = g.rotary(inputs.k, ak, cfg.heads)?;
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let start = h * cfg.head_dim;
        let qh = g.slice_cols(q, start, cfg.head_dim)?;
        let kh = g.slice_cols(k, start, cfg.head_dim)?;
        let vh = g.slice_cols(v, start, cfg.head_dim)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let p = g.softmax_rows(logits, Some(inputs.mask.shared()))?;
        if keep_probs {
            probs.push(g.value(p).clone());
        }
        heads.push(g.matmul(p, vh)?);
    }
    let y = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok((y, probs))
}
