use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_graph, chunk_clip, FrameGraph};
use crate::error::{invalid, Error, Result};
use crate::geometry::{normalize_trajectory, rot_y, CameraPose, IDENTITY};
use crate::numerics::Tensor;

/// Latent dims are split into four equal blocks.
const BLOCKS: usize = 4;
const FILL_BLOCK: usize = 0;
const TEXTURE_BLOCK: usize = 1;
const DOT_BLOCK: usize = 2;
const OCCLUDER_BLOCK: usize = 3;
const TEXTURE_AMPLITUDE: f64 = 0.8;
const DARK_LEVEL: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    FillingBar,
    MovingDot,
    PanLoopScene,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::FillingBar,
        Scenario::MovingDot,
        Scenario::PanLoopScene,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FillingBar => "filling_bar",
            Scenario::MovingDot => "moving_dot",
            Scenario::PanLoopScene => "pan_loop_scene",
        }
    }

    /// Position in [`Scenario::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_monotonic(self) -> bool {
        matches!(self, Scenario::FillingBar | Scenario::PanLoopScene)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown scenario '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterruptionKind {
    CameraLoop,
    LightToggle,
    Occluder,
    Zoom,
}

impl InterruptionKind {
    pub const ALL: [InterruptionKind; 4] = [
        InterruptionKind::CameraLoop,
        InterruptionKind::LightToggle,
        InterruptionKind::Occluder,
        InterruptionKind::Zoom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InterruptionKind::CameraLoop => "camera_loop",
            InterruptionKind::LightToggle => "light_toggle",
            InterruptionKind::Occluder => "occluder",
            InterruptionKind::Zoom => "zoom",
        }
    }
}

impl FromStr for InterruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterruptionKind::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown interruption kind '{s}'")))
    }
}

/// `magnitude` is the darkness for light toggles, the covered fraction of the
/// view for occluders, the fraction of the maximal pan for camera loops and
/// the peak extra magnification for zooms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterruptionSpec {
    pub kind: InterruptionKind,
    pub onset: usize,
    pub duration: usize,
    pub magnitude: f64,
}

impl InterruptionSpec {
    pub fn new(kind: InterruptionKind, onset: usize, duration: usize, magnitude: f64) -> Self {
        Self {
            kind,
            onset,
            duration,
            magnitude,
        }
    }

    /// Window aligned to whole chunks `[first, last]`.
    pub fn over_chunks(
        kind: InterruptionKind,
        first: usize,
        last: usize,
        frames_per_chunk: usize,
        magnitude: f64,
    ) -> Self {
        Self::new(
            kind,
            first * frames_per_chunk,
            (last + 1 - first) * frames_per_chunk,
            magnitude,
        )
    }

    pub fn end(&self) -> usize {
        self.onset + self.duration
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.onset && frame < self.end()
    }

    fn validate(&self, frames: usize) -> Result<()> {
        if self.end() > frames {
            return Err(invalid(format!(
                "interruption window {}..{} outside clip of {frames} frames",
                self.onset,
                self.end()
            )));
        }
        let m = self.magnitude;
        let ok = match self.kind {
            InterruptionKind::Zoom => m.is_finite() && m >= 0.0,
            _ => (0.0..=1.0).contains(&m),
        };
        if !ok {
            return Err(invalid(format!(
                "magnitude {m} out of range for {}",
                self.kind.name()
            )));
        }
        Ok(())
    }

    /// Triangle profile rising to 1 at the window centre and back.
    fn profile(&self, frame: usize) -> f64 {
        let u = (frame - self.onset + 1) as f64 / (self.duration + 1) as f64;
        1.0 - (2.0 * u - 1.0).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid: usize,
    pub latent_dim: usize,
    pub frames_per_chunk: usize,
    pub rate_min: f64,
    pub rate_max: f64,
    pub dot_speed_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            latent_dim: 16,
            frames_per_chunk: 3,
            rate_min: 0.015,
            rate_max: 0.045,
            dot_speed_max: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(invalid("grid must be at least 2"));
        }
        if self.latent_dim == 0 || !self.latent_dim.is_multiple_of(BLOCKS) {
            return Err(invalid(format!(
                "latent_dim must be a positive multiple of {BLOCKS}"
            )));
        }
        if self.frames_per_chunk == 0 {
            return Err(invalid("frames_per_chunk must be positive"));
        }
        if !(self.rate_min >= 0.0 && self.rate_min <= self.rate_max) {
            return Err(invalid("need 0 <= rate_min <= rate_max"));
        }
        if self.dot_speed_max.is_nan() || self.dot_speed_max < 0.0 {
            return Err(invalid("dot_speed_max must be non-negative"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn world_cols(&self) -> usize {
        3 * self.grid
    }

    /// Largest camera pan in grid columns; the initial view is then fully out of frame.
    pub fn max_pan(&self) -> usize {
        2 * self.grid
    }

    /// Yaw per grid column for the unit-focal pinhole camera.
    fn column_angle(&self) -> f64 {
        2.0 * 0.5f64.atan() / self.grid as f64
    }
}

/// Scene constants drawn from the clip seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub rate: f64,
    pub dot_start: [f64; 2],
    pub dot_velocity: [f64; 2],
    /// `grid × world_cols`, row-major.
    pub texture: Vec<f64>,
}

/// Viewing conditions of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameView {
    pub pan: usize,
    pub zoom: f64,
    pub darkness: f64,
    pub occlusion: f64,
}

impl Default for FrameView {
    fn default() -> Self {
        Self {
            pan: 0,
            zoom: 1.0,
            darkness: 0.0,
            occlusion: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClip {
    pub scenario: Scenario,
    pub caption_tag: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub params: SceneParams,
    pub frames_per_chunk: usize,
    /// `[chunks, frames_per_chunk, tokens, dim]`.
    pub latents: Tensor<f64>,
    pub poses: Vec<CameraPose>,
    pub state: Vec<f64>,
    pub views: Vec<FrameView>,
    pub interruption: Option<InterruptionSpec>,
    pub graph: FrameGraph,
}

impl SyntheticClip {
    pub fn num_chunks(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.num_chunks() * self.frames_per_chunk
    }

    pub fn tokens(&self) -> usize {
        self.latents.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.latents.shape()[3]
    }

    fn frame_len(&self) -> usize {
        self.tokens() * self.dim()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frame_len();
        &self.latents.data()[k * n..(k + 1) * n]
    }

    /// One chunk as `[frames_per_chunk * tokens, dim]`.
    pub fn chunk(&self, c: usize) -> Tensor<f64> {
        let n = self.frame_len() * self.frames_per_chunk;
        let data = self.latents.data()[c * n..(c + 1) * n].to_vec();
        Tensor::new(
            vec![self.frames_per_chunk * self.tokens(), self.dim()],
            data,
        )
        .expect("chunk slice matches its shape")
    }

    pub fn chunk_poses(&self, c: usize) -> &[CameraPose] {
        let m = self.frames_per_chunk;
        &self.poses[c * m..(c + 1) * m]
    }

    /// Decodes the scalar state of frame `k` from its latents.
    pub fn decode_frame(&self, k: usize) -> f64 {
        decode_state(self.scenario, &self.world, self.frame(k))
    }

    fn render_all(&mut self) -> Result<()> {
        let frames = self.state.len();
        let per = self.world.tokens() * self.world.latent_dim;
        let mut data = Vec::with_capacity(frames * per);
        for k in 0..frames {
            data.extend(render_frame(
                self.scenario,
                &self.world,
                &self.params,
                &self.state,
                k,
                &self.views[k],
            ));
        }
        let flat = Tensor::new(
            vec![frames, self.world.tokens(), self.world.latent_dim],
            data,
        )?;
        self.latents = chunk_clip(&flat, self.frames_per_chunk)?;
        let raw: Vec<CameraPose> = self
            .views
            .iter()
            .map(|v| raw_pose(&self.world, v))
            .collect();
        self.poses = normalize_trajectory(&raw)?;
        Ok(())
    }
}

/// Generates a clip of `length` frames (padded to whole chunks).
pub fn synth_world(
    seed: u64,
    scenario: Scenario,
    length: usize,
    cfg: &WorldConfig,
) -> Result<SyntheticClip> {
    cfg.validate()?;
    if length == 0 {
        return Err(invalid("clip length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = if cfg.rate_max > cfg.rate_min {
        rng.random_range(cfg.rate_min..cfg.rate_max)
    } else {
        cfg.rate_min
    };
    let g = cfg.grid as f64;
    let dot_start = [rng.random_range(0.0..g), rng.random_range(0.0..g)];
    let speed = |rng: &mut ChaCha8Rng| {
        if cfg.dot_speed_max > 0.0 {
            rng.random_range(-cfg.dot_speed_max..cfg.dot_speed_max)
        } else {
            0.0
        }
    };
    let dot_velocity = [speed(&mut rng), speed(&mut rng)];
    let texture = (0..cfg.grid * cfg.world_cols())
        .map(|_| {
            if rng.random_bool(0.5) {
                TEXTURE_AMPLITUDE
            } else {
                -TEXTURE_AMPLITUDE
            }
        })
        .collect();
    let params = SceneParams {
        rate,
        dot_start,
        dot_velocity,
        texture,
    };

    let m = cfg.frames_per_chunk;
    let padded = length.div_ceil(m) * m;
    let mut state: Vec<f64> = (0..length)
        .map(|k| match scenario {
            Scenario::MovingDot => (dot_start[1] + k as f64 * dot_velocity[1]).rem_euclid(g),
            _ => (k as f64 * rate).min(1.0),
        })
        .collect();
    let last = state[length - 1];
    state.resize(padded, last);

    let mut clip = SyntheticClip {
        scenario,
        caption_tag: scenario.name().to_string(),
        seed,
        world: cfg.clone(),
        params,
        frames_per_chunk: m,
        latents: Tensor::zeros(&[0, m, cfg.tokens(), cfg.latent_dim]),
        poses: Vec::new(),
        state,
        views: vec![FrameView::default(); padded],
        interruption: None,
        graph: FrameGraph::plain(padded / m),
    };

    if scenario == Scenario::PanLoopScene {
        let chunks = padded / m;
        if chunks < 3 {
            return Err(invalid("pan_loop_scene needs at least 3 chunks"));
        }
        // pan away over the middle of the clip and return to the start view
        let first = (chunks * 2 / 7).max(1);
        let span = (chunks * 3 / 7).clamp(1, chunks - 1 - first);
        let spec = InterruptionSpec::over_chunks(
            InterruptionKind::CameraLoop,
            first,
            first + span - 1,
            m,
            1.0,
        );
        apply_views(&mut clip, &spec);
        clip.render_all()?;
        clip.graph = build_graph(&clip, Some(&spec))?;
        clip.interruption = Some(spec);
    } else {
        clip.render_all()?;
    }
    Ok(clip)
}

/// Degrades the observations inside the window; the state is left untouched.
pub fn apply_interruption(clip: &SyntheticClip, spec: &InterruptionSpec) -> Result<SyntheticClip> {
    spec.validate(clip.num_frames())?;
    if spec.duration == 0 {
        return Ok(clip.clone());
    }
    if clip.interruption.is_some() {
        return Err(invalid("clip already carries an interruption window"));
    }
    let mut out = clip.clone();
    apply_views(&mut out, spec);
    out.render_all()?;
    out.graph = build_graph(&out, Some(spec))?;
    out.interruption = Some(*spec);
    Ok(out)
}

fn apply_views(clip: &mut SyntheticClip, spec: &InterruptionSpec) {
    let max_pan = clip.world.max_pan() as f64;
    for k in spec.onset..spec.end() {
        let v = &mut clip.views[k];
        match spec.kind {
            InterruptionKind::LightToggle => v.darkness = spec.magnitude,
            InterruptionKind::Occluder => v.occlusion = spec.magnitude,
            InterruptionKind::CameraLoop => {
                v.pan = (spec.magnitude * max_pan * spec.profile(k)).round() as usize;
            }
            InterruptionKind::Zoom => v.zoom = 1.0 + spec.magnitude * spec.profile(k),
        }
    }
}

fn raw_pose(cfg: &WorldConfig, v: &FrameView) -> CameraPose {
    let g = cfg.grid as f64;
    let rotation = if v.pan == 0 {
        IDENTITY
    } else {
        rot_y(v.pan as f64 * cfg.column_angle())
    };
    CameraPose {
        rotation,
        translation: [0.0; 3],
        fx: g * v.zoom,
        fy: g * v.zoom,
        width: g,
    }
}

/// Fraction of row `r` (0 at the top) covered by a bar filled to `level`.
pub fn row_occupancy(level: f64, r: usize, grid: usize) -> f64 {
    (level * grid as f64 - (grid - 1 - r) as f64).clamp(0.0, 1.0)
}

/// Grid cell nearest to a continuous dot position, wrapped onto the torus.
pub fn dot_cell(pos: [f64; 2], grid: usize) -> (usize, usize) {
    let g = grid as i64;
    let wrap = |x: f64| ((x.round() as i64).rem_euclid(g)) as usize;
    (wrap(pos[1]), wrap(pos[0]))
}

fn dot_position(params: &SceneParams, k: usize, grid: usize) -> [f64; 2] {
    let g = grid as f64;
    [
        (params.dot_start[0] + k as f64 * params.dot_velocity[0]).rem_euclid(g),
        (params.dot_start[1] + k as f64 * params.dot_velocity[1]).rem_euclid(g),
    ]
}

/// Moving-dot position `[x, y]` at frame `k`.
pub fn dot_trajectory(clip: &SyntheticClip, k: usize) -> [f64; 2] {
    dot_position(&clip.params, k, clip.world.grid)
}

fn render_frame(
    scenario: Scenario,
    cfg: &WorldConfig,
    params: &SceneParams,
    state: &[f64],
    k: usize,
    view: &FrameView,
) -> Vec<f64> {
    let g = cfg.grid;
    let d = cfg.latent_dim;
    let bw = d / BLOCKS;
    let wc = cfg.world_cols();
    let centre = (g as f64 - 1.0) / 2.0;
    let sample = |i: usize| {
        let x = ((i as f64 - centre) / view.zoom + centre).round();
        x.clamp(0.0, (g - 1) as f64) as usize
    };
    let dot = dot_cell(dot_position(params, k, g), g);
    let occluded_cols = (view.occlusion * g as f64).ceil() as usize;
    let mut out = vec![0.0; g * g * d];
    for r in 0..g {
        for c in 0..g {
            let tok = &mut out[(r * g + c) * d..(r * g + c + 1) * d];
            if c < occluded_cols {
                let v = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                tok[OCCLUDER_BLOCK * bw..(OCCLUDER_BLOCK + 1) * bw].fill(v);
                continue;
            }
            let (sr, sc) = (sample(r), sample(c));
            let world_col = (sc + view.pan) % wc;
            if world_col < g {
                match scenario {
                    Scenario::MovingDot => {
                        let on = if (sr, world_col) == dot { 1.0 } else { -1.0 };
                        tok[DOT_BLOCK * bw..(DOT_BLOCK + 1) * bw].fill(on);
                    }
                    _ => {
                        let occ = row_occupancy(state[k], sr, g);
                        tok[FILL_BLOCK * bw..(FILL_BLOCK + 1) * bw].fill(2.0 * occ - 1.0);
                    }
                }
            } else {
                let t = params.texture[sr * wc + world_col];
                for (j, x) in tok[TEXTURE_BLOCK * bw..(TEXTURE_BLOCK + 1) * bw]
                    .iter_mut()
                    .enumerate()
                {
                    *x = if j % 2 == 0 { t } else { -t };
                }
            }
            if view.darkness > 0.0 {
                for x in tok.iter_mut() {
                    *x = (1.0 - view.darkness) * *x + view.darkness * DARK_LEVEL;
                }
            }
        }
    }
    out
}

/// Mean bar occupancy implied by a frame, read from the fill block.
pub fn decode_fill(frame: &[f64], cfg: &WorldConfig) -> f64 {
    let d = cfg.latent_dim;
    let bw = d / BLOCKS;
    let tokens = frame.len() / d;
    let total: f64 = frame
        .chunks(d)
        .map(|tok| {
            let mean = tok[FILL_BLOCK * bw..(FILL_BLOCK + 1) * bw]
                .iter()
                .sum::<f64>()
                / bw as f64;
            (mean + 1.0) / 2.0
        })
        .sum();
    total / tokens as f64
}

/// Cell `(row, col)` with the strongest dot response.
pub fn decode_dot(frame: &[f64], cfg: &WorldConfig) -> (usize, usize) {
    let d = cfg.latent_dim;
    let bw = d / BLOCKS;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, tok) in frame.chunks(d).enumerate() {
        let s: f64 = tok[DOT_BLOCK * bw..(DOT_BLOCK + 1) * bw].iter().sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    (best.0 / cfg.grid, best.0 % cfg.grid)
}

/// Scalar state read back from a frame: fill level, or the dot row.
pub fn decode_state(scenario: Scenario, cfg: &WorldConfig, frame: &[f64]) -> f64 {
    match scenario {
        Scenario::MovingDot => decode_dot(frame, cfg).0 as f64,
        _ => decode_fill(frame, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occupancy_mean_is_level() {
        for level in [0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            let mean: f64 = (0..8).map(|r| row_occupancy(level, r, 8)).sum::<f64>() / 8.0;
            assert!((mean - level).abs() < 1e-12);
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("pouring".parse::<Scenario>().is_err());
    }

    #[test]
    fn zoom_profile_returns_to_identity() {
        let spec = InterruptionSpec::new(InterruptionKind::Zoom, 3, 5, 1.0);
        assert!(spec.profile(3) > 0.0);
        assert!((spec.profile(5) - 1.0).abs() < 1e-12);
    }
}
