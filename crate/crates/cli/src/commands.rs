//! The five pipeline commands. Each is deterministic under the config seed.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remind_core::attention::AttentionMode;
use remind_core::diagnostics::{
    anchor_retrieval_score, heatmap_csv, heatmap_pgm, identifiability_sim, kv_importance,
    IdentifiabilityReport, ImportanceMatrix, ScoringScenario,
};
use remind_core::frame_graph::{
    apply_interruption, decode_state, synth_world, InterruptionSpec, NodeRole, Scenario,
    SyntheticClip,
};
use remind_core::kv_cache::{DropPolicy, Reliability};
use remind_core::trainer::{
    chunk_descriptors, load_checkpoint, rollout, sample_batch, save_checkpoint, train_step,
    ModelConfig, ModelParams, PrefixChunk, RolloutMode, RolloutRequest, StepReport, TrainState,
};
use serde::{Deserialize, Serialize};

use crate::config::{Provenance, RunConfig};
use crate::container::{dataset_clips, dataset_container, Container, ROLLOUT_KIND};

pub const DATASET_FILE: &str = "dataset.rmds";
pub const CHECKPOINT_FILE: &str = "checkpoint.rmck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GENERATED_FILE: &str = "generated.rmds";
pub const ROLLOUT_REPORT_FILE: &str = "rollout.json";
pub const HEATMAP_BASE: &str = "kv_importance";
pub const SCORES_FILE: &str = "scores.json";
pub const IDENTIFIABILITY_FILE: &str = "identifiability.json";
pub const ABLATION_FILE: &str = "ablation.csv";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Clips drawn from `seed`: scenario by the configured mix, then the
/// interruption with its probability. The panning loop already carries its
/// own interruption and is left as generated.
pub fn generate_clips(cfg: &RunConfig, seed: u64, count: usize) -> Result<Vec<SyntheticClip>> {
    let world = cfg.world();
    let mix = cfg.data.scenarios.weights();
    let pick = WeightedIndex::new(mix.iter().map(|(_, w)| *w)).context("data.scenarios")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let int = &cfg.data.interruption;
    let length = cfg.data.chunks * world.frames_per_chunk;
    (0..count)
        .map(|_| {
            let scenario = mix[pick.sample(&mut rng)].0;
            let clip_seed: u64 = rng.random();
            let roll: f64 = rng.random();
            let clip = synth_world(clip_seed, scenario, length, &world)?;
            if clip.interruption.is_some() || roll >= int.probability {
                return Ok(clip);
            }
            let spec = InterruptionSpec::over_chunks(
                int.kind,
                int.first_chunk,
                int.last_chunk,
                world.frames_per_chunk,
                int.magnitude,
            );
            Ok(apply_interruption(&clip, &spec)?)
        })
        .collect()
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<SyntheticClip>> {
    let clips = generate_clips(cfg, cfg.seed, cfg.data.clips)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    dataset_container(&clips, cfg.provenance())?.write(out)?;
    Ok(clips)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SyntheticClip>> {
    let clips = dataset_clips(&Container::read(path)?)?;
    ensure!(
        !clips.is_empty(),
        "dataset {} holds no clips",
        path.display()
    );
    Ok(clips)
}

/// Rejects datasets rendered for a different latent grid than `model`.
pub fn check_dataset(model: &ModelConfig, clips: &[SyntheticClip]) -> Result<()> {
    for (i, c) in clips.iter().enumerate() {
        let w = &c.world;
        if (w.grid, w.latent_dim, w.frames_per_chunk)
            != (model.grid, model.latent_dim, model.frames_per_chunk)
        {
            bail!(
                "clip {i} has grid {}, latent_dim {}, frames_per_chunk {}; the model expects {}, {}, {}",
                w.grid,
                w.latent_dim,
                w.frames_per_chunk,
                model.grid,
                model.latent_dim,
                model.frames_per_chunk
            );
        }
    }
    Ok(())
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub iter: u64,
    pub flow: f64,
    pub delta: f64,
    pub lambda: f64,
    pub total: f64,
    pub regime: String,
}

impl From<&StepReport> for MetricsLine {
    fn from(r: &StepReport) -> Self {
        Self {
            iter: r.iter,
            flow: r.loss.flow,
            delta: r.loss.delta,
            lambda: r.loss.lambda,
            total: r.loss.total,
            regime: r.regime.clone(),
        }
    }
}

/// Runs the configured number of iterations on `clips` with `model`,
/// handing every step to `on_step`.
pub fn train_model(
    cfg: &RunConfig,
    model: &ModelConfig,
    clips: &[SyntheticClip],
    mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<TrainState> {
    check_dataset(model, clips)?;
    let curriculum = cfg.curriculum.curriculum();
    let weights = cfg.curriculum.weights.pairs();
    let mut state = TrainState::new(model, cfg.seed)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler.set_stream(1);
    for _ in 0..cfg.train.iterations {
        let batch = sample_batch(
            clips,
            cfg.train.batch_size,
            &weights,
            &curriculum,
            &mut sampler,
        )?;
        let report = train_step(&mut state, model, &cfg.optimizer, &curriculum, &batch)?;
        on_step(&state, &report)?;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub provenance: Provenance,
    pub iterations: u64,
    pub clips: usize,
    pub first: Option<MetricsLine>,
    pub last: Option<MetricsLine>,
    /// Mean flow loss over the first and last tenth of the run.
    pub early_flow: Option<f64>,
    pub late_flow: Option<f64>,
    pub checkpoints: Vec<String>,
}

fn checkpoint_meta(prov: &Provenance) -> serde_json::Value {
    serde_json::json!({ "provenance": prov })
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let clips = load_dataset(data)?;
    create_dir(out_dir)?;
    let prov = cfg.provenance();
    let meta = checkpoint_meta(&prov);
    let mut metrics = std::io::BufWriter::new(
        fs::File::create(out_dir.join(METRICS_FILE)).context("creating metrics log")?,
    );
    let mut lines = Vec::with_capacity(cfg.train.iterations);
    let mut checkpoints = Vec::new();
    let state = train_model(cfg, &cfg.model, &clips, |state, report| {
        let line = MetricsLine::from(report);
        serde_json::to_writer(&mut metrics, &line)?;
        metrics.write_all(b"\n")?;
        let done = state.iter as usize;
        if cfg.train.checkpoint_every > 0
            && done.is_multiple_of(cfg.train.checkpoint_every)
            && done < cfg.train.iterations
        {
            let name = format!("checkpoint_{done:06}.rmck");
            save_checkpoint(&out_dir.join(&name), state, &cfg.model, &meta)?;
            checkpoints.push(name);
        }
        lines.push(line);
        Ok(())
    })?;
    metrics.flush()?;
    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &state, &cfg.model, &meta)?;
    checkpoints.push(CHECKPOINT_FILE.to_string());
    let tenth = lines.len().div_ceil(10);
    let mean_flow = |s: &[MetricsLine]| {
        (!s.is_empty()).then(|| s.iter().map(|l| l.flow).sum::<f64>() / s.len() as f64)
    };
    let summary = TrainSummary {
        provenance: prov,
        iterations: state.iter,
        clips: clips.len(),
        first: lines.first().cloned(),
        last: lines.last().cloned(),
        early_flow: mean_flow(&lines[..tenth]),
        late_flow: mean_flow(&lines[lines.len() - tenth..]),
        checkpoints,
    };
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Model configuration and parameters stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams<f64>)> {
    let ck =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ck.model, ck.state.params))
}

fn prefix_chunk(clip: &SyntheticClip, i: usize) -> Result<PrefixChunk<f64>> {
    let role = clip.graph.role(i);
    Ok(PrefixChunk {
        latents: clip.chunk(i),
        descriptors: chunk_descriptors(clip, i)?,
        reliability: if role == Some(NodeRole::Interruption) {
            Reliability::Degraded
        } else {
            Reliability::Clean
        },
        anchor: role == Some(NodeRole::Anchor),
    })
}

/// Scalar state decoded from every frame of a generated chunk.
pub fn decode_chunk(clip: &SyntheticClip, chunk: &remind_core::numerics::Tensor<f64>) -> Vec<f64> {
    let frame_len = clip.tokens() * clip.dim();
    chunk
        .data()
        .chunks(frame_len)
        .map(|f| decode_state(clip.scenario, &clip.world, f))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub recovery_chunk: usize,
    pub anchor_frame: usize,
    /// Mean absolute error of the decoded state over the recovery chunk.
    pub model_error: f64,
    /// Same, for a prediction frozen at the anchor's last true state.
    pub freeze_error: f64,
}

/// Conditions on every chunk before the first recovery (degraded ones marked
/// as such), generates the recovery chunk, and scores its decoded state
/// against the ground truth. `None` for clips without a recovery.
pub fn evaluate_recovery(
    model: &ModelConfig,
    params: &ModelParams<f64>,
    clip: &SyntheticClip,
    noise_seed: u64,
) -> Result<Option<RecoveryScore>> {
    let Some(&r) = clip.graph.recoveries().first() else {
        return Ok(None);
    };
    let Some(&anchor) = clip.graph.anchors().iter().filter(|&&a| a < r).max() else {
        return Ok(None);
    };
    let req = RolloutRequest {
        prefix: (0..r)
            .map(|i| prefix_chunk(clip, i))
            .collect::<Result<_>>()?,
        reference_gap: None,
        targets: vec![chunk_descriptors(clip, r)?],
        noise_seed,
        drop: BTreeSet::new(),
        drop_policy: DropPolicy::Noise,
        scenario: clip.scenario,
    };
    let out = rollout(model, params, &req)?;
    let decoded = decode_chunk(clip, &out.generated[0]);
    let m = clip.frames_per_chunk;
    let anchor_frame = (anchor + 1) * m - 1;
    let frozen = clip.state[anchor_frame];
    let truth = &clip.state[r * m..(r + 1) * m];
    let n = m as f64;
    Ok(Some(RecoveryScore {
        recovery_chunk: r,
        anchor_frame,
        model_error: decoded
            .iter()
            .zip(truth)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n,
        freeze_error: truth.iter().map(|t| (frozen - t).abs()).sum::<f64>() / n,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub frame: usize,
    pub decoded: f64,
    /// Ground truth, when the frame lies inside the clip.
    pub truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub provenance: Provenance,
    pub mode: RolloutMode,
    pub clip: usize,
    pub scenario: Scenario,
    pub prefix_chunks: usize,
    pub generated_chunks: usize,
    pub reference_gap: Option<usize>,
    /// Frame position where generation starts.
    pub first_target_position: usize,
    /// First frame position of every generated chunk.
    pub positions: Vec<usize>,
    /// Decoded state of every generated chunk's frames.
    pub per_chunk_decoded: Vec<Vec<f64>>,
    pub frames: Vec<FrameState>,
    pub mean_abs_error: Option<f64>,
    pub recovery: Option<RecoveryScore>,
}

pub fn cmd_rollout(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out_dir: &Path,
) -> Result<RolloutReport> {
    let (model, params) = load_model(checkpoint)?;
    let clips = load_dataset(data)?;
    check_dataset(&model, &clips)?;
    let rc = &cfg.rollout;
    let clip = clips
        .get(rc.clip)
        .with_context(|| format!("clip {} not in dataset of {}", rc.clip, clips.len()))?;
    let chunks = clip.num_chunks();
    let m = clip.frames_per_chunk;
    let (prefix, gap, start) = match rc.mode {
        RolloutMode::I2v => (1, None, 1),
        RolloutMode::V2v => {
            let p = rc.prefix_chunks.unwrap_or_else(|| {
                clip.graph
                    .recoveries()
                    .first()
                    .copied()
                    .unwrap_or(chunks.div_ceil(2))
            });
            ensure!(
                (1..=chunks).contains(&p),
                "v2v needs between 1 and {chunks} prefix chunks, got {p}"
            );
            (p, None, p)
        }
        RolloutMode::Refcache => {
            ensure!(rc.gap >= 1, "refcache needs a gap of at least one chunk");
            (1, Some(rc.gap), rc.gap)
        }
    };
    let available = chunks.saturating_sub(start);
    let count = rc.num_chunks.unwrap_or(available);
    ensure!(
        count <= available,
        "{} rollout from chunk {start} can generate at most {available} chunks of clip {}, asked for {count}",
        rc.mode.name(),
        rc.clip
    );
    let req = RolloutRequest {
        prefix: (0..prefix)
            .map(|i| prefix_chunk(clip, i))
            .collect::<Result<_>>()?,
        reference_gap: gap,
        targets: (start..start + count)
            .map(|c| chunk_descriptors(clip, c))
            .collect::<Result<_, _>>()?,
        noise_seed: rc.noise_seed,
        drop: BTreeSet::new(),
        drop_policy: DropPolicy::Noise,
        scenario: clip.scenario,
    };
    let out = rollout(&model, &params, &req)?;
    let per_chunk_decoded: Vec<Vec<f64>> = out
        .generated
        .iter()
        .map(|g| decode_chunk(clip, g))
        .collect();
    let mut frames = Vec::new();
    for (pos, decoded) in out.positions.iter().zip(&per_chunk_decoded) {
        for (f, &d) in decoded.iter().enumerate() {
            let frame = pos + f;
            frames.push(FrameState {
                frame,
                decoded: d,
                truth: clip.state.get(frame).copied(),
            });
        }
    }
    let scored: Vec<f64> = frames
        .iter()
        .filter_map(|f| f.truth.map(|t| (f.decoded - t).abs()))
        .collect();
    let recovery = match (clip.graph.recoveries().first(), rc.mode) {
        (Some(&r), RolloutMode::V2v) if prefix == r && count > 0 => {
            evaluate_recovery(&model, &params, clip, rc.noise_seed)?
        }
        _ => None,
    };
    let prov = cfg.provenance();
    let report = RolloutReport {
        provenance: prov.clone(),
        mode: rc.mode,
        clip: rc.clip,
        scenario: clip.scenario,
        prefix_chunks: prefix,
        generated_chunks: count,
        reference_gap: gap,
        first_target_position: start * m,
        positions: out.positions.clone(),
        per_chunk_decoded,
        frames,
        mean_abs_error: (!scored.is_empty())
            .then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        recovery,
    };
    create_dir(out_dir)?;
    let named = req
        .prefix
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("prefix{i}"), p.latents.clone()))
        .chain(
            out.generated
                .iter()
                .enumerate()
                .map(|(i, g)| (format!("generated{i}"), g.clone())),
        )
        .collect();
    let meta = serde_json::json!({
        "mode": rc.mode,
        "clip": rc.clip,
        "prefix_chunks": prefix,
        "reference_gap": gap,
        "positions": out.positions,
    });
    Container::new(ROLLOUT_KIND, prov, meta, named).write(&out_dir.join(GENERATED_FILE))?;
    write_json(&out_dir.join(ROLLOUT_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: usize,
    pub argmax: Option<usize>,
    /// Largest gap between a cell and an even split over the row's chunks.
    pub max_deviation_from_uniform: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseScores {
    pub provenance: Provenance,
    pub clip: usize,
    pub anchors: Vec<usize>,
    pub recoveries: Vec<usize>,
    pub anchor_retrieval_score: Option<f64>,
    pub rows: Vec<RowSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseOutput {
    pub matrix: ImportanceMatrix,
    pub scores: DiagnoseScores,
    pub identifiability: Option<IdentifiabilityReport>,
    pub files: Vec<PathBuf>,
}

/// Heatmap CSV preceded by a provenance comment.
pub fn stamped_csv(mat: &ImportanceMatrix, prov: &Provenance) -> String {
    format!("# {}\n{}", prov.comment(), heatmap_csv(mat))
}

/// PGM with the provenance as a header comment.
pub fn stamped_pgm(mat: &ImportanceMatrix, prov: &Provenance) -> Vec<u8> {
    let plain = heatmap_pgm(mat);
    let mut out = format!("P5\n# {}\n", prov.comment()).into_bytes();
    out.extend_from_slice(&plain[3..]);
    out
}

pub fn identifiability_report(cfg: &RunConfig) -> Result<IdentifiabilityReport> {
    let scenario = ScoringScenario {
        seed: cfg.seed,
        ..ScoringScenario::default()
    };
    Ok(identifiability_sim(
        &scenario,
        cfg.diagnostics.identifiability_trials,
    )?)
}

pub fn cmd_diagnose(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    clip_id: usize,
    out_dir: &Path,
    identifiability: bool,
) -> Result<DiagnoseOutput> {
    let (model, params) = load_model(checkpoint)?;
    let clips = load_dataset(data)?;
    check_dataset(&model, &clips)?;
    let clip = clips
        .get(clip_id)
        .with_context(|| format!("clip {clip_id} not in dataset of {}", clips.len()))?;
    let matrix = kv_importance(&model, &params, clip, &cfg.diagnostics.options())?;
    let ars = if clip.graph.recoveries().is_empty() {
        None
    } else {
        Some(anchor_retrieval_score(&matrix, &clip.graph)?)
    };
    let rows = (0..matrix.rows)
        .map(|r| {
            let even = 1.0 / (r + 1) as f64;
            RowSummary {
                row: r,
                argmax: matrix.argmax_row(r),
                max_deviation_from_uniform: matrix
                    .row(r)
                    .iter()
                    .flatten()
                    .map(|v| (v - even).abs())
                    .fold(0.0, f64::max),
            }
        })
        .collect();
    let prov = cfg.provenance();
    let scores = DiagnoseScores {
        provenance: prov.clone(),
        clip: clip_id,
        anchors: clip.graph.anchors(),
        recoveries: clip.graph.recoveries(),
        anchor_retrieval_score: ars,
        rows,
    };
    create_dir(out_dir)?;
    let csv = out_dir.join(format!("{HEATMAP_BASE}.csv"));
    let pgm = out_dir.join(format!("{HEATMAP_BASE}.pgm"));
    let json = out_dir.join(SCORES_FILE);
    fs::write(&csv, stamped_csv(&matrix, &prov))?;
    fs::write(&pgm, stamped_pgm(&matrix, &prov))?;
    write_json(&json, &scores)?;
    let mut files = vec![csv, pgm, json];
    let identifiability = if identifiability {
        let report = identifiability_report(cfg)?;
        let path = out_dir.join(IDENTIFIABILITY_FILE);
        write_json(
            &path,
            &serde_json::json!({ "provenance": prov, "report": report }),
        )?;
        files.push(path);
        Some(report)
    } else {
        None
    };
    Ok(DiagnoseOutput {
        matrix,
        scores,
        identifiability,
        files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AttentionMode,
    pub recovery_error: f64,
    pub freeze_error: f64,
    /// `recovery_error / freeze_error`.
    pub error_ratio: f64,
    pub anchor_retrieval_score: f64,
    pub final_flow: f64,
}

/// Scores a trained model on held-out clips with a recovery; noise for each
/// clip is seeded by the clip's own seed.
pub fn evaluate_model(
    model: &ModelConfig,
    params: &ModelParams<f64>,
    clips: &[SyntheticClip],
    opts: &RunConfig,
) -> Result<(f64, f64, f64)> {
    let (mut err, mut base, mut ars, mut n) = (0.0, 0.0, 0.0, 0usize);
    for clip in clips {
        let Some(score) = evaluate_recovery(model, params, clip, clip.seed)? else {
            continue;
        };
        let mat = kv_importance(model, params, clip, &opts.diagnostics.options())?;
        err += score.model_error;
        base += score.freeze_error;
        ars += anchor_retrieval_score(&mat, &clip.graph)?;
        n += 1;
    }
    ensure!(n > 0, "no evaluation clip has a recovery chunk");
    let n = n as f64;
    Ok((err / n, base / n, ars / n))
}

fn ablate_mode(
    cfg: &RunConfig,
    mode: AttentionMode,
    train: &[SyntheticClip],
    eval: &[SyntheticClip],
) -> Result<AblationRow> {
    let model = ModelConfig {
        mode,
        ..cfg.model.clone()
    };
    let mut final_flow = f64::NAN;
    let state = train_model(cfg, &model, train, |_, r| {
        final_flow = r.loss.flow;
        Ok(())
    })?;
    let (recovery_error, freeze_error, ars) = evaluate_model(&model, &state.params, eval, cfg)?;
    Ok(AblationRow {
        mode,
        recovery_error,
        freeze_error,
        error_ratio: recovery_error / freeze_error,
        anchor_retrieval_score: ars,
        final_flow,
    })
}

pub fn ablation_csv(rows: &[AblationRow], prov: &Provenance) -> String {
    let mut out = format!(
        "# {}\nmode,recovery_error,freeze_error,error_ratio,anchor_retrieval_score,final_flow\n",
        prov.comment()
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.mode.name(),
            r.recovery_error,
            r.freeze_error,
            r.error_ratio,
            r.anchor_retrieval_score,
            r.final_flow
        ));
    }
    out
}

/// Trains every configured mode with identical seeds and budget, then
/// scores each on the held-out clips.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<Vec<AblationRow>> {
    ensure!(!cfg.ablate.modes.is_empty(), "ablate.modes is empty");
    let train = load_dataset(data)?;
    let eval = generate_clips(cfg, cfg.eval.seed, cfg.eval.clips)?;
    let modes = &cfg.ablate.modes;
    let rows: Vec<AblationRow> = if cfg.ablate.parallel {
        let (train, eval) = (&train, &eval);
        std::thread::scope(|s| {
            let handles: Vec<_> = modes
                .iter()
                .map(|&mode| s.spawn(move || ablate_mode(cfg, mode, train, eval)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        modes
            .iter()
            .map(|&mode| ablate_mode(cfg, mode, &train, &eval))
            .collect::<Result<_>>()?
    };
    create_dir(out_dir)?;
    fs::write(
        out_dir.join(ABLATION_FILE),
        ablation_csv(&rows, &cfg.provenance()),
    )?;
    Ok(rows)
}
