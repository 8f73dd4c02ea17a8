//! Attention diagnostics: chunk-level KV-importance maps, an anchor-retrieval
//! score, heatmap export and the memory-addressing identifiability study.

mod identifiability;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionCapture;
use crate::curriculum::noise_with;
use crate::error::{invalid, shape, Error, Result};
use crate::frame_graph::{FrameGraph, Scenario, SyntheticClip};
use crate::geometry::PoseDescriptor;
use crate::kv_cache::KvCache;
use crate::numerics::{Graph, Tensor};
use crate::trainer::{
    chunk_descriptors, encode_chunk, forward, gaussian, patchify, ChunkInput, ModelConfig,
    ModelParams,
};

pub use identifiability::*;

/// Slack allowed on `[0, 1]` for accumulated rounding.
const MASS_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Noise level of the query chunk while its attention is recorded.
    pub sigma: f64,
    pub noise_seed: u64,
    /// Half-open layer range aggregated by the max; all layers when unset.
    pub layer_range: Option<[usize; 2]>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            noise_seed: 0,
            layer_range: None,
        }
    }
}

/// Query-chunk by history-chunk attention mass. `None` marks cells that are
/// unavailable (a chunk cannot attend to later chunks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Option<f64>>,
    /// Matrices of the aggregated layers before the max, when recorded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer: Vec<Vec<Option<f64>>>,
}

impl ImportanceMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(shape(format!(
                "{} cells for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(v) = values
            .iter()
            .flatten()
            .find(|v| !v.is_finite() || **v < -MASS_SLACK || **v > 1.0 + MASS_SLACK)
        {
            return Err(invalid(format!("importance {v} outside [0, 1]")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            per_layer: Vec::new(),
        })
    }

    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged importance rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Option<f64>] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Sum of the available cells of row `r`.
    pub fn row_mass(&self, r: usize) -> f64 {
        self.row(r).iter().flatten().sum()
    }

    /// Column with the largest available mass in row `r`; ties go to the
    /// earlier column.
    pub fn argmax_row(&self, r: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (c, v) in self.row(r).iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Mean attention mass of each query onto every key group, averaged over
/// heads and query rows. `key_groups[k]` names the group of key `k`.
pub fn group_mass(
    capture: &AttentionCapture<f64>,
    key_groups: &[usize],
    groups: usize,
) -> Result<Vec<f64>> {
    if capture.is_empty() {
        return Err(invalid("attention capture is disabled or empty"));
    }
    let mut mass = vec![0.0; groups];
    let mut count = 0usize;
    for probs in capture {
        if probs.cols() != key_groups.len() {
            return Err(shape(format!(
                "{} keys captured, {} labelled",
                probs.cols(),
                key_groups.len()
            )));
        }
        for r in 0..probs.rows() {
            for (p, &grp) in probs.row(r).iter().zip(key_groups) {
                if grp >= groups {
                    return Err(invalid(format!("key group {grp} out of {groups}")));
                }
                mass[grp] += p;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("attention capture has no query rows"));
    }
    for m in &mut mass {
        *m /= count as f64;
    }
    Ok(mass)
}

/// Chunk-level importance of an observed sequence. Chunks are given in cell
/// layout; each is queried at the configured noise level against a cache
/// holding the clean encodings of all earlier chunks, as during generation.
pub fn kv_importance_chunks(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    chunks: &[Tensor<f64>],
    descriptors: &[Vec<PoseDescriptor>],
    scenario: Scenario,
    opts: &DiagnosticsConfig,
) -> Result<ImportanceMatrix> {
    let n = chunks.len();
    if n == 0 || descriptors.len() != n {
        return Err(invalid(format!(
            "{n} chunks with {} descriptor sets",
            descriptors.len()
        )));
    }
    let [lo, hi] = opts.layer_range.unwrap_or([0, cfg.layers]);
    if lo >= hi || hi > cfg.layers {
        return Err(invalid(format!(
            "layer range {lo}..{hi} for {} layers",
            cfg.layers
        )));
    }
    let tpf = cfg.tokens_per_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    let mut cache = KvCache::new(cfg.layers);
    let mut per_layer = vec![vec![None; n * n]; hi - lo];
    for i in 0..n {
        let x0 = patchify(&chunks[i], cfg)?;
        let eps: Tensor<f64> = gaussian(x0.shape(), &mut rng);
        let (xt, _) = noise_with(&x0, opts.sigma, eps.data())?;
        let history = cache.read_history(i)?;
        let mut key_groups: Vec<usize> = history
            .chunk_ids
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, tpf))
            .collect();
        key_groups.extend(std::iter::repeat_n(i, cfg.tokens_per_chunk()));

        let mut g = Graph::new();
        let vars = params.register_frozen(&mut g);
        let input = ChunkInput {
            x: &xt,
            sigma: opts.sigma,
            position_chunk: i,
            descriptors: &descriptors[i],
            scenario,
        };
        let mut captured = Vec::new();
        forward(
            &mut g,
            cfg,
            &vars,
            Some(&history),
            &[input],
            Some(&mut captured),
        )?;
        if captured.len() != cfg.layers {
            return Err(invalid("attention capture is disabled or empty"));
        }
        for (slot, cap) in per_layer.iter_mut().zip(&captured[lo..hi]) {
            let mass = group_mass(cap, &key_groups, n)?;
            for j in 0..=i {
                slot[i * n + j] = Some(mass[j]);
            }
        }
        let entry = encode_chunk(cfg, params, &cache, &x0, &descriptors[i], scenario, i, i)?;
        cache.write_chunk(entry)?;
    }
    let values = (0..n * n)
        .map(|k| {
            per_layer
                .iter()
                .filter_map(|l| l[k])
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a| a.max(v)))
                })
        })
        .collect();
    let mut mat = ImportanceMatrix::new(n, n, values)?;
    mat.per_layer = per_layer;
    Ok(mat)
}

/// [`kv_importance_chunks`] over every chunk of a clip.
pub fn kv_importance(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    clip: &SyntheticClip,
    opts: &DiagnosticsConfig,
) -> Result<ImportanceMatrix> {
    let n = clip.num_chunks();
    let chunks: Vec<Tensor<f64>> = (0..n).map(|c| clip.chunk(c)).collect();
    let descs = (0..n)
        .map(|c| chunk_descriptors(clip, c))
        .collect::<Result<Vec<_>>>()?;
    kv_importance_chunks(cfg, params, &chunks, &descs, clip.scenario, opts)
}

/// Mean over recovery rows of the mass on anchor chunks minus the mass on
/// interruption chunks.
pub fn anchor_retrieval_score(mat: &ImportanceMatrix, graph: &FrameGraph) -> Result<f64> {
    let recoveries = graph.recoveries();
    if recoveries.is_empty() {
        return Err(Error::Graph("no recovery nodes to score".into()));
    }
    let anchors = graph.anchors();
    let interruptions = graph.interruptions();
    let mut total = 0.0;
    for &r in &recoveries {
        if r >= mat.rows {
            return Err(shape(format!(
                "recovery chunk {r} outside a {}-row matrix",
                mat.rows
            )));
        }
        let mass = |cols: &[usize]| -> f64 {
            cols.iter()
                .filter(|&&c| c < mat.cols)
                .filter_map(|&c| mat.get(r, c))
                .sum()
        };
        total += mass(&anchors) - mass(&interruptions);
    }
    Ok(total / recoveries.len() as f64)
}

/// CSV with a header row of history chunks, six-decimal cells and `NA` for
/// unavailable ones.
pub fn heatmap_csv(mat: &ImportanceMatrix) -> String {
    let mut out = String::from("query");
    for c in 0..mat.cols {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for r in 0..mat.rows {
        let _ = write!(out, "{r}");
        for v in mat.row(r) {
            match v {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Reads [`heatmap_csv`] output back; blank lines and `#` comments are
/// skipped.
pub fn parse_heatmap_csv(text: &str) -> Result<ImportanceMatrix> {
    let bad = |m: String| Error::Format(format!("heatmap csv: {m}"));
    let mut lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let cols = header.split(',').count().saturating_sub(1);
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        if label.trim().parse::<usize>().ok() != Some(i) {
            return Err(bad(format!("row {i} labelled '{label}'")));
        }
        let row = cells
            .map(|c| match c.trim() {
                "NA" => Ok(None),
                s => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| bad(format!("cell '{s}': {e}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols {
            return Err(bad(format!(
                "row {i} has {} cells, header has {cols}",
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return ImportanceMatrix::new(0, cols, Vec::new());
    }
    ImportanceMatrix::from_rows(&rows)
}

/// Binary 8-bit greyscale image, one pixel per cell, `[0, 1]` mapped to
/// `[0, 255]` and unavailable cells black.
pub fn heatmap_pgm(mat: &ImportanceMatrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mat.cols, mat.rows).into_bytes();
    out.extend(
        mat.values
            .iter()
            .map(|v| v.map_or(0, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
    );
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Writes `<base>.csv` and `<base>.pgm`.
pub fn export_heatmap(mat: &ImportanceMatrix, base: &Path) -> Result<HeatmapFiles> {
    if mat.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap cells".into()));
    }
    let files = HeatmapFiles {
        csv: base.with_extension("csv"),
        pgm: base.with_extension("pgm"),
    };
    fs::write(&files.csv, heatmap_csv(mat))?;
    fs::write(&files.pgm, heatmap_pgm(mat))?;
    Ok(files)
}
