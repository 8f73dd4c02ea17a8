//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever evaluates the forward function, so it stays
//! independent of the adjoint code it checks.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute differences below this pass regardless of relative error;
    /// covers coordinates whose true gradient is zero.
    pub abs_floor: f64,
    /// Coordinates sampled per input tensor (all of them when larger than the tensor).
    pub samples: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-9,
            samples: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` receives one param var per input tensor.
pub fn check_gradients<R: Rng>(
    inputs: &[Tensor<f64>],
    cfg: GradCheck,
    rng: &mut R,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let analytic = g.grad(loss, &vars)?;

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let coords: Vec<usize> = if cfg.samples >= n {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, cfg.samples).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti].data()[i];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if (a - numeric).abs() > cfg.abs_floor {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > cfg.rel_tol {
                    report.failures.push(Mismatch {
                        input: ti,
                        index: i,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
