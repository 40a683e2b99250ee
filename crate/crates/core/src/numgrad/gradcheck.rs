//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Relative-error tolerance.
    pub tolerance: f64,
    /// Absolute error below which a coordinate passes regardless of its
    /// relative error.
    pub abs_floor: f64,
    /// Central-difference step.
    pub step: f64,
    /// Probe at most this many coordinates (chosen by `seed`); `None`
    /// probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            abs_floor: 1e-8,
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub op_name: String,
    /// Largest relative error among coordinates whose absolute error
    /// exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

fn eval<F>(f: &F, point: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::shape("finite_diff_check", format!("function returned {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares the reverse-mode gradient of the scalar function `f` at `point`
/// with central differences.
pub fn finite_diff_check<F>(
    op_name: &str,
    f: F,
    point: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let y0 = g.value(y).clone();
    if y0.len() != 1 {
        return Err(Error::shape("finite_diff_check", format!("function returned {:?}", y0.shape())));
    }
    if !y0.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{op_name}: value at the base point"),
        });
    }
    let analytic = g.backward(y)?.get_or_zeros(x, point.shape());

    let n = point.len();
    let coords: Vec<usize> = match cfg.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for &i in &coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += cfg.step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= cfg.step;
        let (fp, fm) = (eval(&f, plus)?, eval(&f, minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{op_name}: probing coordinate {i}"),
            });
        }
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        max_abs = max_abs.max(abs);
        if abs > cfg.abs_floor {
            let rel = abs / a.abs().max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        coords_checked: coords.len(),
        passed: max_rel <= cfg.tolerance || max_abs <= cfg.abs_floor,
    })
}
