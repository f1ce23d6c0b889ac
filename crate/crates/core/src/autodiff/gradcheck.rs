use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so that gradients that are
    /// essentially zero are compared in absolute terms.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 64,
            seed: 0,
            abs_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub step: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every tensor in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let out = f(&mut g, &bound)?;
        let v = g.value(out);
        if v.shape() != [1, 1] {
            return Err(Error::contract("grad_check: function must return a scalar"));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = f(&mut g, &bound)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check: loss at the base point".into()));
    }
    let grads = g.backward(out)?;
    let analytic = bound.collect_grads(&g, &grads);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: loss while perturbing {}[{i}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[id.index()].data()[i];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: analytic gradient of {}[{i}]",
                    params.name(id)
                )));
            }
            worst = worst.max(relative_error(a, numeric, cfg.abs_floor));
        }
        checks.push(ParamCheck {
            name: params.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tolerance: cfg.tolerance,
        step: cfg.step,
        pass: max_rel_error <= cfg.tolerance,
    })
}
