//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{Module, Param};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, as a fraction of the largest
/// analytic gradient magnitude in the check (and never below this value
/// itself). Coordinates whose true gradient is zero, such as biases feeding a
/// train-mode batch norm, are thereby judged against the gradient scale of the
/// whole check rather than against finite-difference round-off.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
/// Step refinements tried when `refine_kinks` is set.
pub const KINK_REFINEMENTS: [f64; 3] = [0.1, 0.01, 0.001];

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// When set, at most this many coordinates per parameter are probed,
    /// chosen by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// When a perturbation of size `step` flips a ReLU, clamp or max-pool
    /// decision (see [`Graph::branch_signature`]), the central difference
    /// straddles a kink and is no oracle for the derivative; retry with the
    /// step scaled by each factor in [`KINK_REFINEMENTS`] until both
    /// perturbed evaluations stay on the unperturbed smooth piece.
    pub refine_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
            refine_kinks: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
    /// Set when the check could not run to completion (e.g. a non-finite value).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    fn failed(msg: String, tolerance: f64) -> Self {
        GradCheckReport {
            params: Vec::new(),
            tolerance,
            failure: Some(msg),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return writeln!(f, "FAILED: {msg}");
        }
        for p in &self.params {
            writeln!(
                f,
                "{:<40} checked {:>5}  max rel {:.3e}  max abs {:.3e}  {}",
                p.name,
                p.checked,
                p.max_rel_error,
                p.max_abs_error,
                if p.max_rel_error < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn nth_param_mut<M: Module<f64>>(target: &mut M, index: usize, f: impl FnOnce(&mut Param<f64>)) {
    let mut f = Some(f);
    let mut i = 0;
    target.visit_params_mut("", &mut |_, p| {
        if i == index {
            if let Some(f) = f.take() {
                f(p);
            }
        }
        i += 1;
    });
}

/// Loss value and branch signature of one forward evaluation.
fn eval_loss<M, F>(target: &mut M, build: &mut F) -> Result<(f64, u64)>
where
    M: Module<f64>,
    F: FnMut(&mut M, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(target, &mut g)?;
    Ok((g.value(loss).item()?, g.branch_signature()))
}

/// Loss at `±h` on coordinate `c` of parameter `index`; restores the value.
fn perturbed<M, F>(
    target: &mut M,
    build: &mut F,
    index: usize,
    c: usize,
    h: f64,
) -> Result<((f64, u64), (f64, u64))>
where
    M: Module<f64>,
    F: FnMut(&mut M, &mut Graph<f64>) -> Result<Var>,
{
    let mut original = 0.0;
    nth_param_mut(target, index, |p| {
        original = p.value().data()[c];
        p.value_mut().data_mut()[c] = original + h;
    });
    let plus = eval_loss(target, build);
    nth_param_mut(target, index, |p| p.value_mut().data_mut()[c] = original - h);
    let minus = eval_loss(target, build);
    nth_param_mut(target, index, |p| p.value_mut().data_mut()[c] = original);
    Ok((plus?, minus?))
}

/// Compares the gradient of every parameter of `target` against central
/// differences of the scalar produced by `build`. `build` must bind the
/// parameters through [`Graph::param`] and be deterministic.
pub fn gradcheck<M, F>(target: &mut M, cfg: &GradCheckConfig, mut build: F) -> GradCheckReport
where
    M: Module<f64>,
    F: FnMut(&mut M, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let analytic: Vec<(String, Tensor<f64>)> = match build(target, &mut g)
        .and_then(|loss| g.backward(loss))
    {
        Ok(grads) => {
            let mut out = Vec::new();
            target.visit_params("", &mut |name, p| {
                let grad = grads
                    .param(p)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value().shape()));
                out.push((name, grad));
            });
            out
        }
        Err(e) => return GradCheckReport::failed(format!("forward/backward: {e}"), cfg.tolerance),
    };
    drop(g);

    let base_signature = match eval_loss(target, &mut build) {
        Ok((_, sig)) => sig,
        Err(e) => return GradCheckReport::failed(format!("forward: {e}"), cfg.tolerance),
    };
    let scale = analytic
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = REL_ERROR_FLOOR * scale;

    let mut reports = Vec::with_capacity(analytic.len());
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(pi as u64));
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut rep = ParamReport {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: coords.len(),
        };
        for &c in &coords {
            let a = grad.data()[c];
            let mut steps = vec![cfg.step];
            if cfg.refine_kinks {
                steps.extend(KINK_REFINEMENTS.iter().map(|f| cfg.step * f));
            }
            let mut numeric = f64::NAN;
            for (si, &h) in steps.iter().enumerate() {
                let ((plus, sig_plus), (minus, sig_minus)) = match perturbed(target, &mut build, pi, c, h) {
                    Ok(v) => v,
                    Err(e) => {
                        return GradCheckReport::failed(
                            format!("{name}[{c}] perturbed forward: {e}"),
                            cfg.tolerance,
                        )
                    }
                };
                numeric = (plus - minus) / (2.0 * h);
                let smooth = sig_plus == base_signature && sig_minus == base_signature;
                if smooth || si + 1 == steps.len() {
                    break;
                }
            }
            if !numeric.is_finite() || !a.is_finite() {
                return GradCheckReport::failed(
                    format!("{name}[{c}] non-finite gradient (analytic {a}, numeric {numeric})"),
                    cfg.tolerance,
                );
            }
            rep.max_abs_error = rep.max_abs_error.max((a - numeric).abs());
            rep.max_rel_error = rep.max_rel_error.max(relative_error(a, numeric, floor));
        }
        reports.push(rep);
    }
    GradCheckReport {
        params: reports,
        tolerance: cfg.tolerance,
        failure: None,
    }
}
