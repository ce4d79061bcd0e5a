use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{GeldError, Result};

/// Denominator floor for relative differences of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_diff: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub per_parameter: Vec<GradEntry>,
}

impl GradReport {
    /// Names of parameters with at least one coordinate above `threshold`.
    pub fn flagged(&self, threshold: f64) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .per_parameter
            .iter()
            .filter(|e| e.rel_diff > threshold)
            .map(|e| e.name.as_str())
            .collect();
        names.dedup();
        names
    }
}

/// Compares the analytic gradient returned by `loss_and_grad` against
/// central differences `(f(p+eps) − f(p−eps)) / 2eps`.
///
/// At most `per_param` coordinates of each parameter are probed, chosen with
/// a seeded RNG; `None` probes every coordinate.
pub fn check_gradients<F>(
    loss_and_grad: F,
    params: &[Tensor<f64>],
    names: &[String],
    eps: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(GeldError::Argument(format!("eps {eps} outside (0, 1e-3]")));
    }
    let (loss, analytic) = loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(GeldError::NonFinite("loss at unperturbed parameters".into()));
    }
    check_gradients_with(|p| Ok(loss_and_grad(p)?.0), &analytic, params, names, eps, per_param, seed)
}

/// Like [`check_gradients`] with the analytic gradient supplied up front,
/// so the perturbed evaluations can skip the backward pass.
pub fn check_gradients_with<F>(
    loss: F,
    analytic: &[Vec<f64>],
    params: &[Tensor<f64>],
    names: &[String],
    eps: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(GeldError::Argument(format!("eps {eps} outside (0, 1e-3]")));
    }
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(g, p)| g.len() != p.len()) {
        return Err(GeldError::Shape("analytic gradient does not match the parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut report = GradReport::default();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match per_param {
            Some(k) if k < p.len() => {
                let mut c = sample(&mut rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        for j in coords {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = loss(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = loss(&work)?;
            work[pi].data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(GeldError::NonFinite(format!("loss while perturbing {}[{j}]", names[pi])));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_diff = report.max_abs_diff.max(abs);
            report.max_rel_diff = report.max_rel_diff.max(rel);
            report.per_parameter.push(GradEntry {
                name: names[pi].clone(),
                index: j,
                analytic: a,
                numeric,
                rel_diff: rel,
            });
        }
    }
    Ok(report)
}
