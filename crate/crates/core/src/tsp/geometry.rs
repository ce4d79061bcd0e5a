use std::cmp::Ordering;

use super::instance::Point;
use crate::error::{GeldError, Result};
use crate::numeric::Tensor;

/// Shifts the minimum corner to the origin and divides by the largest
/// coordinate range over both axes, so the longer side spans exactly
/// `[0, 1]` and the aspect ratio is kept.
pub fn normalize_coords(coords: &[Point]) -> Result<Vec<Point>> {
    if coords.is_empty() {
        return Err(GeldError::DegenerateInstance("no coordinates".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in coords {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(GeldError::DegenerateInstance("all points identical".into()));
    }
    Ok(coords
        .iter()
        .map(|p| [((p[0] - lo[0]) / scale).min(1.0), ((p[1] - lo[1]) / scale).min(1.0)])
        .collect())
}

/// Percentage excess of `model_len` over `opt_len`.
pub fn gap(model_len: f64, opt_len: f64) -> Result<f64> {
    if !(opt_len > 0.0) {
        return Err(GeldError::Metric(format!("reference length {opt_len} must be positive")));
    }
    Ok((model_len - opt_len) / opt_len * 100.0)
}

#[inline]
fn sq_dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// The `min(k_m, n_t)` unvisited nodes closest to `anchor`, nearest first,
/// ties broken by lower index. `anchor` itself is never returned.
pub fn k_nearest_available(coords: &[Point], anchor: usize, visited: &[bool], k_m: usize) -> Result<Vec<usize>> {
    if visited.len() != coords.len() {
        return Err(GeldError::Shape(format!("mask of {} for {} nodes", visited.len(), coords.len())));
    }
    let available: Vec<usize> = (0..coords.len()).filter(|&i| !visited[i] && i != anchor).collect();
    nearest_among(coords, anchor, &available, k_m)
}

/// As [`k_nearest_available`] but over an explicit list of available nodes.
pub(crate) fn nearest_among(coords: &[Point], anchor: usize, available: &[usize], k_m: usize) -> Result<Vec<usize>> {
    if k_m == 0 {
        return Err(GeldError::Argument("k_m must be at least 1".into()));
    }
    let a = coords[anchor];
    let mut keyed: Vec<(f64, usize)> =
        available.iter().filter(|&&i| i != anchor).map(|&i| (sq_dist(a, coords[i]), i)).collect();
    if keyed.is_empty() {
        return Err(GeldError::Exhausted);
    }
    let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal).then(x.1.cmp(&y.1));
    let k = k_m.min(keyed.len());
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Grid partition of normalised coordinates into `rows × cols` regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionAssignment {
    pub region_of: Vec<usize>,
    pub counts: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl RegionAssignment {
    pub fn num_regions(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn assign_regions(norm_coords: &[Point], rows: usize, cols: usize) -> Result<RegionAssignment> {
    if rows == 0 || cols == 0 {
        return Err(GeldError::Argument("region grid needs at least one row and column".into()));
    }
    let mut region_of = Vec::with_capacity(norm_coords.len());
    let mut counts = vec![0; rows * cols];
    for (i, p) in norm_coords.iter().enumerate() {
        if p.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(GeldError::Precondition(format!("node {i} at {p:?} is outside the unit square")));
        }
        let r = ((p[1].max(0.0) * rows as f64).floor() as usize).min(rows - 1);
        let c = ((p[0].max(0.0) * cols as f64).floor() as usize).min(cols - 1);
        let id = r * cols + c;
        counts[id] += 1;
        region_of.push(id);
    }
    Ok(RegionAssignment { region_of, counts, rows, cols })
}

/// Euclidean distances among `subset`, in subset order.
pub fn distance_matrix(coords: &[Point], subset: &[usize]) -> Result<Tensor<f64>> {
    let k = subset.len();
    if let Some(&bad) = subset.iter().find(|&&i| i >= coords.len()) {
        return Err(GeldError::Index { index: bad, len: coords.len() });
    }
    let mut data = vec![0.0; k * k];
    for a in 0..k {
        for b in (a + 1)..k {
            let (p, q) = (coords[subset[a]], coords[subset[b]]);
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            data[a * k + b] = d;
            data[b * k + a] = d;
        }
    }
    Tensor::matrix(k, k, data)
}
