use serde::{Deserialize, Serialize};

use crate::error::{GeldError, Result};

pub type Point = [f64; 2];

/// How edge lengths are measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    /// Plain Euclidean distance.
    ContinuousEuclid,
    /// TSPLIB `EUC_2D`: each edge rounded to the nearest integer.
    TsplibRoundedEuclid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TspInstance {
    name: String,
    coords: Vec<Point>,
    metric: MetricMode,
}

impl TspInstance {
    /// Needs at least three finite points, two of them distinct.
    pub fn new(name: impl Into<String>, coords: Vec<Point>, metric: MetricMode) -> Result<Self> {
        if coords.len() < 3 {
            return Err(GeldError::DegenerateInstance(format!("{} nodes, need at least 3", coords.len())));
        }
        if let Some(i) = coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(GeldError::DegenerateInstance(format!("node {i} has a non-finite coordinate")));
        }
        if coords.iter().all(|p| *p == coords[0]) {
            return Err(GeldError::DegenerateInstance("all nodes coincide".into()));
        }
        Ok(Self { name: name.into(), coords, metric })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn metric(&self) -> MetricMode {
        self.metric
    }

    pub fn with_metric(mut self, metric: MetricMode) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Edge length under the instance metric.
    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.coords[a], self.coords[b]);
        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
        match self.metric {
            MetricMode::ContinuousEuclid => d,
            // f64::round is half-away-from-zero
            MetricMode::TsplibRoundedEuclid => d.round(),
        }
    }

    /// Sub-instance over `nodes`, in the given order.
    pub fn subset(&self, nodes: &[usize]) -> Result<Self> {
        Self::new(self.name.clone(), nodes.iter().map(|&i| self.coords[i]).collect(), self.metric)
    }
}
