use super::instance::TspInstance;
use crate::error::{GeldError, Result};

/// A Hamiltonian cycle with its cached length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tour {
    order: Vec<usize>,
    length: f64,
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(GeldError::InvalidTour(format!("{} entries for {n} nodes", order.len())));
    }
    let mut seen = vec![false; n];
    for &v in order {
        if v >= n {
            return Err(GeldError::InvalidTour(format!("node {v} out of range")));
        }
        if std::mem::replace(&mut seen[v], true) {
            return Err(GeldError::InvalidTour(format!("node {v} visited twice")));
        }
    }
    Ok(())
}

/// Closed-cycle length of `order`, including the edge back to the start.
pub fn tour_length(inst: &TspInstance, order: &[usize]) -> Result<f64> {
    check_permutation(order, inst.len())?;
    Ok(closed_length(inst, order))
}

fn closed_length(inst: &TspInstance, order: &[usize]) -> f64 {
    let n = order.len();
    (0..n).map(|i| inst.dist(order[i], order[(i + 1) % n])).sum()
}

/// Open path length along `nodes`.
pub fn path_length(inst: &TspInstance, nodes: &[usize]) -> f64 {
    nodes.windows(2).map(|w| inst.dist(w[0], w[1])).sum()
}

impl Tour {
    pub fn new(inst: &TspInstance, order: Vec<usize>) -> Result<Self> {
        let length = tour_length(inst, &order)?;
        Ok(Self { order, length })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn into_order(self) -> Vec<usize> {
        self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Re-validates the permutation and the cached length.
    pub fn validate(&self, inst: &TspInstance) -> Result<()> {
        let l = tour_length(inst, &self.order)?;
        if (l - self.length).abs() > 1e-9 * l.max(1.0) {
            return Err(GeldError::InvalidTour(format!("cached length {} != {l}", self.length)));
        }
        Ok(())
    }

    /// Same cycle starting from `node`.
    pub fn rotated_to(&self, node: usize) -> Tour {
        let pos = self.order.iter().position(|&v| v == node).expect("node in tour");
        let mut order = self.order.clone();
        order.rotate_left(pos);
        Tour { order, length: self.length }
    }
}
