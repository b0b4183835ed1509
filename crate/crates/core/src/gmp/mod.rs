//! Generalized minimal partition over the supervoxel graph: a KL fidelity to
//! the initial change field plus a weighted Potts penalty on linked edges.

mod brute_force;
mod cut_pursuit;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::EdgeWeights;

pub use brute_force::{brute_force_gmp, BRUTE_FORCE_LIMIT};
pub use cut_pursuit::{cut_pursuit, CutPursuitOptions, CutPursuitResult};

/// `(rho_change, rho_nochange)`.
pub type Dist = [f64; 2];

/// Values closer than this are the same component value.
pub const VALUE_EQ_TOL: f64 = 1e-12;

pub fn same_value(a: &Dist, b: &Dist) -> bool {
    (a[0] - b[0]).abs() <= VALUE_EQ_TOL && (a[1] - b[1]).abs() <= VALUE_EQ_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeField {
    pub values: Vec<Dist>,
}

impl ChangeField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !(v[0] >= 0.0 && v[1] >= 0.0) || (v[0] + v[1] - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("node {i}: {v:?} is not a probability pair")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmpProblem {
    pub n_nodes: usize,
    /// Penalized edges `(a, b, weight)`; zero-weight edges are not stored.
    pub edges: Vec<(u32, u32, f64)>,
    /// Constant factor on every edge weight.
    pub w: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl GmpProblem {
    pub const DEFAULT_W: f64 = 1.0;
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_EPSILON: f64 = 0.01;

    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (u32, u32, f64)>) -> Self {
        GmpProblem {
            n_nodes,
            edges: edges.into_iter().filter(|e| e.2 > 0.0).collect(),
            w: Self::DEFAULT_W,
            lambda: Self::DEFAULT_LAMBDA,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn from_weights(n_nodes: usize, weights: &EdgeWeights) -> Self {
        Self::new(
            n_nodes,
            weights.edges.iter().zip(&weights.weights).map(|(&(a, b), &w)| (a, b, w)),
        )
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::invalid(format!("edge weight must be finite and >= 0, got {}", self.w)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon must be in [0, 1), got {}", self.epsilon)));
        }
        for &(a, b, w) in &self.edges {
            if a == b || a as usize >= self.n_nodes || b as usize >= self.n_nodes || !w.is_finite() {
                return Err(Error::invalid(format!("invalid edge ({a}, {b}, {w})")));
            }
        }
        Ok(())
    }

    /// Neighbor lists with effective weights `w * weight`.
    pub(crate) fn adjacency(&self) -> Vec<Vec<(u32, f64)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(a, b, wt) in &self.edges {
            adj[a as usize].push((b, self.w * wt));
            adj[b as usize].push((a, self.w * wt));
        }
        adj
    }

    fn smooth(&self, x: &Dist) -> Dist {
        let e = self.epsilon;
        [(1.0 - e) * x[0] + e / 2.0, (1.0 - e) * x[1] + e / 2.0]
    }

    /// `KL(p~ || q~)` on smoothed distributions.
    pub fn kl(&self, p: &Dist, q: &Dist) -> f64 {
        let (p, q) = (self.smooth(p), self.smooth(q));
        (0..2)
            .map(|k| {
                if p[k] <= 0.0 {
                    0.0
                } else if q[k] <= 0.0 {
                    f64::INFINITY
                } else {
                    p[k] * (p[k] / q[k]).ln()
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub component: Vec<u32>,
    pub values: Vec<Dist>,
}

impl Partition {
    pub fn n_components(&self) -> usize {
        self.values.len()
    }

    pub fn field(&self) -> ChangeField {
        ChangeField {
            values: self.component.iter().map(|&c| self.values[c as usize]).collect(),
        }
    }
}

/// `(p_seed, 1 - p_seed)` on changed supervoxels, `(0.5, 0.5)` elsewhere.
pub fn init_labeling(n_nodes: usize, changed: &BTreeSet<u32>, p_seed: f64) -> ChangeField {
    ChangeField {
        values: (0..n_nodes as u32)
            .map(|i| if changed.contains(&i) { [p_seed, 1.0 - p_seed] } else { [0.5, 0.5] })
            .collect(),
    }
}

pub fn fidelity(p: &ChangeField, q: &ChangeField, problem: &GmpProblem) -> f64 {
    p.values.iter().zip(&q.values).map(|(a, b)| problem.kl(a, b)).sum()
}

/// Total weight of penalized edges whose endpoint values differ.
pub fn penalty(q: &ChangeField, problem: &GmpProblem) -> f64 {
    problem
        .edges
        .iter()
        .filter(|(a, b, _)| !same_value(&q.values[*a as usize], &q.values[*b as usize]))
        .map(|(_, _, wt)| problem.w * wt)
        .sum()
}

pub fn energy(p: &ChangeField, q: &ChangeField, problem: &GmpProblem) -> f64 {
    let psi = penalty(q, problem);
    let phi = fidelity(p, q, problem);
    if problem.lambda == 0.0 {
        phi
    } else {
        phi + problem.lambda * psi
    }
}

/// `true` (changing) iff `q_change > q_nochange`.
pub fn extract_labels(q: &ChangeField) -> Vec<bool> {
    q.values.iter().map(|v| v[0] > v[1]).collect()
}

/// Arithmetic mean of the given distributions.
pub(crate) fn mean_of<'a>(values: impl Iterator<Item = &'a Dist>) -> Dist {
    let mut acc = [0.0, 0.0];
    let mut n = 0usize;
    for v in values {
        acc[0] += v[0];
        acc[1] += v[1];
        n += 1;
    }
    if n == 0 {
        return [0.5, 0.5];
    }
    [acc[0] / n as f64, acc[1] / n as f64]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node(lambda: f64, epsilon: f64) -> (ChangeField, GmpProblem) {
        let p = ChangeField {
            values: vec![[0.8, 0.2], [0.5, 0.5]],
        };
        let prob = GmpProblem::new(2, [(0, 1, 1.0)]).with_lambda(lambda).with_epsilon(epsilon);
        (p, prob)
    }

    #[test]
    fn init_values() {
        let f = init_labeling(3, &BTreeSet::from([1]), 0.8);
        let expected = [[0.5, 0.5], [0.8, 0.2], [0.5, 0.5]];
        for (v, e) in f.values.iter().zip(&expected) {
            assert!((v[0] - e[0]).abs() < 1e-15 && (v[1] - e[1]).abs() < 1e-15);
        }
        f.validate().unwrap();
    }

    #[test]
    fn energy_identity_and_closed_form() {
        let (p, prob) = two_node(1.0, 0.0);
        assert_eq!(fidelity(&p, &p, &prob), 0.0);
        assert_eq!(energy(&p, &p, &prob), 1.0);
        let q = ChangeField {
            values: vec![[0.65, 0.35]; 2],
        };
        // Independent evaluation of both KL terms.
        let kl1 = 0.8 * (0.8f64 / 0.65).ln() + 0.2 * (0.2f64 / 0.35).ln();
        let kl2 = 0.5 * (0.5f64 / 0.65).ln() + 0.5 * (0.5f64 / 0.35).ln();
        assert!((kl1 - 0.054_19).abs() < 1e-5);
        assert!((kl2 - 0.047_16).abs() < 1e-5);
        assert!((energy(&p, &q, &prob) - (kl1 + kl2)).abs() < 1e-12);
        assert!((energy(&p, &q, &prob) - 0.1013).abs() < 1e-4);
    }

    #[test]
    fn no_edges_no_penalty() {
        let prob = GmpProblem::new(2, []);
        let q = ChangeField {
            values: vec![[0.1, 0.9], [0.7, 0.3]],
        };
        assert_eq!(penalty(&q, &prob), 0.0);
    }

    #[test]
    fn smoothing_keeps_kl_finite() {
        let prob = GmpProblem::new(1, []);
        assert!(prob.kl(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
        let raw = prob.clone().with_epsilon(0.0);
        assert!(raw.kl(&[1.0, 0.0], &[0.0, 1.0]).is_infinite());
        assert_eq!(raw.kl(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn labels_tie_is_unchanged() {
        let q = ChangeField {
            values: vec![[0.65, 0.35], [0.5, 0.5], [0.2, 0.8]],
        };
        assert_eq!(extract_labels(&q), vec![true, false, false]);
    }

    #[test]
    fn validation() {
        let (_, prob) = two_node(-1.0, 0.0);
        assert!(prob.validate().is_err());
        assert!(GmpProblem::new(2, [(0, 2, 1.0)]).validate().is_err());
        assert!(GmpProblem::new(2, [(0, 1, 1.0)]).with_epsilon(1.0).validate().is_err());
        let bad = ChangeField {
            values: vec![[0.7, 0.2]],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weight_edges_dropped() {
        let prob = GmpProblem::new(3, [(0, 1, 0.0), (1, 2, 1.0)]);
        assert_eq!(prob.edges, vec![(1, 2, 1.0)]);
    }
}
