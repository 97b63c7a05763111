use nalgebra::{DMatrix, SymmetricEigen};

use super::basis::hermite_table;

/// Tensor Gauss-Hermite rule for the standard normal density in `dim` variables.
///
/// Nodes are enumerated with the last dimension varying fastest. Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub dim: usize,
    pub points_per_dim: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * f(z)).sum()
    }
}

/// One-dimensional probabilists' Gauss-Hermite nodes and weights.
///
/// Nodes come from the eigenvalues of the Jacobi matrix, polished by Newton
/// steps on `He_Q`; weights use `Q! / (Q² He_{Q-1}(z)²)`.
pub fn gauss_hermite_1d(points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(points >= 1, "quadrature needs at least one point");
    let jacobi = DMatrix::from_fn(points, points, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));
    let q = points as f64;
    let log_fact: f64 = (1..=points).map(|k| (k as f64).ln()).sum();
    let mut weights = Vec::with_capacity(points);
    for z in nodes.iter_mut() {
        for _ in 0..3 {
            let t = hermite_table(points, *z);
            let deriv = q * t[points - 1];
            if deriv == 0.0 {
                break;
            }
            *z -= t[points] / deriv;
        }
        let prev = hermite_table(points, *z)[points - 1];
        weights.push((log_fact - 2.0 * q.ln() - 2.0 * prev.abs().ln()).exp());
    }
    // symmetric rule: enforce exact antisymmetry of nodes and symmetry of weights
    for i in 0..points / 2 {
        let j = points - 1 - i;
        let z = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -z;
        nodes[j] = z;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if points % 2 == 1 {
        nodes[points / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (nodes, weights)
}

pub fn build_quadrature(dim: usize, points_per_dim: usize) -> QuadratureRule {
    let (z1, w1) = gauss_hermite_1d(points_per_dim);
    let count = points_per_dim.pow(dim as u32);
    let mut nodes = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for flat in 0..count {
        let mut rem = flat;
        let mut z = vec![0.0; dim];
        let mut w = 1.0;
        for k in (0..dim).rev() {
            let idx = rem % points_per_dim;
            rem /= points_per_dim;
            z[k] = z1[idx];
            w *= w1[idx];
        }
        nodes.push(z);
        weights.push(w);
    }
    QuadratureRule {
        dim,
        points_per_dim,
        nodes,
        weights,
    }
}
