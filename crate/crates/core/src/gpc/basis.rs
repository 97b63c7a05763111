use std::fmt;

/// Probabilists' Hermite polynomial `He_k(z)` by the three-term recurrence.
pub fn hermite_eval(k: usize, z: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, z);
    if k == 0 {
        return prev;
    }
    for m in 1..k {
        let next = z * cur - m as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `[He_0(z), .., He_max(z)]`.
pub fn hermite_table(max_degree: usize, z: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_degree + 1);
    out.push(1.0);
    if max_degree >= 1 {
        out.push(z);
    }
    for m in 1..max_degree {
        let next = z * out[m] - m as f64 * out[m - 1];
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn total_degree(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `⟨φ_α²⟩ = Π α_i!` under the standard normal density.
    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|&a| factorial(a)).product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Tensor-product Hermite basis of total degree `<= max_degree` in `dim` variables.
///
/// Indices are graded: all degree-0 terms, then degree 1, and so on. Within a
/// degree the exponents are in descending lexicographic order, so for `d = 2`
/// the order is `(0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteBasis {
    pub dim: usize,
    pub max_degree: usize,
    pub indices: Vec<MultiIndex>,
    pub norms: Vec<f64>,
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
    if parts == 1 {
        prefix.push(total);
        out.push(MultiIndex(prefix.clone()));
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

pub fn build_basis(dim: usize, max_degree: usize) -> HermiteBasis {
    assert!(dim >= 1, "basis needs at least one stochastic dimension");
    let mut indices = Vec::new();
    for t in 0..=max_degree {
        compositions(t, dim, &mut Vec::with_capacity(dim), &mut indices);
    }
    let norms = indices.iter().map(MultiIndex::norm_squared).collect();
    HermiteBasis {
        dim,
        max_degree,
        indices,
        norms,
    }
}

impl HermiteBasis {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Values of every basis function at `z`.
    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim);
        let tables: Vec<Vec<f64>> = z.iter().map(|&zi| hermite_table(self.max_degree, zi)).collect();
        self.indices
            .iter()
            .map(|alpha| alpha.0.iter().enumerate().map(|(i, &a)| tables[i][a]).product())
            .collect()
    }

    /// Position of the degree-one function in stochastic dimension `dim`.
    pub fn linear_index(&self, dim: usize) -> Option<usize> {
        self.indices
            .iter()
            .position(|alpha| alpha.total_degree() == 1 && alpha.0[dim] == 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recurrence_values() {
        assert_eq!(hermite_eval(0, 3.7), 1.0);
        assert_eq!(hermite_eval(1, 3.7), 3.7);
        assert_eq!(hermite_eval(2, 2.0), 3.0);
        assert_eq!(hermite_eval(3, 1.0), -2.0);
        assert_eq!(hermite_table(3, 1.0), vec![1.0, 1.0, 0.0, -2.0]);
    }

    #[test]
    fn basis_sizes_and_order() {
        let b = build_basis(2, 3);
        assert_eq!(b.len(), 10);
        assert_eq!(b.indices[0], MultiIndex(vec![0, 0]));
        assert_eq!(b.indices[1], MultiIndex(vec![1, 0]));
        assert_eq!(b.indices[2], MultiIndex(vec![0, 1]));
        assert_eq!(b.indices[4], MultiIndex(vec![1, 1]));
        assert_eq!(b.norms[0], 1.0);
        let i21 = b.indices.iter().position(|m| m.0 == vec![2, 1]).unwrap();
        assert_eq!(b.norms[i21], 2.0);

        let b1 = build_basis(1, 1);
        assert_eq!(b1.indices, vec![MultiIndex(vec![0]), MultiIndex(vec![1])]);
        assert_eq!(b1.eval(&[0.4]), vec![1.0, 0.4]);
    }

    #[test]
    fn basis_count_formula() {
        // (r + d)! / (r! d!)
        for d in 1..=4 {
            for r in 0..=5 {
                let expected = (factorial(r + d) / (factorial(r) * factorial(d))).round() as usize;
                assert_eq!(build_basis(d, r).len(), expected, "d={d} r={r}");
            }
        }
    }
}
