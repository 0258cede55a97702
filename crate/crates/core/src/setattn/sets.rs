use ndarray::Array2;

use crate::error::{Error, Result};

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }

    /// Components with ascending members, ordered by their smallest member.
    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut slot = vec![usize::MAX; n];
        let mut out: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            let r = self.find(i);
            if slot[r] == usize::MAX {
                slot[r] = out.len();
                out.push(Vec::new());
            }
            out[slot[r]].push(i);
        }
        out
    }
}

/// Connected components of the graph with an edge wherever `s_ij >= threshold`.
pub fn discover_sets(similarity: &Array2<f64>, threshold: f64) -> Result<Vec<Vec<usize>>> {
    let n = similarity.nrows();
    if similarity.ncols() != n {
        return Err(Error::invalid("similarity matrix must be square"));
    }
    if !similarity.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("similarity matrix has non-finite entries"));
    }
    if !threshold.is_finite() {
        return Err(Error::invalid("threshold must be finite"));
    }
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (similarity[[i, j]], similarity[[j, i]]);
            if (a - b).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "similarity matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
            if a >= threshold {
                uf.union(i, j);
            }
        }
    }
    Ok(uf.groups())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn closure_groups(adj: &[Vec<bool>]) -> Vec<Vec<usize>> {
        let n = adj.len();
        let mut reach = adj.to_vec();
        for (i, row) in reach.iter_mut().enumerate() {
            row[i] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for i in 0..n {
            if !seen[i] {
                let g: Vec<usize> = (0..n).filter(|&j| reach[i][j]).collect();
                for &j in &g {
                    seen[j] = true;
                }
                out.push(g);
            }
        }
        out
    }

    #[test]
    fn chain_is_one_group() {
        let mut s = Array2::from_elem((4, 4), 0.1);
        for (i, j) in [(0, 2), (2, 3)] {
            s[[i, j]] = 0.9;
            s[[j, i]] = 0.9;
        }
        assert_eq!(discover_sets(&s, 0.5).unwrap(), vec![vec![0, 2, 3], vec![1]]);
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = Array2::from_elem((2, 2), 0.5);
        assert_eq!(discover_sets(&s, 0.5).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn rejects_asymmetry() {
        let mut s = Array2::from_elem((3, 3), 0.2);
        s[[0, 1]] = 0.2 + 1e-3;
        assert!(discover_sets(&s, 0.5).is_err());
        s[[0, 1]] = 0.2 + 1e-9;
        assert!(discover_sets(&s, 0.5).is_ok());
        assert!(discover_sets(&Array2::zeros((2, 3)), 0.5).is_err());
    }

    #[test]
    fn empty_matrix_has_no_groups() {
        assert!(discover_sets(&Array2::zeros((0, 0)), 0.5).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn matches_transitive_closure(n in 1usize..12, bits in prop::collection::vec(any::<bool>(), 66)) {
            let mut s = Array2::zeros((n, n));
            let mut adj = vec![vec![false; n]; n];
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    let on = bits[k % bits.len()];
                    k += 1;
                    let v = if on { 0.8 } else { 0.3 };
                    s[[i, j]] = v;
                    s[[j, i]] = v;
                    adj[i][j] = on;
                    adj[j][i] = on;
                }
            }
            prop_assert_eq!(discover_sets(&s, 0.5).unwrap(), closure_groups(&adj));
        }
    }
}
