//! Static k-d tree for exact nearest-neighbor queries in 2 or 3 dimensions.
//!
//! Squared distances are evaluated with the same expression as a brute-force
//! scan, so reported distances match a double loop exactly.

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug)]
struct Node {
    lo: u32,
    hi: u32,
    axis: u8,
    split: f64,
}

#[derive(Clone, Debug)]
pub struct KdTree<const K: usize> {
    points: Vec<[f64; K]>,
    /// Original index of each stored point.
    order: Vec<u32>,
    nodes: Vec<Node>,
}

#[inline]
pub fn squared_distance<const K: usize>(a: &[f64; K], b: &[f64; K]) -> f64 {
    let mut acc = 0.0;
    for k in 0..K {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc
}

impl<const K: usize> KdTree<K> {
    pub fn build(points: &[[f64; K]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(points, &mut order, 0, points.len(), &mut nodes);
        }
        let stored = order.iter().map(|&i| points[i as usize]).collect();
        KdTree {
            points: stored,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest stored point as `(original index, squared distance)`. Ties go to
    /// the lowest original index.
    pub fn nearest(&self, query: &[f64; K]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(0, query, &mut best);
        Some((best.0 as usize, best.1))
    }

    /// Up to `k` nearest points as `(original index, squared distance)`,
    /// nearest first, ties by lowest index.
    pub fn k_nearest(&self, query: &[f64; K], k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.search_k(0, query, k, &mut best);
        }
        best.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    fn search_k(&self, node: usize, query: &[f64; K], k: usize, best: &mut Vec<(f64, u32)>) {
        let n = self.nodes[node];
        let (lo, hi) = (n.lo as usize, n.hi as usize);
        if hi - lo <= LEAF_SIZE {
            for i in lo..hi {
                let cand = (squared_distance(&self.points[i], query), self.order[i]);
                let full = best.len() == k;
                if full && !lex_less(cand, best[k - 1]) {
                    continue;
                }
                let at = best.partition_point(|&b| lex_less(b, cand));
                best.insert(at, cand);
                best.truncate(k);
            }
            return;
        }
        let axis = n.axis as usize;
        let diff = query[axis] - n.split;
        let (near, far) = if diff <= 0.0 {
            (2 * node + 1, 2 * node + 2)
        } else {
            (2 * node + 2, 2 * node + 1)
        };
        self.search_k(near, query, k, best);
        if best.len() < k || diff * diff <= best[k - 1].0 {
            self.search_k(far, query, k, best);
        }
    }

    fn search(&self, node: usize, query: &[f64; K], best: &mut (u32, f64)) {
        let n = self.nodes[node];
        let (lo, hi) = (n.lo as usize, n.hi as usize);
        if hi - lo <= LEAF_SIZE {
            for i in lo..hi {
                let d = squared_distance(&self.points[i], query);
                let idx = self.order[i];
                if d < best.1 || (d == best.1 && idx < best.0) {
                    *best = (idx, d);
                }
            }
            return;
        }
        let axis = n.axis as usize;
        let diff = query[axis] - n.split;
        let (near, far) = if diff <= 0.0 {
            (2 * node + 1, 2 * node + 2)
        } else {
            (2 * node + 2, 2 * node + 1)
        };
        self.search(near, query, best);
        // `<=` keeps equal-distance candidates reachable for the tie rule.
        if diff * diff <= best.1 {
            self.search(far, query, best);
        }
    }
}

fn lex_less(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn build_node<const K: usize>(
    points: &[[f64; K]],
    order: &mut [u32],
    lo: usize,
    hi: usize,
    nodes: &mut Vec<Node>,
) {
    // Nodes live in heap layout: children of `i` are `2i+1` and `2i+2`.
    fn place(nodes: &mut Vec<Node>, at: usize, node: Node) {
        if nodes.len() <= at {
            nodes.resize(
                at + 1,
                Node {
                    lo: 0,
                    hi: 0,
                    axis: 0,
                    split: 0.0,
                },
            );
        }
        nodes[at] = node;
    }

    let mut stack = vec![(0usize, lo, hi)];
    while let Some((at, lo, hi)) = stack.pop() {
        if hi - lo <= LEAF_SIZE {
            place(
                nodes,
                at,
                Node {
                    lo: lo as u32,
                    hi: hi as u32,
                    axis: 0,
                    split: 0.0,
                },
            );
            continue;
        }
        let slice = &mut order[lo..hi];
        let mut axis = 0;
        let mut widest = f64::NEG_INFINITY;
        for k in 0..K {
            let (mn, mx) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
                let v = points[i as usize][k];
                (a.min(v), b.max(v))
            });
            if mx - mn > widest {
                widest = mx - mn;
                axis = k;
            }
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis])
        });
        let split = points[slice[mid] as usize][axis];
        place(
            nodes,
            at,
            Node {
                lo: lo as u32,
                hi: hi as u32,
                axis: axis as u8,
                split,
            },
        );
        // Left holds [lo, lo+mid) whose coordinates are <= split; right the rest.
        stack.push((2 * at + 1, lo, lo + mid));
        stack.push((2 * at + 2, lo + mid, hi));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute<const K: usize>(points: &[[f64; K]], q: &[f64; K]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, q);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn empty_tree_has_no_neighbor() {
        let t = KdTree::<3>::build(&[]);
        assert!(t.nearest(&[0.0; 3]).is_none());
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let pts = vec![[1.0, 1.0]; 40];
        let t = KdTree::build(&pts);
        assert_eq!(t.nearest(&[0.0, 0.0]), Some((0, 2.0)));
    }

    proptest! {
        #[test]
        fn k_nearest_matches_sorted_scan(
            pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..200),
            q in prop::array::uniform3(-4.0f64..4.0),
            k in 1usize..12,
        ) {
            let t = KdTree::build(&pts);
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, squared_distance(p, &q))).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(t.k_nearest(&q, k), all);
        }

        #[test]
        fn matches_brute_force_3d(
            pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..300),
            queries in prop::collection::vec(prop::array::uniform3(-12.0f64..12.0), 1..20),
        ) {
            let t = KdTree::build(&pts);
            for q in &queries {
                let (i, d) = t.nearest(q).unwrap();
                let (bi, bd) = brute(&pts, q);
                prop_assert_eq!(d, bd);
                prop_assert_eq!(i, bi);
            }
        }

        #[test]
        fn matches_brute_force_on_grid_2d(
            n in 1usize..20,
            queries in prop::collection::vec(prop::array::uniform2(-1.0f64..21.0), 1..20),
        ) {
            // integer grid forces many exact ties
            let pts: Vec<[f64; 2]> = (0..n * n).map(|i| [(i % n) as f64, (i / n) as f64]).collect();
            let t = KdTree::build(&pts);
            for q in &queries {
                let q = [q[0].round(), q[1].round() + 0.5];
                let (i, d) = t.nearest(&q).unwrap();
                let (bi, bd) = brute(&pts, &q);
                prop_assert_eq!(d, bd);
                prop_assert_eq!(i, bi);
            }
        }
    }
}
