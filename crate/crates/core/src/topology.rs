//! Sparse boolean adjacency algebra for topology-aware attention masks.
//!
//! `C_1` is the 1-hop connectivity (with self loops). Each doubling step
//! computes `C_{2^l} = bool(C_{2^{l-1}}²) ∨ C_{2^{l-1}}`, and the band
//! `Band_l = C_{2^l} ∧ ¬C_{2^{l-1}}` holds the pairs first reached at that
//! scale. The mask weight of a pair is `γ^l` for its band `l`.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::tensor::Tensor;

/// Compressed sparse rows of a boolean matrix; each row sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolAdjacency {
    rows: Vec<Vec<u32>>,
}

impl BoolAdjacency {
    /// Builds from possibly unsorted rows (sorted and deduplicated here).
    pub fn from_rows(mut rows: Vec<Vec<u32>>) -> Self {
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        BoolAdjacency { rows }
    }

    pub fn empty(n: usize) -> Self {
        BoolAdjacency {
            rows: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&(j as u32)).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().all(|&j| self.contains(j as usize, i)))
    }

    /// All `(i, j)` pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&j| (i, j as usize)))
    }

    /// `bool(A·A) ∨ A`, computed row by row by merging neighbor lists.
    pub fn square_or_self(&self) -> BoolAdjacency {
        let n = self.len();
        let rows = (0..n)
            .into_par_iter()
            .map_init(
                || vec![false; n],
                |mark, i| {
                    let mut out: Vec<u32> = Vec::new();
                    let mut visit = |j: u32| {
                        if !mark[j as usize] {
                            mark[j as usize] = true;
                            out.push(j);
                        }
                    };
                    for &k in &self.rows[i] {
                        visit(k);
                        for &j in &self.rows[k as usize] {
                            visit(j);
                        }
                    }
                    for &j in &out {
                        mark[j as usize] = false;
                    }
                    out.sort_unstable();
                    out
                },
            )
            .collect();
        BoolAdjacency { rows }
    }

    /// `self ∧ ¬other`
    pub fn minus(&self, other: &BoolAdjacency) -> BoolAdjacency {
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| a.iter().copied().filter(|j| b.binary_search(j).is_err()).collect())
            .collect();
        BoolAdjacency { rows }
    }

    /// Whether every entry of `self` is present in `other`.
    pub fn is_subset_of(&self, other: &BoolAdjacency) -> bool {
        self.pairs().all(|(i, j)| other.contains(i, j))
    }
}

/// 1-hop adjacency with self loops: `i ~ j` iff they share a face.
pub fn one_hop(mesh: &TriangleMesh) -> Result<BoolAdjacency> {
    let n = mesh.num_vertices();
    let mut rows: Vec<Vec<u32>> = (0..n as u32).map(|i| vec![i]).collect();
    for f in &mesh.faces {
        for &a in f {
            if a as usize >= n {
                return Err(Error::Index {
                    index: a as usize,
                    len: n,
                });
            }
        }
        for &a in f {
            for &b in f {
                if a != b {
                    rows[a as usize].push(b);
                }
            }
        }
    }
    Ok(BoolAdjacency::from_rows(rows))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopBands {
    /// Number of doubling steps `L`.
    pub steps: usize,
    /// `Band_0 … Band_L`.
    pub bands: Vec<BoolAdjacency>,
}

impl HopBands {
    pub fn num_vertices(&self) -> usize {
        self.bands[0].len()
    }

    /// Band index containing `(i, j)`, if any.
    pub fn band_of(&self, i: usize, j: usize) -> Option<usize> {
        self.bands.iter().position(|b| b.contains(i, j))
    }

    /// `Band_0 ∪ … ∪ Band_L`, i.e. `C_{2^L}`.
    pub fn union(&self) -> BoolAdjacency {
        let n = self.num_vertices();
        let rows = (0..n)
            .map(|i| self.bands.iter().flat_map(|b| b.row(i).iter().copied()).collect())
            .collect();
        BoolAdjacency::from_rows(rows)
    }
}

/// Hop bands by repeated boolean squaring. `Band_0 = C_1`.
pub fn hop_bands(adj: &BoolAdjacency, steps: usize) -> HopBands {
    let mut bands = vec![adj.clone()];
    let mut reach = adj.clone();
    for _ in 0..steps {
        let next = reach.square_or_self();
        bands.push(next.minus(&reach));
        reach = next;
    }
    HopBands { steps, bands }
}

/// Exact reference: per-source BFS truncated at depth `2^L`, bucketing
/// distance `d ≤ 1` into band 0 and `d ∈ (2^{l-1}, 2^l]` into band `l`.
pub fn bfs_band_oracle(adj: &BoolAdjacency, steps: usize) -> HopBands {
    let n = adj.len();
    let max_depth = 1usize << steps;
    let mut rows = vec![vec![Vec::new(); n]; steps + 1];
    let mut depth = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        let mut seen = vec![s];
        depth[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            if depth[u] == max_depth {
                continue;
            }
            for &w in adj.row(u) {
                let w = w as usize;
                if depth[w] == usize::MAX {
                    depth[w] = depth[u] + 1;
                    seen.push(w);
                    queue.push_back(w);
                }
            }
        }
        for &v in &seen {
            let d = depth[v];
            let band = if d <= 1 {
                0
            } else {
                // smallest l with d <= 2^l
                (usize::BITS - (d - 1).leading_zeros()) as usize
            };
            rows[band][s].push(v as u32);
            depth[v] = usize::MAX;
        }
    }
    // the diagonal only counts when C_1 has it
    for (s, r) in rows[0].iter_mut().enumerate() {
        if !adj.contains(s, s) {
            r.retain(|&v| v as usize != s);
        }
    }
    HopBands {
        steps,
        bands: rows.into_iter().map(BoolAdjacency::from_rows).collect(),
    }
}

/// Decay-weighted mask `Adj = Σ γ^l · Band_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAdjacency {
    pub gamma: f64,
    rows: Vec<Vec<(u32, f64)>>,
}

impl WeightedAdjacency {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    /// Weight of `(i, j)`; 0 when the pair is in no band.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let r = &self.rows[i];
        r.binary_search_by_key(&(j as u32), |e| e.0)
            .map_or(0.0, |k| r[k].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Dense additive attention mask `ln(Adj + ε)`, shape `[N, N]`.
    pub fn log_mask(&self, eps: f64) -> Tensor {
        let n = self.len();
        let floor = eps.ln();
        let mut data = vec![floor; n * n];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                data[i * n + j as usize] = (w + eps).ln();
            }
        }
        Tensor::new([n, n], data).expect("square mask")
    }
}

pub fn weighted_adjacency(bands: &HopBands, gamma: f64) -> Result<WeightedAdjacency> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Argument(format!("decay must lie in (0, 1], got {gamma}")));
    }
    let n = bands.num_vertices();
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (l, band) in bands.bands.iter().enumerate() {
        let w = gamma.powi(l as i32);
        for (i, j) in band.pairs() {
            rows[i].push((j as u32, w));
        }
    }
    for r in &mut rows {
        r.sort_unstable_by_key(|e| e.0);
    }
    Ok(WeightedAdjacency { gamma, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Path graph with self loops.
    fn path(n: usize) -> BoolAdjacency {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![i as u32];
                if i > 0 {
                    r.push(i as u32 - 1);
                }
                if i + 1 < n {
                    r.push(i as u32 + 1);
                }
                r
            })
            .collect();
        BoolAdjacency::from_rows(rows)
    }

    fn upper(b: &BoolAdjacency) -> Vec<(usize, usize)> {
        b.pairs().filter(|(i, j)| i < j).collect()
    }

    #[test]
    fn one_hop_cases() {
        let tri = TriangleMesh::new(vec![[0, 1, 2]], vec![[0.0; 3]; 3]).unwrap();
        let a = one_hop(&tri).unwrap();
        assert_eq!(a.nnz(), 9);

        let strip = TriangleMesh::new(vec![[0, 1, 2], [1, 2, 3]], vec![[0.0; 3]; 4]).unwrap();
        let a = one_hop(&strip).unwrap();
        assert!(!a.contains(0, 3) && !a.contains(3, 0));
        for i in 0..4 {
            for j in 0..4 {
                if (i, j) != (0, 3) && (i, j) != (3, 0) {
                    assert!(a.contains(i, j), "{i},{j}");
                }
            }
        }

        let lone = TriangleMesh::new(vec![], vec![[0.0; 3]; 3]).unwrap();
        assert_eq!(one_hop(&lone).unwrap(), BoolAdjacency::from_rows(vec![vec![0], vec![1], vec![2]]));

        let bad = TriangleMesh { faces: vec![[0, 1, 7]], vertices: vec![[0.0; 3]; 3] };
        assert!(matches!(one_hop(&bad), Err(Error::Index { index: 7, .. })));
    }

    #[test]
    fn path_graph_bands() {
        let hb = hop_bands(&path(5), 2);
        assert_eq!(upper(&hb.bands[1]), vec![(0, 2), (1, 3), (2, 4)]);
        assert_eq!(upper(&hb.bands[2]), vec![(0, 3), (0, 4), (1, 4)]);
        assert_eq!(hb, bfs_band_oracle(&path(5), 2));

        let w = weighted_adjacency(&hb, 0.5).unwrap();
        assert_eq!(w.weight(0, 1), 1.0);
        assert_eq!(w.weight(0, 2), 0.5);
        assert_eq!(w.weight(0, 3), 0.25);
        assert_eq!(w.weight(0, 0), 1.0);
        let flat = weighted_adjacency(&hb, 1.0).unwrap();
        assert!(flat.rows.iter().flatten().all(|e| e.1 == 1.0));
        assert!(weighted_adjacency(&hb, 0.0).is_err());
        assert!(weighted_adjacency(&hb, 1.5).is_err());
    }

    #[test]
    fn complete_graph_has_only_band_zero() {
        let full = BoolAdjacency::from_rows((0..5).map(|_| (0..5).collect()).collect());
        let hb = hop_bands(&full, 3);
        assert!(hb.bands[1..].iter().all(|b| b.nnz() == 0));
    }

    #[test]
    fn single_vertex_and_disconnected() {
        let one = BoolAdjacency::from_rows(vec![vec![0]]);
        let hb = hop_bands(&one, 4);
        assert_eq!(hb.bands[0].pairs().collect::<Vec<_>>(), vec![(0, 0)]);
        assert!(hb.bands[1..].iter().all(|b| b.nnz() == 0));

        let two = BoolAdjacency::from_rows(vec![vec![0], vec![1]]);
        let oracle = bfs_band_oracle(&two, 3);
        assert_eq!(oracle.band_of(0, 1), None);
    }

    #[test]
    fn star_graph_bands() {
        let mut rows = vec![vec![0u32, 1, 2, 3, 4]];
        for leaf in 1..5 {
            rows.push(vec![0, leaf]);
        }
        let star = BoolAdjacency::from_rows(rows);
        let oracle = bfs_band_oracle(&star, 2);
        assert_eq!(oracle.band_of(0, 3), Some(0));
        assert_eq!(oracle.band_of(1, 2), Some(1));
        assert_eq!(oracle, hop_bands(&star, 2));
    }

    #[test]
    fn log_mask_floor() {
        let hb = hop_bands(&path(6), 1);
        let w = weighted_adjacency(&hb, 0.5).unwrap();
        let m = w.log_mask(1e-8);
        assert!((m.at2(0, 5) - (1e-8f64).ln()).abs() < 1e-12);
        assert!((m.at2(0, 2) - (0.5 + 1e-8f64).ln()).abs() < 1e-12);
        assert!((m.at2(0, 5) + 18.420680743952367).abs() < 1e-9);
    }

    #[test]
    fn random_graphs_match_oracle_and_grow_monotonically() {
        let mut rng = Rng::new(99);
        for _ in 0..20 {
            let n = 2 + rng.below(60);
            let mut rows: Vec<Vec<u32>> = (0..n as u32).map(|i| vec![i]).collect();
            for _ in 0..n {
                let (a, b) = (rng.below(n), rng.below(n));
                rows[a].push(b as u32);
                rows[b].push(a as u32);
            }
            let adj = BoolAdjacency::from_rows(rows);
            assert!(adj.is_symmetric());
            let mut prev: Option<BoolAdjacency> = None;
            for l in 0..5 {
                let hb = hop_bands(&adj, l);
                assert_eq!(hb, bfs_band_oracle(&adj, l));
                for a in 0..hb.bands.len() {
                    for b in a + 1..hb.bands.len() {
                        assert!(hb.bands[a].pairs().all(|(i, j)| !hb.bands[b].contains(i, j)));
                    }
                }
                let reach = hb.union();
                if let Some(p) = &prev {
                    assert!(p.is_subset_of(&reach));
                }
                prev = Some(reach);
            }
        }
    }
}
