//! Flattening metric: how far the geodesic distances along a point cloud's
//! nearest-neighbor graph depart from straight-line distances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr_store::RepresentationMatrix;

pub const DEFAULT_KNN: usize = 10;
const DEGENERATE_NORM: f64 = 1e-15;

/// Undirected weighted graph held as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    pub k_nn: usize,
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub repair_edges_added: usize,
}

impl NeighborhoodGraph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].iter().any(|&(w, _)| w == v)
    }

    fn add_edge(&mut self, u: usize, v: usize, w: f64) {
        if u != v && !self.has_edge(u, v) {
            self.adjacency[u].push((v, w));
            self.adjacency[v].push((u, w));
        }
    }

    pub fn components(&self) -> Vec<usize> {
        let n = self.len();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = next;
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

/// Pairwise Euclidean distances between rows.
pub fn euclidean_distances(x: &RepresentationMatrix) -> DMatrix<f64> {
    let a = x.as_matrix();
    let n = a.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = (a.row(i) - a.row(j)).norm();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

/// Joins every vertex to its `k_nn` nearest neighbors (ties to the lower
/// index), symmetrizes, then bridges components by repeatedly adding the
/// shortest edge between two different components.
pub fn build_knn_graph(x: &RepresentationMatrix, k_nn: usize) -> Result<NeighborhoodGraph> {
    let n = x.nrows();
    if k_nn == 0 {
        return Err(Error::InvalidArgument("k_nn must be at least 1".into()));
    }
    if n < k_nn + 1 {
        return Err(Error::TooFewPoints { needed: k_nn + 1, got: n });
    }
    let e = euclidean_distances(x);
    build_knn_graph_from_distances(&e, k_nn)
}

pub fn build_knn_graph_from_distances(e: &DMatrix<f64>, k_nn: usize) -> Result<NeighborhoodGraph> {
    let n = e.nrows();
    if n < k_nn + 1 {
        return Err(Error::TooFewPoints { needed: k_nn + 1, got: n });
    }
    let mut g = NeighborhoodGraph {
        k_nn,
        adjacency: vec![Vec::new(); n],
        repair_edges_added: 0,
    };
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| e[(i, a)].total_cmp(&e[(i, b)]).then(a.cmp(&b)));
        for &j in &others[..k_nn] {
            g.add_edge(i, j, e[(i, j)]);
        }
    }
    loop {
        let comp = g.components();
        if comp.iter().all(|&c| c == 0) {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if comp[i] != comp[j] && best.is_none_or(|b| e[(i, j)] < b.0) {
                    best = Some((e[(i, j)], i, j));
                }
            }
        }
        let (w, i, j) = best.expect("more than one component implies a bridge candidate");
        g.add_edge(i, j, w);
        g.repair_edges_added += 1;
    }
    for list in &mut g.adjacency {
        list.sort_by_key(|&(v, _)| v);
    }
    Ok(g)
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    vertex: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(g: &NeighborhoodGraph, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; g.len()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry { dist: 0.0, vertex: source });
    while let Some(Entry { dist: d, vertex: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &g.adjacency[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry { dist: nd, vertex: v });
            }
        }
    }
    dist
}

/// All-pairs shortest-path lengths, one Dijkstra per source. The upper
/// triangle is taken from the lower-indexed source and mirrored, so the
/// result is exactly symmetric.
pub fn geodesic_distances(g: &NeighborhoodGraph) -> Result<DMatrix<f64>> {
    let n = g.len();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(g, s)).collect();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = rows[i][j];
            if !d.is_finite() {
                return Err(Error::Disconnected);
            }
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    Ok(out)
}

fn upper_triangle(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut v = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            v.push(a[(i, j)]);
        }
    }
    v
}

/// How the two distance profiles are normalized before their inner product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Zero mean and unit standard deviation; `c` is one minus the Pearson
    /// correlation of the profiles.
    #[default]
    Standardized,
    /// Unit root-mean-square; `c` is one minus the cosine of the profiles.
    Rms,
}

fn normalize(v: &mut [f64], how: Normalization) -> Result<()> {
    let m = v.len() as f64;
    if how == Normalization::Standardized {
        let mean = v.iter().sum::<f64>() / m;
        v.iter_mut().for_each(|x| *x -= mean);
    }
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / m).sqrt();
    if rms < DEGENERATE_NORM {
        return Err(Error::DegenerateDistances);
    }
    v.iter_mut().for_each(|x| *x /= rms);
    Ok(())
}

/// `c = 1 - (2 / (N (N - 1))) r_G . r_E` over the upper triangles of the two
/// distance matrices, after normalizing each profile.
pub fn flattening_metric(
    geodesic: &DMatrix<f64>,
    euclidean: &DMatrix<f64>,
    how: Normalization,
) -> Result<f64> {
    let n = geodesic.nrows();
    if geodesic.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: geodesic.ncols() });
    }
    if euclidean.nrows() != n || euclidean.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: euclidean.nrows() });
    }
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let mut rg = upper_triangle(geodesic);
    let mut re = upper_triangle(euclidean);
    if rg == re {
        // Equal profiles give exactly zero, including constant ones that
        // have no spread to standardize.
        normalize(&mut rg, Normalization::Rms)?;
        return Ok(0.0);
    }
    normalize(&mut rg, how)?;
    normalize(&mut re, how)?;
    let m = rg.len() as f64;
    let dot = rg.iter().zip(&re).map(|(g, e)| g * e).sum::<f64>();
    Ok((1.0 - dot / m).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatteningReport {
    pub c: f64,
    pub normalization: Normalization,
    pub n: usize,
    pub k_nn: usize,
    pub repair_edges_added: usize,
}

pub fn flattening(x: &RepresentationMatrix, k_nn: usize, how: Normalization) -> Result<FlatteningReport> {
    if k_nn == 0 {
        return Err(Error::InvalidArgument("k_nn must be at least 1".into()));
    }
    let n = x.nrows();
    if n < k_nn + 1 {
        return Err(Error::TooFewPoints { needed: k_nn + 1, got: n });
    }
    let e = euclidean_distances(x);
    let g = build_knn_graph_from_distances(&e, k_nn)?;
    let geo = geodesic_distances(&g)?;
    let c = flattening_metric(&geo, &e, how)?;
    Ok(FlatteningReport {
        c,
        normalization: how,
        n,
        k_nn,
        repair_edges_added: g.repair_edges_added,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(rows: &[&[f64]]) -> RepresentationMatrix {
        RepresentationMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn collinear_path() {
        let x = points(&[&[0.0], &[1.0], &[2.0]]);
        let g = build_knn_graph(&x, 1).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2) && !g.has_edge(0, 2));
        assert_eq!(g.repair_edges_added, 0);
        let geo = geodesic_distances(&g).unwrap();
        assert_eq!(geo[(0, 2)], 2.0);
    }

    #[test]
    fn far_clusters_need_one_bridge() {
        let x = points(&[&[0.0, 0.0], &[0.1, 0.0], &[0.0, 0.1], &[50.0, 0.0], &[50.1, 0.0], &[50.0, 0.1]]);
        let g = build_knn_graph(&x, 2).unwrap();
        assert_eq!(g.repair_edges_added, 1);
        assert!(g.components().iter().all(|&c| c == 0));
    }

    #[test]
    fn too_few_points() {
        let x = points(&[&[0.0], &[1.0]]);
        assert!(matches!(build_knn_graph(&x, 2), Err(Error::TooFewPoints { needed: 3, got: 2 })));
    }

    #[test]
    fn identical_profiles_give_zero() {
        let x = points(&[&[0.0], &[1.0], &[3.0], &[7.0]]);
        let e = euclidean_distances(&x);
        for how in [Normalization::Standardized, Normalization::Rms] {
            assert_eq!(flattening_metric(&e, &e, how).unwrap(), 0.0);
            let z = DMatrix::zeros(4, 4);
            assert!(matches!(flattening_metric(&z, &z, how), Err(Error::DegenerateDistances)));
        }
    }
}
