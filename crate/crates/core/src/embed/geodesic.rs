//! kNN graphs over a dissimilarity matrix and their shortest-path distances.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mds::check_symmetric;
use crate::dissim::DissimilarityMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileValue {
    pub percentile: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicDiagnostics {
    /// Geodesic/Euclidean ratio percentiles, ascending by percentile.
    pub ratio_percentiles: Vec<PercentileValue>,
    pub k_neighbors: usize,
    /// Connectivity of the kNN graph before bridging.
    pub graph_connected: bool,
    pub n_bridges_added: usize,
    pub warnings: Vec<String>,
}

impl GeodesicDiagnostics {
    pub fn percentile(&self, p: f64) -> Option<f64> {
        self.ratio_percentiles
            .iter()
            .find(|v| v.percentile == p)
            .map(|v| v.ratio)
    }
}

fn validate(d: &DMatrix<f64>, k_neighbors: usize) -> Result<()> {
    let n = d.nrows();
    check_symmetric(d)?;
    if n < 2 || k_neighbors == 0 || k_neighbors > n - 1 {
        return Err(Error::invalid(format!(
            "k_neighbors must satisfy 1 <= k <= n-1 (k = {k_neighbors}, n = {n})"
        )));
    }
    Ok(())
}

/// Union-symmetrized kNN adjacency: `Some(weight)` where either endpoint lists
/// the other among its `k` nearest (ties broken by index).
pub fn knn_graph(d: &DMatrix<f64>, k_neighbors: usize) -> Result<DMatrix<Option<f64>>> {
    validate(d, k_neighbors)?;
    let n = d.nrows();
    let mut adj = DMatrix::from_element(n, n, None);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            d[(i, a)]
                .partial_cmp(&d[(i, b)])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &j in &others[..k_neighbors] {
            adj[(i, j)] = Some(d[(i, j)]);
            adj[(j, i)] = Some(d[(i, j)]);
        }
    }
    Ok(adj)
}

fn components(adj: &DMatrix<Option<f64>>) -> Vec<usize> {
    let n = adj.nrows();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = next;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if adj[(u, v)].is_some() && comp[v] == usize::MAX {
                    comp[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Joins components with minimum-dissimilarity edges, Kruskal-style over
/// components. Returns the number of edges added.
fn bridge(d: &DMatrix<f64>, adj: &mut DMatrix<Option<f64>>) -> usize {
    let n = d.nrows();
    let comp = components(adj);
    let n_comp = comp.iter().max().map_or(0, |m| m + 1);
    if n_comp <= 1 {
        return 0;
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if comp[i] != comp[j] {
                candidates.push((d[(i, j)], i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut parent: Vec<usize> = (0..n_comp).collect();
    let mut added = 0;
    for (w, i, j) in candidates {
        let (ri, rj) = (find(&mut parent, comp[i]), find(&mut parent, comp[j]));
        if ri != rj {
            parent[ri] = rj;
            adj[(i, j)] = Some(w);
            adj[(j, i)] = Some(w);
            added += 1;
            if added == n_comp - 1 {
                break;
            }
        }
    }
    added
}

/// Floyd-Warshall over a weighted adjacency.
fn shortest_paths(adj: &DMatrix<Option<f64>>) -> DMatrix<f64> {
    let n = adj.nrows();
    let mut g = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            adj[(i, j)].unwrap_or(f64::INFINITY)
        }
    });
    for m in 0..n {
        for i in 0..n {
            let gim = g[(i, m)];
            if gim.is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = gim + g[(m, j)];
                if via < g[(i, j)] {
                    g[(i, j)] = via;
                }
            }
        }
    }
    // exact symmetry
    for i in 0..n {
        for j in i + 1..n {
            let v = g[(i, j)].min(g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Shortest-path distances on the union-symmetrized kNN graph, bridging
/// disconnected components first.
pub fn knn_geodesics(
    d: &DissimilarityMatrix,
    k_neighbors: usize,
) -> Result<(DMatrix<f64>, GeodesicDiagnostics)> {
    let mut adj = knn_graph(&d.values, k_neighbors)?;
    let connected = components(&adj).iter().all(|&c| c == 0);
    let n_bridges_added = bridge(&d.values, &mut adj);
    let mut warnings = Vec::new();
    if n_bridges_added > 0 {
        warnings.push(format!(
            "kNN graph with k = {k_neighbors} was disconnected; added {n_bridges_added} bridge edge(s)"
        ));
    }
    let g = shortest_paths(&adj);
    Ok((
        g,
        GeodesicDiagnostics {
            ratio_percentiles: Vec::new(),
            k_neighbors,
            graph_connected: connected,
            n_bridges_added,
            warnings,
        },
    ))
}

/// Nearest-rank percentile of a sorted slice: `sorted[ceil(p/100 * N) - 1]`.
pub fn nearest_rank_percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.max(1) - 1])
}

/// Percentiles of geodesic/input-dissimilarity ratios over off-diagonal pairs.
pub fn geodesic_euclidean_ratios(
    d: &DissimilarityMatrix,
    k_neighbors: usize,
    percentiles: &[f64],
) -> Result<GeodesicDiagnostics> {
    if let Some(p) = percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let (g, mut diag) = knn_geodesics(d, k_neighbors)?;
    let n = d.len();
    let mut ratios = Vec::with_capacity(n * (n - 1) / 2);
    let mut zero = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let e = d.values[(i, j)];
            if e > 0.0 {
                ratios.push(g[(i, j)] / e);
            } else {
                zero += 1;
            }
        }
    }
    if zero > 0 {
        diag.warnings
            .push(format!("{zero} pair(s) with zero dissimilarity excluded from ratios"));
    }
    ratios.sort_by(f64::total_cmp);
    let mut ps: BTreeMap<u64, f64> = BTreeMap::new();
    for &p in percentiles {
        ps.insert(p.to_bits(), p);
    }
    let mut wanted: Vec<f64> = ps.into_values().collect();
    wanted.sort_by(f64::total_cmp);
    diag.ratio_percentiles = wanted
        .into_iter()
        .filter_map(|p| nearest_rank_percentile(&ratios, p).map(|ratio| PercentileValue { percentile: p, ratio }))
        .collect();
    Ok(diag)
}
