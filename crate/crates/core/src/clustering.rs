//! Clustering of embedding rows: Ward agglomerative, DBSCAN and affinity
//! propagation. None of them needs the number of clusters up front.
//!
//! Ties are broken toward the lowest row index, so results are invariant to
//! row permutation up to label renaming whenever no exact ties occur.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::model::EmbeddingMatrix;

/// Label given to DBSCAN noise points.
pub const NOISE: i64 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<String>,
    pub labels: Vec<i64>,
    pub algorithm: String,
    pub params: serde_json::Value,
    /// False only for affinity propagation that hit `max_iter`.
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        let mut l: Vec<i64> = self.labels.iter().copied().filter(|&l| l >= 0).collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

/// Relabels so clusters are numbered by first appearance.
fn canonical(labels: &[usize]) -> Vec<i64> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len() as i64;
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn nonempty(emb: &EmbeddingMatrix) -> Result<()> {
    if emb.is_empty() {
        return Err(Error::validation("embeddings", "cannot cluster zero rows"));
    }
    Ok(())
}

/// One merge of the Ward hierarchy: representative rows of the two merged
/// clusters and the Ward linkage distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Full Ward hierarchy, merges sorted by height.
#[derive(Clone, Debug)]
pub struct Dendrogram {
    n: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Applies every merge with height `<= threshold`.
    pub fn cut(&self, threshold: f64) -> Vec<i64> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for m in self.merges.iter().take_while(|m| m.height <= threshold) {
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent[hi] = lo;
        }
        let roots: Vec<usize> = (0..self.n).map(|i| find(&mut parent, i)).collect();
        canonical(&roots)
    }
}

/// Ward linkage by the nearest-neighbor chain algorithm with Lance-Williams
/// updates on squared distances. The merge height between clusters `A` and
/// `B` is `sqrt(2|A||B|/(|A|+|B|)) * |c_A - c_B|`.
pub fn ward_dendrogram(points: &Matrix) -> Dendrogram {
    let n = points.rows();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(points.row(i), points.row(j));
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster remains"));
        }
        let (a, b) = loop {
            let a = *chain.last().expect("chain non-empty");
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| d2[a * n + p]);
            for j in 0..n {
                if j != a && active[j] && d2[a * n + j] < best_d {
                    best = Some(j);
                    best_d = d2[a * n + j];
                }
            }
            let b = best.expect("at least two active clusters");
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                break (a, b);
            }
            chain.push(b);
        };
        let (keep, drop) = (a.min(b), a.max(b));
        let dab = d2[a * n + b];
        merges.push(Merge { a: keep, b: drop, height: dab.max(0.0).sqrt() });
        let (si, sj) = (size[keep] as f64, size[drop] as f64);
        for k in 0..n {
            if !active[k] || k == keep || k == drop {
                continue;
            }
            let sk = size[k] as f64;
            let v = ((si + sk) * d2[keep * n + k] + (sj + sk) * d2[drop * n + k] - sk * dab) / (si + sj + sk);
            d2[keep * n + k] = v;
            d2[k * n + keep] = v;
        }
        active[drop] = false;
        size[keep] += size[drop];
    }
    merges.sort_by(|x, y| x.height.total_cmp(&y.height));
    Dendrogram { n, merges }
}

/// Bottom-up Ward clustering, merging while the linkage distance stays
/// within `distance_threshold`.
pub fn agglomerative_ward(emb: &EmbeddingMatrix, distance_threshold: f64) -> Result<ClusterAssignment> {
    nonempty(emb)?;
    if !(distance_threshold > 0.0) {
        return Err(Error::validation("distance_threshold", "must be positive"));
    }
    let labels = ward_dendrogram(&emb.values).cut(distance_threshold);
    Ok(ward_assignment(emb, labels, distance_threshold))
}

pub(crate) fn ward_assignment(emb: &EmbeddingMatrix, labels: Vec<i64>, threshold: f64) -> ClusterAssignment {
    ClusterAssignment {
        ids: emb.ids.clone(),
        labels,
        algorithm: "agglomerative_ward".into(),
        params: serde_json::json!({ "distance_threshold": threshold }),
        converged: true,
    }
}

/// Density clustering on Euclidean distances. A point is core when at least
/// `min_pts` points (itself included) lie within `eps`.
pub fn dbscan(emb: &EmbeddingMatrix, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    nonempty(emb)?;
    if !(eps > 0.0) {
        return Err(Error::validation("eps", "must be positive"));
    }
    if min_pts < 1 {
        return Err(Error::validation("min_pts", "must be at least 1"));
    }
    let pts = &emb.values;
    let n = pts.rows();
    let eps2 = eps * eps;
    let region = |p: usize| -> Vec<usize> { (0..n).filter(|&q| squared_distance(pts.row(p), pts.row(q)) <= eps2).collect() };
    const UNVISITED: i64 = -2;
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0;
    for p in 0..n {
        if labels[p] != UNVISITED {
            continue;
        }
        let neigh = region(p);
        if neigh.len() < min_pts {
            labels[p] = NOISE;
            continue;
        }
        labels[p] = cluster;
        let mut queue: VecDeque<usize> = neigh.into();
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster;
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            let nq = region(q);
            if nq.len() >= min_pts {
                queue.extend(nq);
            }
        }
        cluster += 1;
    }
    Ok(ClusterAssignment {
        ids: emb.ids.clone(),
        labels,
        algorithm: "dbscan".into(),
        params: serde_json::json!({ "eps": eps, "min_pts": min_pts }),
        converged: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityParams {
    pub damping: f64,
    pub max_iter: usize,
    /// Iterations with unchanged exemplars before declaring convergence.
    pub convergence_iter: usize,
    /// Self-similarity; the median pairwise similarity when `None`.
    pub preference: Option<f64>,
}

impl Default for AffinityParams {
    fn default() -> Self {
        AffinityParams { damping: 0.5, max_iter: 200, convergence_iter: 15, preference: None }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Affinity propagation on negative squared Euclidean similarities.
///
/// When every pairwise similarity is equal (all rows identical, say) there
/// is no preferred exemplar and everything forms one cluster.
pub fn affinity_propagation(emb: &EmbeddingMatrix, params: AffinityParams) -> Result<ClusterAssignment> {
    nonempty(emb)?;
    if !(0.5..1.0).contains(&params.damping) {
        return Err(Error::validation("damping", "must lie in [0.5, 1)"));
    }
    let pts = &emb.values;
    let n = pts.rows();
    let mut s = vec![0.0; n * n];
    let mut off_diag = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for k in 0..n {
            if i != k {
                s[i * n + k] = -squared_distance(pts.row(i), pts.row(k));
                off_diag.push(s[i * n + k]);
            }
        }
    }
    let preference = params.preference.unwrap_or_else(|| median(&mut off_diag.clone()));
    let finish = |labels: Vec<i64>, converged: bool| ClusterAssignment {
        ids: emb.ids.clone(),
        labels,
        algorithm: "affinity_propagation".into(),
        params: serde_json::json!({
            "damping": params.damping,
            "max_iter": params.max_iter,
            "preference": preference,
        }),
        converged,
    };
    if n == 1 || off_diag.iter().all(|&v| v == off_diag[0]) {
        return Ok(finish(vec![0; n], true));
    }
    for i in 0..n {
        s[i * n + i] = preference;
    }

    let lambda = params.damping;
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let mut history: VecDeque<Vec<bool>> = VecDeque::new();
    let mut converged = false;
    for _ in 0..params.max_iter {
        for i in 0..n {
            let row = |k: usize| a[i * n + k] + s[i * n + k];
            let first = argmax((0..n).map(row));
            let y1 = row(first);
            let y2 = (0..n).filter(|&k| k != first).map(row).fold(f64::NEG_INFINITY, f64::max);
            for k in 0..n {
                let new = s[i * n + k] - if k == first { y2 } else { y1 };
                r[i * n + k] = lambda * r[i * n + k] + (1.0 - lambda) * new;
            }
        }
        for k in 0..n {
            let col: f64 = (0..n).map(|i| if i == k { r[k * n + k] } else { r[i * n + k].max(0.0) }).sum();
            for i in 0..n {
                let rp = if i == k { r[k * n + k] } else { r[i * n + k].max(0.0) };
                let mut new = col - rp;
                if i != k {
                    new = new.min(0.0);
                }
                a[i * n + k] = lambda * a[i * n + k] + (1.0 - lambda) * new;
            }
        }
        let exemplars: Vec<bool> = (0..n).map(|k| a[k * n + k] + r[k * n + k] > 0.0).collect();
        history.push_back(exemplars);
        if history.len() > params.convergence_iter {
            history.pop_front();
        }
        if history.len() == params.convergence_iter && history.iter().all(|e| *e == history[0]) && history[0].iter().any(|&e| e) {
            converged = true;
            break;
        }
    }

    let mut exemplars: Vec<usize> = (0..n).filter(|&k| a[k * n + k] + r[k * n + k] > 0.0).collect();
    if exemplars.is_empty() {
        return Ok(finish(vec![NOISE; n], false));
    }
    let assign = |ex: &[usize]| -> Vec<usize> {
        (0..n)
            .map(|i| match ex.iter().position(|&e| e == i) {
                Some(c) => c,
                None => argmax(ex.iter().map(|&k| s[i * n + k])),
            })
            .collect()
    };
    // refine each exemplar to the member maximizing within-cluster similarity
    let c = assign(&exemplars);
    for (ci, ex) in exemplars.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| c[i] == ci).collect();
        let best = argmax(members.iter().map(|&j| members.iter().map(|&i| s[i * n + j]).sum::<f64>()));
        *ex = members[best];
    }
    exemplars.sort_unstable();
    exemplars.dedup();
    Ok(finish(canonical(&assign(&exemplars)), converged))
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
