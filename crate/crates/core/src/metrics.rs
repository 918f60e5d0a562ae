//! Cluster-quality scores against ground-truth variant groups.
//!
//! CGacc is reconstructed as the purity rate of predicted clusters with at
//! least two members: the fraction of such clusters whose members all belong
//! to one ground-truth group. Noise labels (`-1`) count as singletons
//! everywhere in this module.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps arbitrary labels to dense indices, turning each noise point into its
/// own singleton.
fn densify<T: std::hash::Hash + Eq + Clone>(labels: &[T], is_noise: impl Fn(&T) -> bool) -> Vec<usize> {
    let mut map = HashMap::new();
    let mut next = 0;
    labels
        .iter()
        .map(|l| {
            if is_noise(l) {
                next += 1;
                next - 1
            } else {
                *map.entry(l.clone()).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            }
        })
        .collect()
}

/// Dense truth labels from group ids; a missing group id is its own singleton.
pub fn truth_labels(groups: &[Option<String>]) -> Vec<usize> {
    densify(groups, Option::is_none)
}

/// Dense predicted labels; `-1` (noise) becomes a singleton.
pub fn predicted_labels(labels: &[i64]) -> Vec<usize> {
    densify(labels, |&l| l < 0)
}

struct PairCounts {
    /// Pairs together in both partitions.
    both: f64,
    /// Pairs together in truth.
    truth: f64,
    /// Pairs together in prediction.
    pred: f64,
    total: f64,
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

fn pair_counts(truth: &[usize], pred: &[usize]) -> PairCounts {
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut t: HashMap<usize, usize> = HashMap::new();
    let mut p: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in truth.iter().zip(pred) {
        *cells.entry((a, b)).or_default() += 1;
        *t.entry(a).or_default() += 1;
        *p.entry(b).or_default() += 1;
    }
    // sort before summing so the float result is independent of hash order
    let sum = |m: Vec<usize>| {
        let mut v = m;
        v.sort_unstable();
        v.into_iter().map(comb2).sum::<f64>()
    };
    PairCounts {
        both: sum(cells.into_values().collect()),
        truth: sum(t.into_values().collect()),
        pred: sum(p.into_values().collect()),
        total: comb2(truth.len()),
    }
}

fn aligned(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} truth labels vs {} predictions", truth.len(), pred.len())));
    }
    Ok(())
}

/// Adjusted Rand index from the contingency table. Returns 1 when the
/// chance-corrected denominator vanishes and the partitions agree, 0 otherwise.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    aligned(truth, pred)?;
    if truth.len() < 2 {
        return Err(Error::validation("labels", "ARI needs at least two points"));
    }
    let c = pair_counts(truth, pred);
    let expected = c.truth * c.pred / c.total;
    let max_index = 0.5 * (c.truth + c.pred);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(if same_partition(truth, pred) { 1.0 } else { 0.0 });
    }
    Ok((c.both - expected) / denom)
}

/// Fowlkes-Mallows score `TP / sqrt((TP + FP)(TP + FN))`; 0 when undefined.
pub fn fms(truth: &[usize], pred: &[usize]) -> Result<f64> {
    aligned(truth, pred)?;
    let c = pair_counts(truth, pred);
    let denom = (c.pred * c.truth).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(c.both / denom)
}

/// Harmonic mean of ARI and FMS; 0 when both are 0.
pub fn cscore(ari: f64, fms: f64) -> f64 {
    if ari + fms > 0.0 {
        2.0 * ari * fms / (ari + fms)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgAcc {
    pub value: f64,
    /// No predicted cluster has two or more members.
    pub no_groups_detected: bool,
}

pub fn cgacc(truth: &[usize], pred: &[usize]) -> Result<CgAcc> {
    aligned(truth, pred)?;
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        members.entry(p).or_default().push(t);
    }
    let multi: Vec<&Vec<usize>> = members.values().filter(|m| m.len() >= 2).collect();
    if multi.is_empty() {
        return Ok(CgAcc { value: 0.0, no_groups_detected: true });
    }
    let pure = multi.iter().filter(|m| m.iter().all(|&t| t == m[0])).count();
    Ok(CgAcc { value: pure as f64 / multi.len() as f64, no_groups_detected: false })
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter().zip(b).all(|(x, y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cgacc: f64,
    /// Adjusted Rand index clamped to `[0, 1]`.
    pub ari: f64,
    /// Unclamped adjusted Rand index.
    pub ari_raw: f64,
    pub fms: f64,
    pub cscore: f64,
    pub n_predicted_clusters: usize,
    pub n_true_groups: usize,
    pub no_groups_detected: bool,
}

/// Scores predicted labels (`-1` = noise) against group ids.
pub fn evaluate(groups: &[Option<String>], labels: &[i64]) -> Result<EvalReport> {
    let truth = truth_labels(groups);
    let pred = predicted_labels(labels);
    aligned(&truth, &pred)?;
    let cg = cgacc(&truth, &pred)?;
    let ari_raw = if truth.len() >= 2 { ari(&truth, &pred)? } else { 1.0 };
    let ari = ari_raw.clamp(0.0, 1.0);
    let fms = fms(&truth, &pred)?;
    let count = |v: &[usize]| v.iter().collect::<std::collections::HashSet<_>>().len();
    Ok(EvalReport {
        cgacc: cg.value,
        ari,
        ari_raw,
        fms,
        cscore: cscore(ari, fms),
        n_predicted_clusters: count(&pred),
        n_true_groups: count(&truth),
        no_groups_detected: cg.no_groups_detected,
    })
}
