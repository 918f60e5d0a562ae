//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use std::collections::HashMap;

use colorvar::dataset::Raster;
use colorvar::matrix::{l2_normalize_rows, squared_distance};
use colorvar::model::EmbeddingMatrix;
use colorvar::Matrix;
use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let v = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Matrix::from_vec(rows, cols, v).unwrap()
}

pub fn unit(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    l2_normalize_rows(&uniform(rng, rows, cols)).unwrap().0
}

/// Central differences of `f` with respect to every entry of `m`.
pub fn numeric_grad(m: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.as_slice().len() {
        let mut up = m.clone();
        up.as_mut_slice()[i] += FD_EPS;
        let mut down = m.clone();
        down.as_mut_slice()[i] -= FD_EPS;
        g.as_mut_slice()[i] = (f(&up) - f(&down)) / (2.0 * FD_EPS);
    }
    g
}

/// `|a - b| / max(|a|, |b|)` in the Frobenius norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = |m: &[f64]| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(a).max(scale(b)).max(1e-12)
}

/// (TP, FP, FN, TN) over all unordered pairs, by direct enumeration.
pub fn pair_table(truth: &[usize], pred: &[usize]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            match (truth[i] == truth[j], pred[i] == pred[j]) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
    }
    (tp, fp, fn_, tn)
}

/// Pair-counting form of the adjusted Rand index.
pub fn brute_ari(truth: &[usize], pred: &[usize]) -> f64 {
    let (tp, fp, fn_, tn) = pair_table(truth, pred);
    let denom = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    if denom == 0.0 {
        // both partitions trivial (all together or all apart)
        return if fp == 0.0 && fn_ == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * (tp * tn - fn_ * fp) / denom
}

pub fn brute_fms(truth: &[usize], pred: &[usize]) -> f64 {
    let (tp, fp, fn_, _) = pair_table(truth, pred);
    let denom = ((tp + fp) * (tp + fn_)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        tp / denom
    }
}

pub fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

pub fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
    let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
    EmbeddingMatrix::new(ids, Matrix::from_rows(rows).unwrap(), false).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

/// Labels renumbered by first appearance.
pub fn canon(labels: &[i64]) -> Vec<i64> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len() as i64;
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn ward_distance(pts: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let centroid = |c: &[usize]| {
        let mut m = vec![0.0; pts[0].len()];
        for &i in c {
            m.iter_mut().zip(&pts[i]).for_each(|(x, v)| *x += v / c.len() as f64);
        }
        m
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    (2.0 * na * nb / (na + nb)).sqrt() * squared_distance(&centroid(a), &centroid(b)).sqrt()
}

/// Greedy Ward linkage recomputing every cluster pair from scratch each round.
pub fn naive_ward(pts: &[Vec<f64>], threshold: f64) -> Vec<i64> {
    let mut clusters: Vec<Vec<usize>> = (0..pts.len()).map(|i| vec![i]).collect();
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = ward_distance(pts, &clusters[i], &clusters[j]);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        if best.0 > threshold {
            break;
        }
        let merged = clusters.remove(best.2);
        clusters[best.1].extend(merged);
    }
    let mut labels = vec![0i64; pts.len()];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = c as i64;
        }
    }
    canon(&labels)
}

pub fn noise(w: u32, h: u32, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

pub fn reassemble_lr(left: &Raster, right: &Raster) -> Raster {
    let mut out = RgbImage::new(left.width() + right.width(), left.height());
    imageops::replace(&mut out, left, 0, 0);
    imageops::replace(&mut out, right, i64::from(left.width()), 0);
    out
}

pub fn reassemble_tb(top: &Raster, bottom: &Raster) -> Raster {
    let mut out = RgbImage::new(top.width(), top.height() + bottom.height());
    imageops::replace(&mut out, top, 0, 0);
    imageops::replace(&mut out, bottom, 0, i64::from(top.height()));
    out
}
