//! Training objectives with analytic gradients. Batch reduction is the mean.

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, squared_distance, Matrix};

/// Rows are considered unit-norm within this tolerance.
pub const NORM_TOLERANCE: f64 = 1e-4;

pub struct TripletBatch<'a> {
    pub anchors: &'a Matrix,
    pub positives: &'a Matrix,
    pub negatives: &'a Matrix,
}

#[derive(Clone, Debug)]
pub struct TripletGrads {
    pub anchors: Matrix,
    pub positives: Matrix,
    pub negatives: Matrix,
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    Ok(())
}

/// Mean hinge `max(0, margin + |a - p|^2 - |a - n|^2)`.
pub fn triplet_loss(batch: &TripletBatch, margin: f64) -> Result<f64> {
    triplet_loss_grad(batch, margin).map(|(l, _)| l)
}

pub fn triplet_loss_grad(batch: &TripletBatch, margin: f64) -> Result<(f64, TripletGrads)> {
    if !(margin > 0.0) {
        return Err(Error::validation("margin", "must be positive"));
    }
    let TripletBatch { anchors: a, positives: p, negatives: n } = *batch;
    same_shape(a, p, "anchors/positives")?;
    same_shape(a, n, "anchors/negatives")?;
    let (b, d) = (a.rows(), a.cols());
    let mut grads = TripletGrads { anchors: Matrix::zeros(b, d), positives: Matrix::zeros(b, d), negatives: Matrix::zeros(b, d) };
    if b == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    for i in 0..b {
        let (ai, pi, ni) = (a.row(i), p.row(i), n.row(i));
        let hinge = margin + squared_distance(ai, pi) - squared_distance(ai, ni);
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        for k in 0..d {
            grads.anchors.row_mut(i)[k] = 2.0 * (ni[k] - pi[k]) * scale;
            grads.positives.row_mut(i)[k] = -2.0 * (ai[k] - pi[k]) * scale;
            grads.negatives.row_mut(i)[k] = 2.0 * (ai[k] - ni[k]) * scale;
        }
    }
    Ok((total * scale, grads))
}

pub struct ContrastiveBatch<'a> {
    pub queries: &'a Matrix,
    pub positive_keys: &'a Matrix,
    /// `K x D`, shared by every query; `K` may be zero.
    pub negative_keys: &'a Matrix,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct ContrastiveGrads {
    pub queries: Matrix,
    pub positive_keys: Matrix,
    pub negative_keys: Matrix,
}

fn check_unit_rows(m: &Matrix) -> Result<()> {
    for (row, r) in m.iter_rows().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized { row, norm: n });
        }
    }
    Ok(())
}

/// NT-Xent: mean over queries of
/// `-log(exp(q.k+/t) / (exp(q.k+/t) + sum_i exp(q.n_i/t)))`.
/// All rows must be unit-norm.
pub fn ntxent_loss(batch: &ContrastiveBatch) -> Result<f64> {
    ntxent_loss_grad(batch).map(|(l, _)| l)
}

pub fn ntxent_loss_grad(batch: &ContrastiveBatch) -> Result<(f64, ContrastiveGrads)> {
    let ContrastiveBatch { queries: q, positive_keys: kp, negative_keys: kn, temperature: tau } = *batch;
    if !(tau > 0.0) {
        return Err(Error::validation("temperature", "must be positive"));
    }
    same_shape(q, kp, "queries/positive keys")?;
    if kn.rows() > 0 && kn.cols() != q.cols() {
        return Err(Error::Shape(format!("negative keys have width {}, queries {}", kn.cols(), q.cols())));
    }
    check_unit_rows(q)?;
    check_unit_rows(kp)?;
    check_unit_rows(kn)?;
    let (b, d, k) = (q.rows(), q.cols(), kn.rows());
    let mut grads =
        ContrastiveGrads { queries: Matrix::zeros(b, d), positive_keys: Matrix::zeros(b, d), negative_keys: Matrix::zeros(k, d) };
    if b == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    let mut logits = vec![0.0; k + 1];
    for i in 0..b {
        let qi = q.row(i);
        logits[0] = dot(qi, kp.row(i)) / tau;
        for j in 0..k {
            logits[j + 1] = dot(qi, kn.row(j)) / tau;
        }
        let top = (0..=k).fold(0, |a, j| if logits[j] > logits[a] { j } else { a });
        let max = logits[top];
        // the max term contributes exactly 1; summing the rest separately keeps
        // precision when the loss is tiny
        let rest: f64 = (0..=k).filter(|&j| j != top).map(|j| (logits[j] - max).exp()).sum();
        let lse = max + rest.ln_1p();
        total += (max - logits[0]) + rest.ln_1p();
        // softmax weights; d loss / d logit_j = p_j - [j == 0]
        let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let c = scale / tau;
        let gq = grads.queries.row_mut(i);
        for (g, &kv) in gq.iter_mut().zip(kp.row(i)) {
            *g += (probs[0] - 1.0) * kv * c;
        }
        for j in 0..k {
            for (g, &kv) in gq.iter_mut().zip(kn.row(j)) {
                *g += probs[j + 1] * kv * c;
            }
        }
        for (g, &qv) in grads.positive_keys.row_mut(i).iter_mut().zip(qi) {
            *g = (probs[0] - 1.0) * qv * c;
        }
        for j in 0..k {
            for (g, &qv) in grads.negative_keys.row_mut(j).iter_mut().zip(qi) {
                *g += probs[j + 1] * qv * c;
            }
        }
    }
    Ok((total * scale, grads))
}

/// Mean negative cosine similarity. The target is treated as a constant,
/// so only the gradient with respect to `predicted` is returned.
pub fn negcos_loss(predicted: &Matrix, target: &Matrix) -> Result<f64> {
    negcos_loss_grad(predicted, target).map(|(l, _)| l)
}

pub fn negcos_loss_grad(predicted: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(predicted, target, "predicted/target")?;
    let (b, d) = (predicted.rows(), predicted.cols());
    let mut grad = Matrix::zeros(b, d);
    if b == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    for i in 0..b {
        let (p, z) = (predicted.row(i), target.row(i));
        let (np, nz) = (norm(p), norm(z));
        if np == 0.0 || nz == 0.0 {
            return Err(Error::Shape(format!("zero-norm row {i} in negcos loss")));
        }
        let cos = dot(p, z) / (np * nz);
        total -= cos;
        for ((g, &pv), &zv) in grad.row_mut(i).iter_mut().zip(p).zip(z) {
            *g = -scale * (zv / nz - cos * pv / np) / np;
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn triplet_hinge_inactive() {
        let a = m(&[&[0.0, 0.0]]);
        let n = m(&[&[1.0, 0.0]]);
        let batch = TripletBatch { anchors: &a, positives: &a, negatives: &n };
        assert_eq!(triplet_loss(&batch, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn triplet_hand_value() {
        // |a-p|^2 = 0.5, |a-n|^2 = 0.3
        let a = m(&[&[0.0, 0.0]]);
        let p = m(&[&[0.5, 0.5]]);
        let n = m(&[&[0.3f64.sqrt(), 0.0]]);
        let batch = TripletBatch { anchors: &a, positives: &p, negatives: &n };
        assert_abs_diff_eq!(triplet_loss(&batch, 0.2).unwrap(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn triplet_degenerate_is_margin() {
        let a = m(&[&[0.3, -0.1], &[1.0, 2.0]]);
        let batch = TripletBatch { anchors: &a, positives: &a, negatives: &a };
        assert_abs_diff_eq!(triplet_loss(&batch, 0.2).unwrap(), 0.2, epsilon = 1e-15);
        let short = m(&[&[0.0, 0.0]]);
        let bad = TripletBatch { anchors: &a, positives: &short, negatives: &a };
        assert!(matches!(triplet_loss(&bad, 0.2), Err(Error::Shape(_))));
    }

    #[test]
    fn ntxent_without_negatives_is_zero() {
        let q = m(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let k = m(&[&[0.0, 1.0], &[0.6, -0.8]]);
        let empty = Matrix::zeros(0, 2);
        let batch = ContrastiveBatch { queries: &q, positive_keys: &k, negative_keys: &empty, temperature: 0.05 };
        assert_eq!(ntxent_loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn ntxent_orthogonal_negatives_closed_form() {
        let q = m(&[&[1.0, 0.0]]);
        let negs = Matrix::from_rows(&vec![vec![0.0, 1.0]; 10]).unwrap();
        let batch = ContrastiveBatch { queries: &q, positive_keys: &q, negative_keys: &negs, temperature: 0.05 };
        let expect = (1.0 + 10.0 * (-20.0f64).exp()).ln();
        assert_abs_diff_eq!(ntxent_loss(&batch).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn ntxent_uniform_logits() {
        let q = m(&[&[1.0, 0.0]]);
        let negs = Matrix::from_rows(&vec![vec![1.0, 0.0]; 7]).unwrap();
        for tau in [0.05, 0.1, 0.2] {
            let batch = ContrastiveBatch { queries: &q, positive_keys: &q, negative_keys: &negs, temperature: tau };
            assert_abs_diff_eq!(ntxent_loss(&batch).unwrap(), 8.0f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn ntxent_rejects_bad_inputs() {
        let q = m(&[&[1.0, 0.0]]);
        let empty = Matrix::zeros(0, 2);
        let mut batch = ContrastiveBatch { queries: &q, positive_keys: &q, negative_keys: &empty, temperature: 0.0 };
        assert!(ntxent_loss(&batch).is_err());
        let raw = m(&[&[2.0, 0.0]]);
        batch.temperature = 0.1;
        batch.queries = &raw;
        assert!(matches!(ntxent_loss(&batch), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn negcos_reference_values() {
        let p = m(&[&[1.0, 2.0, -1.0]]);
        let neg = m(&[&[-1.0, -2.0, 1.0]]);
        let perp = m(&[&[2.0, -1.0, 0.0]]);
        assert_abs_diff_eq!(negcos_loss(&p, &p).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(negcos_loss(&p, &perp).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(negcos_loss(&p, &neg).unwrap(), 1.0, epsilon = 1e-15);
        assert!(negcos_loss(&p, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn negcos_gradient_matches_finite_differences() {
        let p = m(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.4]]);
        let z = m(&[&[1.0, 0.2, 0.2], &[-0.3, 0.9, 0.0]]);
        let (_, g) = negcos_loss_grad(&p, &z).unwrap();
        let h = 1e-6;
        for i in 0..p.as_slice().len() {
            let mut up = p.clone();
            up.as_mut_slice()[i] += h;
            let mut down = p.clone();
            down.as_mut_slice()[i] -= h;
            let fd = (negcos_loss(&up, &z).unwrap() - negcos_loss(&down, &z).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(fd, g.as_slice()[i], epsilon = 1e-8);
        }
    }
}
