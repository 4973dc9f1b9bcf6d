//! Loss functions with exact gradients.
//!
//! Score losses take plain score slices and return the gradient with respect
//! to the student scores. Representation losses work on dense activations so
//! the result can be fed straight into [`EncoderModel::accumulate_backward`].
//!
//! [`EncoderModel::accumulate_backward`]: crate::encoder::EncoderModel::accumulate_backward

use crate::error::{Error, Result};
use crate::sparse::SparseVec;

fn check_finite(label: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{label}[{i}]"))),
        None => Ok(()),
    }
}

pub(crate) fn log_softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = xs
        .iter()
        .map(|x| (x / temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    xs.iter().map(|x| x / temperature - lse).collect()
}

/// Forward KL `D_KL(softmax(teacher/τ) || softmax(student/τ))` and its
/// gradient with respect to `student`.
pub fn kld_loss(teacher: &[f64], student: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    if teacher.len() < 2 {
        return Err(Error::Degenerate(
            "score distributions need at least two candidates".into(),
        ));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    check_finite("teacher scores", teacher)?;
    check_finite("student scores", student)?;

    let log_p = log_softmax(teacher, temperature);
    let log_q = log_softmax(student, temperature);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (lp, lq) in log_p.iter().zip(&log_q) {
        let p = lp.exp();
        if p > 0.0 {
            loss += p * (lp - lq);
        }
        grad.push((lq.exp() - p) / temperature);
    }
    Ok((loss.max(0.0), grad))
}

/// `-ln softmax(scores)[positive]` and its gradient.
pub fn infonce_loss(scores: &[f64], positive: usize) -> Result<(f64, Vec<f64>)> {
    if positive >= scores.len() {
        return Err(Error::Degenerate(format!(
            "positive index {positive} outside {} candidates",
            scores.len()
        )));
    }
    check_finite("scores", scores)?;
    let log_q = log_softmax(scores, 1.0);
    let mut grad: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
    grad[positive] -= 1.0;
    Ok((-log_q[positive], grad))
}

/// Mean squared error over every dimension, absent entries counting as zero.
pub fn mse_dense(student: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    if student.is_empty() {
        return Err(Error::Degenerate("empty representation".into()));
    }
    let n = student.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let d = s - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, grad))
}

pub fn mse_rep_loss(student: &SparseVec, teacher: &SparseVec) -> Result<(f64, Vec<f64>)> {
    mse_dense(&student.to_dense(), &teacher.to_dense())
}

fn check_batch(batch: &[&[f64]]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Degenerate("regularizer needs a non-empty batch".into()))?;
    let dim = first.len();
    if let Some(b) = batch.iter().find(|b| b.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: b.len(),
        });
    }
    Ok(dim)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// FLOPS regularizer `sum_j (mean_i |w_ij|)^2` with per-vector gradients.
pub fn flops_reg_loss(batch: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    let dim = check_batch(batch)?;
    let n = batch.len() as f64;
    let mut mean = vec![0.0; dim];
    for rep in batch {
        for (m, w) in mean.iter_mut().zip(rep.iter()) {
            *m += w.abs();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let loss = mean.iter().map(|m| m * m).sum();
    let grads = batch
        .iter()
        .map(|rep| {
            rep.iter()
                .zip(&mean)
                .map(|(w, m)| 2.0 * m * sign(*w) / n)
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

/// L1 regularizer `mean_i sum_j |w_ij|` with per-vector gradients.
pub fn l1_reg_loss(batch: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(batch)?;
    let n = batch.len() as f64;
    let loss = batch
        .iter()
        .map(|rep| rep.iter().map(|w| w.abs()).sum::<f64>())
        .sum::<f64>()
        / n;
    let grads = batch
        .iter()
        .map(|rep| rep.iter().map(|w| sign(*w) / n).collect())
        .collect();
    Ok((loss, grads))
}
