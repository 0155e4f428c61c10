//! Classification losses and the mutual-information adaptation loss.
//!
//! The mutual-information loss on target predictions `p(o | xᵢ)` is
//!
//! ```text
//! L_M = (1/N) Σᵢ H(p(o | xᵢ)) − γ · H(p̄),     p̄ = (1/N) Σᵢ p(o | xᵢ)
//! ```
//!
//! Minimizing the first term sharpens each prediction; maximizing the
//! marginal entropy keeps samples spread across the classes. Logs are natural
//! and floored at [`PROB_FLOOR`], so `0·log 0` evaluates to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{softmax_rows, Matrix, Tape, Var, LOG_FLOOR};

pub const PROB_FLOOR: f64 = LOG_FLOOR;

/// Conventional angular-margin hyperparameters.
pub const DEFAULT_ARC_SCALE: f64 = 64.0;
pub const DEFAULT_ARC_MARGIN: f64 = 0.5;

/// Row-stochastic prediction matrix: rows are samples, columns classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    probs: Matrix,
}

impl ClassifierOutput {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.cols() == 0 {
            return Err(Error::InvalidArgument(
                "classifier output needs at least one class".into(),
            ));
        }
        for (i, r) in probs.row_iter().enumerate() {
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has entries outside [0, 1]"
                )));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn n_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn n_samples(&self) -> usize {
        self.probs.rows()
    }

    /// Most probable class per row (lowest index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &p)| {
                        if p > best.1 {
                            (j, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Trade-off weights of the joint objective `L_C + α·ΣMMD² + β·L_M` and the
/// marginal-entropy weight γ inside `L_M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    /// Weights used with an angular-margin source loss.
    pub fn angular() -> Self {
        Self {
            alpha: 10.0,
            beta: 5.0,
            gamma: 0.2,
        }
    }

    /// Weights used with a softmax cross-entropy source loss.
    pub fn softmax() -> Self {
        Self {
            alpha: 2.0,
            beta: 5.0,
            gamma: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::angular()
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim("labels", rows, labels.len()));
    }
    if rows == 0 {
        return Err(Error::Empty("classification loss over zero samples".into()));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `−p·ln p` with the floor; zero at `p = 0`.
fn plogp_neg(p: f64) -> f64 {
    -p * floored_ln(p)
}

/// d(−p·ln max(p, ε))/dp.
fn plogp_neg_grad(p: f64) -> f64 {
    -(floored_ln(p) + if p >= PROB_FLOOR { 1.0 } else { 0.0 })
}

pub fn softmax(logits: &Matrix) -> Result<ClassifierOutput> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    if logits.cols() == 0 {
        return Err(Error::InvalidArgument("softmax over zero classes".into()));
    }
    Ok(ClassifierOutput {
        probs: softmax_rows(logits),
    })
}

/// Mean of `−ln max(p_label, ε)`.
pub fn cross_entropy(probs: &ClassifierOutput, labels: &[usize]) -> Result<f64> {
    let p = probs.probs();
    check_labels(labels, p.rows(), p.cols())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -floored_ln(p.get(i, y)))
        .sum::<f64>()
        / labels.len() as f64)
}

/// Column means of the prediction matrix.
pub fn marginal_distribution(probs: &ClassifierOutput) -> Result<Vec<f64>> {
    let p = probs.probs();
    if p.rows() == 0 {
        return Err(Error::Empty("marginal of an empty batch".into()));
    }
    let n = p.rows() as f64;
    Ok((0..p.cols())
        .map(|j| (0..p.rows()).map(|i| p.get(i, j)).sum::<f64>() / n)
        .collect())
}

/// Mean per-sample prediction entropy.
pub fn conditional_entropy(probs: &ClassifierOutput) -> f64 {
    let p = probs.probs();
    if p.rows() == 0 {
        return 0.0;
    }
    p.data().iter().map(|&v| plogp_neg(v)).sum::<f64>() / p.rows() as f64
}

/// Entropy of the batch-averaged prediction.
pub fn marginal_entropy(probs: &ClassifierOutput) -> f64 {
    marginal_distribution(probs)
        .map(|q| q.iter().map(|&v| plogp_neg(v)).sum())
        .unwrap_or(0.0)
}

/// `H[O|X] − γ·H[O]`.
pub fn mi_loss(probs: &ClassifierOutput, gamma: f64) -> f64 {
    conditional_entropy(probs) - gamma * marginal_entropy(probs)
}

/// `L_C + α·mmd_sum + β·L_M`.
pub fn total_loss(source_loss: f64, mmd_sum: f64, mi: f64, weights: &LossWeights) -> Result<f64> {
    if ![source_loss, mmd_sum, mi].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("loss components".into()));
    }
    Ok(source_loss + weights.alpha * mmd_sum + weights.beta * mi)
}

/// Cosine between each L2-normalized embedding row and each L2-normalized
/// head column (`head` is `dim × classes`).
pub fn cosine_logits(embeddings: &Matrix, head: &Matrix) -> Result<Matrix> {
    if embeddings.cols() != head.rows() {
        return Err(Error::dim("angular head", embeddings.cols(), head.rows()));
    }
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let w = tape.constant(head.clone());
    let cos = cosine_var(&mut tape, e, w)?;
    Ok(tape.value(cos).clone())
}

fn check_arc_params(scale: f64, margin: f64) -> Result<()> {
    if !(scale > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::InvalidArgument(format!(
            "angular margin scale {scale}, margin {margin}"
        )));
    }
    Ok(())
}

fn arc_logits(cos: &Matrix, labels: &[usize], scale: f64, margin: f64) -> Matrix {
    let mut out = cos.map(|c| scale * c);
    for (i, &y) in labels.iter().enumerate() {
        let theta = cos.get(i, y).clamp(-1.0, 1.0).acos();
        out.set(i, y, scale * (theta + margin).cos());
    }
    out
}

/// Cross-entropy over `s·cos θⱼ` logits with the true-class logit replaced by
/// `s·cos(θ_y + m)`.
pub fn angular_margin_loss(
    embeddings: &Matrix,
    head: &Matrix,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<f64> {
    check_arc_params(scale, margin)?;
    let cos = cosine_logits(embeddings, head)?;
    check_labels(labels, cos.rows(), cos.cols())?;
    logits_cross_entropy(&arc_logits(&cos, labels, scale, margin), labels)
}

/// Cross-entropy computed from logits via log-sum-exp.
pub fn logits_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_sum_exp(logits.row(i)) - logits.get(i, y))
        .sum();
    Ok(total / labels.len() as f64)
}

fn log_sum_exp(r: &[f64]) -> f64 {
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Tape-recorded variants
// ---------------------------------------------------------------------------

pub fn softmax_var(tape: &mut Tape, logits: Var) -> Var {
    tape.softmax(logits)
}

/// Tape version of [`cross_entropy`] on a probability matrix.
pub fn cross_entropy_var(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.value(probs);
    check_labels(labels, p.rows(), p.cols())?;
    let n = labels.len() as f64;
    let value = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -floored_ln(p.get(i, y)))
        .sum::<f64>()
        / n;
    let labels = labels.to_vec();
    Ok(tape.record(
        &[probs],
        Matrix::scalar(value),
        Box::new(move |inp: &[&Matrix], _: &Matrix, g: &Matrix| {
            let p = inp[0];
            let mut gp = Matrix::zeros(p.rows(), p.cols());
            for (i, &y) in labels.iter().enumerate() {
                let v = p.get(i, y);
                if v >= PROB_FLOOR {
                    gp.set(i, y, -g.get(0, 0) / (n * v));
                }
            }
            vec![gp]
        }),
    ))
}

/// Fused softmax + cross-entropy on logits.
pub fn logits_cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let value = logits_cross_entropy(tape.value(logits), labels)?;
    let labels = labels.to_vec();
    Ok(tape.record(
        &[logits],
        Matrix::scalar(value),
        Box::new(move |inp: &[&Matrix], _: &Matrix, g: &Matrix| {
            let n = labels.len() as f64;
            let mut gz = softmax_rows(inp[0]);
            for (i, &y) in labels.iter().enumerate() {
                gz.set(i, y, gz.get(i, y) - 1.0);
            }
            let s = g.get(0, 0) / n;
            vec![gz.map(|v| v * s)]
        }),
    ))
}

pub fn conditional_entropy_var(tape: &mut Tape, probs: Var) -> Result<Var> {
    let p = tape.value(probs);
    if p.rows() == 0 {
        return Err(Error::Empty("entropy of an empty batch".into()));
    }
    let n = p.rows() as f64;
    let value = p.data().iter().map(|&v| plogp_neg(v)).sum::<f64>() / n;
    Ok(tape.record(
        &[probs],
        Matrix::scalar(value),
        Box::new(move |inp: &[&Matrix], _: &Matrix, g: &Matrix| {
            let s = g.get(0, 0) / n;
            vec![inp[0].map(|v| s * plogp_neg_grad(v))]
        }),
    ))
}

pub fn marginal_entropy_var(tape: &mut Tape, probs: Var) -> Result<Var> {
    let p = tape.value(probs);
    if p.rows() == 0 {
        return Err(Error::Empty("entropy of an empty batch".into()));
    }
    let n = p.rows() as f64;
    let q: Vec<f64> = (0..p.cols())
        .map(|j| (0..p.rows()).map(|i| p.get(i, j)).sum::<f64>() / n)
        .collect();
    let value = q.iter().map(|&v| plogp_neg(v)).sum::<f64>();
    Ok(tape.record(
        &[probs],
        Matrix::scalar(value),
        Box::new(move |inp: &[&Matrix], _: &Matrix, g: &Matrix| {
            let s = g.get(0, 0) / n;
            let dq: Vec<f64> = q.iter().map(|&v| s * plogp_neg_grad(v)).collect();
            vec![Matrix::from_fn(inp[0].rows(), inp[0].cols(), |_, j| dq[j])]
        }),
    ))
}

/// Tape version of [`mi_loss`].
pub fn mi_loss_var(tape: &mut Tape, probs: Var, gamma: f64) -> Result<Var> {
    let cond = conditional_entropy_var(tape, probs)?;
    let marg = marginal_entropy_var(tape, probs)?;
    let weighted = tape.scale(marg, gamma);
    tape.sub(cond, weighted)
}

/// Cosine matrix between normalized embedding rows and normalized columns of
/// a `dim × classes` head.
pub fn cosine_var(tape: &mut Tape, embeddings: Var, head: Var) -> Result<Var> {
    let (e, w) = (tape.value(embeddings), tape.value(head));
    if e.cols() != w.rows() {
        return Err(Error::dim("angular head", e.cols(), w.rows()));
    }
    let en = tape.normalize_rows(embeddings)?;
    let wt = tape.transpose(head);
    let wn = tape.normalize_rows(wt)?;
    let wn_t = tape.transpose(wn);
    tape.matmul(en, wn_t)
}

fn arc_margin_var(tape: &mut Tape, cos: Var, labels: &[usize], scale: f64, margin: f64) -> Var {
    let value = arc_logits(tape.value(cos), labels, scale, margin);
    let labels = labels.to_vec();
    let (sin_m, cos_m) = margin.sin_cos();
    tape.record(
        &[cos],
        value,
        Box::new(move |inp: &[&Matrix], _: &Matrix, g: &Matrix| {
            let c = inp[0];
            let mut gc = g.map(|v| v * scale);
            for (i, &y) in labels.iter().enumerate() {
                // d/dc cos(acos c + m) = cos m + sin m · c / √(1 − c²)
                let cv = c.get(i, y).clamp(-1.0, 1.0);
                let sin_t = (1.0 - cv * cv).sqrt().max(1e-12);
                gc.set(i, y, g.get(i, y) * scale * (cos_m + sin_m * cv / sin_t));
            }
            vec![gc]
        }),
    )
}

/// Tape version of [`angular_margin_loss`]; `head` is `dim × classes`.
pub fn angular_margin_var(
    tape: &mut Tape,
    embeddings: Var,
    head: Var,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<Var> {
    check_arc_params(scale, margin)?;
    let cos = cosine_var(tape, embeddings, head)?;
    let (rows, cols) = tape.value(cos).shape();
    check_labels(labels, rows, cols)?;
    let logits = arc_margin_var(tape, cos, labels, scale, margin);
    logits_cross_entropy_var(tape, logits, labels)
}

/// `source + α·mmd + β·mi` on the tape.
pub fn total_loss_var(
    tape: &mut Tape,
    source: Var,
    mmd: Var,
    mi: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let a = tape.scale(mmd, weights.alpha);
    let b = tape.scale(mi, weights.beta);
    let partial = tape.add(source, a)?;
    tape.add(partial, b)
}
