//! Verification-protocol evaluation: cosine pair scoring, difficult-pair
//! mining, 10-fold thresholded accuracy, ROC / TAR@FAR and domain
//! discrepancy.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::kernelmmd::{mmd2_biased, KernelSpec};
use crate::numcore::rng::SeedRng;
use crate::numcore::Matrix;
use crate::pipeline::ModelState;

pub const FOLDS: usize = 10;

/// Final-layer embeddings of every sample in `data`.
pub fn embed(model: &ModelState, data: &Dataset) -> Result<Matrix> {
    if data.dim() != model.layer_dims()[0] {
        return Err(Error::dim("embed input", model.layer_dims()[0], data.dim()));
    }
    model.embed(data.features())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    AllPairs,
    SelectedDifficult,
    Sampled,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

impl Pair {
    fn key(&self) -> (usize, usize) {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairList {
    pairs: Vec<Pair>,
    provenance: Provenance,
}

impl PairList {
    /// Validates indices against `n_samples` and rejects self-pairs and
    /// duplicate unordered pairs.
    pub fn new(pairs: Vec<Pair>, provenance: Provenance, n_samples: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if p.a >= n_samples || p.b >= n_samples {
                return Err(Error::InvalidArgument(format!(
                    "pair ({}, {}) out of range for {n_samples} samples",
                    p.a, p.b
                )));
            }
            if p.a == p.b {
                return Err(Error::InvalidArgument(format!(
                    "self-pair ({}, {})",
                    p.a, p.b
                )));
            }
            if !seen.insert(p.key()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate pair ({}, {})",
                    p.a, p.b
                )));
            }
        }
        Ok(Self { pairs, provenance })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn same_flags(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.same).collect()
    }

    pub fn genuine_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }

    /// CSV `id_a,id_b,same` using `ids` to translate indices.
    pub fn to_csv_string(&self, ids: &[u64]) -> String {
        let mut out = String::from("id_a,id_b,same\n");
        for p in &self.pairs {
            let _ = writeln!(out, "{},{},{}", ids[p.a], ids[p.b], u8::from(p.same));
        }
        out
    }

    pub fn save_csv(&self, path: &Path, ids: &[u64]) -> Result<()> {
        std::fs::write(path, self.to_csv_string(ids)).map_err(|e| Error::io(path, e))
    }

    /// Parses a pairs CSV against the ids of `data`; unknown ids are errors.
    pub fn from_csv_str(text: &str, data: &Dataset) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "id_a,id_b,same" => {}
            _ => {
                return Err(Error::Schema(
                    "pairs file must start with header id_a,id_b,same".into(),
                ))
            }
        }
        let index: BTreeMap<u64, usize> = data
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let mut pairs = Vec::new();
        for (no, line) in lines {
            let line_no = no + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::Schema(format!(
                    "line {line_no}: expected 3 columns, found {}",
                    cols.len()
                )));
            }
            let id = |s: &str| -> Result<usize> {
                let v = s.parse::<u64>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("{s:?}: {e}"),
                })?;
                index.get(&v).copied().ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("unknown sample id {v}"),
                })
            };
            let same = match cols[2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("same must be 0 or 1, found {other:?}"),
                    })
                }
            };
            pairs.push(Pair {
                a: id(cols[0])?,
                b: id(cols[1])?,
                same,
            });
        }
        Self::new(pairs, Provenance::File, data.len())
    }

    pub fn load_csv(path: &Path, data: &Dataset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, data)
    }
}

/// Every unordered pair `i < j`, in lexicographic order.
pub fn all_pairs(labels: &[usize]) -> PairList {
    let n = labels.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push(Pair {
                a,
                b,
                same: labels[a] == labels[b],
            });
        }
    }
    PairList {
        pairs,
        provenance: Provenance::AllPairs,
    }
}

/// Uniform sample of `n_pos` genuine and `n_neg` impostor pairs, shuffled.
pub fn sample_balanced_pairs(
    labels: &[usize],
    n_pos: usize,
    n_neg: usize,
    rng: &mut SeedRng,
) -> Result<PairList> {
    let all = all_pairs(labels);
    let (mut pos, mut neg): (Vec<Pair>, Vec<Pair>) = all.pairs.into_iter().partition(|p| p.same);
    for (kind, have, want) in [
        ("genuine", pos.len(), n_pos),
        ("impostor", neg.len(), n_neg),
    ] {
        if have < want {
            return Err(Error::InsufficientPairs {
                kind,
                needed: want,
                found: have,
            });
        }
    }
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut pairs: Vec<Pair> = pos
        .into_iter()
        .take(n_pos)
        .chain(neg.into_iter().take(n_neg))
        .collect();
    rng.shuffle(&mut pairs);
    Ok(PairList {
        pairs,
        provenance: Provenance::Sampled,
    })
}

fn row_norms(emb: &Matrix) -> Vec<f64> {
    emb.row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn cosine(emb: &Matrix, norms: &[f64], a: usize, b: usize) -> f64 {
    let dot: f64 = emb.row(a).iter().zip(emb.row(b)).map(|(x, y)| x * y).sum();
    (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
}

fn check_rows(norms: &[f64], pairs: &[Pair]) -> Result<()> {
    for p in pairs {
        for r in [p.a, p.b] {
            if r >= norms.len() {
                return Err(Error::dim("pair index", format!("< {}", norms.len()), r));
            }
            if !(norms[r] > 0.0) {
                return Err(Error::DegenerateFeature { row: r });
            }
        }
    }
    Ok(())
}

/// Cosine similarity for each pair, in pair order.
pub fn score_pairs(embeddings: &Matrix, pairs: &PairList) -> Result<Vec<f64>> {
    let norms = row_norms(embeddings);
    check_rows(&norms, &pairs.pairs)?;
    Ok(pairs
        .pairs
        .iter()
        .map(|p| cosine(embeddings, &norms, p.a, p.b))
        .collect())
}

/// The `k_pos` lowest-scoring genuine and `k_neg` highest-scoring impostor
/// pairs among all pairs of `labels`.
pub fn select_difficult_pairs(
    embeddings: &Matrix,
    labels: &[usize],
    k_pos: usize,
    k_neg: usize,
) -> Result<PairList> {
    if embeddings.rows() != labels.len() {
        return Err(Error::dim(
            "difficult-pair labels",
            embeddings.rows(),
            labels.len(),
        ));
    }
    select_difficult_from(embeddings, &all_pairs(labels), k_pos, k_neg)
}

/// Difficult-pair selection from an explicit candidate list. Ties are broken
/// by the lexicographic (smaller index, larger index) key, and the output is
/// sorted by that key, so the result does not depend on candidate order.
pub fn select_difficult_from(
    embeddings: &Matrix,
    candidates: &PairList,
    k_pos: usize,
    k_neg: usize,
) -> Result<PairList> {
    let norms = row_norms(embeddings);
    check_rows(&norms, &candidates.pairs)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in &candidates.pairs {
        let (a, b) = p.key();
        let entry = (cosine(embeddings, &norms, a, b), a, b);
        if p.same {
            pos.push(entry);
        } else {
            neg.push(entry);
        }
    }
    for (kind, have, want) in [
        ("genuine", pos.len(), k_pos),
        ("impostor", neg.len(), k_neg),
    ] {
        if have < want {
            return Err(Error::InsufficientPairs {
                kind,
                needed: want,
                found: have,
            });
        }
    }
    pos.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    neg.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut pairs: Vec<Pair> = pos
        .iter()
        .take(k_pos)
        .map(|&(_, a, b)| Pair { a, b, same: true })
        .chain(
            neg.iter()
                .take(k_neg)
                .map(|&(_, a, b)| Pair { a, b, same: false }),
        )
        .collect();
    pairs.sort_by_key(|p| (p.a, p.b));
    Ok(PairList {
        pairs,
        provenance: Provenance::SelectedDifficult,
    })
}

/// Candidate thresholds for the rule `same ⇔ score > t`: one below the
/// minimum, the midpoints between consecutive distinct scores, and the
/// maximum itself.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let Some(&first) = distinct.first() else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(first - 1.0);
    for w in distinct.windows(2) {
        out.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    out.push(*distinct.last().unwrap());
    out
}

pub fn accuracy_at(scores: &[f64], same: &[bool], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(same)
        .filter(|(&s, &g)| (s > threshold) == g)
        .count();
    correct as f64 / scores.len().max(1) as f64
}

/// Threshold maximizing accuracy; the lowest such candidate wins ties.
pub fn best_threshold(scores: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != same.len() {
        return Err(Error::dim("scores vs labels", scores.len(), same.len()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("pair scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let n = scores.len();
    let genuine_total = same.iter().filter(|&&g| g).count();
    // threshold below everything: all predicted genuine
    let mut correct = genuine_total;
    let mut best = (scores[order[0]] - 1.0, correct);
    let mut k = 0;
    while k < n {
        let v = scores[order[k]];
        while k < n && scores[order[k]] == v {
            if same[order[k]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            k += 1;
        }
        let t = if k < n {
            v + (scores[order[k]] - v) / 2.0
        } else {
            v
        };
        if correct > best.1 {
            best = (t, correct);
        }
    }
    Ok((best.0, best.1 as f64 / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenFold {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub thresholds: Vec<f64>,
    pub fold_accuracies: Vec<f64>,
}

/// Fold `f` covers the contiguous index range returned here.
pub fn fold_range(n: usize, fold: usize) -> std::ops::Range<usize> {
    (fold * n / FOLDS)..((fold + 1) * n / FOLDS)
}

/// Standard 10-fold protocol: contiguous folds in input order; each fold is
/// scored with the threshold that is best on the other nine.
pub fn tenfold_accuracy(scores: &[f64], same: &[bool]) -> Result<TenFold> {
    if scores.len() != same.len() {
        return Err(Error::dim("scores vs labels", scores.len(), same.len()));
    }
    if scores.len() < FOLDS {
        return Err(Error::InsufficientPairs {
            kind: "scored",
            needed: FOLDS,
            found: scores.len(),
        });
    }
    let n = scores.len();
    let mut thresholds = Vec::with_capacity(FOLDS);
    let mut fold_accuracies = Vec::with_capacity(FOLDS);
    for f in 0..FOLDS {
        let test = fold_range(n, f);
        let (train_s, train_l): (Vec<f64>, Vec<bool>) = (0..n)
            .filter(|i| !test.contains(i))
            .map(|i| (scores[i], same[i]))
            .unzip();
        let (t, _) = best_threshold(&train_s, &train_l)?;
        thresholds.push(t);
        fold_accuracies.push(accuracy_at(&scores[test.clone()], &same[test], t));
    }
    let mean = fold_accuracies.iter().sum::<f64>() / FOLDS as f64;
    let var = fold_accuracies
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / FOLDS as f64;
    Ok(TenFold {
        mean,
        std: var.sqrt(),
        thresholds,
        fold_accuracies,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Accept iff `score >= threshold`; the first point uses `+∞`.
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    /// Highest TAR among operating points with `FAR ≤ far`.
    pub fn tar_at(&self, far: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.far <= far)
            .map(|p| p.tar)
            .fold(0.0, f64::max)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("threshold,far,tar\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.tar);
        }
        out
    }
}

/// ROC over every distinct score threshold plus TAR at each requested FAR.
pub fn roc_and_tar(
    scores: &[f64],
    same: &[bool],
    far_list: &[f64],
) -> Result<(RocCurve, Vec<f64>)> {
    if scores.len() != same.len() {
        return Err(Error::dim("scores vs labels", scores.len(), same.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("pair scores".into()));
    }
    if let Some(f) = far_list.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("FAR {f} outside [0, 1]")));
    }
    let n_pos = same.iter().filter(|&&g| g).count();
    let n_neg = same.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tar: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let v = scores[order[k]];
        while k < order.len() && scores[order[k]] == v {
            if same[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: v,
            far: fp as f64 / n_neg as f64,
            tar: tp as f64 / n_pos as f64,
        });
    }
    let curve = RocCurve { points };
    let tars = far_list.iter().map(|&f| curve.tar_at(f)).collect();
    Ok((curve, tars))
}

/// Biased multi-kernel MMD² between two embedding sets.
pub fn discrepancy_report(
    embeddings_s: &Matrix,
    embeddings_t: &Matrix,
    spec: &KernelSpec,
) -> Result<f64> {
    if embeddings_s.is_empty() || embeddings_t.is_empty() {
        return Err(Error::Empty("embedding set".into()));
    }
    mmd2_biased(embeddings_s, embeddings_t, spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Matrix,
    pub retained_variance: f64,
    pub eigenvalues: Vec<f64>,
}

impl Projection {
    pub fn to_csv_string(&self, ids: &[u64]) -> String {
        let mut out = String::from("id,pc1,pc2\n");
        for (i, r) in self.coords.row_iter().enumerate() {
            let _ = writeln!(out, "{},{:.12e},{:.12e}", ids[i], r[0], r[1]);
        }
        out
    }
}

/// Eigenvalues in descending order with matching unit eigenvectors.
fn symmetric_eigen(cov: nalgebra::DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

/// Projection of the centered data onto its top two principal components.
/// Component signs are fixed so the largest-magnitude loading is positive.
pub fn projection_2d(embeddings: &Matrix) -> Result<Projection> {
    let (n, d) = embeddings.shape();
    if n < 2 {
        return Err(Error::InsufficientPairs {
            kind: "projection sample",
            needed: 2,
            found: n,
        });
    }
    let mut mean = vec![0.0; d];
    for r in embeddings.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, d, |i, j| embeddings.get(i, j) - mean[j]);
    let cov = centered.transpose().matmul(&centered)?;
    let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| cov.get(i, j) / (n - 1) as f64);
    let (values, mut vectors) = symmetric_eigen(cov);
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    for vec in vectors.iter_mut() {
        let lead = vec
            .iter()
            .copied()
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let total: f64 = values.iter().sum();
    let kept: f64 = values.iter().take(2).sum();
    let retained_variance = if total > 0.0 { kept / total } else { 1.0 };
    let coords = Matrix::from_fn(n, 2, |i, c| {
        vectors.get(c).map_or(0.0, |v| {
            centered.row(i).iter().zip(v).map(|(x, w)| x * w).sum()
        })
    });
    Ok(Projection {
        coords,
        retained_variance,
        eigenvalues: values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n_pairs: usize,
    pub n_genuine: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub fold_thresholds: Vec<f64>,
    pub best_threshold: f64,
    pub best_threshold_accuracy: f64,
    pub tar_at_far: Vec<TarAtFar>,
    /// Biased MMD² between source and target embeddings, when a source set
    /// was supplied.
    pub mmd_discrepancy: Option<f64>,
    pub retained_variance: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Everything [`VerificationReport`] holds plus the ROC curve and projection
/// for export.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: VerificationReport,
    pub roc: RocCurve,
    pub projection: Projection,
}

/// Scores `pairs` on `target` under `model` and assembles the report. With a
/// source dataset the MMD discrepancy uses a median-heuristic kernel over the
/// two embedding sets.
pub fn evaluate(
    model: &ModelState,
    target: &Dataset,
    pairs: &PairList,
    source: Option<&Dataset>,
    far_list: &[f64],
    bandwidth_scales: &[f64],
    config_hash: &str,
) -> Result<Evaluation> {
    let emb_t = embed(model, target)?;
    let scores = score_pairs(&emb_t, pairs)?;
    let same = pairs.same_flags();
    let folds = tenfold_accuracy(&scores, &same)?;
    let (best_t, best_acc) = best_threshold(&scores, &same)?;
    let (roc, tars) = roc_and_tar(&scores, &same, far_list)?;
    let mmd_discrepancy = match source {
        Some(s) => {
            let emb_s = embed(model, s)?;
            let spec = KernelSpec::from_median_heuristic(&emb_s, &emb_t, bandwidth_scales)?;
            Some(discrepancy_report(&emb_s, &emb_t, &spec)?)
        }
        None => None,
    };
    let projection = projection_2d(&emb_t)?;
    let report = VerificationReport {
        n_pairs: pairs.len(),
        n_genuine: pairs.genuine_count(),
        accuracy_mean: folds.mean,
        accuracy_std: folds.std,
        fold_thresholds: folds.thresholds,
        best_threshold: best_t,
        best_threshold_accuracy: best_acc,
        tar_at_far: far_list
            .iter()
            .zip(tars)
            .map(|(&far, tar)| TarAtFar { far, tar })
            .collect(),
        mmd_discrepancy,
        retained_variance: projection.retained_variance,
        seed: model.seed(),
        config_hash: config_hash.to_string(),
    };
    Ok(Evaluation {
        report,
        roc,
        projection,
    })
}

/// Mean 10-fold verification accuracy of `model` on `pairs` over `target`.
pub fn verification_accuracy(
    model: &ModelState,
    target: &Dataset,
    pairs: &PairList,
) -> Result<f64> {
    let scores = score_pairs(&embed(model, target)?, pairs)?;
    Ok(tenfold_accuracy(&scores, &pairs.same_flags())?.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_and_orthogonal_scores() {
        let e = m(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 3.0]]);
        let pl = PairList::new(
            vec![
                Pair {
                    a: 0,
                    b: 1,
                    same: true,
                },
                Pair {
                    a: 0,
                    b: 2,
                    same: false,
                },
            ],
            Provenance::File,
            3,
        )
        .unwrap();
        assert_eq!(score_pairs(&e, &pl).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let e = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let pl = PairList::new(
            vec![Pair {
                a: 0,
                b: 1,
                same: true,
            }],
            Provenance::File,
            2,
        )
        .unwrap();
        assert!(matches!(
            score_pairs(&e, &pl),
            Err(Error::DegenerateFeature { row: 0 })
        ));
    }

    #[test]
    fn pair_list_rejects_duplicates() {
        let dup = vec![
            Pair {
                a: 0,
                b: 1,
                same: true,
            },
            Pair {
                a: 1,
                b: 0,
                same: true,
            },
        ];
        assert!(PairList::new(dup, Provenance::File, 2).is_err());
        assert!(PairList::new(
            vec![Pair {
                a: 0,
                b: 5,
                same: true
            }],
            Provenance::File,
            2
        )
        .is_err());
    }

    #[test]
    fn difficult_positive_is_argmin() {
        let unit = |c: f64| [c, (1.0 - c * c).sqrt()];
        let e = m(&[
            &[1.0, 0.0],
            &unit(0.9),
            &[1.0, 0.0],
            &unit(0.5),
            &[1.0, 0.0],
            &unit(0.7),
        ]);
        let cands = PairList::new(
            vec![
                Pair {
                    a: 0,
                    b: 1,
                    same: true,
                },
                Pair {
                    a: 2,
                    b: 3,
                    same: true,
                },
                Pair {
                    a: 4,
                    b: 5,
                    same: true,
                },
            ],
            Provenance::File,
            6,
        )
        .unwrap();
        let sel = select_difficult_from(&e, &cands, 1, 0).unwrap();
        assert_eq!(
            sel.pairs(),
            &[Pair {
                a: 2,
                b: 3,
                same: true
            }]
        );
    }

    #[test]
    fn select_everything_is_identity() {
        let e = m(&[&[1.0, 0.1], &[0.3, 1.0], &[0.5, 0.5], &[1.0, -1.0]]);
        let labels = [0, 0, 1, 1];
        let all = all_pairs(&labels);
        let g = all.genuine_count();
        let sel = select_difficult_pairs(&e, &labels, g, all.len() - g).unwrap();
        assert_eq!(sel.pairs(), all.pairs());
        assert!(matches!(
            select_difficult_pairs(&e, &labels, g + 1, 0),
            Err(Error::InsufficientPairs { .. })
        ));
    }

    #[test]
    fn tenfold_extremes() {
        let scores: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let same: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let mut sep_s = scores.clone();
        for (s, g) in sep_s.iter_mut().zip(&same) {
            if *g {
                *s += 100.0;
            }
        }
        assert_eq!(tenfold_accuracy(&sep_s, &same).unwrap().mean, 1.0);

        let same: Vec<bool> = (0..40).map(|i| i % 4 != 0).collect();
        let flat = vec![0.3; 40];
        let r = tenfold_accuracy(&flat, &same).unwrap();
        assert!((r.mean - 0.75).abs() < 1e-12);
        assert!(tenfold_accuracy(&flat[..9], &same[..9]).is_err());
    }

    #[test]
    fn roc_spec_example() {
        let scores = [0.9, 0.8, 0.2, 0.7, 0.1];
        let same = [true, true, true, false, false];
        let (roc, tars) = roc_and_tar(&scores, &same, &[0.0, 0.5]).unwrap();
        let p = roc.points();
        assert_eq!((p[0].far, p[0].tar), (0.0, 0.0));
        assert_eq!((p.last().unwrap().far, p.last().unwrap().tar), (1.0, 1.0));
        assert!((tars[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(tars[1], 1.0);
    }

    #[test]
    fn roc_degenerate_and_separated() {
        let (roc, _) = roc_and_tar(&[0.5; 4], &[true, false, true, false], &[]).unwrap();
        assert_eq!(roc.points().len(), 2);
        let (_, t) = roc_and_tar(&[0.9, 0.8, 0.1], &[true, true, false], &[0.0]).unwrap();
        assert_eq!(t, vec![1.0]);
        assert!(matches!(
            roc_and_tar(&[0.1], &[true], &[]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn projection_of_planar_and_line_data() {
        let e = m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5], &[-2.0, 1.0]]);
        assert!((projection_2d(&e).unwrap().retained_variance - 1.0).abs() < 1e-12);
        let line = m(&[
            &[1.0, 2.0, 3.0],
            &[2.0, 4.0, 6.0],
            &[-1.0, -2.0, -3.0],
            &[0.5, 1.0, 1.5],
        ]);
        let p = projection_2d(&line).unwrap();
        let total: f64 = p.eigenvalues.iter().sum();
        assert!((p.eigenvalues[0] / total - 1.0).abs() < 1e-9);
        assert!(projection_2d(&m(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn pairs_csv_round_trip() {
        let data = Dataset::new(
            vec![10, 20, 30],
            m(&[&[1.0], &[2.0], &[3.0]]),
            None,
            crate::dataio::Domain::Target,
        )
        .unwrap();
        let pl = all_pairs(&[0, 0, 1]);
        let text = pl.to_csv_string(data.ids());
        assert!(text.starts_with("id_a,id_b,same\n10,20,1\n"));
        let back = PairList::from_csv_str(&text, &data).unwrap();
        assert_eq!(back.pairs(), pl.pairs());
        assert!(PairList::from_csv_str("id_a,id_b,same\n10,99,1\n", &data).is_err());
    }

    #[test]
    fn discrepancy_of_identical_sets_is_zero() {
        let e = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let spec = KernelSpec::single(1.0).unwrap();
        assert_eq!(discrepancy_report(&e, &e, &spec).unwrap(), 0.0);
    }
}
