//! Datasets, CSV persistence and the synthetic shifted-domain benchmark.
//!
//! CSV schema: header `id,label,domain,f0,…,f{d-1}`, one row per sample.
//! `label = -1` marks an unlabeled row; `domain` is `source` or `target`.
//! Features are written with 17 significant digits so a save/load round trip
//! is exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, SeedRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

/// Features with optional class labels and a domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    ids: Vec<u64>,
    features: Matrix,
    labels: Option<Vec<usize>>,
    domain: Domain,
}

impl Dataset {
    pub fn new(
        ids: Vec<u64>,
        features: Matrix,
        labels: Option<Vec<usize>>,
        domain: Domain,
    ) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(Error::dim("dataset ids", features.rows(), ids.len()));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::dim("dataset labels", features.rows(), l.len()));
            }
        }
        Ok(Self {
            ids,
            features,
            labels,
            domain,
        })
    }

    /// Dataset with ids `0..n`.
    pub fn with_sequential_ids(
        features: Matrix,
        labels: Option<Vec<usize>>,
        domain: Domain,
    ) -> Result<Self> {
        let ids = (0..features.rows() as u64).collect();
        Self::new(ids, features, labels, domain)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Same features without labels.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Row index of each id.
    pub fn index_of_id(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Distinct labels sorted ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.labels.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("id,label,domain");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let label = self.labels.as_ref().map_or(-1, |l| l[i] as i64);
            let _ = write!(out, "{},{},{}", self.ids[i], label, self.domain.as_str());
            for v in self.features.row(i) {
                let _ = write!(out, ",{}", format_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    /// Parses the CSV schema. A header-only file yields an empty target
    /// dataset with the header's feature dimension.
    pub fn from_csv_str(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Schema("missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["id", "label", "domain"] {
            return Err(Error::Schema(format!(
                "header must start with id,label,domain: {header}"
            )));
        }
        for (j, c) in cols[3..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::Schema(format!("feature column {j} named {c}")));
            }
        }
        let dim = cols.len() - 3;

        let mut ids = Vec::new();
        let mut raw_labels = Vec::new();
        let mut data = Vec::new();
        let mut domain: Option<Domain> = None;
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Schema(format!(
                    "line {line_no}: expected {} columns, found {}",
                    cols.len(),
                    fields.len()
                )));
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            ids.push(
                fields[0]
                    .parse::<u64>()
                    .map_err(|e| parse_err(format!("id {:?}: {e}", fields[0])))?,
            );
            raw_labels.push(
                fields[1]
                    .parse::<i64>()
                    .map_err(|e| parse_err(format!("label {:?}: {e}", fields[1])))?,
            );
            let d = Domain::parse(fields[2])
                .ok_or_else(|| parse_err(format!("domain {:?}", fields[2])))?;
            match domain {
                None => domain = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Schema(format!(
                        "line {line_no}: mixed domains in one file"
                    )))
                }
                _ => {}
            }
            for f in &fields[3..] {
                let v: f64 = f
                    .parse()
                    .map_err(|e| parse_err(format!("feature {f:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite feature {f:?}")));
                }
                data.push(v);
            }
        }

        let labels = if raw_labels.iter().all(|&l| l == -1) {
            None
        } else if raw_labels.iter().all(|&l| l >= 0) {
            Some(raw_labels.iter().map(|&l| l as usize).collect())
        } else {
            return Err(Error::Schema("labels must be all present or all -1".into()));
        };
        let features = Matrix::new(ids.len(), dim, data)?;
        Dataset::new(ids, features, labels, domain.unwrap_or(Domain::Target))
    }
}

/// Scientific notation with 17 significant digits; parses back to the same bits.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parameters of the synthetic two-domain benchmark.
///
/// Class centers for both domains come from one generator: `2·classes`
/// centers placed in equal angular slots on a ring of radius `spread` in the
/// first two coordinates (randomly offset and jittered), with source and
/// target classes alternating around the ring. Further coordinates are drawn
/// from `N(0, (spread/2)²)`. Samples are `center + noise·N(0, I)`. The target
/// domain is then moved by rotating the first two coordinates and adding
/// `translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Radius of the ring of class centers.
    pub spread: f64,
    /// Random angular offset of each center, as a fraction of the slot width.
    pub angular_jitter: f64,
    /// Random relative deviation of each center's radius.
    pub radial_jitter: f64,
    pub noise: f64,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            per_class: 60,
            dim: 2,
            spread: 3.0,
            angular_jitter: 0.3,
            radial_jitter: 0.1,
            noise: 0.25,
            rotation_deg: 40.0,
            translation: vec![2.0, 0.5],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 {
            return bad(format!("classes = {} (need >= 2)", self.classes));
        }
        if self.per_class == 0 || self.dim == 0 {
            return bad("per_class and dim must be positive".into());
        }
        if !(self.noise > 0.0) || !(self.spread > 0.0) {
            return bad("noise and spread must be positive".into());
        }
        if !(0.0..1.0).contains(&self.angular_jitter) || !(0.0..1.0).contains(&self.radial_jitter) {
            return bad("jitter fractions must lie in [0, 1)".into());
        }
        if self.translation.len() != self.dim {
            return bad(format!(
                "translation has {} entries for dim {}",
                self.translation.len(),
                self.dim
            ));
        }
        Ok(())
    }

    /// Same spec with the domain shift removed.
    pub fn without_shift(&self) -> Self {
        Self {
            rotation_deg: 0.0,
            translation: vec![0.0; self.dim],
            ..self.clone()
        }
    }
}

/// Output of [`generate_domains`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomains {
    pub source: Dataset,
    pub target: Dataset,
    /// Ground-truth target classes, hidden from training.
    pub target_labels: Vec<usize>,
}

/// Generates a labeled source and an unlabeled, shifted target whose class
/// ids (`classes..2·classes`) are disjoint from the source's (`0..classes`).
pub fn generate_domains(spec: &SyntheticSpec) -> Result<SyntheticDomains> {
    spec.validate()?;
    let mut rng = SeedRng::new(spec.seed);
    let total = 2 * spec.classes;
    let slot = std::f64::consts::TAU / total as f64;
    let offset = rng.uniform() * std::f64::consts::TAU;
    let mut centers: Vec<Vec<f64>> = vec![Vec::new(); total];
    for k in 0..total {
        let angle = offset + slot * (k as f64 + spec.angular_jitter * (rng.uniform() - 0.5));
        let radius = spec.spread * (1.0 + spec.radial_jitter * (2.0 * rng.uniform() - 1.0));
        let mut c = vec![0.0; spec.dim];
        if spec.dim == 1 {
            c[0] = radius * angle.cos();
        } else {
            c[0] = radius * angle.cos();
            c[1] = radius * angle.sin();
        }
        for v in c.iter_mut().skip(2) {
            *v = rng.normal() * spec.spread / 2.0;
        }
        // even slots go to the source, odd slots to the target
        let class = if k % 2 == 0 {
            k / 2
        } else {
            spec.classes + k / 2
        };
        centers[class] = c;
    }

    let draw = |rng: &mut SeedRng, class_range: std::ops::Range<usize>| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in class_range {
            for _ in 0..spec.per_class {
                rows.push(
                    centers[class]
                        .iter()
                        .map(|c| c + spec.noise * rng.normal())
                        .collect::<Vec<f64>>(),
                );
                labels.push(class);
            }
        }
        (rows, labels)
    };
    let (src_rows, src_labels) = draw(&mut rng, 0..spec.classes);
    let (mut tgt_rows, tgt_labels) = draw(&mut rng, spec.classes..total);

    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    for r in &mut tgt_rows {
        if spec.dim >= 2 {
            let (x, y) = (r[0], r[1]);
            r[0] = cos * x - sin * y;
            r[1] = sin * x + cos * y;
        }
        for (v, t) in r.iter_mut().zip(&spec.translation) {
            *v += t;
        }
    }

    let n_src = src_rows.len() as u64;
    let source = Dataset::new(
        (0..n_src).collect(),
        Matrix::from_rows(&src_rows)?,
        Some(src_labels),
        Domain::Source,
    )?;
    let target = Dataset::new(
        (n_src..n_src + tgt_rows.len() as u64).collect(),
        Matrix::from_rows(&tgt_rows)?,
        None,
        Domain::Target,
    )?;
    Ok(SyntheticDomains {
        source,
        target,
        target_labels: tgt_labels,
    })
}

/// Writes `id,label` rows for hidden target labels.
pub fn labels_csv(ids: &[u64], labels: &[usize]) -> String {
    let mut out = String::from("id,label\n");
    for (id, l) in ids.iter().zip(labels) {
        let _ = writeln!(out, "{id},{l}");
    }
    out
}

/// Parses `id,label` rows, returning labels in the order of `ids`.
pub fn parse_labels_csv(text: &str, ids: &[u64]) -> Result<Vec<usize>> {
    let mut map = std::collections::HashMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse {
            line: idx + 1,
            message: m,
        };
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| err(format!("expected id,label: {line}")))?;
        let id: u64 = a.parse().map_err(|e| err(format!("id {a:?}: {e}")))?;
        let label: usize = b.parse().map_err(|e| err(format!("label {b:?}: {e}")))?;
        map.insert(id, label);
    }
    ids.iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::Schema(format!("no label for id {id}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let d = generate_domains(&SyntheticSpec {
            classes: 2,
            per_class: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for ds in [&d.source, &d.target] {
            let back = Dataset::from_csv_str(&ds.to_csv_string()).unwrap();
            assert_eq!(&back, ds);
        }
    }

    #[test]
    fn header_only_is_empty() {
        let d = Dataset::from_csv_str("id,label,domain,f0,f1\n").unwrap();
        assert!(d.is_empty());
        assert_eq!(d.dim(), 2);
    }

    #[test]
    fn non_numeric_feature_names_line() {
        let text = "id,label,domain,f0\n0,1,source,0.5\n1,0,source,abc\n";
        match Dataset::from_csv_str(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn column_count_mismatch_is_schema_error() {
        let text = "id,label,domain,f0\n0,1,source,0.5,0.7\n";
        assert!(matches!(Dataset::from_csv_str(text), Err(Error::Schema(_))));
        assert!(matches!(
            Dataset::from_csv_str("a,b\n"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let spec = SyntheticSpec::default();
        let a = generate_domains(&spec).unwrap();
        let b = generate_domains(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source.len(), 360);
        assert_eq!(a.target.len(), 360);
        assert!(a.target.labels().is_none());
        let src = a.source.classes();
        assert!(a.target_labels.iter().all(|l| !src.contains(l)));
    }

    #[test]
    fn degenerate_specs_rejected() {
        let bad = SyntheticSpec {
            classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_domains(&bad).is_err());
        let bad = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        assert!(generate_domains(&bad).is_err());
    }

    #[test]
    fn labels_csv_round_trip() {
        let text = labels_csv(&[10, 11], &[7, 8]);
        assert_eq!(parse_labels_csv(&text, &[11, 10]).unwrap(), vec![8, 7]);
    }
}
