//! Pseudo-labels from a thresholded cosine-similarity graph.
//!
//! Two target samples are linked when their cosine similarity is strictly
//! greater than `lambda`. Connected components with at least `min_size`
//! members become clusters; every other sample is abandoned.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    pub lambda: f64,
    pub min_size: usize,
}

impl ClusterConfig {
    pub fn new(lambda: f64, min_size: usize) -> Result<Self> {
        let cfg = Self { lambda, min_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > -1.0 && self.lambda < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} outside (-1, 1)",
                self.lambda
            )));
        }
        if self.min_size == 0 {
            return Err(Error::InvalidArgument("min_size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            min_size: 3,
        }
    }
}

/// Cluster assignment over a sample set; `None` marks an abandoned sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabeling {
    assignment: Vec<Option<usize>>,
    n_clusters: usize,
}

impl PseudoLabeling {
    pub fn from_assignment(assignment: Vec<Option<usize>>) -> Result<Self> {
        let n_clusters = assignment
            .iter()
            .flatten()
            .map(|&c| c + 1)
            .max()
            .unwrap_or(0);
        let mut seen = vec![false; n_clusters];
        for &c in assignment.iter().flatten() {
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("cluster ids are not dense".into()));
        }
        Ok(Self {
            assignment,
            n_clusters,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn label_of(&self, sample: usize) -> Option<usize> {
        self.assignment[sample]
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    /// Assigned sample indices in ascending order.
    pub fn assigned(&self) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i].is_some())
            .collect()
    }

    pub fn abandoned(&self) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i].is_none())
            .collect()
    }

    pub fn assigned_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    pub fn abandoned_count(&self) -> usize {
        self.n_samples() - self.assigned_count()
    }

    /// Members of each cluster, indexed by cluster id.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, c) in self.assignment.iter().enumerate() {
            if let Some(c) = c {
                out[*c].push(i);
            }
        }
        out
    }

    /// Writes `sample_index,cluster_id` rows; abandoned samples get `-1`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "sample_index,cluster_id")?;
        for (i, c) in self.assignment.iter().enumerate() {
            match c {
                Some(c) => writeln!(w, "{i},{c}")?,
                None => writeln!(w, "{i},-1")?,
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Parses the format written by [`PseudoLabeling::write_csv`]. Rows must
    /// list sample indices `0..n` in order.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "sample_index,cluster_id" => {}
            _ => {
                return Err(Error::Schema(
                    "expected header sample_index,cluster_id".into(),
                ))
            }
        }
        let mut assignment = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: no + 1,
                message,
            };
            let (idx, cid) = line
                .split_once(',')
                .ok_or_else(|| parse_err(format!("expected 2 columns in {line:?}")))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("{idx:?}: {e}")))?;
            if idx != assignment.len() {
                return Err(parse_err(format!("sample index {idx} out of sequence")));
            }
            let cid: i64 = cid
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("{cid:?}: {e}")))?;
            assignment.push(match cid {
                -1 => None,
                c if c >= 0 => Some(c as usize),
                c => return Err(parse_err(format!("cluster id {c}"))),
            });
        }
        Self::from_assignment(assignment)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    /// Rand index against another labeling of the same samples. Abandoned
    /// samples count as singletons.
    pub fn rand_index(&self, other: &PseudoLabeling) -> Result<f64> {
        if self.n_samples() != other.n_samples() {
            return Err(Error::dim(
                "rand index samples",
                self.n_samples(),
                other.n_samples(),
            ));
        }
        Ok(rand_index(&self.partition_ids(), &other.partition_ids()))
    }

    fn partition_ids(&self) -> Vec<usize> {
        let mut next = self.n_clusters;
        self.assignment
            .iter()
            .map(|c| {
                c.unwrap_or_else(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }
}

/// Fraction of unordered sample pairs on which two partitions agree.
/// Returns 1 for fewer than two samples.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let pairs = |counts: &mut dyn Iterator<Item = u64>| {
        counts.map(|c| c * c.saturating_sub(1) / 2).sum::<u64>()
    };
    let mut joint = std::collections::HashMap::new();
    let mut ca = std::collections::HashMap::new();
    let mut cb = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0u64) += 1;
        *ca.entry(x).or_insert(0u64) += 1;
        *cb.entry(y).or_insert(0u64) += 1;
    }
    let total = (n as u64) * (n as u64 - 1) / 2;
    let both = pairs(&mut joint.values().copied());
    let same_a = pairs(&mut ca.values().copied());
    let same_b = pairs(&mut cb.values().copied());
    // agreements = pairs together in both + pairs apart in both
    let agree = total + 2 * both - same_a - same_b;
    agree as f64 / total as f64
}

/// Pairwise cosine similarities; exactly symmetric with a unit diagonal.
pub fn cosine_similarity_matrix(features: &Matrix) -> Result<Matrix> {
    let n = features.rows();
    let mut unit = Vec::with_capacity(features.len());
    for (i, r) in features.row_iter().enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::DegenerateFeature { row: i });
        }
        unit.extend(r.iter().map(|v| v / norm));
    }
    let d = features.cols();
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = unit[i * d..(i + 1) * d]
                .iter()
                .zip(&unit[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

/// Undirected edges `(i, j)` with `i < j` and `s(i, j) > lambda`.
pub fn build_graph(sims: &Matrix, lambda: f64) -> Result<Vec<(usize, usize)>> {
    let n = sims.rows();
    if sims.cols() != n {
        return Err(Error::dim(
            "similarity matrix",
            format!("{n}x{n}"),
            sims.shape_str(),
        ));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (sims.get(i, j), sims.get(j, i));
            if (a - b).abs() > 1e-12 {
                return Err(Error::Asymmetric(i, j));
            }
            if a > lambda {
                edges.push((i, j));
            }
        }
    }
    Ok(edges)
}

/// Disjoint sets with path compression and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Connected components, each sorted ascending, listed by smallest member.
pub fn connected_components(edges: &[(usize, usize)], n_nodes: usize) -> Result<Vec<Vec<usize>>> {
    let mut uf = UnionFind::new(n_nodes);
    for &(a, b) in edges {
        for endpoint in [a, b] {
            if endpoint >= n_nodes {
                return Err(Error::InvalidEndpoint {
                    endpoint,
                    nodes: n_nodes,
                });
            }
        }
        uf.union(a, b);
    }
    let mut slot_of_root = vec![usize::MAX; n_nodes];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n_nodes {
        let r = uf.find(i);
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot_of_root[r]].push(i);
    }
    Ok(comps)
}

/// Keeps components with at least `min_size` members as clusters. Ids go by
/// descending size, then ascending smallest member.
pub fn make_pseudolabels(components: &[Vec<usize>], config: &ClusterConfig) -> PseudoLabeling {
    let n = components
        .iter()
        .flatten()
        .map(|&i| i + 1)
        .max()
        .unwrap_or(0);
    let mut kept: Vec<&Vec<usize>> = components
        .iter()
        .filter(|c| c.len() >= config.min_size && !c.is_empty())
        .collect();
    kept.sort_by_key(|c| (std::cmp::Reverse(c.len()), c.iter().min().copied()));
    let mut assignment = vec![None; n];
    for (id, comp) in kept.iter().enumerate() {
        for &i in comp.iter() {
            assignment[i] = Some(id);
        }
    }
    PseudoLabeling {
        assignment,
        n_clusters: kept.len(),
    }
}

/// Similarity graph → components → size filter.
pub fn cluster_pipeline(features: &Matrix, config: &ClusterConfig) -> Result<PseudoLabeling> {
    config.validate()?;
    let sims = cosine_similarity_matrix(features)?;
    let edges = build_graph(&sims, config.lambda)?;
    let comps = connected_components(&edges, features.rows())?;
    Ok(make_pseudolabels(&comps, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sims3(s12: f64, s13: f64, s23: f64) -> Matrix {
        Matrix::from_rows(&[[1.0, s12, s13], [s12, 1.0, s23], [s13, s23, 1.0]]).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let s = cosine_similarity_matrix(&Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap())
            .unwrap();
        assert!((s.get(0, 1) - 1.0).abs() < 1e-15);
        let s = cosine_similarity_matrix(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert!(matches!(
            cosine_similarity_matrix(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()),
            Err(Error::DegenerateFeature { row: 1 })
        ));
    }

    #[test]
    fn graph_cases() {
        // nodes 1,2,3 of the example are indices 0,1,2 here
        let s = sims3(0.9, 0.1, 0.8);
        assert_eq!(build_graph(&s, 0.5).unwrap(), vec![(0, 1), (1, 2)]);
        assert!(build_graph(&s, 0.95).unwrap().is_empty());
        assert!(build_graph(&sims3(0.5, 0.5, 0.5), 0.5).unwrap().is_empty());
        let mut asym = s.clone();
        asym.set(0, 1, 0.3);
        assert!(matches!(
            build_graph(&asym, 0.5),
            Err(Error::Asymmetric(0, 1))
        ));
    }

    #[test]
    fn component_cases() {
        assert_eq!(
            connected_components(&[(0, 1), (1, 2)], 3).unwrap(),
            vec![vec![0, 1, 2]]
        );
        assert_eq!(connected_components(&[], 4).unwrap().len(), 4);
        assert!(matches!(
            connected_components(&[(0, 4)], 4),
            Err(Error::InvalidEndpoint {
                endpoint: 4,
                nodes: 4
            })
        ));
    }

    #[test]
    fn pseudolabel_cases() {
        let p = make_pseudolabels(&[vec![0, 1], vec![2]], &ClusterConfig::new(0.5, 2).unwrap());
        assert_eq!(p.n_clusters(), 1);
        assert_eq!(p.abandoned(), vec![2]);
        assert_eq!(p.label_of(0), Some(0));

        let p = make_pseudolabels(&[vec![0, 1], vec![2]], &ClusterConfig::new(0.5, 1).unwrap());
        assert_eq!(p.n_clusters(), 2);
        assert!(p.abandoned().is_empty());

        // a: 5 members, b: 3, c: 2, listed out of size order
        let comps = vec![vec![0, 1], vec![2, 3, 4], vec![5, 6, 7, 8, 9]];
        let p = make_pseudolabels(&comps, &ClusterConfig::new(0.5, 3).unwrap());
        assert_eq!(p.n_clusters(), 2);
        assert_eq!(p.label_of(5), Some(0));
        assert_eq!(p.label_of(2), Some(1));
        assert_eq!(p.abandoned(), vec![0, 1]);
    }

    #[test]
    fn equal_sizes_break_ties_by_smallest_member() {
        let comps = vec![vec![2], vec![3, 4], vec![0, 5], vec![1]];
        let p = make_pseudolabels(&comps, &ClusterConfig::new(0.0, 2).unwrap());
        assert_eq!(p.label_of(0), Some(0));
        assert_eq!(p.label_of(3), Some(1));
    }

    #[test]
    fn pipeline_extremes() {
        let f = Matrix::from_rows(&[[1.0, 0.1], [0.9, 0.3], [-0.2, 1.0], [0.5, -1.0]]).unwrap();
        let all = cluster_pipeline(&f, &ClusterConfig::new(-1.0 + 1e-9, 2).unwrap()).unwrap();
        assert_eq!(all.n_clusters(), 1);
        assert_eq!(all.assigned_count(), 4);
        let none = cluster_pipeline(&f, &ClusterConfig::new(1.0 - 1e-9, 2).unwrap()).unwrap();
        assert_eq!(none.n_clusters(), 0);
        assert_eq!(none.abandoned_count(), 4);
    }

    #[test]
    fn csv_marks_abandoned() {
        let p = PseudoLabeling::from_assignment(vec![Some(0), None, Some(0)]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sample_index,cluster_id\n0,0\n1,-1\n2,0\n"
        );
        assert!(PseudoLabeling::from_assignment(vec![Some(1)]).is_err());
    }

    #[test]
    fn rand_index_values() {
        assert_eq!(rand_index(&[0, 0, 1, 1], &[5, 5, 7, 7]), 1.0);
        // pairs: (01)(02)(03)(12)(13)(23); a together: 01, 23; b together: 01, 02, 12
        // agree on 01 (together), 03, 13 (apart) → 3/6
        assert!((rand_index(&[0, 0, 1, 1], &[0, 0, 0, 1]) - 0.5).abs() < 1e-15);
        let p = PseudoLabeling::from_assignment(vec![Some(0), Some(0), None, None]).unwrap();
        assert_eq!(p.rand_index(&p).unwrap(), 1.0);
    }
}
