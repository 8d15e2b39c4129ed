//! Per-subject connectivity inputs: SBM loadings, FNC matrices, k-NN
//! sparsification and the on-disk cohort format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three regression targets carried by every subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Fluid,
    Crystallized,
    Total,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Fluid, Target::Crystallized, Target::Total];

    pub fn name(self) -> &'static str {
        match self {
            Target::Fluid => "fluid",
            Target::Crystallized => "crystallized",
            Target::Total => "total",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fluid" => Ok(Target::Fluid),
            "crystallized" => Ok(Target::Crystallized),
            "total" => Ok(Target::Total),
            other => Err(Error::Config(format!(
                "unknown target {other:?} (expected fluid, crystallized or total)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Structural,
    Functional,
}

/// One subject's row of the group SBM loading matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmLoadings {
    pub subject_id: String,
    pub values: Vec<f64>,
}

impl SbmLoadings {
    pub fn new(subject_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "subject {subject_id}: sbm loading at index {idx} is not finite"
            )));
        }
        Ok(Self { subject_id, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Dense symmetric η×η connectivity with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    n: usize,
    values: Vec<f64>,
    modality: Modality,
}

impl ConnectivityMatrix {
    /// Validates a row-major matrix. Symmetry and the zero diagonal must hold exactly.
    pub fn new(n: usize, values: Vec<f64>, modality: Modality) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Validation(format!(
                "connectivity matrix has {} entries, expected {}x{}",
                values.len(),
                n,
                n
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "connectivity entry ({i},{j}) is not finite"
                    )));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Validation(format!(
                        "connectivity diagonal ({i},{i}) is {v}, expected 0"
                    )));
                }
                if j > i && v != values[j * n + i] {
                    return Err(Error::Validation(format!(
                        "connectivity matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { n, values, modality })
    }

    /// Builds a matrix from the strict upper triangle of `f`, mirroring it and
    /// zeroing the diagonal.
    pub fn from_upper(n: usize, modality: Modality, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self::new(n, values, modality)
    }

    pub fn zeros(n: usize, modality: Modality) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
            modality,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Relabels nodes so that new node `perm[i]` is old node `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[perm[i] * n + perm[j]] = self.values[i * n + j];
            }
        }
        Self {
            n,
            values,
            modality: self.modality,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEdge {
    /// Always `i < j`.
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected k-NN edge set, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEdgeSet {
    pub node_count: usize,
    pub edges: Vec<SparseEdge>,
}

impl SparseEdgeSet {
    /// Dense 0/1 adjacency.
    pub fn binary_adjacency(&self) -> Vec<Vec<bool>> {
        let mut adj = vec![vec![false; self.node_count]; self.node_count];
        for e in &self.edges {
            adj[e.i][e.j] = true;
            adj[e.j][e.i] = true;
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for e in &self.edges {
            deg[e.i] += 1;
            deg[e.j] += 1;
        }
        deg
    }
}

/// A validated subject: SBM loadings, dense FNC and all three target scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub sbm: SbmLoadings,
    pub fnc: ConnectivityMatrix,
    pub targets: BTreeMap<Target, f64>,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        sbm: Vec<f64>,
        fnc: ConnectivityMatrix,
        targets: BTreeMap<Target, f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let sbm = SbmLoadings::new(subject_id.clone(), sbm)?;
        if fnc.modality() != Modality::Functional {
            return Err(Error::Validation(format!(
                "subject {subject_id}: fnc matrix must be functional"
            )));
        }
        if sbm.len() != fnc.size() {
            return Err(Error::Validation(format!(
                "subject {subject_id}: sbm length {} does not match fnc size {}",
                sbm.len(),
                fnc.size()
            )));
        }
        for t in Target::ALL {
            match targets.get(&t) {
                None => {
                    return Err(Error::Validation(format!(
                        "subject {subject_id}: missing target {t}"
                    )))
                }
                Some(v) if !v.is_finite() => {
                    return Err(Error::Validation(format!(
                        "subject {subject_id}: target {t} is not finite"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            subject_id,
            sbm,
            fnc,
            targets,
        })
    }

    pub fn node_count(&self) -> usize {
        self.fnc.size()
    }

    pub fn target(&self, t: Target) -> f64 {
        self.targets[&t]
    }
}

/// Outer product of the loading vector with itself, diagonal zeroed.
pub fn sbm_subject_matrix(loadings: &SbmLoadings) -> Result<ConnectivityMatrix> {
    let v = &loadings.values;
    if v.len() < 2 {
        return Err(Error::Validation(format!(
            "subject {}: need at least 2 sbm loadings, got {}",
            loadings.subject_id,
            v.len()
        )));
    }
    if let Some(idx) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Validation(format!(
            "subject {}: sbm loading at index {idx} is not finite",
            loadings.subject_id
        )));
    }
    ConnectivityMatrix::from_upper(v.len(), Modality::Structural, |i, j| v[i] * v[j])
}

/// Keeps each node's `k` strongest (by |w|) nonzero neighbours and
/// symmetrises by union. Ties go to the smaller neighbour index.
pub fn knn_sparsify(w: &ConnectivityMatrix, k: usize) -> Result<SparseEdgeSet> {
    let n = w.size();
    if k == 0 || k + 1 > n {
        return Err(Error::Config(format!("k = {k} out of range 1..={}", n.saturating_sub(1))));
    }
    let mut keep = vec![vec![false; n]; n];
    let mut cand: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i && w.get(i, j) != 0.0));
        cand.sort_by(|&a, &b| {
            w.get(i, b)
                .abs()
                .total_cmp(&w.get(i, a).abs())
                .then(a.cmp(&b))
        });
        for &j in cand.iter().take(k) {
            keep[i.min(j)][i.max(j)] = true;
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if keep[i][j] {
                edges.push(SparseEdge {
                    i,
                    j,
                    weight: w.get(i, j),
                });
            }
        }
    }
    Ok(SparseEdgeSet { node_count: n, edges })
}

// ---------------------------------------------------------------------------
// Cohort directory format

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    eta: Option<usize>,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    fnc: String,
    sbm: String,
    targets: BTreeMap<String, f64>,
}

fn parse_row(line: &str, what: &str) -> Result<Vec<f64>> {
    line.split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>().map_err(|_| Error::Parse {
                what: what.to_string(),
                msg: format!("cannot parse {tok:?} as a number"),
            })
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a cohort directory. η comes from the first subject and is enforced
/// on every later one.
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_str(&read_text(&manifest_path)?).map_err(|e| Error::Parse {
            what: manifest_path.display().to_string(),
            msg: e.to_string(),
        })?;
    if manifest.subjects.is_empty() {
        return Err(Error::Validation("empty cohort".into()));
    }

    let mut eta = manifest.eta;
    let mut records = Vec::with_capacity(manifest.subjects.len());
    for s in manifest.subjects {
        let what = |field: &str| format!("subject {} {field}", s.id);

        let sbm_text = read_text(&dir.join(&s.sbm))?;
        let sbm_line = sbm_text.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| {
            Error::Parse {
                what: what("sbm"),
                msg: "file is empty".into(),
            }
        })?;
        let sbm = parse_row(sbm_line, &what("sbm"))?;
        let n = *eta.get_or_insert(sbm.len());
        if sbm.len() != n {
            return Err(Error::Validation(format!(
                "subject {}: sbm has length {}, expected {n}",
                s.id,
                sbm.len()
            )));
        }

        let fnc_text = read_text(&dir.join(&s.fnc))?;
        let rows: Vec<Vec<f64>> = fnc_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_row(l, &what("fnc")))
            .collect::<Result<_>>()?;
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Validation(format!(
                "subject {}: fnc must be {n}x{n}, got {} rows",
                s.id,
                rows.len()
            )));
        }
        let fnc = ConnectivityMatrix::new(n, rows.concat(), Modality::Functional)
            .map_err(|e| Error::Validation(format!("subject {}: {e}", s.id)))?;

        let mut targets = BTreeMap::new();
        for (name, v) in &s.targets {
            let t: Target = name
                .parse()
                .map_err(|e| Error::Validation(format!("subject {}: {e}", s.id)))?;
            targets.insert(t, *v);
        }
        records.push(SubjectRecord::new(s.id.clone(), sbm, fnc, targets)?);
    }
    Ok(records)
}

fn format_row(values: &[f64]) -> String {
    let mut s = String::new();
    for (idx, v) in values.iter().enumerate() {
        if idx > 0 {
            s.push(',');
        }
        // Display for f64 prints the shortest representation that round-trips.
        s.push_str(&v.to_string());
    }
    s
}

/// Writes records in the cohort directory format. Numbers round-trip exactly.
pub fn write_cohort(dir: impl AsRef<Path>, records: &[SubjectRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(records.len());
    for r in records {
        let fnc_name = format!("{}_fnc.csv", r.subject_id);
        let sbm_name = format!("{}_sbm.csv", r.subject_id);
        let n = r.node_count();
        let mut fnc_text = String::new();
        for i in 0..n {
            fnc_text.push_str(&format_row(r.fnc.row(i)));
            fnc_text.push('\n');
        }
        let path = dir.join(&fnc_name);
        fs::write(&path, fnc_text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(&sbm_name);
        fs::write(&path, format_row(&r.sbm.values) + "\n").map_err(|e| Error::io(&path, e))?;
        subjects.push(ManifestSubject {
            id: r.subject_id.clone(),
            fnc: fnc_name,
            sbm: sbm_name,
            targets: r.targets.iter().map(|(t, v)| (t.name().to_string(), *v)).collect(),
        });
    }
    let manifest = Manifest {
        eta: records.first().map(|r| r.node_count()),
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loadings(v: &[f64]) -> SbmLoadings {
        SbmLoadings::new("s", v.to_vec()).unwrap()
    }

    #[test]
    fn sbm_outer_product_examples() {
        let m = sbm_subject_matrix(&loadings(&[1.0, 0.0])).unwrap();
        assert_eq!(m.as_slice(), &[0.0, 0.0, 0.0, 0.0]);

        let m = sbm_subject_matrix(&loadings(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(0, 2), 3.0);
        assert_eq!(m.get(1, 2), 6.0);
        assert_eq!(m.get(2, 1), 6.0);
        assert!((0..3).all(|i| m.get(i, i) == 0.0));

        let m = sbm_subject_matrix(&loadings(&[0.0; 53])).unwrap();
        assert_eq!(m.size(), 53);
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sbm_rejects_non_finite() {
        let bad = SbmLoadings {
            subject_id: "s".into(),
            values: vec![1.0, f64::NAN, 2.0],
        };
        let err = sbm_subject_matrix(&bad).unwrap_err().to_string();
        assert!(err.contains("index 1"), "{err}");
        assert!(SbmLoadings::new("s", vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn connectivity_invariants_enforced() {
        assert!(ConnectivityMatrix::new(2, vec![0.0, 1.0, 2.0, 0.0], Modality::Functional).is_err());
        assert!(ConnectivityMatrix::new(2, vec![1.0, 1.0, 1.0, 0.0], Modality::Functional).is_err());
        assert!(ConnectivityMatrix::new(2, vec![0.0; 3], Modality::Functional).is_err());
        assert!(ConnectivityMatrix::new(2, vec![0.0, 0.5, 0.5, 0.0], Modality::Functional).is_ok());
    }

    #[test]
    fn knn_saturated_keeps_all_pairs() {
        let w = ConnectivityMatrix::from_upper(6, Modality::Functional, |i, j| (i + j) as f64 + 0.5).unwrap();
        let e = knn_sparsify(&w, 5).unwrap();
        assert_eq!(e.edges.len(), 15);
    }

    #[test]
    fn knn_toy_row_selection() {
        // row 0 = {0.9, -0.8, 0.1}; other pairs weak
        let w = ConnectivityMatrix::from_upper(4, Modality::Functional, |i, j| match (i, j) {
            (0, 1) => 0.9,
            (0, 2) => -0.8,
            (0, 3) => 0.1,
            (1, 2) => 0.05,
            (1, 3) => 0.3,
            (2, 3) => 0.2,
            _ => unreachable!(),
        })
        .unwrap();
        let e = knn_sparsify(&w, 2).unwrap();
        let pairs: Vec<(usize, usize)> = e.edges.iter().map(|e| (e.i, e.j)).collect();
        // node0 -> {1,2}; node1 -> {0,3}; node2 -> {0,3}; node3 -> {1,2}
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(e.edges[1].weight, -0.8);
    }

    #[test]
    fn knn_ties_prefer_smaller_index() {
        let w = ConnectivityMatrix::from_upper(4, Modality::Functional, |_, _| 1.0).unwrap();
        let e = knn_sparsify(&w, 1).unwrap();
        // 0->1, 1->0, 2->0, 3->0
        let pairs: Vec<(usize, usize)> = e.edges.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn knn_k_out_of_range() {
        let w = ConnectivityMatrix::zeros(4, Modality::Functional);
        assert!(matches!(knn_sparsify(&w, 0), Err(Error::Config(_))));
        assert!(matches!(knn_sparsify(&w, 4), Err(Error::Config(_))));
        assert!(knn_sparsify(&w, 3).unwrap().edges.is_empty());
    }

    #[test]
    fn permuted_matrix_relabels() {
        let w = ConnectivityMatrix::from_upper(3, Modality::Functional, |i, j| (10 * i + j) as f64).unwrap();
        let p = w.permuted(&[2, 0, 1]);
        assert_eq!(p.get(2, 0), w.get(0, 1));
        assert_eq!(p.get(0, 1), w.get(1, 2));
    }
}
