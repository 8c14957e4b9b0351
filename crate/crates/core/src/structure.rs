//! Binary class-concept structures and the support-set algebra built on them.
//!
//! Rows of a [`StructureMatrix`] are class-dependent concepts, columns are
//! classes. A row/column with no edges is representable (thresholded
//! estimates can produce one) but rejected by [`StructureMatrix::validate`].

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StructureError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("structure invariant violated: {0}")]
    Invariant(String),
    #[error("scale error: {0}")]
    Scale(String),
    #[error("contract error: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawStructure", into = "RawStructure")]
pub struct StructureMatrix {
    n_a: usize,
    u: usize,
    rows: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct RawStructure {
    #[serde(rename = "n_A")]
    n_a: usize,
    u: usize,
    rows: Vec<Vec<u8>>,
}

impl TryFrom<RawStructure> for StructureMatrix {
    type Error = StructureError;

    fn try_from(raw: RawStructure) -> Result<Self, Self::Error> {
        let m = StructureMatrix::new(raw.rows)?;
        if m.n_a != raw.n_a || m.u != raw.u {
            return Err(StructureError::Dimension(format!(
                "declared {}x{}, rows give {}x{}",
                raw.n_a, raw.u, m.n_a, m.u
            )));
        }
        Ok(m)
    }
}

impl From<StructureMatrix> for RawStructure {
    fn from(m: StructureMatrix) -> Self {
        Self {
            n_a: m.n_a,
            u: m.u,
            rows: m.rows,
        }
    }
}

impl StructureMatrix {
    /// Rectangular binary matrix; zero rows/columns are allowed here.
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, StructureError> {
        let n_a = rows.len();
        let u = rows.first().map_or(0, Vec::len);
        if n_a == 0 || u == 0 {
            return Err(StructureError::Dimension("empty structure".into()));
        }
        if rows.iter().any(|r| r.len() != u) {
            return Err(StructureError::Dimension("ragged rows".into()));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(StructureError::Invariant("entries must be 0 or 1".into()));
        }
        Ok(Self { n_a, u, rows })
    }

    pub fn identity(n: usize) -> Self {
        let rows = (0..n).map(|i| (0..n).map(|j| u8::from(i == j)).collect()).collect();
        Self { n_a: n, u: n, rows }
    }

    pub fn ones(n_a: usize, u: usize) -> Self {
        Self {
            n_a,
            u,
            rows: vec![vec![1; u]; n_a],
        }
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.rows[i][j] != 0
    }

    /// Concepts attached to class `j` (the index set `A_j`).
    pub fn concepts_of_class(&self, j: usize) -> BTreeSet<usize> {
        (0..self.n_a).filter(|&i| self.get(i, j)).collect()
    }

    pub fn zero_rows(&self) -> Vec<usize> {
        (0..self.n_a).filter(|&i| self.rows[i].iter().all(|&v| v == 0)).collect()
    }

    pub fn zero_cols(&self) -> Vec<usize> {
        (0..self.u)
            .filter(|&j| self.rows.iter().all(|r| r[j] == 0))
            .collect()
    }

    /// Rejects zero rows. A concept without classes would be class-independent.
    pub fn validate_rows(&self) -> Result<(), StructureError> {
        let zr = self.zero_rows();
        if !zr.is_empty() {
            return Err(StructureError::Invariant(format!("zero rows {zr:?}")));
        }
        Ok(())
    }

    /// Rejects zero rows and zero columns.
    pub fn validate(&self) -> Result<(), StructureError> {
        self.validate_rows()?;
        let zc = self.zero_cols();
        if !zc.is_empty() {
            return Err(StructureError::Invariant(format!("zero columns {zc:?}")));
        }
        Ok(())
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self {
            n_a: self.n_a,
            u: self.u,
            rows: perm.iter().map(|&k| self.rows[k].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("structure serializes")
    }
}

impl fmt::Display for StructureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(u8::to_string).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Per-concept outcome of the structural diversity check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptDiversity {
    /// `J = {class} ∪ absent`; the concept is the only row of `M` that is all
    /// zero on `absent`.
    Witness { class: usize, absent: Vec<usize> },
    /// No witness exists. `blocking_rows` are the other concepts that are
    /// also all zero on the concept's full zero set (empty when the concept
    /// has no zero entry at all).
    Blocked { blocking_rows: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub holds: bool,
    pub concepts: Vec<ConceptDiversity>,
}

impl DiversityReport {
    pub fn failing_rows(&self) -> Vec<usize> {
        self.concepts
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, ConceptDiversity::Blocked { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Structural diversity via the maximal-set reduction: the candidate
/// `S = {k : M_ik = 0}` dominates every subset, since shrinking `S` can only
/// remove nonzero entries from the other rows.
///
/// Zero columns are tolerated: a single concept cannot have a witness
/// without one.
pub fn check_structural_diversity(m: &StructureMatrix) -> Result<DiversityReport, StructureError> {
    m.validate_rows()?;
    let mut concepts = Vec::with_capacity(m.n_a());
    for i in 0..m.n_a() {
        let zeros: Vec<usize> = (0..m.u()).filter(|&k| !m.get(i, k)).collect();
        let present = (0..m.u()).find(|&k| m.get(i, k));
        let blocking: Vec<usize> = if zeros.is_empty() {
            Vec::new()
        } else {
            (0..m.n_a())
                .filter(|&r| r != i && zeros.iter().all(|&k| !m.get(r, k)))
                .collect()
        };
        match present {
            Some(j) if !zeros.is_empty() && blocking.is_empty() => {
                concepts.push(ConceptDiversity::Witness { class: j, absent: zeros })
            }
            _ => concepts.push(ConceptDiversity::Blocked { blocking_rows: blocking }),
        }
    }
    let holds = concepts
        .iter()
        .all(|c| matches!(c, ConceptDiversity::Witness { .. }));
    Ok(DiversityReport { holds, concepts })
}

/// Largest class count the exhaustive diversity check accepts.
pub const BRUTE_FORCE_MAX_CLASSES: usize = 12;

/// Literal subset enumeration of the diversity condition. Exponential in the
/// class count.
pub fn brute_force_diversity(m: &StructureMatrix) -> Result<DiversityReport, StructureError> {
    m.validate_rows()?;
    let u = m.u();
    if u > BRUTE_FORCE_MAX_CLASSES {
        return Err(StructureError::Scale(format!(
            "{u} classes exceed the exhaustive limit of {BRUTE_FORCE_MAX_CLASSES}"
        )));
    }
    let mut concepts = Vec::with_capacity(m.n_a());
    for i in 0..m.n_a() {
        let mut found = None;
        'search: for mask in 1u32..(1u32 << u) {
            if mask.count_ones() < 2 {
                continue;
            }
            let members: Vec<usize> = (0..u).filter(|k| mask & (1 << k) != 0).collect();
            for &j in &members {
                let rest: Vec<usize> = members.iter().copied().filter(|&k| k != j).collect();
                if !m.get(i, j) || rest.iter().any(|&k| m.get(i, k)) {
                    continue;
                }
                let zero_rows: Vec<usize> = (0..m.n_a())
                    .filter(|&r| rest.iter().all(|&k| !m.get(r, k)))
                    .collect();
                if zero_rows == [i] {
                    found = Some((j, rest));
                    break 'search;
                }
            }
        }
        concepts.push(match found {
            Some((class, absent)) => ConceptDiversity::Witness { class, absent },
            None => ConceptDiversity::Blocked {
                blocking_rows: Vec::new(),
            },
        });
    }
    let holds = concepts
        .iter()
        .all(|c| matches!(c, ConceptDiversity::Witness { .. }));
    Ok(DiversityReport { holds, concepts })
}

/// Finds `perm` with `m_hat.rows()[k] == m.rows()[perm[k]]` for every `k`.
/// Duplicate rows are matched to the lowest unused index.
pub fn match_rows_up_to_permutation(
    m_hat: &StructureMatrix,
    m: &StructureMatrix,
) -> Result<Option<Vec<usize>>, StructureError> {
    if m_hat.n_a() != m.n_a() || m_hat.u() != m.u() {
        return Err(StructureError::Dimension(format!(
            "{}x{} vs {}x{}",
            m_hat.n_a(),
            m_hat.u(),
            m.n_a(),
            m.u()
        )));
    }
    let mut used = vec![false; m.n_a()];
    let mut perm = Vec::with_capacity(m.n_a());
    for row in m_hat.rows() {
        match (0..m.n_a()).find(|&l| !used[l] && &m.rows()[l] == row) {
            Some(l) => {
                used[l] = true;
                perm.push(l);
            }
            None => return Ok(None),
        }
    }
    Ok(Some(perm))
}

/// Maximum-weight perfect matching (Hungarian method with potentials).
/// Returns `perm` where row `i` is assigned column `perm[i]`.
pub fn optimal_assignment(score: &[Vec<f64>]) -> Result<Vec<usize>, StructureError> {
    let n = score.len();
    if score.iter().any(|r| r.len() != n) {
        return Err(StructureError::Contract("score matrix must be square".into()));
    }
    if score.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StructureError::Contract("score matrix must be finite".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Minimize cost = -score; 1-based arrays with a sentinel column 0.
    let cost = |i: usize, j: usize| -score[i - 1][j - 1];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Index set of a matrix support.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    rows: usize,
    cols: usize,
    entries: BTreeSet<(usize, usize)>,
}

impl SupportSet {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: BTreeSet::new(),
        }
    }

    pub fn from_pairs(
        rows: usize,
        cols: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, StructureError> {
        let mut s = Self::new(rows, cols);
        for (i, j) in pairs {
            s.insert(i, j)?;
        }
        Ok(s)
    }

    /// Support of a binary 0/1 matrix given as rows.
    pub fn from_binary(rows: &[Vec<u8>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut s = Self::new(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0 {
                    s.entries.insert((i, j));
                }
            }
        }
        s
    }

    pub fn insert(&mut self, i: usize, j: usize) -> Result<(), StructureError> {
        if i >= self.rows || j >= self.cols {
            return Err(StructureError::Dimension(format!(
                "({i}, {j}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        self.entries.insert((i, j));
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.entries.contains(&(i, j))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().copied()
    }

    pub fn row(&self, i: usize) -> BTreeSet<usize> {
        self.entries.iter().filter(|e| e.0 == i).map(|e| e.1).collect()
    }

    pub fn col(&self, j: usize) -> BTreeSet<usize> {
        self.entries.iter().filter(|e| e.1 == j).map(|e| e.0).collect()
    }

    pub fn is_subset(&self, other: &SupportSet) -> bool {
        self.entries.is_subset(&other.entries)
    }

    pub fn to_binary(&self) -> Vec<Vec<u8>> {
        let mut out = vec![vec![0u8; self.cols]; self.rows];
        for &(i, j) in &self.entries {
            out[i][j] = 1;
        }
        out
    }
}

/// `{(i, j) : |J_ij| > tau}`.
pub fn threshold_support(jac: &[Vec<f64>], tau: f64) -> SupportSet {
    let cols = jac.first().map_or(0, Vec::len);
    let mut s = SupportSet::new(jac.len(), cols);
    for (i, r) in jac.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if v.abs() > tau {
                s.entries.insert((i, j));
            }
        }
    }
    s
}

/// For each column `i` in `cols`: does some set of rows touching `i` have
/// supports (restricted to `cols`) intersecting exactly in `{i}`? Uses the
/// maximal reduction: the intersection over all rows touching `i` is the
/// smallest attainable.
pub fn support_intersection_condition(support: &SupportSet, cols: &[usize]) -> Vec<bool> {
    let col_set: BTreeSet<usize> = cols.iter().copied().collect();
    cols.iter()
        .map(|&i| {
            let rows = support.col(i);
            if rows.is_empty() {
                return false;
            }
            let mut inter: Option<BTreeSet<usize>> = None;
            for r in rows {
                let restricted: BTreeSet<usize> =
                    support.row(r).intersection(&col_set).copied().collect();
                inter = Some(match inter {
                    None => restricted,
                    Some(acc) => acc.intersection(&restricted).copied().collect(),
                });
            }
            inter.map_or(false, |s| s.len() == 1 && s.contains(&i))
        })
        .collect()
}
