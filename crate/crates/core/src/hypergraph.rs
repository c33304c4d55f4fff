//! Incidence-matrix algebra for the two hypergraph levels.
//!
//! The user level is an `M x N` incidence matrix (users by groups) whose
//! normalized two-hop operator `D⁻¹ H B⁻¹ Hᵀ` drives user convolutions. The
//! group level projects groups onto a simple graph `C` (shared members) and
//! keeps only edges closed into triangles: `T = (C C) ⊙ C`, propagated with
//! `D_T⁻¹ T`. Vertices or groups with zero degree get all-zero operator rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparseBinary};

/// Binary vertex-by-hyperedge incidence matrix with unit hyperedge weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    /// rows = vertices
    by_vertex: SparseBinary,
    /// rows = hyperedges
    by_edge: SparseBinary,
}

impl IncidenceMatrix {
    /// Strict constructor: every hyperedge must contain at least one vertex.
    pub fn new(vertices: usize, edges: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let h = Self::from_pairs_allow_empty(vertices, edges, pairs)?;
        if let Some(e) = (0..edges).find(|&e| h.by_edge.row_len(e) == 0) {
            return Err(Error::Construction(format!("hyperedge {e} is empty")));
        }
        Ok(h)
    }

    /// Empty hyperedges are permitted; dropout views use this.
    pub(crate) fn from_pairs_allow_empty(
        vertices: usize,
        edges: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let by_vertex = SparseBinary::from_pairs(vertices, edges, pairs)
            .map_err(|e| Error::Construction(e.to_string()))?;
        let by_edge = by_vertex.transpose();
        Ok(Self { by_vertex, by_edge })
    }

    pub fn num_vertices(&self) -> usize {
        self.by_vertex.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.by_vertex.cols()
    }

    pub fn nnz(&self) -> usize {
        self.by_vertex.nnz()
    }

    /// Hyperedges incident to vertex `v`, sorted.
    pub fn edges_of(&self, v: usize) -> &[usize] {
        self.by_vertex.row(v)
    }

    /// Vertices in hyperedge `e`, sorted.
    pub fn vertices_of(&self, e: usize) -> &[usize] {
        self.by_edge.row(e)
    }

    pub fn contains(&self, v: usize, e: usize) -> bool {
        self.by_vertex.contains(v, e)
    }

    /// `(vertex, hyperedge)` pairs, sorted.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.by_vertex.pairs()
    }

    pub fn to_dense(&self) -> ndarray::Array2<f64> {
        self.by_vertex.to_dense()
    }
}

/// User-level hypergraph: one hyperedge per group, in group-id order.
pub fn build_user_level(membership: &[Vec<usize>], num_users: usize) -> Result<IncidenceMatrix> {
    for (g, members) in membership.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Construction(format!("group {g} has no members")));
        }
        if let Some(&u) = members.iter().find(|&&u| u >= num_users) {
            return Err(Error::Construction(format!(
                "group {g} has member {u} but there are only {num_users} users"
            )));
        }
    }
    IncidenceMatrix::new(
        num_users,
        membership.len(),
        membership
            .iter()
            .enumerate()
            .flat_map(|(g, ms)| ms.iter().map(move |&u| (u, g))),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeVectors {
    /// d_v: hyperedges per vertex
    pub vertex: Vec<usize>,
    /// b_e: vertices per hyperedge
    pub edge: Vec<usize>,
}

impl DegreeVectors {
    pub fn isolated_vertices(&self) -> Vec<usize> {
        self.vertex
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(v, _)| v)
            .collect()
    }
}

pub fn degrees(h: &IncidenceMatrix) -> DegreeVectors {
    DegreeVectors {
        vertex: (0..h.num_vertices()).map(|v| h.edges_of(v).len()).collect(),
        edge: (0..h.num_edges()).map(|e| h.vertices_of(e).len()).collect(),
    }
}

/// `D⁻¹ H B⁻¹ Hᵀ` over the vertices of an incidence matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOperator {
    matrix: CsrMatrix,
    isolated: Vec<usize>,
}

impl PropagationOperator {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CsrMatrix {
        self.matrix
    }

    /// Vertices with zero degree; their rows are empty.
    pub fn isolated(&self) -> &[usize] {
        &self.isolated
    }

    /// Dense copy, refused above `max_entries` cells.
    pub fn to_dense(&self, max_entries: usize) -> Result<ndarray::Array2<f64>> {
        let cells = self.matrix.rows() * self.matrix.cols();
        if cells > max_entries {
            return Err(Error::Parameter(format!(
                "dense operator would hold {cells} entries (limit {max_entries})"
            )));
        }
        Ok(self.matrix.to_dense())
    }
}

/// Default cap for [`PropagationOperator::to_dense`].
pub const DENSE_LIMIT: usize = 4_000_000;

pub fn propagation_operator(h: &IncidenceMatrix) -> PropagationOperator {
    let deg = degrees(h);
    let m = h.num_vertices();
    let mut rows = Vec::with_capacity(m);
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for u in 0..m {
        acc.clear();
        let du = deg.vertex[u];
        for &e in h.edges_of(u) {
            let w = 1.0 / (du as f64 * deg.edge[e] as f64);
            for &v in h.vertices_of(e) {
                *acc.entry(v).or_insert(0.0) += w;
            }
        }
        rows.push(acc.iter().map(|(&v, &w)| (v, w)).collect());
    }
    PropagationOperator {
        matrix: CsrMatrix::from_rows(m, m, rows),
        isolated: deg.isolated_vertices(),
    }
}

/// Symmetric 0/1 adjacency with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency(SparseBinary);

impl Adjacency {
    /// Validating constructor from an arbitrary binary matrix.
    pub fn from_matrix(m: SparseBinary) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Contract(format!(
                "adjacency must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        for (i, j) in m.pairs() {
            if i == j {
                return Err(Error::Contract(format!("adjacency has self-loop at {i}")));
            }
            if !m.contains(j, i) {
                return Err(Error::Contract(format!(
                    "adjacency is not symmetric: ({i}, {j}) set but ({j}, {i}) not"
                )));
            }
        }
        Ok(Self(m))
    }

    /// Undirected graph from edge list; self-loops are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::Contract(format!("self-loop at {i}")));
            }
            pairs.push((i, j));
            pairs.push((j, i));
        }
        Self::from_matrix(SparseBinary::from_pairs(n, n, pairs)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.0.row(i)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.0.contains(i, j)
    }

    pub fn matrix(&self) -> &SparseBinary {
        &self.0
    }
}

/// Clique projection of the hyperedges: groups `i != j` are adjacent iff they
/// share at least one member.
pub fn project_groups(h: &IncidenceMatrix) -> Adjacency {
    let n = h.num_edges();
    let mut pairs = Vec::new();
    for v in 0..h.num_vertices() {
        let edges = h.edges_of(v);
        for (a, &i) in edges.iter().enumerate() {
            for &j in &edges[a + 1..] {
                pairs.push((i, j));
                pairs.push((j, i));
            }
        }
    }
    Adjacency(SparseBinary::from_pairs(n, n, pairs).expect("indices come from h"))
}

/// `T = (C C) ⊙ C` with its row sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifAdjacency {
    n: usize,
    /// `(i, j) -> T_ij` for `T_ij > 0`, row-major.
    entries: Vec<(usize, usize, u64)>,
    degree: Vec<u64>,
}

impl MotifAdjacency {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn entries(&self) -> &[(usize, usize, u64)] {
        &self.entries
    }

    pub fn degree(&self) -> &[u64] {
        &self.degree
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.entries
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&(i, j)))
            .map(|k| self.entries[k].2)
            .unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self) -> ndarray::Array2<u64> {
        let mut out = ndarray::Array2::zeros((self.n, self.n));
        for &(i, j, t) in &self.entries {
            out[[i, j]] = t;
        }
        out
    }
}

/// Counts, for every edge `(i, j)` of `c`, the triangles through it.
pub fn motif_adjacency(c: &Adjacency) -> MotifAdjacency {
    let n = c.len();
    let mut entries = Vec::new();
    let mut degree = vec![0u64; n];
    for i in 0..n {
        let ni = c.neighbors(i);
        for &j in ni {
            let t = sorted_intersection_len(ni, c.neighbors(j)) as u64;
            if t > 0 {
                entries.push((i, j, t));
                degree[i] += t;
            }
        }
    }
    MotifAdjacency { n, entries, degree }
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut x, mut y, mut count) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                x += 1;
                y += 1;
            }
        }
    }
    count
}

/// `D_T⁻¹ T`; groups in no triangle get zero rows.
pub fn group_propagation_operator(t: &MotifAdjacency) -> CsrMatrix {
    let mut rows = vec![Vec::new(); t.n];
    for &(i, j, w) in &t.entries {
        rows[i].push((j, w as f64 / t.degree[i] as f64));
    }
    CsrMatrix::from_rows(t.n, t.n, rows)
}

/// Writes `H.coo`, `C.coo` and `T.coo` (`row<TAB>col<TAB>value` per line) into `dir`.
pub fn dump_coo(dir: impl AsRef<Path>, h: &IncidenceMatrix, c: &Adjacency, t: &MotifAdjacency) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, shape: (usize, usize), rows: Vec<(usize, usize, u64)>| -> Result<()> {
        let path = dir.join(name);
        let mut out = format!("# {} {}\n", shape.0, shape.1);
        for (i, j, v) in rows {
            let _ = writeln!(out, "{i}\t{j}\t{v}");
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    };
    write(
        "H.coo",
        (h.num_vertices(), h.num_edges()),
        h.entries().map(|(v, e)| (v, e, 1)).collect(),
    )?;
    write(
        "C.coo",
        (c.len(), c.len()),
        c.matrix().pairs().map(|(i, j)| (i, j, 1)).collect(),
    )?;
    write("T.coo", (t.len(), t.len()), t.entries().to_vec())
}
