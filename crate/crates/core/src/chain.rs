//! Communication-line geometry, coupling profiles and excitation-sector
//! Hamiltonians of the XX chain.
//!
//! Nodes are labelled `1..=N` in public APIs. Node 1 is the first sender
//! spin; nodes `N-1` and `N` are the receiver, and nodes `N-3..=N` form the
//! extended receiver.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest chain that holds a two-node sender and a four-node extended receiver.
pub const MIN_NODES: usize = 6;
/// Patterns are stored in a `u64`.
pub const MAX_NODES: usize = 64;
/// Dynamics never leaves the sectors with at most two excitations.
pub const MAX_EXCITATIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum CouplingModel {
    /// Only `D_{i,i+1}` is nonzero.
    #[serde(alias = "nearest_neighbor", alias = "nn")]
    NearestNeighbor,
    /// All pairs couple as `1/r^3`, with node positions fixed by the
    /// nearest-neighbour profile. This model reproduces the reference
    /// transfer optima and is the default.
    #[default]
    #[serde(alias = "full_dipole", alias = "dipole")]
    FullDipole,
}

impl fmt::Display for CouplingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CouplingModel::NearestNeighbor => f.write_str("nearest-neighbor"),
            CouplingModel::FullDipole => f.write_str("full-dipole"),
        }
    }
}

impl std::str::FromStr for CouplingModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "nearest-neighbor" | "nearestneighbor" | "nn" => Ok(CouplingModel::NearestNeighbor),
            "full-dipole" | "fulldipole" | "dipole" => Ok(CouplingModel::FullDipole),
            other => Err(Error::InvalidSpec(format!("unknown coupling model '{other}'"))),
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Geometry of the communication line.
///
/// `boundary_ratio_1` is `D_{1,2}/δ = D_{N-1,N}/δ` and `boundary_ratio_2` is
/// `D_{2,3}/δ = D_{N-2,N-1}/δ`. Energies are in units of `base_coupling`,
/// times in units of its inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_nodes: usize,
    #[serde(default = "one")]
    pub base_coupling: f64,
    #[serde(default = "one")]
    pub boundary_ratio_1: f64,
    #[serde(default = "one")]
    pub boundary_ratio_2: f64,
    #[serde(default)]
    pub coupling_model: CouplingModel,
}

impl ChainSpec {
    pub fn homogeneous(n_nodes: usize, coupling_model: CouplingModel) -> Self {
        Self::with_boundary(n_nodes, 1.0, 1.0, coupling_model)
    }

    pub fn with_boundary(
        n_nodes: usize,
        boundary_ratio_1: f64,
        boundary_ratio_2: f64,
        coupling_model: CouplingModel,
    ) -> Self {
        ChainSpec {
            n_nodes,
            base_coupling: 1.0,
            boundary_ratio_1,
            boundary_ratio_2,
            coupling_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < MIN_NODES {
            return Err(Error::InvalidSpec(format!(
                "n_nodes = {} but at least {MIN_NODES} are required",
                self.n_nodes
            )));
        }
        if self.n_nodes > MAX_NODES {
            return Err(Error::InvalidSpec(format!(
                "n_nodes = {} exceeds the supported maximum {MAX_NODES}",
                self.n_nodes
            )));
        }
        for (name, v) in [
            ("base_coupling", self.base_coupling),
            ("boundary_ratio_1", self.boundary_ratio_1),
            ("boundary_ratio_2", self.boundary_ratio_2),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Nearest-neighbour couplings `δ_1..δ_{N-1}` (mirror symmetric).
    pub fn nearest_couplings(&self) -> Vec<f64> {
        let n = self.n_nodes;
        let mut d = vec![self.base_coupling; n - 1];
        d[0] = self.base_coupling * self.boundary_ratio_1;
        d[n - 2] = d[0];
        d[1] = self.base_coupling * self.boundary_ratio_2;
        d[n - 3] = d[1];
        d
    }
}

/// Symmetric coupling constants `D_ij`, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    entries: DMatrix<f64>,
}

impl CouplingMatrix {
    pub fn n_nodes(&self) -> usize {
        self.entries.nrows()
    }

    /// `D_ij` for 1-based node labels.
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.entries[(i - 1, j - 1)]
    }

    /// 0-based dense view.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Copy with nodes relabelled `i -> N+1-i`.
    pub fn reflected(&self) -> CouplingMatrix {
        let n = self.n_nodes();
        CouplingMatrix {
            entries: DMatrix::from_fn(n, n, |i, j| self.entries[(n - 1 - i, n - 1 - j)]),
        }
    }

    /// Writes the full `N x N` matrix, one row per line, with a `node` column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.n_nodes();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["node".to_string()];
        header.extend((1..=n).map(|j| j.to_string()));
        w.write_record(&header)?;
        for i in 0..n {
            let mut row = vec![(i + 1).to_string()];
            row.extend((0..n).map(|j| format!("{:.12e}", self.entries[(i, j)])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_couplings(spec: &ChainSpec) -> Result<CouplingMatrix> {
    spec.validate()?;
    let n = spec.n_nodes;
    let nearest = spec.nearest_couplings();
    let mut d = DMatrix::<f64>::zeros(n, n);
    match spec.coupling_model {
        CouplingModel::NearestNeighbor => {
            for (i, &c) in nearest.iter().enumerate() {
                d[(i, i + 1)] = c;
                d[(i + 1, i)] = c;
            }
        }
        CouplingModel::FullDipole => {
            // r_{k,k+1} = (δ/δ_k)^{1/3} in units of the bulk spacing
            let delta = spec.base_coupling;
            let mut x = Vec::with_capacity(n);
            x.push(0.0);
            for &c in &nearest {
                let last = *x.last().unwrap();
                x.push(last + (delta / c).cbrt());
            }
            for i in 0..n {
                for j in i + 1..n {
                    let r = x[j] - x[i];
                    let c = delta / (r * r * r);
                    d[(i, j)] = c;
                    d[(j, i)] = c;
                }
            }
            // nearest-neighbour entries exactly as specified, free of cbrt round-off
            for (i, &c) in nearest.iter().enumerate() {
                d[(i, i + 1)] = c;
                d[(i + 1, i)] = c;
            }
        }
    }
    Ok(CouplingMatrix { entries: d })
}

/// Occupation pattern `|n_1 … n_N>`; bit `k-1` holds node `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Pattern(pub u64);

impl Pattern {
    pub const EMPTY: Pattern = Pattern(0);

    /// From 1-based node labels.
    pub fn from_nodes(nodes: &[usize]) -> Pattern {
        Pattern(nodes.iter().fold(0u64, |acc, &k| acc | (1u64 << (k - 1))))
    }

    /// Parses a ket string such as `"110000"` (node 1 first).
    pub fn parse(s: &str) -> Result<Pattern> {
        let mut bits = 0u64;
        if s.len() > MAX_NODES {
            return Err(Error::Format(format!("pattern '{s}' is too long")));
        }
        for (k, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => bits |= 1 << k,
                _ => return Err(Error::Format(format!("bad pattern character '{c}' in '{s}'"))),
            }
        }
        Ok(Pattern(bits))
    }

    pub fn excitations(self) -> usize {
        self.0.count_ones() as usize
    }

    /// 1-based.
    pub fn is_occupied(self, node: usize) -> bool {
        self.0 >> (node - 1) & 1 == 1
    }

    /// Occupied nodes, ascending, 1-based.
    pub fn nodes(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..64).filter(move |&b| bits >> b & 1 == 1).map(|b| b + 1)
    }

    pub fn ket(self, n_nodes: usize) -> String {
        (1..=n_nodes).map(|k| if self.is_occupied(k) { '1' } else { '0' }).collect()
    }

    /// Node relabelling `i -> N+1-i`.
    pub fn reflect(self, n_nodes: usize) -> Pattern {
        Pattern::from_nodes(&self.nodes().map(|k| n_nodes + 1 - k).collect::<Vec<_>>())
    }
}

/// Basis of the sector with exactly `k` excitations, ordered
/// lexicographically on the ket string with `1` before `0`
/// (`110…`, `101…`, …, `…011`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorBasis {
    n_nodes: usize,
    excitations: usize,
    states: Vec<Pattern>,
}

impl SectorBasis {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn excitations(&self) -> usize {
        self.excitations
    }

    pub fn states(&self) -> &[Pattern] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Position of `p` in the basis, or `None` if it belongs to another sector
    /// or exceeds the chain length.
    pub fn index_of(&self, p: Pattern) -> Option<usize> {
        if p.excitations() != self.excitations || (self.n_nodes < 64 && p.0 >> self.n_nodes != 0) {
            return None;
        }
        let n = self.n_nodes;
        match self.excitations {
            0 => Some(0),
            1 => Some(p.0.trailing_zeros() as usize),
            _ => {
                let a = p.0.trailing_zeros() as usize;
                let b = 63 - p.0.leading_zeros() as usize;
                Some(a * (2 * n - a - 1) / 2 + (b - a - 1))
            }
        }
    }
}

pub fn sector_basis(n_nodes: usize, k: usize) -> Result<SectorBasis> {
    if k > MAX_EXCITATIONS {
        return Err(Error::UnsupportedSector(k));
    }
    if !(MIN_NODES..=MAX_NODES).contains(&n_nodes) {
        return Err(Error::InvalidSpec(format!(
            "n_nodes = {n_nodes} outside {MIN_NODES}..={MAX_NODES}"
        )));
    }
    let states = match k {
        0 => vec![Pattern::EMPTY],
        1 => (1..=n_nodes).map(|i| Pattern::from_nodes(&[i])).collect(),
        _ => (1..=n_nodes)
            .flat_map(|i| (i + 1..=n_nodes).map(move |j| Pattern::from_nodes(&[i, j])))
            .collect(),
    };
    Ok(SectorBasis { n_nodes, excitations: k, states })
}

/// Operator restricted to one excitation sector.
///
/// The XX hopping amplitudes are real, so sector Hamiltonians are stored as
/// real symmetric matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorOperator {
    pub basis: SectorBasis,
    pub matrix: DMatrix<f64>,
}

/// Matrix elements `<q|H|p> = D_ij/2` whenever `q` is `p` with one
/// excitation hopped from node `i` to node `j`.
pub fn build_sector_hamiltonian(
    couplings: &CouplingMatrix,
    basis: &SectorBasis,
) -> Result<SectorOperator> {
    if couplings.n_nodes() != basis.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: basis.n_nodes(),
            found: couplings.n_nodes(),
        });
    }
    let n = basis.n_nodes();
    let dim = basis.len();
    let d = couplings.matrix();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for (col, &p) in basis.states().iter().enumerate() {
        for i in 0..n {
            if p.0 >> i & 1 == 0 {
                continue;
            }
            for j in 0..n {
                if p.0 >> j & 1 == 1 || d[(i, j)] == 0.0 {
                    continue;
                }
                let q = Pattern(p.0 & !(1 << i) | (1 << j));
                let row = basis.index_of(q).expect("hop stays in sector");
                h[(row, col)] += 0.5 * d[(i, j)];
            }
        }
    }
    Ok(SectorOperator { basis: basis.clone(), matrix: h })
}

/// Hamiltonians of sectors `0..=MAX_EXCITATIONS` for a chain.
pub fn sector_hamiltonians(spec: &ChainSpec) -> Result<Vec<SectorOperator>> {
    let couplings = build_couplings(spec)?;
    (0..=MAX_EXCITATIONS)
        .map(|k| build_sector_hamiltonian(&couplings, &sector_basis(spec.n_nodes, k)?))
        .collect()
}
