//! Two-qubit density matrices, multiple-quantum coherence decomposition and
//! the receiver state obtained from sector-restricted evolution.
//!
//! Two-qubit indices run over `00, 01, 10, 11`, i.e. `2*n1 + n2`. The sender
//! qubits are chain nodes 1 and 2; the receiver qubits are nodes `N-1`, `N`.

use nalgebra::{DVector, Matrix4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::chain::{sector_basis, Pattern, SectorBasis, MAX_EXCITATIONS};
use crate::dynamics::Propagator;
use crate::error::{Error, Result};

pub type Matrix4c = Matrix4<Complex64>;

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = -1e-10;

/// Number of excitations in two-qubit basis index `i`.
pub fn excitations(i: usize) -> i32 {
    (i as u32).count_ones() as i32
}

/// Coherence order of element `(row; col)`: the change of excitation number.
pub fn coherence_order(row: usize, col: usize) -> i32 {
    excitations(col) - excitations(row)
}

fn max_abs(m: &Matrix4c) -> f64 {
    crate::max_abs(m.iter())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoQubitState {
    matrix: Matrix4c,
}

impl TwoQubitState {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(matrix: Matrix4c) -> Result<Self> {
        let herm = max_abs(&(matrix - matrix.adjoint()));
        if herm > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {herm:e})")));
        }
        let tr = matrix.trace();
        if (tr - Complex64::new(1.0, 0.0)).norm() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} != 1")));
        }
        let min = min_eigenvalue(&matrix);
        if min < PSD_TOL {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:e}")));
        }
        Ok(TwoQubitState { matrix })
    }

    /// Wraps a matrix produced by evolution without re-validating it.
    pub fn from_evolved(matrix: Matrix4c) -> Self {
        TwoQubitState { matrix }
    }

    /// `|n1 n2><n1 n2|`.
    pub fn basis_projector(index: usize) -> Self {
        let mut m = Matrix4c::zeros();
        m[(index, index)] = Complex64::new(1.0, 0.0);
        TwoQubitState { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix4c {
        &self.matrix
    }

    pub fn element(&self, row: usize, col: usize) -> Complex64 {
        self.matrix[(row, col)]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.matrix)
    }

    pub fn to_json(&self) -> DensityMatrixJson {
        DensityMatrixJson::from_matrix(&self.matrix)
    }

    pub fn from_json(json: &DensityMatrixJson) -> Result<Self> {
        TwoQubitState::new(json.to_matrix()?)
    }
}

pub fn min_eigenvalue(m: &Matrix4c) -> f64 {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// `{"re": [[..];4], "im": [[..];4]}`, row-major, basis order 00, 01, 10, 11.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrixJson {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl DensityMatrixJson {
    pub fn from_matrix(m: &Matrix4c) -> Self {
        DensityMatrixJson {
            re: (0..4).map(|r| (0..4).map(|c| m[(r, c)].re).collect()).collect(),
            im: (0..4).map(|r| (0..4).map(|c| m[(r, c)].im).collect()).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix4c> {
        let ok = |rows: &Vec<Vec<f64>>| rows.len() == 4 && rows.iter().all(|r| r.len() == 4);
        if !ok(&self.re) || !ok(&self.im) {
            return Err(Error::Format("density matrix must be 4x4 in both 're' and 'im'".into()));
        }
        Ok(Matrix4c::from_fn(|r, c| Complex64::new(self.re[r][c], self.im[r][c])))
    }
}

/// `ρ = Σ_{k=-2}^{2} ρ^{(k)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MQDecomposition {
    components: [Matrix4c; 5],
}

impl MQDecomposition {
    /// Component of order `k ∈ -2..=2`.
    pub fn component(&self, k: i32) -> &Matrix4c {
        &self.components[(k + 2) as usize]
    }

    pub fn recompose(&self) -> Matrix4c {
        self.components.iter().fold(Matrix4c::zeros(), |acc, c| acc + c)
    }
}

pub fn mq_decompose(rho: &Matrix4c) -> MQDecomposition {
    let mut components = [Matrix4c::zeros(); 5];
    for r in 0..4 {
        for c in 0..4 {
            components[(coherence_order(r, c) + 2) as usize][(r, c)] = rho[(r, c)];
        }
    }
    MQDecomposition { components }
}

/// Chain pattern carrying sender basis state `index` on nodes 1, 2.
pub fn sender_pattern(index: usize) -> Pattern {
    let mut bits = 0u64;
    if index & 0b10 != 0 {
        bits |= 1;
    }
    if index & 0b01 != 0 {
        bits |= 2;
    }
    Pattern(bits)
}

/// Two-qubit receiver index carried by nodes `N-1`, `N` of a pattern.
pub fn receiver_index(p: Pattern, n_nodes: usize) -> usize {
    2 * usize::from(p.is_occupied(n_nodes - 1)) + usize::from(p.is_occupied(n_nodes))
}

/// Pattern with receiver bits cleared and replaced by receiver basis state `index`.
pub fn with_receiver(p: Pattern, index: usize, n_nodes: usize) -> Pattern {
    let mask = (1u64 << (n_nodes - 2)) | (1u64 << (n_nodes - 1));
    let mut bits = p.0 & !mask;
    if index & 0b10 != 0 {
        bits |= 1 << (n_nodes - 2);
    }
    if index & 0b01 != 0 {
        bits |= 1 << (n_nodes - 1);
    }
    Pattern(bits)
}

/// `ρ_S ⊗ |0…0><0…0|` as sparse `(bra pattern, ket pattern, value)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub n_nodes: usize,
    pub entries: Vec<(Pattern, Pattern, Complex64)>,
}

impl InitialState {
    pub fn trace(&self) -> Complex64 {
        self.entries.iter().filter(|(a, b, _)| a == b).map(|e| e.2).sum()
    }
}

pub fn assemble_initial_state(rho_s: &Matrix4c, n_nodes: usize) -> InitialState {
    let mut entries = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            let v = rho_s[(r, c)];
            if v != Complex64::new(0.0, 0.0) {
                entries.push((sender_pattern(r), sender_pattern(c), v));
            }
        }
    }
    InitialState { n_nodes, entries }
}

/// Columns `W|ket>` of a total evolution operator that conserves excitation
/// number, in the canonical sector basis of `ket`.
pub trait Evolution {
    fn n_nodes(&self) -> usize;
    fn column(&self, ket: Pattern) -> Result<DVector<Complex64>>;
}

/// Free evolution `Ṽ(t)`.
#[derive(Debug, Clone, Copy)]
pub struct FreeEvolution<'a> {
    pub prop: &'a Propagator,
    pub t: f64,
}

impl Evolution for FreeEvolution<'_> {
    fn n_nodes(&self) -> usize {
        self.prop.n_nodes()
    }

    fn column(&self, ket: Pattern) -> Result<DVector<Complex64>> {
        let k = ket.excitations();
        let s = self.prop.sector(k).ok_or(Error::UnsupportedSector(k))?;
        let idx = s.basis.index_of(ket).ok_or(Error::UnsupportedSector(k))?;
        Ok(s.column(self.t, idx))
    }
}

/// Linear map `ρ_S -> Tr_rest(W (ρ_S ⊗ |0><0|) W^+)` applied to an arbitrary
/// 4x4 input.
pub fn receiver_map<E: Evolution + ?Sized>(rho_s: &Matrix4c, evolution: &E) -> Result<Matrix4c> {
    let n = evolution.n_nodes();
    let bases: Vec<SectorBasis> = (0..=MAX_EXCITATIONS).map(|k| sector_basis(n, k)).collect::<Result<_>>()?;
    let columns: Vec<DVector<Complex64>> = (0..4).map(|s| evolution.column(sender_pattern(s))).collect::<Result<_>>()?;

    let mut out = Matrix4c::zeros();
    for s in 0..4 {
        for s2 in 0..4 {
            let rho = rho_s[(s, s2)];
            if rho == Complex64::new(0.0, 0.0) {
                continue;
            }
            let (k, k2) = (excitations(s) as usize, excitations(s2) as usize);
            let (col, col2) = (&columns[s], &columns[s2]);
            for (i, &p) in bases[k].states().iter().enumerate() {
                let amp = col[i];
                if amp == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let r = receiver_index(p, n);
                for r2 in 0..4 {
                    let p2 = with_receiver(p, r2, n);
                    if p2.excitations() != k2 {
                        continue;
                    }
                    let j = bases[k2].index_of(p2).expect("pattern in sector");
                    out[(r, r2)] += rho * amp * col2[j].conj();
                }
            }
        }
    }
    Ok(out)
}

pub fn receiver_state<E: Evolution + ?Sized>(rho_s: &TwoQubitState, evolution: &E) -> Result<TwoQubitState> {
    Ok(TwoQubitState::from_evolved(receiver_map(rho_s.matrix(), evolution)?))
}
