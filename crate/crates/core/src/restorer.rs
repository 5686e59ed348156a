//! The I_z-preserving unitary `V0` on the four-node extended receiver, the
//! total evolution `W = (I ⊗ V0) Ṽ(t)`, the restoring constraint system and
//! the scale (damping) factors.
//!
//! Extended-receiver basis states are 4-bit patterns `n1 n2 n3 n4` for chain
//! nodes `N-3, N-2, N-1, N`, stored as the integer `8 n1 + 4 n2 + 2 n3 + n4`.
//! The eleven states with at most two excitations carry the scalar labels
//! `1..=11` of [`ER_INDEX_TABLE`].

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::chain::{sector_basis, Pattern, SectorBasis};
use crate::dynamics::{Propagator, PropagatorElement};
use crate::error::{Error, Result};
use crate::qstate::{receiver_map, Evolution, FreeEvolution, Matrix4c, TwoQubitState};

pub type Matrix16c = SMatrix<Complex64, 16, 16>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Scalar label `i` (1-based position) -> 4-bit extended-receiver pattern.
pub const ER_INDEX_TABLE: [usize; 11] =
    [0b0000, 0b0001, 0b0010, 0b0011, 0b0100, 0b0101, 0b0110, 0b1000, 0b1001, 0b1010, 0b1100];

/// Pairs `(i, j)` of scalar labels joined by a generator, ascending.
pub const GENERATOR_PAIRS: [(usize, usize); 21] = [
    (2, 3), (2, 5), (2, 8), (3, 5), (3, 8), (4, 6), (4, 7), (4, 9), (4, 10), (4, 11), (5, 8),
    (6, 7), (6, 9), (6, 10), (6, 11), (7, 9), (7, 10), (7, 11), (9, 10), (9, 11), (10, 11),
];

pub const N_PHI: usize = 2 * GENERATOR_PAIRS.len();

/// Ordering of the generator product recorded in output metadata.
pub const ORDERING_CONVENTION: &str = "V0 = prod over pairs (i,j) with (i,j) increasing right to left; \
     each pair contributes exp(i phi2 gamma2) exp(i phi1 gamma1); gamma2_ij = -i, gamma2_ji = +i";

fn er_state(label: usize) -> usize {
    ER_INDEX_TABLE[label - 1]
}

fn er_excitations(state: usize) -> u32 {
    (state as u32).count_ones()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// `γ^{(1;ij)}`: `+1` at `(i,j)` and `(j,i)`.
    #[serde(rename = "1")]
    Symmetric,
    /// `γ^{(2;ij)}`: `-i` at `(i,j)`, `+i` at `(j,i)`.
    #[serde(rename = "2")]
    Antisymmetric,
}

impl Family {
    pub fn number(self) -> u8 {
        match self {
            Family::Symmetric => 1,
            Family::Antisymmetric => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Family> {
        match n {
            1 => Ok(Family::Symmetric),
            2 => Ok(Family::Antisymmetric),
            _ => Err(Error::Format(format!("generator family must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub family: Family,
    pub pair: (usize, usize),
    pub matrix: Matrix16c,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorBasis {
    pub generators: Vec<Generator>,
    pub index_table: [usize; 11],
}

pub fn build_generators() -> GeneratorBasis {
    let mut generators = Vec::with_capacity(N_PHI);
    for &(i, j) in &GENERATOR_PAIRS {
        let (p, q) = (er_state(i), er_state(j));
        let mut g1 = Matrix16c::zeros();
        g1[(p, q)] = ONE;
        g1[(q, p)] = ONE;
        let mut g2 = Matrix16c::zeros();
        g2[(p, q)] = -I;
        g2[(q, p)] = I;
        generators.push(Generator { family: Family::Symmetric, pair: (i, j), matrix: g1 });
        generators.push(Generator { family: Family::Antisymmetric, pair: (i, j), matrix: g2 });
    }
    GeneratorBasis { generators, index_table: ER_INDEX_TABLE }
}

/// The 42 angles. Canonical order: pairs ascending; within a pair the
/// family-2 angle first, then family 1, as the factors are written.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiParams {
    values: [f64; N_PHI],
}

/// One JSON record of a phi set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiRecord {
    pub family: u8,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

fn pair_index(i: usize, j: usize) -> Result<usize> {
    GENERATOR_PAIRS
        .iter()
        .position(|&p| p == (i, j))
        .ok_or_else(|| Error::Format(format!("({i},{j}) is not a generator pair")))
}

impl PhiParams {
    pub fn zeros() -> Self {
        PhiParams { values: [0.0; N_PHI] }
    }

    pub fn from_canonical(values: [f64; N_PHI]) -> Self {
        PhiParams { values }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let values: [f64; N_PHI] = values
            .try_into()
            .map_err(|_| Error::Format(format!("expected {N_PHI} phi values, got {}", values.len())))?;
        Ok(PhiParams { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn canonical_index(family: Family, i: usize, j: usize) -> Result<usize> {
        let k = pair_index(i, j)?;
        Ok(match family {
            Family::Antisymmetric => 2 * k,
            Family::Symmetric => 2 * k + 1,
        })
    }

    pub fn get(&self, family: Family, i: usize, j: usize) -> Result<f64> {
        Ok(self.values[Self::canonical_index(family, i, j)?])
    }

    pub fn set(&mut self, family: Family, i: usize, j: usize, value: f64) -> Result<()> {
        self.values[Self::canonical_index(family, i, j)?] = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_records(&self) -> Vec<PhiRecord> {
        GENERATOR_PAIRS
            .iter()
            .enumerate()
            .flat_map(|(k, &(i, j))| {
                [
                    PhiRecord { family: 2, i, j, value: self.values[2 * k] },
                    PhiRecord { family: 1, i, j, value: self.values[2 * k + 1] },
                ]
            })
            .collect()
    }

    /// Every `(family, i, j)` must appear exactly once.
    pub fn from_records(records: &[PhiRecord]) -> Result<Self> {
        let mut values = [f64::NAN; N_PHI];
        for r in records {
            let idx = Self::canonical_index(Family::from_number(r.family)?, r.i, r.j)?;
            if !values[idx].is_nan() {
                return Err(Error::Format(format!("duplicate phi record ({}, {}, {})", r.family, r.i, r.j)));
            }
            values[idx] = r.value;
        }
        if values.iter().any(|v| v.is_nan()) || records.len() != N_PHI {
            return Err(Error::Format(format!("expected {N_PHI} distinct phi records, got {}", records.len())));
        }
        Ok(PhiParams { values })
    }
}

/// One two-level rotation `e^{iθγ}` of the product, in application order.
#[derive(Debug, Clone, Copy)]
struct Rotation {
    family: Family,
    p: usize,
    q: usize,
    phi_index: usize,
}

/// Factors in the order they act on a state (rightmost first).
fn rotation_sequence() -> impl Iterator<Item = Rotation> {
    GENERATOR_PAIRS.iter().enumerate().flat_map(|(k, &(i, j))| {
        let (p, q) = (er_state(i), er_state(j));
        [
            Rotation { family: Family::Symmetric, p, q, phi_index: 2 * k + 1 },
            Rotation { family: Family::Antisymmetric, p, q, phi_index: 2 * k },
        ]
    })
}

impl Rotation {
    /// 2x2 block `[[a, b], [c, d]]` acting on `(p, q)`.
    fn block(&self, theta: f64) -> [Complex64; 4] {
        let (s, c) = theta.sin_cos();
        match self.family {
            Family::Symmetric => [Complex64::new(c, 0.0), I * s, I * s, Complex64::new(c, 0.0)],
            Family::Antisymmetric => [
                Complex64::new(c, 0.0),
                Complex64::new(s, 0.0),
                Complex64::new(-s, 0.0),
                Complex64::new(c, 0.0),
            ],
        }
    }

    /// `m <- R m`.
    fn apply_left(&self, m: &mut Matrix16c, r: &[Complex64; 4]) {
        for col in 0..16 {
            let (x, y) = (m[(self.p, col)], m[(self.q, col)]);
            m[(self.p, col)] = r[0] * x + r[1] * y;
            m[(self.q, col)] = r[2] * x + r[3] * y;
        }
    }

    /// `m <- m R^+`.
    fn apply_right_adjoint(&self, m: &mut Matrix16c, r: &[Complex64; 4]) {
        for row in 0..16 {
            let (x, y) = (m[(row, self.p)], m[(row, self.q)]);
            m[(row, self.p)] = x * r[0].conj() + y * r[1].conj();
            m[(row, self.q)] = x * r[2].conj() + y * r[3].conj();
        }
    }

    /// `tr(Z · iγ)`.
    fn trace_with_generator(&self, z: &Matrix16c) -> Complex64 {
        match self.family {
            Family::Symmetric => I * (z[(self.q, self.p)] + z[(self.p, self.q)]),
            Family::Antisymmetric => z[(self.q, self.p)] - z[(self.p, self.q)],
        }
    }
}

/// `V0` on the extended receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverUnitary {
    matrix: Matrix16c,
}

pub fn build_v0(phi: &PhiParams) -> ReceiverUnitary {
    let mut v = Matrix16c::identity();
    for rot in rotation_sequence() {
        let block = rot.block(phi.values[rot.phi_index]);
        rot.apply_left(&mut v, &block);
    }
    ReceiverUnitary { matrix: v }
}

impl ReceiverUnitary {
    pub fn identity() -> Self {
        ReceiverUnitary { matrix: Matrix16c::identity() }
    }

    pub fn matrix(&self) -> &Matrix16c {
        &self.matrix
    }

    /// Element between scalar labels `i, j ∈ 1..=11`.
    pub fn labelled(&self, i: usize, j: usize) -> Complex64 {
        self.matrix[(er_state(i), er_state(j))]
    }

    /// `max |V^+V - I|`.
    pub fn unitarity_defect(&self) -> f64 {
        crate::max_abs((self.matrix.adjoint() * self.matrix - Matrix16c::identity()).iter())
    }

    /// `max |[V, I_z]|`.
    pub fn iz_commutator_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..16 {
            for c in 0..16 {
                let diff = er_excitations(c) as f64 - er_excitations(r) as f64;
                worst = worst.max((self.matrix[(r, c)] * diff).norm());
            }
        }
        worst
    }
}

/// ER pattern carried by nodes `N-3..=N` of `p`.
pub fn er_part(p: Pattern, n_nodes: usize) -> usize {
    (0..4).fold(0, |acc, k| (acc << 1) | usize::from(p.is_occupied(n_nodes - 3 + k)))
}

/// `p` with its ER nodes replaced by `state`.
pub fn with_er_part(p: Pattern, state: usize, n_nodes: usize) -> Pattern {
    let mask: u64 = 0b1111 << (n_nodes - 4);
    let mut bits = p.0 & !mask;
    for k in 0..4 {
        if state >> (3 - k) & 1 == 1 {
            bits |= 1 << (n_nodes - 4 + k);
        }
    }
    Pattern(bits)
}

/// Total evolution `W = (I ⊗ V0) Ṽ(t)`.
#[derive(Debug, Clone, Copy)]
pub struct RestoredEvolution<'a> {
    pub prop: &'a Propagator,
    pub v0: &'a ReceiverUnitary,
    pub t: f64,
}

/// Applies `I ⊗ V0` to a vector over one excitation sector.
pub fn apply_receiver_unitary(v0: &ReceiverUnitary, basis: &SectorBasis, column: &DVector<Complex64>) -> DVector<Complex64> {
    let n = basis.n_nodes();
    let k = basis.excitations() as u32;
    DVector::from_fn(basis.len(), |i, _| {
        let p = basis.states()[i];
        let row = er_part(p, n);
        let head_exc = p.excitations() as u32 - er_excitations(row);
        (0..16)
            .filter(|&c| er_excitations(c) + head_exc == k)
            .map(|c| {
                let v = v0.matrix[(row, c)];
                if v == ZERO {
                    ZERO
                } else {
                    v * column[basis.index_of(with_er_part(p, c, n)).expect("same sector")]
                }
            })
            .sum()
    })
}

impl Evolution for RestoredEvolution<'_> {
    fn n_nodes(&self) -> usize {
        self.prop.n_nodes()
    }

    fn column(&self, ket: Pattern) -> Result<DVector<Complex64>> {
        let free = FreeEvolution { prop: self.prop, t: self.t }.column(ket)?;
        let basis = sector_basis(self.n_nodes(), ket.excitations())?;
        Ok(apply_receiver_unitary(self.v0, &basis, &free))
    }
}

/// `<bra| (I ⊗ V0) Ṽ(t) |ket>`.
pub fn w_element(prop: &Propagator, v0: &ReceiverUnitary, t: f64, bra: Pattern, ket: Pattern) -> Result<PropagatorElement> {
    if bra.excitations() != ket.excitations() {
        return Ok(PropagatorElement { value: ZERO, structural_zero: true });
    }
    let n = prop.n_nodes();
    let row = er_part(bra, n);
    let mut value = ZERO;
    for c in 0..16 {
        let v = v0.matrix[(row, c)];
        if v == ZERO {
            continue;
        }
        let mid = with_er_part(bra, c, n);
        if mid.excitations() != ket.excitations() {
            continue;
        }
        value += v * prop.element(t, mid, ket)?.value;
    }
    Ok(PropagatorElement { value, structural_zero: false })
}

/// The seven complex restoring residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    /// `Σ_J W_{J00; m0} W^+_{110; Jn}` for `(m, n)` = (01,01), (01,10), (10,01), (10,10).
    pub first_order: [Complex64; 4],
    /// `W_{0 n; n̄ 0}` for `n` = 01, 10.
    pub flip: [Complex64; 2],
    /// `Σ_J W_{J01; 110} W^+_{110; J10}`.
    pub zero_order: Complex64,
}

impl ConstraintResiduals {
    pub fn all(&self) -> [Complex64; 7] {
        let f = &self.first_order;
        [f[0], f[1], f[2], f[3], self.flip[0], self.flip[1], self.zero_order]
    }

    pub fn max_abs(&self) -> f64 {
        self.all().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Real and imaginary parts, 14 entries.
    pub fn to_real(&self) -> [f64; 14] {
        let mut out = [0.0; 14];
        for (k, z) in self.all().iter().enumerate() {
            out[2 * k] = z.re;
            out[2 * k + 1] = z.im;
        }
        out
    }
}

/// Scale factors of the restored elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    /// `λ^{(2)}_{00;11}`.
    pub lambda2: Complex64,
    /// `λ^{(1)}` for `(00;01), (00;10), (01;11), (10;11)`.
    pub lambda1: [Complex64; 4],
    /// `λ^{(0)}_{01;10}`.
    pub lambda0_flip: Complex64,
    /// `λ^{(0)}` for `(01;01), (10;10), (11;11)`.
    pub lambda0_diag: [f64; 3],
    /// `λ̃^{(0)}` for `(01;11), (10;11)`.
    pub tilde0: [f64; 2],
}

pub const TABLE_COLUMNS: [&str; 6] =
    ["lambda0_01_10", "lambda1_00_01", "lambda1_00_10", "lambda1_01_11", "lambda1_10_11", "lambda2_00_11"];

impl ScaleFactors {
    /// Non-diagonal factors in table column order.
    pub fn table_row(&self) -> [Complex64; 6] {
        let l = &self.lambda1;
        [self.lambda0_flip, l[0], l[1], l[2], l[3], self.lambda2]
    }

    pub fn magnitudes(&self) -> [f64; 6] {
        self.table_row().map(|z| z.norm())
    }

    /// Factor for non-diagonal element `(row; col)`, upper or lower triangle.
    pub fn for_element(&self, row: usize, col: usize) -> Option<Complex64> {
        let upper = match (row.min(col), row.max(col)) {
            (0, 3) => self.lambda2,
            (0, 1) => self.lambda1[0],
            (0, 2) => self.lambda1[1],
            (1, 3) => self.lambda1[2],
            (2, 3) => self.lambda1[3],
            (1, 2) => self.lambda0_flip,
            _ => return None,
        };
        Some(if row < col { upper } else { upper.conj() })
    }

    pub fn write_csv_header<W: Write>(w: &mut csv::Writer<W>, leading: &[&str]) -> Result<()> {
        let mut header: Vec<String> = leading.iter().map(|s| s.to_string()).collect();
        for name in TABLE_COLUMNS {
            header.push(format!("{name}_abs"));
            header.push(format!("{name}_arg"));
        }
        w.write_record(&header)?;
        Ok(())
    }

    pub fn write_csv_row<W: Write>(&self, w: &mut csv::Writer<W>, leading: &[String]) -> Result<()> {
        let mut row = leading.to_vec();
        for z in self.table_row() {
            row.push(format!("{:.6}", z.norm()));
            row.push(format!("{:.6}", z.arg()));
        }
        w.write_record(&row)?;
        Ok(())
    }
}

fn node(k: usize) -> Pattern {
    Pattern::from_nodes(&[k])
}

/// Evaluates the constraint system entry by entry from `w_element`.
pub fn constraint_residuals(prop: &Propagator, v0: &ReceiverUnitary, t: f64) -> Result<ConstraintResiduals> {
    let n = prop.n_nodes();
    let w = |bra: Pattern, ket: Pattern| w_element(prop, v0, t, bra, ket).map(|e| e.value);
    let pair = Pattern::from_nodes(&[1, 2]);
    // two-qubit "01" on the sender is node 2, "10" is node 1; on the receiver N and N-1
    let sender = [node(2), node(1)];
    let receiver = [node(n), node(n - 1)];
    let mut first_order = [ZERO; 4];
    for (mi, &m) in sender.iter().enumerate() {
        for (ni, &r) in receiver.iter().enumerate() {
            let mut acc = ZERO;
            for j in 1..=n - 2 {
                acc += w(node(j), m)? * w(Pattern(node(j).0 | r.0), pair)?.conj();
            }
            first_order[2 * mi + ni] = acc;
        }
    }
    let flip = [w(receiver[0], sender[1])?, w(receiver[1], sender[0])?];
    let mut zero_order = ZERO;
    for j in 1..=n - 2 {
        zero_order += w(Pattern(node(j).0 | receiver[0].0), pair)? * w(Pattern(node(j).0 | receiver[1].0), pair)?.conj();
    }
    Ok(ConstraintResiduals { first_order, flip, zero_order })
}

/// Evaluates the scale factors entry by entry from `w_element`.
pub fn scale_factors(prop: &Propagator, v0: &ReceiverUnitary, t: f64) -> Result<ScaleFactors> {
    let n = prop.n_nodes();
    let w = |bra: Pattern, ket: Pattern| w_element(prop, v0, t, bra, ket).map(|e| e.value);
    let pair = Pattern::from_nodes(&[1, 2]);
    let a = w(node(n), node(2))?;
    let b = w(node(n - 1), node(1))?;
    let c = w(Pattern::from_nodes(&[n - 1, n]), pair)?;
    let mut tilde0 = [0.0; 2];
    for (k, r) in [node(n), node(n - 1)].into_iter().enumerate() {
        for j in 1..=n - 2 {
            tilde0[k] += w(Pattern(node(j).0 | r.0), pair)?.norm_sqr();
        }
    }
    Ok(factors_from_amplitudes(a, b, c, tilde0))
}

fn factors_from_amplitudes(a: Complex64, b: Complex64, c: Complex64, tilde0: [f64; 2]) -> ScaleFactors {
    ScaleFactors {
        lambda2: c.conj(),
        lambda1: [a.conj(), b.conj(), a * c.conj(), b * c.conj()],
        lambda0_flip: a * b.conj(),
        lambda0_diag: [a.norm_sqr(), b.norm_sqr(), c.norm_sqr()],
        tilde0,
    }
}

/// Per-element comparison of the simulated receiver state with the
/// structurally restored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementCheck {
    pub row: usize,
    pub col: usize,
    pub simulated: Complex64,
    pub predicted: Complex64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationCheck {
    pub simulated_00: f64,
    /// `1 - Σ λ0 ρ_ii - (λ0_11 + λ̃_01 + λ̃_10) ρ_11`.
    pub trace_identity: f64,
    /// The same expression with `ρ^S_{00;00}` in place of `1`.
    pub literal_formula: f64,
    pub trace_identity_gap: f64,
    pub literal_formula_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreReport {
    pub t: f64,
    pub receiver: [[Complex64; 4]; 4],
    pub off_diagonal: Vec<ElementCheck>,
    pub diagonal: Vec<ElementCheck>,
    pub max_off_diagonal_error: f64,
    pub max_diagonal_error: f64,
    pub normalization: NormalizationCheck,
    pub factors: ScaleFactors,
    pub residuals: ConstraintResiduals,
    pub residual_max: f64,
}

pub fn verify_restoring(rho_s: &TwoQubitState, prop: &Propagator, v0: &ReceiverUnitary, t: f64) -> Result<RestoreReport> {
    let evolution = RestoredEvolution { prop, v0, t };
    let rho_r: Matrix4c = receiver_map(rho_s.matrix(), &evolution)?;
    let factors = scale_factors(prop, v0, t)?;
    let residuals = constraint_residuals(prop, v0, t)?;
    let s = rho_s.matrix();

    let check = |row: usize, col: usize, predicted: Complex64| {
        let simulated = rho_r[(row, col)];
        ElementCheck { row, col, simulated, predicted, abs_error: (simulated - predicted).norm() }
    };
    let mut off_diagonal = Vec::with_capacity(12);
    for r in 0..4 {
        for c in 0..4 {
            if r != c {
                let lambda = factors.for_element(r, c).expect("off-diagonal");
                off_diagonal.push(check(r, c, lambda * s[(r, c)]));
            }
        }
    }
    let [l01, l10, l11] = factors.lambda0_diag;
    let [t01, t10] = factors.tilde0;
    let rho11 = s[(3, 3)];
    let p01 = rho11 * t01 + s[(1, 1)] * l01;
    let p10 = rho11 * t10 + s[(2, 2)] * l10;
    let p11 = rho11 * l11;
    let removed = (s[(1, 1)] * l01 + s[(2, 2)] * l10 + rho11 * (l11 + t01 + t10)).re;
    let diagonal = vec![
        check(0, 0, Complex64::new(1.0 - removed, 0.0)),
        check(1, 1, p01),
        check(2, 2, p10),
        check(3, 3, p11),
    ];
    let simulated_00 = rho_r[(0, 0)].re;
    let literal = s[(0, 0)].re - removed;
    let normalization = NormalizationCheck {
        simulated_00,
        trace_identity: 1.0 - removed,
        literal_formula: literal,
        trace_identity_gap: (simulated_00 - (1.0 - removed)).abs(),
        literal_formula_gap: (simulated_00 - literal).abs(),
    };
    let max_of = |v: &[ElementCheck]| v.iter().map(|e| e.abs_error).fold(0.0, f64::max);
    Ok(RestoreReport {
        t,
        receiver: std::array::from_fn(|r| std::array::from_fn(|c| rho_r[(r, c)])),
        max_off_diagonal_error: max_of(&off_diagonal),
        max_diagonal_error: max_of(&diagonal),
        off_diagonal,
        diagonal,
        normalization,
        factors,
        residual_max: residuals.max_abs(),
        residuals,
    })
}

/// Equation and parameter counts of the diagonal-restoring subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagonalCountReport {
    pub n_nodes: usize,
    pub complex_equations: usize,
    pub real_equations: usize,
    /// Angles entering the `V0` rows that the subsystem touches.
    pub available_parameters: usize,
    pub solvable_by_count: bool,
}

impl fmt::Display for DiagonalCountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={}: {} complex ({} real) equations vs {} parameters -> {}",
            self.n_nodes,
            self.complex_equations,
            self.real_equations,
            self.available_parameters,
            if self.solvable_by_count { "not excluded by counting" } else { "overdetermined" }
        )
    }
}

/// Angles of the one-excitation block (pairs among labels 2, 3, 5, 8).
pub const ONE_EXCITATION_PARAMETERS: usize = 10;

pub fn diagonal_infeasibility_report(n_nodes: usize) -> Result<DiagonalCountReport> {
    if n_nodes < crate::chain::MIN_NODES {
        return Err(Error::InvalidSpec(format!("n_nodes = {n_nodes} is below {}", crate::chain::MIN_NODES)));
    }
    let complex_equations = 2 + 2 * (n_nodes - 4);
    Ok(DiagonalCountReport {
        n_nodes,
        complex_equations,
        real_equations: 2 * complex_equations,
        available_parameters: ONE_EXCITATION_PARAMETERS,
        solvable_by_count: 2 * complex_equations <= ONE_EXCITATION_PARAMETERS,
    })
}

/// A W element written as `Σ_c V0[row, c] g[c]` with `g` fixed by `Ṽ(t)`.
#[derive(Debug, Clone, Copy)]
struct LinearEntry {
    row: usize,
    g: [Complex64; 16],
}

/// All W elements the constraint system and scale factors depend on,
/// precomputed for a fixed chain and time so that each `V0` costs only a few
/// hundred multiply-adds.
///
/// Layout with `M = N-2`: `X_01[j], X_10[j], Y_01[j], Y_10[j]` for
/// `j = 1..=M`, then `A, B, C, F_01, F_10`, where
/// `X_m[j] = W_{j; m 0}`, `Y_n[j] = W_{j n; 110}`, `A = W_{0 01; 01 0}`,
/// `B = W_{0 10; 10 0}`, `C = W_{0 11; 11 0}`, `F_n = W_{0 n; n̄ 0}`.
#[derive(Debug, Clone)]
pub struct RestoringSystem {
    n_nodes: usize,
    t: f64,
    entries: Vec<LinearEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    X(usize),
    Y(usize),
    A,
    B,
    C,
    F(usize),
}

impl RestoringSystem {
    pub fn new(prop: &Propagator, t: f64) -> Result<Self> {
        let n = prop.n_nodes();
        let free = FreeEvolution { prop, t };
        let b1 = sector_basis(n, 1)?;
        let b2 = sector_basis(n, 2)?;
        let u = [free.column(node(2))?, free.column(node(1))?];
        let pair = free.column(Pattern::from_nodes(&[1, 2]))?;

        let linear = |bra: Pattern, column: &DVector<Complex64>, basis: &SectorBasis| -> LinearEntry {
            let row = er_part(bra, n);
            let mut g = [ZERO; 16];
            for (c, slot) in g.iter_mut().enumerate() {
                let mid = with_er_part(bra, c, n);
                if let Some(idx) = basis.index_of(mid) {
                    *slot = column[idx];
                }
            }
            LinearEntry { row, g }
        };
        let receiver = [node(n), node(n - 1)];
        let m = n - 2;
        let mut entries = Vec::with_capacity(4 * m + 5);
        for col in &u {
            entries.extend((1..=m).map(|j| linear(node(j), col, &b1)));
        }
        for r in receiver {
            entries.extend((1..=m).map(|j| linear(Pattern(node(j).0 | r.0), &pair, &b2)));
        }
        entries.push(linear(receiver[0], &u[0], &b1));
        entries.push(linear(receiver[1], &u[1], &b1));
        entries.push(linear(Pattern::from_nodes(&[n - 1, n]), &pair, &b2));
        entries.push(linear(receiver[0], &u[1], &b1));
        entries.push(linear(receiver[1], &u[0], &b1));
        Ok(RestoringSystem { n_nodes: n, t, entries })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    fn slot(&self, s: Slot) -> usize {
        let m = self.n_nodes - 2;
        match s {
            Slot::X(k) => k * m,
            Slot::Y(k) => (2 + k) * m,
            Slot::A => 4 * m,
            Slot::B => 4 * m + 1,
            Slot::C => 4 * m + 2,
            Slot::F(k) => 4 * m + 3 + k,
        }
    }

    pub fn entries(&self, v0: &ReceiverUnitary) -> WEntries {
        let v = &v0.matrix;
        let values = self
            .entries
            .iter()
            .map(|e| (0..16).map(|c| v[(e.row, c)] * e.g[c]).sum())
            .collect();
        WEntries { values }
    }

    pub fn residuals(&self, w: &WEntries) -> ConstraintResiduals {
        let m = self.n_nodes - 2;
        let dot = |a: usize, b: usize| -> Complex64 {
            (0..m).map(|j| w.values[a + j] * w.values[b + j].conj()).sum()
        };
        let mut first_order = [ZERO; 4];
        for mi in 0..2 {
            for ni in 0..2 {
                first_order[2 * mi + ni] = dot(self.slot(Slot::X(mi)), self.slot(Slot::Y(ni)));
            }
        }
        ConstraintResiduals {
            first_order,
            flip: [w.values[self.slot(Slot::F(0))], w.values[self.slot(Slot::F(1))]],
            zero_order: dot(self.slot(Slot::Y(0)), self.slot(Slot::Y(1))),
        }
    }

    pub fn factors(&self, w: &WEntries) -> ScaleFactors {
        let m = self.n_nodes - 2;
        let norm = |start: usize| (0..m).map(|j| w.values[start + j].norm_sqr()).sum::<f64>();
        factors_from_amplitudes(
            w.values[self.slot(Slot::A)],
            w.values[self.slot(Slot::B)],
            w.values[self.slot(Slot::C)],
            [norm(self.slot(Slot::Y(0))), norm(self.slot(Slot::Y(1)))],
        )
    }

    pub fn evaluate(&self, v0: &ReceiverUnitary) -> (ConstraintResiduals, ScaleFactors) {
        let w = self.entries(v0);
        (self.residuals(&w), self.factors(&w))
    }

    /// Gradient over the 42 angles of a real function `f` of the W entries,
    /// given `s = ∂f/∂w` in the convention `df = 2 Re Σ s dw`.
    pub fn pullback(&self, phi: &PhiParams, v0: &ReceiverUnitary, sensitivity: &[Complex64]) -> [f64; N_PHI] {
        // df = 2 Re tr(G^T dV0)
        let mut g = Matrix16c::zeros();
        for (e, &s) in self.entries.iter().zip(sensitivity) {
            if s == ZERO {
                continue;
            }
            for c in 0..16 {
                g[(e.row, c)] += s * e.g[c];
            }
        }
        // Z_m = P_{m-1} G^T L_{m-1}; Z_{m+1} = R_m Z_m R_m^+
        let mut z = g.transpose() * v0.matrix;
        let mut grad = [0.0; N_PHI];
        for rot in rotation_sequence() {
            grad[rot.phi_index] = 2.0 * rot.trace_with_generator(&z).re;
            let block = rot.block(phi.values[rot.phi_index]);
            rot.apply_left(&mut z, &block);
            rot.apply_right_adjoint(&mut z, &block);
        }
        grad
    }

    /// Residual vector (14 reals) and its Jacobian over the 42 angles.
    pub fn residual_jacobian(&self, phi: &PhiParams) -> ([f64; 14], DMatrix<f64>) {
        let v0 = build_v0(phi);
        let w = self.entries(&v0);
        let r = self.residuals(&w).to_real();
        let m = self.n_nodes - 2;
        let len = self.entries.len();
        let mut jac = DMatrix::<f64>::zeros(14, N_PHI);
        let mut sens = vec![ZERO; len];
        let half = Complex64::new(0.5, 0.0);
        let mut fill_row = |row: usize, sens: &[Complex64]| {
            let grad = self.pullback(phi, &v0, sens);
            for (k, gk) in grad.iter().enumerate() {
                jac[(row, k)] = *gk;
            }
        };
        // inner products Σ_j w_a conj(w_b)
        let products = [
            (self.slot(Slot::X(0)), self.slot(Slot::Y(0))),
            (self.slot(Slot::X(0)), self.slot(Slot::Y(1))),
            (self.slot(Slot::X(1)), self.slot(Slot::Y(0))),
            (self.slot(Slot::X(1)), self.slot(Slot::Y(1))),
        ];
        let mut row = 0;
        for &(a, b) in &products {
            for part in [ONE, -I] {
                sens.iter_mut().for_each(|s| *s = ZERO);
                for j in 0..m {
                    sens[a + j] = part * half * w.values[b + j].conj();
                    sens[b + j] = part.conj() * half * w.values[a + j].conj();
                }
                fill_row(row, &sens);
                row += 1;
            }
        }
        for k in 0..2 {
            for part in [ONE, -I] {
                sens.iter_mut().for_each(|s| *s = ZERO);
                sens[self.slot(Slot::F(k))] = part * half;
                fill_row(row, &sens);
                row += 1;
            }
        }
        let (a, b) = (self.slot(Slot::Y(0)), self.slot(Slot::Y(1)));
        for part in [ONE, -I] {
            sens.iter_mut().for_each(|s| *s = ZERO);
            for j in 0..m {
                sens[a + j] = part * half * w.values[b + j].conj();
                sens[b + j] = part.conj() * half * w.values[a + j].conj();
            }
            fill_row(row, &sens);
            row += 1;
        }
        (r, jac)
    }

    /// Sensitivities of `μ Σ |r|^2` added into `sens`; returns the penalty value.
    pub fn penalty_sensitivity(&self, w: &WEntries, mu: f64, sens: &mut [Complex64]) -> f64 {
        let m = self.n_nodes - 2;
        let res = self.residuals(w);
        let mut add_product = |a: usize, b: usize, r: Complex64| {
            for j in 0..m {
                sens[a + j] += mu * r.conj() * w.values[b + j].conj();
                sens[b + j] += mu * r * w.values[a + j].conj();
            }
        };
        for mi in 0..2 {
            for ni in 0..2 {
                add_product(self.slot(Slot::X(mi)), self.slot(Slot::Y(ni)), res.first_order[2 * mi + ni]);
            }
        }
        add_product(self.slot(Slot::Y(0)), self.slot(Slot::Y(1)), res.zero_order);
        for k in 0..2 {
            let f = self.slot(Slot::F(k));
            sens[f] += mu * w.values[f].conj();
        }
        mu * res.all().iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    /// Sensitivities of `Σ_k weight_k |λ_k|` over the six table factors added
    /// into `sens`; returns the value.
    pub fn magnitude_sensitivity(&self, w: &WEntries, weights: &[f64; 6], sens: &mut [Complex64]) -> f64 {
        let (ia, ib, ic) = (self.slot(Slot::A), self.slot(Slot::B), self.slot(Slot::C));
        let (a, b, c) = (w.values[ia], w.values[ib], w.values[ic]);
        let (na, nb, nc) = (a.norm(), b.norm(), c.norm());
        // d|z| = 2 Re( conj(z)/(2|z|) dz )
        let unit = |z: Complex64, nz: f64| if nz > 0.0 { z.conj() / (2.0 * nz) } else { ZERO };
        let (ua, ub, uc) = (unit(a, na), unit(b, nb), unit(c, nc));
        // |λ0|=|A||B|, |λ1_00;01|=|A|, |λ1_00;10|=|B|, |λ1_01;11|=|A||C|, |λ1_10;11|=|B||C|, |λ2|=|C|
        let da = weights[0] * nb + weights[1] + weights[3] * nc;
        let db = weights[0] * na + weights[2] + weights[4] * nc;
        let dc = weights[3] * na + weights[4] * nb + weights[5];
        sens[ia] += ua * da;
        sens[ib] += ub * db;
        sens[ic] += uc * dc;
        let mags = [na * nb, na, nb, na * nc, nb * nc, nc];
        mags.iter().zip(weights).map(|(m, w)| m * w).sum()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }
}

/// W entries in the [`RestoringSystem`] layout.
#[derive(Debug, Clone)]
pub struct WEntries {
    pub values: Vec<Complex64>,
}
