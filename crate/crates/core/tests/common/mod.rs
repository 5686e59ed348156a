//! Brute-force reference: full 2^N Hilbert space, Kronecker-product spin
//! operators, Taylor scaling-and-squaring exponential, explicit partial trace.
#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64;
use qrestore::chain::{ChainSpec, CouplingModel};
use qrestore::qstate::Matrix4c;
use qrestore::restorer::{Family, PhiParams, GENERATOR_PAIRS};
use rand::Rng;

pub type CMat = DMatrix<Complex64>;

pub const MAX_ORACLE_NODES: usize = 10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

fn guard(n: usize) {
    assert!(n <= MAX_ORACLE_NODES, "brute-force oracle limited to N <= {MAX_ORACLE_NODES}, got {n}");
}

/// All-pair coupling constants from node positions, or nearest-neighbour only.
pub fn couplings(spec: &ChainSpec) -> DMatrix<f64> {
    let n = spec.n_nodes;
    let delta = spec.base_coupling;
    let mut nearest = vec![delta; n - 1];
    nearest[0] = delta * spec.boundary_ratio_1;
    nearest[n - 2] = delta * spec.boundary_ratio_1;
    nearest[1] = delta * spec.boundary_ratio_2;
    nearest[n - 3] = delta * spec.boundary_ratio_2;
    let mut d = DMatrix::zeros(n, n);
    match spec.coupling_model {
        CouplingModel::NearestNeighbor => {
            for k in 0..n - 1 {
                d[(k, k + 1)] = nearest[k];
                d[(k + 1, k)] = nearest[k];
            }
        }
        CouplingModel::FullDipole => {
            let mut x = vec![0.0; n];
            for k in 1..n {
                x[k] = x[k - 1] + (delta / nearest[k - 1]).cbrt();
            }
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        d[(i, j)] = delta / (x[i] - x[j]).abs().powi(3);
                    }
                }
            }
        }
    }
    d
}

/// `op` on node `node` (1-based), identity elsewhere. Node `k` is bit `k-1`
/// of the basis index, so the Kronecker factors run from node N down to 1.
fn site_operator(op: &CMat, node: usize, n: usize) -> CMat {
    let id = CMat::identity(2, 2);
    let mut out = CMat::identity(1, 1);
    for k in (1..=n).rev() {
        out = out.kronecker(if k == node { op } else { &id });
    }
    out
}

pub fn full_hamiltonian(spec: &ChainSpec) -> CMat {
    let n = spec.n_nodes;
    guard(n);
    let half = Complex64::new(0.5, 0.0);
    let ix = CMat::from_row_slice(2, 2, &[ZERO, half, half, ZERO]);
    let iy = CMat::from_row_slice(2, 2, &[ZERO, Complex64::new(0.0, -0.5), Complex64::new(0.0, 0.5), ZERO]);
    let d = couplings(spec);
    let xs: Vec<CMat> = (1..=n).map(|k| site_operator(&ix, k, n)).collect();
    let ys: Vec<CMat> = (1..=n).map(|k| site_operator(&iy, k, n)).collect();
    let mut h = CMat::zeros(1 << n, 1 << n);
    for i in 0..n {
        for j in i + 1..n {
            if d[(i, j)] != 0.0 {
                h += (&xs[i] * &xs[j] + &ys[i] * &ys[j]) * Complex64::new(d[(i, j)], 0.0);
            }
        }
    }
    h
}

pub fn expm(a: &CMat) -> CMat {
    let norm = (0..a.ncols()).map(|c| a.column(c).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let b = a / Complex64::new(2f64.powi(squarings), 0.0);
    let mut result = CMat::identity(a.nrows(), a.ncols());
    let mut term = result.clone();
    for k in 1..40 {
        term = &term * &b / Complex64::new(k as f64, 0.0);
        result += &term;
        if term.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

pub fn full_propagator(spec: &ChainSpec, t: f64) -> CMat {
    expm(&(full_hamiltonian(spec) * Complex64::new(0.0, -t)))
}

const ER_LABELS: [&str; 11] = ["0000", "0001", "0010", "0011", "0100", "0101", "0110", "1000", "1001", "1010", "1100"];

fn er_index(label: usize) -> usize {
    usize::from_str_radix(ER_LABELS[label - 1], 2).unwrap()
}

pub fn generator(family: Family, i: usize, j: usize) -> CMat {
    let (p, q) = (er_index(i), er_index(j));
    let mut g = CMat::zeros(16, 16);
    match family {
        Family::Symmetric => {
            g[(p, q)] = ONE;
            g[(q, p)] = ONE;
        }
        Family::Antisymmetric => {
            g[(p, q)] = Complex64::new(0.0, -1.0);
            g[(q, p)] = Complex64::new(0.0, 1.0);
        }
    }
    g
}

/// `V0` as the ordered product of matrix exponentials.
pub fn v0_by_exponentials(phi: &PhiParams) -> CMat {
    let mut v = CMat::identity(16, 16);
    for &(i, j) in &GENERATOR_PAIRS {
        let f1 = expm(&(generator(Family::Symmetric, i, j) * Complex64::new(0.0, phi.get(Family::Symmetric, i, j).unwrap())));
        let f2 = expm(
            &(generator(Family::Antisymmetric, i, j) * Complex64::new(0.0, phi.get(Family::Antisymmetric, i, j).unwrap())),
        );
        v = f2 * f1 * v;
    }
    v
}

fn occupied(index: usize, node: usize) -> bool {
    index >> (node - 1) & 1 == 1
}

/// Nodes `N-3..=N` of a full basis index as `8 n1 + 4 n2 + 2 n3 + n4`.
fn er_bits(index: usize, n: usize) -> usize {
    (0..4).fold(0, |acc, k| (acc << 1) | usize::from(occupied(index, n - 3 + k)))
}

/// `I ⊗ V0` on the full space.
pub fn embed_receiver_unitary(v0: &CMat, n: usize) -> CMat {
    guard(n);
    let head_mask = (1usize << (n - 4)) - 1;
    CMat::from_fn(1 << n, 1 << n, |a, b| {
        if a & head_mask == b & head_mask {
            v0[(er_bits(a, n), er_bits(b, n))]
        } else {
            ZERO
        }
    })
}

/// `ρ_S ⊗ |0…0><0…0|`, sender qubit 1 on node 1.
pub fn initial_state(rho_s: &Matrix4c, n: usize) -> CMat {
    let sender = |index: usize| 2 * usize::from(occupied(index, 1)) + usize::from(occupied(index, 2));
    CMat::from_fn(1 << n, 1 << n, |a, b| {
        if a >> 2 == 0 && b >> 2 == 0 {
            rho_s[(sender(a), sender(b))]
        } else {
            ZERO
        }
    })
}

/// Reduced state of nodes `N-1, N`.
pub fn partial_trace_receiver(rho: &CMat, n: usize) -> Matrix4c {
    let receiver = |index: usize| 2 * usize::from(occupied(index, n - 1)) + usize::from(occupied(index, n));
    let rest_mask = (1usize << (n - 2)) - 1;
    let mut out = Matrix4c::zeros();
    for a in 0..1 << n {
        for b in 0..1 << n {
            if a & rest_mask == b & rest_mask {
                out[(receiver(a), receiver(b))] += rho[(a, b)];
            }
        }
    }
    out
}

/// Full evolution followed by the receiver unitary and the partial trace.
pub fn brute_force_receiver(spec: &ChainSpec, v0: Option<&CMat>, t: f64, rho_s: &Matrix4c) -> Matrix4c {
    let n = spec.n_nodes;
    let mut w = full_propagator(spec, t);
    if let Some(v0) = v0 {
        w = embed_receiver_unitary(v0, n) * w;
    }
    let rho = &w * initial_state(rho_s, n) * w.adjoint();
    partial_trace_receiver(&rho, n)
}

pub fn random_phi<R: Rng>(rng: &mut R) -> PhiParams {
    let v: Vec<f64> = (0..42).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    PhiParams::from_slice(&v).unwrap()
}

/// Random density matrix `A A^+ / tr` with complex Gaussian-like entries.
pub fn random_density<R: Rng>(rng: &mut R) -> Matrix4c {
    let a = Matrix4c::from_fn(|_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let m = a * a.adjoint();
    let tr = m.trace();
    m / tr
}

pub fn max_diff(a: &Matrix4c, b: &Matrix4c) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}
