//! Sector eigendecomposition, propagator elements and the transfer-amplitude
//! optimizers (registration time and boundary couplings).

use nalgebra::linalg::SymmetricTridiagonal;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{
    build_couplings, build_sector_hamiltonian, sector_basis, sector_hamiltonians, ChainSpec,
    CouplingModel, Pattern, SectorBasis, SectorOperator, MAX_EXCITATIONS,
};
use crate::error::{Error, Result};
use crate::optim::{golden_section_max, nelder_mead, NelderMeadOptions};

const HERMITIAN_TOL: f64 = 1e-10;

/// Eigenpairs of one sector Hamiltonian.
#[derive(Debug, Clone)]
pub struct SectorSpectrum {
    pub basis: SectorBasis,
    pub eigenvalues: DVector<f64>,
    /// Columns are eigenvectors.
    pub eigenvectors: DMatrix<f64>,
}

impl SectorSpectrum {
    fn phases(&self, t: f64) -> Vec<Complex64> {
        self.eigenvalues.iter().map(|&e| Complex64::from_polar(1.0, -e * t)).collect()
    }

    /// `e^{-iHt}` restricted to this sector.
    pub fn unitary(&self, t: f64) -> DMatrix<Complex64> {
        let v = &self.eigenvectors;
        let ph = self.phases(t);
        let dim = v.nrows();
        let mut u = DMatrix::<Complex64>::zeros(dim, dim);
        for k in 0..dim {
            for c in 0..dim {
                let right = ph[k] * v[(c, k)];
                for r in 0..dim {
                    u[(r, c)] += right * v[(r, k)];
                }
            }
        }
        u
    }

    /// Column `e^{-iHt}|ket>` in this sector's basis.
    pub fn column(&self, t: f64, ket: usize) -> DVector<Complex64> {
        let v = &self.eigenvectors;
        let ph = self.phases(t);
        let coef: Vec<Complex64> = (0..v.ncols()).map(|k| ph[k] * v[(ket, k)]).collect();
        DVector::from_fn(v.nrows(), |r, _| {
            (0..v.ncols()).map(|k| coef[k] * v[(r, k)]).sum()
        })
    }
}

/// Per-sector spectral data for `Ṽ(t) = e^{-iHt}`, sectors `k = 0, 1, 2`.
#[derive(Debug, Clone)]
pub struct Propagator {
    sectors: Vec<SectorSpectrum>,
    spec: Option<ChainSpec>,
}

/// A propagator matrix element. Cross-sector requests are exactly zero and
/// flagged as such.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagatorElement {
    pub value: Complex64,
    pub structural_zero: bool,
}

pub fn eigendecompose(hamiltonians: &[SectorOperator]) -> Result<Propagator> {
    let mut sectors: Vec<SectorSpectrum> = Vec::with_capacity(hamiltonians.len());
    for h in hamiltonians {
        let asym = (&h.matrix - h.matrix.transpose()).amax();
        if asym > HERMITIAN_TOL {
            return Err(Error::NonHermitian(asym));
        }
        let eig = h.matrix.clone().symmetric_eigen();
        sectors.push(SectorSpectrum {
            basis: h.basis.clone(),
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        });
    }
    sectors.sort_by_key(|s| s.basis.excitations());
    Ok(Propagator { sectors, spec: None })
}

impl Propagator {
    /// Builds and diagonalizes sectors `0..=2` for a chain.
    pub fn for_chain(spec: &ChainSpec) -> Result<Propagator> {
        let mut p = eigendecompose(&sector_hamiltonians(spec)?)?;
        p.spec = Some(*spec);
        Ok(p)
    }

    pub fn spec(&self) -> Option<&ChainSpec> {
        self.spec.as_ref()
    }

    pub fn n_nodes(&self) -> usize {
        self.sectors[0].basis.n_nodes()
    }

    pub fn sector(&self, k: usize) -> Option<&SectorSpectrum> {
        self.sectors.iter().find(|s| s.basis.excitations() == k)
    }

    pub fn sectors(&self) -> &[SectorSpectrum] {
        &self.sectors
    }

    /// `<bra| e^{-iHt} |ket>`.
    pub fn element(&self, t: f64, bra: Pattern, ket: Pattern) -> Result<PropagatorElement> {
        let k = ket.excitations();
        if bra.excitations() != k {
            return Ok(PropagatorElement { value: Complex64::new(0.0, 0.0), structural_zero: true });
        }
        if k > MAX_EXCITATIONS {
            return Err(Error::UnsupportedSector(k));
        }
        let s = self.sector(k).ok_or(Error::UnsupportedSector(k))?;
        let (i, j) = match (s.basis.index_of(bra), s.basis.index_of(ket)) {
            (Some(i), Some(j)) => (i, j),
            _ => {
                return Err(Error::DimensionMismatch {
                    expected: s.basis.n_nodes(),
                    found: bra.nodes().chain(ket.nodes()).max().unwrap_or(0),
                })
            }
        };
        let v = &s.eigenvectors;
        let value = s
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(m, &e)| Complex64::from_polar(v[(i, m)] * v[(j, m)], -e * t))
            .sum();
        Ok(PropagatorElement { value, structural_zero: false })
    }

    /// Spectral form of `<0…011| Ṽ(t) |110…0>`.
    pub fn transfer_spectrum(&self) -> Result<TransferSpectrum> {
        let n = self.n_nodes();
        let s = self.sector(2).ok_or(Error::UnsupportedSector(2))?;
        let a = s.basis.index_of(Pattern::from_nodes(&[1, 2])).unwrap();
        let b = s.basis.index_of(Pattern::from_nodes(&[n - 1, n])).unwrap();
        let v = &s.eigenvectors;
        Ok(TransferSpectrum {
            frequencies: s.eigenvalues.iter().copied().collect(),
            weights: (0..v.ncols()).map(|m| v[(a, m)] * v[(b, m)]).collect(),
        })
    }
}

pub fn propagator_element(prop: &Propagator, t: f64, bra: Pattern, ket: Pattern) -> Result<PropagatorElement> {
    prop.element(t, bra, ket)
}

/// `|<0_{N-2} 11| Ṽ(t) |11 0_{N-2}>|^2`.
pub fn transfer_probability(prop: &Propagator, t: f64) -> Result<f64> {
    Ok(prop.transfer_spectrum()?.probability(t))
}

/// Amplitude `Σ_m w_m e^{-i ω_m t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSpectrum {
    pub frequencies: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Evaluation points between exact phase resynchronizations during scans.
const RESYNC: usize = 256;

impl TransferSpectrum {
    pub fn amplitude(&self, t: f64) -> Complex64 {
        self.frequencies
            .iter()
            .zip(&self.weights)
            .map(|(&w, &c)| Complex64::from_polar(c, -w * t))
            .sum()
    }

    pub fn probability(&self, t: f64) -> f64 {
        self.amplitude(t).norm_sqr()
    }

    /// Probability on the grid `start, start+step, …` up to `end` inclusive.
    pub fn scan(&self, start: f64, end: f64, step: f64) -> Vec<(f64, f64)> {
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        let mult: Vec<Complex64> =
            self.frequencies.iter().map(|&w| Complex64::from_polar(1.0, -w * step)).collect();
        let mut phase: Vec<Complex64> = Vec::new();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let t = start + i as f64 * step;
            if i % RESYNC == 0 {
                phase = self
                    .frequencies
                    .iter()
                    .zip(&self.weights)
                    .map(|(&w, &c)| Complex64::from_polar(c, -w * t))
                    .collect();
            }
            let amp: Complex64 = phase.iter().sum();
            out.push((t, amp.norm_sqr()));
            phase.iter_mut().zip(&mult).for_each(|(p, m)| *p *= m);
        }
        out
    }

    /// Global maximizer on `[start, end]`: grid scan, then golden-section
    /// refinement within one step of the best grid point. Ties keep the
    /// smaller time.
    pub fn maximize(&self, window: TimeWindow, step: f64) -> Result<TransferOptimum> {
        window.validate()?;
        let step = step.min(window.end - window.start);
        let grid = self.scan(window.start, window.end, step);
        let (t0, _) = grid
            .iter()
            .copied()
            .fold((window.start, f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best });
        let lo = (t0 - step).max(window.start);
        let hi = (t0 + step).min(window.end);
        let (t, value) = golden_section_max(|t| self.probability(t), lo, hi, 1e-9);
        let (t, value) = if value >= self.probability(t0) { (t, value) } else { (t0, self.probability(t0)) };
        Ok(TransferOptimum { t_max: t, value, ratios: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Self {
        TimeWindow { start, end }
    }

    /// `[0, 3N/δ]`.
    pub fn default_for(spec: &ChainSpec) -> Self {
        TimeWindow::new(0.0, 3.0 * spec.n_nodes as f64 / spec.base_coupling)
    }

    fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.end <= self.start || self.start < 0.0 {
            return Err(Error::DegenerateWindow(self.start, self.end));
        }
        Ok(())
    }
}

pub const DEFAULT_TIME_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferOptimum {
    pub t_max: f64,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ratios: Option<(f64, f64)>,
}

pub fn optimize_registration_time(prop: &Propagator, window: TimeWindow, step: f64) -> Result<TransferOptimum> {
    prop.transfer_spectrum()?.maximize(window, step)
}

/// Transfer spectrum of a mirror-symmetric chain computed from the two
/// reflection-parity blocks of the two-excitation sector.
///
/// `|b> = R|a>` with `|a> = |110…0>`, so `<b|U|a> = (<e|U|e> - <o|U|o>)/2`
/// where `e`, `o` are the parity projections of `a`. Only the spectral
/// weights of `e` and `o` are needed: each block is tridiagonalized with the
/// start vector kept as the first basis element and the first eigenvector
/// components are tracked through implicit QL sweeps.
pub fn mirror_transfer_spectrum(spec: &ChainSpec) -> Result<TransferSpectrum> {
    let couplings = build_couplings(spec)?;
    let n = spec.n_nodes;
    let basis = sector_basis(n, 2)?;
    let h = &build_sector_hamiltonian(&couplings, &basis)?.matrix;

    // orbits {p, Rp}, starting with the orbit of |110…0>
    let start = Pattern::from_nodes(&[1, 2]);
    let mut orbits: Vec<(usize, Option<usize>)> = Vec::new();
    let mut seen = vec![false; basis.len()];
    let push = |p: Pattern, seen: &mut Vec<bool>, orbits: &mut Vec<(usize, Option<usize>)>| {
        let i = basis.index_of(p).unwrap();
        if seen[i] {
            return;
        }
        let j = basis.index_of(p.reflect(n)).unwrap();
        seen[i] = true;
        seen[j] = true;
        orbits.push((i, if i == j { None } else { Some(j) }));
    };
    push(start, &mut seen, &mut orbits);
    for &p in basis.states() {
        push(p, &mut seen, &mut orbits);
    }

    let block = |sign: f64| -> DMatrix<f64> {
        let members: Vec<&(usize, Option<usize>)> =
            orbits.iter().filter(|o| sign > 0.0 || o.1.is_some()).collect();
        let amp = |o: &(usize, Option<usize>)| -> Vec<(usize, f64)> {
            match o.1 {
                None => vec![(o.0, 1.0)],
                Some(j) => vec![(o.0, std::f64::consts::FRAC_1_SQRT_2), (j, sign * std::f64::consts::FRAC_1_SQRT_2)],
            }
        };
        let amps: Vec<Vec<(usize, f64)>> = members.iter().map(|o| amp(o)).collect();
        DMatrix::from_fn(amps.len(), amps.len(), |r, c| {
            amps[r]
                .iter()
                .flat_map(|&(i, ci)| amps[c].iter().map(move |&(j, cj)| ci * cj * h[(i, j)]))
                .sum()
        })
    };

    let mut frequencies = Vec::with_capacity(basis.len());
    let mut weights = Vec::with_capacity(basis.len());
    for sign in [1.0, -1.0] {
        let (evals, first) = first_component_spectrum(block(sign))?;
        frequencies.extend(evals);
        weights.extend(first.into_iter().map(|z| 0.5 * sign * z * z));
    }
    Ok(TransferSpectrum { frequencies, weights })
}

/// Eigenvalues of a real symmetric matrix together with the first component
/// of each normalized eigenvector.
pub fn first_component_spectrum(m: DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = m.nrows();
    if dim == 1 {
        return Ok((vec![m[(0, 0)]], vec![1.0]));
    }
    // Householder reduction leaves e_0 invariant, so first components carry over.
    let tri = SymmetricTridiagonal::new(m);
    let (diag, off) = tri.unpack_tridiagonal();
    let mut d: Vec<f64> = diag.iter().copied().collect();
    let mut e: Vec<f64> = off.iter().copied().collect();
    e.push(0.0);
    let mut z = vec![0.0; dim];
    z[0] = 1.0;
    tql_first_row(&mut d, &mut e, &mut z)?;
    Ok((d, z))
}

/// Implicit QL with Wilkinson shifts on a symmetric tridiagonal matrix
/// (`d` diagonal, `e[i]` coupling `i` and `i+1`, `e[n-1] = 0`), applying the
/// rotations only to the row vector `z`.
fn tql_first_row(d: &mut [f64], e: &mut [f64], z: &mut [f64]) -> Result<()> {
    let n = d.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::Eigen(format!("tridiagonal QL stalled at index {l}")));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BoundarySearchOptions {
    pub window: Option<TimeWindow>,
    pub time_step: f64,
    /// Points per axis of the starting grid over `(0, upper]^2`.
    pub grid: usize,
    /// Nelder–Mead runs launched from the best grid points.
    pub starts: usize,
    pub upper: f64,
}

impl Default for BoundarySearchOptions {
    fn default() -> Self {
        BoundarySearchOptions { window: None, time_step: DEFAULT_TIME_STEP, grid: 5, starts: 3, upper: 1.5 }
    }
}

/// Best transfer over the window for given boundary ratios.
pub fn boundary_objective(n_nodes: usize, model: CouplingModel, r1: f64, r2: f64, window: TimeWindow, step: f64) -> Result<TransferOptimum> {
    let spec = ChainSpec::with_boundary(n_nodes, r1, r2, model);
    let mut opt = mirror_transfer_spectrum(&spec)?.maximize(window, step)?;
    opt.ratios = Some((r1, r2));
    Ok(opt)
}

/// Joint maximization of the transfer probability over time and the two
/// mirror-symmetric boundary ratios.
pub fn optimize_boundary_couplings(
    n_nodes: usize,
    model: CouplingModel,
    opts: &BoundarySearchOptions,
) -> Result<TransferOptimum> {
    ChainSpec::homogeneous(n_nodes, model).validate()?;
    let window = opts.window.unwrap_or_else(|| TimeWindow::default_for(&ChainSpec::homogeneous(n_nodes, model)));
    let upper = opts.upper;
    let eval = |r1: f64, r2: f64| -> f64 {
        if !(r1 > 0.0 && r2 > 0.0 && r1 <= upper && r2 <= upper) {
            return f64::INFINITY;
        }
        boundary_objective(n_nodes, model, r1, r2, window, opts.time_step)
            .map(|o| -o.value)
            .unwrap_or(f64::INFINITY)
    };

    let g = opts.grid.max(1);
    let cells: Vec<(f64, f64)> = (0..g)
        .flat_map(|i| (0..g).map(move |j| ((i as f64 + 0.5) * upper / g as f64, (j as f64 + 0.5) * upper / g as f64)))
        .collect();
    let mut scored: Vec<(f64, (f64, f64))> = cells.par_iter().map(|&(a, b)| (eval(a, b), (a, b))).collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1 .0.total_cmp(&y.1 .0)).then(x.1 .1.total_cmp(&y.1 .1)));

    let nm = NelderMeadOptions { initial_step: 0.5 * upper / g as f64, f_tol: 1e-10, x_tol: 1e-6, max_evals: 400 };
    let runs: Vec<_> = scored
        .iter()
        .take(opts.starts.max(1))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(_, (a, b))| nelder_mead(|x| eval(x[0], x[1]), &[*a, *b], &nm))
        .collect();
    let best = runs
        .iter()
        .min_by(|x, y| x.f.total_cmp(&y.f).then(x.x[0].total_cmp(&y.x[0])))
        .expect("at least one start");
    if !best.f.is_finite() {
        return Err(Error::NonConvergence { r1: best.x[0], r2: best.x[1], value: f64::NAN });
    }
    if !runs.iter().any(|r| r.converged) {
        return Err(Error::NonConvergence { r1: best.x[0], r2: best.x[1], value: -best.f });
    }
    boundary_objective(n_nodes, model, best.x[0], best.x[1], window, opts.time_step)
}
