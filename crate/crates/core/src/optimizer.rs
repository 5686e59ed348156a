//! Multi-start constrained maximization of scale-factor magnitudes over the
//! 42 angles of `V0`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{ChainSpec, CouplingModel};
use crate::dynamics::Propagator;
use crate::error::{Error, Result};
use crate::optim::{bfgs, BfgsOptions};
use crate::restorer::{build_v0, ConstraintResiduals, PhiParams, PhiRecord, RestoringSystem, ScaleFactors, N_PHI};

/// Chain length, boundary ratios and registration time of the optimized line
/// the published angles belong to.
pub const PUBLISHED_N: usize = 42;
pub const PUBLISHED_RATIOS: (f64, f64) = (0.3005, 0.5311);
pub const PUBLISHED_TIME: f64 = 58.9826;

pub fn published_chain() -> ChainSpec {
    ChainSpec::with_boundary(PUBLISHED_N, PUBLISHED_RATIOS.0, PUBLISHED_RATIOS.1, CouplingModel::FullDipole)
}

const PUBLISHED_PHI1: [f64; 21] = [
    3.2173, 1.5820, 1.9863, 2.9836, 1.6892, -0.0758, 2.9802, 3.3090, 1.9777, 1.5586, 2.5019, 3.1337, 0.4114,
    1.7915, 2.8966, 5.0837, 0.6389, 3.7066, 2.7775, 0.5211, 6.3862,
];
const PUBLISHED_PHI2: [f64; 21] = [
    4.6606, 4.1773, 3.8653, 2.8152, 1.5472, 5.9730, 6.5792, 3.4037, 2.0048, 4.5361, 2.9224, 3.2409, 5.7006,
    4.5986, 0.1255, 2.4180, 5.6101, 3.2203, 5.5717, 6.2622, 4.2717,
];

/// The published angle set for the sum-of-all-factors row.
pub fn load_published_phi() -> PhiParams {
    let mut v = [0.0; N_PHI];
    for k in 0..21 {
        v[2 * k] = PUBLISHED_PHI2[k];
        v[2 * k + 1] = PUBLISHED_PHI1[k];
    }
    PhiParams::from_canonical(v)
}

/// Published magnitudes: the bold diagonal of rows 1-6 and the full row 7.
pub const PUBLISHED_BOLD: [f64; 6] = [0.3501, 0.8122, 0.9359, 0.5525, 0.5568, 0.7239];
pub const PUBLISHED_ROW7: [f64; 6] = [0.3489, 0.3868, 0.9019, 0.2201, 0.5132, 0.5690];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum Target {
    L0_flip,
    L1_00_01,
    L1_00_10,
    L1_01_11,
    L1_10_11,
    L2,
    SumAll,
}

impl Target {
    pub const ALL: [Target; 7] =
        [Target::L0_flip, Target::L1_00_01, Target::L1_00_10, Target::L1_01_11, Target::L1_10_11, Target::L2, Target::SumAll];

    /// Column of the table row, `None` for the sum.
    pub fn column(self) -> Option<usize> {
        match self {
            Target::SumAll => None,
            t => Some(t as usize),
        }
    }

    pub fn weights(self) -> [f64; 6] {
        match self.column() {
            Some(c) => {
                let mut w = [0.0; 6];
                w[c] = 1.0;
                w
            }
            None => [1.0; 6],
        }
    }

    /// Selection rule applied to near-equal optima.
    pub fn default_selection(self) -> SelectionRule {
        match self {
            Target::SumAll => SelectionRule::MaxMinFactor,
            _ => SelectionRule::MaxSumOfOthers,
        }
    }

    pub fn objective(self, magnitudes: &[f64; 6]) -> f64 {
        self.weights().iter().zip(magnitudes).map(|(w, m)| w * m).sum()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidTask(format!("unknown target {s:?}; expected one of {:?}", Target::ALL)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionRule {
    MaxSumOfOthers,
    MaxMinFactor,
}

impl SelectionRule {
    pub fn metric(self, target: Target, magnitudes: &[f64; 6]) -> f64 {
        match self {
            SelectionRule::MaxSumOfOthers => {
                let total: f64 = magnitudes.iter().sum();
                total - target.column().map_or(0.0, |c| magnitudes[c])
            }
            SelectionRule::MaxMinFactor => magnitudes.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

impl FromStr for SelectionRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxsumofothers" => Ok(SelectionRule::MaxSumOfOthers),
            "maxminfactor" => Ok(SelectionRule::MaxMinFactor),
            _ => Err(Error::InvalidTask(format!("unknown selection rule {s:?}"))),
        }
    }
}

pub const DEFAULT_RESTARTS: usize = 1000;
pub const DEFAULT_PENALTY_SCHEDULE: [f64; 3] = [10.0, 1e3, 1e5];
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-10;
pub const DEFAULT_TIE_TOL: f64 = 1e-4;

/// Note recorded with every sum-of-all result.
pub const SUM_ALL_NOTE: &str = "SumAll maximizes the unweighted sum of the six magnitudes; ties are broken by the largest minimal factor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationTask {
    pub target: Target,
    pub restarts: usize,
    pub seed: u64,
    pub penalty_weight_schedule: Vec<f64>,
    /// Residual max-norm below which a point counts as feasible.
    pub convergence_tol: f64,
    pub selection_rule: SelectionRule,
    /// Feasible objectives within this of the best are compared by the selection rule.
    pub tie_tolerance: f64,
}

impl Default for OptimizationTask {
    fn default() -> Self {
        OptimizationTask::new(Target::SumAll, DEFAULT_RESTARTS, 0)
    }
}

impl OptimizationTask {
    pub fn new(target: Target, restarts: usize, seed: u64) -> Self {
        OptimizationTask {
            target,
            restarts,
            seed,
            penalty_weight_schedule: DEFAULT_PENALTY_SCHEDULE.to_vec(),
            convergence_tol: DEFAULT_FEASIBILITY_TOL,
            selection_rule: target.default_selection(),
            tie_tolerance: DEFAULT_TIE_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidTask("restarts must be at least 1".into()));
        }
        if self.penalty_weight_schedule.is_empty() || self.penalty_weight_schedule.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidTask("penalty weights must be positive and finite".into()));
        }
        if [self.convergence_tol, self.tie_tolerance].iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::InvalidTask("tolerances must be positive".into()));
        }
        Ok(())
    }
}

mod phi_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(phi: &PhiParams, s: S) -> std::result::Result<S::Ok, S::Error> {
        phi.to_records().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<PhiParams, D::Error> {
        let records = Vec::<PhiRecord>::deserialize(d)?;
        PhiParams::from_records(&records).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub target: Target,
    #[serde(with = "phi_serde")]
    pub phi: PhiParams,
    pub factors: ScaleFactors,
    pub magnitudes: [f64; 6],
    pub residuals: ConstraintResiduals,
    pub residual_max: f64,
    pub feasible: bool,
    pub objective: f64,
    pub selection_metric: f64,
    pub restart_index: usize,
    pub wall_time: f64,
}

impl OptimizationResult {
    /// Equality of everything except the wall time.
    pub fn same_outcome(&self, other: &OptimizationResult) -> bool {
        OptimizationResult { wall_time: 0.0, ..self.clone() } == OptimizationResult { wall_time: 0.0, ..other.clone() }
    }
}

fn penalized(sys: &RestoringSystem, target: Target, mu: f64, x: &[f64], grad: &mut [f64]) -> f64 {
    let phi = PhiParams::from_slice(x).expect("42 angles");
    let v0 = build_v0(&phi);
    let w = sys.entries(&v0);
    let mut sens = vec![Complex64::new(0.0, 0.0); sys.entry_count()];
    let penalty = sys.penalty_sensitivity(&w, mu, &mut sens);
    let neg_weights = target.weights().map(|w| -w);
    let obj = sys.magnitude_sensitivity(&w, &neg_weights, &mut sens);
    grad.copy_from_slice(&sys.pullback(&phi, &v0, &sens));
    obj + penalty
}

/// Minimum-norm Gauss-Newton steps onto the constraint manifold.
pub fn project_to_constraints(sys: &RestoringSystem, phi: &PhiParams, tol: f64, max_iters: usize) -> PhiParams {
    let mut phi = *phi;
    let mut best = (residual_norm(sys, &phi), phi);
    for _ in 0..max_iters {
        let (r, jac) = sys.residual_jacobian(&phi);
        let rmax = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if rmax <= tol * 1e-2 {
            break;
        }
        let jjt = &jac * jac.transpose();
        let rv = DVector::from_row_slice(&r);
        let damping = 1e-14 * jjt.diagonal().max().max(1.0);
        let system = jjt + DMatrix::<f64>::identity(14, 14) * damping;
        let Some(y) = system.cholesky().map(|c| c.solve(&rv)) else { break };
        let step = jac.transpose() * y;
        let mut next = phi.as_slice().to_vec();
        next.iter_mut().zip(step.iter()).for_each(|(x, d)| *x -= d);
        phi = PhiParams::from_slice(&next).expect("42 angles");
        let norm = residual_norm(sys, &phi);
        if norm < best.0 {
            best = (norm, phi);
        } else if norm > 10.0 * best.0 {
            break;
        }
    }
    best.1
}

fn residual_norm(sys: &RestoringSystem, phi: &PhiParams) -> f64 {
    sys.residuals(&sys.entries(&build_v0(phi))).max_abs()
}

/// Draws the starting angles of restart `r`.
pub fn restart_start(seed: u64, restart: usize) -> PhiParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    let mut v = [0.0; N_PHI];
    v.iter_mut().for_each(|x| *x = rng.random_range(0.0..std::f64::consts::TAU));
    PhiParams::from_canonical(v)
}

fn run_restart(sys: &RestoringSystem, task: &OptimizationTask, restart: usize) -> OptimizationResult {
    let started = Instant::now();
    let mut x = restart_start(task.seed, restart).as_slice().to_vec();
    let opts = BfgsOptions { grad_tol: 1e-9, f_tol: 1e-14, max_iters: 3000 };
    for &mu in &task.penalty_weight_schedule {
        x = bfgs(|x, g| penalized(sys, task.target, mu, x, g), &x, &opts).x;
    }
    let phi = project_to_constraints(sys, &PhiParams::from_slice(&x).expect("42 angles"), task.convergence_tol, 50);
    let mut result = evaluate(sys, task, &phi, restart);
    result.wall_time = started.elapsed().as_secs_f64();
    result
}

/// Scores a fixed angle set under `task`.
pub fn evaluate(sys: &RestoringSystem, task: &OptimizationTask, phi: &PhiParams, restart_index: usize) -> OptimizationResult {
    let (residuals, factors) = sys.evaluate(&build_v0(phi));
    let magnitudes = factors.magnitudes();
    let residual_max = residuals.max_abs();
    OptimizationResult {
        target: task.target,
        phi: *phi,
        factors,
        magnitudes,
        residuals,
        residual_max,
        feasible: residual_max <= task.convergence_tol,
        objective: task.target.objective(&magnitudes),
        selection_metric: task.selection_rule.metric(task.target, &magnitudes),
        restart_index,
        wall_time: 0.0,
    }
}

/// Picks the winner among completed restarts. Independent of the order of
/// `candidates`.
pub fn select(candidates: &[OptimizationResult], tie_tolerance: f64) -> Option<&OptimizationResult> {
    let best = candidates.iter().filter(|c| c.feasible).map(|c| c.objective).fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .filter(|c| c.feasible && c.objective >= best - tie_tolerance)
        .max_by(|a, b| {
            a.selection_metric
                .total_cmp(&b.selection_metric)
                .then_with(|| b.restart_index.cmp(&a.restart_index))
        })
}

/// Runs all restarts of `task` at registration time `t`.
pub fn optimize_phi(task: &OptimizationTask, prop: &Propagator, t: f64) -> Result<OptimizationResult> {
    task.validate()?;
    let sys = RestoringSystem::new(prop, t)?;
    let started = Instant::now();
    let candidates: Vec<OptimizationResult> =
        (0..task.restarts).into_par_iter().map(|r| run_restart(&sys, task, r)).collect();
    let wall_time = started.elapsed().as_secs_f64();
    match select(&candidates, task.tie_tolerance) {
        Some(best) => Ok(OptimizationResult { wall_time, ..best.clone() }),
        None => {
            let best = candidates
                .iter()
                .min_by(|a, b| a.residual_max.total_cmp(&b.residual_max).then(a.restart_index.cmp(&b.restart_index)))
                .expect("at least one restart");
            Err(Error::NoFeasiblePoint {
                restarts: task.restarts,
                best_residual: best.residual_max,
                best: Box::new(OptimizationResult { wall_time, ..best.clone() }),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub rows: Vec<OptimizationResult>,
}

impl Table1 {
    /// Maximized magnitude of each single-target row.
    pub fn bold_diagonal(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.target.column().map(|c| r.magnitudes[c])).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        ScaleFactors::write_csv_header(&mut w, &["row", "target", "residual_max", "restart_index"])?;
        for (k, r) in self.rows.iter().enumerate() {
            let leading = [
                (k + 1).to_string(),
                r.target.to_string(),
                format!("{:.3e}", r.residual_max),
                r.restart_index.to_string(),
            ];
            r.factors.write_csv_row(&mut w, &leading)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The six single-target rows and the sum row, each with `restarts` restarts.
pub fn reproduce_table1(prop: &Propagator, t: f64, seed: u64, restarts: usize) -> Result<Table1> {
    let rows = Target::ALL
        .iter()
        .map(|&target| optimize_phi(&OptimizationTask::new(target, restarts, seed), prop, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Table1 { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_system() -> (Propagator, f64) {
        let spec = ChainSpec::with_boundary(10, 0.45, 0.7, CouplingModel::FullDipole);
        let prop = Propagator::for_chain(&spec).unwrap();
        (prop, 9.0)
    }

    #[test]
    fn published_angles_verbatim() {
        let phi = load_published_phi();
        assert_eq!(phi.as_slice().len(), 42);
        use crate::restorer::Family;
        assert_eq!(phi.get(Family::Symmetric, 2, 3).unwrap(), 3.2173);
        assert_eq!(phi.get(Family::Antisymmetric, 10, 11).unwrap(), 4.2717);
        assert_eq!(phi.get(Family::Symmetric, 4, 6).unwrap(), -0.0758);
    }

    #[test]
    fn target_names_round_trip() {
        for t in Target::ALL {
            assert_eq!(t.to_string().parse::<Target>().unwrap(), t);
        }
        assert!("L3".parse::<Target>().is_err());
        assert_eq!(Target::SumAll.default_selection(), SelectionRule::MaxMinFactor);
    }

    #[test]
    fn task_validation() {
        assert!(OptimizationTask::new(Target::L2, 0, 1).validate().is_err());
        let mut t = OptimizationTask::new(Target::L2, 1, 1);
        t.penalty_weight_schedule = vec![10.0, -1.0];
        assert!(t.validate().is_err());
        t.penalty_weight_schedule = vec![];
        assert!(t.validate().is_err());
        let mut t = OptimizationTask::new(Target::L2, 1, 1);
        t.convergence_tol = 0.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn restart_streams_differ_and_repeat() {
        assert_eq!(restart_start(7, 3), restart_start(7, 3));
        assert_ne!(restart_start(7, 3).as_slice(), restart_start(7, 4).as_slice());
        assert_ne!(restart_start(7, 3).as_slice(), restart_start(8, 3).as_slice());
        assert!(restart_start(1, 0).as_slice().iter().all(|&x| (0.0..std::f64::consts::TAU).contains(&x)));
    }

    #[test]
    fn single_restart_is_feasible_and_deterministic() {
        let (prop, t) = small_system();
        let task = OptimizationTask::new(Target::L2, 1, 42);
        let a = optimize_phi(&task, &prop, t).unwrap();
        let b = optimize_phi(&task, &prop, t).unwrap();
        assert!(a.same_outcome(&b));
        assert!(a.feasible && a.residual_max <= 1e-10);
        let fresh = RestoringSystem::new(&prop, t).unwrap();
        assert!(fresh.evaluate(&build_v0(&a.phi)).0.max_abs() <= 1e-10);
    }

    #[test]
    fn selection_ignores_order() {
        let (prop, t) = small_system();
        let task = OptimizationTask::new(Target::L1_00_10, 4, 3);
        let sys = RestoringSystem::new(&prop, t).unwrap();
        let mut cands: Vec<_> = (0..4).map(|r| run_restart(&sys, &task, r)).collect();
        let forward = select(&cands, task.tie_tolerance).cloned();
        cands.reverse();
        let backward = select(&cands, task.tie_tolerance).cloned();
        assert_eq!(forward.map(|r| r.restart_index), backward.map(|r| r.restart_index));
    }

    #[test]
    fn selection_rules() {
        let m = [0.1, 0.2, 0.9, 0.3, 0.4, 0.5];
        assert!((SelectionRule::MaxSumOfOthers.metric(Target::L1_00_10, &m) - 1.5).abs() < 1e-15);
        assert_eq!(SelectionRule::MaxMinFactor.metric(Target::SumAll, &m), 0.1);
        assert!((Target::SumAll.objective(&m) - 2.4).abs() < 1e-15);
    }

    #[test]
    fn infeasible_task_reports_best_candidate() {
        let (prop, t) = small_system();
        let mut task = OptimizationTask::new(Target::L2, 1, 5);
        task.penalty_weight_schedule = vec![1e-6];
        task.convergence_tol = 1e-300;
        match optimize_phi(&task, &prop, t) {
            Err(Error::NoFeasiblePoint { restarts, best, .. }) => {
                assert_eq!(restarts, 1);
                assert!(!best.feasible);
            }
            other => panic!("expected NoFeasiblePoint, got {other:?}"),
        }
    }

    #[test]
    fn result_json_round_trip() {
        let (prop, t) = small_system();
        let sys = RestoringSystem::new(&prop, t).unwrap();
        let task = OptimizationTask::new(Target::L0_flip, 1, 0);
        let r = evaluate(&sys, &task, &restart_start(0, 0), 0);
        let back: OptimizationResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert!(back.same_outcome(&r));
    }
}
