//! ReSeSOp engines: sequential Kaczmarz sweeps over per-subproblem stripes
//! and the simultaneous multi-direction update.
//!
//! The simultaneous update collects all search directions `u_i = A_i^* w_i`
//! at once and solves the quadratic system
//! `0 = a_i + kappa^T b_i + kappa^T C_i kappa` for the step sizes, where
//! `a_i = ||w_i||^2 - E_i^2`. Solving it exactly lands every subproblem
//! residual on its prescribed inexactness level; a damped Newton iteration
//! does this here. When Newton does not converge (for instance when the
//! prescribed levels are unreachable), the step falls back to a classical
//! Kaczmarz sweep and the fallback is recorded in the history.

use crate::error::{Error, Result};
use crate::grid::MeasurementVector;
use crate::operators::{split, OperatorHandle};
use crate::vec_ops::{axpy, dot, norm, sub};
use ndarray::{Array1, Array2};
use ndarray_linalg::Solve;

/// Hard cap on the number of search directions in one quadratic solve.
pub const MAX_DIRECTIONS: usize = 64;

/// Relative floor applied to zero widths so noise-free blocks do not demand
/// exact interpolation in floating point.
const WIDTH_FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthMode {
    /// Stripe widths are the oracle inexactness levels `E_i`.
    OracleE,
    /// Stripe widths are `delta + eta_i * rho`.
    AnalyticWidth,
}

/// Per-subproblem tolerances: oracle levels `E_i` or the analytic
/// `delta + eta_i * rho` widths, selected by `mode`.
#[derive(Debug, Clone, PartialEq)]
pub struct InexactnessProfile {
    pub e: Vec<f64>,
    pub delta: f64,
    pub eta: Vec<f64>,
    pub rho: f64,
    pub mode: WidthMode,
}

impl InexactnessProfile {
    pub fn oracle(e: Vec<f64>) -> Self {
        let n = e.len();
        InexactnessProfile {
            e,
            delta: 0.0,
            eta: vec![0.0; n],
            rho: 1.0,
            mode: WidthMode::OracleE,
        }
    }

    pub fn analytic(delta: f64, eta: Vec<f64>, rho: f64) -> Self {
        let n = eta.len();
        InexactnessProfile {
            e: vec![0.0; n],
            delta,
            eta,
            rho,
            mode: WidthMode::AnalyticWidth,
        }
    }

    pub fn validate(&self, n_dir: usize) -> Result<()> {
        let len = match self.mode {
            WidthMode::OracleE => self.e.len(),
            WidthMode::AnalyticWidth => self.eta.len(),
        };
        if len != n_dir {
            return Err(Error::ShapeMismatch {
                expected: n_dir,
                got: len,
                context: "inexactness profile length",
            });
        }
        if self.delta < 0.0 || self.rho <= 0.0 {
            return Err(Error::invalid("delta must be >= 0 and rho > 0"));
        }
        if self.e.iter().chain(&self.eta).any(|v| *v < 0.0) {
            return Err(Error::invalid("inexactness levels must be >= 0"));
        }
        Ok(())
    }

    /// Raw width of block `i` before the numerical floor.
    pub fn width(&self, i: usize) -> f64 {
        match self.mode {
            WidthMode::OracleE => self.e[i],
            WidthMode::AnalyticWidth => self.delta + self.eta[i] * self.rho,
        }
    }
}

/// A forward operator split into subproblems, together with the data.
pub struct SubproblemSystem {
    pub full_op: OperatorHandle,
    pub subops: Vec<OperatorHandle>,
    pub data: MeasurementVector,
}

impl SubproblemSystem {
    pub fn new(full_op: OperatorHandle, data: MeasurementVector) -> Result<Self> {
        let subops = split(&full_op, &data.partition)?;
        Ok(SubproblemSystem {
            full_op,
            subops,
            data,
        })
    }

    pub fn n_dir(&self) -> usize {
        self.subops.len()
    }

    pub fn y_block(&self, i: usize) -> &[f64] {
        self.data.block(i)
    }

    /// Stripe widths with the numerical floor applied.
    pub fn widths(&self, profile: &InexactnessProfile) -> Result<Vec<f64>> {
        profile.validate(self.n_dir())?;
        Ok((0..self.n_dir())
            .map(|i| {
                let floor = WIDTH_FLOOR_REL * norm(self.y_block(i));
                profile.width(i).max(floor)
            })
            .collect())
    }

    pub fn objective(&self, s: &[f64]) -> f64 {
        let r = sub(&self.full_op.apply(s).expect("shape checked"), &self.data.values);
        0.5 * dot(&r, &r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEngine {
    Kaczmarz,
    Simultaneous,
    /// Simultaneous step whose Newton solve failed; a sweep ran instead.
    KaczmarzFallback,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub residual_norms: Vec<f64>,
    pub kappa: Vec<f64>,
    pub objective: f64,
    pub engine: StepEngine,
    pub newton_certificate: Option<f64>,
    /// Blocks skipped because the residual lies in the adjoint null space.
    pub null_skips: usize,
}

/// Iterate plus the per-subproblem residual state.
pub struct SolverState {
    pub iterate: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
    pub directions: Vec<Vec<f64>>,
    pub residual_norms: Vec<f64>,
    pub kappa: Vec<f64>,
    pub k: usize,
    pub history: Vec<IterationRecord>,
}

impl SolverState {
    pub fn new(iterate: Vec<f64>, sys: &SubproblemSystem) -> Result<Self> {
        if iterate.len() != sys.full_op.domain_len() {
            return Err(Error::ShapeMismatch {
                expected: sys.full_op.domain_len(),
                got: iterate.len(),
                context: "solver iterate",
            });
        }
        if !iterate.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("solver iterate must be finite"));
        }
        let n = sys.n_dir();
        let mut state = SolverState {
            iterate,
            residuals: vec![Vec::new(); n],
            directions: vec![Vec::new(); n],
            residual_norms: vec![0.0; n],
            kappa: vec![0.0; n],
            k: 0,
            history: Vec::new(),
        };
        state.refresh(sys)?;
        Ok(state)
    }

    /// Recomputes residuals `w_i` and directions `u_i` from the iterate.
    pub fn refresh(&mut self, sys: &SubproblemSystem) -> Result<()> {
        let full = sys.full_op.apply(&self.iterate)?;
        for i in 0..sys.n_dir() {
            let block = sys.data.partition.block(i);
            let w: Vec<f64> = full[block.clone()]
                .iter()
                .zip(sys.y_block(i))
                .map(|(a, b)| a - b)
                .collect();
            self.residual_norms[i] = norm(&w);
            self.directions[i] = sys.subops[i].adjoint(&w)?;
            self.residuals[i] = w;
        }
        Ok(())
    }
}

/// Oracle inexactness levels `E_i = ||A_i s_ref - y_i||`.
pub fn compute_inexactness(s_ref: &[f64], sys: &SubproblemSystem) -> Result<Vec<f64>> {
    let full = sys.full_op.apply(s_ref)?;
    Ok((0..sys.n_dir())
        .map(|i| {
            let block = sys.data.partition.block(i);
            norm(&sub(&full[block], sys.y_block(i)))
        })
        .collect())
}

/// Residual-norm profile and the consistency loss
/// `L_E = sum_i (E_i - ||w_i(s)||)^2`.
pub fn consistency_profile(
    s: &[f64],
    sys: &SubproblemSystem,
    e: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if e.len() != sys.n_dir() {
        return Err(Error::ShapeMismatch {
            expected: sys.n_dir(),
            got: e.len(),
            context: "consistency profile levels",
        });
    }
    let full = sys.full_op.apply(s)?;
    let norms: Vec<f64> = (0..sys.n_dir())
        .map(|i| {
            let block = sys.data.partition.block(i);
            norm(&sub(&full[block], sys.y_block(i)))
        })
        .collect();
    let loss = norms
        .iter()
        .zip(e)
        .map(|(w, ei)| (ei - w) * (ei - w))
        .sum();
    Ok((norms, loss))
}

/// One regularized projection for a single subproblem:
/// `s <- s - ||w|| (||w|| - width) / ||u||^2 * u`.
///
/// Inside the stripe (`||w|| <= width`) the iterate is left unchanged.
/// Returns the scalar step applied to the direction.
pub fn single_direction_step(
    s: &mut [f64],
    op: &OperatorHandle,
    y: &[f64],
    width: f64,
) -> Result<f64> {
    let w = sub(&op.apply(s)?, y);
    let nw = norm(&w);
    if nw <= width {
        return Ok(0.0);
    }
    let u = op.adjoint(&w)?;
    let nu2 = dot(&u, &u);
    if nu2 == 0.0 {
        return Err(Error::Numerical(
            "residual in adjoint null space: no usable search direction".into(),
        ));
    }
    let step = nw * (nw - width) / nu2;
    axpy(-step, &u, s);
    Ok(step)
}

/// One full Kaczmarz sweep over all subproblems (the classical iteration).
///
/// Blocks already inside their stripes take a zero step; blocks whose
/// residual lies in the adjoint null space are skipped and counted.
pub fn kaczmarz_sweep(
    state: &mut SolverState,
    sys: &SubproblemSystem,
    profile: &InexactnessProfile,
) -> Result<()> {
    let widths = sys.widths(profile)?;
    let mut s = state.iterate.clone();
    let mut null_skips = 0;
    for i in 0..sys.n_dir() {
        match single_direction_step(&mut s, &sys.subops[i], sys.y_block(i), widths[i]) {
            Ok(step) => state.kappa[i] = step,
            Err(Error::Numerical(_)) => {
                state.kappa[i] = 0.0;
                null_skips += 1;
            }
            Err(e) => return Err(e),
        }
    }
    state.iterate = s;
    state.k += 1;
    state.refresh(sys)?;
    state.history.push(IterationRecord {
        k: state.k,
        residual_norms: state.residual_norms.clone(),
        kappa: state.kappa.clone(),
        objective: sys.objective(&state.iterate),
        engine: StepEngine::Kaczmarz,
        newton_certificate: None,
        null_skips,
    });
    Ok(())
}

/// The quadratic step-size system `0 = a_i + kappa^T b_i + kappa^T C_i kappa`.
#[derive(Debug, Clone)]
pub struct QuadraticSystem {
    /// `a_i = ||w_i||^2 - E_i^2`
    pub a: Vec<f64>,
    /// Row `i` holds `b_i[j] = -2 <w_i, A_i u_j>`.
    pub b: Array2<f64>,
    /// `C_i[j][l] = <A_i u_j, A_i u_l>`, symmetric positive semidefinite.
    pub c: Vec<Array2<f64>>,
    /// `max_i ||w_i||^2`, the natural residual scale of the system.
    pub scale: f64,
}

impl QuadraticSystem {
    pub fn n_dir(&self) -> usize {
        self.a.len()
    }

    /// Evaluates all residual polynomials at `kappa`.
    pub fn eval(&self, kappa: &[f64]) -> Vec<f64> {
        let k = Array1::from(kappa.to_vec());
        (0..self.n_dir())
            .map(|i| {
                let bk = self.b.row(i).dot(&k);
                let ck = k.dot(&self.c[i].dot(&k));
                self.a[i] + bk + ck
            })
            .collect()
    }

    fn jacobian(&self, kappa: &[f64]) -> Array2<f64> {
        let k = Array1::from(kappa.to_vec());
        let n = self.n_dir();
        let mut j = self.b.clone();
        for i in 0..n {
            let ck = self.c[i].dot(&k);
            for l in 0..n {
                j[[i, l]] += 2.0 * ck[l];
            }
        }
        j
    }
}

/// Builds the quadratic system from the current residuals and directions.
pub fn assemble_quadratic_system(
    state: &SolverState,
    sys: &SubproblemSystem,
    widths: &[f64],
) -> Result<QuadraticSystem> {
    let n = sys.n_dir();
    if widths.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: widths.len(),
            context: "quadratic system widths",
        });
    }
    // v[j] = A u_j sliced per block i
    let applied: Vec<Vec<f64>> = (0..n)
        .map(|j| sys.full_op.apply(&state.directions[j]))
        .collect::<Result<_>>()?;
    let mut a = Vec::with_capacity(n);
    let mut b = Array2::zeros((n, n));
    let mut c = Vec::with_capacity(n);
    let mut scale: f64 = 1.0;
    for i in 0..n {
        let block = sys.data.partition.block(i);
        let wi = &state.residuals[i];
        let nw2 = dot(wi, wi);
        scale = scale.max(nw2);
        a.push(nw2 - widths[i] * widths[i]);
        let vi: Vec<&[f64]> = applied.iter().map(|z| &z[block.clone()]).collect();
        let mut ci = Array2::zeros((n, n));
        for j in 0..n {
            b[[i, j]] = -2.0 * dot(wi, vi[j]);
            for l in j..n {
                let v = dot(vi[j], vi[l]);
                ci[[j, l]] = v;
                ci[[l, j]] = v;
            }
        }
        c.push(ci);
    }
    Ok(QuadraticSystem { a, b, c, scale })
}

/// Result of the damped Newton solve for the step sizes.
#[derive(Debug, Clone)]
pub struct StepSizeSolution {
    pub kappa: Vec<f64>,
    /// `max_i |F_i(kappa)|` at the returned point; the acceptance gate.
    pub certificate: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Damped Newton iteration on the quadratic system.
///
/// Convergence means `max_i |F_i| <= tol * max(scale, 1)`. A singular
/// Jacobian falls back to Levenberg-style damped least squares; steps are
/// halved (up to 30 times) until the residual decreases. Non-convergence is
/// reported, not fatal: the caller decides how to proceed.
pub fn solve_stepsizes(
    qs: &QuadraticSystem,
    kappa0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<StepSizeSolution> {
    let n = qs.n_dir();
    if n > MAX_DIRECTIONS {
        return Err(Error::invalid(format!(
            "{n} search directions exceed the quadratic-solve cap of {MAX_DIRECTIONS}"
        )));
    }
    if kappa0.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: kappa0.len(),
            context: "initial step sizes",
        });
    }
    let threshold = tol * qs.scale.max(1.0);
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut kappa = kappa0.to_vec();
    let mut f = qs.eval(&kappa);
    let mut best = StepSizeSolution {
        kappa: kappa.clone(),
        certificate: inf_norm(&f),
        converged: false,
        iterations: 0,
    };
    for it in 0..max_iter {
        let cert = inf_norm(&f);
        if cert < best.certificate {
            best.kappa = kappa.clone();
            best.certificate = cert;
            best.iterations = it;
        }
        if cert <= threshold {
            best.converged = true;
            return Ok(best);
        }
        let jac = qs.jacobian(&kappa);
        let rhs = Array1::from(f.iter().map(|v| -v).collect::<Vec<f64>>());
        let mut direction = jac
            .solve(&rhs)
            .ok()
            .filter(|d| d.iter().all(|v| v.is_finite()));
        if direction.is_none() {
            direction = levenberg_direction(&jac, &rhs);
        }
        let Some(dk) = direction else { break };
        // backtracking: halve until the residual decreases
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = kappa
                .iter()
                .zip(dk.iter())
                .map(|(k, d)| k + t * d)
                .collect();
            let fc = qs.eval(&cand);
            if inf_norm(&fc) < cert {
                kappa = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let cert = inf_norm(&f);
    if cert < best.certificate {
        best.kappa = kappa;
        best.certificate = cert;
    }
    best.converged = best.certificate <= threshold;
    Ok(best)
}

/// `(J^T J + lambda I) d = J^T rhs` with escalating damping.
fn levenberg_direction(jac: &Array2<f64>, rhs: &Array1<f64>) -> Option<Array1<f64>> {
    let jtj = jac.t().dot(jac);
    let jtr = jac.t().dot(rhs);
    let base = jtj.diag().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut lambda = 1e-10 * base;
    for _ in 0..12 {
        let mut m = jtj.clone();
        for i in 0..m.nrows() {
            m[[i, i]] += lambda;
        }
        if let Ok(d) = m.solve(&jtr) {
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        lambda *= 10.0;
    }
    None
}

/// One simultaneous multi-direction update.
///
/// On Newton convergence applies `s <- s - sum_i kappa_i u_i`; otherwise
/// falls back to a Kaczmarz sweep and records that in the history.
pub fn simultaneous_step(
    state: &mut SolverState,
    sys: &SubproblemSystem,
    profile: &InexactnessProfile,
    newton_tol: f64,
    newton_max_iter: usize,
) -> Result<()> {
    let widths = sys.widths(profile)?;
    let qs = assemble_quadratic_system(state, sys, &widths)?;
    let kappa0 = vec![0.0; sys.n_dir()];
    let sol = solve_stepsizes(&qs, &kappa0, newton_tol, newton_max_iter)?;
    if !sol.converged {
        let cert = sol.certificate;
        kaczmarz_sweep(state, sys, profile)?;
        let last = state.history.last_mut().expect("sweep pushed a record");
        last.engine = StepEngine::KaczmarzFallback;
        last.newton_certificate = Some(cert);
        return Ok(());
    }
    for (i, &k) in sol.kappa.iter().enumerate() {
        axpy(-k, &state.directions[i], &mut state.iterate);
    }
    state.kappa = sol.kappa.clone();
    state.k += 1;
    state.refresh(sys)?;
    state.history.push(IterationRecord {
        k: state.k,
        residual_norms: state.residual_norms.clone(),
        kappa: sol.kappa,
        objective: sys.objective(&state.iterate),
        engine: StepEngine::Simultaneous,
        newton_certificate: Some(sol.certificate),
        null_skips: 0,
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Kaczmarz,
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    CgWarmStart,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub engine: Engine,
    pub init: Init,
    pub k_max: usize,
    /// Discrepancy factor: stop once `||w_i|| <= tau * width_i` for all i.
    pub tau: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Conjugate-gradient steps used by the warm start.
    pub cg_steps: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            engine: Engine::Kaczmarz,
            init: Init::Zero,
            k_max: 200,
            tau: 1.001,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            cg_steps: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// All residuals within `tau` times their widths.
    Discrepancy,
    MaxIterations,
    /// Objective grew for five consecutive iterations.
    Diverged,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub iterate: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Residual norms at the returned iterate.
    pub final_norms: Vec<f64>,
    /// Objective at the returned iterate.
    pub final_objective: f64,
    /// Widths (floored) the run used.
    pub widths: Vec<f64>,
}

/// Fixed number of CGLS steps on the normal equations, from zero.
pub fn cg_warm_start(sys: &SubproblemSystem, steps: usize) -> Result<Vec<f64>> {
    let n = sys.full_op.domain_len();
    let mut x = vec![0.0; n];
    let mut r = sys.data.values.clone();
    let mut z = sys.full_op.adjoint(&r)?;
    let mut p = z.clone();
    let mut gamma = dot(&z, &z);
    if gamma == 0.0 {
        return Ok(x);
    }
    for _ in 0..steps {
        let q = sys.full_op.apply(&p)?;
        let qq = dot(&q, &q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        z = sys.full_op.adjoint(&r)?;
        let gamma_new = dot(&z, &z);
        if gamma_new == 0.0 {
            break;
        }
        let beta = gamma_new / gamma;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        gamma = gamma_new;
    }
    Ok(x)
}

/// Runs the configured engine until the discrepancy stop, divergence, or
/// `k_max` iterations. Iteration records accumulate even on early stops.
pub fn run_resesop(
    sys: &SubproblemSystem,
    profile: &InexactnessProfile,
    opts: &SolveOptions,
) -> Result<RunOutcome> {
    if opts.tau < 1.0 {
        return Err(Error::invalid("discrepancy factor tau must be >= 1"));
    }
    let widths = sys.widths(profile)?;
    let init = match opts.init {
        Init::Zero => vec![0.0; sys.full_op.domain_len()],
        Init::CgWarmStart => cg_warm_start(sys, opts.cg_steps)?,
    };
    let mut state = SolverState::new(init, sys)?;
    let mut stop = StopReason::MaxIterations;
    let mut prev_objective = f64::INFINITY;
    let mut growth_streak = 0usize;
    for _ in 0..opts.k_max {
        let met = state
            .residual_norms
            .iter()
            .zip(&widths)
            .all(|(w, width)| *w <= opts.tau * width);
        if met {
            stop = StopReason::Discrepancy;
            break;
        }
        let objective = sys.objective(&state.iterate);
        if objective > prev_objective {
            growth_streak += 1;
            if growth_streak >= 5 {
                stop = StopReason::Diverged;
                break;
            }
        } else {
            growth_streak = 0;
        }
        prev_objective = objective;
        match opts.engine {
            Engine::Kaczmarz => kaczmarz_sweep(&mut state, sys, profile)?,
            Engine::Simultaneous => {
                simultaneous_step(&mut state, sys, profile, opts.newton_tol, opts.newton_max_iter)?
            }
        }
    }
    if stop == StopReason::MaxIterations && opts.k_max > 0 {
        let met = state
            .residual_norms
            .iter()
            .zip(&widths)
            .all(|(w, width)| *w <= opts.tau * width);
        if met {
            stop = StopReason::Discrepancy;
        }
    }
    Ok(RunOutcome {
        final_norms: state.residual_norms.clone(),
        final_objective: sys.objective(&state.iterate),
        iterate: state.iterate,
        history: state.history,
        stop,
        widths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SubproblemPartition;
    use crate::operators::{DenseOperator, IdentityOperator, OperatorHandle};
    use crate::test_util::{seeded_rng, seeded_vec};
    use ndarray::Array2;
    use ndarray_linalg::QR;
    use rand::Rng;

    fn dense_system(a: Array2<f64>, y: Vec<f64>, blocks: usize) -> SubproblemSystem {
        let part = SubproblemPartition::uniform(y.len(), blocks).unwrap();
        let data = MeasurementVector::new(y, part).unwrap();
        SubproblemSystem::new(OperatorHandle::new(DenseOperator::new(a)), data).unwrap()
    }

    /// Random matrix with orthonormal rows (M <= N).
    fn orthonormal_rows(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        let g = Array2::from_shape_fn((n, m), |_| rng.gen::<f64>() - 0.5);
        let (q, _r) = g.qr().unwrap();
        q.t().to_owned()
    }

    #[test]
    fn compute_inexactness_zero_for_exact_solution() {
        let a = Array2::from_shape_fn((6, 4), |(i, j)| ((i + j) as f64).sin());
        let s_ref = seeded_vec(4, 1);
        let y = DenseOperator::new(a.clone());
        let y = {
            let op = OperatorHandle::new(y);
            op.apply(&s_ref).unwrap()
        };
        let sys = dense_system(a, y, 3);
        let e = compute_inexactness(&s_ref, &sys).unwrap();
        assert!(e.iter().all(|v| *v < 1e-12));
    }

    #[test]
    fn compute_inexactness_recovers_noise_norms() {
        let a = Array2::from_shape_fn((6, 4), |(i, j)| ((2 * i + j) as f64).cos());
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let s_ref = seeded_vec(4, 2);
        let mut y = op.apply(&s_ref).unwrap();
        let noise = seeded_vec(6, 3);
        for (yi, ni) in y.iter_mut().zip(&noise) {
            *yi += ni;
        }
        let sys = dense_system(a, y, 2);
        let e = compute_inexactness(&s_ref, &sys).unwrap();
        for i in 0..2 {
            let block = sys.data.partition.block(i);
            let expected = norm(&noise[block]);
            assert!((e[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_converges_in_one_sweep() {
        let y = seeded_vec(8, 4);
        let part = SubproblemPartition::trivial(8);
        let data = MeasurementVector::new(y.clone(), part).unwrap();
        let sys = SubproblemSystem::new(OperatorHandle::new(IdentityOperator::new(8)), data).unwrap();
        let profile = InexactnessProfile::oracle(vec![0.0]);
        let mut state = SolverState::new(vec![0.0; 8], &sys).unwrap();
        kaczmarz_sweep(&mut state, &sys, &profile).unwrap();
        for (s, yi) in state.iterate.iter().zip(&y) {
            assert!((s - yi).abs() < 1e-10);
        }
    }

    #[test]
    fn satisfied_stripes_leave_state_unchanged() {
        let a = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 3 + j) as f64).sin());
        let s0 = seeded_vec(5, 7);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s0).unwrap();
        let sys = dense_system(a, y, 2);
        // widths larger than current residuals of a perturbed start
        let mut start = s0.clone();
        start[0] += 0.01;
        let mut state = SolverState::new(start.clone(), &sys).unwrap();
        let e: Vec<f64> = state.residual_norms.iter().map(|w| w * 2.0).collect();
        let profile = InexactnessProfile::oracle(e);
        kaczmarz_sweep(&mut state, &sys, &profile).unwrap();
        assert_eq!(state.iterate, start);
        assert!(state.kappa.iter().all(|k| *k == 0.0));
    }

    #[test]
    fn orthonormal_blocks_land_on_levels_in_one_sweep() {
        let a = orthonormal_rows(9, 16, 5);
        let s_true = seeded_vec(16, 6);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s_true).unwrap();
        let sys = dense_system(a, y, 3);
        let mut state = SolverState::new(vec![0.0; 16], &sys).unwrap();
        let e: Vec<f64> = state.residual_norms.iter().map(|w| 0.3 * w).collect();
        let profile = InexactnessProfile::oracle(e.clone());
        kaczmarz_sweep(&mut state, &sys, &profile).unwrap();
        for i in 0..3 {
            assert!(
                (state.residual_norms[i] - e[i]).abs() <= 1e-8,
                "block {i}: {} vs {}",
                state.residual_norms[i],
                e[i]
            );
        }
    }

    #[test]
    fn single_step_zeroes_orthonormal_residual() {
        let a = orthonormal_rows(5, 12, 8);
        let op = OperatorHandle::new(DenseOperator::new(a));
        let y = seeded_vec(5, 9);
        let mut s = vec![0.0; 12];
        single_direction_step(&mut s, &op, &y, 0.0).unwrap();
        let r = sub(&op.apply(&s).unwrap(), &y);
        assert!(norm(&r) < 1e-10);
    }

    #[test]
    fn width_equal_to_residual_is_a_zero_step() {
        let a = Array2::from_shape_fn((4, 6), |(i, j)| ((i + 2 * j) as f64).cos());
        let op = OperatorHandle::new(DenseOperator::new(a));
        let y = seeded_vec(4, 10);
        let mut s = seeded_vec(6, 11);
        let w = norm(&sub(&op.apply(&s).unwrap(), &y));
        let before = s.clone();
        let step = single_direction_step(&mut s, &op, &y, w).unwrap();
        assert_eq!(step, 0.0);
        assert_eq!(s, before);
    }

    #[test]
    fn single_step_never_increases_residual() {
        let mut rng = seeded_rng(12);
        for trial in 0..30 {
            let (m, n) = (7, 10);
            let a = Array2::from_shape_fn((m, n), |_| rng.gen::<f64>() - 0.5);
            let op = OperatorHandle::new(DenseOperator::new(a));
            let y = seeded_vec(m, 100 + trial);
            let mut s = seeded_vec(n, 200 + trial);
            let before = norm(&sub(&op.apply(&s).unwrap(), &y));
            let width = 0.2 * before;
            single_direction_step(&mut s, &op, &y, width).unwrap();
            let after = norm(&sub(&op.apply(&s).unwrap(), &y));
            assert!(after <= before + 1e-12, "trial {trial}: {after} > {before}");
        }
    }

    #[test]
    fn quadratic_system_constant_term_is_a() {
        let a = Array2::from_shape_fn((6, 8), |(i, j)| ((i * j) as f64 * 0.3).sin());
        let s_t = seeded_vec(8, 14);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s_t).unwrap();
        let sys = dense_system(a, y, 2);
        let state = SolverState::new(seeded_vec(8, 15), &sys).unwrap();
        let widths = vec![0.1, 0.2];
        let qs = assemble_quadratic_system(&state, &sys, &widths).unwrap();
        let f0 = qs.eval(&[0.0, 0.0]);
        for i in 0..2 {
            assert!((f0[i] - qs.a[i]).abs() < 1e-12);
            let expected = state.residual_norms[i].powi(2) - widths[i] * widths[i];
            assert!((qs.a[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_blocks_have_diagonal_cross_terms() {
        let a = orthonormal_rows(8, 14, 16);
        let s_t = seeded_vec(14, 17);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s_t).unwrap();
        let sys = dense_system(a, y, 4);
        let state = SolverState::new(seeded_vec(14, 18), &sys).unwrap();
        let widths = vec![0.0; 4];
        let qs = assemble_quadratic_system(&state, &sys, &widths).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(qs.b[[i, j]].abs() < 1e-10, "b[{i}][{j}] = {}", qs.b[[i, j]]);
                }
                for l in 0..4 {
                    if j != i || l != i {
                        assert!(qs.c[i][[j, l]].abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_polynomial_matches_direct_residual_evaluation() {
        let mut rng = seeded_rng(19);
        let (m, n) = (9, 7);
        let a = Array2::from_shape_fn((m, n), |_| rng.gen::<f64>() - 0.5);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = seeded_vec(m, 20);
        let sys = dense_system(a, y, 3);
        let state = SolverState::new(seeded_vec(n, 21), &sys).unwrap();
        let widths = vec![0.3, 0.1, 0.2];
        let qs = assemble_quadratic_system(&state, &sys, &widths).unwrap();
        for trial in 0..10 {
            let kappa = seeded_vec(3, 300 + trial);
            let f = qs.eval(&kappa);
            // direct: residual of s - sum kappa_j u_j per block
            let mut s = state.iterate.clone();
            for (j, u) in state.directions.iter().enumerate() {
                axpy(-kappa[j], u, &mut s);
            }
            let full = sys.full_op.apply(&s).unwrap();
            for i in 0..3 {
                let block = sys.data.partition.block(i);
                let r = sub(&full[block], sys.y_block(i));
                let direct = dot(&r, &r) - widths[i] * widths[i];
                assert!(
                    (f[i] - direct).abs() <= 1e-10 * (1.0 + direct.abs()),
                    "{} vs {}",
                    f[i],
                    direct
                );
            }
        }
    }

    #[test]
    fn zero_constant_gives_zero_steps() {
        let qs = QuadraticSystem {
            a: vec![0.0, 0.0],
            b: Array2::from_shape_fn((2, 2), |(i, j)| if i == j { -2.0 } else { 0.3 }),
            c: vec![Array2::eye(2), Array2::eye(2)],
            scale: 1.0,
        };
        let sol = solve_stepsizes(&qs, &[0.0, 0.0], 1e-12, 50).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.kappa, vec![0.0, 0.0]);
    }

    #[test]
    fn orthonormal_solution_matches_metric_projection() {
        let a = orthonormal_rows(8, 15, 22);
        let s_t = seeded_vec(15, 23);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s_t).unwrap();
        let sys = dense_system(a, y, 2);
        let state = SolverState::new(seeded_vec(15, 24), &sys).unwrap();
        let e: Vec<f64> = state.residual_norms.iter().map(|w| 0.4 * w).collect();
        let qs = assemble_quadratic_system(&state, &sys, &e).unwrap();
        let sol = solve_stepsizes(&qs, &[0.0, 0.0], 1e-12, 80).unwrap();
        assert!(sol.converged);
        for i in 0..2 {
            let nw = state.residual_norms[i];
            let nu2 = dot(&state.directions[i], &state.directions[i]);
            let expected = (nw * nw - e[i] * nw) / nu2;
            assert!(
                (sol.kappa[i] - expected).abs() <= 1e-8 * (1.0 + expected.abs()),
                "kappa {i}: {} vs {}",
                sol.kappa[i],
                expected
            );
        }
    }

    #[test]
    fn simultaneous_single_block_matches_single_direction_step() {
        let a = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 2 + j) as f64 * 0.41).sin());
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = seeded_vec(5, 25);
        let sys = dense_system(a, y.clone(), 1);
        let start = seeded_vec(8, 26);
        let mut state = SolverState::new(start.clone(), &sys).unwrap();
        let width = 0.5 * state.residual_norms[0];
        let profile = InexactnessProfile::oracle(vec![width]);
        simultaneous_step(&mut state, &sys, &profile, 1e-12, 80).unwrap();
        let mut reference = start;
        single_direction_step(&mut reference, &op, &y, width).unwrap();
        for (a, b) in state.iterate.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn simultaneous_orthonormal_blocks_hit_levels_in_one_step() {
        let a = orthonormal_rows(12, 20, 27);
        let s_t = seeded_vec(20, 28);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s_t).unwrap();
        let sys = dense_system(a, y, 4);
        let mut state = SolverState::new(seeded_vec(20, 29), &sys).unwrap();
        let e: Vec<f64> = state.residual_norms.iter().map(|w| 0.25 * w).collect();
        let profile = InexactnessProfile::oracle(e.clone());
        simultaneous_step(&mut state, &sys, &profile, 1e-12, 80).unwrap();
        for i in 0..4 {
            assert!(
                (state.residual_norms[i] - e[i]).abs() <= 1e-8,
                "block {i}: {} vs {}",
                state.residual_norms[i],
                e[i]
            );
        }
    }

    #[test]
    fn duplicated_rows_converge_on_toy_problem() {
        // dependent suboperators: the same rows appear in both blocks
        let mut rng = seeded_rng(31);
        let base = Array2::from_shape_fn((8, 16), |_| rng.gen::<f64>() - 0.5);
        let mut stacked = Array2::zeros((16, 16));
        stacked.slice_mut(ndarray::s![..8, ..]).assign(&base);
        stacked.slice_mut(ndarray::s![8.., ..]).assign(&base);
        let s_t = seeded_vec(16, 32);
        let op = OperatorHandle::new(DenseOperator::new(stacked.clone()));
        let mut y = op.apply(&s_t).unwrap();
        for v in y.iter_mut() {
            *v += 0.01 * (rng.gen::<f64>() - 0.5);
        }
        let sys = dense_system(stacked, y, 2);
        let e = compute_inexactness(&s_t, &sys).unwrap();
        let profile = InexactnessProfile::oracle(e.clone());
        let mut state = SolverState::new(vec![0.0; 16], &sys).unwrap();
        let mut converged = false;
        for _ in 0..50 {
            simultaneous_step(&mut state, &sys, &profile, 1e-12, 100).unwrap();
            let worst = state
                .residual_norms
                .iter()
                .zip(&e)
                .map(|(w, ei)| (w - ei).abs())
                .fold(0.0f64, f64::max);
            if worst <= 1e-4 {
                converged = true;
                break;
            }
        }
        assert!(converged, "norms {:?} vs levels {:?}", state.residual_norms, e);
    }

    #[test]
    fn consistent_system_converges_to_zero_residual() {
        let mut rng = seeded_rng(33);
        let a = Array2::from_shape_fn((12, 16), |_| rng.gen::<f64>() - 0.5);
        let s_t = seeded_vec(16, 34);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s_t).unwrap();
        let part = SubproblemPartition::uniform(12, 3).unwrap();
        let data = MeasurementVector::new(y, part).unwrap();
        let sys = SubproblemSystem::new(op, data).unwrap();
        let profile = InexactnessProfile::oracle(vec![0.0; 3]);
        let opts = SolveOptions {
            engine: Engine::Kaczmarz,
            k_max: 4000,
            ..Default::default()
        };
        let out = run_resesop(&sys, &profile, &opts).unwrap();
        let total: f64 = out.final_norms.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(total <= 1e-6, "residual {total}");
    }

    #[test]
    fn k_max_zero_returns_initialization() {
        let a = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) as f64).sin());
        let sys = dense_system(a, seeded_vec(4, 35), 2);
        let profile = InexactnessProfile::oracle(vec![0.0, 0.0]);
        let opts = SolveOptions {
            k_max: 0,
            ..Default::default()
        };
        let out = run_resesop(&sys, &profile, &opts).unwrap();
        assert_eq!(out.iterate, vec![0.0; 4]);
        assert!(out.history.is_empty());
    }

    #[test]
    fn consistency_profile_is_zero_at_reference() {
        let a = Array2::from_shape_fn((6, 5), |(i, j)| ((i * j + 1) as f64).ln());
        let s_ref = seeded_vec(5, 36);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let y = op.apply(&s_ref).unwrap();
        let sys = dense_system(a, y, 2);
        let e = compute_inexactness(&s_ref, &sys).unwrap();
        let (_, loss) = consistency_profile(&s_ref, &sys, &e).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn consistency_profile_matches_direct_terms() {
        let a = Array2::from_shape_fn((8, 6), |(i, j)| ((i * 5 + j) as f64 * 0.7).cos());
        let sys = dense_system(a, seeded_vec(8, 37), 4);
        let s = seeded_vec(6, 38);
        let e = vec![0.5, 0.1, 0.9, 0.3];
        let (norms, loss) = consistency_profile(&s, &sys, &e).unwrap();
        let mut direct = 0.0;
        for i in 0..4 {
            let block = sys.data.partition.block(i);
            let r = sub(
                &sys.full_op.apply(&s).unwrap()[block],
                sys.y_block(i),
            );
            let nw = norm(&r);
            assert!((norms[i] - nw).abs() < 1e-12);
            direct += (e[i] - nw) * (e[i] - nw);
        }
        assert!((loss - direct).abs() <= 1e-12 * (1.0 + direct));
    }

    #[test]
    fn fejer_monotonicity_when_truth_is_inside_stripes() {
        let mut rng = seeded_rng(39);
        let (m, n) = (10, 12);
        let a = Array2::from_shape_fn((m, n), |_| rng.gen::<f64>() - 0.5);
        let s_true = seeded_vec(n, 40);
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let mut y = op.apply(&s_true).unwrap();
        let noise = seeded_vec(m, 41);
        let delta = 0.05;
        let noise_norm = norm(&noise);
        for (yi, ni) in y.iter_mut().zip(&noise) {
            *yi += delta / noise_norm * ni;
        }
        let sys = dense_system(a, y, 2);
        // widths = per-block residual norms of the truth make every stripe
        // contain s_true
        let e = compute_inexactness(&s_true, &sys).unwrap();
        let profile = InexactnessProfile::oracle(e);
        let mut state = SolverState::new(vec![0.0; n], &sys).unwrap();
        let mut dist = norm(&sub(&state.iterate, &s_true));
        for _ in 0..40 {
            kaczmarz_sweep(&mut state, &sys, &profile).unwrap();
            let d = norm(&sub(&state.iterate, &s_true));
            assert!(d <= dist + 1e-10, "{d} > {dist}");
            dist = d;
        }
    }

    #[test]
    fn identical_runs_give_bit_identical_history() {
        let a = Array2::from_shape_fn((10, 8), |(i, j)| ((i * 3 + j) as f64 * 0.9).sin());
        let sys = dense_system(a.clone(), seeded_vec(10, 42), 2);
        let sys2 = dense_system(a, seeded_vec(10, 42), 2);
        let profile = InexactnessProfile::analytic(0.05, vec![0.01, 0.02], 1.0);
        let opts = SolveOptions {
            engine: Engine::Simultaneous,
            init: Init::CgWarmStart,
            k_max: 20,
            ..Default::default()
        };
        let o1 = run_resesop(&sys, &profile, &opts).unwrap();
        let o2 = run_resesop(&sys2, &profile, &opts).unwrap();
        assert_eq!(o1.history.len(), o2.history.len());
        for (r1, r2) in o1.history.iter().zip(&o2.history) {
            assert_eq!(r1.residual_norms, r2.residual_norms);
            assert_eq!(r1.kappa, r2.kappa);
            assert_eq!(r1.objective, r2.objective);
        }
        assert_eq!(o1.iterate, o2.iterate);
    }

    #[test]
    fn too_many_directions_are_rejected() {
        let n = MAX_DIRECTIONS + 1;
        let qs = QuadraticSystem {
            a: vec![0.0; n],
            b: Array2::zeros((n, n)),
            c: vec![Array2::zeros((n, n)); n],
            scale: 1.0,
        };
        assert!(solve_stepsizes(&qs, &vec![0.0; n], 1e-10, 10).is_err());
    }
}
