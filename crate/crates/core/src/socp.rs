//! Log-barrier interior-point solver for the linearized subproblem
//!
//! ```text
//!   minimize    t - λ η
//!   subject to  ‖z‖₂ ≤ t
//!               gᵢᵀ z       ≥ hᵢ     (distance rows)
//!               gₖᵀ z - η   ≥ hₖ     (element-wise rows)
//! ```
//!
//! over `(z, t, η) ∈ ℝⁿ × ℝ × ℝ`. The barrier is
//! `-log(t² - ‖z‖²) - Σ log(slack)` and each centering stage minimizes
//! `τ (t - λη) + barrier` by damped Newton steps, with `τ ← 10τ` between
//! stages. The cone term has barrier degree 2, so the duality gap of a
//! centered point is `(rows + 2)/τ`.
//!
//! When there are no element-wise rows, `η` is absent from the problem and
//! the objective is `t`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One affine inequality `gᵀz (- η) ≥ rhs`, with `g` stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRow {
    pub grad: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl AffineRow {
    pub fn new(grad: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { grad, rhs }
    }

    pub fn from_dense(grad: &[f64], rhs: f64) -> Self {
        let grad = grad.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, &v)| (i, v)).collect();
        Self { grad, rhs }
    }

    pub fn dot(&self, z: &[f64]) -> f64 {
        self.grad.iter().map(|&(i, v)| v * z[i]).sum()
    }
}

/// A strictly feasible starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct StartPoint {
    pub z: Vec<f64>,
    pub t: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSpec {
    pub n: usize,
    pub lambda: f64,
    /// Rows `gᵀz ≥ h`.
    pub med_rows: Vec<AffineRow>,
    /// Rows `gᵀz - η ≥ h`.
    pub ew_rows: Vec<AffineRow>,
    pub start: StartPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    NumericalFailure,
}

/// Per-Newton-step diagnostics, recorded when tracing is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonRecord {
    pub step: usize,
    pub tau: f64,
    pub objective: f64,
    pub barrier_objective: f64,
    pub decrement_sq: f64,
    pub step_size: f64,
}

/// Renders a Newton trace as CSV.
pub fn trace_csv(records: &[NewtonRecord]) -> String {
    let mut s = String::from("step,tau,objective,barrier_objective,decrement_sq,step_size\n");
    for r in records {
        s.push_str(&format!(
            "{},{:e},{:.16e},{:.16e},{:e},{:e}\n",
            r.step, r.tau, r.objective, r.barrier_objective, r.decrement_sq, r.step_size
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub z: Vec<f64>,
    pub t: f64,
    pub eta: f64,
    pub status: SolveStatus,
    pub newton_iters: usize,
    /// Max of the duality gap bound, primal infeasibility and the scaled
    /// centering residual `‖∇‖_{H⁻¹}/τ`.
    pub kkt_residual: f64,
    /// Final barrier parameter.
    pub tau: f64,
    /// Dual estimates `1/(τ·slack)` for the distance rows, then the element-wise rows.
    pub duals: Vec<f64>,
    pub trace: Option<Vec<NewtonRecord>>,
}

impl SubproblemSolution {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.t - lambda * self.eta
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target duality gap `(rows + 2)/τ`.
    pub tol: f64,
    /// Total Newton steps across all stages.
    pub max_newton: usize,
    /// Armijo fraction, in (0, 0.5).
    pub alpha: f64,
    /// Backtracking factor, in (0, 1).
    pub beta: f64,
    /// Barrier growth between stages.
    pub mu: f64,
    /// Centering stops once `λ²/2` falls below this.
    pub centering_tol: f64,
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_newton: 200, alpha: 0.1, beta: 0.7, mu: 10.0, centering_tol: 1e-10, trace: false }
    }
}

/// The barrier subproblem at a fixed `τ`, exposing the Newton machinery.
#[derive(Debug, Clone)]
pub struct BarrierProblem<'a> {
    spec: &'a SubproblemSpec,
    has_eta: bool,
    pub tau: f64,
}

/// Newton iterate: `x = (z, t[, η])`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierState {
    pub x: Vec<f64>,
}

/// Result of one damped Newton step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub decrement_sq: f64,
    pub step_size: f64,
    pub directional_derivative: f64,
}

impl<'a> BarrierProblem<'a> {
    pub fn new(spec: &'a SubproblemSpec, tau: f64) -> Self {
        Self { spec, has_eta: !spec.ew_rows.is_empty(), tau }
    }

    /// Number of unknowns.
    pub fn dim(&self) -> usize {
        self.spec.n + 1 + usize::from(self.has_eta)
    }

    /// Barrier degree: one per affine row plus two for the cone.
    pub fn degree(&self) -> f64 {
        (self.spec.med_rows.len() + self.spec.ew_rows.len() + 2) as f64
    }

    pub fn initial_state(&self) -> BarrierState {
        let s = &self.spec.start;
        let mut x = s.z.clone();
        x.push(s.t);
        if self.has_eta {
            x.push(s.eta);
        }
        BarrierState { x }
    }

    fn t_idx(&self) -> usize {
        self.spec.n
    }

    fn eta(&self, x: &[f64]) -> f64 {
        if self.has_eta {
            x[self.spec.n + 1]
        } else {
            0.0
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x[self.t_idx()] - self.spec.lambda * self.eta(x)
    }

    fn cone_gap(&self, x: &[f64]) -> f64 {
        let n = self.spec.n;
        let t = x[n];
        let zz: f64 = x[..n].iter().map(|v| v * v).sum();
        t * t - zz
    }

    /// Slacks of the distance rows followed by the element-wise rows.
    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        let z = &x[..self.spec.n];
        let eta = self.eta(x);
        self.spec
            .med_rows
            .iter()
            .map(|r| r.dot(z) - r.rhs)
            .chain(self.spec.ew_rows.iter().map(|r| r.dot(z) - eta - r.rhs))
            .collect()
    }

    /// Strictly inside the cone and every row.
    pub fn is_strictly_feasible(&self, x: &[f64]) -> bool {
        x[self.t_idx()] > 0.0 && self.cone_gap(x) > 0.0 && self.slacks(x).iter().all(|&s| s > 0.0)
    }

    /// `τ·objective + barrier`, or `+∞` outside the domain.
    pub fn value(&self, x: &[f64]) -> f64 {
        if !self.is_strictly_feasible(x) {
            return f64::INFINITY;
        }
        let barrier = -self.cone_gap(x).ln() - self.slacks(x).iter().map(|s| s.ln()).sum::<f64>();
        self.tau * self.objective(x) + barrier
    }

    fn objective_vector(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim());
        c[self.t_idx()] = 1.0;
        if self.has_eta {
            c[self.spec.n + 1] = -self.spec.lambda;
        }
        c
    }

    /// Gradient and Hessian of the barrier alone.
    fn barrier_derivatives(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.spec.n;
        let dim = self.dim();
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);

        // -log(t² - ‖z‖²)
        let t = x[n];
        let u = self.cone_gap(x);
        let inv_u = 1.0 / u;
        let inv_u2 = inv_u * inv_u;
        for p in 0..n {
            g[p] = 2.0 * x[p] * inv_u;
        }
        g[n] = -2.0 * t * inv_u;
        for p in 0..n {
            for q in 0..n {
                h[(p, q)] = 4.0 * x[p] * x[q] * inv_u2;
            }
            h[(p, p)] += 2.0 * inv_u;
            let zt = -4.0 * x[p] * t * inv_u2;
            h[(p, n)] = zt;
            h[(n, p)] = zt;
        }
        h[(n, n)] = -2.0 * inv_u + 4.0 * t * t * inv_u2;

        // -Σ log(slack)
        let slacks = self.slacks(x);
        let eta_idx = self.has_eta.then_some(n + 1);
        let n_med = self.spec.med_rows.len();
        for (r, row) in self.spec.med_rows.iter().chain(&self.spec.ew_rows).enumerate() {
            let inv_s = 1.0 / slacks[r];
            let inv_s2 = inv_s * inv_s;
            let mut entries: Vec<(usize, f64)> = row.grad.clone();
            if r >= n_med {
                entries.push((eta_idx.expect("element-wise rows imply η"), -1.0));
            }
            for &(p, a) in &entries {
                g[p] -= a * inv_s;
                for &(q, b) in &entries {
                    h[(p, q)] += a * b * inv_s2;
                }
            }
        }
        (g, h)
    }

    /// Gradient and Hessian of `τ·objective + barrier`.
    pub fn derivatives(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let (g, h) = self.barrier_derivatives(x);
        (g + self.objective_vector() * self.tau, h)
    }

    /// Newton direction `-H⁻¹∇` and the squared decrement `∇ᵀH⁻¹∇`.
    pub fn newton_direction(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (g, h) = self.derivatives(x);
        let dir = solve_spd(h, &(-&g))?;
        let dec = -g.dot(&dir);
        Ok((dir.iter().copied().collect(), dec))
    }

    /// `f(x + sΔ) - f(x)`, evaluated from relative slack changes so that it
    /// stays accurate when `τ·objective` dwarfs the decrease. `+∞` if the
    /// trial point leaves the domain.
    pub fn value_change(&self, x: &[f64], dir: &[f64], s: f64) -> f64 {
        let n = self.spec.n;
        let (z, dz) = (&x[..n], &dir[..n]);
        let (t, dt) = (x[n], dir[n]);
        let deta = if self.has_eta { dir[n + 1] } else { 0.0 };
        let u = self.cone_gap(x);
        let zdz: f64 = z.iter().zip(dz).map(|(a, b)| a * b).sum();
        let dzdz: f64 = dz.iter().map(|b| b * b).sum();
        let du = s * (2.0 * t * dt - 2.0 * zdz) + s * s * (dt * dt - dzdz);
        if t + s * dt <= 0.0 || u + du <= 0.0 {
            return f64::INFINITY;
        }
        let mut change = self.tau * s * (dt - self.spec.lambda * deta) - (du / u).ln_1p();
        let slacks = self.slacks(x);
        let n_med = self.spec.med_rows.len();
        for (r, row) in self.spec.med_rows.iter().chain(&self.spec.ew_rows).enumerate() {
            let mut ds = s * row.dot(dz);
            if r >= n_med {
                ds -= s * deta;
            }
            if slacks[r] + ds <= 0.0 {
                return f64::INFINITY;
            }
            change -= (ds / slacks[r]).ln_1p();
        }
        change
    }

    /// Backtracking line search: shrink until strictly feasible, then until
    /// the Armijo condition `f(x + sΔ) ≤ f(x) + α s ∇ᵀΔ` holds.
    pub fn line_search(&self, x: &[f64], dir: &[f64], slope: f64, opts: &SolverOptions) -> Result<f64> {
        let mut s = 1.0;
        let trial = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
        while !self.is_strictly_feasible(&trial(s)) {
            s *= opts.beta;
            if s < 1e-20 {
                return Err(Error::Numerical("line search could not keep the iterate feasible".into()));
            }
        }
        while self.value_change(x, dir, s) > opts.alpha * s * slope {
            s *= opts.beta;
            if s < 1e-20 {
                return Err(Error::Numerical("line search failed to decrease the barrier objective".into()));
            }
        }
        Ok(s)
    }

    /// One damped Newton step in place.
    pub fn newton_step(&self, state: &mut BarrierState, opts: &SolverOptions) -> Result<StepInfo> {
        let (dir, dec) = self.newton_direction(&state.x)?;
        let slope = -dec;
        let step = self.line_search(&state.x, &dir, slope, opts)?;
        for (a, d) in state.x.iter_mut().zip(&dir) {
            *a += step * d;
        }
        Ok(StepInfo { decrement_sq: dec, step_size: step, directional_derivative: slope })
    }

    /// Initial τ minimizing the centering residual `‖τc + ∇φ‖_{H⁻¹}`.
    fn initial_tau(&self, x: &[f64], tol: f64) -> Result<f64> {
        let (g, h) = self.barrier_derivatives(x);
        let c = self.objective_vector();
        let hc = solve_spd(h, &c)?;
        let num = -hc.dot(&g);
        let den = hc.dot(&c);
        let hi = self.degree() / tol;
        let tau = if den > 0.0 && num.is_finite() { num / den } else { 1.0 };
        Ok(tau.clamp(1e-3, hi))
    }
}

fn solve_spd(h: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    let scale = h.diagonal().iter().cloned().fold(0.0, f64::max).max(1.0);
    let n = h.nrows();
    let shifted = h + DMatrix::identity(n, n) * (scale * 1e-14);
    shifted
        .cholesky()
        .map(|ch| ch.solve(rhs))
        .ok_or_else(|| Error::Numerical("barrier Hessian is not positive definite".into()))
}

/// Checks the shape and strict feasibility of a subproblem.
pub fn validate(spec: &SubproblemSpec) -> Result<()> {
    if spec.lambda < 0.0 || !spec.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be nonnegative, got {}", spec.lambda)));
    }
    if spec.start.z.len() != spec.n {
        return Err(Error::Dimension(format!("start point has length {}, expected {}", spec.start.z.len(), spec.n)));
    }
    for row in spec.med_rows.iter().chain(&spec.ew_rows) {
        if row.grad.iter().any(|&(i, _)| i >= spec.n) {
            return Err(Error::Dimension("row gradient index out of range".into()));
        }
    }
    let prob = BarrierProblem::new(spec, 1.0);
    if !prob.is_strictly_feasible(&prob.initial_state().x) {
        return Err(Error::Invariant("starting point is not strictly feasible".into()));
    }
    Ok(())
}

/// Solves the subproblem to duality gap `opts.tol`.
///
/// Returns an error only for malformed input; numerical trouble is reported
/// through [`SolveStatus`] together with the last feasible iterate.
pub fn solve(spec: &SubproblemSpec, opts: &SolverOptions) -> Result<SubproblemSolution> {
    validate(spec)?;
    let mut prob = BarrierProblem::new(spec, 1.0);
    let mut state = prob.initial_state();
    prob.tau = prob.initial_tau(&state.x, opts.tol).unwrap_or(1.0);
    let degree = prob.degree();
    let mut trace = opts.trace.then(Vec::new);
    let mut iters = 0usize;
    let mut last_dec = f64::INFINITY;

    let status = 'outer: loop {
        // centering
        loop {
            if iters >= opts.max_newton {
                break 'outer SolveStatus::MaxIter;
            }
            let step = match prob.newton_direction(&state.x) {
                Ok((dir, dec)) => {
                    last_dec = dec;
                    if dec / 2.0 <= opts.centering_tol {
                        break;
                    }
                    match prob.line_search(&state.x, &dir, -dec, opts) {
                        // step shrunk to the rounding floor at a near-central point
                        Ok(s) if s < 1e-3 && dec < 1e-8 => break,
                        Ok(s) => {
                            for (a, d) in state.x.iter_mut().zip(&dir) {
                                *a += s * d;
                            }
                            s
                        }
                        Err(_) if dec < 1e-6 => break,
                        Err(_) => break 'outer SolveStatus::NumericalFailure,
                    }
                }
                Err(_) => break 'outer SolveStatus::NumericalFailure,
            };
            iters += 1;
            if let Some(tr) = trace.as_mut() {
                tr.push(NewtonRecord {
                    step: iters,
                    tau: prob.tau,
                    objective: prob.objective(&state.x),
                    barrier_objective: prob.value(&state.x),
                    decrement_sq: last_dec,
                    step_size: step,
                });
            }
            if state.x[prob.t_idx()] > 1e12 {
                break 'outer SolveStatus::NumericalFailure;
            }
        }
        if degree / prob.tau <= opts.tol {
            break SolveStatus::Optimal;
        }
        prob.tau = (prob.tau * opts.mu).min(degree / opts.tol);
    };

    let x = &state.x;
    let slacks = prob.slacks(x);
    let infeas =
        slacks.iter().map(|s| (-s).max(0.0)).chain(std::iter::once((-prob.cone_gap(x)).max(0.0))).fold(0.0, f64::max);
    let centering = last_dec.max(0.0).sqrt() / prob.tau;
    let kkt_residual = (degree / prob.tau).max(infeas).max(centering);
    let n = spec.n;
    Ok(SubproblemSolution {
        z: x[..n].to_vec(),
        t: x[n],
        eta: if prob.has_eta { x[n + 1] } else { spec.start.eta },
        status,
        newton_iters: iters,
        kkt_residual,
        tau: prob.tau,
        duals: slacks.iter().map(|s| 1.0 / (prob.tau * s)).collect(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SubproblemSpec {
        // min t - η/2 s.t. ‖z‖ ≤ t, z₁ ≥ 1, z₁ - η ≥ 0
        SubproblemSpec {
            n: 2,
            lambda: 0.5,
            med_rows: vec![AffineRow::new(vec![(0, 1.0)], 1.0)],
            ew_rows: vec![AffineRow::new(vec![(0, 1.0)], 0.0)],
            start: StartPoint { z: vec![2.0, 0.0], t: 3.0, eta: 1.0 },
        }
    }

    #[test]
    fn toy_problem_optimum() {
        let sol = solve(&toy(), &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-6, "{:?}", sol.z);
        assert!(sol.z[1].abs() < 1e-6);
        assert!((sol.t - 1.0).abs() < 1e-6);
        assert!((sol.eta - 1.0).abs() < 1e-6);
        assert!((sol.objective(0.5) - 0.5).abs() < 1e-7);
        assert!(sol.kkt_residual <= 1e-7);
    }

    #[test]
    fn cone_only_goes_to_origin() {
        let spec = SubproblemSpec {
            n: 3,
            lambda: 0.0,
            med_rows: vec![],
            ew_rows: vec![],
            start: StartPoint { z: vec![0.3, -0.2, 0.1], t: 1.0, eta: 0.0 },
        };
        let sol = solve(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.t < 1e-8);
        assert!(sol.z.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn centering_matches_closed_form() {
        // τt - log(t² - z²) is minimized at z = 0, t = 2/τ
        let spec = SubproblemSpec {
            n: 1,
            lambda: 0.0,
            med_rows: vec![],
            ew_rows: vec![],
            start: StartPoint { z: vec![0.5], t: 3.0, eta: 0.0 },
        };
        let opts = SolverOptions::default();
        let prob = BarrierProblem::new(&spec, 4.0);
        let mut st = prob.initial_state();
        let mut steps = 0;
        loop {
            let info = prob.newton_step(&mut st, &opts).unwrap();
            steps += 1;
            assert!(info.directional_derivative < 0.0);
            assert!(prob.is_strictly_feasible(&st.x));
            if (st.x[0]).abs() < 1e-10 && (st.x[1] - 0.5).abs() < 1e-10 {
                break;
            }
            assert!(steps < 10, "{st:?}");
        }
    }

    #[test]
    fn barrier_value_is_monotone_within_a_stage() {
        let spec = toy();
        let opts = SolverOptions::default();
        let prob = BarrierProblem::new(&spec, 10.0);
        let mut st = prob.initial_state();
        let mut prev = prob.value(&st.x);
        for _ in 0..15 {
            let info = prob.newton_step(&mut st, &opts).unwrap();
            let v = prob.value(&st.x);
            assert!(v <= prev + 1e-12);
            prev = v;
            if info.decrement_sq < 1e-20 {
                break;
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = toy();
        let prob = BarrierProblem::new(&spec, 3.0);
        let x = vec![1.7, 0.4, 2.5, 0.8];
        let (g, h) = prob.derivatives(&x);
        for p in 0..x.len() {
            let eps = 1e-6;
            let mut xp = x.clone();
            xp[p] += eps;
            let mut xm = x.clone();
            xm[p] -= eps;
            let fd = (prob.value(&xp) - prob.value(&xm)) / (2.0 * eps);
            assert!((fd - g[p]).abs() < 1e-5);
            let (gp, _) = prob.derivatives(&xp);
            let (gm, _) = prob.derivatives(&xm);
            for q in 0..x.len() {
                let fdh = (gp[q] - gm[q]) / (2.0 * eps);
                assert!((fdh - h[(q, p)]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mut spec = toy();
        spec.start.z = vec![0.5, 0.0];
        assert!(matches!(solve(&spec, &SolverOptions::default()), Err(Error::Invariant(_))));
        let mut spec = toy();
        spec.start.t = 1.0;
        assert!(solve(&spec, &SolverOptions::default()).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let mut spec = toy();
        spec.start.z = vec![2.0];
        assert!(matches!(solve(&spec, &SolverOptions::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn max_iter_status() {
        let opts = SolverOptions { max_newton: 3, ..Default::default() };
        let sol = solve(&toy(), &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::MaxIter);
        assert_eq!(sol.newton_iters, 3);
    }

    #[test]
    fn trace_is_recorded() {
        let opts = SolverOptions { trace: true, ..Default::default() };
        let sol = solve(&toy(), &opts).unwrap();
        let tr = sol.trace.unwrap();
        assert_eq!(tr.len(), sol.newton_iters);
        let csv = trace_csv(&tr);
        assert!(csv.starts_with("step,tau,objective"));
        assert_eq!(csv.lines().count(), tr.len() + 1);
    }
}
