//! Convex-concave procedure for minimum-energy constellations with large
//! minimum Euclidean and product distances.
//!
//! The relaxed design problem is
//!
//! ```text
//!   minimize    t - λ η
//!   subject to  ‖c‖₂ ≤ t
//!               cᴴ E_{i,j} c   ≥ D_E²      for all i < j
//!               cᴴ B_{i,j,k} c ≥ η         for all i < j, all k
//! ```
//!
//! where `η` stands in for the squared minimum element-wise gap. The
//! quadratic constraints are convex functions bounded from below, which is
//! the nonconvex direction. Each iteration replaces them by their tangent
//! planes at the current iterate `c_q`, giving a single-cone SOCP solved by
//! [`crate::socp`]. Tangent planes of a convex function lie below it, so the
//! solution of the linearized problem always satisfies the original
//! constraints and the iterates stay feasible.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::constellation::{meta_map, AmGmEntry, Constellation, DistanceProfile};
use crate::error::{Error, Result};
use crate::qforms::{all_forms, realify, QuadFormIndex, RealVector};
use crate::socp::{self, AffineRow, SolveStatus, SolverOptions, StartPoint, SubproblemSpec};

/// Resample cap for [`init_feasible`].
const INIT_RESAMPLE_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CccpConfig {
    /// Complex dimensions `K`.
    pub dims: usize,
    /// Constellation size `M`.
    pub size: usize,
    /// Trade-off `λ` between energy and element-wise distance.
    pub lambda: f64,
    /// Minimum Euclidean distance threshold `D_E`.
    pub d_e_threshold: f64,
    /// Stop once `‖c_q - c_{q-1}‖₂ ≤ epsilon`.
    pub epsilon: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    pub solver_tol: f64,
    /// Initial MED as a multiple of `D_E`.
    pub init_margin: f64,
    /// Newton-step budget per subproblem.
    pub max_newton: usize,
}

impl CccpConfig {
    pub fn new(dims: usize, size: usize) -> Self {
        Self {
            dims,
            size,
            lambda: 0.5,
            d_e_threshold: 1.0,
            epsilon: 1e-4,
            max_iters: 100,
            restarts: 20,
            seed: 0,
            solver_tol: 1e-8,
            init_margin: 1.05,
            max_newton: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.dims < 1 {
            return bad("K must be at least 1");
        }
        if self.size < 2 {
            return bad("M must be at least 2");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if !(self.d_e_threshold > 0.0 && self.d_e_threshold.is_finite()) {
            return bad("D_E must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if self.restarts < 1 {
            return bad("restarts must be at least 1");
        }
        if !(self.solver_tol > 0.0) {
            return bad("solver tolerance must be positive");
        }
        if !(self.init_margin > 1.0) {
            return bad("init_margin must exceed 1");
        }
        Ok(())
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions { tol: self.solver_tol, max_newton: self.max_newton, ..Default::default() }
    }
}

/// RNG for restart chain `chain` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Draws i.i.d. standard complex Gaussian entries and rescales them so the
/// minimum pairwise distance equals `margin * d_e`.
pub fn init_feasible(dims: usize, size: usize, d_e: f64, margin: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Complex64>> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    for _ in 0..INIT_RESAMPLE_CAP {
        let pts: Vec<Complex64> = (0..dims * size)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(re * scale, im * scale)
            })
            .collect();
        let c = Constellation::new(dims, size, pts)?;
        let med = c.med();
        if med <= 0.0 {
            continue;
        }
        let scaled = c.scaled(margin * d_e / med);
        if scaled.min_elementwise() > 1e-9 {
            return Ok(scaled.into_vec());
        }
    }
    Err(Error::Numerical(format!("no admissible initial point after {INIT_RESAMPLE_CAP} draws")))
}

/// Smallest `zᵀE'z - D_E²` over all pairs.
pub fn min_med_slack(z: &RealVector, dims: usize, size: usize, d_e: f64) -> f64 {
    let (pair_forms, _) = all_forms(dims, size);
    pair_forms.iter().map(|f| f.value_unchecked(z.as_slice()) - d_e * d_e).fold(f64::INFINITY, f64::min)
}

/// Smallest squared element-wise gap `zᵀB'z`.
pub fn min_elementwise_sq(z: &RealVector, dims: usize, size: usize) -> f64 {
    let (_, ew_forms) = all_forms(dims, size);
    ew_forms.iter().map(|f| f.value_unchecked(z.as_slice())).fold(f64::INFINITY, f64::min)
}

fn tangent_row(form: &QuadFormIndex, z: &[f64], extra_rhs: f64) -> AffineRow {
    // 2 z_qᵀA'z - z_qᵀA'z_q ≥ extra  ⇔  gᵀz ≥ extra + z_qᵀA'z_q
    AffineRow::new(form.sparse_gradient_unchecked(z), extra_rhs + form.value_unchecked(z))
}

/// Builds the linearized subproblem at the iterate `z_q`.
pub fn linearize(z_q: &RealVector, config: &CccpConfig) -> Result<SubproblemSpec> {
    let (dims, size) = (config.dims, config.size);
    let n = 2 * dims * size;
    if z_q.len() != n {
        return Err(Error::Dimension(format!("iterate has length {}, expected {n}", z_q.len())));
    }
    let d_e2 = config.d_e_threshold * config.d_e_threshold;
    let slack = min_med_slack(z_q, dims, size, config.d_e_threshold);
    if !(slack > 0.0) {
        return Err(Error::Invariant(format!("distance constraint slack {slack:e} at the linearization point")));
    }
    let ew_min = min_elementwise_sq(z_q, dims, size);
    if !(ew_min > 0.0) {
        return Err(Error::Invariant("zero element-wise distance at the linearization point".into()));
    }
    let (pair_forms, ew_forms) = all_forms(dims, size);
    let z = z_q.as_slice();
    let med_rows = pair_forms.iter().map(|f| tangent_row(f, z, d_e2)).collect();
    let ew_rows = ew_forms.iter().map(|f| tangent_row(f, z, 0.0)).collect();
    Ok(SubproblemSpec {
        n,
        lambda: config.lambda,
        med_rows,
        ew_rows,
        start: StartPoint { z: z.to_vec(), t: z_q.norm() * (1.0 + 1e-6), eta: ew_min * (1.0 - 1e-6) },
    })
}

/// One CCCP iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub q: usize,
    /// `‖c_q‖²`.
    pub energy: f64,
    /// `t - λη` reported by the subproblem (for `q = 0`, evaluated at `c_0`).
    pub objective: f64,
    /// Smallest `c_qᴴE_{i,j}c_q - D_E²`.
    pub min_med_slack: f64,
    /// `η_q`.
    pub eta: f64,
    /// Smallest `c_qᴴB_{i,j,k}c_q - η_q`.
    pub min_ew_slack: f64,
    /// `‖c_q - c_{q-1}‖₂`; zero for `q = 0`.
    pub step_norm: f64,
    /// `‖c_q‖ - λ·min_{i,j,k} |x_{i,k} - x_{j,k}|²`, the quantity CCCP
    /// decreases monotonically.
    pub merit: f64,
    pub newton_iters: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CccpTrace {
    pub records: Vec<IterationRecord>,
}

impl CccpTrace {
    /// CSV with columns `q,energy,objective,eta,step_norm`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("q,energy,objective,eta,step_norm\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.q, r.energy, r.objective, r.eta, r.step_norm
            ));
        }
        s
    }

    /// Largest increase of the merit between consecutive iterates.
    pub fn max_merit_increase(&self) -> f64 {
        self.records.windows(2).map(|w| w[1].merit - w[0].merit).fold(0.0, f64::max)
    }

    /// Largest relative energy increase between consecutive iterates.
    pub fn max_relative_energy_increase(&self) -> f64 {
        self.records.windows(2).map(|w| (w[1].energy - w[0].energy) / w[0].energy).fold(0.0, f64::max)
    }
}

/// Why a chain stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStatus {
    /// Step norm fell below `epsilon`.
    Converged,
    /// `max_iters` reached.
    MaxIters,
    /// A subproblem solve did not reach optimality; the last accepted
    /// iterate is kept.
    SolverStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub chain_index: usize,
    pub status: ChainStatus,
    pub iterations_used: usize,
    /// Minimum-energy solution before normalization.
    pub raw: Constellation,
    pub trace: CccpTrace,
}

impl ChainOutcome {
    pub fn normalized(&self) -> Result<Constellation> {
        self.raw.normalize()
    }
}

/// Runs one CCCP chain from its own random start.
pub fn run_chain(config: &CccpConfig, chain_index: usize) -> Result<ChainOutcome> {
    config.validate()?;
    let (dims, size) = (config.dims, config.size);
    let mut rng = chain_rng(config.seed, chain_index);
    let c0 = init_feasible(dims, size, config.d_e_threshold, config.init_margin, &mut rng)?;
    let mut z = realify(&c0);
    let opts = config.solver_options();

    let eta0 = min_elementwise_sq(&z, dims, size);
    let mut trace = CccpTrace::default();
    trace.records.push(IterationRecord {
        q: 0,
        energy: z.norm().powi(2),
        objective: z.norm() - config.lambda * eta0,
        min_med_slack: min_med_slack(&z, dims, size, config.d_e_threshold),
        eta: eta0,
        min_ew_slack: 0.0,
        step_norm: 0.0,
        merit: z.norm() - config.lambda * eta0,
        newton_iters: 0,
        kkt_residual: 0.0,
    });

    let mut status = ChainStatus::MaxIters;
    let mut used = 0;
    for q in 1..=config.max_iters {
        let spec = linearize(&z, config)?;
        let sol = socp::solve(&spec, &opts)?;
        if sol.status != SolveStatus::Optimal {
            status = ChainStatus::SolverStalled;
            break;
        }
        let next = RealVector(sol.z);
        let step_norm = next.as_slice().iter().zip(z.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let slack = min_med_slack(&next, dims, size, config.d_e_threshold);
        let ew = min_elementwise_sq(&next, dims, size);
        trace.records.push(IterationRecord {
            q,
            energy: next.norm().powi(2),
            objective: sol.t - config.lambda * sol.eta,
            min_med_slack: slack,
            eta: sol.eta,
            min_ew_slack: ew - sol.eta,
            step_norm,
            merit: next.norm() - config.lambda * ew,
            newton_iters: sol.newton_iters,
            kkt_residual: sol.kkt_residual,
        });
        z = next;
        used = q;
        if step_norm <= config.epsilon {
            status = ChainStatus::Converged;
            break;
        }
    }

    let raw = Constellation::new(dims, size, z.to_complex())?;
    Ok(ChainOutcome { chain_index, status, iterations_used: used, raw, trace })
}

/// Per-restart summary, computed on the normalized constellation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestartSummary {
    pub chain_index: usize,
    pub status: Option<ChainStatus>,
    pub error: Option<String>,
    pub iterations_used: usize,
    pub final_energy: f64,
    pub med: f64,
    pub mpd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub config: CccpConfig,
    /// Unit-power constellation of the selected chain.
    pub best: Constellation,
    /// The selected chain's minimum-energy solution.
    pub best_raw: Constellation,
    pub best_chain: usize,
    pub profile: DistanceProfile,
    /// Trace of the selected chain.
    pub trace: CccpTrace,
    pub best_status: ChainStatus,
    pub iterations_used: usize,
    pub all_restarts: Vec<RestartSummary>,
    /// Successful chains in index order.
    pub chains: Vec<ChainOutcome>,
}

impl OptimizeResult {
    /// Metadata written alongside the selected constellation.
    pub fn meta(&self) -> serde_json::Map<String, serde_json::Value> {
        let c = &self.config;
        meta_map([
            ("lambda", serde_json::Value::from(c.lambda)),
            ("d_e_threshold", c.d_e_threshold.into()),
            ("epsilon", c.epsilon.into()),
            ("max_iters", c.max_iters.into()),
            ("seed", c.seed.into()),
            ("chain_index", self.best_chain.into()),
            ("iterations_used", self.iterations_used.into()),
            ("final_energy", self.best_raw.energy().into()),
            ("med", self.profile.med.into()),
            ("mpd", self.profile.mpd.into()),
        ])
    }
}

/// Selection key: MED rounded to three decimals, then MPD.
fn selection_key(c: &Constellation) -> Option<(f64, f64)> {
    let med = (c.med() * 1000.0).round() / 1000.0;
    let mpd = c.profile().ok()?.mpd;
    Some((med, mpd))
}

fn better(a: (f64, f64, usize), b: (f64, f64, usize)) -> bool {
    // lexicographic max on (med, mpd), lowest chain index on ties
    match a.0.partial_cmp(&b.0) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        _ => match a.1.partial_cmp(&b.1) {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Less) => false,
            _ => a.2 < b.2,
        },
    }
}

/// Runs `config.restarts` independent chains in parallel and selects the
/// best normalized result.
pub fn optimize(config: &CccpConfig) -> Result<OptimizeResult> {
    config.validate()?;
    let outcomes: Vec<Result<ChainOutcome>> =
        (0..config.restarts).into_par_iter().map(|idx| run_chain(config, idx)).collect();

    let mut summaries = Vec::with_capacity(outcomes.len());
    let mut chains = Vec::new();
    let mut best: Option<((f64, f64, usize), usize)> = None;
    for (idx, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(ch) => {
                let norm = ch.normalized()?;
                let prof = norm.profile().ok();
                summaries.push(RestartSummary {
                    chain_index: idx,
                    status: Some(ch.status),
                    error: None,
                    iterations_used: ch.iterations_used,
                    final_energy: ch.raw.energy(),
                    med: norm.med(),
                    mpd: prof.as_ref().map_or(0.0, |p| p.mpd),
                });
                if let Some((med, mpd)) = selection_key(&norm) {
                    let key = (med, mpd, idx);
                    if best.as_ref().is_none_or(|(b, _)| better(key, *b)) {
                        best = Some((key, chains.len()));
                    }
                }
                chains.push(ch);
            }
            Err(e) => summaries.push(RestartSummary {
                chain_index: idx,
                status: None,
                error: Some(e.to_string()),
                iterations_used: 0,
                final_energy: f64::NAN,
                med: f64::NAN,
                mpd: f64::NAN,
            }),
        }
    }

    let Some((_, pos)) = best else {
        let details = summaries
            .iter()
            .map(|s| format!("chain {}: {}", s.chain_index, s.error.as_deref().unwrap_or("degenerate result")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllRestartsFailed { restarts: config.restarts, details });
    };
    let chosen = &chains[pos];
    let best_c = chosen.normalized()?;
    let profile = best_c.profile()?;
    Ok(OptimizeResult {
        config: config.clone(),
        best: best_c,
        best_raw: chosen.raw.clone(),
        best_chain: chosen.chain_index,
        profile,
        trace: chosen.trace.clone(),
        best_status: chosen.status,
        iterations_used: chosen.iterations_used,
        all_restarts: summaries,
        chains,
    })
}

/// Runs [`optimize`] once per trade-off value.
pub fn sweep_lambda(config: &CccpConfig, lambdas: &[f64]) -> Vec<Result<OptimizeResult>> {
    lambdas.iter().map(|&lambda| optimize(&CccpConfig { lambda, ..config.clone() })).collect()
}

/// How tight the AM-GM relaxation is on a constellation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmGmReport {
    pub entries: Vec<AmGmEntry>,
    pub min_slack: f64,
    /// Pairs whose per-dimension gaps are all equal.
    pub equal_gap_pairs: usize,
    pub mpd: f64,
    pub min_elementwise: f64,
    /// `min_elementwise^K`, the guaranteed lower bound on the MPD.
    pub delta_bound: f64,
    pub delta_bound_holds: bool,
}

pub fn amgm_gap_report(c: &Constellation) -> Result<AmGmReport> {
    let entries = c.amgm_check();
    let profile = c.profile()?;
    let delta_bound = profile.min_elementwise.powi(c.dims() as i32);
    Ok(AmGmReport {
        min_slack: entries.iter().map(|e| e.slack).fold(f64::INFINITY, f64::min),
        equal_gap_pairs: entries.iter().filter(|e| e.equal_gaps).count(),
        mpd: profile.mpd,
        min_elementwise: profile.min_elementwise,
        delta_bound,
        delta_bound_holds: profile.mpd >= delta_bound * (1.0 - 1e-9),
        entries,
    })
}
