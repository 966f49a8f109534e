//! Interior-point solution of the LMI program and a posteriori certificate
//! verification.
//!
//! Phase I finds a strictly feasible point by minimizing the slack `tau` in
//! `G(rho, lambda) \preceq tau I` until `tau` is safely negative. Phase II
//! minimizes `rho` along the log-barrier central path from that point. The
//! returned multipliers are then re-checked against the independently
//! assembled certificate matrix using the Jacobi eigensolver; if solver
//! roundoff left the point marginally infeasible, it is restored by blending
//! toward the Phase I anchor along the (affine) matrix segment.

mod barrier;

use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lmi::{self, CouplingMode, LmiError, LmiProgram};
use crate::model::FeedForwardNetwork;
use crate::numerics::{max_eigenvalue, NumericsError, SymMatrix};

use barrier::{BarrierProblem, VarBasis};

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error("initial point is not strictly feasible (factorization failed at pivot {pivot})")]
    InfeasibleStart { pivot: usize },
    #[error("Phase I could not reach a strictly feasible point (final tau = {tau:.6e})")]
    Phase1Failed { tau: f64 },
    #[error("Newton centering did not converge within {iterations} iterations at mu = {mu:.3e}")]
    NewtonStalled { mu: f64, iterations: usize },
    #[error("line search failed at mu = {mu:.3e} (Newton decrement {decrement:.3e})")]
    LineSearchFailed { mu: f64, decrement: f64 },
    #[error("Newton system is numerically singular at mu = {mu:.3e}")]
    NewtonSystemSingular { mu: f64 },
    #[error("barrier loop hit the outer iteration limit at mu = {mu:.3e} (objective {objective:.6e})")]
    MaxOuterExceeded { mu: f64, objective: f64 },
    #[error(
        "restoration anchor is not strictly feasible: max eigenvalue {max_eigenvalue:.3e} \
         exceeds -{required:.3e}"
    )]
    AnchorNotFeasible { max_eigenvalue: f64, required: f64 },
    #[error("expected {expected} lambdas, got {got}")]
    LambdaCount { expected: usize, got: usize },
}

/// Interior-point solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative barrier-gap stop: terminate once
    /// `degree * mu <= gap_tol * (1 + |rho|)`.
    pub gap_tol: f64,
    /// Newton decrement threshold (on `decrement^2 / 2`) for centering.
    pub newton_tol: f64,
    /// Multiplicative barrier parameter reduction per outer step, in (0, 1).
    pub mu_shrink: f64,
    /// Outer (centering) iteration limit per phase.
    pub max_outer: usize,
    /// Newton iteration limit per centering.
    pub max_newton: usize,
    /// Verification slack, relative to `1 + max |M|`.
    pub margin: f64,
    /// Bisection steps when restoring a marginally infeasible point.
    pub restore_bisection_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            newton_tol: 1e-10,
            mu_shrink: 0.2,
            max_outer: 60,
            max_newton: 50,
            margin: 1e-9,
            restore_bisection_iters: 60,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SdpError> {
        let positive = [
            ("gap_tol", self.gap_tol),
            ("newton_tol", self.newton_tol),
            ("mu_shrink", self.mu_shrink),
            ("margin", self.margin),
        ];
        for (name, value) in positive {
            if value <= 0.0 || !value.is_finite() {
                return Err(SdpError::BadConfig(format!("{name} must be positive, got {value}")));
            }
        }
        if self.mu_shrink >= 1.0 {
            return Err(SdpError::BadConfig(format!(
                "mu_shrink must lie in (0, 1), got {}",
                self.mu_shrink
            )));
        }
        if self.max_outer == 0 || self.max_newton == 0 || self.restore_bisection_iters == 0 {
            return Err(SdpError::BadConfig("iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

/// Counters and timings from one solve.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub outer_iters: usize,
    pub newton_iters: usize,
    pub final_mu: f64,
    pub phase1_tau: f64,
    /// Wall time in seconds.
    pub wall_time: f64,
}

/// A verified Lipschitz certificate: `l2 = sqrt(rho)` is a sound upper bound
/// whenever `verified_margin <= 0`, which `verify_and_restore` enforces
/// before returning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzCertificate {
    pub rho: f64,
    pub l2: f64,
    pub mode: CouplingMode,
    pub lambdas: Vec<f64>,
    /// Largest eigenvalue of the final certificate matrix, recomputed with
    /// the independent eigensolver. Always `<= 0`.
    pub verified_margin: f64,
    pub stats: SolveStats,
    /// `true` for Network mode, whose pairwise couplings carry no
    /// per-constraint soundness guarantee.
    pub experimental: bool,
}

/// A strictly feasible point produced by Phase I.
#[derive(Debug, Clone)]
pub struct FeasiblePoint {
    pub rho: f64,
    pub lambdas: Vec<f64>,
    /// Slack certificate: an upper bound on the largest eigenvalue of
    /// `G(rho, lambda)`, strictly negative.
    pub tau: f64,
    pub outer_iters: usize,
    pub newton_iters: usize,
}

/// Solver output: the near-optimal point plus the Phase I anchor needed for
/// certificate restoration.
#[derive(Debug, Clone)]
pub struct Solution {
    pub rho: f64,
    pub lambdas: Vec<f64>,
    pub anchor: FeasiblePoint,
    pub stats: SolveStats,
}

fn diagonal_of(matrix: &SymMatrix) -> Option<Vec<f64>> {
    let dim = matrix.dim();
    let entries = matrix.entries();
    for r in 0..dim {
        for c in 0..dim {
            if r != c && entries[r * dim + c] != 0.0 {
                return None;
            }
        }
    }
    Some((0..dim).map(|i| entries[i * dim + i]).collect())
}

/// Lowers the program's lambda bases into engine representations, preferring
/// the low-rank factors when they are actually low-rank.
fn lambda_bases(prog: &LmiProgram) -> Vec<VarBasis> {
    let dim = prog.dim();
    let factors = prog.factors();
    prog.f_lambda()
        .iter()
        .enumerate()
        .map(|(i, dense)| {
            if let Some(factor) = factors.and_then(|f| f.get(i)) {
                let k = factor.u.cols();
                if 2 * k <= dim {
                    return VarBasis::LowRank {
                        u: factor.u.entries().to_vec(),
                        k,
                        core: factor.core.clone(),
                    };
                }
            }
            VarBasis::Dense(dense.entries().to_vec())
        })
        .collect()
}

fn rho_basis(prog: &LmiProgram) -> VarBasis {
    match diagonal_of(prog.f_rho()) {
        Some(diag) => VarBasis::Diag(diag),
        None => VarBasis::Dense(prog.f_rho().entries().to_vec()),
    }
}

/// Finds a strictly feasible `(rho, lambda)` for the program.
///
/// If the initial point already satisfies the LMI with a comfortable margin
/// it is returned unchanged. Otherwise the auxiliary slack `tau` in
/// `G(rho, lambda) \preceq tau I` is minimized (with `rho` and `lambda`
/// free) until `tau` is safely negative.
pub fn phase1_feasible_point(
    prog: &LmiProgram,
    rho_init: f64,
    lambda_init: &[f64],
    cfg: &SolverConfig,
) -> Result<FeasiblePoint, SdpError> {
    cfg.validate()?;
    if lambda_init.len() != prog.f_lambda().len() {
        return Err(SdpError::LambdaCount {
            expected: prog.f_lambda().len(),
            got: lambda_init.len(),
        });
    }
    let g0 = prog.evaluate_g(rho_init, lambda_init)?;
    let scale = 1.0 + g0.max_abs();
    let top = max_eigenvalue(&g0)?;
    if top <= -1e-3 * scale {
        return Ok(FeasiblePoint {
            rho: rho_init,
            lambdas: lambda_init.to_vec(),
            tau: top,
            outer_iters: 0,
            newton_iters: 0,
        });
    }
    // Degenerate program: nothing to steer with, and the constant part
    // already satisfies the LMI (possibly non-strictly).
    if prog.f_lambda().iter().all(|f| f.entries().iter().all(|&e| e == 0.0)) && top <= 0.0 {
        return Ok(FeasiblePoint {
            rho: rho_init,
            lambdas: lambda_init.to_vec(),
            tau: top,
            outer_iters: 0,
            newton_iters: 0,
        });
    }

    // Augmented problem over (tau, rho, lambda): minimize tau subject to
    // G - tau I \preceq 0.
    let dim = prog.dim();
    let mut bases = Vec::with_capacity(2 + prog.f_lambda().len());
    bases.push(VarBasis::Diag(vec![-1.0; dim]));
    bases.push(rho_basis(prog));
    bases.extend(lambda_bases(prog));
    let vars = bases.len();
    let mut cost = vec![0.0; vars];
    cost[0] = 1.0;
    let mut nonneg = vec![false; vars];
    nonneg[2..].copy_from_slice(&prog.nonneg()[1..]);
    let problem =
        BarrierProblem { dim, f0: prog.f_const().entries().to_vec(), bases, nonneg, cost };

    let tau0 = top + (0.1 * top.abs()).max(1.0);
    let mut z0 = Vec::with_capacity(vars);
    z0.push(tau0);
    z0.push(rho_init);
    z0.extend_from_slice(lambda_init);

    let goal = -0.05 * scale;
    let outcome = barrier::follow_path(&problem, z0, cfg, Some(&|z: &[f64]| z[0] <= goal))?;
    let tau = outcome.z[0];
    debug!(
        "phase 1: tau = {tau:.6e} after {} outer / {} newton iterations (goal hit: {})",
        outcome.outer_iters, outcome.newton_iters, outcome.stopped_early
    );
    if tau >= 0.0 {
        return Err(SdpError::Phase1Failed { tau });
    }
    Ok(FeasiblePoint {
        rho: outcome.z[1],
        lambdas: outcome.z[2..].to_vec(),
        tau,
        outer_iters: outcome.outer_iters,
        newton_iters: outcome.newton_iters,
    })
}

/// Minimizes `rho` over the program's feasible set with the log-barrier
/// method. The returned `rho` is within `gap_tol * (1 + |rho*|)` of the
/// optimum.
pub fn solve(prog: &LmiProgram, cfg: &SolverConfig) -> Result<Solution, SdpError> {
    cfg.validate()?;
    let started = Instant::now();

    let rho_init = 1.0 + prog.f_const().max_abs();
    let lambda_init = vec![1.0; prog.f_lambda().len()];
    let anchor = phase1_feasible_point(prog, rho_init, &lambda_init, cfg)?;

    let dim = prog.dim();
    let mut bases = Vec::with_capacity(prog.var_count());
    bases.push(rho_basis(prog));
    bases.extend(lambda_bases(prog));
    let problem = BarrierProblem {
        dim,
        f0: prog.f_const().entries().to_vec(),
        bases,
        nonneg: prog.nonneg().to_vec(),
        cost: prog.cost().to_vec(),
    };

    let mut z0 = Vec::with_capacity(prog.var_count());
    z0.push(anchor.rho);
    z0.extend_from_slice(&anchor.lambdas);
    let outcome = barrier::follow_path(&problem, z0, cfg, None)?;

    let stats = SolveStats {
        outer_iters: anchor.outer_iters + outcome.outer_iters,
        newton_iters: anchor.newton_iters + outcome.newton_iters,
        final_mu: outcome.mu,
        phase1_tau: anchor.tau,
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok(Solution { rho: outcome.z[0], lambdas: outcome.z[1..].to_vec(), anchor, stats })
}

/// Re-verifies a solver output against the independently assembled
/// certificate matrix and, if necessary, restores feasibility by blending
/// toward the strictly feasible anchor.
///
/// The verification margin is `margin * (1 + max |M|)`. Since `M` is affine
/// in `(rho, lambda)` and the largest eigenvalue is convex, the smallest
/// blending weight that passes the margin test is found by bisection; the
/// anchor itself (`theta = 1`) is always a valid fallback.
pub fn verify_and_restore(
    net: &FeedForwardNetwork,
    mode: &CouplingMode,
    rho_star: f64,
    lambda_star: &[f64],
    anchor: &FeasiblePoint,
    stats: SolveStats,
    cfg: &SolverConfig,
) -> Result<LipschitzCertificate, SdpError> {
    cfg.validate()?;
    let n = net.hidden_total();
    let spec_star = lmi::multiplier_spec(net, mode, lambda_star.to_vec())?;
    let t_star = lmi::build_t(&spec_star, n)?;
    let m_star = lmi::assemble_m(net, &t_star, rho_star)?;
    let scale = 1.0 + m_star.max_abs();
    let required = cfg.margin * scale;

    let top_star = max_eigenvalue(&m_star)?;
    if top_star <= -required {
        return Ok(certificate(rho_star, lambda_star.to_vec(), mode, top_star, stats));
    }

    let spec_anchor = lmi::multiplier_spec(net, mode, anchor.lambdas.clone())?;
    let t_anchor = lmi::build_t(&spec_anchor, n)?;
    let m_anchor = lmi::assemble_m(net, &t_anchor, anchor.rho)?;
    let top_anchor = max_eigenvalue(&m_anchor)?;
    if top_anchor > -required {
        return Err(SdpError::AnchorNotFeasible { max_eigenvalue: top_anchor, required });
    }

    // Bisect for the smallest theta whose blend passes the margin test.
    let blend_eigen = |theta: f64| -> Result<f64, SdpError> {
        let entries: Vec<f64> = m_star
            .entries()
            .iter()
            .zip(m_anchor.entries())
            .map(|(s, a)| (1.0 - theta) * s + theta * a)
            .collect();
        Ok(max_eigenvalue(&SymMatrix::symmetrized(m_star.dim(), entries))?)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..cfg.restore_bisection_iters {
        let mid = 0.5 * (lo + hi);
        if blend_eigen(mid)? <= -required {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let theta = hi;
    let rho = (1.0 - theta) * rho_star + theta * anchor.rho;
    let lambdas: Vec<f64> = lambda_star
        .iter()
        .zip(&anchor.lambdas)
        .map(|(s, a)| (1.0 - theta) * s + theta * a)
        .collect();
    let margin = blend_eigen(theta)?;
    debug!("restored feasibility at theta = {theta:.3e} (margin {margin:.3e})");
    Ok(certificate(rho, lambdas, mode, margin, stats))
}

fn certificate(
    rho: f64,
    lambdas: Vec<f64>,
    mode: &CouplingMode,
    verified_margin: f64,
    stats: SolveStats,
) -> LipschitzCertificate {
    // The LMI only deepens as rho decreases toward 0 (its basis is negative
    // semidefinite), so clamping a marginally negative rho is sound.
    let rho = rho.max(0.0);
    LipschitzCertificate {
        rho,
        l2: rho.sqrt(),
        mode: mode.clone(),
        lambdas,
        verified_margin,
        stats,
        experimental: mode.is_experimental(),
    }
}
