//! The log-barrier Newton engine shared by Phase I (feasibility) and
//! Phase II (descent).
//!
//! The problem is: minimize `cost . z` subject to
//! `S(z) = -(F0 + sum_i z_i F_i)` positive definite and `z_i > 0` for the
//! flagged variables. Centering minimizes
//! `cost . z - mu log det S(z) - mu sum log z_i` with damped Newton steps.
//!
//! Basis matrices carry one of three representations. Gradient and Hessian
//! entries only ever need traces of products with `X = S^{-1}`, so low-rank
//! factors `U C U^T` reduce the per-pair Hessian cost from `O(N^3)` to a few
//! length-`N` dot products, which is what makes neuron-mode programs with
//! hundreds of multipliers tractable.

use log::debug;

use crate::numerics::{Cholesky, NumericsError};
use crate::sdp::{SdpError, SolverConfig};

/// One basis matrix in a representation the engine can exploit.
pub(crate) enum VarBasis {
    /// Full symmetric matrix, row-major `dim x dim`.
    Dense(Vec<f64>),
    /// Diagonal matrix given by its diagonal.
    Diag(Vec<f64>),
    /// `U C U^T` with `u` a row-major `dim x k` factor and `core` a
    /// symmetric `k x k` matrix.
    LowRank { u: Vec<f64>, k: usize, core: Vec<f64> },
}

pub(crate) struct BarrierProblem {
    pub dim: usize,
    /// Constant term of `G`, symmetric row-major.
    pub f0: Vec<f64>,
    pub bases: Vec<VarBasis>,
    pub nonneg: Vec<bool>,
    pub cost: Vec<f64>,
}

/// Predicate checked after every accepted Newton step.
pub(crate) type EarlyStop<'a> = &'a dyn Fn(&[f64]) -> bool;

pub(crate) struct PathOutcome {
    pub z: Vec<f64>,
    pub outer_iters: usize,
    pub newton_iters: usize,
    pub mu: f64,
    pub stopped_early: bool,
}

impl BarrierProblem {
    pub fn var_count(&self) -> usize {
        self.bases.len()
    }

    /// Barrier degree: matrix side plus one per scalar log term.
    pub fn degree(&self) -> f64 {
        (self.dim + self.nonneg.iter().filter(|&&b| b).count()) as f64
    }

    /// `S(z) = -(F0 + sum z_i F_i)`.
    pub fn slack_matrix(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut s: Vec<f64> = self.f0.iter().map(|v| -v).collect();
        for (basis, &zi) in self.bases.iter().zip(z) {
            if zi == 0.0 {
                continue;
            }
            basis.accumulate(n, -zi, &mut s);
        }
        s
    }

    fn barrier_value(&self, z: &[f64], chol: &Cholesky, mu: f64) -> f64 {
        let mut value = dot(&self.cost, z) - mu * chol.log_det();
        for (i, &flag) in self.nonneg.iter().enumerate() {
            if flag {
                value -= mu * z[i].ln();
            }
        }
        value
    }
}

impl VarBasis {
    /// `into += factor * F`.
    pub fn accumulate(&self, dim: usize, factor: f64, into: &mut [f64]) {
        match self {
            VarBasis::Dense(entries) => {
                for (dst, &v) in into.iter_mut().zip(entries) {
                    *dst += factor * v;
                }
            }
            VarBasis::Diag(diag) => {
                for (r, &d) in diag.iter().enumerate() {
                    if d != 0.0 {
                        into[r * dim + r] += factor * d;
                    }
                }
            }
            VarBasis::LowRank { u, k, core } => {
                let k = *k;
                // W = U C, then add factor * W U^T.
                for r in 0..dim {
                    let u_row = &u[r * k..(r + 1) * k];
                    if u_row.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let mut w_row = vec![0.0; k];
                    for (s, &uv) in u_row.iter().enumerate() {
                        if uv == 0.0 {
                            continue;
                        }
                        for (w, &cv) in w_row.iter_mut().zip(&core[s * k..(s + 1) * k]) {
                            *w += uv * cv;
                        }
                    }
                    let dst = &mut into[r * dim..(r + 1) * dim];
                    for c in 0..dim {
                        let u_c = &u[c * k..(c + 1) * k];
                        let mut v = 0.0;
                        for (a, b) in w_row.iter().zip(u_c) {
                            v += a * b;
                        }
                        dst[c] += factor * v;
                    }
                }
            }
        }
    }
}

/// Per-iteration cache: whatever each basis needs against the current
/// inverse `X`.
enum Prepared {
    /// `P = X F` for a dense basis, row-major `dim x dim` (not symmetric).
    Product(Vec<f64>),
    /// Nonzero indices of a diagonal basis.
    DiagSupport(Vec<usize>),
    /// `Y = X U` for a low-rank basis, row-major `dim x k`.
    Projected(Vec<f64>),
}

fn prepare(basis: &VarBasis, x: &[f64], dim: usize) -> Prepared {
    match basis {
        VarBasis::Dense(f) => {
            let mut p = vec![0.0; dim * dim];
            for r in 0..dim {
                let x_row = &x[r * dim..(r + 1) * dim];
                let dst = &mut p[r * dim..(r + 1) * dim];
                for (c0, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let f_row = &f[c0 * dim..(c0 + 1) * dim];
                    for (d, &fv) in dst.iter_mut().zip(f_row) {
                        *d += xv * fv;
                    }
                }
            }
            Prepared::Product(p)
        }
        VarBasis::Diag(diag) => Prepared::DiagSupport(
            diag.iter().enumerate().filter(|(_, &d)| d != 0.0).map(|(i, _)| i).collect(),
        ),
        VarBasis::LowRank { u, k, .. } => {
            let k = *k;
            let mut y = vec![0.0; dim * k];
            for r in 0..dim {
                let x_row = &x[r * dim..(r + 1) * dim];
                let dst = &mut y[r * k..(r + 1) * k];
                for (c0, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let u_row = &u[c0 * k..(c0 + 1) * k];
                    for (d, &uv) in dst.iter_mut().zip(u_row) {
                        *d += xv * uv;
                    }
                }
            }
            Prepared::Projected(y)
        }
    }
}

/// `tr(X F)` from the prepared cache.
fn trace_with_inverse(basis: &VarBasis, prep: &Prepared, x: &[f64], dim: usize) -> f64 {
    match (basis, prep) {
        (VarBasis::Dense(_), Prepared::Product(p)) => {
            (0..dim).map(|r| p[r * dim + r]).sum()
        }
        (VarBasis::Diag(diag), Prepared::DiagSupport(support)) => {
            support.iter().map(|&r| diag[r] * x[r * dim + r]).sum()
        }
        (VarBasis::LowRank { u, k, core }, Prepared::Projected(y)) => {
            // tr(C (U^T Y)) with Z = U^T Y symmetric.
            let k = *k;
            let mut acc = 0.0;
            for s in 0..k {
                for t in 0..k {
                    let c = core[s * k + t];
                    if c == 0.0 {
                        continue;
                    }
                    let mut z = 0.0;
                    for r in 0..dim {
                        z += u[r * k + s] * y[r * k + t];
                    }
                    acc += c * z;
                }
            }
            acc
        }
        _ => unreachable!("prepared cache mismatch"),
    }
}

/// `tr(X F_i X F_j)` for a pair of bases.
fn trace_pair(
    i_basis: &VarBasis,
    i_prep: &Prepared,
    j_basis: &VarBasis,
    j_prep: &Prepared,
    x: &[f64],
    dim: usize,
) -> f64 {
    use Prepared::*;
    use VarBasis::*;
    match (i_basis, i_prep, j_basis, j_prep) {
        (LowRank { u: ui, k: ki, core: ci }, _, LowRank { k: kj, core: cj, .. }, Projected(yj)) => {
            // Z = U_i^T Y_j, result tr(Z^T C_i Z C_j).
            let (ki, kj) = (*ki, *kj);
            let mut z = vec![0.0; ki * kj];
            for r in 0..dim {
                let u_row = &ui[r * ki..(r + 1) * ki];
                let y_row = &yj[r * kj..(r + 1) * kj];
                for (s, &uv) in u_row.iter().enumerate() {
                    if uv == 0.0 {
                        continue;
                    }
                    for (d, &yv) in z[s * kj..(s + 1) * kj].iter_mut().zip(y_row) {
                        *d += uv * yv;
                    }
                }
            }
            // A = C_i Z (ki x kj); result = sum_{s,t} Z[s,t] * (A C_j)[s,t].
            let mut acc = 0.0;
            for s in 0..ki {
                for t in 0..kj {
                    let mut a = 0.0;
                    for p in 0..ki {
                        a += ci[s * ki + p] * z[p * kj + t];
                    }
                    // (A C_j) column t against Z row s.
                    for q in 0..kj {
                        acc += a * cj[t * kj + q] * z[s * kj + q];
                    }
                }
            }
            acc
        }
        (Diag(di), DiagSupport(si), LowRank { k, core, .. }, Projected(yj)) => {
            // tr(Y^T D Y C) over the support of D.
            let k = *k;
            let mut acc = 0.0;
            for &r in si {
                let y_row = &yj[r * k..(r + 1) * k];
                let d = di[r];
                for (s, &ys) in y_row.iter().enumerate() {
                    if ys == 0.0 {
                        continue;
                    }
                    for (t, &yt) in y_row.iter().enumerate() {
                        acc += d * ys * core[s * k + t] * yt;
                    }
                }
            }
            acc
        }
        (LowRank { .. }, Projected(_), Diag(..), DiagSupport(_)) => {
            trace_pair(j_basis, j_prep, i_basis, i_prep, x, dim)
        }
        (Diag(di), DiagSupport(si), Diag(dj), DiagSupport(sj)) => {
            let mut acc = 0.0;
            for &r in si {
                for &c in sj {
                    let xv = x[r * dim + c];
                    acc += di[r] * dj[c] * xv * xv;
                }
            }
            acc
        }
        (Dense(_), Product(pi), Dense(_), Product(pj)) => {
            // tr(P_i P_j) = sum_{r,c} P_i[r,c] P_j[c,r].
            let mut acc = 0.0;
            for r in 0..dim {
                let pi_row = &pi[r * dim..(r + 1) * dim];
                for (c, &v) in pi_row.iter().enumerate() {
                    acc += v * pj[c * dim + r];
                }
            }
            acc
        }
        (Dense(_), Product(pi), Diag(dj), DiagSupport(sj)) => {
            // tr(P_i X D) over the support of D; X is symmetric.
            let mut acc = 0.0;
            for &r in sj {
                let pi_row = &pi[r * dim..(r + 1) * dim];
                let x_row = &x[r * dim..(r + 1) * dim];
                let mut inner = 0.0;
                for (a, b) in pi_row.iter().zip(x_row) {
                    inner += a * b;
                }
                acc += dj[r] * inner;
            }
            acc
        }
        (Diag(..), DiagSupport(_), Dense(_), Product(_)) => {
            trace_pair(j_basis, j_prep, i_basis, i_prep, x, dim)
        }
        (Dense(_), Product(pi), LowRank { u, k, core }, Projected(yj)) => {
            // tr(U^T (P_i Y_j) C) with Q = P_i Y_j.
            let k = *k;
            let mut q = vec![0.0; dim * k];
            for r in 0..dim {
                let pi_row = &pi[r * dim..(r + 1) * dim];
                let dst = &mut q[r * k..(r + 1) * k];
                for (c0, &pv) in pi_row.iter().enumerate() {
                    if pv == 0.0 {
                        continue;
                    }
                    let y_row = &yj[c0 * k..(c0 + 1) * k];
                    for (d, &yv) in dst.iter_mut().zip(y_row) {
                        *d += pv * yv;
                    }
                }
            }
            let mut acc = 0.0;
            for s in 0..k {
                for t in 0..k {
                    let c = core[s * k + t];
                    if c == 0.0 {
                        continue;
                    }
                    let mut z = 0.0;
                    for r in 0..dim {
                        z += u[r * k + s] * q[r * k + t];
                    }
                    acc += c * z;
                }
            }
            acc
        }
        (LowRank { .. }, Projected(_), Dense(_), Product(_)) => {
            trace_pair(j_basis, j_prep, i_basis, i_prep, x, dim)
        }
        _ => unreachable!("prepared cache mismatch"),
    }
}

/// Follows the central path from a strictly feasible `z0`.
///
/// `early_stop`, when given, is checked after every accepted Newton step;
/// returning `true` aborts immediately with the current (strictly feasible)
/// iterate. Without it the path is followed until
/// `degree * mu <= gap_tol * (1 + |objective|)`.
pub(crate) fn follow_path(
    prob: &BarrierProblem,
    z0: Vec<f64>,
    cfg: &SolverConfig,
    early_stop: Option<EarlyStop>,
) -> Result<PathOutcome, SdpError> {
    let degree = prob.degree();
    let mut z = z0;

    let s = prob.slack_matrix(&z);
    if let Err(NumericsError::NotPositiveDefinite { pivot }) = Cholesky::factor_raw(prob.dim, &s) {
        return Err(SdpError::InfeasibleStart { pivot });
    }
    if let Some(stop) = early_stop {
        if stop(&z) {
            return Ok(PathOutcome { z, outer_iters: 0, newton_iters: 0, mu: 0.0, stopped_early: true });
        }
    }

    let mut mu = initial_mu(prob, &z);
    let mut newton_total = 0usize;
    for outer in 1..=cfg.max_outer {
        let centered = center(prob, &mut z, mu, cfg, early_stop)?;
        newton_total += centered.iterations;
        if centered.stopped_early {
            return Ok(PathOutcome {
                z,
                outer_iters: outer,
                newton_iters: newton_total,
                mu,
                stopped_early: true,
            });
        }
        let objective = dot(&prob.cost, &z);
        debug!("outer {outer}: mu = {mu:.3e}, objective = {objective:.9e}");
        if !centered.reached_tolerance {
            // The Newton budget ran out mid-march; spend another outer round
            // at the same barrier parameter rather than walking further from
            // the central path.
            continue;
        }
        if degree * mu <= cfg.gap_tol * (1.0 + objective.abs()) {
            return Ok(PathOutcome {
                z,
                outer_iters: outer,
                newton_iters: newton_total,
                mu,
                stopped_early: false,
            });
        }
        mu *= cfg.mu_shrink;
    }
    Err(SdpError::MaxOuterExceeded { mu, objective: dot(&prob.cost, &z) })
}

/// Barrier parameter at which the starting point is as centered as possible:
/// the minimizer of the Newton decrement of `cost . z + mu phi(z)` over `mu`,
/// which is `sqrt(c' H^-1 c / g' H^-1 g)` with `H, g` the barrier Hessian and
/// gradient. A mismatched initial `mu` would force the first centering to
/// cross a long stretch of the damped Newton phase.
fn initial_mu(prob: &BarrierProblem, z: &[f64]) -> f64 {
    let fallback = dot(&prob.cost, z).abs().max(1.0) / prob.degree();
    let n = prob.dim;
    let m = prob.var_count();
    let s = prob.slack_matrix(z);
    let Ok(chol) = Cholesky::factor_raw(n, &s) else {
        return fallback;
    };
    let x = chol.inverse_raw();
    let prepared: Vec<Prepared> = prob.bases.iter().map(|basis| prepare(basis, &x, n)).collect();
    let mut barrier_grad = vec![0.0; m];
    for i in 0..m {
        barrier_grad[i] = trace_with_inverse(&prob.bases[i], &prepared[i], &x, n);
        if prob.nonneg[i] {
            barrier_grad[i] -= 1.0 / z[i];
        }
    }
    let mut hess = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = trace_pair(&prob.bases[i], &prepared[i], &prob.bases[j], &prepared[j], &x, n);
            hess[i * m + j] = v;
            hess[j * m + i] = v;
        }
        if prob.nonneg[i] {
            hess[i * m + i] += 1.0 / (z[i] * z[i]);
        }
    }
    let Ok((u, _)) = solve_newton_system(m, &mut hess.clone(), &prob.cost, fallback) else {
        return fallback;
    };
    let Ok((v, _)) = solve_newton_system(m, &mut hess, &barrier_grad, fallback) else {
        return fallback;
    };
    // solve_newton_system negates the right-hand side, which cancels in the
    // two quadratic forms.
    let cost_form = -dot(&prob.cost, &u);
    let grad_form = -dot(&barrier_grad, &v);
    if cost_form > 0.0 && grad_form > 0.0 {
        let matched = (cost_form / grad_form).sqrt();
        if matched.is_finite() && matched > 0.0 {
            return matched;
        }
    }
    fallback
}

struct Centered {
    iterations: usize,
    stopped_early: bool,
    reached_tolerance: bool,
}

fn center(
    prob: &BarrierProblem,
    z: &mut Vec<f64>,
    mu: f64,
    cfg: &SolverConfig,
    early_stop: Option<EarlyStop>,
) -> Result<Centered, SdpError> {
    let n = prob.dim;
    let m = prob.var_count();

    for iteration in 0..cfg.max_newton {
        let s = prob.slack_matrix(z);
        let chol = Cholesky::factor_raw(n, &s).map_err(SdpError::Numerics)?;
        let x = chol.inverse_raw();

        let prepared: Vec<Prepared> =
            prob.bases.iter().map(|basis| prepare(basis, &x, n)).collect();

        let mut grad = vec![0.0; m];
        for i in 0..m {
            grad[i] = prob.cost[i] + mu * trace_with_inverse(&prob.bases[i], &prepared[i], &x, n);
            if prob.nonneg[i] {
                grad[i] -= mu / z[i];
            }
        }

        let mut hess = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = mu
                    * trace_pair(&prob.bases[i], &prepared[i], &prob.bases[j], &prepared[j], &x, n);
                hess[i * m + j] = v;
                hess[j * m + i] = v;
            }
            if prob.nonneg[i] {
                hess[i * m + i] += mu / (z[i] * z[i]);
            }
        }

        let (direction, ridge) = solve_newton_system(m, &mut hess, &grad, mu)?;
        let decrement_sq = -dot(&grad, &direction);
        if decrement_sq <= 2.0 * cfg.newton_tol {
            return Ok(Centered { iterations: iteration, stopped_early: false, reached_tolerance: true });
        }

        // Largest step keeping the scalar barriers strictly positive.
        let mut t_max = 1.0f64;
        for i in 0..m {
            if prob.nonneg[i] && direction[i] < 0.0 {
                t_max = t_max.min(-0.995 * z[i] / direction[i]);
            }
        }

        // Direction of the slack matrix: dS = -sum d_i F_i.
        let mut s_dir = vec![0.0; n * n];
        for (basis, &di) in prob.bases.iter().zip(&direction) {
            if di != 0.0 {
                basis.accumulate(n, -di, &mut s_dir);
            }
        }

        let value = prob.barrier_value(z, &chol, mu);
        let slope = dot(&grad, &direction);
        let mut t = t_max;
        let mut accepted = false;
        while t >= 1e-18 {
            let s_trial: Vec<f64> =
                s.iter().zip(&s_dir).map(|(base, dir)| base + t * dir).collect();
            if let Ok(trial_chol) = Cholesky::factor_raw(n, &s_trial) {
                let z_trial: Vec<f64> =
                    z.iter().zip(&direction).map(|(a, d)| a + t * d).collect();
                let trial_value = prob.barrier_value(&z_trial, &trial_chol, mu);
                if trial_value <= value + 0.01 * t * slope {
                    debug_assert!(
                        trial_value <= value + 1e-9 * (1.0 + value.abs()),
                        "barrier objective must not increase at an accepted step"
                    );
                    *z = z_trial;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if ridge > 0.0 || t < t_max {
            debug!(
                "newton {iteration}: mu = {mu:.3e}, decrement^2 = {decrement_sq:.3e}, \
                 t = {t:.3e} of {t_max:.3e}, ridge = {ridge:.2e}"
            );
        }
        if !accepted {
            // A stalled line search with an already-small decrement means the
            // point is centered to working precision.
            if decrement_sq <= 1e-6 * (1.0 + value.abs()) {
                return Ok(Centered { iterations: iteration + 1, stopped_early: false, reached_tolerance: true });
            }
            return Err(SdpError::LineSearchFailed { mu, decrement: decrement_sq.sqrt() });
        }

        if let Some(stop) = early_stop {
            if stop(z) {
                return Ok(Centered { iterations: iteration + 1, stopped_early: true, reached_tolerance: false });
            }
        }
    }
    debug!("newton budget of {} exhausted at mu = {mu:.3e}", cfg.max_newton);
    Ok(Centered { iterations: cfg.max_newton, stopped_early: false, reached_tolerance: false })
}

/// Solves `H d = -g`, escalating a diagonal ridge if the Hessian loses
/// positive definiteness to roundoff.
fn solve_newton_system(
    m: usize,
    hess: &mut [f64],
    grad: &[f64],
    mu: f64,
) -> Result<(Vec<f64>, f64), SdpError> {
    let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
    let max_diag = (0..m).fold(0.0f64, |acc, i| acc.max(hess[i * m + i].abs())).max(1e-300);
    let mut ridge = 0.0f64;
    loop {
        if ridge > 0.0 {
            for i in 0..m {
                hess[i * m + i] += ridge;
            }
        }
        match Cholesky::factor_raw(m, hess) {
            Ok(chol) => return Ok((chol.solve(&rhs), ridge)),
            Err(_) => {
                ridge = if ridge == 0.0 { 1e-14 * max_diag } else { ridge * 100.0 };
                if ridge > 1e-4 * max_diag {
                    return Err(SdpError::NewtonSystemSingular { mu });
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
