//! User-facing orchestration: naive bounds, certified bounds in every
//! coupling mode, sub-network splitting, norm conversion, empirical lower
//! bounds, and robustness-radius certification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lmi::{self, CouplingMode, LmiError};
use crate::model::{self, FeedForwardNetwork, ModelError};
use crate::numerics::{spectral_norm, DenseMatrix, NumericsError};
use crate::sdp::{self, LipschitzCertificate, SdpError, SolveStats, SolverConfig};

/// Fixed seed for the deterministic power-iteration starts used by the
/// bound computations.
const SPECTRAL_SEED: u64 = 0x11b5;
/// Power iteration settings for all internal spectral norms.
const SPECTRAL_TOL: f64 = 1e-10;
const SPECTRAL_ITERS: usize = 10_000;
/// Sample budget for the always-on soundness probe of experimental
/// Network-mode certificates.
const NETWORK_PROBE_SAMPLES: usize = 10_000;
const NETWORK_PROBE_SEED: u64 = 0x50b3;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("norm order must be at least 1, got {0}")]
    InvalidNormOrder(f64),
    #[error("radius certification needs a strictly positive Lipschitz bound, got {0}")]
    NonPositiveL2(f64),
    #[error("radius certification needs at least 2 output classes, got {got}")]
    OutputDimension { got: usize },
    #[error("sample count must be at least 1")]
    SampleCount,
    #[error("worker count must be at least 1")]
    WorkerCount,
    #[error(
        "experimental Network-mode certificate failed the soundness probe: \
         empirical lower bound {empirical:.6e} exceeds certified bound {certified:.6e}"
    )]
    ExperimentalSoundness { empirical: f64, certified: f64 },
}

/// A norm order `p >= 1`, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormOrderRepr", into = "NormOrderRepr")]
pub enum NormOrder {
    Finite(f64),
    Infinity,
}

impl NormOrder {
    fn reciprocal(&self) -> f64 {
        match self {
            NormOrder::Finite(p) => 1.0 / p,
            NormOrder::Infinity => 0.0,
        }
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        match self {
            NormOrder::Finite(p) if *p >= 1.0 && p.is_finite() => Ok(()),
            NormOrder::Finite(p) => Err(AnalysisError::InvalidNormOrder(*p)),
            NormOrder::Infinity => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NormOrderRepr {
    Number(f64),
    Text(String),
}

impl From<NormOrder> for NormOrderRepr {
    fn from(value: NormOrder) -> Self {
        match value {
            NormOrder::Finite(p) => NormOrderRepr::Number(p),
            NormOrder::Infinity => NormOrderRepr::Text("inf".to_string()),
        }
    }
}

impl TryFrom<NormOrderRepr> for NormOrder {
    type Error = String;

    fn try_from(value: NormOrderRepr) -> Result<Self, Self::Error> {
        match value {
            NormOrderRepr::Number(p) => Ok(NormOrder::Finite(p)),
            NormOrderRepr::Text(s) if s.eq_ignore_ascii_case("inf") => Ok(NormOrder::Infinity),
            NormOrderRepr::Text(s) => Err(format!("unknown norm order {s:?}")),
        }
    }
}

/// Output/input norm orders of a reported bound plus the conversion factor
/// already applied to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    /// Output-space norm order.
    pub p: NormOrder,
    /// Input-space norm order.
    pub q: NormOrder,
    pub factor: f64,
}

impl NormProfile {
    pub fn l2() -> Self {
        Self { p: NormOrder::Finite(2.0), q: NormOrder::Finite(2.0), factor: 1.0 }
    }
}

/// Everything one bound run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub naive_lower: f64,
    pub naive_upper: f64,
    /// The headline certified bound: the certificate's `l2`, or the product
    /// of per-sub-network bounds for split runs.
    pub certified_l2: Option<f64>,
    pub lipsdp: Option<LipschitzCertificate>,
    pub mode: CouplingMode,
    pub split_chunk: Option<usize>,
    pub per_subnet: Option<Vec<LipschitzCertificate>>,
    pub empirical_lower: Option<f64>,
    pub norm_profile: NormProfile,
}

/// Local robustness certificate around `x_star`: the predicted class cannot
/// change within l2 distance `epsilon`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusCertificate {
    pub x_star: Vec<f64>,
    pub predicted_class: usize,
    pub epsilon: f64,
    pub l2_used: f64,
    /// Smallest score gap `f_i*(x*) - f_j(x*)` over the other classes.
    pub score_gap: f64,
}

fn weight_norm(weight: &DenseMatrix) -> Result<f64, AnalysisError> {
    Ok(spectral_norm(weight, SPECTRAL_TOL, SPECTRAL_ITERS, SPECTRAL_SEED)?)
}

/// Naive bounds: `lower = |W^l ... W^0|_2`, `upper = prod_i |W^i|_2`.
pub fn naive_bounds(net: &FeedForwardNetwork) -> Result<(f64, f64), AnalysisError> {
    let mut upper = 1.0;
    for layer in net.layers() {
        upper *= weight_norm(&layer.weight)?;
    }
    let mut product = net.layers()[0].weight.clone();
    for layer in &net.layers()[1..] {
        product = layer.weight.matmul(&product);
    }
    let lower = weight_norm(&product)?;
    Ok((lower, upper))
}

/// Certified l2 Lipschitz bound for `net` under `mode`.
///
/// Networks with at least one activation layer go through the SDP; the
/// weights are first normalized so the naive upper bound is 1 (by scaling
/// the final layer, which maps certificates exactly), solved, un-scaled, and
/// verified against the original network. Pure affine networks get their
/// exact spectral norm.
pub fn lipschitz_bound(
    net: &FeedForwardNetwork,
    mode: &CouplingMode,
    cfg: &SolverConfig,
) -> Result<LipschitzCertificate, AnalysisError> {
    if net.ell() == 0 {
        let l2 = weight_norm(&net.layers()[0].weight)?;
        return Ok(LipschitzCertificate {
            rho: l2 * l2,
            l2,
            mode: mode.clone(),
            lambdas: Vec::new(),
            verified_margin: 0.0,
            stats: SolveStats::default(),
            experimental: mode.is_experimental(),
        });
    }

    let (_, upper) = naive_bounds(net)?;
    // Normalize the first and final weights so the solved problem has naive
    // upper bound 1 and a unit-norm input layer. Both scalings map
    // certificates exactly: scaling the final weight by c sends (rho, T) to
    // (c^2 rho, c^2 T); scaling the first weight by c is a congruence of M
    // that sends rho to c^2 rho with T unchanged.
    let usable = |v: f64| v > 0.0 && (1.0 / v).is_finite();
    let input_norm = weight_norm(&net.layers()[0].weight)?;
    let c0 = if usable(input_norm) && usable(upper) { input_norm } else { 1.0 };
    let total = if usable(upper) { upper } else { 1.0 };
    let scaled_net =
        net.with_scaled_first_layer(1.0 / c0).with_scaled_final_layer(c0 / total);
    let prog = lmi::build_program(&scaled_net, mode)?;
    let solution = sdp::solve(&prog, cfg)?;

    // Verification and any feasibility restoration happen in the scaled
    // coordinates, where the matrix is well conditioned and the margin is
    // meaningful; the congruence maps the result back exactly.
    let anchor = solution.anchor.clone();
    let scaled_cert = sdp::verify_and_restore(
        &scaled_net,
        mode,
        solution.rho,
        &solution.lambdas,
        &anchor,
        solution.stats,
        cfg,
    )?;

    let rho_unscale = total * total;
    let lambda_unscale = (total / c0) * (total / c0);
    let rho = scaled_cert.rho * rho_unscale;
    let lambdas: Vec<f64> = scaled_cert.lambdas.iter().map(|l| l * lambda_unscale).collect();

    // Independent re-check against the original network's matrix. The exact
    // congruence guarantees nonpositivity; if eigensolver noise still lands
    // above zero, restore directly in the original coordinates.
    let spec = lmi::multiplier_spec(net, mode, lambdas.clone())?;
    let t = lmi::build_t(&spec, net.hidden_total())?;
    let m = lmi::assemble_m(net, &t, rho)?;
    let margin = crate::numerics::max_eigenvalue(&m)?;
    let cert = if margin <= 0.0 {
        LipschitzCertificate {
            rho,
            l2: rho.sqrt(),
            mode: mode.clone(),
            lambdas,
            verified_margin: margin,
            stats: scaled_cert.stats,
            experimental: mode.is_experimental(),
        }
    } else {
        let anchor_orig = sdp::FeasiblePoint {
            rho: anchor.rho * rho_unscale,
            lambdas: anchor.lambdas.iter().map(|l| l * lambda_unscale).collect(),
            tau: anchor.tau,
            outer_iters: anchor.outer_iters,
            newton_iters: anchor.newton_iters,
        };
        sdp::verify_and_restore(net, mode, rho, &lambdas, &anchor_orig, scaled_cert.stats, cfg)?
    };

    if cert.experimental {
        // Network-mode couplings have no per-constraint soundness guarantee,
        // so every such certificate is probed against a sampled lower bound.
        let probe = empirical_lower_bound(net, NETWORK_PROBE_SAMPLES, NETWORK_PROBE_SEED)?;
        if probe > cert.l2 * (1.0 + 1e-6) {
            return Err(AnalysisError::ExperimentalSoundness {
                empirical: probe,
                certified: cert.l2,
            });
        }
    }
    Ok(cert)
}

/// Request shape for a full bound run (CLI entry point).
#[derive(Debug, Clone)]
pub struct BoundRequest {
    pub mode: CouplingMode,
    pub split: Option<usize>,
    pub workers: usize,
    pub cfg: SolverConfig,
    pub empirical_samples: Option<usize>,
    pub seed: u64,
}

impl Default for BoundRequest {
    fn default() -> Self {
        Self {
            mode: CouplingMode::Neuron,
            split: None,
            workers: 1,
            cfg: SolverConfig::default(),
            empirical_samples: None,
            seed: 0,
        }
    }
}

/// Runs naive bounds, the certified bound (split or not), and optionally the
/// empirical lower bound, and assembles the report.
pub fn run_bound(net: &FeedForwardNetwork, req: &BoundRequest) -> Result<BoundReport, AnalysisError> {
    let mut report = match req.split {
        Some(chunk) => lipschitz_bound_split(net, chunk, &req.mode, &req.cfg, req.workers)?,
        None => {
            let (naive_lower, naive_upper) = naive_bounds(net)?;
            let cert = lipschitz_bound(net, &req.mode, &req.cfg)?;
            BoundReport {
                naive_lower,
                naive_upper,
                certified_l2: Some(cert.l2),
                lipsdp: Some(cert),
                mode: req.mode.clone(),
                split_chunk: None,
                per_subnet: None,
                empirical_lower: None,
                norm_profile: NormProfile::l2(),
            }
        }
    };
    if let Some(samples) = req.empirical_samples {
        report.empirical_lower = Some(empirical_lower_bound(net, samples, req.seed)?);
    }
    Ok(report)
}

/// Splits the network every `chunk` activation layers, certifies each piece
/// (concurrently when `workers > 1`), and multiplies the bounds. The result
/// is identical for any worker count.
pub fn lipschitz_bound_split(
    net: &FeedForwardNetwork,
    chunk: usize,
    mode: &CouplingMode,
    cfg: &SolverConfig,
    workers: usize,
) -> Result<BoundReport, AnalysisError> {
    if workers == 0 {
        return Err(AnalysisError::WorkerCount);
    }
    let (naive_lower, naive_upper) = naive_bounds(net)?;
    let parts = model::split_network(net, chunk)?;

    let certificates: Vec<LipschitzCertificate> = if parts.len() == 1 || workers == 1 {
        let mut certs = Vec::with_capacity(parts.len());
        for part in &parts {
            certs.push(lipschitz_bound(part, mode, cfg)?);
        }
        certs
    } else {
        solve_parts_concurrently(&parts, mode, cfg, workers)?
    };

    let product: f64 = certificates.iter().map(|c| c.l2).product();
    let (lipsdp, per_subnet) = if certificates.len() == 1 {
        (Some(certificates.into_iter().next().unwrap()), None)
    } else {
        (None, Some(certificates))
    };
    Ok(BoundReport {
        naive_lower,
        naive_upper,
        certified_l2: Some(product),
        lipsdp,
        mode: mode.clone(),
        split_chunk: Some(chunk),
        per_subnet,
        empirical_lower: None,
        norm_profile: NormProfile::l2(),
    })
}

fn solve_parts_concurrently(
    parts: &[FeedForwardNetwork],
    mode: &CouplingMode,
    cfg: &SolverConfig,
    workers: usize,
) -> Result<Vec<LipschitzCertificate>, AnalysisError> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<LipschitzCertificate, AnalysisError>>>> =
        Mutex::new((0..parts.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers.min(parts.len()) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= parts.len() {
                    break;
                }
                let result = lipschitz_bound(&parts[index], mode, cfg);
                slots.lock().unwrap()[index] = Some(result);
            });
        }
    });

    // Results are merged in sub-network order, so the report does not depend
    // on scheduling.
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every sub-network solve must have run"))
        .collect()
}

/// Converts an l2-to-l2 Lipschitz bound into an `lq`-input / `lp`-output
/// bound via the dimension-correct norm inequalities
/// `|v|_p <= m^{max(0, 1/p - 1/2)} |v|_2` and
/// `|x|_2 <= n^{max(0, 1/2 - 1/q)} |x|_q`.
pub fn convert_norm(
    l2: f64,
    p: NormOrder,
    q: NormOrder,
    in_dim: usize,
    out_dim: usize,
) -> Result<f64, AnalysisError> {
    p.validate()?;
    q.validate()?;
    let out_exp = (p.reciprocal() - 0.5).max(0.0);
    let in_exp = (0.5 - q.reciprocal()).max(0.0);
    let factor = (out_dim as f64).powf(out_exp) * (in_dim as f64).powf(in_exp);
    Ok(factor * l2)
}

/// The conversion factor alone, as applied by [`convert_norm`].
pub fn norm_conversion_factor(
    p: NormOrder,
    q: NormOrder,
    in_dim: usize,
    out_dim: usize,
) -> Result<f64, AnalysisError> {
    convert_norm(1.0, p, q, in_dim, out_dim)
}

/// Certifies the l2 robustness radius of the classifier at `x_star` given a
/// verified Lipschitz bound: the argmax class cannot change within
/// `epsilon = gap / (sqrt(2) l2)`.
pub fn certify_radius(
    net: &FeedForwardNetwork,
    l2: f64,
    x_star: &[f64],
) -> Result<RadiusCertificate, AnalysisError> {
    if l2 <= 0.0 || l2.is_nan() {
        return Err(AnalysisError::NonPositiveL2(l2));
    }
    let scores = model::forward(net, x_star)?;
    if scores.len() < 2 {
        return Err(AnalysisError::OutputDimension { got: scores.len() });
    }
    // Ties resolve to the smallest index and certify radius zero.
    let mut predicted = 0usize;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[predicted] {
            predicted = j;
        }
    }
    let mut gap = f64::INFINITY;
    for (j, &s) in scores.iter().enumerate() {
        if j != predicted {
            gap = gap.min(scores[predicted] - s);
        }
    }
    let epsilon = gap / (std::f64::consts::SQRT_2 * l2);
    Ok(RadiusCertificate {
        x_star: x_star.to_vec(),
        predicted_class: predicted,
        epsilon,
        l2_used: l2,
        score_gap: gap,
    })
}

/// Sampled lower bound on the Lipschitz constant: the best difference
/// quotient over standard-normal input pairs, and, for piecewise-linear
/// activations (or affine networks), the best spectral norm over sampled
/// activation-pattern Jacobians. Deterministic for a fixed seed, and always
/// a valid lower bound.
pub fn empirical_lower_bound(
    net: &FeedForwardNetwork,
    samples: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if samples == 0 {
        return Err(AnalysisError::SampleCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = net.input_dim();
    let mut best = 0.0f64;

    for _ in 0..samples {
        let x: Vec<f64> = (0..n0).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..n0).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dist: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist <= 1e-12 {
            continue;
        }
        let fx = model::forward(net, &x)?;
        let fy = model::forward(net, &y)?;
        let spread: f64 = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        best = best.max(spread / dist);
    }

    if net.ell() == 0 || net.activation().kind.is_piecewise_linear() {
        // The maximum over sampled activation-pattern Jacobians has a heavy
        // tail on relu-family networks; a thin sub-budget here makes the
        // bound too seed-dependent to compare across runs.
        let jacobian_samples = if net.ell() == 0 { 1 } else { samples.min(2_000) };
        for _ in 0..jacobian_samples {
            let x: Vec<f64> = (0..n0).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let jac = pattern_jacobian(net, &x)?;
            best = best.max(weight_norm(&jac)?);
        }
    }
    Ok(best)
}

/// The network's Jacobian on the activation pattern at `x` (piecewise-linear
/// activations; exact for affine networks).
fn pattern_jacobian(
    net: &FeedForwardNetwork,
    x: &[f64],
) -> Result<DenseMatrix, AnalysisError> {
    let ell = net.ell();
    let kind = net.activation().kind;
    let mut signal = x.to_vec();
    let mut jacobian = net.layers()[0].weight.clone();
    for k in 0..ell {
        let layer = &net.layers()[k];
        let mut pre = layer.weight.matvec(&signal);
        for (p, b) in pre.iter_mut().zip(&layer.bias) {
            *p += b;
        }
        // Row-scale by the active piece slopes, then push through the next
        // weight.
        let mut scaled = jacobian;
        for (r, &p) in pre.iter().enumerate() {
            let slope = kind.piece_slope(p);
            for c in 0..scaled.cols() {
                let v = scaled.get(r, c) * slope;
                scaled.set(r, c, v);
            }
        }
        jacobian = net.layers()[k + 1].weight.matmul(&scaled);
        signal = pre.iter().map(|&p| kind.apply(p)).collect();
    }
    Ok(jacobian)
}
