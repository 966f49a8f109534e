//! Assembly of the certificate matrix `M(rho, T)` and its decomposition into
//! a standard-form linear matrix inequality program.
//!
//! The multiplier matrix `T` combines per-neuron coefficients
//! `lambda_ii e_i e_i^T` and pairwise coupling terms
//! `lambda_ij (e_i - e_j)(e_i - e_j)^T` with `lambda >= 0`. Three coupling
//! modes trade accuracy against the number of decision variables: one
//! multiplier per hidden layer, one per hidden neuron, or neuron multipliers
//! plus pairwise couplings.
//!
//! With `A` stacking the weights acting on the concatenated signal vector and
//! `B` selecting the activation outputs, the certificate matrix is
//!
//! ```text
//! M(rho, T) = [A; B]^T [ -2 a b T   (a+b) T ] [A; B]  +  diag(-rho I, 0, ..., Wl^T Wl)
//!                      [ (a+b) T    -2 T    ]
//! ```
//!
//! where `(a, b)` are the activation's sector bounds and `Wl` is the final
//! weight. `M \preceq 0` certifies `sqrt(rho)` as an l2 Lipschitz bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FeedForwardNetwork;
use crate::numerics::{DenseMatrix, SymMatrix};

/// Default cap on the number of pairwise couplings expanded in Network mode.
pub const DEFAULT_PAIR_CAP: usize = 20_000;

#[derive(Debug, Error)]
pub enum LmiError {
    #[error("network has no hidden activation layer; the LMI requires ell >= 1")]
    AffineNetwork,
    #[error("lambda {index} is negative: {value}")]
    NegativeLambda { index: usize, value: f64 },
    #[error("expected {expected} lambdas, got {got}")]
    LambdaCount { expected: usize, got: usize },
    #[error("invalid neuron pair ({i}, {j}) for {n} hidden neurons (need i < j < n, no duplicates)")]
    InvalidPair { i: usize, j: usize, n: usize },
    #[error("Network mode would expand {required} pairs, above the cap of {cap}")]
    PairCapExceeded { required: usize, cap: usize },
    #[error("multiplier matrix has dimension {got}, expected {expected}")]
    TDimension { expected: usize, got: usize },
}

/// Multiplier coupling structure. `Network` with `pairs: None` couples all
/// `n (n - 1) / 2` hidden neuron pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CouplingMode {
    Layer,
    Neuron,
    Network { pairs: Option<Vec<(usize, usize)>> },
}

impl CouplingMode {
    pub fn network_all_pairs() -> Self {
        CouplingMode::Network { pairs: None }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CouplingMode::Layer => "layer",
            CouplingMode::Neuron => "neuron",
            CouplingMode::Network { .. } => "network",
        }
    }

    pub fn is_experimental(&self) -> bool {
        matches!(self, CouplingMode::Network { .. })
    }
}

/// What a single multiplier variable contributes to `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaTarget {
    /// `lambda e_i e_i^T` on global hidden neuron `i`.
    Neuron(usize),
    /// `lambda (e_i - e_j)(e_i - e_j)^T` coupling neurons `i < j`.
    Pair(usize, usize),
    /// `lambda I` on the hidden block `[start, start + len)` of layer `index`.
    Layer { index: usize, start: usize, len: usize },
}

/// A coupling mode instantiated with concrete multiplier values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSpec {
    pub mode: CouplingMode,
    pub lambdas: Vec<f64>,
    pub targets: Vec<LambdaTarget>,
}

/// The multiplier targets for `net` under `mode`, in the canonical order:
/// layer blocks by depth, neurons by global index, then pairs
/// lexicographically. Program columns and certificate lambdas share this
/// ordering.
pub fn lambda_targets(
    net: &FeedForwardNetwork,
    mode: &CouplingMode,
    pair_cap: usize,
) -> Result<Vec<LambdaTarget>, LmiError> {
    if net.ell() == 0 {
        return Err(LmiError::AffineNetwork);
    }
    let n = net.hidden_total();
    let mut targets = Vec::new();
    match mode {
        CouplingMode::Layer => {
            let mut start = 0usize;
            for (index, &len) in net.dims()[1..net.dims().len() - 1].iter().enumerate() {
                targets.push(LambdaTarget::Layer { index, start, len });
                start += len;
            }
        }
        CouplingMode::Neuron => {
            targets.extend((0..n).map(LambdaTarget::Neuron));
        }
        CouplingMode::Network { pairs } => {
            targets.extend((0..n).map(LambdaTarget::Neuron));
            match pairs {
                Some(list) => {
                    let mut seen = std::collections::BTreeSet::new();
                    for &(i, j) in list {
                        if i >= j || j >= n || !seen.insert((i, j)) {
                            return Err(LmiError::InvalidPair { i, j, n });
                        }
                    }
                    targets.extend(seen.into_iter().map(|(i, j)| LambdaTarget::Pair(i, j)));
                }
                None => {
                    let required = n * (n - 1) / 2;
                    if required > pair_cap {
                        return Err(LmiError::PairCapExceeded { required, cap: pair_cap });
                    }
                    for i in 0..n {
                        for j in (i + 1)..n {
                            targets.push(LambdaTarget::Pair(i, j));
                        }
                    }
                }
            }
        }
    }
    Ok(targets)
}

/// Builds a `MultiplierSpec` pairing `lambdas` with the canonical targets.
pub fn multiplier_spec(
    net: &FeedForwardNetwork,
    mode: &CouplingMode,
    lambdas: Vec<f64>,
) -> Result<MultiplierSpec, LmiError> {
    let targets = lambda_targets(net, mode, usize::MAX)?;
    if lambdas.len() != targets.len() {
        return Err(LmiError::LambdaCount { expected: targets.len(), got: lambdas.len() });
    }
    Ok(MultiplierSpec { mode: mode.clone(), lambdas, targets })
}

/// The structural blocks of the stacked-signal representation: for the
/// signal vector `x = (x^0, ..., x^ell)` of length `N = n_0 + n`,
/// `B x = phi(A x + bias)` holds along any forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureBlocks {
    /// `n x N`; block row `k` carries `W^k` in column block `k`.
    pub a: DenseMatrix,
    /// `n x N`; equals `[0 | I_n]`.
    pub b: DenseMatrix,
}

/// Assembles the blocks `A` and `B` for a network with at least one hidden
/// layer.
pub fn build_structure(net: &FeedForwardNetwork) -> Result<StructureBlocks, LmiError> {
    let ell = net.ell();
    if ell == 0 {
        return Err(LmiError::AffineNetwork);
    }
    let n = net.hidden_total();
    let n0 = net.input_dim();
    let total = n0 + n;

    let mut a = DenseMatrix::zeros(n, total);
    let mut row_offset = 0usize;
    let mut col_offset = 0usize;
    for layer in &net.layers()[..ell] {
        let w = &layer.weight;
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                a.set(row_offset + r, col_offset + c, w.get(r, c));
            }
        }
        col_offset += w.cols();
        row_offset += w.rows();
    }

    let mut b = DenseMatrix::zeros(n, total);
    for i in 0..n {
        b.set(i, n0 + i, 1.0);
    }
    Ok(StructureBlocks { a, b })
}

/// Expands a multiplier spec into the dense symmetric matrix `T`.
pub fn build_t(spec: &MultiplierSpec, hidden_total: usize) -> Result<SymMatrix, LmiError> {
    if spec.lambdas.len() != spec.targets.len() {
        return Err(LmiError::LambdaCount { expected: spec.targets.len(), got: spec.lambdas.len() });
    }
    let n = hidden_total;
    let mut t = SymMatrix::zeros(n);
    for (index, (&lambda, target)) in spec.lambdas.iter().zip(&spec.targets).enumerate() {
        if lambda < 0.0 {
            return Err(LmiError::NegativeLambda { index, value: lambda });
        }
        match *target {
            LambdaTarget::Neuron(i) => {
                if i >= n {
                    return Err(LmiError::InvalidPair { i, j: i, n });
                }
                t.add_at(i, i, lambda);
            }
            LambdaTarget::Pair(i, j) => {
                if i >= j || j >= n {
                    return Err(LmiError::InvalidPair { i, j, n });
                }
                t.add_at(i, i, lambda);
                t.add_at(j, j, lambda);
                t.add_at(i, j, -lambda);
            }
            LambdaTarget::Layer { start, len, .. } => {
                if start + len > n {
                    return Err(LmiError::TDimension { expected: n, got: start + len });
                }
                for d in start..start + len {
                    t.add_at(d, d, lambda);
                }
            }
        }
    }
    Ok(t)
}

/// Assembles the certificate matrix `M(rho, T)`. The result is independent
/// of all biases and is exactly symmetric.
pub fn assemble_m(
    net: &FeedForwardNetwork,
    t: &SymMatrix,
    rho: f64,
) -> Result<SymMatrix, LmiError> {
    let blocks = build_structure(net)?;
    let n = net.hidden_total();
    if t.dim() != n {
        return Err(LmiError::TDimension { expected: n, got: t.dim() });
    }
    let n0 = net.input_dim();
    let total = n0 + n;
    let sector = net.sector();
    let (alpha, beta) = (sector.alpha, sector.beta);

    // With B = [0 | I], the quadratic form reduces to
    //   -2ab A^T T A + (a+b) (embed(TA) + embed(TA)^T) - 2 embed(T)
    // where embed places rows/columns at the hidden offset n0.
    let ta = t.to_dense().matmul(&blocks.a);
    let mut m = vec![0.0f64; total * total];

    let minus_two_ab = -2.0 * alpha * beta;
    if minus_two_ab != 0.0 {
        // A^T (T A), accumulated row by row of A.
        for i in 0..n {
            let a_row = blocks.a.row(i);
            let ta_row = ta.row(i);
            for (r, &ar) in a_row.iter().enumerate() {
                if ar == 0.0 {
                    continue;
                }
                let coeff = minus_two_ab * ar;
                let dst = &mut m[r * total..(r + 1) * total];
                for (d, &v) in dst.iter_mut().zip(ta_row) {
                    *d += coeff * v;
                }
            }
        }
    }

    let a_plus_b = alpha + beta;
    for i in 0..n {
        let ta_row = ta.row(i);
        let hidden = n0 + i;
        // embed(TA): row `hidden` gains (a+b) * ta_row; the transpose half
        // goes in column `hidden`.
        let dst = &mut m[hidden * total..(hidden + 1) * total];
        for (d, &v) in dst.iter_mut().zip(ta_row) {
            *d += a_plus_b * v;
        }
        for r in 0..total {
            let v = a_plus_b * ta_row[r];
            if v != 0.0 {
                m[r * total + hidden] += v;
            }
        }
    }
    // -2 embed(T).
    for i in 0..n {
        for j in 0..n {
            let v = t.get(i, j);
            if v != 0.0 {
                m[(n0 + i) * total + (n0 + j)] += -2.0 * v;
            }
        }
    }

    // Corner blocks: -rho I on the input block, Wl^T Wl on the last hidden
    // block.
    for r in 0..n0 {
        m[r * total + r] -= rho;
    }
    let last = &net.layers()[net.ell()].weight;
    let offset = total - last.cols();
    for r in 0..last.cols() {
        for c in 0..last.cols() {
            let mut v = 0.0;
            for k in 0..last.rows() {
                v += last.get(k, r) * last.get(k, c);
            }
            m[(offset + r) * total + (offset + c)] += v;
        }
    }

    Ok(SymMatrix::symmetrized(total, m))
}

/// A standard-form LMI program: minimize `cost . z` subject to
/// `G(z) = F_const + rho F_rho + sum_i lambda_i F_lambda[i] \preceq 0` and
/// `lambda >= 0`, with `z = (rho, lambda)`.
#[derive(Debug, Clone)]
pub struct LmiProgram {
    dim: usize,
    n_input: usize,
    cost: Vec<f64>,
    f_const: SymMatrix,
    f_rho: SymMatrix,
    f_lambda: Vec<SymMatrix>,
    nonneg: Vec<bool>,
    targets: Vec<LambdaTarget>,
    mode: CouplingMode,
    factors: Option<Vec<BasisFactor>>,
}

/// Low-rank factorization `U C U^T` of a lambda basis matrix, kept alongside
/// the dense form as a solver speedup.
#[derive(Debug, Clone)]
pub(crate) struct BasisFactor {
    /// `dim x k`, row-major.
    pub u: DenseMatrix,
    /// `k x k` symmetric, row-major.
    pub core: Vec<f64>,
}

impl LmiProgram {
    /// Matrix side `N = n_0 + n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Input dimension `n_0` (the size of the `-rho I` block).
    pub fn n_input(&self) -> usize {
        self.n_input
    }

    /// Number of decision variables, `1 + #lambda`.
    pub fn var_count(&self) -> usize {
        1 + self.f_lambda.len()
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn f_const(&self) -> &SymMatrix {
        &self.f_const
    }

    pub fn f_rho(&self) -> &SymMatrix {
        &self.f_rho
    }

    pub fn f_lambda(&self) -> &[SymMatrix] {
        &self.f_lambda
    }

    /// Mask over `(rho, lambda...)` marking the nonnegative variables.
    pub fn nonneg(&self) -> &[bool] {
        &self.nonneg
    }

    pub fn targets(&self) -> &[LambdaTarget] {
        &self.targets
    }

    pub fn mode(&self) -> &CouplingMode {
        &self.mode
    }

    pub(crate) fn factors(&self) -> Option<&[BasisFactor]> {
        self.factors.as_deref()
    }

    /// Evaluates `G(rho, lambda)`.
    pub fn evaluate_g(&self, rho: f64, lambdas: &[f64]) -> Result<SymMatrix, LmiError> {
        if lambdas.len() != self.f_lambda.len() {
            return Err(LmiError::LambdaCount { expected: self.f_lambda.len(), got: lambdas.len() });
        }
        let mut g = self.f_const.add_scaled(&self.f_rho, rho);
        for (basis, &lambda) in self.f_lambda.iter().zip(lambdas) {
            g = g.add_scaled(basis, lambda);
        }
        Ok(g)
    }

    /// Builds a program from explicit parts; basis factorizations are left
    /// empty, so the solver falls back to dense handling.
    pub fn from_parts(
        n_input: usize,
        f_const: SymMatrix,
        f_rho: SymMatrix,
        f_lambda: Vec<SymMatrix>,
        mode: CouplingMode,
        targets: Vec<LambdaTarget>,
    ) -> Self {
        let dim = f_const.dim();
        let vars = 1 + f_lambda.len();
        let mut cost = vec![0.0; vars];
        cost[0] = 1.0;
        let mut nonneg = vec![true; vars];
        nonneg[0] = false;
        Self { dim, n_input, cost, f_const, f_rho, f_lambda, nonneg, targets, mode, factors: None }
    }
}

/// Builds the LMI program for `net` under `mode` with the default pair cap.
pub fn build_program(net: &FeedForwardNetwork, mode: &CouplingMode) -> Result<LmiProgram, LmiError> {
    build_program_capped(net, mode, DEFAULT_PAIR_CAP)
}

/// Builds the LMI program with an explicit cap on Network-mode pair
/// expansion.
pub fn build_program_capped(
    net: &FeedForwardNetwork,
    mode: &CouplingMode,
    pair_cap: usize,
) -> Result<LmiProgram, LmiError> {
    let targets = lambda_targets(net, mode, pair_cap)?;
    let blocks = build_structure(net)?;
    let n0 = net.input_dim();
    let total = n0 + net.hidden_total();
    let sector = net.sector();
    let (alpha, beta) = (sector.alpha, sector.beta);
    // The 2x2 sector core shared by every rank-two basis.
    let core = [-2.0 * alpha * beta, alpha + beta, alpha + beta, -2.0];

    // F_const: Wl^T Wl in the bottom-right corner.
    let mut f_const = vec![0.0; total * total];
    let last = &net.layers()[net.ell()].weight;
    let offset = total - last.cols();
    for r in 0..last.cols() {
        for c in 0..last.cols() {
            let mut v = 0.0;
            for k in 0..last.rows() {
                v += last.get(k, r) * last.get(k, c);
            }
            f_const[(offset + r) * total + (offset + c)] = v;
        }
    }
    let f_const = SymMatrix::symmetrized(total, f_const);

    // F_rho = -diag(I_{n0}, 0).
    let mut rho_diag = vec![0.0; total];
    for d in rho_diag.iter_mut().take(n0) {
        *d = -1.0;
    }
    let f_rho = SymMatrix::diagonal(&rho_diag);

    // Per-target bases. A neuron target i contributes the rank-two matrix
    // [a_i b_i] core [a_i b_i]^T with a_i = row i of A and b_i = e_{n0+i};
    // a pair target uses the row differences. Layer targets stack the
    // rank-two pieces of their neurons.
    let mut f_lambda = Vec::with_capacity(targets.len());
    let mut factors = Vec::with_capacity(targets.len());
    for target in &targets {
        let (basis, factor) = match *target {
            LambdaTarget::Neuron(i) => {
                let u = two_column_matrix(total, blocks.a.row(i), n0 + i, None);
                let basis = rank_factor_to_dense(total, &u, 2, &core);
                (basis, BasisFactor { u, core: core.to_vec() })
            }
            LambdaTarget::Pair(i, j) => {
                let mut diff = blocks.a.row(i).to_vec();
                for (d, &v) in diff.iter_mut().zip(blocks.a.row(j)) {
                    *d -= v;
                }
                let u = two_column_matrix(total, &diff, n0 + i, Some(n0 + j));
                let basis = rank_factor_to_dense(total, &u, 2, &core);
                (basis, BasisFactor { u, core: core.to_vec() })
            }
            LambdaTarget::Layer { start, len, .. } => {
                // Stack [a_i b_i] pairs for every neuron of the layer; the
                // core is block-diagonal with the 2x2 sector core repeated.
                let k = 2 * len;
                let mut u = DenseMatrix::zeros(total, k);
                let mut big_core = vec![0.0; k * k];
                for (slot, i) in (start..start + len).enumerate() {
                    for (r, &v) in blocks.a.row(i).iter().enumerate() {
                        if v != 0.0 {
                            u.set(r, 2 * slot, v);
                        }
                    }
                    u.set(n0 + i, 2 * slot + 1, 1.0);
                    big_core[(2 * slot) * k + 2 * slot] = core[0];
                    big_core[(2 * slot) * k + 2 * slot + 1] = core[1];
                    big_core[(2 * slot + 1) * k + 2 * slot] = core[2];
                    big_core[(2 * slot + 1) * k + 2 * slot + 1] = core[3];
                }
                let basis = rank_factor_to_dense(total, &u, k, &big_core);
                (basis, BasisFactor { u, core: big_core })
            }
        };
        f_lambda.push(basis);
        factors.push(factor);
    }

    let vars = 1 + f_lambda.len();
    let mut cost = vec![0.0; vars];
    cost[0] = 1.0;
    let mut nonneg = vec![true; vars];
    nonneg[0] = false;

    Ok(LmiProgram {
        dim: total,
        n_input: n0,
        cost,
        f_const,
        f_rho,
        f_lambda,
        nonneg,
        targets,
        mode: mode.clone(),
        factors: Some(factors),
    })
}

/// `dim x 2` matrix with `first` as column 0 and a +/-1 indicator in column 1.
fn two_column_matrix(dim: usize, first: &[f64], plus: usize, minus: Option<usize>) -> DenseMatrix {
    let mut u = DenseMatrix::zeros(dim, 2);
    for (r, &v) in first.iter().enumerate() {
        if v != 0.0 {
            u.set(r, 0, v);
        }
    }
    u.set(plus, 1, 1.0);
    if let Some(m) = minus {
        u.set(m, 1, -1.0);
    }
    u
}

/// Dense `U C U^T` for a `dim x k` factor with symmetric `k x k` core.
fn rank_factor_to_dense(dim: usize, u: &DenseMatrix, k: usize, core: &[f64]) -> SymMatrix {
    // W = U C, then U C U^T = W U^T.
    let mut w = vec![0.0; dim * k];
    for r in 0..dim {
        let u_row = u.row(r);
        let dst = &mut w[r * k..(r + 1) * k];
        for (s, &uv) in u_row.iter().enumerate() {
            if uv == 0.0 {
                continue;
            }
            let core_row = &core[s * k..(s + 1) * k];
            for (d, &cv) in dst.iter_mut().zip(core_row) {
                *d += uv * cv;
            }
        }
    }
    let mut entries = vec![0.0; dim * dim];
    for r in 0..dim {
        let w_row = &w[r * k..(r + 1) * k];
        if w_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let dst = &mut entries[r * dim..(r + 1) * dim];
        for (c, d) in dst.iter_mut().enumerate() {
            let u_row = u.row(c);
            let mut v = 0.0;
            for (a, b) in w_row.iter().zip(u_row) {
                v += a * b;
            }
            *d = v;
        }
    }
    SymMatrix::symmetrized(dim, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        forward_trace, random_network, Activation, ActivationKind, FeedForwardNetwork, Layer,
    };
    use crate::numerics::max_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn relu() -> Activation {
        Activation::new(ActivationKind::Relu)
    }

    fn scalar_net(a: f64, b: f64) -> FeedForwardNetwork {
        FeedForwardNetwork::new(
            vec![
                Layer { weight: DenseMatrix::new(1, 1, vec![a]).unwrap(), bias: vec![0.0] },
                Layer { weight: DenseMatrix::new(1, 1, vec![b]).unwrap(), bias: vec![0.0] },
            ],
            relu(),
        )
        .unwrap()
    }

    /// Single-hidden-layer certificate matrix assembled directly from its
    /// closed 2x2 block form; an independent route used to cross-check
    /// `assemble_m`.
    fn single_layer_m(net: &FeedForwardNetwork, t: &SymMatrix, rho: f64) -> SymMatrix {
        assert_eq!(net.ell(), 1);
        let w0 = &net.layers()[0].weight;
        let w1 = &net.layers()[1].weight;
        let (alpha, beta) = (net.sector().alpha, net.sector().beta);
        let n0 = w0.cols();
        let n = w0.rows();
        let total = n0 + n;
        let t_dense = t.to_dense();
        let tw0 = t_dense.matmul(w0);
        let w0t_t_w0 = w0.transpose().matmul(&tw0);
        let w1t_w1 = w1.transpose().matmul(w1);
        let mut m = DenseMatrix::zeros(total, total);
        for r in 0..n0 {
            for c in 0..n0 {
                let mut v = -2.0 * alpha * beta * w0t_t_w0.get(r, c);
                if r == c {
                    v -= rho;
                }
                m.set(r, c, v);
            }
        }
        for r in 0..n0 {
            for c in 0..n {
                // (a+b) W0^T T fills the upper-right block.
                let v = (alpha + beta) * tw0.get(c, r);
                m.set(r, n0 + c, v);
                m.set(n0 + c, r, v);
            }
        }
        for r in 0..n {
            for c in 0..n {
                m.set(n0 + r, n0 + c, -2.0 * t_dense.get(r, c) + w1t_w1.get(r, c));
            }
        }
        SymMatrix::from_dense(&m).unwrap()
    }

    #[test]
    fn structure_blocks_single_layer() {
        let net = random_network(&[3, 2, 1], relu(), None, 3).unwrap();
        let blocks = build_structure(&net).unwrap();
        assert_eq!((blocks.a.rows(), blocks.a.cols()), (2, 5));
        let w0 = &net.layers()[0].weight;
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(blocks.a.get(r, c), w0.get(r, c));
            }
            assert_eq!(blocks.a.get(r, 3), 0.0);
            assert_eq!(blocks.a.get(r, 4), 0.0);
        }
        for r in 0..2 {
            for c in 0..5 {
                let expected = if c == 3 + r { 1.0 } else { 0.0 };
                assert_eq!(blocks.b.get(r, c), expected);
            }
        }
    }

    #[test]
    fn structure_blocks_two_layers_shape() {
        let net = random_network(&[4, 2, 3, 1], relu(), None, 4).unwrap();
        let blocks = build_structure(&net).unwrap();
        assert_eq!((blocks.a.rows(), blocks.a.cols()), (5, 9));
        // W1 occupies block row 1 (rows 2..5) at column block 1 (cols 4..6).
        let w1 = &net.layers()[1].weight;
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(blocks.a.get(2 + r, 4 + c), w1.get(r, c));
            }
        }
        // Last column block of A is zero.
        for r in 0..5 {
            for c in 6..9 {
                assert_eq!(blocks.a.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn stacked_signal_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [ActivationKind::Relu, ActivationKind::Tanh] {
            let net = random_network(&[3, 4, 2, 2], Activation::new(kind), None, 9).unwrap();
            let blocks = build_structure(&net).unwrap();
            let bias: Vec<f64> = net.layers()[..net.ell()]
                .iter()
                .flat_map(|l| l.bias.iter().copied())
                .collect();
            for _ in 0..10 {
                let x: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let (stack, _) = forward_trace(&net, &x).unwrap();
                let stacked: Vec<f64> = stack.concat();
                let lhs = blocks.b.matvec(&stacked);
                let mut rhs = blocks.a.matvec(&stacked);
                for (r, b) in rhs.iter_mut().zip(&bias) {
                    *r = kind.apply(*r + b);
                }
                for (l, r) in lhs.iter().zip(&rhs) {
                    assert!((l - r).abs() <= 1e-12, "{l} vs {r}");
                }
            }
        }
    }

    #[test]
    fn build_t_expansions() {
        // lambda_11 = 1, lambda_22 = 0, lambda_12 = 1 on two neurons.
        let spec = MultiplierSpec {
            mode: CouplingMode::network_all_pairs(),
            lambdas: vec![1.0, 0.0, 1.0],
            targets: vec![
                LambdaTarget::Neuron(0),
                LambdaTarget::Neuron(1),
                LambdaTarget::Pair(0, 1),
            ],
        };
        let t = build_t(&spec, 2).unwrap();
        assert_eq!(t.entries(), &[2.0, -1.0, -1.0, 1.0]);

        // Layer mode on widths (2, 1) with lambdas (3, 5).
        let spec = MultiplierSpec {
            mode: CouplingMode::Layer,
            lambdas: vec![3.0, 5.0],
            targets: vec![
                LambdaTarget::Layer { index: 0, start: 0, len: 2 },
                LambdaTarget::Layer { index: 1, start: 2, len: 1 },
            ],
        };
        let t = build_t(&spec, 3).unwrap();
        assert_eq!(t.entries(), SymMatrix::diagonal(&[3.0, 3.0, 5.0]).entries());

        let spec = MultiplierSpec {
            mode: CouplingMode::Neuron,
            lambdas: vec![2.0],
            targets: vec![LambdaTarget::Neuron(0)],
        };
        let t = build_t(&spec, 1).unwrap();
        assert_eq!(t.entries(), &[2.0]);
    }

    #[test]
    fn build_t_rejects_negative_lambda() {
        let spec = MultiplierSpec {
            mode: CouplingMode::Neuron,
            lambdas: vec![-0.5],
            targets: vec![LambdaTarget::Neuron(0)],
        };
        assert!(matches!(build_t(&spec, 1), Err(LmiError::NegativeLambda { index: 0, .. })));
    }

    #[test]
    fn build_t_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let net = random_network(&[2, 3, 3, 1], relu(), None, 5).unwrap();
        for mode in [CouplingMode::Layer, CouplingMode::Neuron, CouplingMode::network_all_pairs()] {
            let targets = lambda_targets(&net, &mode, usize::MAX).unwrap();
            let lambdas: Vec<f64> = (0..targets.len()).map(|_| rng.random::<f64>()).collect();
            let spec = MultiplierSpec { mode, lambdas, targets };
            let t = build_t(&spec, net.hidden_total()).unwrap();
            let neg_t = t.scaled(-1.0);
            assert!(max_eigenvalue(&neg_t).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn mode_nesting_reconstruction() {
        let net = random_network(&[2, 3, 2, 2], relu(), None, 6).unwrap();
        let n = net.hidden_total();
        // Layer lambdas expand to equal per-neuron lambdas.
        let layer_targets = lambda_targets(&net, &CouplingMode::Layer, usize::MAX).unwrap();
        let layer_lambdas = vec![0.7, 1.3];
        let t_layer = build_t(
            &MultiplierSpec {
                mode: CouplingMode::Layer,
                lambdas: layer_lambdas.clone(),
                targets: layer_targets.clone(),
            },
            n,
        )
        .unwrap();
        let mut neuron_lambdas = vec![0.0; n];
        for (target, &lambda) in layer_targets.iter().zip(&layer_lambdas) {
            if let LambdaTarget::Layer { start, len, .. } = *target {
                for v in neuron_lambdas[start..start + len].iter_mut() {
                    *v = lambda;
                }
            }
        }
        let t_neuron =
            build_t(&multiplier_spec(&net, &CouplingMode::Neuron, neuron_lambdas.clone()).unwrap(), n)
                .unwrap();
        assert_eq!(t_layer.entries(), t_neuron.entries());

        // Neuron lambdas embed into Network mode with zero pair couplings.
        let network_targets =
            lambda_targets(&net, &CouplingMode::network_all_pairs(), usize::MAX).unwrap();
        let mut network_lambdas = neuron_lambdas.clone();
        network_lambdas.resize(network_targets.len(), 0.0);
        let t_network = build_t(
            &MultiplierSpec {
                mode: CouplingMode::network_all_pairs(),
                lambdas: network_lambdas,
                targets: network_targets,
            },
            n,
        )
        .unwrap();
        assert_eq!(t_neuron.entries(), t_network.entries());
    }

    #[test]
    fn assemble_m_scalar_form() {
        let (a, b, t, rho) = (1.7, -0.6, 0.9, 2.3);
        let net = scalar_net(a, b);
        let t_mat = SymMatrix::diagonal(&[t]);
        let m = assemble_m(&net, &t_mat, rho).unwrap();
        let expected = [-rho, t * a, t * a, -2.0 * t + b * b];
        for (got, want) in m.entries().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn assemble_m_zero_t() {
        let net = random_network(&[2, 3, 2], relu(), None, 8).unwrap();
        let m = assemble_m(&net, &SymMatrix::zeros(3), 0.0).unwrap();
        // Only the Wl^T Wl corner survives.
        let w1 = &net.layers()[1].weight;
        let corner = w1.transpose().matmul(w1);
        for r in 0..5 {
            for c in 0..5 {
                let expected = if r >= 2 && c >= 2 { corner.get(r - 2, c - 2) } else { 0.0 };
                assert!((m.get(r, c) - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn assemble_m_matches_single_layer_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for seed in 0..8u64 {
            let net = random_network(&[3, 4, 2], relu(), None, 100 + seed).unwrap();
            let lambdas: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let spec = multiplier_spec(&net, &CouplingMode::Neuron, lambdas).unwrap();
            let t = build_t(&spec, 4).unwrap();
            let rho = rng.random::<f64>() * 3.0;
            let via_blocks = assemble_m(&net, &t, rho).unwrap();
            let direct = single_layer_m(&net, &t, rho);
            let scale = 1.0 + via_blocks.max_abs();
            for (a, b) in via_blocks.entries().iter().zip(direct.entries()) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn assemble_m_is_bias_invariant() {
        let net = random_network(&[2, 3, 2], relu(), None, 12).unwrap();
        let mut biased_layers = net.layers().to_vec();
        for layer in &mut biased_layers {
            for b in layer.bias.iter_mut() {
                *b = 42.0;
            }
        }
        let biased = FeedForwardNetwork::new(biased_layers, *net.activation()).unwrap();
        let spec = multiplier_spec(&net, &CouplingMode::Neuron, vec![0.3, 0.8, 0.1]).unwrap();
        let t = build_t(&spec, 3).unwrap();
        let m0 = assemble_m(&net, &t, 1.5).unwrap();
        let m1 = assemble_m(&biased, &t, 1.5).unwrap();
        assert_eq!(m0.entries(), m1.entries());
    }

    #[test]
    fn assemble_m_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let net = random_network(&[2, 2, 3, 1], relu(), None, 13).unwrap();
        let n = net.hidden_total();
        for _ in 0..20 {
            let z1: (f64, Vec<f64>) =
                (rng.random::<f64>() * 4.0, (0..n).map(|_| rng.random::<f64>()).collect());
            let z2: (f64, Vec<f64>) =
                (rng.random::<f64>() * 4.0, (0..n).map(|_| rng.random::<f64>()).collect());
            let theta: f64 = rng.random::<f64>();
            let blend_rho = theta * z1.0 + (1.0 - theta) * z2.0;
            let blend_lambda: Vec<f64> =
                z1.1.iter().zip(&z2.1).map(|(a, b)| theta * a + (1.0 - theta) * b).collect();
            let t1 = build_t(&multiplier_spec(&net, &CouplingMode::Neuron, z1.1.clone()).unwrap(), n)
                .unwrap();
            let t2 = build_t(&multiplier_spec(&net, &CouplingMode::Neuron, z2.1.clone()).unwrap(), n)
                .unwrap();
            let tb = build_t(&multiplier_spec(&net, &CouplingMode::Neuron, blend_lambda).unwrap(), n)
                .unwrap();
            let m1 = assemble_m(&net, &t1, z1.0).unwrap();
            let m2 = assemble_m(&net, &t2, z2.0).unwrap();
            let mb = assemble_m(&net, &tb, blend_rho).unwrap();
            let scale = 1.0 + m1.max_abs().max(m2.max_abs());
            for ((a, b), blended) in m1.entries().iter().zip(m2.entries()).zip(mb.entries()) {
                let expected = theta * a + (1.0 - theta) * b;
                assert!((blended - expected).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn program_scalar_example() {
        let net = scalar_net(1.3, 2.1);
        let prog = build_program(&net, &CouplingMode::Neuron).unwrap();
        assert_eq!(prog.dim(), 2);
        assert_eq!(prog.var_count(), 2);
        assert_eq!(prog.cost(), &[1.0, 0.0]);
        assert_eq!(prog.nonneg(), &[false, true]);
        assert_eq!(prog.f_rho().entries(), &[-1.0, 0.0, 0.0, 0.0]);
        let expected_basis = [0.0, 1.3, 1.3, -2.0];
        for (got, want) in prog.f_lambda()[0].entries().iter().zip(&expected_basis) {
            assert!((got - want).abs() <= 1e-12);
        }
        let expected_const = [0.0, 0.0, 0.0, 2.1 * 2.1];
        for (got, want) in prog.f_const().entries().iter().zip(&expected_const) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn program_matches_assemble_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let net = random_network(&[3, 3, 2, 2], relu(), None, 14).unwrap();
        let n = net.hidden_total();
        for mode in [CouplingMode::Layer, CouplingMode::Neuron, CouplingMode::network_all_pairs()] {
            let prog = build_program(&net, &mode).unwrap();
            for _ in 0..100 {
                let rho = rng.random::<f64>() * 5.0 - 1.0;
                let lambdas: Vec<f64> =
                    (0..prog.var_count() - 1).map(|_| rng.random::<f64>() * 2.0).collect();
                let g = prog.evaluate_g(rho, &lambdas).unwrap();
                let spec = MultiplierSpec {
                    mode: mode.clone(),
                    lambdas: lambdas.clone(),
                    targets: prog.targets().to_vec(),
                };
                let t = build_t(&spec, n).unwrap();
                let m = assemble_m(&net, &t, rho).unwrap();
                let scale = 1.0 + m.max_abs();
                for (a, b) in g.entries().iter().zip(m.entries()) {
                    assert!((a - b).abs() <= 1e-12 * scale, "{mode:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn program_basis_counts() {
        let net = random_network(&[2, 3, 2, 1], relu(), None, 15).unwrap();
        assert_eq!(build_program(&net, &CouplingMode::Layer).unwrap().f_lambda().len(), 2);
        assert_eq!(build_program(&net, &CouplingMode::Neuron).unwrap().f_lambda().len(), 5);
        assert_eq!(
            build_program(&net, &CouplingMode::network_all_pairs()).unwrap().f_lambda().len(),
            5 + 10
        );
    }

    #[test]
    fn neuron_mode_basis_count_for_widths_3_2() {
        let net = random_network(&[4, 3, 2, 2], relu(), None, 19).unwrap();
        let prog = build_program(&net, &CouplingMode::Neuron).unwrap();
        assert_eq!(prog.f_lambda().len(), 5);
    }

    #[test]
    fn program_pair_cap() {
        let net = random_network(&[2, 5, 5, 1], relu(), None, 16).unwrap();
        // 10 hidden neurons: 45 pairs.
        let err = build_program_capped(&net, &CouplingMode::network_all_pairs(), 40);
        match err {
            Err(LmiError::PairCapExceeded { required, cap }) => {
                assert_eq!(required, 45);
                assert_eq!(cap, 40);
            }
            other => panic!("expected pair cap error, got {other:?}"),
        }
        assert!(build_program_capped(&net, &CouplingMode::network_all_pairs(), 45).is_ok());
    }

    #[test]
    fn program_rejects_affine_networks() {
        let net = random_network(&[3, 2], relu(), None, 17).unwrap();
        assert!(matches!(build_program(&net, &CouplingMode::Neuron), Err(LmiError::AffineNetwork)));
    }

    #[test]
    fn explicit_pairs_validated() {
        let net = random_network(&[2, 2, 2, 1], relu(), None, 18).unwrap();
        let bad = CouplingMode::Network { pairs: Some(vec![(1, 1)]) };
        assert!(matches!(lambda_targets(&net, &bad, usize::MAX), Err(LmiError::InvalidPair { .. })));
        let bad = CouplingMode::Network { pairs: Some(vec![(0, 4)]) };
        assert!(matches!(lambda_targets(&net, &bad, usize::MAX), Err(LmiError::InvalidPair { .. })));
        let dup = CouplingMode::Network { pairs: Some(vec![(0, 1), (0, 1)]) };
        assert!(matches!(lambda_targets(&net, &dup, usize::MAX), Err(LmiError::InvalidPair { .. })));
        let ok = CouplingMode::Network { pairs: Some(vec![(0, 1), (2, 3)]) };
        let targets = lambda_targets(&net, &ok, usize::MAX).unwrap();
        assert_eq!(targets.len(), 4 + 2);
    }

    fn incremental_quadratic_form(
        kind: ActivationKind,
        sector: crate::model::SectorBounds,
        t: &SymMatrix,
        x: &[f64],
        y: &[f64],
    ) -> f64 {
        let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = x.iter().zip(y).map(|(a, b)| kind.apply(*a) - kind.apply(*b)).collect();
        let tu = t.matvec(&u);
        let tv = t.matvec(&v);
        -2.0 * sector.alpha * sector.beta * dot(&u, &tu)
            + 2.0 * (sector.alpha + sector.beta) * dot(&u, &tv)
            - 2.0 * dot(&v, &tv)
    }

    #[test]
    fn slope_restriction_quadratic_form_probe() {
        // For the concrete activation and any Neuron or Layer multiplier,
        // the incremental quadratic form must be nonnegative on sampled
        // pairs. Network-mode multipliers carry no such guarantee (the
        // pairwise couplings compare components at different operating
        // points), which is why Network certificates stay flagged
        // experimental and get probed against empirical lower bounds.
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        for kind in [
            ActivationKind::Relu,
            ActivationKind::Tanh,
            ActivationKind::Sigmoid,
            ActivationKind::LeakyRelu { negative_slope: 0.2 },
        ] {
            let activation = Activation::new(kind);
            let net = random_network(&[2, 3, 3, 2], activation, None, 77).unwrap();
            let n = net.hidden_total();
            let sector = net.sector();
            for mode in [CouplingMode::Layer, CouplingMode::Neuron] {
                let targets = lambda_targets(&net, &mode, usize::MAX).unwrap();
                let lambdas: Vec<f64> = (0..targets.len()).map(|_| rng.random::<f64>()).collect();
                let t = build_t(&MultiplierSpec { mode, lambdas, targets }, n).unwrap();
                for _ in 0..100 {
                    let x: Vec<f64> =
                        (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                    let y: Vec<f64> =
                        (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                    let quad = incremental_quadratic_form(kind, sector, &t, &x, &y);
                    assert!(quad >= -1e-9, "{kind:?}: quadratic form {quad}");
                }
            }
        }
    }

    #[test]
    fn network_pair_constraint_can_fail_at_mismatched_operating_points() {
        // The cross-coupling constraint is violated by relu components sitting
        // on different linear pieces; this is the case that keeps Network
        // mode experimental.
        let t = build_t(
            &MultiplierSpec {
                mode: CouplingMode::network_all_pairs(),
                lambdas: vec![0.0, 0.0, 1.0],
                targets: vec![
                    LambdaTarget::Neuron(0),
                    LambdaTarget::Neuron(1),
                    LambdaTarget::Pair(0, 1),
                ],
            },
            2,
        )
        .unwrap();
        let sector = crate::model::SectorBounds { alpha: 0.0, beta: 1.0 };
        let quad = incremental_quadratic_form(
            ActivationKind::Relu,
            sector,
            &t,
            &[1.0, -10.0],
            &[0.0, -11.0],
        );
        assert!(quad < 0.0, "expected a violated pair constraint, got {quad}");
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}
