//! The error equality for finite-dimensional mixed systems.
//!
//! A system is the triple (A, W1, W2) with SPD weights W1, W2 realizing
//! A* W2 A x + W1 x = f in Euclidean coordinates, where the adjoint of A is
//! the plain transpose. The primal/dual solves, the majorant, the combined
//! error norm, the isometry of the solution operator and the sharpness of the
//! one-sided bounds are all available as pure functions, together with a
//! backward-Euler stepper that reduces each implicit time step to a system of
//! this shape.

use crate::sparse::{
    norm2, solve_spd, weighted_inv_norm_sq, weighted_norm_sq, CsrMatrix, DenseCholesky,
    LinalgError, SolveMethod,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Discrete triple (A, W1, W2); W1 is n x n, W2 is m x m, A maps n -> m.
#[derive(Debug, Clone)]
pub struct OperatorSystem {
    pub a: CsrMatrix,
    pub w1: CsrMatrix,
    pub w2: CsrMatrix,
}

/// Primal/dual pair; `y = W2 A x` when produced by [`solve_primal`].
#[derive(Debug, Clone)]
pub struct MixedSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl MixedSolution {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { x: vec![0.0; n], y: vec![0.0; m] }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MajorantParts {
    pub total: f64,
    pub equation: f64,
    pub flux: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EqualityResidual {
    pub delta: f64,
    pub delta_rel: f64,
    /// ||f|| in the W1^{-1} norm; the normalization scale.
    pub source_norm: f64,
    /// f = 0 makes delta 0 by definition; flagged so callers can tell.
    pub zero_source: bool,
}

impl OperatorSystem {
    pub fn new(a: CsrMatrix, w1: CsrMatrix, w2: CsrMatrix) -> Result<Self, LinalgError> {
        let sys = Self { a, w1, w2 };
        sys.validate()?;
        Ok(sys)
    }

    pub fn dim_primal(&self) -> usize {
        self.a.n_cols()
    }

    pub fn dim_dual(&self) -> usize {
        self.a.n_rows()
    }

    fn validate(&self) -> Result<(), LinalgError> {
        let (n, m) = (self.dim_primal(), self.dim_dual());
        if self.w1.n_rows() != n || self.w1.n_cols() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "W1 must be {n}x{n}, got {}x{}",
                self.w1.n_rows(),
                self.w1.n_cols()
            )));
        }
        if self.w2.n_rows() != m || self.w2.n_cols() != m {
            return Err(LinalgError::DimensionMismatch(format!(
                "W2 must be {m}x{m}, got {}x{}",
                self.w2.n_rows(),
                self.w2.n_cols()
            )));
        }
        DenseCholesky::factor(&self.w1)?;
        DenseCholesky::factor(&self.w2)?;
        Ok(())
    }

    /// A' W2 A + W1, the primal operator.
    pub fn primal_operator(&self) -> Result<CsrMatrix, LinalgError> {
        let w2a = self.w2.matmul(&self.a)?;
        let at = self.a.transpose();
        at.matmul(&w2a)?.add_scaled(&self.w1, 1.0)
    }
}

fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Solves the primal problem (A' W2 A + W1) x = f and returns (x, W2 A x).
pub fn solve_primal(
    sys: &OperatorSystem,
    f: &[f64],
    method: &SolveMethod,
) -> Result<MixedSolution, LinalgError> {
    if f.len() != sys.dim_primal() {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve_primal: f has length {}, expected {}",
            f.len(),
            sys.dim_primal()
        )));
    }
    let k = sys.primal_operator()?;
    let x = solve_spd(&k, f, method)?;
    let y = sys.w2.spmv(&sys.a.spmv(&x)?)?;
    Ok(MixedSolution { x, y })
}

/// Solves the dual problem (A W1^{-1} A' + W2^{-1}) y = A W1^{-1} f directly,
/// with the inverse weights applied through factorizations. The operator is
/// dense in general, so this route is for the small-system layer.
pub fn solve_dual(
    sys: &OperatorSystem,
    f: &[f64],
    _method: &SolveMethod,
) -> Result<Vec<f64>, LinalgError> {
    let (n, m) = (sys.dim_primal(), sys.dim_dual());
    if f.len() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve_dual: f has length {}, expected {n}",
            f.len()
        )));
    }
    let w1_chol = DenseCholesky::factor(&sys.w1)?;
    let w2_chol = DenseCholesky::factor(&sys.w2)?;
    let at = sys.a.transpose();
    let mut dual = vec![vec![0.0; m]; m];
    for j in 0..m {
        let mut ej = vec![0.0; m];
        ej[j] = 1.0;
        let atej = at.spmv(&ej)?;
        let col_a = sys.a.spmv(&w1_chol.solve(&atej)?)?;
        let col_b = w2_chol.solve(&ej)?;
        for i in 0..m {
            dual[i][j] = col_a[i] + col_b[i];
        }
    }
    // symmetrize away the roundoff from column-wise construction
    for i in 0..m {
        for j in 0..i {
            let s = 0.5 * (dual[i][j] + dual[j][i]);
            dual[i][j] = s;
            dual[j][i] = s;
        }
    }
    let rhs = sys.a.spmv(&w1_chol.solve(f)?)?;
    let dual_csr = CsrMatrix::from_dense(&dual)?;
    DenseCholesky::factor(&dual_csr)?.solve(&rhs)
}

/// M(x~, y~) = ||f - W1 x~ - A' y~||^2_{W1^{-1}} + ||y~ - W2 A x~||^2_{W2^{-1}}.
pub fn majorant(
    sys: &OperatorSystem,
    f: &[f64],
    approx: &MixedSolution,
    method: &SolveMethod,
) -> Result<MajorantParts, LinalgError> {
    let at_y = sys.a.transpose().spmv(&approx.y)?;
    let w1_x = sys.w1.spmv(&approx.x)?;
    let r_eq: Vec<f64> =
        f.iter().zip(&w1_x).zip(&at_y).map(|((fi, wi), ai)| fi - wi - ai).collect();
    let w2ax = sys.w2.spmv(&sys.a.spmv(&approx.x)?)?;
    let r_flux = vec_sub(&approx.y, &w2ax);
    let equation = weighted_inv_norm_sq(&sys.w1, &r_eq, method)?;
    let flux = weighted_inv_norm_sq(&sys.w2, &r_flux, method)?;
    Ok(MajorantParts { total: equation + flux, equation, flux })
}

/// ||x-x~||^2_{W1} + ||A(x-x~)||^2_{W2} + ||y-y~||^2_{W2^{-1}} + ||A'(y-y~)||^2_{W1^{-1}}.
pub fn combined_error_sq(
    sys: &OperatorSystem,
    exact: &MixedSolution,
    approx: &MixedSolution,
    method: &SolveMethod,
) -> Result<f64, LinalgError> {
    let dx = vec_sub(&exact.x, &approx.x);
    let dy = vec_sub(&exact.y, &approx.y);
    let adx = sys.a.spmv(&dx)?;
    let atdy = sys.a.transpose().spmv(&dy)?;
    Ok(weighted_norm_sq(&sys.w1, &dx)?
        + weighted_norm_sq(&sys.w2, &adx)?
        + weighted_inv_norm_sq(&sys.w2, &dy, method)?
        + weighted_inv_norm_sq(&sys.w1, &atdy, method)?)
}

/// |sqrt(combined error^2) - sqrt(majorant)| against the internally computed
/// exact solution, plus the form normalized by ||f||_{W1^{-1}}.
pub fn equality_residual(
    sys: &OperatorSystem,
    f: &[f64],
    approx: &MixedSolution,
    method: &SolveMethod,
) -> Result<EqualityResidual, LinalgError> {
    let source_norm = weighted_inv_norm_sq(&sys.w1, f, method)?.sqrt();
    if source_norm == 0.0 {
        return Ok(EqualityResidual { delta: 0.0, delta_rel: 0.0, source_norm, zero_source: true });
    }
    let exact = solve_primal(sys, f, method)?;
    let err = combined_error_sq(sys, &exact, approx, method)?;
    let m = majorant(sys, f, approx, method)?;
    let delta = (err.sqrt() - m.total.sqrt()).abs();
    Ok(EqualityResidual { delta, delta_rel: delta / source_norm, source_norm, zero_source: false })
}

/// | |||(x,y)||| - ||f||_{W1^{-1}} | for the exact solution: zero when the
/// solution operator acts as an isometry.
pub fn isometry_deficit(
    sys: &OperatorSystem,
    f: &[f64],
    method: &SolveMethod,
) -> Result<f64, LinalgError> {
    let exact = solve_primal(sys, f, method)?;
    let zero = MixedSolution::zeros(sys.dim_primal(), sys.dim_dual());
    let norm_sq = combined_error_sq(sys, &exact, &zero, method)?;
    let f_norm = weighted_inv_norm_sq(&sys.w1, f, method)?.sqrt();
    Ok((norm_sq.sqrt() - f_norm).abs())
}

#[derive(Debug, Clone)]
pub struct SharpnessReport {
    /// M(x~, y_exact); the minimum over the dual slot.
    pub min_over_dual: f64,
    /// Primal part of the error, ||x-x~||^2_{W1} + ||A(x-x~)||^2_{W2}.
    pub primal_error_sq: f64,
    /// |min_over_dual - primal_error_sq| relative to their magnitude.
    pub primal_gap_rel: f64,
    /// Trials where M(x~, psi) undercut the minimum beyond the slack.
    pub dual_violations: usize,
    /// M(x, y~); the minimum over the primal slot for the sampled y~.
    pub min_over_primal: f64,
    /// Dual part of the error for the sampled y~.
    pub dual_error_sq: f64,
    pub dual_gap_rel: f64,
    pub primal_violations: usize,
    /// Whether the exact minimizer itself was among the trial points.
    pub minimizer_trialed: bool,
}

/// Verifies Corollary-style sharpness: the majorant with the exact dual
/// (resp. primal) slot equals the primal (resp. dual) part of the error, and
/// random perturbations never undercut it beyond `slack`.
pub fn sharpness_check(
    sys: &OperatorSystem,
    f: &[f64],
    x_tilde: &[f64],
    trials: usize,
    seed: u64,
    method: &SolveMethod,
) -> Result<SharpnessReport, LinalgError> {
    if trials == 0 {
        return Err(LinalgError::DimensionMismatch("sharpness_check needs trials >= 1".into()));
    }
    let slack = 1e-12;
    let exact = solve_primal(sys, f, method)?;
    let approx_exact_dual = MixedSolution { x: x_tilde.to_vec(), y: exact.y.clone() };
    let min_over_dual = majorant(sys, f, &approx_exact_dual, method)?.total;
    let dx = vec_sub(&exact.x, x_tilde);
    let adx = sys.a.spmv(&dx)?;
    let primal_error_sq =
        weighted_norm_sq(&sys.w1, &dx)? + weighted_norm_sq(&sys.w2, &adx)?;
    let scale = min_over_dual.abs().max(primal_error_sq.abs()).max(1e-300);
    let primal_gap_rel = (min_over_dual - primal_error_sq).abs() / scale;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sys.dim_dual();
    let n = sys.dim_primal();
    let mut dual_violations = 0;
    let mut minimizer_trialed = false;
    for t in 0..trials {
        // trial 0 revisits the exact minimizer: the equality branch
        let psi: Vec<f64> = if t == 0 {
            minimizer_trialed = true;
            exact.y.clone()
        } else {
            (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let trial = MixedSolution { x: x_tilde.to_vec(), y: psi };
        let val = majorant(sys, f, &trial, method)?.total;
        if val < min_over_dual - slack {
            dual_violations += 1;
        }
    }

    // symmetric direction: fix a y~ drawn from the same stream
    let y_tilde: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let approx_exact_primal = MixedSolution { x: exact.x.clone(), y: y_tilde.clone() };
    let min_over_primal = majorant(sys, f, &approx_exact_primal, method)?.total;
    let dy = vec_sub(&exact.y, &y_tilde);
    let atdy = sys.a.transpose().spmv(&dy)?;
    let dual_error_sq = weighted_inv_norm_sq(&sys.w2, &dy, method)?
        + weighted_inv_norm_sq(&sys.w1, &atdy, method)?;
    let scale = min_over_primal.abs().max(dual_error_sq.abs()).max(1e-300);
    let dual_gap_rel = (min_over_primal - dual_error_sq).abs() / scale;
    let mut primal_violations = 0;
    for _ in 0..trials {
        let phi: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trial = MixedSolution { x: phi, y: y_tilde.clone() };
        let val = majorant(sys, f, &trial, method)?.total;
        if val < min_over_primal - slack {
            primal_violations += 1;
        }
    }

    Ok(SharpnessReport {
        min_over_dual,
        primal_error_sq,
        primal_gap_rel,
        dual_violations,
        min_over_primal,
        dual_error_sq,
        dual_gap_rel,
        primal_violations,
        minimizer_trialed,
    })
}

#[derive(Debug, Clone)]
pub struct BackwardEulerStep {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Equality residual of the previous step's pair against this step's
    /// elliptic system, the natural per-step check.
    pub equality: EqualityResidual,
}

/// One backward-Euler step: assembles W1 = dt^{-2} Lambda1^{-1}, W2 = Lambda2,
/// forms f_n = A'(Lambda2 h + dt^{-1} y_prev) + W1 x_prev + dt^{-1} g and
/// solves the resulting mixed system.
#[allow(clippy::too_many_arguments)]
pub fn backward_euler_step(
    a: &CsrMatrix,
    lambda1: &CsrMatrix,
    lambda2: &CsrMatrix,
    dt: f64,
    x_prev: &[f64],
    y_prev: &[f64],
    g_n: &[f64],
    h_n: &[f64],
    method: &SolveMethod,
) -> Result<BackwardEulerStep, LinalgError> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(LinalgError::NonFinite(format!("time step {dt} must be positive")));
    }
    let (m, n) = (a.n_rows(), a.n_cols());
    if x_prev.len() != n || g_n.len() != n || y_prev.len() != m || h_n.len() != m {
        return Err(LinalgError::DimensionMismatch("backward_euler_step state sizes".into()));
    }
    // explicit inverse of Lambda1, column-wise through the factorization
    let chol = DenseCholesky::factor(lambda1)?;
    let mut inv = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut ej = vec![0.0; n];
        ej[j] = 1.0;
        let col = chol.solve(&ej)?;
        for i in 0..n {
            inv[i][j] = col[i] / (dt * dt);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[i][j] + inv[j][i]);
            inv[i][j] = s;
            inv[j][i] = s;
        }
    }
    let w1 = CsrMatrix::from_dense(&inv)?;
    let sys = OperatorSystem::new(a.clone(), w1, lambda2.clone())?;

    let l2h = sys.w2.spmv(h_n)?;
    let arg: Vec<f64> = l2h.iter().zip(y_prev).map(|(lh, yp)| lh + yp / dt).collect();
    let at_part = sys.a.transpose().spmv(&arg)?;
    let w1_xprev = sys.w1.spmv(x_prev)?;
    let f_n: Vec<f64> = at_part
        .iter()
        .zip(&w1_xprev)
        .zip(g_n)
        .map(|((ai, wi), gi)| ai + wi + gi / dt)
        .collect();

    let sol = solve_primal(&sys, &f_n, method)?;
    let prev = MixedSolution { x: x_prev.to_vec(), y: y_prev.to_vec() };
    let equality = equality_residual(&sys, &f_n, &prev, method)?;
    Ok(BackwardEulerStep { x: sol.x, y: sol.y, equality })
}

/// Seeded random system: A has entries uniform in [-1,1] at density 0.3,
/// each weight is B'B + dim * I for random dense B.
pub fn random_system(n: usize, m: usize, seed: u64) -> OperatorSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if rng.gen_bool(0.3) {
                triplets.push((i, j, rng.gen_range(-1.0..1.0)));
            }
        }
    }
    let a = CsrMatrix::from_triplets(m, n, &triplets).expect("finite triplets");
    let w1 = random_spd_weight(n, &mut rng);
    let w2 = random_spd_weight(m, &mut rng);
    OperatorSystem { a, w1, w2 }
}

fn random_spd_weight(dim: usize, rng: &mut ChaCha8Rng) -> CsrMatrix {
    let b: Vec<Vec<f64>> =
        (0..dim).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut rows = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = 0.0;
            for brow in &b {
                s += brow[i] * brow[j];
            }
            rows[i][j] = s;
            rows[j][i] = s;
        }
        rows[i][i] += dim as f64;
    }
    CsrMatrix::from_dense(&rows).expect("finite entries")
}

/// Seeded uniform [-1,1] vector, for data and approximation samples.
pub fn random_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
