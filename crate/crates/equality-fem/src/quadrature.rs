//! Quadrature on the reference triangle and on edges.
//!
//! Degrees 1 and 2 use the classical centroid and edge-midpoint rules. Higher
//! degrees are built by symmetrizing a Gauss-Legendre conical product rule
//! over the six barycentric permutations, which keeps every weight positive
//! and makes the rule invariant under the triangle symmetries without any
//! tabulated constants.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("quadrature degree {0} outside supported range 1..=10")]
    DegreeOutOfRange(usize),
}

/// Positive symmetric rule on the reference triangle, barycentric points,
/// weights summing to 1/2 (the reference area).
#[derive(Debug, Clone)]
pub struct TriQuadrature {
    pub degree: usize,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl TriQuadrature {
    pub fn with_degree(degree: usize) -> Result<Self, QuadratureError> {
        if !(1..=10).contains(&degree) {
            return Err(QuadratureError::DegreeOutOfRange(degree));
        }
        let rule = match degree {
            1 => Self {
                degree,
                points: vec![[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
                weights: vec![0.5],
            },
            2 => Self {
                degree,
                points: vec![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
                weights: vec![1.0 / 6.0; 3],
            },
            d => Self::symmetrized_conical(d),
        };
        Ok(rule)
    }

    /// Conical product rule of sufficient order, averaged over the six
    /// barycentric permutations.
    fn symmetrized_conical(degree: usize) -> Self {
        // u direction carries the extra Jacobian power, hence degree+1
        let nu = gauss_count_for(degree + 1);
        let nv = gauss_count_for(degree);
        let (up, uw) = gauss_legendre_unit(nu);
        let (vp, vw) = gauss_legendre_unit(nv);
        let mut points = Vec::with_capacity(6 * nu * nv);
        let mut weights = Vec::with_capacity(6 * nu * nv);
        for (&u, &wu) in up.iter().zip(&uw) {
            for (&v, &wv) in vp.iter().zip(&vw) {
                let x = u;
                let y = v * (1.0 - u);
                let w = wu * wv * (1.0 - u);
                let lam = [1.0 - x - y, x, y];
                for perm in PERMS {
                    points.push([lam[perm[0]], lam[perm[1]], lam[perm[2]]]);
                    weights.push(w / 6.0);
                }
            }
        }
        // pin the zeroth moment exactly to the reference area
        let total = crate::sparse::pairwise_sum(&weights);
        let scale = 0.5 / total;
        for w in &mut weights {
            *w *= scale;
        }
        Self { degree, points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

const PERMS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn gauss_count_for(degree: usize) -> usize {
    // n-point Gauss-Legendre is exact through degree 2n-1
    degree / 2 + 1
}

/// Gauss-Legendre nodes and weights on [0, 1], weights summing to 1.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Newton iteration on P_n from the Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
