//! Lowest-order finite element spaces on triangles: nodal P1, edge-normal
//! RT0 and edge-tangential N0, with weighted form assembly, essential
//! boundary conditions and canonical interpolation.
//!
//! Conventions, fixed so flux values are reproducible:
//! - every edge is oriented from its smaller to its larger vertex id;
//! - the N0 dof is the tangential circulation along that orientation and the
//!   basis on a triangle with barycentric functions l is
//!   `W_e = l_lo grad(l_hi) - l_hi grad(l_lo)` with `rot W_e` constant;
//! - the RT0 dof is the normal flux through the edge with normal
//!   `n = R t` for `R(v) = (v2, -v1)`, basis `R W_e`, `div (R W_e) = rot W_e`;
//! - analytic data is evaluated region-wise: every quadrature or dof
//!   functional evaluation passes the region label of the requesting
//!   triangle, so coefficient and source jumps aligned with element
//!   boundaries are integrated exactly.

use crate::mesh::{BoundaryKind, Geometry, Mesh, MeshError};
use crate::quadrature::{gauss_legendre_unit, QuadratureError, TriQuadrature};
use crate::sparse::{CsrMatrix, LinalgError};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("coefficient is not admissible: {0}")]
    BadCoefficient(String),
    #[error("no coefficient value for region {0}")]
    MissingRegion(u32),
    #[error("source evaluated to a non-finite value on triangle {tri} at ({x:.6}, {y:.6})")]
    NonFiniteSource { tri: usize, x: f64, y: f64 },
    #[error("field is not single-valued at the dof functional of {what} {index} (spread {spread:.3e})")]
    DiscontinuousAtDof { what: &'static str, index: usize, spread: f64 },
    #[error("essential data of the wrong kind for this space: {0}")]
    TraceKind(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

// ----- deterministic element-parallel map ---------------------------------

/// Worker count from EQUALITY_FEM_THREADS (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("EQUALITY_FEM_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
        .min(64)
}

/// Applies `f` to 0..n and collects results in index order. With multiple
/// workers the range is chunked and chunk outputs are concatenated in order,
/// so the result is identical to the sequential run.
pub fn map_elements<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = threads_from_env();
    if workers <= 1 || n < 2 * workers {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut out: Vec<Vec<T>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            if lo >= hi {
                break;
            }
            let f = &f;
            handles.push(scope.spawn(move || (lo..hi).map(f).collect::<Vec<T>>()));
        }
        for h in handles {
            out.push(h.join().expect("element worker panicked"));
        }
    });
    out.into_iter().flatten().collect()
}

// ----- analytic fields ------------------------------------------------------

pub type Mat2 = [[f64; 2]; 2];

pub fn mat2_vec(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn mat2_inv(m: &Mat2) -> Result<Mat2, FemError> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det <= 0.0 || !det.is_finite() {
        return Err(FemError::BadCoefficient(format!("2x2 determinant {det:.3e} not positive")));
    }
    Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

pub fn mat2_check_spd(m: &Mat2) -> Result<(), FemError> {
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if (m[0][1] - m[1][0]).abs() > 1e-12 * scale {
        return Err(FemError::BadCoefficient("2x2 coefficient not symmetric".into()));
    }
    if m[0][0] <= 0.0 || m[0][0] * m[1][1] - m[0][1] * m[1][0] <= 0.0 {
        return Err(FemError::BadCoefficient("2x2 coefficient not positive definite".into()));
    }
    Ok(())
}

pub fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Region-aware scalar callable; the region label of the requesting triangle
/// resolves piecewise definitions on interfaces.
#[derive(Clone)]
pub struct ScalarField(Arc<dyn Fn(u32, [f64; 2]) -> f64 + Send + Sync>);

impl ScalarField {
    pub fn new(f: impl Fn(u32, [f64; 2]) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c)
    }
    pub fn eval(&self, region: u32, x: [f64; 2]) -> f64 {
        (self.0)(region, x)
    }
}

/// Region-aware vector callable.
#[derive(Clone)]
pub struct VectorField(Arc<dyn Fn(u32, [f64; 2]) -> [f64; 2] + Send + Sync>);

impl VectorField {
    pub fn new(f: impl Fn(u32, [f64; 2]) -> [f64; 2] + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
    pub fn constant(c: [f64; 2]) -> Self {
        Self::new(move |_, _| c)
    }
    pub fn eval(&self, region: u32, x: [f64; 2]) -> [f64; 2] {
        (self.0)(region, x)
    }
}

/// Per-region coefficient data.
#[derive(Debug, Clone)]
pub enum RegionValue<T: Clone> {
    Uniform(T),
    PerRegion(BTreeMap<u32, T>),
}

impl<T: Clone> RegionValue<T> {
    pub fn get(&self, region: u32) -> Result<&T, FemError> {
        match self {
            RegionValue::Uniform(v) => Ok(v),
            RegionValue::PerRegion(map) => map.get(&region).ok_or(FemError::MissingRegion(region)),
        }
    }
}

impl RegionValue<f64> {
    pub fn check_positive(&self, name: &str) -> Result<(), FemError> {
        let check = |v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FemError::BadCoefficient(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            RegionValue::Uniform(v) => check(*v),
            RegionValue::PerRegion(map) => map.values().try_for_each(|v| check(*v)),
        }
    }
}

impl RegionValue<Mat2> {
    pub fn check_spd(&self) -> Result<(), FemError> {
        match self {
            RegionValue::Uniform(m) => mat2_check_spd(m),
            RegionValue::PerRegion(map) => map.values().try_for_each(mat2_check_spd),
        }
    }
}

pub fn identity_mat2() -> Mat2 {
    [[1.0, 0.0], [0.0, 1.0]]
}

// ----- spaces and functions -------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    NodalP1,
    EdgeRt0,
    EdgeN0,
}

/// A finite element space over a shared mesh with an essential-dof mask
/// derived from the boundary tags handed in as `essential_kinds`.
#[derive(Clone)]
pub struct FeSpace {
    kind: SpaceKind,
    mesh: Arc<Mesh>,
    essential: Vec<bool>,
}

impl FeSpace {
    pub fn new(kind: SpaceKind, mesh: Arc<Mesh>, essential_kinds: &[BoundaryKind]) -> FeSpace {
        let essential = match kind {
            SpaceKind::NodalP1 => {
                let mut mask = vec![false; mesh.n_vertices()];
                for e in mesh.boundary_edges() {
                    let tag = mesh.boundary_tag(e).expect("boundary edge is tagged");
                    if essential_kinds.contains(&tag.kind) {
                        mask[mesh.edges()[e][0]] = true;
                        mask[mesh.edges()[e][1]] = true;
                    }
                }
                mask
            }
            SpaceKind::EdgeRt0 | SpaceKind::EdgeN0 => {
                let mut mask = vec![false; mesh.n_edges()];
                for e in mesh.boundary_edges() {
                    let tag = mesh.boundary_tag(e).expect("boundary edge is tagged");
                    if essential_kinds.contains(&tag.kind) {
                        mask[e] = true;
                    }
                }
                mask
            }
        };
        FeSpace { kind, mesh, essential }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn dof_count(&self) -> usize {
        match self.kind {
            SpaceKind::NodalP1 => self.mesh.n_vertices(),
            SpaceKind::EdgeRt0 | SpaceKind::EdgeN0 => self.mesh.n_edges(),
        }
    }

    pub fn essential(&self) -> &[bool] {
        &self.essential
    }

    pub fn same_mesh(&self, other: &FeSpace) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh)
    }
}

/// Coefficient vector bound to a space.
#[derive(Clone)]
pub struct FeFunction {
    space: FeSpace,
    coefficients: Vec<f64>,
}

impl FeFunction {
    pub fn zeros(space: FeSpace) -> Self {
        let n = space.dof_count();
        Self { space, coefficients: vec![0.0; n] }
    }

    pub fn from_coefficients(space: FeSpace, coefficients: Vec<f64>) -> Result<Self, FemError> {
        if coefficients.len() != space.dof_count() {
            return Err(FemError::SpaceMismatch(format!(
                "{} coefficients for a space with {} dofs",
                coefficients.len(),
                space.dof_count()
            )));
        }
        Ok(Self { space, coefficients })
    }

    pub fn space(&self) -> &FeSpace {
        &self.space
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// P1 point value at a barycentric point of a triangle.
    pub fn value_p1(&self, tri: usize, lam: [f64; 3]) -> f64 {
        let t = self.space.mesh.triangles()[tri];
        lam[0] * self.coefficients[t[0]]
            + lam[1] * self.coefficients[t[1]]
            + lam[2] * self.coefficients[t[2]]
    }

    /// P1 gradient; constant per triangle.
    pub fn grad_p1(&self, geo: &Geometry, tri: usize) -> [f64; 2] {
        let t = self.space.mesh.triangles()[tri];
        let g = &geo.bary_grads[tri];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += self.coefficients[t[k]] * g[k][0];
            out[1] += self.coefficients[t[k]] * g[k][1];
        }
        out
    }

    /// P1 co-gradient (d2 u, -d1 u); constant per triangle.
    pub fn cograd_p1(&self, geo: &Geometry, tri: usize) -> [f64; 2] {
        let g = self.grad_p1(geo, tri);
        [g[1], -g[0]]
    }

    /// Edge-element vector value at a barycentric point.
    pub fn value_edge(&self, geo: &Geometry, tri: usize, lam: [f64; 3]) -> [f64; 2] {
        let mesh = &self.space.mesh;
        let basis = EdgeBasis::on(mesh, geo, tri);
        let mut out = [0.0; 2];
        for k in 0..3 {
            let c = self.coefficients[basis.dof[k]];
            let w = basis.whitney(k, lam);
            match self.space.kind {
                SpaceKind::EdgeN0 => {
                    out[0] += c * w[0];
                    out[1] += c * w[1];
                }
                SpaceKind::EdgeRt0 => {
                    out[0] += c * w[1];
                    out[1] -= c * w[0];
                }
                SpaceKind::NodalP1 => unreachable!("value_edge on P1"),
            }
        }
        out
    }

    /// RT0 divergence; constant per triangle.
    pub fn div_rt0(&self, geo: &Geometry, tri: usize) -> f64 {
        self.rot_like(geo, tri)
    }

    /// N0 rotation; constant per triangle.
    pub fn rot_n0(&self, geo: &Geometry, tri: usize) -> f64 {
        self.rot_like(geo, tri)
    }

    fn rot_like(&self, geo: &Geometry, tri: usize) -> f64 {
        let mesh = &self.space.mesh;
        let basis = EdgeBasis::on(mesh, geo, tri);
        let mut out = 0.0;
        for k in 0..3 {
            out += self.coefficients[basis.dof[k]] * basis.rot[k];
        }
        out
    }
}

/// Nodal P1 vector field, one coefficient pair per vertex; conforming in H1
/// componentwise, hence also in H(div).
#[derive(Clone)]
pub struct P1VectorFunction {
    space: FeSpace,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl P1VectorFunction {
    pub fn new(space: FeSpace, x: Vec<f64>, y: Vec<f64>) -> Result<Self, FemError> {
        if space.kind() != SpaceKind::NodalP1 {
            return Err(FemError::SpaceMismatch("P1VectorFunction needs a NodalP1 space".into()));
        }
        if x.len() != space.dof_count() || y.len() != space.dof_count() {
            return Err(FemError::SpaceMismatch("component length mismatch".into()));
        }
        Ok(Self { space, x, y })
    }

    pub fn space(&self) -> &FeSpace {
        &self.space
    }

    pub fn value(&self, tri: usize, lam: [f64; 3]) -> [f64; 2] {
        let t = self.space.mesh.triangles()[tri];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += lam[k] * self.x[t[k]];
            out[1] += lam[k] * self.y[t[k]];
        }
        out
    }

    /// Divergence; constant per triangle.
    pub fn div(&self, geo: &Geometry, tri: usize) -> f64 {
        let t = self.space.mesh.triangles()[tri];
        let g = &geo.bary_grads[tri];
        let mut out = 0.0;
        for k in 0..3 {
            out += self.x[t[k]] * g[k][0] + self.y[t[k]] * g[k][1];
        }
        out
    }
}

/// Per-triangle Whitney edge basis bookkeeping: for local edge k the global
/// dof, the (lo, hi) local vertex slots and the constant rotation.
pub struct EdgeBasis {
    pub dof: [usize; 3],
    pair: [(usize, usize); 3],
    grads: [[f64; 2]; 3],
    pub rot: [f64; 3],
}

impl EdgeBasis {
    pub fn on(mesh: &Mesh, geo: &Geometry, tri: usize) -> EdgeBasis {
        let t = mesh.triangles()[tri];
        let te = mesh.tri_edges()[tri];
        let grads = geo.bary_grads[tri];
        let mut dof = [0usize; 3];
        let mut pair = [(0usize, 0usize); 3];
        let mut rot = [0.0; 3];
        for k in 0..3 {
            let e = te[k].0;
            let [lo, hi] = mesh.edges()[e];
            let il = t.iter().position(|&v| v == lo).expect("edge vertex in triangle");
            let ih = t.iter().position(|&v| v == hi).expect("edge vertex in triangle");
            dof[k] = e;
            pair[k] = (il, ih);
            rot[k] = 2.0 * (grads[il][0] * grads[ih][1] - grads[il][1] * grads[ih][0]);
        }
        EdgeBasis { dof, pair, grads, rot }
    }

    /// Whitney 1-form value `l_lo grad(l_hi) - l_hi grad(l_lo)`.
    pub fn whitney(&self, k: usize, lam: [f64; 3]) -> [f64; 2] {
        let (il, ih) = self.pair[k];
        [
            lam[il] * self.grads[ih][0] - lam[ih] * self.grads[il][0],
            lam[il] * self.grads[ih][1] - lam[ih] * self.grads[il][1],
        ]
    }
}

// ----- assembly --------------------------------------------------------------

/// Bilinear forms over a single space. The coefficient is always the problem
/// coefficient; forms written with an inverse weight invert it internally.
pub enum Form<'a> {
    /// grad u . alpha grad v on P1.
    P1Stiffness(&'a RegionValue<Mat2>),
    /// rho u v on P1.
    P1Mass(&'a RegionValue<f64>),
    /// cograd u . eps^{-1} cograd v on P1.
    P1CoGradStiffness(&'a RegionValue<Mat2>),
    /// p . alpha^{-1} q on RT0.
    Rt0Mass(&'a RegionValue<Mat2>),
    /// rho^{-1} div p div q on RT0.
    Rt0DivDiv(&'a RegionValue<f64>),
    /// E . eps F on N0.
    N0Mass(&'a RegionValue<Mat2>),
    /// mu^{-1} rot E rot F on N0.
    N0CurlCurl(&'a RegionValue<f64>),
}

fn form_space_kind(form: &Form) -> SpaceKind {
    match form {
        Form::P1Stiffness(_) | Form::P1Mass(_) | Form::P1CoGradStiffness(_) => SpaceKind::NodalP1,
        Form::Rt0Mass(_) | Form::Rt0DivDiv(_) => SpaceKind::EdgeRt0,
        Form::N0Mass(_) | Form::N0CurlCurl(_) => SpaceKind::EdgeN0,
    }
}

type Local = ([usize; 3], [[f64; 3]; 3]);

/// Assembles the symmetric matrix of `form`; deterministic element order.
pub fn assemble(
    space: &FeSpace,
    form: &Form,
    geo: &Geometry,
    rule: &TriQuadrature,
) -> Result<CsrMatrix, FemError> {
    if space.kind() != form_space_kind(form) {
        return Err(FemError::SpaceMismatch("form does not match space kind".into()));
    }
    match form {
        Form::P1Stiffness(c) | Form::P1CoGradStiffness(c) | Form::Rt0Mass(c) | Form::N0Mass(c) => {
            c.check_spd()?
        }
        Form::P1Mass(c) | Form::Rt0DivDiv(c) | Form::N0CurlCurl(c) => c.check_positive("coefficient")?,
    }
    let mesh = space.mesh();
    let n = space.dof_count();
    let locals: Vec<Result<Local, FemError>> =
        map_elements(mesh.n_triangles(), |t| element_matrix(space, form, geo, rule, t));
    let mut triplets = Vec::with_capacity(9 * locals.len());
    for local in locals {
        let (dofs, m) = local?;
        for k in 0..3 {
            for l in 0..3 {
                triplets.push((dofs[k], dofs[l], m[k][l]));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, &triplets)?)
}

fn element_matrix(
    space: &FeSpace,
    form: &Form,
    geo: &Geometry,
    rule: &TriQuadrature,
    tri: usize,
) -> Result<Local, FemError> {
    let mesh = space.mesh();
    let region = mesh.regions()[tri];
    let area = geo.areas[tri];
    let grads = &geo.bary_grads[tri];
    let tvs = mesh.triangles()[tri];
    let mut m = [[0.0; 3]; 3];
    let dofs: [usize; 3];
    match form {
        Form::P1Stiffness(alpha) => {
            dofs = tvs;
            let a = alpha.get(region)?;
            for k in 0..3 {
                for l in 0..3 {
                    m[k][l] = area * dot2(grads[k], mat2_vec(a, grads[l]));
                }
            }
        }
        Form::P1CoGradStiffness(eps) => {
            dofs = tvs;
            let einv = mat2_inv(eps.get(region)?)?;
            let cg: Vec<[f64; 2]> = grads.iter().map(|g| [g[1], -g[0]]).collect();
            for k in 0..3 {
                for l in 0..3 {
                    m[k][l] = area * dot2(cg[k], mat2_vec(&einv, cg[l]));
                }
            }
        }
        Form::P1Mass(rho) => {
            dofs = tvs;
            let r = *rho.get(region)?;
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let s = 2.0 * area * w * r;
                for k in 0..3 {
                    for l in 0..3 {
                        m[k][l] += s * lam[k] * lam[l];
                    }
                }
            }
        }
        Form::Rt0Mass(alpha) => {
            let basis = EdgeBasis::on(mesh, geo, tri);
            dofs = basis.dof;
            let ainv = mat2_inv(alpha.get(region)?)?;
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let s = 2.0 * area * w;
                let vals: Vec<[f64; 2]> = (0..3)
                    .map(|k| {
                        let wv = basis.whitney(k, *lam);
                        [wv[1], -wv[0]]
                    })
                    .collect();
                for k in 0..3 {
                    for l in 0..3 {
                        m[k][l] += s * dot2(vals[k], mat2_vec(&ainv, vals[l]));
                    }
                }
            }
        }
        Form::N0Mass(eps) => {
            let basis = EdgeBasis::on(mesh, geo, tri);
            dofs = basis.dof;
            let e = eps.get(region)?;
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let s = 2.0 * area * w;
                let vals: Vec<[f64; 2]> = (0..3).map(|k| basis.whitney(k, *lam)).collect();
                for k in 0..3 {
                    for l in 0..3 {
                        m[k][l] += s * dot2(vals[k], mat2_vec(e, vals[l]));
                    }
                }
            }
        }
        Form::Rt0DivDiv(rho) => {
            let basis = EdgeBasis::on(mesh, geo, tri);
            dofs = basis.dof;
            let r = *rho.get(region)?;
            for k in 0..3 {
                for l in 0..3 {
                    m[k][l] = area * basis.rot[k] * basis.rot[l] / r;
                }
            }
        }
        Form::N0CurlCurl(mu) => {
            let basis = EdgeBasis::on(mesh, geo, tri);
            dofs = basis.dof;
            let mu = *mu.get(region)?;
            for k in 0..3 {
                for l in 0..3 {
                    m[k][l] = area * basis.rot[k] * basis.rot[l] / mu;
                }
            }
        }
    }
    Ok((dofs, m))
}

/// Linear forms; sources are analytic region-aware callables.
pub enum LoadForm<'a> {
    /// f v on P1.
    P1Source(&'a ScalarField),
    /// -rho^{-1} f div q on RT0.
    Rt0DivSource { f: &'a ScalarField, rho: &'a RegionValue<f64> },
    /// J . F on N0.
    N0Source(&'a VectorField),
    /// J . eps^{-1} cograd v on P1.
    P1CoGradSource { j: &'a VectorField, eps: &'a RegionValue<Mat2> },
}

fn load_space_kind(load: &LoadForm) -> SpaceKind {
    match load {
        LoadForm::P1Source(_) | LoadForm::P1CoGradSource { .. } => SpaceKind::NodalP1,
        LoadForm::Rt0DivSource { .. } => SpaceKind::EdgeRt0,
        LoadForm::N0Source(_) => SpaceKind::EdgeN0,
    }
}

/// Assembles the load vector of `load` by quadrature.
pub fn assemble_load(
    space: &FeSpace,
    load: &LoadForm,
    geo: &Geometry,
    rule: &TriQuadrature,
) -> Result<Vec<f64>, FemError> {
    if space.kind() != load_space_kind(load) {
        return Err(FemError::SpaceMismatch("load does not match space kind".into()));
    }
    let mesh = space.mesh();
    let locals: Vec<Result<([usize; 3], [f64; 3]), FemError>> =
        map_elements(mesh.n_triangles(), |t| element_load(space, load, geo, rule, t));
    let mut b = vec![0.0; space.dof_count()];
    for local in locals {
        let (dofs, v) = local?;
        for k in 0..3 {
            b[dofs[k]] += v[k];
        }
    }
    Ok(b)
}

fn physical_point(mesh: &Mesh, tri: usize, lam: [f64; 3]) -> [f64; 2] {
    let t = mesh.triangles()[tri];
    let vs = t.map(|v| mesh.vertices()[v]);
    [
        lam[0] * vs[0][0] + lam[1] * vs[1][0] + lam[2] * vs[2][0],
        lam[0] * vs[0][1] + lam[1] * vs[1][1] + lam[2] * vs[2][1],
    ]
}

fn element_load(
    space: &FeSpace,
    load: &LoadForm,
    geo: &Geometry,
    rule: &TriQuadrature,
    tri: usize,
) -> Result<([usize; 3], [f64; 3]), FemError> {
    let mesh = space.mesh();
    let region = mesh.regions()[tri];
    let area = geo.areas[tri];
    let mut b = [0.0; 3];
    let dofs: [usize; 3];
    let check = |v: f64, x: [f64; 2]| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FemError::NonFiniteSource { tri, x: x[0], y: x[1] })
        }
    };
    match load {
        LoadForm::P1Source(f) => {
            dofs = mesh.triangles()[tri];
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let x = physical_point(mesh, tri, *lam);
                let fv = check(f.eval(region, x), x)?;
                let s = 2.0 * area * w * fv;
                for k in 0..3 {
                    b[k] += s * lam[k];
                }
            }
        }
        LoadForm::Rt0DivSource { f, rho } => {
            let basis = EdgeBasis::on(mesh, geo, tri);
            dofs = basis.dof;
            let r = *rho.get(region)?;
            let mut favg = 0.0;
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let x = physical_point(mesh, tri, *lam);
                favg += 2.0 * area * w * check(f.eval(region, x), x)?;
            }
            for k in 0..3 {
                b[k] = -favg * basis.rot[k] / r;
            }
        }
        LoadForm::N0Source(j) => {
            let basis = EdgeBasis::on(mesh, geo, tri);
            dofs = basis.dof;
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let x = physical_point(mesh, tri, *lam);
                let jv = j.eval(region, x);
                check(jv[0], x)?;
                check(jv[1], x)?;
                let s = 2.0 * area * w;
                for k in 0..3 {
                    b[k] += s * dot2(jv, basis.whitney(k, *lam));
                }
            }
        }
        LoadForm::P1CoGradSource { j, eps } => {
            dofs = mesh.triangles()[tri];
            let einv = mat2_inv(eps.get(region)?)?;
            let grads = &geo.bary_grads[tri];
            let mut jint = [0.0; 2];
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let x = physical_point(mesh, tri, *lam);
                let jv = j.eval(region, x);
                check(jv[0], x)?;
                check(jv[1], x)?;
                let s = 2.0 * area * w;
                jint[0] += s * jv[0];
                jint[1] += s * jv[1];
            }
            for k in 0..3 {
                let cg = [grads[k][1], -grads[k][0]];
                b[k] = dot2(jint, mat2_vec(&einv, cg));
            }
        }
    }
    Ok((dofs, b))
}

// ----- essential boundary conditions -----------------------------------------

/// Values prescribed on essential dofs.
pub enum EssentialTrace<'a> {
    Zero,
    /// P1 vertex values from an analytic trace, exact only for traces the
    /// space can represent.
    Scalar(&'a ScalarField),
    /// Edge moments (normal flux for RT0, tangential circulation for N0).
    Flux(&'a VectorField),
}

/// Symmetric elimination of essential dofs. `reduced` is the free-free block
/// with the constrained columns moved to the right-hand side.
pub struct ConstrainedSystem {
    pub reduced: CsrMatrix,
    pub rhs: Vec<f64>,
    pub free: Vec<usize>,
    pub essential_values: Vec<f64>,
}

impl ConstrainedSystem {
    /// Full coefficient vector from the reduced solution.
    pub fn scatter(&self, reduced_solution: &[f64]) -> Vec<f64> {
        let mut full = self.essential_values.clone();
        for (k, &dof) in self.free.iter().enumerate() {
            full[dof] = reduced_solution[k];
        }
        full
    }
}

/// Evaluates the prescribed values on the essential dofs of `space`.
pub fn essential_values(space: &FeSpace, trace: &EssentialTrace) -> Result<Vec<f64>, FemError> {
    let mesh = space.mesh();
    let mut values = vec![0.0; space.dof_count()];
    match (space.kind(), trace) {
        (_, EssentialTrace::Zero) => {}
        (SpaceKind::NodalP1, EssentialTrace::Scalar(field)) => {
            // region of the first incident triangle, deterministically
            let mut vertex_region: Vec<Option<u32>> = vec![None; mesh.n_vertices()];
            for (t, tri) in mesh.triangles().iter().enumerate() {
                for &v in tri {
                    if vertex_region[v].is_none() {
                        vertex_region[v] = Some(mesh.regions()[t]);
                    }
                }
            }
            for (v, mask) in space.essential().iter().enumerate() {
                if *mask {
                    let region = vertex_region[v].expect("vertex belongs to a triangle");
                    values[v] = field.eval(region, mesh.vertices()[v]);
                }
            }
        }
        (SpaceKind::EdgeRt0 | SpaceKind::EdgeN0, EssentialTrace::Flux(field)) => {
            // essential edges are boundary edges; their region comes from the
            // unique adjacent triangle
            let mut edge_region: Vec<Option<u32>> = vec![None; mesh.n_edges()];
            for (t, te) in mesh.tri_edges().iter().enumerate() {
                for &(e, _) in te {
                    edge_region[e] = edge_region[e].or(Some(mesh.regions()[t]));
                }
            }
            let tangential = space.kind() == SpaceKind::EdgeN0;
            for (e, mask) in space.essential().iter().enumerate() {
                if *mask {
                    let region = edge_region[e].expect("edge belongs to a triangle");
                    values[e] = edge_moment(mesh, e, region, field, tangential);
                }
            }
        }
        _ => {
            return Err(FemError::TraceKind(
                "scalar traces go with P1, flux moments with RT0/N0".into(),
            ))
        }
    }
    Ok(values)
}

/// Edge dof functional of an analytic field by 2-point Gauss, exact for the
/// linear traces lowest-order spaces reproduce.
fn edge_moment(mesh: &Mesh, edge: usize, region: u32, field: &VectorField, tangential: bool) -> f64 {
    let [lo, hi] = mesh.edges()[edge];
    let (a, b) = (mesh.vertices()[lo], mesh.vertices()[hi]);
    let d = [b[0] - a[0], b[1] - a[1]];
    let (gp, gw) = gauss_legendre_unit(2);
    let mut m = 0.0;
    for (&s, &w) in gp.iter().zip(&gw) {
        let x = [a[0] + s * d[0], a[1] + s * d[1]];
        let v = field.eval(region, x);
        // d carries the edge length; moments are length-scaled line integrals
        m += w * if tangential { v[0] * d[0] + v[1] * d[1] } else { v[0] * d[1] - v[1] * d[0] };
    }
    m
}

/// Eliminates the essential dofs of `space` from `matrix` and `rhs`.
pub fn apply_essential(
    space: &FeSpace,
    matrix: &CsrMatrix,
    rhs: &[f64],
    trace: &EssentialTrace,
) -> Result<ConstrainedSystem, FemError> {
    let n = space.dof_count();
    if matrix.n_rows() != n || matrix.n_cols() != n || rhs.len() != n {
        return Err(FemError::SpaceMismatch("system size does not match space".into()));
    }
    let essential_values = essential_values(space, trace)?;
    let mask = space.essential();
    let free: Vec<usize> = (0..n).filter(|&d| !mask[d]).collect();
    let mut renum = vec![usize::MAX; n];
    for (k, &d) in free.iter().enumerate() {
        renum[d] = k;
    }
    let mut triplets = Vec::new();
    let mut reduced_rhs = Vec::with_capacity(free.len());
    for &i in &free {
        let mut r = rhs[i];
        for (j, v) in matrix.row(i) {
            if mask[j] {
                r -= v * essential_values[j];
            } else {
                triplets.push((renum[i], renum[j], v));
            }
        }
        reduced_rhs.push(r);
    }
    Ok(ConstrainedSystem {
        reduced: CsrMatrix::from_triplets(free.len(), free.len(), &triplets)?,
        rhs: reduced_rhs,
        free,
        essential_values,
    })
}

// ----- canonical interpolation -----------------------------------------------

const DOF_CONTINUITY_TOL: f64 = 1e-12;

/// P1 interpolation by vertex values; the field must be single-valued at
/// every vertex across the regions of its incident triangles.
pub fn interpolate_scalar(space: &FeSpace, field: &ScalarField) -> Result<FeFunction, FemError> {
    if space.kind() != SpaceKind::NodalP1 {
        return Err(FemError::SpaceMismatch("interpolate_scalar needs NodalP1".into()));
    }
    let mesh = space.mesh();
    let mut values = vec![f64::NAN; mesh.n_vertices()];
    let mut scale = vec![0.0f64; mesh.n_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let region = mesh.regions()[t];
        for &v in tri {
            let x = field.eval(region, mesh.vertices()[v]);
            if values[v].is_nan() {
                values[v] = x;
            } else {
                let spread = (values[v] - x).abs();
                scale[v] = scale[v].max(values[v].abs()).max(x.abs());
                if spread > DOF_CONTINUITY_TOL * scale[v].max(1.0) {
                    return Err(FemError::DiscontinuousAtDof { what: "vertex", index: v, spread });
                }
            }
        }
    }
    FeFunction::from_coefficients(space.clone(), values)
}

/// RT0 (normal moments) or N0 (tangential moments) interpolation. On interior
/// edges the moment is computed from both sides and must agree.
pub fn interpolate_vector(space: &FeSpace, field: &VectorField) -> Result<FeFunction, FemError> {
    let tangential = match space.kind() {
        SpaceKind::EdgeN0 => true,
        SpaceKind::EdgeRt0 => false,
        SpaceKind::NodalP1 => {
            return Err(FemError::SpaceMismatch("interpolate_vector needs an edge space".into()))
        }
    };
    let mesh = space.mesh();
    let mut values = vec![f64::NAN; mesh.n_edges()];
    for (t, te) in mesh.tri_edges().iter().enumerate() {
        let region = mesh.regions()[t];
        for &(e, _) in te {
            let m = edge_moment(mesh, e, region, field, tangential);
            if values[e].is_nan() {
                values[e] = m;
            } else {
                let spread = (values[e] - m).abs();
                if spread > DOF_CONTINUITY_TOL * values[e].abs().max(m.abs()).max(1.0) {
                    return Err(FemError::DiscontinuousAtDof { what: "edge", index: e, spread });
                }
            }
        }
    }
    FeFunction::from_coefficients(space.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BoundaryTag, Diagonal};
    use crate::sparse::{pairwise_sum, solve_spd, SolveMethod};

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(
            Mesh::rect_structured(n, n, Diagonal::Main, |_| 0, |_| BoundaryTag::dirichlet(0))
                .unwrap(),
        )
    }

    fn unit_triangle_mesh() -> Arc<Mesh> {
        // single right triangle (0,0), (1,0), (0,1)
        Arc::new(
            Mesh::from_text(
                "VERTICES 3\n0 0\n1 0\n0 1\nTRIANGLES 1\n0 1 2 0\nBOUNDARY 3\n0 1 neumann 0\n1 2 neumann 0\n0 2 neumann 0\n",
            )
            .unwrap(),
        )
    }

    #[test]
    fn p1_mass_on_unit_triangle_matches_analytic() {
        let mesh = unit_triangle_mesh();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[]);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let rho = RegionValue::Uniform(1.0);
        let m = assemble(&space, &Form::P1Mass(&rho), &geo, &rule).unwrap().to_dense();
        for k in 0..3 {
            for l in 0..3 {
                let exact = if k == l { 2.0 } else { 1.0 } / 24.0;
                assert!((m[k][l] - exact).abs() < 1e-15, "({k},{l}): {}", m[k][l]);
            }
        }
    }

    #[test]
    fn p1_stiffness_rows_sum_to_zero() {
        let mesh = square(4);
        let space = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[]);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let alpha = RegionValue::Uniform([[2.0, 0.5], [0.5, 3.0]]);
        let k = assemble(&space, &Form::P1Stiffness(&alpha), &geo, &rule).unwrap();
        for i in 0..k.n_rows() {
            let s: f64 = k.row(i).map(|(_, v)| v).sum();
            assert!(s.abs() < 1e-13, "row {i} sums to {s}");
        }
    }

    #[test]
    fn assembled_matrices_symmetric() {
        let mesh = square(3);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let alpha = RegionValue::Uniform([[1.0, 0.2], [0.2, 5.0]]);
        let rho = RegionValue::Uniform(2.5);
        let p1 = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[]);
        let rt = FeSpace::new(SpaceKind::EdgeRt0, mesh.clone(), &[]);
        let n0 = FeSpace::new(SpaceKind::EdgeN0, mesh.clone(), &[]);
        let forms: Vec<(&FeSpace, Form)> = vec![
            (&p1, Form::P1Stiffness(&alpha)),
            (&p1, Form::P1Mass(&rho)),
            (&p1, Form::P1CoGradStiffness(&alpha)),
            (&rt, Form::Rt0Mass(&alpha)),
            (&rt, Form::Rt0DivDiv(&rho)),
            (&n0, Form::N0Mass(&alpha)),
            (&n0, Form::N0CurlCurl(&rho)),
        ];
        for (space, form) in forms {
            let m = assemble(space, &form, &geo, &rule).unwrap();
            assert!(m.relative_asymmetry() <= 1e-13);
        }
    }

    #[test]
    fn non_spd_coefficient_rejected() {
        let mesh = square(2);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(2).unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh, &[]);
        let bad = RegionValue::Uniform([[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(
            assemble(&space, &Form::P1Stiffness(&bad), &geo, &rule),
            Err(FemError::BadCoefficient(_))
        ));
        let negative = RegionValue::Uniform(-1.0);
        assert!(assemble(&space, &Form::P1Mass(&negative), &geo, &rule).is_err());
    }

    #[test]
    fn load_zero_source_is_zero() {
        let mesh = square(2);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh, &[]);
        let f = ScalarField::constant(0.0);
        let b = assemble_load(&space, &LoadForm::P1Source(&f), &geo, &rule).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn p1_unit_load_on_unit_triangle() {
        let mesh = unit_triangle_mesh();
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh, &[]);
        let f = ScalarField::constant(1.0);
        let b = assemble_load(&space, &LoadForm::P1Source(&f), &geo, &rule).unwrap();
        for v in b {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn n0_constant_load_matches_hand_integration() {
        // int_T J . W_e for constant J: W_e integrates to (g_hi - g_lo)/3 * |T|
        let mesh = unit_triangle_mesh();
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let space = FeSpace::new(SpaceKind::EdgeN0, mesh.clone(), &[]);
        let j = VectorField::constant([2.0, -1.0]);
        let b = assemble_load(&space, &LoadForm::N0Source(&j), &geo, &rule).unwrap();
        let basis = EdgeBasis::on(&mesh, &geo, 0);
        for k in 0..3 {
            let (il, ih) = basis.pair[k];
            let g = &geo.bary_grads[0];
            let expected = geo.areas[0] / 3.0
                * ((g[ih][0] - g[il][0]) * 2.0 + (g[ih][1] - g[il][1]) * -1.0);
            assert!((b[basis.dof[k]] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn nonfinite_source_reports_location() {
        let mesh = square(2);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(2).unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh, &[]);
        let f = ScalarField::new(|_, x| if x[0] > 0.3 { f64::NAN } else { 1.0 });
        assert!(matches!(
            assemble_load(&space, &LoadForm::P1Source(&f), &geo, &rule),
            Err(FemError::NonFiniteSource { .. })
        ));
    }

    #[test]
    fn partition_of_unity_at_quadrature_points() {
        let rule = TriQuadrature::with_degree(6).unwrap();
        for lam in &rule.points {
            assert!((lam[0] + lam[1] + lam[2] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rt0_divdiv_kernel_dimension() {
        // ker(div) in RT0 has dimension V - 1 on a simply connected mesh
        for n in [1usize, 2] {
            let mesh = square(n);
            let geo = mesh.geometry().unwrap();
            let rule = TriQuadrature::with_degree(2).unwrap();
            let space = FeSpace::new(SpaceKind::EdgeRt0, mesh.clone(), &[]);
            let rho = RegionValue::Uniform(1.0);
            let d = assemble(&space, &Form::Rt0DivDiv(&rho), &geo, &rule).unwrap();
            let rank = dense_rank(&d.to_dense());
            let expected_kernel = mesh.n_vertices() - 1;
            assert_eq!(mesh.n_edges() - rank, expected_kernel, "n={n}");
        }
    }

    fn dense_rank(m: &[Vec<f64>]) -> usize {
        let mut a: Vec<Vec<f64>> = m.to_vec();
        let rows = a.len();
        let cols = a[0].len();
        let mut rank = 0;
        for c in 0..cols {
            let pivot = (rank..rows).max_by(|&i, &j| {
                a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()
            });
            let Some(p) = pivot else { break };
            if a[p][c].abs() < 1e-10 {
                continue;
            }
            a.swap(rank, p);
            let d = a[rank][c];
            for i in 0..rows {
                if i != rank {
                    let f = a[i][c] / d;
                    for k in c..cols {
                        a[i][k] -= f * a[rank][k];
                    }
                }
            }
            rank += 1;
            if rank == rows {
                break;
            }
        }
        rank
    }

    #[test]
    fn essential_elimination_homogeneous_is_interior_block() {
        let mesh = square(3);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[BoundaryKind::Dirichlet]);
        let alpha = RegionValue::Uniform(identity_mat2());
        let k = assemble(&space, &Form::P1Stiffness(&alpha), &geo, &rule).unwrap();
        let rhs = vec![1.0; space.dof_count()];
        let sys = apply_essential(&space, &k, &rhs, &EssentialTrace::Zero).unwrap();
        // 3x3 grid: 4 interior vertices
        assert_eq!(sys.free.len(), 4);
        for (i, &d) in sys.free.iter().enumerate() {
            assert_eq!(sys.rhs[i], rhs[d]);
        }
        // reduced system is SPD
        assert!(solve_spd(&sys.reduced, &sys.rhs, &SolveMethod::Direct).is_ok());
    }

    #[test]
    fn linear_dirichlet_trace_interpolated_exactly() {
        let mesh = square(4);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(4).unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[BoundaryKind::Dirichlet]);
        let alpha = RegionValue::Uniform(identity_mat2());
        let rho = RegionValue::Uniform(1.0);
        let k = assemble(&space, &Form::P1Stiffness(&alpha), &geo, &rule)
            .unwrap()
            .add_scaled(&assemble(&space, &Form::P1Mass(&rho), &geo, &rule).unwrap(), 1.0)
            .unwrap();
        // u = 1 + x solves -div(grad u) + u = 1 + x with its own trace
        let trace = ScalarField::new(|_, x| 1.0 + x[0]);
        let f = ScalarField::new(|_, x| 1.0 + x[0]);
        let b = assemble_load(&space, &LoadForm::P1Source(&f), &geo, &rule).unwrap();
        let sys = apply_essential(&space, &k, &b, &EssentialTrace::Scalar(&trace)).unwrap();
        let xr = solve_spd(&sys.reduced, &sys.rhs, &SolveMethod::Direct).unwrap();
        let u = sys.scatter(&xr);
        for (v, xy) in mesh.vertices().iter().enumerate() {
            assert!((u[v] - (1.0 + xy[0])).abs() < 1e-12, "vertex {v}");
        }
    }

    #[test]
    fn trace_kind_mismatch_rejected() {
        let mesh = square(2);
        let space = FeSpace::new(SpaceKind::EdgeRt0, mesh, &[BoundaryKind::Dirichlet]);
        let f = ScalarField::constant(1.0);
        assert!(matches!(
            essential_values(&space, &EssentialTrace::Scalar(&f)),
            Err(FemError::TraceKind(_))
        ));
    }

    #[test]
    fn p1_linear_reproduction_gradient() {
        let mesh = square(3);
        let geo = mesh.geometry().unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[]);
        let field = ScalarField::new(|_, x| x[0]);
        let u = interpolate_scalar(&space, &field).unwrap();
        for t in 0..mesh.n_triangles() {
            let g = u.grad_p1(&geo, t);
            assert!((g[0] - 1.0).abs() < 1e-14 && g[1].abs() < 1e-14);
            let cg = u.cograd_p1(&geo, t);
            assert!(cg[0].abs() < 1e-14 && (cg[1] + 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rt0_interpolates_constant_field_exactly() {
        let mesh = square(2);
        let geo = mesh.geometry().unwrap();
        let space = FeSpace::new(SpaceKind::EdgeRt0, mesh.clone(), &[]);
        let v = [0.7, -0.3];
        let p = interpolate_vector(&space, &VectorField::constant(v)).unwrap();
        let rule = TriQuadrature::with_degree(3).unwrap();
        for t in 0..mesh.n_triangles() {
            assert!(p.div_rt0(&geo, t).abs() < 1e-13);
            for lam in &rule.points {
                let val = p.value_edge(&geo, t, *lam);
                assert!((val[0] - v[0]).abs() < 1e-13 && (val[1] - v[1]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn n0_interpolates_linear_field_exactly() {
        // N0 contains [a - c x2, b + c x1]; pick one and check reproduction
        let mesh = square(3);
        let geo = mesh.geometry().unwrap();
        let space = FeSpace::new(SpaceKind::EdgeN0, mesh.clone(), &[]);
        let field = VectorField::new(|_, x| [0.3 - 2.0 * x[1], -0.1 + 2.0 * x[0]]);
        let e = interpolate_vector(&space, &field).unwrap();
        let rule = TriQuadrature::with_degree(3).unwrap();
        for t in 0..mesh.n_triangles() {
            assert!((e.rot_n0(&geo, t) - 4.0).abs() < 1e-12);
            for lam in &rule.points {
                let x = physical_point(&mesh, t, *lam);
                let got = e.value_edge(&geo, t, *lam);
                let want = field.eval(0, x);
                assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_rejects_normally_discontinuous_field_in_rt0() {
        // regions split along x1 = x2; the field jumps with the region, so its
        // normal component is two-valued on the diagonal edges
        let mesh = Arc::new(
            Mesh::rect_structured(
                2,
                2,
                Diagonal::Main,
                |c| if c[0] > c[1] { 1 } else { 2 },
                |_| BoundaryTag::neumann(0),
            )
            .unwrap(),
        );
        let rt = FeSpace::new(SpaceKind::EdgeRt0, mesh.clone(), &[]);
        let field = VectorField::new(|r, _| if r == 1 { [1.0, 0.0] } else { [0.0, 0.0] });
        assert!(matches!(
            interpolate_vector(&rt, &field),
            Err(FemError::DiscontinuousAtDof { .. })
        ));
        // a jump parallel to the diagonal normal is tangentially single-valued,
        // so N0 interpolation of the same kind of field is well defined
        let n0 = FeSpace::new(SpaceKind::EdgeN0, mesh, &[]);
        let normal_jump = VectorField::new(|r, _| if r == 1 { [1.0, -1.0] } else { [0.0, 0.0] });
        assert!(interpolate_vector(&n0, &normal_jump).is_ok());
    }

    #[test]
    fn discrete_integration_by_parts_p1_rt0() {
        // <grad u, q> + <u, div q> = 0 for u in P1 with zero trace, q in RT0
        let mesh = square(4);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(2).unwrap();
        let p1 = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[BoundaryKind::Dirichlet]);
        let rt = FeSpace::new(SpaceKind::EdgeRt0, mesh.clone(), &[]);
        let mut u = FeFunction::zeros(p1.clone());
        for (v, mask) in p1.essential().iter().enumerate() {
            if !mask {
                let xy = mesh.vertices()[v];
                u.coefficients[v] = (xy[0] * 7.0).sin() + xy[1];
            }
        }
        let q = interpolate_vector(&rt, &VectorField::new(|_, x| [x[0] * x[1], x[1] - 0.3]))
            .unwrap();
        let mut terms = Vec::new();
        for t in 0..mesh.n_triangles() {
            let area = geo.areas[t];
            let gu = u.grad_p1(&geo, t);
            let dq = q.div_rt0(&geo, t);
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let qv = q.value_edge(&geo, t, *lam);
                let uv = u.value_p1(t, *lam);
                terms.push(2.0 * area * w * (dot2(gu, qv) + uv * dq));
            }
        }
        assert!(pairwise_sum(&terms).abs() < 1e-12);
    }

    #[test]
    fn discrete_integration_by_parts_n0_p1() {
        // <rot F, v> = <F, cograd v> for F in N0 with zero tangential trace
        let mesh = square(4);
        let geo = mesh.geometry().unwrap();
        let rule = TriQuadrature::with_degree(2).unwrap();
        let n0 = FeSpace::new(SpaceKind::EdgeN0, mesh.clone(), &[BoundaryKind::Dirichlet]);
        let p1 = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[]);
        let mut f = FeFunction::zeros(n0.clone());
        for (e, mask) in n0.essential().iter().enumerate() {
            if !mask {
                f.coefficients[e] = ((e * 37 % 11) as f64 - 5.0) / 7.0;
            }
        }
        let v = interpolate_scalar(&p1, &ScalarField::new(|_, x| x[0] * x[0] - x[1])).unwrap();
        let mut terms = Vec::new();
        for t in 0..mesh.n_triangles() {
            let area = geo.areas[t];
            let rot = f.rot_n0(&geo, t);
            let cg = v.cograd_p1(&geo, t);
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let fv = f.value_edge(&geo, t, *lam);
                let vv = v.value_p1(t, *lam);
                terms.push(2.0 * area * w * (rot * vv - dot2(fv, cg)));
            }
        }
        assert!(pairwise_sum(&terms).abs() < 1e-12);
    }

    #[test]
    fn p1_vector_divergence() {
        let mesh = square(2);
        let geo = mesh.geometry().unwrap();
        let space = FeSpace::new(SpaceKind::NodalP1, mesh.clone(), &[]);
        let x: Vec<f64> = mesh.vertices().iter().map(|v| 2.0 * v[0]).collect();
        let y: Vec<f64> = mesh.vertices().iter().map(|v| -3.0 * v[1]).collect();
        let pv = P1VectorFunction::new(space, x, y).unwrap();
        for t in 0..mesh.n_triangles() {
            assert!((pv.div(&geo, t) + 1.0).abs() < 1e-13);
        }
    }
}
