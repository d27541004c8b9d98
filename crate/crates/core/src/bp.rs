//! The five benchmark problems: scalar and vector mass and Laplace operators
//! on the unit cube with a manufactured right-hand side and homogeneous
//! Dirichlet data.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::dofs::{batch_size, distribute_dofs_in_order, make_batches, renumber_optimized, NumberingKind, Traversal};
use crate::error::{invalid, Error, Result};
use crate::mesh::{build_cartesian_mesh, deform_mesh, GeometryVariant, HexMesh, Point};
use crate::operator::{compute_diagonal, DiagonalPreconditioner, Equation, MatrixFreeOperator, OperatorSpec};
use crate::tensor::{gauss_quadrature, lagrange_basis, QuadratureKind, SumFactorization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BpId {
    Bp1,
    Bp2,
    Bp3,
    Bp4,
    Bp5,
}

impl BpId {
    pub const ALL: [BpId; 5] = [BpId::Bp1, BpId::Bp2, BpId::Bp3, BpId::Bp4, BpId::Bp5];

    pub fn name(self) -> &'static str {
        match self {
            BpId::Bp1 => "bp1",
            BpId::Bp2 => "bp2",
            BpId::Bp3 => "bp3",
            BpId::Bp4 => "bp4",
            BpId::Bp5 => "bp5",
        }
    }

    pub fn components(self) -> usize {
        match self {
            BpId::Bp2 | BpId::Bp4 => 3,
            _ => 1,
        }
    }

    pub fn equation(self) -> Equation {
        match self {
            BpId::Bp1 | BpId::Bp2 => Equation::Mass,
            _ => Equation::Laplace,
        }
    }

    /// Operator of degree `p`: Gauss with `p+2` points, except BP5 which
    /// collocates on `p+1` Gauss–Lobatto points.
    pub fn spec(self, degree: usize, geometry: GeometryVariant) -> OperatorSpec {
        let mut spec = OperatorSpec::new(self.equation(), self.components(), degree, geometry);
        if self == BpId::Bp5 {
            spec.n_q_1d = degree + 1;
            spec.quadrature = QuadratureKind::GaussLobatto;
        }
        spec
    }
}

impl fmt::Display for BpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BpId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BpId::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown benchmark problem '{s}' (expected bp1..bp5)")))
    }
}

/// Everything needed to build one benchmark problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub bp: BpId,
    pub degree: usize,
    pub cells: [usize; 3],
    pub geometry: GeometryVariant,
    pub deformation: f64,
    pub numbering: NumberingKind,
    pub traversal: Traversal,
    pub simd_lanes: usize,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            bp: BpId::Bp5,
            degree: 3,
            cells: [4, 4, 4],
            geometry: GeometryVariant::Affine,
            deformation: 0.0,
            numbering: NumberingKind::Optimized,
            traversal: Traversal::Morton,
            simd_lanes: 8,
        }
    }
}

pub struct Problem {
    pub config: ProblemConfig,
    pub mesh: HexMesh,
    pub operator: MatrixFreeOperator,
    pub rhs: Vec<f64>,
    pub preconditioner: DiagonalPreconditioner,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem").field("config", &self.config).field("n_dofs", &self.n_dofs()).finish()
    }
}

impl Problem {
    pub fn n_dofs(&self) -> usize {
        self.rhs.len()
    }
}

/// `u = sin(pi x) sin(pi y) sin(pi z)`, zero on the unit cube boundary.
pub fn manufactured_solution(x: Point) -> f64 {
    x.iter().map(|&xi| (PI * xi).sin()).product()
}

/// Forcing that makes [`manufactured_solution`] exact for `equation`.
pub fn manufactured_forcing(equation: Equation, x: Point) -> f64 {
    let u = manufactured_solution(x);
    let mass = if equation.has_mass() { u } else { 0.0 };
    mass + equation.laplace_scaling().map_or(0.0, |s| s * 3.0 * PI * PI * u)
}

/// Refuses problems beyond `limit` unknowns before allocating them.
pub fn check_size(config: &ProblemConfig, limit: usize) -> Result<usize> {
    let [a, b, c] = config.cells;
    let n = (a * config.degree + 1) * (b * config.degree + 1) * (c * config.degree + 1) * config.bp.components();
    if n > limit {
        return Err(Error::SizeTooLarge { what: "degrees of freedom", size: n, limit });
    }
    Ok(n)
}

pub fn build_problem(config: &ProblemConfig) -> Result<Problem> {
    let spec = config.bp.spec(config.degree, config.geometry);
    spec.validate()?;
    let mut mesh = build_cartesian_mesh(config.cells, [1.0; 3])?;
    if config.deformation != 0.0 {
        mesh = deform_mesh(&mesh, config.deformation)?;
    }
    let bs = batch_size(config.degree, spec.components, config.simd_lanes)?;
    let plan = make_batches(&mesh, bs, config.traversal)?;
    let mut handler = distribute_dofs_in_order(&mesh, config.degree, spec.components, &plan.cell_order())?.with_boundary_constraints();
    if config.numbering == NumberingKind::Optimized {
        handler = renumber_optimized(&handler, &plan)?;
    }
    let preconditioner = compute_diagonal(&spec, &mesh, &handler)?;
    let rhs = assemble_rhs(&spec, &mesh, &handler)?;
    let operator = MatrixFreeOperator::new(spec, &mesh, handler, plan)?;
    Ok(Problem { config: config.clone(), mesh, operator, rhs, preconditioner })
}

/// `b_i = (f, phi_i)` with `p+2` Gauss points per direction on the physical
/// cell; constrained entries hold the boundary value 0.
pub fn assemble_rhs(spec: &OperatorSpec, mesh: &HexMesh, handler: &crate::dofs::DofHandler) -> Result<Vec<f64>> {
    let quad = gauss_quadrature(spec.degree + 2)?;
    let basis = lagrange_basis(spec.degree, &quad)?;
    let mut sf = SumFactorization::new(&basis);
    let nq = quad.len();
    let nq3 = nq * nq * nq;
    let n3 = (spec.degree + 1).pow(3);
    let c = handler.components;
    let mut rhs = vec![0.0; handler.n_dofs];
    let mut qv = vec![0.0; nq3];
    let mut local = vec![0.0; n3];
    for cell in 0..mesh.n_cells() {
        let map = mesh.cell_map(cell)?;
        let (jxw, _) = crate::operator::pointwise_metric(mesh, cell, &quad)?;
        for q in 0..nq3 {
            let xhat = [quad.points[q % nq], quad.points[(q / nq) % nq], quad.points[q / (nq * nq)]];
            qv[q] = manufactured_forcing(spec.equation, map.position(xhat)) * jxw[q];
        }
        sf.integrate_values(&basis, &qv, &mut local);
        let idx = handler.expand_cell_indices(cell)?;
        for comp in 0..c {
            for l in 0..n3 {
                rhs[idx[comp * n3 + l]] += local[l];
            }
        }
    }
    for &i in &handler.constrained_dofs {
        rhs[i] = 0.0;
    }
    Ok(rhs)
}

/// Nodal interpolant of the manufactured solution, one value per DoF.
pub fn interpolate_solution(mesh: &HexMesh, handler: &crate::dofs::DofHandler) -> Result<Vec<f64>> {
    let p = handler.degree;
    let gl = crate::tensor::gauss_lobatto_quadrature(p + 1)?;
    let n = p + 1;
    let mut u = vec![0.0; handler.n_dofs];
    for cell in 0..mesh.n_cells() {
        let map = mesh.cell_map(cell)?;
        let idx = handler.expand_cell_indices(cell)?;
        let n3 = n * n * n;
        for l in 0..n3 {
            let xhat = [gl.points[l % n], gl.points[(l / n) % n], gl.points[l / (n * n)]];
            let v = manufactured_solution(map.position(xhat));
            for comp in 0..handler.components {
                u[idx[comp * n3 + l]] = v;
            }
        }
    }
    Ok(u)
}
