//! Matrix-free mass and Laplace operators evaluated cell batch by cell batch,
//! with range callbacks interleaved into the cell loop, plus the diagonal
//! preconditioner and assembled reference matrices.

use std::cell::RefCell;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::dofs::{compute_range_schedule, BatchPlan, DofHandler, RangeSchedule, RANGE_SIZE};
use crate::error::{invalid, Error, Result};
use crate::mesh::{final_tensor, geometry_data, inverse3, GeometryData, GeometryVariant, HexMesh, Mat3};
use crate::tensor::{
    apply_1d, gauss_lobatto_quadrature, lagrange_basis, CellTensor, Matrix1D, QuadratureKind, QuadratureRule1D, SumFactorization,
    TensorBasis1D,
};
use crate::trace::{AccessKind, RegionTag, SharedRecorder};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Equation {
    Mass,
    Laplace,
    /// `M + scaling * L`.
    MassPlusLaplace {
        scaling: f64,
    },
}

impl Equation {
    pub fn has_mass(self) -> bool {
        !matches!(self, Equation::Laplace)
    }

    pub fn laplace_scaling(self) -> Option<f64> {
        match self {
            Equation::Mass => None,
            Equation::Laplace => Some(1.0),
            Equation::MassPlusLaplace { scaling } => Some(scaling),
        }
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Equation::Mass => f.write_str("mass"),
            Equation::Laplace => f.write_str("laplace"),
            Equation::MassPlusLaplace { scaling } => write!(f, "mass_plus_laplace:{scaling:?}"),
        }
    }
}

impl FromStr for Equation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mass" => Ok(Equation::Mass),
            "laplace" => Ok(Equation::Laplace),
            _ => {
                let scaling = s
                    .strip_prefix("mass_plus_laplace:")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| invalid(format!("unknown equation '{s}'")))?;
                Ok(Equation::MassPlusLaplace { scaling })
            }
        }
    }
}

/// What operator to evaluate and how.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorSpec {
    pub equation: Equation,
    pub components: usize,
    pub degree: usize,
    pub n_q_1d: usize,
    pub geometry: GeometryVariant,
    pub quadrature: QuadratureKind,
}

impl OperatorSpec {
    pub fn new(equation: Equation, components: usize, degree: usize, geometry: GeometryVariant) -> Self {
        Self { equation, components, degree, n_q_1d: degree + 2, geometry, quadrature: QuadratureKind::Gauss }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.degree > 12 {
            return Err(invalid(format!("degree must be in 1..=12, got {}", self.degree)));
        }
        if self.components != 1 && self.components != 3 {
            return Err(invalid(format!("components must be 1 or 3, got {}", self.components)));
        }
        if self.n_q_1d < self.degree + 1 || self.n_q_1d > 16 {
            return Err(invalid(format!("n_q_1d = {} must be in {}..=16", self.n_q_1d, self.degree + 1)));
        }
        if self.quadrature == QuadratureKind::GaussLobatto && self.n_q_1d != self.degree + 1 {
            return Err(invalid("Gauss-Lobatto quadrature requires n_q_1d = degree + 1"));
        }
        if let Equation::MassPlusLaplace { scaling } = self.equation {
            if !scaling.is_finite() {
                return Err(invalid("Laplace scaling must be finite"));
            }
        }
        Ok(())
    }

    pub fn quadrature_rule(&self) -> Result<QuadratureRule1D> {
        self.quadrature.rule(self.n_q_1d)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "equation = {}\ncomponents = {}\ndegree = {}\nn_q_1d = {}\ngeometry = {}\nquadrature = {}\n",
            self.equation, self.components, self.degree, self.n_q_1d, self.geometry, self.quadrature
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = OperatorSpec::new(Equation::Laplace, 1, 1, GeometryVariant::Affine);
        let mut n_q = None;
        let num = |v: &str| v.parse::<usize>().map_err(|_| invalid(format!("bad integer '{v}'")));
        for line in text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("expected 'key = value', got '{line}'")))?;
            let v = v.trim();
            match k.trim() {
                "equation" => spec.equation = v.parse()?,
                "components" => spec.components = num(v)?,
                "degree" => spec.degree = num(v)?,
                "n_q_1d" => n_q = Some(num(v)?),
                "geometry" => spec.geometry = v.parse()?,
                "quadrature" => spec.quadrature = v.parse()?,
                other => return Err(invalid(format!("unknown operator key '{other}'"))),
            }
        }
        spec.n_q_1d = n_q.unwrap_or(spec.degree + 2);
        spec.validate()?;
        Ok(spec)
    }
}

/// `dst = A src` on plain slices.
pub trait LinearOperator {
    fn n(&self) -> usize;
    fn apply(&self, src: &[f64], dst: &mut [f64]) -> Result<()>;
}

/// Range callback run before a range of `src` is first read. Receives the
/// range, `src` (mutable) and `dst` (still holding its previous contents).
pub type PreCallback<'a> = dyn FnMut(Range<usize>, &mut [f64], &[f64]) + 'a;
/// Range callback run once a range of `dst` is final.
pub type PostCallback<'a> = dyn FnMut(Range<usize>, &[f64], &[f64]) + 'a;

/// Operator evaluation with vector work interleaved on 64-entry ranges.
/// The result must equal running `pre` on all ranges in order, then
/// `dst = A src`, then `post` on all ranges in order.
pub trait FusedOperator: LinearOperator {
    fn apply_fused(&self, src: &mut [f64], dst: &mut [f64], pre: &mut PreCallback<'_>, post: &mut PostCallback<'_>) -> Result<()>;
}

fn check_len(n: usize, src: &[f64], dst: &[f64]) -> Result<()> {
    if src.len() != n || dst.len() != n {
        return Err(invalid(format!("vector lengths {} and {} do not match operator size {n}", src.len(), dst.len())));
    }
    Ok(())
}

/// The three-phase reference execution of [`FusedOperator::apply_fused`].
pub fn apply_fused_sequential<O: LinearOperator + ?Sized>(
    op: &O,
    src: &mut [f64],
    dst: &mut [f64],
    pre: &mut PreCallback<'_>,
    post: &mut PostCallback<'_>,
) -> Result<()> {
    let n = op.n();
    check_len(n, src, dst)?;
    let ranges = || (0..n.div_ceil(RANGE_SIZE)).map(|r| r * RANGE_SIZE..((r + 1) * RANGE_SIZE).min(n));
    for r in ranges() {
        pre(r, src, dst);
    }
    op.apply(src, dst)?;
    for r in ranges() {
        post(r, src, dst);
    }
    Ok(())
}

struct Scratch {
    sf: SumFactorization,
    geo_sf: Option<SumFactorization>,
    u: Vec<f64>,
    out: Vec<f64>,
    tmp: Vec<f64>,
    qv: Vec<f64>,
    grad: Vec<f64>,
    jxw: Vec<f64>,
    g: Vec<[f64; 6]>,
    coords: Vec<f64>,
    jac: Vec<f64>,
    idx: Vec<usize>,
}

/// Cell-loop operator on a structured mesh.
pub struct MatrixFreeOperator {
    spec: OperatorSpec,
    handler: DofHandler,
    plan: BatchPlan,
    schedule: RangeSchedule,
    basis: TensorBasis1D,
    geo_basis: Option<TensorBasis1D>,
    geometry: Vec<GeometryData>,
    weights: Vec<f64>,
    batch_ranges: Vec<Vec<u32>>,
    scratch: RefCell<Scratch>,
    recorder: RefCell<Option<SharedRecorder>>,
}

impl fmt::Debug for MatrixFreeOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatrixFreeOperator")
            .field("spec", &self.spec)
            .field("n_dofs", &self.handler.n_dofs)
            .field("n_batches", &self.plan.n_batches())
            .finish()
    }
}

fn tensor_weights(quad: &QuadratureRule1D) -> Vec<f64> {
    let n = quad.len();
    (0..n * n * n).map(|q| quad.weights[q % n] * quad.weights[(q / n) % n] * quad.weights[q / (n * n)]).collect()
}

impl MatrixFreeOperator {
    pub fn new(spec: OperatorSpec, mesh: &HexMesh, handler: DofHandler, plan: BatchPlan) -> Result<Self> {
        spec.validate()?;
        if handler.degree != spec.degree || handler.components != spec.components {
            return Err(invalid("DoF handler does not match the operator's degree or components"));
        }
        if handler.cells_per_dim != mesh.cells_per_dim {
            return Err(invalid("DoF handler and mesh differ"));
        }
        let quad = spec.quadrature_rule()?;
        let basis = lagrange_basis(spec.degree, &quad)?;
        let geo_basis = match spec.geometry {
            GeometryVariant::QuadraticCompute => Some(TensorBasis1D::with_nodes(vec![0.0, 0.5, 1.0], quad.clone())?),
            GeometryVariant::IsoparametricCompute => Some(TensorBasis1D::with_nodes(quad.points.clone(), quad.clone())?),
            _ => None,
        };
        let geometry = (0..mesh.n_cells()).map(|c| geometry_data(mesh, c, spec.geometry, &quad)).collect::<Result<Vec<_>>>()?;
        let schedule = compute_range_schedule(&handler, &plan)?;
        let mut batch_ranges = vec![Vec::new(); schedule.n_batches];
        let mut last_seen = vec![usize::MAX; schedule.n_ranges()];
        for (b, cells) in plan.batches.iter().enumerate() {
            for &cell in cells {
                for i in handler.expand_cell_indices(cell)? {
                    let r = i / RANGE_SIZE;
                    if !handler.is_constrained(i) && last_seen[r] != b {
                        last_seen[r] = b;
                        batch_ranges[b].push(r as u32);
                    }
                }
            }
        }
        let final_batch = schedule.n_batches - 1;
        for (r, seen) in last_seen.iter().enumerate() {
            if *seen == usize::MAX {
                batch_ranges[final_batch].push(r as u32);
            }
        }
        batch_ranges.iter_mut().for_each(|v| v.sort_unstable());
        let n = spec.degree + 1;
        let nq = spec.n_q_1d;
        let (n3, nq3) = (n * n * n, nq * nq * nq);
        let c = spec.components;
        let scratch = Scratch {
            sf: SumFactorization::new(&basis),
            geo_sf: geo_basis.as_ref().map(SumFactorization::new),
            u: vec![0.0; c * n3],
            out: vec![0.0; c * n3],
            tmp: vec![0.0; n3],
            qv: vec![0.0; nq3],
            grad: vec![0.0; 3 * nq3],
            jxw: vec![0.0; nq3],
            g: vec![[0.0; 6]; nq3],
            coords: vec![0.0; nq3.max(27)],
            jac: vec![0.0; 9 * nq3],
            idx: vec![0; c * n3],
        };
        Ok(Self {
            spec,
            weights: tensor_weights(&quad),
            handler,
            plan,
            schedule,
            basis,
            geo_basis,
            geometry,
            batch_ranges,
            scratch: RefCell::new(scratch),
            recorder: RefCell::new(None),
        })
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn handler(&self) -> &DofHandler {
        &self.handler
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn schedule(&self) -> &RangeSchedule {
        &self.schedule
    }

    pub fn basis(&self) -> &TensorBasis1D {
        &self.basis
    }

    pub fn geometry(&self) -> &[GeometryData] {
        &self.geometry
    }

    /// Attaches (or detaches) an access recorder shared with a solver.
    pub fn set_recorder(&self, recorder: Option<SharedRecorder>) {
        *self.recorder.borrow_mut() = recorder;
    }

    /// Negates every cell integral; used by the mutation self-check.
    #[doc(hidden)]
    pub fn inject_sign_flip(&self, on: bool) {
        self.scratch.borrow_mut().sf.flip_integration_sign = on;
    }

    /// Doubles of geometry data streamed per cell.
    pub fn geometry_doubles_per_cell(&self) -> usize {
        let nq3 = self.spec.n_q_1d.pow(3);
        let extra = match self.spec.geometry {
            GeometryVariant::FinalTensorLoad if self.spec.equation.has_mass() => nq3,
            _ => 0,
        };
        self.spec.geometry.doubles_per_cell(nq3) + extra
    }

    fn fill_geometry(&self, cell: usize, s: &mut Scratch) {
        let nq3 = self.weights.len();
        let laplace = self.spec.equation.laplace_scaling().is_some();
        let from_jacobian = |q: usize, jac: &Mat3, s: &mut Scratch| {
            let (inv, det) = inverse3(jac);
            let jxw = self.weights[q] * det;
            s.jxw[q] = jxw;
            if laplace {
                s.g[q] = final_tensor(&inv, jxw);
            }
        };
        match &self.geometry[cell] {
            GeometryData::Affine { jacobian_inverse, det } => {
                let g1 = final_tensor(jacobian_inverse, *det);
                for q in 0..nq3 {
                    let w = self.weights[q];
                    s.jxw[q] = w * det;
                    if laplace {
                        s.g[q] = g1.map(|x| x * w);
                    }
                }
            }
            GeometryData::InverseJacobian(data) => {
                for (q, e) in data.iter().enumerate() {
                    let inv = [[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]];
                    s.jxw[q] = e[9];
                    if laplace {
                        s.g[q] = final_tensor(&inv, e[9]);
                    }
                }
            }
            GeometryData::FinalTensor { tensor, jxw } => {
                s.jxw.copy_from_slice(jxw);
                s.g.copy_from_slice(tensor);
            }
            GeometryData::QuadraticNodes(nodes) => {
                let basis = self.geo_basis.as_ref().unwrap();
                for d in 0..3 {
                    for (l, node) in nodes.iter().enumerate() {
                        s.coords[l] = node[d];
                    }
                    let geo = s.geo_sf.as_mut().unwrap();
                    geo.gradients(basis, &s.coords[..27], &mut s.jac[3 * d * nq3..3 * (d + 1) * nq3]);
                }
                for q in 0..nq3 {
                    let jac = std::array::from_fn(|i| std::array::from_fn(|j| s.jac[(3 * i + j) * nq3 + q]));
                    from_jacobian(q, &jac, s);
                }
            }
            GeometryData::IsoparametricNodes(points) => {
                let basis = self.geo_basis.as_ref().unwrap();
                for d in 0..3 {
                    for (l, x) in points.iter().enumerate() {
                        s.coords[l] = x[d];
                    }
                    let geo = s.geo_sf.as_mut().unwrap();
                    geo.gradients(basis, &s.coords[..nq3], &mut s.jac[3 * d * nq3..3 * (d + 1) * nq3]);
                }
                for q in 0..nq3 {
                    let jac = std::array::from_fn(|i| std::array::from_fn(|j| s.jac[(3 * i + j) * nq3 + q]));
                    from_jacobian(q, &jac, s);
                }
            }
        }
    }

    fn process_cell(&self, cell: usize, src: &[f64], dst: &mut [f64], s: &mut Scratch) {
        let h = &self.handler;
        let mask = h.constrained_mask();
        let blocks = &h.cell_index_blocks[cell];
        let table = h.local_table();
        let n3 = table.len();
        let c = self.spec.components;
        for comp in 0..c {
            for (l, &(slot, off)) in table.iter().enumerate() {
                let i = blocks[slot as usize] as usize + off as usize + comp;
                s.idx[comp * n3 + l] = i;
                s.u[comp * n3 + l] = if mask[i] { 0.0 } else { src[i] };
            }
        }
        self.fill_geometry(cell, s);
        let nq3 = self.weights.len();
        let basis = &self.basis;
        let mass = self.spec.equation.has_mass();
        let lap = self.spec.equation.laplace_scaling();
        for comp in 0..c {
            let Scratch { sf, u, out, tmp, qv, grad, jxw, g, .. } = s;
            let uc = &u[comp * n3..(comp + 1) * n3];
            let oc = &mut out[comp * n3..(comp + 1) * n3];
            if let Some(scale) = lap {
                sf.gradients(basis, uc, grad);
                let (gx, rest) = grad.split_at_mut(nq3);
                let (gy, gz) = rest.split_at_mut(nq3);
                for q in 0..nq3 {
                    let t = &g[q];
                    let (a, b, cz) = (gx[q], gy[q], gz[q]);
                    gx[q] = scale * (t[0] * a + t[3] * b + t[4] * cz);
                    gy[q] = scale * (t[3] * a + t[1] * b + t[5] * cz);
                    gz[q] = scale * (t[4] * a + t[5] * b + t[2] * cz);
                }
                sf.integrate_gradients(basis, grad, oc);
            }
            if mass {
                sf.values(basis, uc, qv);
                for q in 0..nq3 {
                    qv[q] *= jxw[q];
                }
                if lap.is_some() {
                    sf.integrate_values(basis, qv, tmp);
                    for (o, t) in oc.iter_mut().zip(tmp.iter()) {
                        *o += t;
                    }
                } else {
                    sf.integrate_values(basis, qv, oc);
                }
            }
        }
        for (k, &i) in s.idx.iter().enumerate() {
            if !mask[i] {
                dst[i] += s.out[k];
            }
        }
    }

    fn record_batch(&self, b: usize, src: &[f64], dst: &[f64]) {
        let rec = self.recorder.borrow();
        let Some(rec) = rec.as_ref() else { return };
        let mut rec = rec.borrow_mut();
        if rec.is_paused() {
            return;
        }
        let n = self.handler.n_dofs;
        let src_id = rec.id_of(src);
        let dst_id = rec.id_of(dst);
        let geo = rec.stream("geometry");
        let idx = rec.stream("indices");
        let gbytes = self.geometry_doubles_per_cell() * 8;
        for &cell in self.plan.batches.get(b).map(Vec::as_slice).unwrap_or(&[]) {
            rec.record(idx, cell * 27, 27, 4, AccessKind::Read, RegionTag::CellRead);
            rec.record(geo, cell * gbytes, gbytes, 1, AccessKind::Read, RegionTag::CellRead);
        }
        for &r in &self.batch_ranges[b] {
            let r = r as usize * RANGE_SIZE;
            let len = RANGE_SIZE.min(n - r);
            rec.record(src_id, r, len, 8, AccessKind::Read, RegionTag::CellRead);
            rec.record(dst_id, r, len, 8, AccessKind::Write, RegionTag::CellWrite);
        }
    }

    fn run(
        &self,
        src: &mut [f64],
        dst: &mut [f64],
        mut pre: Option<&mut PreCallback<'_>>,
        mut post: Option<&mut PostCallback<'_>>,
    ) -> Result<()> {
        check_len(self.handler.n_dofs, src, dst)?;
        let mut s = self.scratch.borrow_mut();
        let mask = self.handler.constrained_mask();
        let sched = &self.schedule;
        for b in 0..sched.n_batches {
            for &r in &sched.pre_schedule[b] {
                let rg = sched.range(r);
                if let Some(pre) = pre.as_mut() {
                    pre(rg.clone(), src, dst);
                }
                dst[rg].fill(0.0);
            }
            self.record_batch(b, src, dst);
            for &cell in self.plan.batches.get(b).map(Vec::as_slice).unwrap_or(&[]) {
                self.process_cell(cell, src, dst, &mut s);
            }
            for &r in &sched.post_schedule[b] {
                let rg = sched.range(r);
                for i in rg.clone() {
                    if mask[i] {
                        dst[i] = src[i];
                    }
                }
                if let Some(post) = post.as_mut() {
                    post(rg, src, dst);
                }
            }
        }
        Ok(())
    }
}

impl LinearOperator for MatrixFreeOperator {
    fn n(&self) -> usize {
        self.handler.n_dofs
    }

    fn apply(&self, src: &[f64], dst: &mut [f64]) -> Result<()> {
        check_len(self.handler.n_dofs, src, dst)?;
        let mut s = self.scratch.borrow_mut();
        let mask = self.handler.constrained_mask();
        let sched = &self.schedule;
        for b in 0..sched.n_batches {
            for &r in &sched.pre_schedule[b] {
                dst[sched.range(r)].fill(0.0);
            }
            self.record_batch(b, src, dst);
            for &cell in self.plan.batches.get(b).map(Vec::as_slice).unwrap_or(&[]) {
                self.process_cell(cell, src, dst, &mut s);
            }
            for &r in &sched.post_schedule[b] {
                for i in sched.range(r) {
                    if mask[i] {
                        dst[i] = src[i];
                    }
                }
            }
        }
        Ok(())
    }
}

impl FusedOperator for MatrixFreeOperator {
    fn apply_fused(&self, src: &mut [f64], dst: &mut [f64], pre: &mut PreCallback<'_>, post: &mut PostCallback<'_>) -> Result<()> {
        self.run(src, dst, Some(pre), Some(post))
    }
}

/// Jacobi preconditioner built from a scalar diagonal shared by all
/// components: `z_i = inverse_diagonal[i / components] * r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalPreconditioner {
    pub inverse_diagonal: Vec<f64>,
    pub components: usize,
}

impl DiagonalPreconditioner {
    pub fn identity(n: usize) -> Self {
        Self { inverse_diagonal: vec![1.0; n], components: 1 }
    }

    pub fn n(&self) -> usize {
        self.inverse_diagonal.len() * self.components
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.inverse_diagonal[i / self.components]
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        for (i, (zi, ri)) in z.iter_mut().zip(r).enumerate() {
            *zi = self.get(i) * ri;
        }
    }

    /// One entry per vector entry (the component-replicated diagonal).
    pub fn expanded(&self) -> DiagonalPreconditioner {
        DiagonalPreconditioner { inverse_diagonal: (0..self.n()).map(|i| self.get(i)).collect(), components: 1 }
    }
}

/// `(w det J, final tensor)` at the tensor points of `quad`, from pointwise
/// Jacobians of the cell map.
pub fn pointwise_metric(mesh: &HexMesh, cell: usize, quad: &QuadratureRule1D) -> Result<(Vec<f64>, Vec<[f64; 6]>)> {
    let map = mesh.cell_map(cell)?;
    let n = quad.len();
    let mut jxw = Vec::with_capacity(n * n * n);
    let mut g = Vec::with_capacity(n * n * n);
    for q in 0..n * n * n {
        let (i, j, k) = (q % n, (q / n) % n, q / (n * n));
        let (inv, det) = inverse3(&map.jacobian([quad.points[i], quad.points[j], quad.points[k]]));
        if !(det > 0.0) {
            return Err(Error::DegenerateCell { cell, det });
        }
        let w = quad.weights[i] * quad.weights[j] * quad.weights[k] * det;
        jxw.push(w);
        g.push(final_tensor(&inv, w));
    }
    Ok((jxw, g))
}

fn hadamard(a: &Matrix1D, b: &Matrix1D) -> Matrix1D {
    Matrix1D { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect() }
}

/// `out_i = sum_q mx[qx,ix] my[qy,iy] mz[qz,iz] data_q`.
fn contract(m: [&Matrix1D; 3], data: Vec<f64>, nq: usize) -> Result<Vec<f64>> {
    let mut t = CellTensor::from_data([nq; 3], 1, data)?;
    for (d, md) in m.into_iter().enumerate() {
        t = apply_1d(md, &t, d, true)?;
    }
    Ok(t.data)
}

/// Inverse diagonal of the scalar operator (Laplace part, mass part, or
/// their combination) assembled with `(p+1)`-point Gauss–Lobatto
/// quadrature; constrained entries are 1.
pub fn compute_diagonal(spec: &OperatorSpec, mesh: &HexMesh, handler: &DofHandler) -> Result<DiagonalPreconditioner> {
    spec.validate()?;
    let p = spec.degree;
    let quad = gauss_lobatto_quadrature(p + 1)?;
    let basis = lagrange_basis(p, &quad)?;
    let (s, d) = (&basis.shape_values, &basis.shape_gradients);
    let (ss, dd, ds) = (hadamard(s, s), hadamard(d, d), hadamard(d, s));
    let nq = quad.len();
    let c = handler.components;
    let n_nodes = handler.n_dofs / c;
    let mut diag = vec![0.0; n_nodes];
    let n3 = (p + 1).pow(3);
    for cell in 0..handler.n_cells() {
        let (jxw, g) = pointwise_metric(mesh, cell, &quad)?;
        let mut local = vec![0.0; n3];
        if spec.equation.has_mass() {
            for (l, v) in contract([&ss, &ss, &ss], jxw.clone(), nq)?.into_iter().enumerate() {
                local[l] += v;
            }
        }
        if let Some(scale) = spec.equation.laplace_scaling() {
            let terms: [(usize, f64, [&Matrix1D; 3]); 6] = [
                (0, 1.0, [&dd, &ss, &ss]),
                (1, 1.0, [&ss, &dd, &ss]),
                (2, 1.0, [&ss, &ss, &dd]),
                (3, 2.0, [&ds, &ds, &ss]),
                (4, 2.0, [&ds, &ss, &ds]),
                (5, 2.0, [&ss, &ds, &ds]),
            ];
            for (k, factor, m) in terms {
                let data = g.iter().map(|t| t[k]).collect();
                for (l, v) in contract(m, data, nq)?.into_iter().enumerate() {
                    local[l] += scale * factor * v;
                }
            }
        }
        let idx = handler.expand_cell_indices(cell)?;
        for (l, v) in local.into_iter().enumerate() {
            diag[idx[l] / c] += v;
        }
    }
    let mut inverse_diagonal = Vec::with_capacity(n_nodes);
    for (node, v) in diag.into_iter().enumerate() {
        if handler.is_constrained(node * c) {
            inverse_diagonal.push(1.0);
        } else if v > 0.0 && v.is_finite() {
            inverse_diagonal.push(1.0 / v);
        } else {
            return Err(Error::NotPositiveDefinite { index: node, value: v });
        }
    }
    Ok(DiagonalPreconditioner { inverse_diagonal, components: c })
}

pub const DENSE_LIMIT: usize = 20_000;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid("dense matrix rows must form a square matrix"));
        }
        Ok(Self { n, data: rows.concat() })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `max |A - A^T|`.
    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }
}

impl LinearOperator for DenseMatrix {
    fn n(&self) -> usize {
        self.n
    }

    fn apply(&self, src: &[f64], dst: &mut [f64]) -> Result<()> {
        check_len(self.n, src, dst)?;
        for (i, d) in dst.iter_mut().enumerate() {
            *d = self.data[i * self.n..(i + 1) * self.n].iter().zip(src).map(|(a, b)| a * b).sum();
        }
        Ok(())
    }
}

impl FusedOperator for DenseMatrix {
    fn apply_fused(&self, src: &mut [f64], dst: &mut [f64], pre: &mut PreCallback<'_>, post: &mut PostCallback<'_>) -> Result<()> {
        apply_fused_sequential(self, src, dst, pre, post)
    }
}

/// Dense matrix with columns `A e_j`.
pub fn assemble_dense(op: &dyn LinearOperator) -> Result<DenseMatrix> {
    let n = op.n();
    if n > DENSE_LIMIT {
        return Err(Error::SizeTooLarge { what: "dense assembly", size: n, limit: DENSE_LIMIT });
    }
    let mut m = DenseMatrix::zeros(n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col)?;
        e[j] = 0.0;
        for (i, v) in col.iter().enumerate() {
            m.data[i * n + j] = *v;
        }
    }
    Ok(m)
}

/// Compressed sparse rows over nodes; each vector component sees the same
/// scalar matrix (component-interleaved storage).
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_nodes: usize,
    pub components: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(n_nodes: usize, components: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; n_nodes + 1];
        let mut col = Vec::new();
        let mut val: Vec<f64> = Vec::new();
        let mut prev = None;
        for (i, j, v) in t {
            if prev == Some((i, j)) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(j);
                val.push(v);
                row_ptr[i + 1] += 1;
                prev = Some((i, j));
            }
        }
        for i in 0..n_nodes {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n_nodes, components, row_ptr, col, val }
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    /// Entry of the full (component-expanded) matrix.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let c = self.components;
        if i % c != j % c {
            return 0.0;
        }
        let (ni, nj) = (i / c, j / c);
        let row = self.row_ptr[ni]..self.row_ptr[ni + 1];
        match self.col[row.clone()].binary_search(&nj) {
            Ok(k) => self.val[row.start + k],
            Err(_) => 0.0,
        }
    }
}

impl LinearOperator for CsrMatrix {
    fn n(&self) -> usize {
        self.n_nodes * self.components
    }

    fn apply(&self, src: &[f64], dst: &mut [f64]) -> Result<()> {
        check_len(self.n(), src, dst)?;
        let c = self.components;
        for ni in 0..self.n_nodes {
            for comp in 0..c {
                let mut s = 0.0;
                for k in self.row_ptr[ni]..self.row_ptr[ni + 1] {
                    s += self.val[k] * src[self.col[k] * c + comp];
                }
                dst[ni * c + comp] = s;
            }
        }
        Ok(())
    }
}

impl FusedOperator for CsrMatrix {
    fn apply_fused(&self, src: &mut [f64], dst: &mut [f64], pre: &mut PreCallback<'_>, post: &mut PostCallback<'_>) -> Result<()> {
        apply_fused_sequential(self, src, dst, pre, post)
    }
}

/// Element-by-element assembly with explicit quadrature loops and pointwise
/// Jacobians of the cell map; constrained rows and columns become identity.
pub fn assemble_sparse(spec: &OperatorSpec, mesh: &HexMesh, handler: &DofHandler) -> Result<CsrMatrix> {
    spec.validate()?;
    if handler.degree != spec.degree || handler.components != spec.components {
        return Err(invalid("DoF handler does not match the operator"));
    }
    let quad = spec.quadrature_rule()?;
    let basis = lagrange_basis(spec.degree, &quad)?;
    let (s, d) = (&basis.shape_values, &basis.shape_gradients);
    let n = spec.degree + 1;
    let nq = quad.len();
    let (n3, nq3) = (n * n * n, nq * nq * nq);
    // phi_i(q) and reference gradients
    let mut val = vec![0.0; nq3 * n3];
    let mut grad = vec![[0.0; 3]; nq3 * n3];
    for q in 0..nq3 {
        let (qx, qy, qz) = (q % nq, (q / nq) % nq, q / (nq * nq));
        for i in 0..n3 {
            let (ix, iy, iz) = (i % n, (i / n) % n, i / (n * n));
            let (sx, sy, sz) = (s.get(qx, ix), s.get(qy, iy), s.get(qz, iz));
            val[q * n3 + i] = sx * sy * sz;
            grad[q * n3 + i] = [d.get(qx, ix) * sy * sz, sx * d.get(qy, iy) * sz, sx * sy * d.get(qz, iz)];
        }
    }
    let c = handler.components;
    let n_nodes = handler.n_dofs / c;
    let mut triplets = Vec::with_capacity(handler.n_cells() * n3 * n3);
    let mut ke = vec![0.0; n3 * n3];
    for cell in 0..handler.n_cells() {
        let (jxw, g) = pointwise_metric(mesh, cell, &quad)?;
        ke.iter_mut().for_each(|x| *x = 0.0);
        for q in 0..nq3 {
            let vq = &val[q * n3..(q + 1) * n3];
            let gq = &grad[q * n3..(q + 1) * n3];
            let t = g[q];
            let lap = spec.equation.laplace_scaling();
            for i in 0..n3 {
                let gi = gq[i];
                let ggi = [
                    t[0] * gi[0] + t[3] * gi[1] + t[4] * gi[2],
                    t[3] * gi[0] + t[1] * gi[1] + t[5] * gi[2],
                    t[4] * gi[0] + t[5] * gi[1] + t[2] * gi[2],
                ];
                let mi = if spec.equation.has_mass() { vq[i] * jxw[q] } else { 0.0 };
                let row = &mut ke[i * n3..(i + 1) * n3];
                for j in 0..n3 {
                    let mut v = mi * vq[j];
                    if let Some(scale) = lap {
                        let gj = gq[j];
                        v += scale * (ggi[0] * gj[0] + ggi[1] * gj[1] + ggi[2] * gj[2]);
                    }
                    row[j] += v;
                }
            }
        }
        let idx = handler.expand_cell_indices(cell)?;
        for i in 0..n3 {
            let gi = idx[i];
            if handler.is_constrained(gi) {
                continue;
            }
            for j in 0..n3 {
                let gj = idx[j];
                if !handler.is_constrained(gj) {
                    triplets.push((gi / c, gj / c, ke[i * n3 + j]));
                }
            }
        }
    }
    for node in 0..n_nodes {
        if handler.is_constrained(node * c) {
            triplets.push((node, node, 1.0));
        }
    }
    Ok(CsrMatrix::from_triplets(n_nodes, c, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dofs::{distribute_dofs, make_batches, Traversal};
    use crate::mesh::{build_cartesian_mesh, deform_mesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cells: usize, spec: OperatorSpec, deformed: bool, constrained: bool, batch: usize) -> (HexMesh, MatrixFreeOperator) {
        let mut mesh = build_cartesian_mesh([cells; 3], [1.0; 3]).unwrap();
        if deformed {
            mesh = deform_mesh(&mesh, 0.05).unwrap();
        }
        let mut h = distribute_dofs(&mesh, spec.degree, spec.components).unwrap();
        if constrained {
            h = h.with_boundary_constraints();
        }
        let plan = make_batches(&mesh, batch, Traversal::Morton).unwrap();
        let op = MatrixFreeOperator::new(spec, &mesh, h, plan).unwrap();
        (mesh, op)
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn mass_of_one_is_volume() {
        let spec = OperatorSpec::new(Equation::Mass, 1, 2, GeometryVariant::Affine);
        let (_, op) = setup(1, spec, false, false, 8);
        let src = vec![1.0; op.n()];
        let mut dst = vec![0.0; op.n()];
        op.apply(&src, &mut dst).unwrap();
        assert!((dst.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn laplace_of_constant_vanishes() {
        for geometry in [GeometryVariant::QuadraticCompute, GeometryVariant::FinalTensorLoad] {
            let spec = OperatorSpec::new(Equation::Laplace, 3, 3, geometry);
            let (_, op) = setup(2, spec, true, false, 4);
            let src = vec![1.0; op.n()];
            let mut dst = vec![0.0; op.n()];
            op.apply(&src, &mut dst).unwrap();
            assert!(dst.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn p1_stencil() {
        // trilinear stiffness on a unit cube: diagonal 1/3, face neighbours 0
        let spec = OperatorSpec::new(Equation::Laplace, 1, 1, GeometryVariant::Affine);
        let (_, op) = setup(1, spec, false, false, 8);
        let a = assemble_dense(&op).unwrap();
        let idx = op.handler().expand_cell_indices(0).unwrap();
        let e = |i: usize, j: usize| a.get(idx[i], idx[j]);
        assert!((e(0, 0) - 1.0 / 3.0).abs() < 1e-14);
        assert!(e(0, 1).abs() < 1e-14);
        assert!((e(0, 3) + 1.0 / 12.0).abs() < 1e-14);
        assert!((e(0, 7) + 1.0 / 12.0).abs() < 1e-14);
        // two cells: the shared-face vertex row doubles the diagonal
        let mesh = build_cartesian_mesh([2, 1, 1], [2.0, 1.0, 1.0]).unwrap();
        let h = distribute_dofs(&mesh, 1, 1).unwrap();
        let plan = make_batches(&mesh, 2, Traversal::Lexicographic).unwrap();
        let op = MatrixFreeOperator::new(spec, &mesh, h, plan).unwrap();
        let a = assemble_dense(&op).unwrap();
        let i0 = op.handler().expand_cell_indices(0).unwrap();
        let i1 = op.handler().expand_cell_indices(1).unwrap();
        assert!((a.get(i0[1], i0[1]) - 2.0 / 3.0).abs() < 1e-14);
        assert!((a.get(i0[0], i0[0]) - 1.0 / 3.0).abs() < 1e-14);
        assert!(a.get(i0[0], i1[1]).abs() < 1e-14);
    }

    #[test]
    fn matches_sparse_assembly() {
        for (equation, comps, p, geometry, deformed) in [
            (Equation::Mass, 1, 2, GeometryVariant::Affine, false),
            (Equation::Laplace, 3, 2, GeometryVariant::QuadraticCompute, true),
            (Equation::Laplace, 1, 3, GeometryVariant::IsoparametricCompute, true),
            (Equation::MassPlusLaplace { scaling: 0.3 }, 1, 2, GeometryVariant::InverseJacobianLoad, true),
            (Equation::MassPlusLaplace { scaling: 2.0 }, 3, 1, GeometryVariant::FinalTensorLoad, true),
        ] {
            let spec = OperatorSpec::new(equation, comps, p, geometry);
            let (mesh, op) = setup(2, spec, deformed, true, 3);
            let csr = assemble_sparse(&spec, &mesh, op.handler()).unwrap();
            let src = random(op.n(), 7);
            let (mut a, mut b) = (vec![0.0; op.n()], vec![0.0; op.n()]);
            op.apply(&src, &mut a).unwrap();
            csr.apply(&src, &mut b).unwrap();
            assert!(max_rel(&a, &b) < 1e-12, "{spec:?}: {}", max_rel(&a, &b));
            let dense = assemble_dense(&op).unwrap();
            assert!(dense.asymmetry() < 1e-13);
            for i in (0..op.n()).step_by(7) {
                for j in (0..op.n()).step_by(5) {
                    assert!((dense.get(i, j) - csr.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gauss_lobatto_collocation_mass_is_diagonal() {
        let spec = OperatorSpec {
            n_q_1d: 3,
            quadrature: QuadratureKind::GaussLobatto,
            ..OperatorSpec::new(Equation::Mass, 1, 2, GeometryVariant::FinalTensorLoad)
        };
        let (mesh, op) = setup(2, spec, true, false, 8);
        let dense = assemble_dense(&op).unwrap();
        for i in 0..op.n() {
            for j in 0..op.n() {
                if i != j {
                    assert!(dense.get(i, j).abs() < 1e-14);
                }
            }
        }
        let diag = compute_diagonal(&spec, &mesh, op.handler()).unwrap();
        for i in 0..op.n() {
            assert!((diag.inverse_diagonal[i] * dense.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_matches_lobatto_assembly() {
        for (comps, deformed) in [(1, false), (3, true)] {
            let p = 3;
            let spec = OperatorSpec::new(Equation::Laplace, comps, p, GeometryVariant::QuadraticCompute);
            let (mesh, op) = setup(2, spec, deformed, true, 8);
            let diag = compute_diagonal(&spec, &mesh, op.handler()).unwrap();
            let gl = OperatorSpec { n_q_1d: p + 1, quadrature: QuadratureKind::GaussLobatto, components: 1, ..spec };
            let h1 = distribute_dofs(&mesh, p, 1).unwrap().with_boundary_constraints();
            let dense = assemble_sparse(&gl, &mesh, &h1).unwrap();
            for cell in 0..h1.n_cells() {
                let a = h1.expand_cell_indices(cell).unwrap();
                let b = op.handler().expand_cell_indices(cell).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    let expect = if h1.is_constrained(*x) { 1.0 } else { 1.0 / dense.get(*x, *x) };
                    assert!((diag.inverse_diagonal[y / comps] - expect).abs() < 1e-12 * expect.abs());
                }
            }
        }
    }

    #[test]
    fn fused_callbacks_match_sequential() {
        let spec = OperatorSpec::new(Equation::Laplace, 1, 3, GeometryVariant::Affine);
        let (_, op) = setup(4, spec, false, true, 4);
        let n = op.n();
        let src0 = random(n, 1);
        let mut src = src0.clone();
        let mut dst = random(n, 2);
        let mut norm = 0.0;
        op.apply_fused(&mut src, &mut dst, &mut |r, s, _| s[r].iter_mut().for_each(|x| *x *= 2.0), &mut |r, _, d| {
            norm += d[r].iter().map(|x| x * x).sum::<f64>()
        })
        .unwrap();
        let src2: Vec<f64> = src0.iter().map(|x| 2.0 * x).collect();
        let mut expect = vec![0.0; n];
        op.apply(&src2, &mut expect).unwrap();
        assert_eq!(dst, expect);
        assert_eq!(src, src2);
        let e: f64 = expect.iter().map(|x| x * x).sum();
        assert!((norm - e).abs() <= 1e-13 * e);
    }

    #[test]
    fn spec_round_trip_and_validation() {
        let spec = OperatorSpec {
            quadrature: QuadratureKind::GaussLobatto,
            n_q_1d: 4,
            ..OperatorSpec::new(Equation::MassPlusLaplace { scaling: 0.25 }, 3, 3, GeometryVariant::FinalTensorLoad)
        };
        assert_eq!(OperatorSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        assert!(OperatorSpec { n_q_1d: 2, ..spec }.validate().is_err());
        assert!(OperatorSpec { n_q_1d: 5, ..spec }.validate().is_err());
        assert!(OperatorSpec { components: 2, ..spec }.validate().is_err());
        let (_, op) = setup(1, OperatorSpec::new(Equation::Mass, 1, 1, GeometryVariant::Affine), false, false, 1);
        assert!(op.apply(&[0.0; 3], &mut [0.0; 8]).is_err());
    }
}
