//! One-dimensional quadrature, Lagrange bases and sum-factorization sweeps.
//!
//! All tensors use an x-fastest lexicographic layout on the reference cell
//! `[0,1]^3`. A sweep contracts one tensor direction with a small dense 1D
//! matrix, so evaluating a degree-`p` polynomial at `n_q^3` points costs
//! `O(p^4)` instead of `O(p^6)`.

use crate::error::{invalid, Result};

/// Quadrature rule on the unit interval.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule1D {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule1D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Which family a rule belongs to; BP5 uses Gauss–Lobatto collocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuadratureKind {
    Gauss,
    GaussLobatto,
}

impl QuadratureKind {
    pub fn rule(self, n: usize) -> Result<QuadratureRule1D> {
        match self {
            QuadratureKind::Gauss => gauss_quadrature(n),
            QuadratureKind::GaussLobatto => gauss_lobatto_quadrature(n),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuadratureKind::Gauss => "gauss",
            QuadratureKind::GaussLobatto => "gauss_lobatto",
        }
    }
}

impl std::fmt::Display for QuadratureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for QuadratureKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss" => Ok(QuadratureKind::Gauss),
            "gauss_lobatto" => Ok(QuadratureKind::GaussLobatto),
            _ => Err(invalid(format!("unknown quadrature '{s}'"))),
        }
    }
}

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 100;

/// Legendre polynomial values `P_{n-1}(x)`, `P_n(x)` by three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut p_prev, mut p) = (1.0, x);
    if n == 0 {
        return (0.0, 1.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = next;
    }
    (p_prev, p)
}

/// `n`-point Gauss–Legendre rule mapped to `[0,1]`.
pub fn gauss_quadrature(n: usize) -> Result<QuadratureRule1D> {
    if n == 0 {
        return Err(invalid("Gauss quadrature needs at least one point"));
    }
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..NEWTON_MAX_ITER {
            let (p_prev, p) = legendre_pair(n, x);
            dp = nf * (x * p - p_prev) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < NEWTON_TOL {
                let (p_prev, p) = legendre_pair(n, x);
                dp = nf * (x * p - p_prev) / (x * x - 1.0);
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            x = 0.0;
            let (p_prev, _) = legendre_pair(n, 0.0);
            dp = nf * (-p_prev) / -1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // roots come out in descending order
        points[i] = 0.5 * (1.0 - x);
        points[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    Ok(QuadratureRule1D { points, weights })
}

/// `n`-point Gauss–Lobatto rule on `[0,1]`, endpoints included.
pub fn gauss_lobatto_quadrature(n: usize) -> Result<QuadratureRule1D> {
    if n < 2 {
        return Err(invalid("Gauss-Lobatto quadrature needs at least two points"));
    }
    let degree = n - 1;
    let df = degree as f64;
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-Gauss-Lobatto seed, Newton on (1-x^2) P_N'(x)
        let mut x = (std::f64::consts::PI * i as f64 / df).cos();
        for _ in 0..NEWTON_MAX_ITER {
            let (p_prev, p) = legendre_pair(degree, x);
            let dx = (x * p - p_prev) / (n as f64 * p);
            x -= dx;
            if dx.abs() < NEWTON_TOL {
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            x = 0.0;
        }
        let (_, p) = legendre_pair(degree, x);
        let w = 2.0 / (df * (df + 1.0) * p * p);
        points[i] = 0.5 * (1.0 - x);
        points[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    points[0] = 0.0;
    points[n - 1] = 1.0;
    Ok(QuadratureRule1D { points, weights })
}

/// Small dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix1D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix1D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!("matrix data has {} entries, expected {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }
}

/// Lagrange polynomials through `nodes`, evaluated at `points`:
/// returns `(values, derivatives)`, both `points.len() x nodes.len()`.
pub fn lagrange_matrices(nodes: &[f64], points: &[f64]) -> (Matrix1D, Matrix1D) {
    let n = nodes.len();
    let mut values = Matrix1D::zeros(points.len(), n);
    let mut grads = Matrix1D::zeros(points.len(), n);
    for (q, &x) in points.iter().enumerate() {
        for i in 0..n {
            let mut v = 1.0;
            for j in (0..n).filter(|&j| j != i) {
                v *= (x - nodes[j]) / (nodes[i] - nodes[j]);
            }
            let mut d = 0.0;
            for k in (0..n).filter(|&k| k != i) {
                let mut term = 1.0 / (nodes[i] - nodes[k]);
                for j in (0..n).filter(|&j| j != i && j != k) {
                    term *= (x - nodes[j]) / (nodes[i] - nodes[j]);
                }
                d += term;
            }
            values.data[q * n + i] = v;
            grads.data[q * n + i] = d;
        }
    }
    (values, grads)
}

/// Even-odd split of a matrix with `M[m-1-q][n-1-i] = parity * M[q][i]`.
///
/// Pairs of mirrored inputs are combined into sums and differences first, so
/// each output pair costs about half the multiplications of a plain product.
#[derive(Debug, Clone, PartialEq)]
pub struct EvenOdd {
    rows: usize,
    cols: usize,
    parity: f64,
    half_rows: usize,
    half_cols: usize,
    even: Vec<f64>,
    odd: Vec<f64>,
    middle: Vec<f64>,
}

impl EvenOdd {
    pub fn new(m: &Matrix1D, parity: f64) -> Self {
        let (rows, cols) = (m.rows, m.cols);
        let half_rows = rows.div_ceil(2);
        let half_cols = cols / 2;
        let mut even = vec![0.0; half_rows * half_cols];
        let mut odd = vec![0.0; half_rows * half_cols];
        let mut middle = vec![0.0; if cols % 2 == 1 { half_rows } else { 0 }];
        for q in 0..half_rows {
            for i in 0..half_cols {
                let a = m.get(q, i);
                let b = m.get(q, cols - 1 - i);
                even[q * half_cols + i] = 0.5 * (a + b);
                odd[q * half_cols + i] = 0.5 * (a - b);
            }
            if cols % 2 == 1 {
                middle[q] = m.get(q, cols / 2);
            }
        }
        Self { rows, cols, parity, half_rows, half_cols, even, odd, middle }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `y = M x` for one line; `x` has `cols` entries, `y` has `rows`.
    #[inline]
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        const MAX: usize = 16;
        let hc = self.half_cols;
        let mut xe = [0.0; MAX];
        let mut xo = [0.0; MAX];
        for i in 0..hc {
            xe[i] = x[i] + x[self.cols - 1 - i];
            xo[i] = x[i] - x[self.cols - 1 - i];
        }
        let xm = if self.cols % 2 == 1 { x[self.cols / 2] } else { 0.0 };
        for q in 0..self.half_rows {
            let e = &self.even[q * hc..(q + 1) * hc];
            let o = &self.odd[q * hc..(q + 1) * hc];
            let mut se = 0.0;
            let mut so = 0.0;
            for i in 0..hc {
                se += e[i] * xe[i];
                so += o[i] * xo[i];
            }
            let mid = if self.cols % 2 == 1 { self.middle[q] * xm } else { 0.0 };
            let mirror = self.rows - 1 - q;
            if mirror == q {
                y[q] = se + so + mid;
            } else {
                y[q] = se + so + mid;
                y[mirror] = self.parity * (se - so + mid);
            }
        }
    }
}

/// One-dimensional Lagrange basis on Gauss–Lobatto support points, tabulated
/// at the points of a quadrature rule.
#[derive(Debug, Clone)]
pub struct TensorBasis1D {
    pub degree: usize,
    pub node_points: Vec<f64>,
    pub quadrature: QuadratureRule1D,
    pub shape_values: Matrix1D,
    pub shape_gradients: Matrix1D,
    pub(crate) values_eo: EvenOdd,
    pub(crate) values_t_eo: EvenOdd,
    pub(crate) gradients_eo: EvenOdd,
    pub(crate) gradients_t_eo: EvenOdd,
}

impl TensorBasis1D {
    /// Basis through arbitrary (mirror-symmetric) nodes. Used for geometry
    /// interpolation where the nodes are the quadrature points themselves.
    pub fn with_nodes(nodes: Vec<f64>, quadrature: QuadratureRule1D) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(invalid("a basis needs at least two nodes"));
        }
        if nodes.len() > 16 || quadrature.len() > 16 {
            return Err(invalid("1D sizes above 16 are not supported"));
        }
        let (values, grads) = lagrange_matrices(&nodes, &quadrature.points);
        Ok(Self {
            degree: nodes.len() - 1,
            values_eo: EvenOdd::new(&values, 1.0),
            values_t_eo: EvenOdd::new(&values.transpose(), 1.0),
            gradients_eo: EvenOdd::new(&grads, -1.0),
            gradients_t_eo: EvenOdd::new(&grads.transpose(), -1.0),
            node_points: nodes,
            quadrature,
            shape_values: values,
            shape_gradients: grads,
        })
    }

    pub fn n_dofs_1d(&self) -> usize {
        self.degree + 1
    }

    pub fn n_q_1d(&self) -> usize {
        self.quadrature.len()
    }

    fn eo(&self, kind: ShapeKind, transpose: bool) -> &EvenOdd {
        match (kind, transpose) {
            (ShapeKind::Value, false) => &self.values_eo,
            (ShapeKind::Value, true) => &self.values_t_eo,
            (ShapeKind::Gradient, false) => &self.gradients_eo,
            (ShapeKind::Gradient, true) => &self.gradients_t_eo,
        }
    }

    fn matrix(&self, kind: ShapeKind) -> &Matrix1D {
        match kind {
            ShapeKind::Value => &self.shape_values,
            ShapeKind::Gradient => &self.shape_gradients,
        }
    }
}

/// Lagrange basis of degree `p` on Gauss–Lobatto nodes, tabulated at `quad`.
pub fn lagrange_basis(p: usize, quad: &QuadratureRule1D) -> Result<TensorBasis1D> {
    if p == 0 {
        return Err(invalid("basis degree must be at least 1"));
    }
    let nodes = gauss_lobatto_quadrature(p + 1)?.points;
    TensorBasis1D::with_nodes(nodes, quad.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Value,
    Gradient,
}

/// Per-cell coefficient or quadrature-point block, x-fastest, with
/// `components` stacked tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTensor {
    pub extents: [usize; 3],
    pub components: usize,
    pub data: Vec<f64>,
}

impl CellTensor {
    pub fn zeros(extents: [usize; 3], components: usize) -> Self {
        let len = extents.iter().product::<usize>() * components;
        Self { extents, components, data: vec![0.0; len] }
    }

    pub fn from_data(extents: [usize; 3], components: usize, data: Vec<f64>) -> Result<Self> {
        let len = extents.iter().product::<usize>() * components;
        if data.len() != len {
            return Err(invalid(format!("cell tensor data has {} entries, extents {extents:?} x {components} need {len}", data.len())));
        }
        Ok(Self { extents, components, data })
    }

    pub fn component_len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.component_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.extents[0] * (j + self.extents[1] * k)
    }
}

/// Contract direction `dir` of `src` (extents `ext`) with a 1D operator,
/// writing `ext` with `ext[dir]` replaced by `out_len` into `dst`.
#[inline]
pub(crate) fn sweep<F: Fn(&[f64], &mut [f64])>(
    op: F,
    out_len: usize,
    src: &[f64],
    ext: [usize; 3],
    dir: usize,
    dst: &mut [f64],
    accumulate: bool,
) {
    let n_in = ext[dir];
    let mut ext_out = ext;
    ext_out[dir] = out_len;
    let stride_in = match dir {
        0 => 1,
        1 => ext[0],
        _ => ext[0] * ext[1],
    };
    let stride_out = match dir {
        0 => 1,
        1 => ext_out[0],
        _ => ext_out[0] * ext_out[1],
    };
    // the two directions not being contracted
    let (outer, inner) = match dir {
        0 => (ext[1] * ext[2], 1),
        1 => (ext[2], ext[0]),
        _ => (1, ext[0] * ext[1]),
    };
    let block_in = n_in * stride_in;
    let block_out = out_len * stride_out;
    let mut xin = [0.0; 16];
    let mut xout = [0.0; 16];
    for o in 0..outer {
        for i in 0..inner {
            let base_in = o * block_in + i;
            let base_out = o * block_out + i;
            for l in 0..n_in {
                xin[l] = src[base_in + l * stride_in];
            }
            op(&xin[..n_in], &mut xout[..out_len]);
            if accumulate {
                for l in 0..out_len {
                    dst[base_out + l * stride_out] += xout[l];
                }
            } else {
                for l in 0..out_len {
                    dst[base_out + l * stride_out] = xout[l];
                }
            }
        }
    }
}

fn check_direction(direction: usize) -> Result<()> {
    if direction > 2 {
        return Err(invalid(format!("direction {direction} is not in 0..3")));
    }
    Ok(())
}

/// Mode-`direction` contraction of `input` with `matrix` (or its transpose).
pub fn apply_1d(matrix: &Matrix1D, input: &CellTensor, direction: usize, transpose: bool) -> Result<CellTensor> {
    check_direction(direction)?;
    let (n_in, n_out) = if transpose { (matrix.rows, matrix.cols) } else { (matrix.cols, matrix.rows) };
    if input.extents[direction] != n_in {
        return Err(invalid(format!("extent {} in direction {direction} does not match matrix size {n_in}", input.extents[direction])));
    }
    if n_in > 16 || n_out > 16 {
        return Err(invalid("1D sizes above 16 are not supported"));
    }
    let mut ext_out = input.extents;
    ext_out[direction] = n_out;
    let mut out = CellTensor::zeros(ext_out, input.components);
    let (clen_in, clen_out) = (input.component_len(), out.component_len());
    let op = |x: &[f64], y: &mut [f64]| {
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = x.iter().enumerate().map(|(c, &xc)| if transpose { matrix.get(c, r) * xc } else { matrix.get(r, c) * xc }).sum();
        }
    };
    for c in 0..input.components {
        sweep(
            op,
            n_out,
            &input.data[c * clen_in..(c + 1) * clen_in],
            input.extents,
            direction,
            &mut out.data[c * clen_out..(c + 1) * clen_out],
            false,
        );
    }
    Ok(out)
}

/// Same contraction as [`apply_1d`] with the basis value or gradient matrix,
/// evaluated through the even-odd decomposition.
pub fn even_odd_apply(basis: &TensorBasis1D, input: &CellTensor, direction: usize, kind: ShapeKind, transpose: bool) -> Result<CellTensor> {
    check_direction(direction)?;
    let eo = basis.eo(kind, transpose);
    if input.extents[direction] != eo.cols() {
        let m = basis.matrix(kind);
        return Err(invalid(format!(
            "extent {} in direction {direction} does not match {}x{} matrix",
            input.extents[direction], m.rows, m.cols
        )));
    }
    let mut ext_out = input.extents;
    ext_out[direction] = eo.rows();
    let mut out = CellTensor::zeros(ext_out, input.components);
    let (clen_in, clen_out) = (input.component_len(), out.component_len());
    for c in 0..input.components {
        sweep(
            |x, y| eo.apply(x, y),
            eo.rows(),
            &input.data[c * clen_in..(c + 1) * clen_in],
            input.extents,
            direction,
            &mut out.data[c * clen_out..(c + 1) * clen_out],
            false,
        );
    }
    Ok(out)
}

/// Scratch-owning sum-factorization kernel for one basis. Buffers are reused
/// across cells; all routines take plain slices.
#[derive(Debug, Clone)]
pub struct SumFactorization {
    n: usize,
    nq: usize,
    buf: [Vec<f64>; 4],
    #[doc(hidden)]
    pub flip_integration_sign: bool,
}

impl SumFactorization {
    pub fn new(basis: &TensorBasis1D) -> Self {
        let n = basis.n_dofs_1d();
        let nq = basis.n_q_1d();
        let size = n.max(nq).pow(3);
        Self { n, nq, buf: [vec![0.0; size], vec![0.0; size], vec![0.0; size], vec![0.0; size]], flip_integration_sign: false }
    }

    /// Values at quadrature points: `out` has `nq^3` entries.
    pub fn values(&mut self, basis: &TensorBasis1D, u: &[f64], out: &mut [f64]) {
        let (n, nq) = (self.n, self.nq);
        let v = &basis.values_eo;
        let [a, b, ..] = &mut self.buf;
        sweep(|x, y| v.apply(x, y), nq, u, [n, n, n], 0, a, false);
        sweep(|x, y| v.apply(x, y), nq, a, [nq, n, n], 1, b, false);
        sweep(|x, y| v.apply(x, y), nq, b, [nq, nq, n], 2, out, false);
    }

    /// Transpose of [`Self::values`]: `out` (n^3) = sum over points.
    pub fn integrate_values(&mut self, basis: &TensorBasis1D, qv: &[f64], out: &mut [f64]) {
        let (n, nq) = (self.n, self.nq);
        let v = &basis.values_t_eo;
        let [a, b, ..] = &mut self.buf;
        sweep(|x, y| v.apply(x, y), n, qv, [nq, nq, nq], 2, a, false);
        sweep(|x, y| v.apply(x, y), n, a, [nq, nq, n], 1, b, false);
        sweep(|x, y| v.apply(x, y), n, b, [nq, n, n], 0, out, false);
        if self.flip_integration_sign {
            out.iter_mut().for_each(|o| *o = -*o);
        }
    }

    /// Reference gradients at quadrature points, stacked `[d/dx, d/dy, d/dz]`
    /// in `out` (3 nq^3 entries).
    pub fn gradients(&mut self, basis: &TensorBasis1D, u: &[f64], out: &mut [f64]) {
        let (n, nq) = (self.n, self.nq);
        let nq3 = nq * nq * nq;
        let v = &basis.values_eo;
        let d = &basis.gradients_eo;
        let (gx, rest) = out.split_at_mut(nq3);
        let (gy, gz) = rest.split_at_mut(nq3);
        let [a, b, c, e] = &mut self.buf;
        // a = S_z u
        sweep(|x, y| v.apply(x, y), nq, u, [n, n, n], 2, a, false);
        // gx = D_x S_y S_z u
        sweep(|x, y| v.apply(x, y), nq, a, [n, n, nq], 1, b, false);
        sweep(|x, y| d.apply(x, y), nq, b, [n, nq, nq], 0, gx, false);
        // gy = S_x D_y S_z u
        sweep(|x, y| d.apply(x, y), nq, a, [n, n, nq], 1, c, false);
        sweep(|x, y| v.apply(x, y), nq, c, [n, nq, nq], 0, gy, false);
        // gz = S_x S_y D_z u
        sweep(|x, y| d.apply(x, y), nq, u, [n, n, n], 2, e, false);
        sweep(|x, y| v.apply(x, y), nq, e, [n, n, nq], 1, b, false);
        sweep(|x, y| v.apply(x, y), nq, b, [n, nq, nq], 0, gz, false);
    }

    /// Adjoint of [`Self::gradients`]: `out[i] = sum_q grad(phi_i) . g(q)`.
    pub fn integrate_gradients(&mut self, basis: &TensorBasis1D, g: &[f64], out: &mut [f64]) {
        let (n, nq) = (self.n, self.nq);
        let nq3 = nq * nq * nq;
        let vt = &basis.values_t_eo;
        let dt = &basis.gradients_t_eo;
        let (gx, rest) = g.split_at(nq3);
        let (gy, gz) = rest.split_at(nq3);
        let [a, b, c, e] = &mut self.buf;
        // direction 0 contractions, all to extents [n, nq, nq]
        sweep(|x, y| dt.apply(x, y), n, gx, [nq, nq, nq], 0, b, false);
        sweep(|x, y| vt.apply(x, y), n, gy, [nq, nq, nq], 0, c, false);
        sweep(|x, y| vt.apply(x, y), n, gz, [nq, nq, nq], 0, e, false);
        // direction 1: a = S_y^T b + D_y^T c ; e' = S_y^T e
        sweep(|x, y| vt.apply(x, y), n, b, [n, nq, nq], 1, a, false);
        sweep(|x, y| dt.apply(x, y), n, c, [n, nq, nq], 1, a, true);
        sweep(|x, y| vt.apply(x, y), n, e, [n, nq, nq], 1, b, false);
        // direction 2
        sweep(|x, y| vt.apply(x, y), n, a, [n, n, nq], 2, out, false);
        sweep(|x, y| dt.apply(x, y), n, b, [n, n, nq], 2, out, true);
        if self.flip_integration_sign {
            out.iter_mut().for_each(|o| *o = -*o);
        }
    }
}

fn check_cell_dofs(basis: &TensorBasis1D, t: &CellTensor, components: usize) -> Result<()> {
    let n = basis.n_dofs_1d();
    if t.extents != [n, n, n] || t.components != components {
        return Err(invalid(format!("expected {components} component(s) of extent {n}^3, got {:?} x {}", t.extents, t.components)));
    }
    Ok(())
}

/// Reference-coordinate gradients of `u_h` at all quadrature points
/// (three stacked components).
pub fn evaluate_gradients(basis: &TensorBasis1D, cell_dofs: &CellTensor) -> Result<CellTensor> {
    check_cell_dofs(basis, cell_dofs, 1)?;
    let nq = basis.n_q_1d();
    let mut out = CellTensor::zeros([nq, nq, nq], 3);
    SumFactorization::new(basis).gradients(basis, &cell_dofs.data, &mut out.data);
    Ok(out)
}

/// Test-function-gradient integration of quadrature data (three stacked
/// components), the adjoint of [`evaluate_gradients`].
pub fn integrate_gradients(basis: &TensorBasis1D, quad_data: &CellTensor) -> Result<CellTensor> {
    let nq = basis.n_q_1d();
    if quad_data.extents != [nq, nq, nq] || quad_data.components != 3 {
        return Err(invalid(format!("expected 3 components of extent {nq}^3, got {:?} x {}", quad_data.extents, quad_data.components)));
    }
    let n = basis.n_dofs_1d();
    let mut out = CellTensor::zeros([n, n, n], 1);
    SumFactorization::new(basis).integrate_gradients(basis, &quad_data.data, &mut out.data);
    Ok(out)
}

/// Values of `u_h` at all quadrature points.
pub fn evaluate_values(basis: &TensorBasis1D, cell_dofs: &CellTensor) -> Result<CellTensor> {
    check_cell_dofs(basis, cell_dofs, 1)?;
    let nq = basis.n_q_1d();
    let mut out = CellTensor::zeros([nq, nq, nq], 1);
    SumFactorization::new(basis).values(basis, &cell_dofs.data, &mut out.data);
    Ok(out)
}
