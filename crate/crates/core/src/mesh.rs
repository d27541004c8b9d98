//! Structured hexahedral meshes, an optional smooth deformation, and the
//! per-quadrature-point geometry data behind each geometry variant.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::tensor::{gauss_quadrature, QuadratureRule1D};

pub type Point = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Boundary-preserving sine bump applied to every coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deformation {
    pub amplitude: f64,
}

impl Deformation {
    pub fn apply(&self, x: Point, extents: [f64; 3]) -> Point {
        let pi = std::f64::consts::PI;
        let s: f64 = (0..3).map(|d| (pi * x[d] / extents[d]).sin()).product();
        let mut y = x;
        for d in 0..3 {
            y[d] += self.amplitude * extents[d] * s;
        }
        y
    }
}

/// Axis-aligned brick `[0, extents]` split into `cells_per_dim` hexahedra,
/// cells numbered lexicographically with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct HexMesh {
    pub cells_per_dim: [usize; 3],
    pub extents: [f64; 3],
    pub vertex_coordinates: Vec<Point>,
    pub cell_vertex_indices: Vec<[usize; 8]>,
    pub deformation: Option<Deformation>,
}

/// Uniform brick mesh of `[0, extents]`.
pub fn build_cartesian_mesh(cells_per_dim: [usize; 3], extents: [f64; 3]) -> Result<HexMesh> {
    if cells_per_dim.contains(&0) {
        return Err(invalid(format!("cells per dimension must be positive, got {cells_per_dim:?}")));
    }
    if extents.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(invalid(format!("extents must be positive, got {extents:?}")));
    }
    let [nx, ny, nz] = cells_per_dim;
    let mut vertex_coordinates = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertex_coordinates.push([
                    extents[0] * i as f64 / nx as f64,
                    extents[1] * j as f64 / ny as f64,
                    extents[2] * k as f64 / nz as f64,
                ]);
            }
        }
    }
    let vid = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut cell_vertex_indices = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut v = [0; 8];
                for (l, slot) in v.iter_mut().enumerate() {
                    *slot = vid(i + (l & 1), j + ((l >> 1) & 1), k + ((l >> 2) & 1));
                }
                cell_vertex_indices.push(v);
            }
        }
    }
    Ok(HexMesh { cells_per_dim, extents, vertex_coordinates, cell_vertex_indices, deformation: None })
}

/// Applies the sine bump with the given amplitude (relative to the extents).
pub fn deform_mesh(mesh: &HexMesh, amplitude: f64) -> Result<HexMesh> {
    if !amplitude.is_finite() {
        return Err(invalid("deformation amplitude must be finite"));
    }
    let mut out = mesh.clone();
    out.deformation = if amplitude == 0.0 { None } else { Some(Deformation { amplitude }) };
    if let Some(def) = out.deformation {
        let base = build_cartesian_mesh(mesh.cells_per_dim, mesh.extents)?;
        for (v, x) in out.vertex_coordinates.iter_mut().zip(&base.vertex_coordinates) {
            *v = def.apply(*x, mesh.extents);
        }
        let quad = gauss_quadrature(3)?;
        for cell in 0..out.n_cells() {
            let map = out.cell_map(cell)?;
            let mut min_det = f64::INFINITY;
            for &z in &quad.points {
                for &y in &quad.points {
                    for &x in &quad.points {
                        min_det = min_det.min(det3(&map.jacobian([x, y, z])));
                    }
                }
            }
            if !(min_det > 0.0) {
                return Err(Error::InvalidDeformation { cell, min_det });
            }
        }
    }
    Ok(out)
}

impl HexMesh {
    pub fn n_cells(&self) -> usize {
        self.cells_per_dim.iter().product()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertex_coordinates.len()
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let [nx, ny, _] = self.cells_per_dim;
        [cell % nx, (cell / nx) % ny, cell / (nx * ny)]
    }

    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.cells_per_dim[0] * (c[1] + self.cells_per_dim[1] * c[2])
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|d| self.extents[d] / self.cells_per_dim[d] as f64)
    }

    pub fn is_affine(&self) -> bool {
        self.deformation.is_none()
    }

    fn check_cell(&self, cell: usize) -> Result<()> {
        if cell >= self.n_cells() {
            return Err(Error::OutOfRange { index: cell, len: self.n_cells() });
        }
        Ok(())
    }

    /// Undeformed position of the reference point `xhat` in `cell`.
    fn affine_point(&self, cell: usize, xhat: Point) -> Point {
        let c = self.cell_coords(cell);
        let h = self.cell_size();
        [0, 1, 2].map(|d| (c[d] as f64 + xhat[d]) * h[d])
    }

    /// Tri-quadratic cell map through the 27 geometry nodes.
    pub fn cell_map(&self, cell: usize) -> Result<CellMap> {
        Ok(CellMap { nodes: quadratic_geometry_nodes(self, cell)? })
    }

    pub fn description(&self) -> MeshDescription {
        MeshDescription { cells: self.cells_per_dim, extents: self.extents, amplitude: self.deformation.map_or(0.0, |d| d.amplitude) }
    }
}

/// The 27 tri-quadratic geometry support points of `cell`, lexicographic on
/// the `{0, 1/2, 1}^3` reference lattice.
pub fn quadratic_geometry_nodes(mesh: &HexMesh, cell: usize) -> Result<[Point; 27]> {
    mesh.check_cell(cell)?;
    let mut nodes = [[0.0; 3]; 27];
    for (l, node) in nodes.iter_mut().enumerate() {
        let xhat = [(l % 3) as f64 * 0.5, ((l / 3) % 3) as f64 * 0.5, (l / 9) as f64 * 0.5];
        let x = mesh.affine_point(cell, xhat);
        *node = match mesh.deformation {
            Some(d) => d.apply(x, mesh.extents),
            None => x,
        };
    }
    Ok(nodes)
}

/// Pointwise evaluation of a tri-quadratic cell map.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMap {
    pub nodes: [Point; 27],
}

fn quad_shape(t: f64) -> ([f64; 3], [f64; 3]) {
    ([2.0 * (t - 0.5) * (t - 1.0), -4.0 * t * (t - 1.0), 2.0 * t * (t - 0.5)], [4.0 * t - 3.0, -8.0 * t + 4.0, 4.0 * t - 1.0])
}

impl CellMap {
    pub fn position(&self, xhat: Point) -> Point {
        let (lx, _) = quad_shape(xhat[0]);
        let (ly, _) = quad_shape(xhat[1]);
        let (lz, _) = quad_shape(xhat[2]);
        let mut x = [0.0; 3];
        for (l, node) in self.nodes.iter().enumerate() {
            let w = lx[l % 3] * ly[(l / 3) % 3] * lz[l / 9];
            for d in 0..3 {
                x[d] += w * node[d];
            }
        }
        x
    }

    /// `J[i][j] = dx_i / dxhat_j`.
    pub fn jacobian(&self, xhat: Point) -> Mat3 {
        let (lx, dx) = quad_shape(xhat[0]);
        let (ly, dy) = quad_shape(xhat[1]);
        let (lz, dz) = quad_shape(xhat[2]);
        let mut jac = [[0.0; 3]; 3];
        for (l, node) in self.nodes.iter().enumerate() {
            let (a, b, c) = (l % 3, (l / 3) % 3, l / 9);
            let grad = [dx[a] * ly[b] * lz[c], lx[a] * dy[b] * lz[c], lx[a] * ly[b] * dz[c]];
            for i in 0..3 {
                for j in 0..3 {
                    jac[i][j] += node[i] * grad[j];
                }
            }
        }
        jac
    }
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse and determinant of a 3x3 matrix.
pub fn inverse3(m: &Mat3) -> (Mat3, f64) {
    let det = det3(m);
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv_det;
        }
    }
    (inv, det)
}

/// Symmetric `J^{-1} (w det J) J^{-T}` in `[xx, yy, zz, xy, xz, yz]` order.
pub fn final_tensor(jinv: &Mat3, jxw: f64) -> [f64; 6] {
    let g = |a: usize, b: usize| jxw * (0..3).map(|k| jinv[a][k] * jinv[b][k]).sum::<f64>();
    [g(0, 0), g(1, 1), g(2, 2), g(0, 1), g(0, 2), g(1, 2)]
}

/// How the operator obtains metric terms at quadrature points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeometryVariant {
    Affine,
    QuadraticCompute,
    IsoparametricCompute,
    InverseJacobianLoad,
    FinalTensorLoad,
}

impl GeometryVariant {
    pub const ALL: [GeometryVariant; 5] = [
        GeometryVariant::Affine,
        GeometryVariant::QuadraticCompute,
        GeometryVariant::IsoparametricCompute,
        GeometryVariant::InverseJacobianLoad,
        GeometryVariant::FinalTensorLoad,
    ];

    /// Doubles loaded per cell for `n_q_points` quadrature points.
    pub fn doubles_per_cell(self, n_q_points: usize) -> usize {
        match self {
            GeometryVariant::Affine => 10,
            GeometryVariant::QuadraticCompute => 27 * 3,
            GeometryVariant::IsoparametricCompute => 3 * n_q_points,
            GeometryVariant::InverseJacobianLoad => 10 * n_q_points,
            GeometryVariant::FinalTensorLoad => 6 * n_q_points,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeometryVariant::Affine => "affine",
            GeometryVariant::QuadraticCompute => "quadratic_compute",
            GeometryVariant::IsoparametricCompute => "isoparametric_compute",
            GeometryVariant::InverseJacobianLoad => "inverse_jacobian_load",
            GeometryVariant::FinalTensorLoad => "final_tensor_load",
        }
    }
}

impl fmt::Display for GeometryVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeometryVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GeometryVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| invalid(format!("unknown geometry variant '{s}'")))
    }
}

/// Geometry payload of one cell.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometryData {
    /// One inverse Jacobian and determinant for the whole cell.
    Affine { jacobian_inverse: Mat3, det: f64 },
    /// Tri-quadratic support points; Jacobians computed on the fly.
    QuadraticNodes(Box<[Point; 27]>),
    /// Physical coordinates at every quadrature point (x-fastest).
    IsoparametricNodes(Vec<Point>),
    /// Per point: `J^{-1}` row-major (9) followed by `w det J`.
    InverseJacobian(Vec<[f64; 10]>),
    /// Per point: the symmetric final tensor (6) and `w det J`, which is only
    /// needed when the operator contains a mass term.
    FinalTensor { tensor: Vec<[f64; 6]>, jxw: Vec<f64> },
}

impl GeometryData {
    pub fn variant(&self) -> GeometryVariant {
        match self {
            GeometryData::Affine { .. } => GeometryVariant::Affine,
            GeometryData::QuadraticNodes(_) => GeometryVariant::QuadraticCompute,
            GeometryData::IsoparametricNodes(_) => GeometryVariant::IsoparametricCompute,
            GeometryData::InverseJacobian(_) => GeometryVariant::InverseJacobianLoad,
            GeometryData::FinalTensor { .. } => GeometryVariant::FinalTensorLoad,
        }
    }

    /// Doubles this payload streams per operator application (excluding the
    /// optional mass-term `jxw` of the final-tensor variant).
    pub fn doubles(&self) -> usize {
        match self {
            GeometryData::Affine { .. } => 10,
            GeometryData::QuadraticNodes(_) => 81,
            GeometryData::IsoparametricNodes(p) => 3 * p.len(),
            GeometryData::InverseJacobian(p) => 10 * p.len(),
            GeometryData::FinalTensor { tensor, .. } => 6 * tensor.len(),
        }
    }
}

fn tensor_points(quad: &QuadratureRule1D) -> impl Iterator<Item = (Point, f64)> + '_ {
    let n = quad.len();
    (0..n * n * n).map(move |q| {
        let (i, j, k) = (q % n, (q / n) % n, q / (n * n));
        ([quad.points[i], quad.points[j], quad.points[k]], quad.weights[i] * quad.weights[j] * quad.weights[k])
    })
}

/// Geometry data of `cell` for `variant` on the tensor-product rule `quad`.
pub fn geometry_data(mesh: &HexMesh, cell: usize, variant: GeometryVariant, quad: &QuadratureRule1D) -> Result<GeometryData> {
    mesh.check_cell(cell)?;
    let map = mesh.cell_map(cell)?;
    let checked_inverse = |jac: &Mat3| -> Result<(Mat3, f64)> {
        let (inv, det) = inverse3(jac);
        if !(det > 0.0) {
            return Err(Error::DegenerateCell { cell, det });
        }
        Ok((inv, det))
    };
    Ok(match variant {
        GeometryVariant::Affine => {
            if !mesh.is_affine() {
                return Err(invalid("the affine geometry variant needs an undeformed mesh"));
            }
            let (jacobian_inverse, det) = checked_inverse(&map.jacobian([0.5; 3]))?;
            GeometryData::Affine { jacobian_inverse, det }
        }
        GeometryVariant::QuadraticCompute => {
            for corner in [[0.0; 3], [1.0; 3], [0.5; 3]] {
                checked_inverse(&map.jacobian(corner))?;
            }
            GeometryData::QuadraticNodes(Box::new(map.nodes))
        }
        GeometryVariant::IsoparametricCompute => {
            let pts = tensor_points(quad)
                .map(|(x, _)| {
                    checked_inverse(&map.jacobian(x))?;
                    Ok(map.position(x))
                })
                .collect::<Result<Vec<_>>>()?;
            GeometryData::IsoparametricNodes(pts)
        }
        GeometryVariant::InverseJacobianLoad => {
            let data = tensor_points(quad)
                .map(|(x, w)| {
                    let (inv, det) = checked_inverse(&map.jacobian(x))?;
                    let mut e = [0.0; 10];
                    for i in 0..3 {
                        for j in 0..3 {
                            e[3 * i + j] = inv[i][j];
                        }
                    }
                    e[9] = w * det;
                    Ok(e)
                })
                .collect::<Result<Vec<_>>>()?;
            GeometryData::InverseJacobian(data)
        }
        GeometryVariant::FinalTensorLoad => {
            let mut tensor = Vec::new();
            let mut jxw = Vec::new();
            for (x, w) in tensor_points(quad) {
                let (inv, det) = checked_inverse(&map.jacobian(x))?;
                tensor.push(final_tensor(&inv, w * det));
                jxw.push(w * det);
            }
            GeometryData::FinalTensor { tensor, jxw }
        }
    })
}

/// Reproducible mesh configuration, stored as `key = value` lines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshDescription {
    pub cells: [usize; 3],
    pub extents: [f64; 3],
    pub amplitude: f64,
}

impl Default for MeshDescription {
    fn default() -> Self {
        Self { cells: [2, 2, 2], extents: [1.0; 3], amplitude: 0.0 }
    }
}

impl MeshDescription {
    pub fn build(&self) -> Result<HexMesh> {
        let mesh = build_cartesian_mesh(self.cells, self.extents)?;
        if self.amplitude != 0.0 {
            deform_mesh(&mesh, self.amplitude)
        } else {
            Ok(mesh)
        }
    }

    pub fn to_kv(&self) -> String {
        let [a, b, c] = self.cells;
        let [x, y, z] = self.extents;
        format!("cells = {a} {b} {c}\nextents = {x:?} {y:?} {z:?}\namplitude = {:?}\n", self.amplitude)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| invalid(format!("expected 'key = value', got '{line}'")))?;
            let value = value.trim();
            match key.trim() {
                "cells" => out.cells = parse_triple(value)?,
                "extents" => out.extents = parse_triple(value)?,
                "amplitude" => out.amplitude = value.parse().map_err(|_| invalid(format!("bad amplitude '{value}'")))?,
                other => return Err(invalid(format!("unknown mesh key '{other}'"))),
            }
        }
        Ok(out)
    }
}

/// Parses `"a b c"`, `"a,b,c"` or a single value repeated three times.
pub fn parse_triple<T: FromStr + Copy>(s: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split(|c: char| c == ',' || c == 'x' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| invalid(format!("cannot parse '{p}' in '{s}'"))))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [v] => Ok([*v; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(invalid(format!("expected one or three values, got '{s}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_counts() {
        let m = build_cartesian_mesh([1, 1, 1], [1.0; 3]).unwrap();
        assert_eq!((m.n_cells(), m.n_vertices()), (1, 8));
        for v in &m.vertex_coordinates {
            assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
        }
        let m = build_cartesian_mesh([2, 2, 2], [1.0; 3]).unwrap();
        assert_eq!((m.n_cells(), m.n_vertices()), (8, 27));
        let m = build_cartesian_mesh([3, 2, 1], [1.0; 3]).unwrap();
        assert_eq!((m.n_cells(), m.n_vertices()), (6, 24));
        assert!(build_cartesian_mesh([0, 1, 1], [1.0; 3]).is_err());
        assert!(build_cartesian_mesh([1, 1, 1], [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn deformation_keeps_boundary() {
        let m = build_cartesian_mesh([3, 3, 3], [1.0; 3]).unwrap();
        assert_eq!(deform_mesh(&m, 0.0).unwrap(), m);
        let d = deform_mesh(&m, 0.08).unwrap();
        for (a, b) in m.vertex_coordinates.iter().zip(&d.vertex_coordinates) {
            let on_boundary = a.iter().any(|&x| x == 0.0 || x == 1.0);
            if on_boundary {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-15);
                }
            }
        }
        assert!(matches!(deform_mesh(&m, 5.0), Err(Error::InvalidDeformation { .. })));
    }

    #[test]
    fn small_deformation_has_positive_jacobians() {
        let m = deform_mesh(&build_cartesian_mesh([2, 2, 2], [1.0; 3]).unwrap(), 0.05).unwrap();
        let quad = gauss_quadrature(4).unwrap();
        let mut min_det = f64::INFINITY;
        for cell in 0..m.n_cells() {
            let map = m.cell_map(cell).unwrap();
            for (x, _) in tensor_points(&quad) {
                min_det = min_det.min(det3(&map.jacobian(x)));
            }
        }
        assert!(min_det > 0.0);
    }

    #[test]
    fn quadratic_nodes() {
        let m = build_cartesian_mesh([1, 1, 1], [1.0; 3]).unwrap();
        let nodes = quadratic_geometry_nodes(&m, 0).unwrap();
        for (l, n) in nodes.iter().enumerate() {
            assert_eq!(*n, [(l % 3) as f64 * 0.5, ((l / 3) % 3) as f64 * 0.5, (l / 9) as f64 * 0.5]);
        }
        let m = build_cartesian_mesh([1, 1, 1], [0.25; 3]).unwrap();
        let nodes = quadratic_geometry_nodes(&m, 0).unwrap();
        assert_eq!(nodes[26], [0.25; 3]);
        assert_eq!(nodes[13], [0.125; 3]);
        assert!(quadratic_geometry_nodes(&m, 1).is_err());

        let base = build_cartesian_mesh([2, 2, 2], [1.0; 3]).unwrap();
        let d = deform_mesh(&base, 0.05).unwrap();
        let def = d.deformation.unwrap();
        let nodes = quadratic_geometry_nodes(&d, 7).unwrap();
        for (l, n) in nodes.iter().enumerate() {
            let x = [0.5 + (l % 3) as f64 * 0.25, 0.5 + ((l / 3) % 3) as f64 * 0.25, 0.5 + (l / 9) as f64 * 0.25];
            let y = def.apply(x, [1.0; 3]);
            for k in 0..3 {
                assert!((n[k] - y[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn affine_geometry() {
        let quad = gauss_quadrature(2).unwrap();
        let m = build_cartesian_mesh([1, 1, 1], [1.0; 3]).unwrap();
        match geometry_data(&m, 0, GeometryVariant::Affine, &quad).unwrap() {
            GeometryData::Affine { jacobian_inverse, det } => {
                assert!((det - 1.0).abs() < 1e-15);
                for i in 0..3 {
                    for j in 0..3 {
                        let e = if i == j { 1.0 } else { 0.0 };
                        assert!((jacobian_inverse[i][j] - e).abs() < 1e-15);
                    }
                }
            }
            other => panic!("unexpected {other:?}"),
        }
        let GeometryData::FinalTensor { tensor, .. } = geometry_data(&m, 0, GeometryVariant::FinalTensorLoad, &quad).unwrap() else {
            unreachable!()
        };
        for t in &tensor {
            assert!((t[0] - 0.125).abs() < 1e-15 && t[3].abs() < 1e-15);
        }
        // J = h I  =>  tensor = w h I
        let h = 0.5;
        let m = build_cartesian_mesh([2, 2, 2], [1.0; 3]).unwrap();
        let GeometryData::FinalTensor { tensor, .. } = geometry_data(&m, 3, GeometryVariant::FinalTensorLoad, &quad).unwrap() else {
            unreachable!()
        };
        for t in &tensor {
            for d in 0..3 {
                assert!((t[d] - 0.125 * h).abs() < 1e-15);
            }
        }
        let d = deform_mesh(&m, 0.05).unwrap();
        assert!(geometry_data(&d, 0, GeometryVariant::Affine, &quad).is_err());
    }

    #[test]
    fn final_tensor_matches_finite_differences() {
        let m = deform_mesh(&build_cartesian_mesh([2, 2, 2], [1.0; 3]).unwrap(), 0.05).unwrap();
        let quad = gauss_quadrature(3).unwrap();
        for cell in [0, 5] {
            let map = m.cell_map(cell).unwrap();
            let GeometryData::FinalTensor { tensor, .. } = geometry_data(&m, cell, GeometryVariant::FinalTensorLoad, &quad).unwrap() else {
                unreachable!()
            };
            for ((x, w), t) in tensor_points(&quad).zip(&tensor) {
                let eps = 1e-6;
                let mut jac = [[0.0; 3]; 3];
                for j in 0..3 {
                    let (mut xp, mut xm) = (x, x);
                    xp[j] += eps;
                    xm[j] -= eps;
                    let (a, b) = (map.position(xp), map.position(xm));
                    for i in 0..3 {
                        jac[i][j] = (a[i] - b[i]) / (2.0 * eps);
                    }
                }
                let (inv, det) = inverse3(&jac);
                let fd = final_tensor(&inv, w * det);
                let scale = fd[0].abs().max(fd[1].abs()).max(fd[2].abs());
                for k in 0..6 {
                    assert!((fd[k] - t[k]).abs() <= 1e-8 * scale, "{k}: {} vs {}", fd[k], t[k]);
                }
            }
        }
    }

    #[test]
    fn description_round_trip() {
        let d = MeshDescription { cells: [3, 2, 1], extents: [1.0, 0.5, 2.0], amplitude: 0.03 };
        assert_eq!(MeshDescription::from_kv(&d.to_kv()).unwrap(), d);
        assert!(MeshDescription::from_kv("bogus = 1").is_err());
        assert_eq!(parse_triple::<usize>("4").unwrap(), [4, 4, 4]);
        assert_eq!(parse_triple::<usize>("4x2x1").unwrap(), [4, 2, 1]);
    }
}
