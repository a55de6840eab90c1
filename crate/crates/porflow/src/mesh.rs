//! Structured grids (uniform intervals in 1D, rectangles in 2D) with nodal
//! multilinear basis functions, boundary tagging, and Gauss quadrature.
//!
//! Node ordering is lexicographic by coordinates (x fastest), so meshes are
//! bitwise reproducible across runs.

use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh dimension must be 1 or 2, got {0}")]
    BadDimension(usize),
    #[error("expected {expected} {what} entries, got {got}")]
    SpecLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("extent along axis {axis} must be positive, got {value}")]
    BadExtent { axis: usize, value: f64 },
    #[error("cell count along axis {axis} must be positive")]
    BadCellCount { axis: usize },
    #[error("field has {got} coefficients, mesh has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
}

/// Boundary piece classification: `Gamma1` carries Dirichlet data for both
/// the chemical potential and the pressure, `Gamma2` carries phase fluxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    Gamma1,
    Gamma2,
}

/// Mesh description: sides are ordered `[x-min, x-max]` in 1D and
/// `[x-min, x-max, y-min, y-max]` in 2D.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSpec {
    pub dim: usize,
    pub extents: Vec<f64>,
    pub cells: Vec<usize>,
    pub side_tags: Vec<BoundaryTag>,
}

const INV_SQRT3: f64 = 0.577_350_269_189_625_8;

/// One quadrature point of a cell: global position, weight (including the
/// Jacobian), and the values/gradients of the local basis functions.
#[derive(Debug, Clone, Copy)]
pub struct CellQuad {
    pub x: [f64; 2],
    pub weight: f64,
    pub basis: [f64; 4],
    pub grad: [[f64; 2]; 4],
}

/// One quadrature point of a boundary face.
#[derive(Debug, Clone, Copy)]
pub struct FaceQuad {
    pub x: [f64; 2],
    pub weight: f64,
    pub basis: [f64; 2],
}

/// A boundary face: a single node in 1D, an edge in 2D.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryFace {
    pub nodes: [usize; 2],
    pub n_nodes: usize,
    pub tag: BoundaryTag,
    pub side: usize,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    extents: [f64; 2],
    cells: [usize; 2],
    h: [f64; 2],
    side_tags: Vec<BoundaryTag>,
    faces: Vec<BoundaryFace>,
    gamma1_node: Vec<bool>,
    has_dirichlet: bool,
    /// Reference basis values at the 2^dim Gauss points (same for all cells).
    ref_basis: Vec<[f64; 4]>,
    ref_grad: Vec<[[f64; 2]; 4]>,
    /// Local Gauss offsets from the cell's low corner.
    ref_offset: Vec<[f64; 2]>,
    quad_weight: f64,
}

impl Mesh {
    pub fn build(spec: &MeshSpec) -> Result<Self, MeshError> {
        let dim = spec.dim;
        if dim != 1 && dim != 2 {
            return Err(MeshError::BadDimension(dim));
        }
        if spec.extents.len() != dim {
            return Err(MeshError::SpecLength {
                what: "extent",
                expected: dim,
                got: spec.extents.len(),
            });
        }
        for (axis, &e) in spec.extents.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                return Err(MeshError::BadExtent { axis, value: e });
            }
        }
        if spec.cells.len() != dim {
            return Err(MeshError::SpecLength {
                what: "cell count",
                expected: dim,
                got: spec.cells.len(),
            });
        }
        for (axis, &c) in spec.cells.iter().enumerate() {
            if c == 0 {
                return Err(MeshError::BadCellCount { axis });
            }
        }
        if spec.side_tags.len() != 2 * dim {
            return Err(MeshError::SpecLength {
                what: "boundary tag",
                expected: 2 * dim,
                got: spec.side_tags.len(),
            });
        }

        let mut extents = [1.0, 1.0];
        let mut cells = [1usize, 1];
        extents[..dim].copy_from_slice(&spec.extents);
        cells[..dim].copy_from_slice(&spec.cells);
        if dim == 1 {
            cells[1] = 0;
        }
        let h = [
            extents[0] / cells[0] as f64,
            if dim == 2 {
                extents[1] / cells[1] as f64
            } else {
                0.0
            },
        ];

        let (ref_basis, ref_grad, ref_offset, quad_weight) = reference_tables(dim, h);

        let mut mesh = Self {
            dim,
            extents,
            cells,
            h,
            side_tags: spec.side_tags.clone(),
            faces: Vec::new(),
            gamma1_node: Vec::new(),
            has_dirichlet: spec.side_tags.contains(&BoundaryTag::Gamma1),
            ref_basis,
            ref_grad,
            ref_offset,
            quad_weight,
        };
        mesh.faces = mesh.build_faces();
        mesh.gamma1_node = mesh.tag_gamma1_nodes();
        Ok(mesh)
    }

    fn build_faces(&self) -> Vec<BoundaryFace> {
        let mut faces = Vec::new();
        if self.dim == 1 {
            let last = self.cells[0];
            faces.push(BoundaryFace {
                nodes: [0, 0],
                n_nodes: 1,
                tag: self.side_tags[0],
                side: 0,
            });
            faces.push(BoundaryFace {
                nodes: [last, 0],
                n_nodes: 1,
                tag: self.side_tags[1],
                side: 1,
            });
        } else {
            let npx = self.cells[0] + 1;
            let node = |ix: usize, iy: usize| iy * npx + ix;
            for iy in 0..self.cells[1] {
                faces.push(BoundaryFace {
                    nodes: [node(0, iy), node(0, iy + 1)],
                    n_nodes: 2,
                    tag: self.side_tags[0],
                    side: 0,
                });
                faces.push(BoundaryFace {
                    nodes: [node(self.cells[0], iy), node(self.cells[0], iy + 1)],
                    n_nodes: 2,
                    tag: self.side_tags[1],
                    side: 1,
                });
            }
            for ix in 0..self.cells[0] {
                faces.push(BoundaryFace {
                    nodes: [node(ix, 0), node(ix + 1, 0)],
                    n_nodes: 2,
                    tag: self.side_tags[2],
                    side: 2,
                });
                faces.push(BoundaryFace {
                    nodes: [node(ix, self.cells[1]), node(ix + 1, self.cells[1])],
                    n_nodes: 2,
                    tag: self.side_tags[3],
                    side: 3,
                });
            }
        }
        faces
    }

    fn tag_gamma1_nodes(&self) -> Vec<bool> {
        let mut marks = vec![false; self.n_nodes()];
        for face in &self.faces {
            if face.tag == BoundaryTag::Gamma1 {
                for &n in &face.nodes[..face.n_nodes] {
                    marks[n] = true;
                }
            }
        }
        marks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents[..self.dim]
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h[..self.dim]
    }

    pub fn n_nodes(&self) -> usize {
        if self.dim == 1 {
            self.cells[0] + 1
        } else {
            (self.cells[0] + 1) * (self.cells[1] + 1)
        }
    }

    pub fn n_cells(&self) -> usize {
        if self.dim == 1 {
            self.cells[0]
        } else {
            self.cells[0] * self.cells[1]
        }
    }

    pub fn nodes_per_cell(&self) -> usize {
        1 << self.dim
    }

    pub fn domain_measure(&self) -> f64 {
        if self.dim == 1 {
            self.extents[0]
        } else {
            self.extents[0] * self.extents[1]
        }
    }

    pub fn has_dirichlet(&self) -> bool {
        self.has_dirichlet
    }

    pub fn is_gamma1_node(&self, node: usize) -> bool {
        self.gamma1_node[node]
    }

    pub fn node_coord(&self, node: usize) -> [f64; 2] {
        if self.dim == 1 {
            [node as f64 * self.h[0], 0.0]
        } else {
            let npx = self.cells[0] + 1;
            let ix = node % npx;
            let iy = node / npx;
            [ix as f64 * self.h[0], iy as f64 * self.h[1]]
        }
    }

    /// Global node indices of a cell; only the first `nodes_per_cell` entries
    /// are meaningful. Local order in 2D: low corner, +x, +y, +x+y.
    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        if self.dim == 1 {
            [cell, cell + 1, 0, 0]
        } else {
            let npx = self.cells[0] + 1;
            let cx = cell % self.cells[0];
            let cy = cell / self.cells[0];
            let base = cy * npx + cx;
            [base, base + 1, base + npx, base + npx + 1]
        }
    }

    fn cell_origin(&self, cell: usize) -> [f64; 2] {
        if self.dim == 1 {
            [cell as f64 * self.h[0], 0.0]
        } else {
            let cx = cell % self.cells[0];
            let cy = cell / self.cells[0];
            [cx as f64 * self.h[0], cy as f64 * self.h[1]]
        }
    }

    /// Iterates the Gauss points of a cell (2 per axis, exact for products of
    /// two basis functions).
    pub fn cell_quads(&self, cell: usize) -> impl Iterator<Item = CellQuad> + '_ {
        let origin = self.cell_origin(cell);
        (0..self.ref_basis.len()).map(move |q| CellQuad {
            x: [
                origin[0] + self.ref_offset[q][0],
                origin[1] + self.ref_offset[q][1],
            ],
            weight: self.quad_weight,
            basis: self.ref_basis[q],
            grad: self.ref_grad[q],
        })
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.faces
    }

    /// Gauss points of a boundary face (a single point with weight 1 in 1D).
    pub fn face_quads(&self, face: &BoundaryFace) -> Vec<FaceQuad> {
        if self.dim == 1 {
            vec![FaceQuad {
                x: self.node_coord(face.nodes[0]),
                weight: 1.0,
                basis: [1.0, 0.0],
            }]
        } else {
            let a = self.node_coord(face.nodes[0]);
            let b = self.node_coord(face.nodes[1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            [-INV_SQRT3, INV_SQRT3]
                .iter()
                .map(|&xi| {
                    let t = 0.5 * (1.0 + xi);
                    FaceQuad {
                        x: [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])],
                        weight: 0.5 * len,
                        basis: [1.0 - t, t],
                    }
                })
                .collect()
        }
    }

    /// Nodal interpolation of a function of position.
    pub fn interpolate(&self, f: impl Fn(&[f64; 2]) -> f64) -> FieldCoefficients {
        let values = (0..self.n_nodes())
            .map(|n| f(&self.node_coord(n)))
            .collect();
        FieldCoefficients { values }
    }

    /// Quadrature of `field * weight` over the domain (weight 1 if `None`).
    pub fn integrate(
        &self,
        field: &FieldCoefficients,
        weight: Option<&FieldCoefficients>,
    ) -> Result<f64, MeshError> {
        self.check_len(field)?;
        if let Some(w) = weight {
            self.check_len(w)?;
        }
        let mut acc = 0.0;
        for cell in 0..self.n_cells() {
            let nodes = self.cell_nodes(cell);
            for q in self.cell_quads(cell) {
                let fv = field.eval(&q, &nodes, self.nodes_per_cell());
                let wv = weight.map_or(1.0, |w| w.eval(&q, &nodes, self.nodes_per_cell()));
                acc += q.weight * fv * wv;
            }
        }
        Ok(acc)
    }

    pub fn check_len(&self, field: &FieldCoefficients) -> Result<(), MeshError> {
        if field.len() == self.n_nodes() {
            Ok(())
        } else {
            Err(MeshError::LengthMismatch {
                expected: self.n_nodes(),
                got: field.len(),
            })
        }
    }

    /// Writes node coordinates as CSV (`node,x[,y]`).
    pub fn write_node_csv(&self, out: &mut impl Write) -> io::Result<()> {
        if self.dim == 1 {
            writeln!(out, "node,x")?;
        } else {
            writeln!(out, "node,x,y")?;
        }
        for n in 0..self.n_nodes() {
            let c = self.node_coord(n);
            if self.dim == 1 {
                writeln!(out, "{},{:.16e}", n, c[0])?;
            } else {
                writeln!(out, "{},{:.16e},{:.16e}", n, c[0], c[1])?;
            }
        }
        Ok(())
    }
}

fn reference_tables(
    dim: usize,
    h: [f64; 2],
) -> (Vec<[f64; 4]>, Vec<[[f64; 2]; 4]>, Vec<[f64; 2]>, f64) {
    let pts = [0.5 * (1.0 - INV_SQRT3), 0.5 * (1.0 + INV_SQRT3)];
    let mut basis = Vec::new();
    let mut grad = Vec::new();
    let mut offset = Vec::new();
    if dim == 1 {
        for &tx in &pts {
            basis.push([1.0 - tx, tx, 0.0, 0.0]);
            grad.push([[-1.0 / h[0], 0.0], [1.0 / h[0], 0.0], [0.0; 2], [0.0; 2]]);
            offset.push([tx * h[0], 0.0]);
        }
        (basis, grad, offset, 0.5 * h[0])
    } else {
        for &ty in &pts {
            for &tx in &pts {
                let n = [
                    (1.0 - tx) * (1.0 - ty),
                    tx * (1.0 - ty),
                    (1.0 - tx) * ty,
                    tx * ty,
                ];
                let g = [
                    [-(1.0 - ty) / h[0], -(1.0 - tx) / h[1]],
                    [(1.0 - ty) / h[0], -tx / h[1]],
                    [-ty / h[0], (1.0 - tx) / h[1]],
                    [ty / h[0], tx / h[1]],
                ];
                basis.push(n);
                grad.push(g);
                offset.push([tx * h[0], ty * h[1]]);
            }
        }
        (basis, grad, offset, 0.25 * h[0] * h[1])
    }
}

/// Nodal coefficient vector in mesh node order.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldCoefficients {
    values: Vec<f64>,
}

impl FieldCoefficients {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn constant(n: usize, v: f64) -> Self {
        Self { values: vec![v; n] }
    }

    pub fn from_values(values: Vec<f64>, mesh: &Mesh) -> Result<Self, MeshError> {
        if values.len() != mesh.n_nodes() {
            return Err(MeshError::LengthMismatch {
                expected: mesh.n_nodes(),
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// Value at a cell quadrature point.
    pub fn eval(&self, q: &CellQuad, nodes: &[usize; 4], n_local: usize) -> f64 {
        let mut v = 0.0;
        for i in 0..n_local {
            v += self.values[nodes[i]] * q.basis[i];
        }
        v
    }

    /// Gradient at a cell quadrature point.
    pub fn grad(&self, q: &CellQuad, nodes: &[usize; 4], n_local: usize) -> [f64; 2] {
        let mut g = [0.0, 0.0];
        for i in 0..n_local {
            g[0] += self.values[nodes[i]] * q.grad[i][0];
            g[1] += self.values[nodes[i]] * q.grad[i][1];
        }
        g
    }

    /// Trace value at a boundary-face quadrature point.
    pub fn eval_face(&self, q: &FaceQuad, face: &BoundaryFace) -> f64 {
        let mut v = 0.0;
        for i in 0..face.n_nodes {
            v += self.values[face.nodes[i]] * q.basis[i];
        }
        v
    }

    /// Mapped copy; errors from the map propagate.
    pub fn try_map<E>(&self, mut f: impl FnMut(f64) -> Result<f64, E>) -> Result<Self, E> {
        let mut values = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            values.push(f(v)?);
        }
        Ok(Self { values })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl std::ops::Index<usize> for FieldCoefficients {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for FieldCoefficients {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}
