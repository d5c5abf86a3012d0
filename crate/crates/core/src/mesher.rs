//! Zero-level-set extraction by marching tetrahedra on a world-space
//! lattice, restricted to cells near the primitives.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::GaussianPrimitive;
use crate::sdf::SdfField;

/// Anything that can be contoured.
pub trait ScalarField: Sync {
    fn values(&self, points: &[Vector3<f64>]) -> Vec<f64>;
    fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64>;
}

impl ScalarField for SdfField {
    fn values(&self, points: &[Vector3<f64>]) -> Vec<f64> {
        self.query_batch(points)
    }

    fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        SdfField::gradient(self, x)
    }
}

/// A closed-form field with its gradient.
pub struct AnalyticField<F, G> {
    pub value: F,
    pub grad: G,
}

impl<F, G> ScalarField for AnalyticField<F, G>
where
    F: Fn(&Vector3<f64>) -> f64 + Sync,
    G: Fn(&Vector3<f64>) -> Vector3<f64> + Sync,
{
    fn values(&self, points: &[Vector3<f64>]) -> Vec<f64> {
        points.par_iter().map(|p| (self.value)(p)).collect()
    }

    fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (self.grad)(x)
    }
}

/// Corner offsets of the unit cube, indexed `x + 2y + 4z`.
const CUBE_CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Six tetrahedra around the 0-7 diagonal. Every cube uses the same
/// diagonal, so shared faces are split identically on both sides.
pub const CUBE_TETRAHEDRA: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

#[derive(Debug, Clone, PartialEq)]
pub struct TetraGrid {
    /// Cells per axis.
    pub resolution: usize,
    pub origin: [f64; 3],
    pub cell_size: f64,
    /// Active cells as linear indices `x + r*(y + r*z)`, ascending.
    pub active: Vec<usize>,
}

impl TetraGrid {
    /// Every cell of the cube `[origin, origin + resolution * cell_size]^3`.
    pub fn dense(origin: [f64; 3], cell_size: f64, resolution: usize) -> Self {
        Self {
            resolution,
            origin,
            cell_size,
            active: (0..resolution.pow(3)).collect(),
        }
    }

    pub fn total_cells(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn active_fraction(&self) -> f64 {
        self.active.len() as f64 / self.total_cells() as f64
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.cell_size * 3f64.sqrt()
    }

    fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let r = self.resolution;
        [cell % r, (cell / r) % r, cell / (r * r)]
    }

    fn vertex_id(&self, v: [usize; 3]) -> usize {
        let n = self.resolution + 1;
        v[0] + n * (v[1] + n * v[2])
    }

    fn vertex_position(&self, id: usize) -> Vector3<f64> {
        let n = self.resolution + 1;
        let v = [id % n, (id / n) % n, id / (n * n)];
        Vector3::from_fn(|a, _| self.origin[a] + v[a] as f64 * self.cell_size)
    }

    fn cell_center(&self, c: [usize; 3]) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.origin[a] + (c[a] as f64 + 0.5) * self.cell_size)
    }
}

/// Cubic lattice around the primitives' means, padded by three times the
/// largest scale, with the active set restricted to cells whose center lies
/// within `radius_sigma * max_scale` of some primitive.
pub fn select_active_cells(primitives: &[GaussianPrimitive], resolution: usize, radius_sigma: f64) -> Result<TetraGrid> {
    if primitives.is_empty() {
        return Err(Error::EmptyInput("no primitives to mesh around".into()));
    }
    if resolution == 0 {
        return Err(Error::InvalidParameter("mesh resolution must be positive".into()));
    }
    if !(radius_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("radius_sigma must be non-negative, got {radius_sigma}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for g in primitives {
        let pad = 3.0 * g.max_scale();
        for a in 0..3 {
            lo[a] = lo[a].min(g.mu[a] - pad);
            hi[a] = hi[a].max(g.mu[a] + pad);
        }
    }
    let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-6);
    let cell = side / resolution as f64;
    let origin: [f64; 3] = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]) - 0.5 * side);
    let mut grid = TetraGrid::dense(origin, cell, resolution);
    if radius_sigma.is_infinite() {
        return Ok(grid);
    }
    let r = resolution;
    let mut mark = vec![false; r * r * r];
    for g in primitives {
        let radius = radius_sigma * g.max_scale();
        let mu = g.mean();
        let range = |a: usize| {
            let lo_c = ((g.mu[a] - radius - origin[a]) / cell - 0.5).floor().max(0.0) as usize;
            let hi_c = (((g.mu[a] + radius - origin[a]) / cell - 0.5).ceil().max(0.0) as usize).min(r - 1);
            lo_c..=hi_c
        };
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    if (grid.cell_center([x, y, z]) - mu).norm() <= radius {
                        mark[x + r * (y + r * z)] = true;
                    }
                }
            }
        }
    }
    grid.active = (0..mark.len()).filter(|&i| mark[i]).collect();
    if grid.active.is_empty() {
        return Err(Error::EmptyResult(
            "no lattice cell lies near a primitive; increase the resolution or radius_sigma".into(),
        ));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let p = |i: u32| Vector3::from(self.vertices[i as usize]);
        0.5 * (p(t[1]) - p(t[0])).cross(&(p(t[2]) - p(t[0]))).norm()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_use_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut m = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Edges not shared by exactly two triangles.
    pub fn non_manifold_edges(&self) -> Vec<((u32, u32), usize)> {
        let mut v: Vec<_> = self.edge_use_counts().into_iter().filter(|(_, c)| *c != 2).collect();
        v.sort();
        v
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
        if self.triangles.is_empty() {
            return Err(Error::EmptyInput("cannot sample an empty mesh".into()));
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in &self.triangles {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        let p = |i: u32| Vector3::from(self.vertices[i as usize]);
        Ok((0..n)
            .map(|_| {
                let x = rng.random_range(0.0..acc);
                let k = cdf.partition_point(|c| *c <= x).min(self.triangles.len() - 1);
                let t = self.triangles[k];
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let q = p(t[0]) + (p(t[1]) - p(t[0])) * u + (p(t[2]) - p(t[0])) * v;
                [q.x, q.y, q.z]
            })
            .collect())
    }

    /// Binary little-endian PLY with positions, normals and faces.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        );
        let mut bytes = header.into_bytes();
        for (v, n) in self.vertices.iter().zip(&self.normals) {
            for c in v.iter().chain(n) {
                bytes.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for t in &self.triangles {
            bytes.push(3);
            for i in t {
                bytes.extend_from_slice(&(*i as i32).to_le_bytes());
            }
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the layout written by [`Self::write_ply`].
    pub fn read_ply(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Dataset {
            entry: path.display().to_string(),
            reason: reason.to_string(),
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let (mut nv, mut nf) = (None, None);
        let mut line = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(bad("PLY header has no end_header"));
            }
            let l = line.trim();
            if l == "end_header" {
                break;
            }
            if let Some(rest) = l.strip_prefix("element vertex ") {
                nv = rest.parse::<usize>().ok();
            } else if let Some(rest) = l.strip_prefix("element face ") {
                nf = rest.parse::<usize>().ok();
            } else if l.starts_with("format") && !l.contains("binary_little_endian") {
                return Err(bad("only binary little-endian PLY is supported"));
            }
        }
        let (nv, nf) = (nv.ok_or_else(|| bad("missing vertex count"))?, nf.ok_or_else(|| bad("missing face count"))?);
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        if body.len() != nv * 24 + nf * 13 {
            return Err(bad("PLY payload size does not match its header"));
        }
        let f32_at = |o: usize| f32::from_le_bytes([body[o], body[o + 1], body[o + 2], body[o + 3]]) as f64;
        let mut mesh = TriangleMesh::default();
        for i in 0..nv {
            let o = i * 24;
            mesh.vertices.push([f32_at(o), f32_at(o + 4), f32_at(o + 8)]);
            mesh.normals.push([f32_at(o + 12), f32_at(o + 16), f32_at(o + 20)]);
        }
        for k in 0..nf {
            let o = nv * 24 + k * 13;
            if body[o] != 3 {
                return Err(bad("only triangular faces are supported"));
            }
            let idx = |j: usize| i32::from_le_bytes([body[o + 1 + 4 * j], body[o + 2 + 4 * j], body[o + 3 + 4 * j], body[o + 4 + 4 * j]]);
            let t = [idx(0), idx(1), idx(2)];
            if t.iter().any(|&i| i < 0 || i as usize >= nv) {
                return Err(bad("face index out of range"));
            }
            mesh.triangles.push([t[0] as u32, t[1] as u32, t[2] as u32]);
        }
        Ok(mesh)
    }
}

/// Per-cell triangles as pairs of lattice vertex ids (edge endpoints).
type EdgeTriangle = [(usize, usize); 3];

/// Triangles of one tetrahedron given corner ids, positions and values.
fn tetra_triangles(ids: [usize; 4], pos: [Vector3<f64>; 4], val: [f64; 4], out: &mut Vec<EdgeTriangle>) {
    let inside: Vec<usize> = (0..4).filter(|&i| val[i] < 0.0).collect();
    let outside: Vec<usize> = (0..4).filter(|&i| val[i] >= 0.0).collect();
    // A crossing on an exactly-zero corner is that corner, whichever edge produced it.
    let key = |a: usize, b: usize| {
        if val[b] == 0.0 {
            (ids[b], ids[b])
        } else {
            (ids[a].min(ids[b]), ids[a].max(ids[b]))
        }
    };
    let crossing = |a: usize, b: usize| {
        let t = val[a] / (val[a] - val[b]);
        pos[a] + (pos[b] - pos[a]) * t
    };
    let centroid = |s: &[usize]| s.iter().map(|&i| pos[i]).sum::<Vector3<f64>>() / s.len() as f64;
    let mut emit = |tri: [(usize, usize); 3]| {
        let p: Vec<Vector3<f64>> = tri.iter().map(|&(a, b)| crossing(a, b)).collect();
        let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
        if 0.5 * n.norm() < 1e-12 {
            return;
        }
        let outward = centroid(&outside) - centroid(&inside);
        let e = [key(tri[0].0, tri[0].1), key(tri[1].0, tri[1].1), key(tri[2].0, tri[2].1)];
        if e[0] == e[1] || e[1] == e[2] || e[0] == e[2] {
            return;
        }
        out.push(if n.dot(&outward) >= 0.0 { e } else { [e[0], e[2], e[1]] });
    };
    match inside.len() {
        1 | 3 => {
            let (lone, rest) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
            emit([(lone, rest[0]), (lone, rest[1]), (lone, rest[2])]);
        }
        2 => {
            let (a, b) = (inside[0], inside[1]);
            let (c, d) = (outside[0], outside[1]);
            // Quad a-c, a-d, b-d, b-c split along a fixed diagonal.
            emit([(a, c), (a, d), (b, d)]);
            emit([(a, c), (b, d), (b, c)]);
        }
        _ => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshStats {
    pub active_cells: usize,
    pub total_cells: usize,
    pub active_fraction: f64,
    pub tetrahedra_visited: usize,
    pub seconds: f64,
}

/// Contours the zero level set over the grid's active cells.
pub fn marching_tetrahedra(grid: &TetraGrid, field: &dyn ScalarField) -> TriangleMesh {
    let r = grid.resolution;
    let n = r + 1;
    let mut needed = vec![false; n * n * n];
    for &cell in &grid.active {
        let c = grid.cell_coords(cell);
        for o in CUBE_CORNERS {
            needed[grid.vertex_id([c[0] + o[0], c[1] + o[1], c[2] + o[2]])] = true;
        }
    }
    let ids: Vec<usize> = (0..needed.len()).filter(|&i| needed[i]).collect();
    let points: Vec<Vector3<f64>> = ids.iter().map(|&i| grid.vertex_position(i)).collect();
    let vals = field.values(&points);
    let mut value_at: HashMap<usize, f64> = HashMap::with_capacity(ids.len());
    for (i, v) in ids.iter().zip(vals) {
        value_at.insert(*i, v);
    }

    let per_cell: Vec<Vec<EdgeTriangle>> = grid
        .active
        .par_iter()
        .map(|&cell| {
            let c = grid.cell_coords(cell);
            let corner_ids: [usize; 8] =
                std::array::from_fn(|k| grid.vertex_id([c[0] + CUBE_CORNERS[k][0], c[1] + CUBE_CORNERS[k][1], c[2] + CUBE_CORNERS[k][2]]));
            let mut out = Vec::new();
            for tet in CUBE_TETRAHEDRA {
                let tids = tet.map(|k| corner_ids[k]);
                let pos = tids.map(|i| grid.vertex_position(i));
                let val = tids.map(|i| value_at[&i]);
                tetra_triangles(tids, pos, val, &mut out);
            }
            out
        })
        .collect();

    let mut index_of: HashMap<(usize, usize), u32> = HashMap::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut triangles = Vec::new();
    for tris in per_cell {
        for tri in tris {
            let t = tri.map(|e| {
                *index_of.entry(e).or_insert_with(|| {
                    edges.push(e);
                    (edges.len() - 1) as u32
                })
            });
            triangles.push(t);
        }
    }
    let vertices: Vec<[f64; 3]> = edges
        .iter()
        .map(|&(a, b)| {
            let (va, vb) = (value_at[&a], value_at[&b]);
            let (pa, pb) = (grid.vertex_position(a), grid.vertex_position(b));
            let p = if a == b { pa } else { pa + (pb - pa) * (va / (va - vb)) };
            [p.x, p.y, p.z]
        })
        .collect();
    let normals = vertices
        .par_iter()
        .map(|v| {
            let g = field.gradient(&Vector3::from(*v));
            let len = g.norm();
            if len > 0.0 {
                [g.x / len, g.y / len, g.z / len]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    TriangleMesh {
        vertices,
        normals,
        triangles,
    }
}

/// Active-cell selection followed by contouring; empty meshes are an error.
pub fn extract_mesh(
    primitives: &[GaussianPrimitive],
    field: &dyn ScalarField,
    resolution: usize,
    radius_sigma: f64,
) -> Result<(TriangleMesh, MeshStats)> {
    let start = Instant::now();
    let grid = select_active_cells(primitives, resolution, radius_sigma)?;
    let mesh = marching_tetrahedra(&grid, field);
    let stats = MeshStats {
        active_cells: grid.active.len(),
        total_cells: grid.total_cells(),
        active_fraction: grid.active_fraction(),
        tetrahedra_visited: grid.active.len() * CUBE_TETRAHEDRA.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    if mesh.is_empty() {
        return Err(Error::EmptyResult(format!(
            "no zero crossing in {} active cells; increase the resolution or radius_sigma",
            stats.active_cells
        )));
    }
    Ok((mesh, stats))
}

/// Half the sum of the two directed mean nearest-neighbor distances.
pub fn chamfer_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chamfer distance needs two non-empty point sets".into()));
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(to);
        let total: f64 = from
            .par_chunks(4096)
            .map(|chunk| chunk.iter().map(|q| tree.nearest_one::<SquaredEuclidean>(q).distance.sqrt()).sum::<f64>())
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        total / from.len() as f64
    };
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::IDENTITY_QUAT;

    fn sphere(radius: f64) -> AnalyticField<impl Fn(&Vector3<f64>) -> f64 + Sync, impl Fn(&Vector3<f64>) -> Vector3<f64> + Sync> {
        AnalyticField {
            value: move |p: &Vector3<f64>| p.norm() - radius,
            grad: |p: &Vector3<f64>| p.normalize(),
        }
    }

    #[test]
    fn all_positive_tetrahedron_is_empty() {
        let mut out = Vec::new();
        let pos = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        tetra_triangles([0, 1, 2, 3], pos, [1.0, 2.0, 0.0, 3.0], &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn one_negative_corner_cuts_midpoints() {
        let grid = TetraGrid::dense([0.0; 3], 1.0, 1);
        // Field negative only at the origin corner, +1 elsewhere at the lattice.
        let f = AnalyticField {
            value: |p: &Vector3<f64>| if p.norm() < 1e-9 { -1.0 } else { 1.0 },
            grad: |_: &Vector3<f64>| Vector3::x(),
        };
        let mesh = marching_tetrahedra(&grid, &f);
        assert!(!mesh.is_empty());
        // Every crossing is the midpoint of an edge leaving the origin corner.
        for v in &mesh.vertices {
            assert!(v.iter().all(|c| *c == 0.0 || *c == 0.5), "{v:?}");
        }
    }

    #[test]
    fn sphere_is_closed_and_on_surface() {
        let res = 16;
        let grid = TetraGrid::dense([-1.0; 3], 2.0 / res as f64, res);
        let mesh = marching_tetrahedra(&grid, &sphere(0.5));
        assert!(mesh.non_manifold_edges().is_empty());
        for v in &mesh.vertices {
            assert!((Vector3::from(*v).norm() - 0.5).abs() < grid.cell_diagonal());
        }
        // Orientation: faces point away from the center.
        for t in &mesh.triangles {
            let p = |i: u32| Vector3::from(mesh.vertices[i as usize]);
            let n = (p(t[1]) - p(t[0])).cross(&(p(t[2]) - p(t[0])));
            assert!(n.dot(&(p(t[0]) + p(t[1]) + p(t[2]))) > 0.0);
        }
    }

    #[test]
    fn selection_matches_constructive_definition() {
        let g = GaussianPrimitive::isotropic([0.0; 3], 0.1, [0.5; 3], 1.0);
        let far = GaussianPrimitive::isotropic([1.0, 1.0, 1.0], 0.1, [0.5; 3], 1.0);
        let grid = select_active_cells(&[g.clone(), far], 40, 3.0).unwrap();
        for cell in 0..grid.total_cells() {
            let c = grid.cell_center(grid.cell_coords(cell));
            let want = c.norm() <= 0.3 || (c - Vector3::new(1.0, 1.0, 1.0)).norm() <= 0.3;
            assert_eq!(grid.active.binary_search(&cell).is_ok(), want, "cell {cell}");
        }
    }

    #[test]
    fn infinite_radius_is_dense() {
        let g = GaussianPrimitive::new([0.2, 0.0, 0.0], IDENTITY_QUAT, [0.1, 0.2, 0.3], [0.5; 3], 1.0);
        let grid = select_active_cells(&[g], 8, f64::INFINITY).unwrap();
        assert_eq!(grid.active.len(), 512);
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer_distance(&[[0.0; 3]], &[[0.0; 3]]).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 1.0);
        let c = chamfer_distance(&[[0.0; 3], [2.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        assert!(chamfer_distance(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let grid = TetraGrid::dense([-1.0; 3], 0.25, 8);
        let mesh = marching_tetrahedra(&grid, &sphere(0.6));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        mesh.write_ply(&path).unwrap();
        let back = TriangleMesh::read_ply(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }
}
