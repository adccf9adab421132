//! Regular signed-distance grid.
//!
//! Distances are sampled exactly (nearest triangle through a BVH, sign from
//! scanline ray parity voted over the three axes) on the grid nodes and at
//! every cell center. Queries come in two flavours: trilinear interpolation
//! of the nodes plus a per-cell hat correction that reproduces the exact
//! cell-center sample, for distance values; and a cubic B-spline of the node
//! samples for normals, which keeps normals C¹ so that quantities built from
//! them can be differentiated.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Point3, Vector3};

use super::mesh::{ray_x_intersection, Aabb, TriMesh, TriangleBvh};
use super::GeometryError;

pub const SDF_MAGIC: &[u8; 4] = b"GFSD";

/// Samples on nodes `origin + spacing * (i, j, k)`, stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub origin: Point3<f64>,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    /// Per cell: exact center sample minus the mean of its eight corners.
    /// Empty when no center samples are available.
    pub center_corrections: Vec<f64>,
}

/// Padding, in cells, between the mesh bounding box and the grid border.
pub const GRID_PADDING_CELLS: usize = 5;

impl SdfGrid {
    /// Samples the signed distance of a closed mesh. The largest bounding-box
    /// axis gets `resolution` nodes including the padding.
    pub fn from_mesh(mesh: &TriMesh, bvh: &TriangleBvh, resolution: usize) -> Result<Self, GeometryError> {
        if resolution < 16 {
            return Err(GeometryError::InvalidArgument(format!(
                "grid resolution must be at least 16, got {resolution}"
            )));
        }
        let bbox = mesh.bounding_box();
        let ext = bbox.extent();
        let max_ext = ext.max();
        if !(max_ext > 0.0) {
            return Err(GeometryError::DegenerateGeometry("mesh has zero extent".into()));
        }
        let pad = GRID_PADDING_CELLS;
        let spacing = max_ext / (resolution - 1 - 2 * pad) as f64;
        let mut dims = [0usize; 3];
        let mut origin = Point3::origin();
        let center = bbox.center();
        for k in 0..3 {
            let n = ((ext[k] / spacing - 1e-9).ceil() as usize).max(1) + 1 + 2 * pad;
            // Even node counts put the box center on a cell center.
            dims[k] = n + n % 2;
            origin[k] = center[k] - 0.5 * (dims[k] - 1) as f64 * spacing;
        }
        let mut grid = SdfGrid::sample(mesh, bvh, origin, spacing, dims);
        let centers = SdfGrid::sample(
            mesh,
            bvh,
            origin + Vector3::repeat(0.5 * spacing),
            spacing,
            [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        );
        let mut corr = centers.values.clone();
        for k in 0..dims[2] - 1 {
            for j in 0..dims[1] - 1 {
                for i in 0..dims[0] - 1 {
                    let mut mean = 0.0;
                    for c in 0..8 {
                        mean += grid.values[grid.index(i + (c & 1), j + ((c >> 1) & 1), k + (c >> 2))];
                    }
                    corr[centers.index(i, j, k)] -= mean / 8.0;
                }
            }
        }
        grid.center_corrections = corr;
        Ok(grid)
    }

    fn sample(mesh: &TriMesh, bvh: &TriangleBvh, origin: Point3<f64>, spacing: f64, dims: [usize; 3]) -> SdfGrid {
        let n = dims[0] * dims[1] * dims[2];
        let mut grid = SdfGrid { origin, spacing, dims, values: vec![0.0; n], center_corrections: Vec::new() };
        let inside_votes = grid.inside_votes(mesh);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.node(i, j, k);
                    let (_, d) = bvh.closest(mesh, &p);
                    let idx = grid.index(i, j, k);
                    grid.values[idx] = if inside_votes[idx] >= 2 { -d } else { d };
                }
            }
        }
        grid
    }

    fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + (self.dims[0] - 1) * (j + (self.dims[1] - 1) * k)
    }

    /// Per-node count (0..=3) of axis-aligned scanlines that classify the
    /// node as inside.
    fn inside_votes(&self, mesh: &TriMesh) -> Vec<u8> {
        let mut votes = vec![0u8; self.values.len()];
        let h = self.spacing;
        // Permutations mapping (along, a, b) to world axes.
        for (along, a, b) in [(0usize, 1usize, 2usize), (1, 2, 0), (2, 0, 1)] {
            let tris: Vec<[Point3<f64>; 3]> = (0..mesh.triangles.len())
                .map(|t| {
                    let tri = mesh.triangle(t);
                    tri.map(|p| Point3::new(p[along], p[a], p[b]))
                })
                .collect();
            let tri_boxes: Vec<Aabb> = tris.iter().map(|t| Aabb::from_points(t)).collect();
            let mut crossings = Vec::new();
            for jb in 0..self.dims[b] {
                for ja in 0..self.dims[a] {
                    let ya = self.origin[a] + ja as f64 * h + 1.2345e-6 * h;
                    let yb = self.origin[b] + jb as f64 * h + 2.7183e-6 * h;
                    let o = Point3::new(0.0, ya, yb);
                    crossings.clear();
                    for (t, bx) in tris.iter().zip(&tri_boxes) {
                        if ya < bx.min.y || ya > bx.max.y || yb < bx.min.z || yb > bx.max.z {
                            continue;
                        }
                        if let Some(x) = ray_x_intersection(&o, &t[0], &t[1], &t[2]) {
                            crossings.push(x);
                        }
                    }
                    crossings.sort_by(f64::total_cmp);
                    let mut c = 0;
                    for i in 0..self.dims[along] {
                        let x = self.origin[along] + i as f64 * h;
                        while c < crossings.len() && crossings[c] < x {
                            c += 1;
                        }
                        if c % 2 == 1 {
                            let mut ijk = [0usize; 3];
                            ijk[along] = i;
                            ijk[a] = ja;
                            ijk[b] = jb;
                            votes[self.index(ijk[0], ijk[1], ijk[2])] += 1;
                        }
                    }
                }
            }
        }
        votes
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    #[inline]
    fn at(&self, i: isize, j: isize, k: isize) -> f64 {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        self.values[self.index(c(i, self.dims[0]), c(j, self.dims[1]), c(k, self.dims[2]))]
    }

    pub fn bounds(&self) -> Aabb {
        let max = self.node(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        Aabb { min: self.origin, max }
    }

    /// Trilinear value and its (piecewise constant per cell) gradient.
    /// Outside the grid the boundary value is extended by the distance to
    /// the grid box.
    pub fn trilinear(&self, p: &Point3<f64>) -> (f64, Vector3<f64>) {
        let bounds = self.bounds();
        let q = bounds.clamp(p);
        let (v, g) = self.trilinear_inside(&q);
        let off = p - q;
        let out = off.norm();
        if out > 0.0 {
            // Gradient: in-grid gradient on clamped axes replaced by the
            // outward direction.
            let mut grad = g;
            for k in 0..3 {
                if off[k] != 0.0 {
                    grad[k] = 0.0;
                }
            }
            (v + out, grad + off / out)
        } else {
            (v, g)
        }
    }

    fn trilinear_inside(&self, p: &Point3<f64>) -> (f64, Vector3<f64>) {
        let h = self.spacing;
        let mut cell = [0isize; 3];
        let mut u = [0.0f64; 3];
        for k in 0..3 {
            let s = (p[k] - self.origin[k]) / h;
            let c = (s.floor() as isize).clamp(0, self.dims[k] as isize - 2);
            cell[k] = c;
            u[k] = (s - c as f64).clamp(0.0, 1.0);
        }
        let [i, j, k] = cell;
        let c000 = self.at(i, j, k);
        let c100 = self.at(i + 1, j, k);
        let c010 = self.at(i, j + 1, k);
        let c110 = self.at(i + 1, j + 1, k);
        let c001 = self.at(i, j, k + 1);
        let c101 = self.at(i + 1, j, k + 1);
        let c011 = self.at(i, j + 1, k + 1);
        let c111 = self.at(i + 1, j + 1, k + 1);
        let [x, y, z] = u;
        let c00 = c000 * (1.0 - x) + c100 * x;
        let c10 = c010 * (1.0 - x) + c110 * x;
        let c01 = c001 * (1.0 - x) + c101 * x;
        let c11 = c011 * (1.0 - x) + c111 * x;
        let c0 = c00 * (1.0 - y) + c10 * y;
        let c1 = c01 * (1.0 - y) + c11 * y;
        let v = c0 * (1.0 - z) + c1 * z;

        let dx0 = (c100 - c000) * (1.0 - y) + (c110 - c010) * y;
        let dx1 = (c101 - c001) * (1.0 - y) + (c111 - c011) * y;
        let dx = dx0 * (1.0 - z) + dx1 * z;
        let dy = (c10 - c00) * (1.0 - z) + (c11 - c01) * z;
        let dz = c1 - c0;
        let mut v = v;
        let mut g = Vector3::new(dx, dy, dz);
        if !self.center_corrections.is_empty() {
            let delta = self.center_corrections[self.cell_index(i as usize, j as usize, k as usize)];
            let hat = |t: f64| 1.0 - (2.0 * t - 1.0).abs();
            let dhat = |t: f64| if t < 0.5 { 2.0 } else { -2.0 };
            let (bx, by, bz) = (hat(x), hat(y), hat(z));
            v += delta * bx * by * bz;
            g += delta * Vector3::new(dhat(x) * by * bz, bx * dhat(y) * bz, bx * by * dhat(z));
        }
        (v, g / h)
    }

    /// Cubic B-spline approximation of the samples: value, gradient and
    /// Hessian. Node indices beyond the grid are clamped.
    pub fn bspline(&self, p: &Point3<f64>) -> (f64, Vector3<f64>, Matrix3<f64>) {
        let h = self.spacing;
        let q = self.bounds().clamp(p);
        let mut base = [0isize; 3];
        let mut w = [[0.0f64; 4]; 3];
        let mut dw = [[0.0f64; 4]; 3];
        let mut ddw = [[0.0f64; 4]; 3];
        for k in 0..3 {
            let s = (q[k] - self.origin[k]) / h;
            let c = (s.floor() as isize).clamp(0, self.dims[k] as isize - 2);
            let t = s - c as f64;
            base[k] = c - 1;
            let t2 = t * t;
            let t3 = t2 * t;
            let omt = 1.0 - t;
            w[k] = [
                omt * omt * omt / 6.0,
                (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
                (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
                t3 / 6.0,
            ];
            dw[k] = [
                -omt * omt / 2.0 / h,
                (3.0 * t2 - 4.0 * t) / 2.0 / h,
                (-3.0 * t2 + 2.0 * t + 1.0) / 2.0 / h,
                t2 / 2.0 / h,
            ];
            ddw[k] = [
                omt / (h * h),
                (3.0 * t - 2.0) / (h * h),
                (-3.0 * t + 1.0) / (h * h),
                t / (h * h),
            ];
        }
        let mut v = 0.0;
        let mut g = Vector3::zeros();
        let mut hess = Matrix3::zeros();
        for c in 0..4 {
            for b in 0..4 {
                for a in 0..4 {
                    let s = self.at(base[0] + a as isize, base[1] + b as isize, base[2] + c as isize);
                    let (wx, wy, wz) = (w[0][a], w[1][b], w[2][c]);
                    let (dx, dy, dz) = (dw[0][a], dw[1][b], dw[2][c]);
                    v += s * wx * wy * wz;
                    g += s * Vector3::new(dx * wy * wz, wx * dy * wz, wx * wy * dz);
                    hess[(0, 0)] += s * ddw[0][a] * wy * wz;
                    hess[(1, 1)] += s * wx * ddw[1][b] * wz;
                    hess[(2, 2)] += s * wx * wy * ddw[2][c];
                    hess[(0, 1)] += s * dx * dy * wz;
                    hess[(0, 2)] += s * dx * wy * dz;
                    hess[(1, 2)] += s * wx * dy * dz;
                }
            }
        }
        hess[(1, 0)] = hess[(0, 1)];
        hess[(2, 0)] = hess[(0, 2)];
        hess[(2, 1)] = hess[(1, 2)];
        (v, g, hess)
    }

    /// Writes the binary cache: magic, three u32 dims, f64 origin, f64
    /// spacing, then f32 node samples x-fastest, followed by the f32 cell
    /// corrections. Little-endian throughout.
    pub fn write_cache<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(SDF_MAGIC)?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for k in 0..3 {
            w.write_all(&self.origin[k].to_le_bytes())?;
        }
        w.write_all(&self.spacing.to_le_bytes())?;
        for v in self.values.iter().chain(&self.center_corrections) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self, GeometryError> {
        let io = |e: std::io::Error| GeometryError::Parse(format!("sdf cache: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SDF_MAGIC {
            return Err(GeometryError::Parse("sdf cache: bad magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let read_f64 = |r: &mut R| -> Result<f64, GeometryError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            Ok(f64::from_le_bytes(b))
        };
        let origin = Point3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        let spacing = read_f64(&mut r)?;
        if dims.iter().any(|&d| d < 2) || !(spacing > 0.0) {
            return Err(GeometryError::Parse("sdf cache: invalid header".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut read_f32s = |count: usize| -> Result<Vec<f64>, GeometryError> {
            let mut out = Vec::with_capacity(count);
            let mut b = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut b).map_err(io)?;
                out.push(f32::from_le_bytes(b) as f64);
            }
            Ok(out)
        };
        let values = read_f32s(n)?;
        let center_corrections = read_f32s((dims[0] - 1) * (dims[1] - 1) * (dims[2] - 1))?;
        Ok(SdfGrid { origin, spacing, dims, values, center_corrections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_grid() -> SdfGrid {
        let dims = [6, 5, 7];
        let origin = Point3::new(-0.3, 0.1, 0.2);
        let spacing = 0.1;
        let mut g = SdfGrid { origin, spacing, dims, values: vec![0.0; 6 * 5 * 7], center_corrections: Vec::new() };
        for k in 0..7 {
            for j in 0..5 {
                for i in 0..6 {
                    let p = g.node(i, j, k);
                    let idx = g.index(i, j, k);
                    g.values[idx] = 0.3 * p.x - 0.5 * p.y + 0.2 * p.z + 0.1;
                }
            }
        }
        g
    }

    #[test]
    fn interpolants_reproduce_linear_fields() {
        let g = linear_grid();
        let p = Point3::new(-0.07, 0.23, 0.61);
        let exact = 0.3 * p.x - 0.5 * p.y + 0.2 * p.z + 0.1;
        let (v, grad) = g.trilinear(&p);
        assert_relative_eq!(v, exact, epsilon = 1e-12);
        assert_relative_eq!(grad, Vector3::new(0.3, -0.5, 0.2), epsilon = 1e-12);
        let (v, grad, hess) = g.bspline(&p);
        assert_relative_eq!(v, exact, epsilon = 1e-12);
        assert_relative_eq!(grad, Vector3::new(0.3, -0.5, 0.2), epsilon = 1e-12);
        assert!(hess.norm() < 1e-10);
    }

    #[test]
    fn bspline_derivatives_match_finite_differences() {
        let mut g = linear_grid();
        for (n, v) in g.values.iter_mut().enumerate() {
            *v = ((n as f64) * 0.37).sin() * 0.05;
        }
        let p = Point3::new(-0.03, 0.27, 0.48);
        let (_, grad, hess) = g.bspline(&p);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let (vp, gp, _) = g.bspline(&(p + e));
            let (vm, gm, _) = g.bspline(&(p - e));
            assert_relative_eq!((vp - vm) / (2.0 * h), grad[k], epsilon = 1e-7, max_relative = 1e-6);
            let col = (gp - gm) / (2.0 * h);
            for r in 0..3 {
                assert_relative_eq!(col[r], hess[(r, k)], epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn cache_roundtrip() {
        let mut g = linear_grid();
        g.center_corrections = (0..5 * 4 * 6).map(|i| 1e-3 * i as f64).collect();
        let mut buf = Vec::new();
        g.write_cache(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GFSD");
        assert_eq!(buf.len(), 4 + 12 + 32 + 4 * (g.values.len() + g.center_corrections.len()));
        let back = SdfGrid::read_cache(&buf[..]).unwrap();
        assert_eq!(back.dims, g.dims);
        assert_eq!(back.origin, g.origin);
        for (a, b) in back.values.iter().chain(&back.center_corrections).zip(g.values.iter().chain(&g.center_corrections)) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(SdfGrid::read_cache(&b"XXXX"[..]).is_err());
    }
}
