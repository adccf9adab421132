//! Object and environment geometry: signed-distance surface models, contact
//! frames, surface sampling, projection and rest poses.

pub mod hull;
pub mod io;
pub mod mesh;
pub mod rest;
pub mod sampling;
pub mod sdf;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hull::{convex_hull, hull_facets, HullFacet};
pub use mesh::{Aabb, TriMesh};
pub use rest::{stable_rest_poses, RestPose};
pub use sampling::{default_poisson_radius, poisson_disk_sample, remove_table_contacts, TABLE_CONTACT_THRESHOLD};
pub use sdf::SdfGrid;

use mesh::TriangleBvh;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate normal at {point:?}: gradient magnitude {magnitude:e}")]
    DegenerateNormal { point: [f64; 3], magnitude: f64 },
    #[error("projection did not converge: |D| = {residual:e} at {best:?}")]
    ProjectionDiverged { best: [f64; 3], residual: f64 },
    #[error("only {found} samples survived, at least 3 are required")]
    InsufficientSamples { found: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default SDF grid resolution along the longest axis.
pub const DEFAULT_GRID_RESOLUTION: usize = 64;

/// Normals are rejected below this smoothed-gradient magnitude.
pub const MIN_GRADIENT_NORM: f64 = 1e-6;

/// Fixed tabletop: a point on the plane and its upward unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub table_point: Point3<f64>,
    pub table_normal: Vector3<f64>,
}

impl Environment {
    pub fn new(table_point: Point3<f64>, table_normal: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = table_normal.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::InvalidArgument("table normal must be non-zero".into()));
        }
        Ok(Environment { table_point, table_normal: table_normal / n })
    }

    /// Horizontal table (normal +z) at height `z`.
    pub fn table_at_height(z: f64) -> Self {
        Environment { table_point: Point3::new(0.0, 0.0, z), table_normal: Vector3::z() }
    }

    /// Signed height of `p` above the table plane.
    pub fn height(&self, p: &Point3<f64>) -> f64 {
        (p - self.table_point).dot(&self.table_normal)
    }
}

/// Surface contact frame: position, outward normal and tangent basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    pub position: Point3<f64>,
    pub normal: Vector3<f64>,
    pub t1: Vector3<f64>,
    pub t2: Vector3<f64>,
}

impl ContactPoint {
    /// Builds the contact frame with the deterministic tangent basis.
    /// The normal is renormalized.
    pub fn new(position: Point3<f64>, normal: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = normal.try_normalize(1e-12).ok_or_else(|| GeometryError::DegenerateNormal {
            point: position.coords.into(),
            magnitude: normal.norm(),
        })?;
        let (t1, t2) = tangent_basis(&n);
        Ok(ContactPoint { position, normal: n, t1, t2 })
    }

    /// Checks unit length and mutual orthogonality within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() <= tol;
        unit(&self.normal)
            && unit(&self.t1)
            && unit(&self.t2)
            && self.normal.dot(&self.t1).abs() <= tol
            && self.normal.dot(&self.t2).abs() <= tol
            && self.t1.dot(&self.t2).abs() <= tol
    }
}

/// Index of the smallest-magnitude component (lowest index on ties).
fn pivot_axis(n: &Vector3<f64>) -> usize {
    let a = n.map(f64::abs);
    let mut k = 0;
    for i in 1..3 {
        if a[i] < a[k] {
            k = i;
        }
    }
    k
}

/// Deterministic orthonormal tangent basis with `t1 × t2 = n`.
///
/// `t1` is the unit axis of the smallest normal component projected onto
/// the tangent plane.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let k = pivot_axis(n);
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    let t1 = (e - n * e.dot(n)).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Jacobians `(∂t1/∂n, ∂t2/∂n)` of [`tangent_basis`], valid away from
/// pivot switches.
pub fn tangent_basis_jacobian(n: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let k = pivot_axis(n);
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    let u = e - n * e.dot(n);
    let un = u.norm();
    let t1 = u / un;
    let du = -(n * e.transpose() + Matrix3::identity() * e.dot(n));
    let dt1 = (Matrix3::identity() - t1 * t1.transpose()) / un * du;
    let dt2 = -t1.cross_matrix() + n.cross_matrix() * dt1;
    (dt1, dt2)
}

/// Gap between the two smallest normal-component magnitudes; the tangent
/// basis jumps where this reaches zero.
pub fn pivot_margin(n: &Vector3<f64>) -> f64 {
    let mut a = [n.x.abs(), n.y.abs(), n.z.abs()];
    a.sort_by(f64::total_cmp);
    a[1] - a[0]
}

/// Object surface: the mesh, its BVH, the sampled signed-distance grid and
/// the convex hull used for stability analysis.
#[derive(Debug, Clone)]
pub struct SurfaceModel {
    pub mesh: TriMesh,
    pub sdf: SdfGrid,
    pub bounding_box: Aabb,
    pub hull: TriMesh,
    bvh: TriangleBvh,
}

/// Outcome of a surface projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: Point3<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl SurfaceModel {
    /// Builds a model from a closed triangle mesh; non-convex meshes are used
    /// as-is for the distance field.
    pub fn from_mesh(mesh: TriMesh, grid_resolution: usize) -> Result<Self, GeometryError> {
        let hull = convex_hull(&mesh.vertices)?;
        let bvh = TriangleBvh::build(&mesh);
        let sdf = SdfGrid::from_mesh(&mesh, &bvh, grid_resolution)?;
        let bounding_box = mesh.bounding_box();
        Ok(SurfaceModel { mesh, sdf, bounding_box, hull, bvh })
    }

    /// Builds a model from a raw point cloud: the mesh is its convex hull.
    pub fn from_point_cloud(points: &[Point3<f64>], grid_resolution: usize) -> Result<Self, GeometryError> {
        let hull = convex_hull(points)?;
        Self::from_mesh(hull, grid_resolution)
    }

    /// Reuses a cached grid instead of resampling.
    pub fn with_sdf(mesh: TriMesh, sdf: SdfGrid) -> Result<Self, GeometryError> {
        let hull = convex_hull(&mesh.vertices)?;
        let bvh = TriangleBvh::build(&mesh);
        let bounding_box = mesh.bounding_box();
        Ok(SurfaceModel { mesh, sdf, bounding_box, hull, bvh })
    }

    pub fn grid_spacing(&self) -> f64 {
        self.sdf.spacing
    }

    /// Interpolated signed distance (negative inside). Beyond the grid the
    /// exact mesh distance is used.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.signed_distance_with_gradient(p).0
    }

    /// Signed distance and the gradient of the same interpolant.
    pub fn signed_distance_with_gradient(&self, p: &Point3<f64>) -> (f64, Vector3<f64>) {
        if !self.sdf.bounds().contains(p) {
            let (c, d) = self.mesh_distance(p);
            if d > 0.0 {
                return (d, (p - c) / d);
            }
        }
        self.sdf.trilinear(p)
    }

    /// Whether `p` is far enough inside the grid for the spline stencil to
    /// stay clear of the clamped border nodes.
    fn in_spline_region(&self, p: &Point3<f64>) -> bool {
        let b = self.sdf.bounds();
        let m = 2.0 * self.sdf.spacing;
        (0..3).all(|k| p[k] >= b.min[k] + m && p[k] <= b.max[k] - m)
    }

    /// Unit direction away from the closest mesh point; used beyond the grid,
    /// where every point is exterior.
    fn exterior_normal(&self, p: &Point3<f64>) -> Option<Vector3<f64>> {
        let (c, d) = self.mesh_distance(p);
        (d > 0.0).then(|| (p - c) / d)
    }

    /// Outward unit normal from the smoothed distance gradient.
    pub fn surface_normal(&self, p: &Point3<f64>) -> Result<Vector3<f64>, GeometryError> {
        if !self.in_spline_region(p) {
            if let Some(n) = self.exterior_normal(p) {
                return Ok(n);
            }
        }
        let (_, g, _) = self.sdf.bspline(p);
        let m = g.norm();
        if m < MIN_GRADIENT_NORM {
            return Err(GeometryError::DegenerateNormal { point: p.coords.into(), magnitude: m });
        }
        Ok(g / m)
    }

    /// Outward unit normal and its Jacobian with respect to `p`.
    pub fn surface_normal_with_jacobian(
        &self,
        p: &Point3<f64>,
    ) -> Result<(Vector3<f64>, Matrix3<f64>), GeometryError> {
        if !self.in_spline_region(p) {
            if let Some(n) = self.exterior_normal(p) {
                let h = 1e-6 * self.bounding_box.extent().norm();
                let mut jac = Matrix3::zeros();
                for k in 0..3 {
                    let mut e = Vector3::zeros();
                    e[k] = h;
                    let np = self.exterior_normal(&(p + e)).unwrap_or(n);
                    let nm = self.exterior_normal(&(p - e)).unwrap_or(n);
                    jac.set_column(k, &((np - nm) / (2.0 * h)));
                }
                return Ok((n, jac));
            }
        }
        let (_, g, hess) = self.sdf.bspline(p);
        let m = g.norm();
        if m < MIN_GRADIENT_NORM {
            return Err(GeometryError::DegenerateNormal { point: p.coords.into(), magnitude: m });
        }
        let n = g / m;
        let jac = (Matrix3::identity() - n * n.transpose()) * hess / m;
        Ok((n, jac))
    }

    /// Contact frame at `p` from the surface normal there.
    pub fn contact_at(&self, p: &Point3<f64>) -> Result<ContactPoint, GeometryError> {
        ContactPoint::new(*p, self.surface_normal(p)?)
    }

    /// Euclidean projection onto the zero level set by damped steps
    /// `p <- p - D(p) n(p)`. On failure the error carries the best iterate.
    pub fn project_to_surface(&self, p: &Point3<f64>) -> Result<Projection, GeometryError> {
        const MAX_ITERS: usize = 100;
        const TOL: f64 = 1e-4;
        let mut x = *p;
        let mut d = self.signed_distance(&x);
        let mut best = (x, d.abs());
        for it in 0..MAX_ITERS {
            if d.abs() <= 1e-10 {
                return Ok(Projection { point: x, residual: d.abs(), iterations: it });
            }
            let dir = match self.surface_normal(&x) {
                Ok(n) => n,
                Err(_) => {
                    let (_, g) = self.signed_distance_with_gradient(&x);
                    match g.try_normalize(MIN_GRADIENT_NORM) {
                        Some(g) => g,
                        None => break,
                    }
                }
            };
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = x - dir * (d * step);
                let dc = self.signed_distance(&cand);
                if dc.abs() < d.abs() {
                    x = cand;
                    d = dc;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if d.abs() < best.1 {
                best = (x, d.abs());
            }
            if !accepted {
                break;
            }
        }
        if best.1 <= TOL {
            Ok(Projection { point: best.0, residual: best.1, iterations: MAX_ITERS })
        } else {
            Err(GeometryError::ProjectionDiverged { best: best.0.coords.into(), residual: best.1 })
        }
    }

    /// Exact unsigned distance to the mesh (BVH query).
    pub fn mesh_distance(&self, p: &Point3<f64>) -> (Point3<f64>, f64) {
        self.bvh.closest(&self.mesh, p)
    }

    /// Sign of the interpolated field combined with the exact mesh distance.
    pub fn exact_signed_distance(&self, p: &Point3<f64>) -> f64 {
        let (_, d) = self.mesh_distance(p);
        if mesh::point_inside_mesh(&self.mesh, p) {
            -d
        } else {
            d
        }
    }

    /// Stable rest poses of the hull for the given center of mass.
    pub fn rest_poses(&self, center_of_mass: &Point3<f64>) -> Vec<RestPose> {
        stable_rest_poses(&self.hull, center_of_mass)
    }

    /// Volume centroid of the mesh, falling back to the bounding-box center.
    pub fn centroid(&self) -> Point3<f64> {
        self.mesh.volume_centroid().unwrap_or_else(|| self.bounding_box.center())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn sphere() -> &'static SurfaceModel {
        static M: OnceLock<SurfaceModel> = OnceLock::new();
        M.get_or_init(|| SurfaceModel::from_mesh(TriMesh::icosphere(1.0, 3), 64).unwrap())
    }

    fn cube() -> &'static SurfaceModel {
        static M: OnceLock<SurfaceModel> = OnceLock::new();
        M.get_or_init(|| {
            SurfaceModel::from_mesh(TriMesh::cuboid(Vector3::new(0.5, 0.5, 0.5)), 64).unwrap()
        })
    }

    #[test]
    fn sphere_distance_examples() {
        let m = sphere();
        assert_relative_eq!(m.signed_distance(&Point3::origin()), -1.0, epsilon = 0.02);
        assert_relative_eq!(m.signed_distance(&Point3::new(2.0, 0.0, 0.0)), 1.0, epsilon = 0.02);
    }

    #[test]
    fn cube_distance_examples() {
        let m = cube();
        let h = m.grid_spacing();
        assert_relative_eq!(m.signed_distance(&Point3::origin()), -0.5, epsilon = h);
        for v in &m.mesh.vertices {
            assert!(m.signed_distance(v).abs() <= h);
        }
    }

    #[test]
    fn cube_distance_matches_brute_force() {
        let m = cube();
        let h = m.grid_spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let p = Point3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
            let (_, d) = m.mesh.brute_force_closest(&p);
            let inside = p.coords.amax() < 0.5;
            let exact = if inside { -d } else { d };
            assert!((m.signed_distance(&p) - exact).abs() <= 2.0 * h, "{p:?}");
        }
    }

    #[test]
    fn sign_matches_inside_test_at_cell_centers() {
        for m in [sphere(), cube()] {
            let g = &m.sdf;
            let h = g.spacing;
            for k in (0..g.dims[2] - 1).step_by(3) {
                for j in (0..g.dims[1] - 1).step_by(2) {
                    for i in 0..g.dims[0] - 1 {
                        let c = g.node(i, j, k) + Vector3::repeat(0.5 * h);
                        let d = m.signed_distance(&c);
                        let inside = mesh::point_inside_mesh(&m.mesh, &c);
                        assert_eq!(d < 0.0, inside, "cell center {c:?} d={d}");
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_magnitude_away_from_surface() {
        let m = sphere();
        let h = m.grid_spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 300 {
            let p = Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let d = m.signed_distance(&p);
            // The interior medial point (sphere center) is excluded.
            if d.abs() <= h || p.coords.norm() < 3.0 * h || !m.sdf.bounds().clamp(&p).eq(&p) {
                continue;
            }
            let (_, g) = m.signed_distance_with_gradient(&p);
            assert!((0.8..=1.2).contains(&g.norm()), "{p:?} {}", g.norm());
            checked += 1;
        }
    }

    #[test]
    fn grid_padding_and_spacing() {
        let m = cube();
        let b = m.sdf.bounds();
        let pad = 5.0 * m.grid_spacing() - 1e-12;
        for k in 0..3 {
            assert!(m.bounding_box.min[k] - b.min[k] >= pad);
            assert!(b.max[k] - m.bounding_box.max[k] >= pad);
        }
        assert!(m.grid_spacing() > 0.0);
        assert_eq!(m.sdf.dims.iter().max(), Some(&64));
    }

    #[test]
    fn normals_on_sphere_and_cube() {
        let n = sphere().surface_normal(&Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((n - Vector3::x()).norm() <= 0.02);
        let n = cube().surface_normal(&Point3::new(0.0, 0.5, 0.0)).unwrap();
        assert!((n - Vector3::y()).norm() <= 0.02);
    }

    #[test]
    fn normals_agree_with_nearest_triangle() {
        let m = sphere();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = rng.gen_range(0..m.mesh.triangles.len());
            let [a, b, c] = m.mesh.triangle(t);
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let (u, v) = if u + v > 1.0 { (1.0 - u, 1.0 - v) } else { (u, v) };
            let p = a + (b - a) * u + (c - a) * v;
            let n = m.surface_normal(&p).unwrap();
            let angle = n.dot(&m.mesh.triangle_normal(t)).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle <= 10.0, "angle {angle}");
        }
        // Cube faces, away from edges.
        let cm = cube();
        let h = cm.grid_spacing();
        for _ in 0..200 {
            let face = rng.gen_range(0..6);
            let lim = 0.5 - 3.0 * h;
            let mut p = Vector3::new(rng.gen_range(-lim..lim), rng.gen_range(-lim..lim), 0.0);
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            p = Vector3::new(p[(axis + 1) % 3], p[(axis + 2) % 3], 0.0);
            let mut q = Vector3::zeros();
            q[axis] = 0.5 * sign;
            q[(axis + 1) % 3] = p.x;
            q[(axis + 2) % 3] = p.y;
            let n = cm.surface_normal(&Point3::from(q)).unwrap();
            let mut expected = Vector3::zeros();
            expected[axis] = sign;
            assert!(n.dot(&expected).acos().to_degrees() <= 10.0);
        }
    }

    #[test]
    fn normal_jacobian_matches_finite_differences() {
        let m = sphere();
        let p = Point3::new(0.63, -0.41, 0.58);
        let (_, jac) = m.surface_normal_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let np = m.surface_normal(&(p + e)).unwrap();
            let nm = m.surface_normal(&(p - e)).unwrap();
            let col = (np - nm) / (2.0 * h);
            assert!((col - jac.column(k)).norm() <= 1e-5 * (1.0 + col.norm()));
        }
    }

    #[test]
    fn projection_examples() {
        // A finer tessellation: the coarse icosphere's faces sit ~2 mm inside
        // the unit sphere along the axes.
        let m = SurfaceModel::from_mesh(TriMesh::icosphere(1.0, 5), 64).unwrap();
        let p = m.project_to_surface(&Point3::new(2.0, 0.0, 0.0)).unwrap();
        assert!((p.point - Point3::new(1.0, 0.0, 0.0)).norm() <= 1e-3);
        assert!(m.signed_distance(&p.point).abs() <= 1e-4);
        let again = m.project_to_surface(&p.point).unwrap();
        assert!((again.point - p.point).norm() <= 1e-4);
    }

    #[test]
    fn projection_matches_closest_mesh_point() {
        let m = cube();
        let h = m.grid_spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let p = Point3::from(dir.normalize() * rng.gen_range(0.6..0.9));
            let proj = m.project_to_surface(&p).unwrap();
            let (closest, _) = m.mesh.brute_force_closest(&p);
            assert!((proj.point - closest).norm() <= 2.0 * h, "{p:?}");
        }
    }

    #[test]
    fn projection_consistency_properties() {
        let m = sphere();
        let h = m.grid_spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let p = Point3::from(dir.normalize() * rng.gen_range(1.1..1.6));
            let proj = m.project_to_surface(&p).unwrap().point;
            let d = m.signed_distance(&p);
            assert!(d.abs() <= (p - proj).norm() + 2.0 * h);
            if d > 2.0 * h {
                let n = m.surface_normal(&proj).unwrap();
                let disp = (p - proj).normalize();
                assert!(n.dot(&disp).clamp(-1.0, 1.0).acos().to_degrees() <= 15.0);
            }
        }
    }

    #[test]
    fn tangent_basis_examples() {
        let (t1, t2) = tangent_basis(&Vector3::z());
        assert_eq!(t1, Vector3::x());
        assert_eq!(t2, Vector3::y());
        let n = Vector3::new(0.3, -0.5, 0.8).normalize();
        let (a1, a2) = tangent_basis(&n);
        let (b1, b2) = tangent_basis(&-n);
        assert!((a1.cross(&a2) - n).norm() < 1e-12);
        assert!((b1.cross(&b2) + n).norm() < 1e-12);
    }

    #[test]
    fn tangent_jacobian_matches_finite_differences() {
        let n = Vector3::new(0.31, -0.52, 0.79);
        let (j1, j2) = tangent_basis_jacobian(&n);
        let h = 1e-7;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let (p1, p2) = tangent_basis(&(n + e));
            let (m1, m2) = tangent_basis(&(n - e));
            assert!(((p1 - m1) / (2.0 * h) - j1.column(k)).norm() < 1e-6);
            assert!(((p2 - m2) / (2.0 * h) - j2.column(k)).norm() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn tangent_basis_is_orthonormal(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-3);
            let n = v.normalize();
            let c = ContactPoint::new(Point3::origin(), n).unwrap();
            prop_assert!(c.is_valid(1e-12));
            prop_assert!((c.t1.cross(&c.t2) - c.normal).norm() <= 1e-12);
        }
    }
}
