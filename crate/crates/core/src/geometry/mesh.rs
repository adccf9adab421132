//! Triangle meshes, closed primitives and nearest-point queries.

use nalgebra::{Isometry3, Point3, Vector3};

use super::GeometryError;

/// Indexed triangle mesh. Vertices are in meters, triangles wind
/// counter-clockwise when seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3<f64>>) -> Self {
        let mut b = Aabb::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Point3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Clamps `p` into the box.
    pub fn clamp(&self, p: &Point3<f64>) -> Point3<f64> {
        p.sup(&self.min).inf(&self.max)
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(GeometryError::Parse(format!(
                "triangle {t:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        Ok(TriMesh { vertices, triangles })
    }

    pub fn bounding_box(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    pub fn triangle(&self, t: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unit geometric normal of triangle `t` (zero for degenerate triangles).
    pub fn triangle_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a)).try_normalize(1e-300).unwrap_or_else(Vector3::zeros)
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Volume-weighted centroid of the enclosed solid (assumes a closed,
    /// consistently oriented mesh).
    pub fn volume_centroid(&self) -> Option<Point3<f64>> {
        let mut vol = 0.0;
        let mut acc = Vector3::zeros();
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            let v = a.coords.dot(&b.coords.cross(&c.coords)) / 6.0;
            vol += v;
            acc += v * (a.coords + b.coords + c.coords) / 4.0;
        }
        (vol.abs() > 1e-18).then(|| Point3::from(acc / vol))
    }

    pub fn transformed(&self, pose: &Isometry3<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| pose * v).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn translated(&self, d: &Vector3<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v + d).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Exact unsigned distance to the closest triangle, by exhaustive search.
    pub fn brute_force_closest(&self, p: &Point3<f64>) -> (Point3<f64>, f64) {
        let mut best = (Point3::origin(), f64::INFINITY);
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm_squared();
            if d < best.1 {
                best = (q, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Axis-aligned box, centered at the origin.
    pub fn cuboid(half_extents: Vector3<f64>) -> TriMesh {
        let h = half_extents;
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            vertices.push(Point3::new(sx * h.x, sy * h.y, sz * h.z));
        }
        let quads = [
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
        ];
        let mut triangles = Vec::with_capacity(12);
        for q in quads {
            triangles.push([q[0], q[1], q[2]]);
            triangles.push([q[0], q[2], q[3]]);
        }
        TriMesh { vertices, triangles }
    }

    /// Icosphere of the given radius: 20 * 4^subdivisions faces.
    pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point3<f64>> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|v| Point3::from(Vector3::new(v[0], v[1], v[2]).normalize()))
        .collect();
        let mut triangles: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoint = std::collections::HashMap::new();
            let mut mid = |a: usize, b: usize, verts: &mut Vec<Point3<f64>>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    let m = nalgebra::center(&verts[a], &verts[b]);
                    verts.push(Point3::from(m.coords.normalize()));
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for [a, b, c] in triangles {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            triangles = next;
        }
        for v in &mut vertices {
            *v = Point3::from(v.coords * radius);
        }
        TriMesh { vertices, triangles }
    }

    /// Closed cylinder along z, centered at the origin.
    pub fn cylinder(radius: f64, height: f64, segments: usize) -> TriMesh {
        let n = segments.max(3);
        let hz = height / 2.0;
        let mut vertices = Vec::with_capacity(2 * n + 2);
        for k in 0..n {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vertices.push(Point3::new(radius * a.cos(), radius * a.sin(), -hz));
        }
        for k in 0..n {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vertices.push(Point3::new(radius * a.cos(), radius * a.sin(), hz));
        }
        let bottom = vertices.len();
        vertices.push(Point3::new(0.0, 0.0, -hz));
        let top = vertices.len();
        vertices.push(Point3::new(0.0, 0.0, hz));
        let mut triangles = Vec::with_capacity(4 * n);
        for k in 0..n {
            let k1 = (k + 1) % n;
            triangles.push([k, k1, n + k1]);
            triangles.push([k, n + k1, n + k]);
            triangles.push([bottom, k1, k]);
            triangles.push([top, n + k, n + k1]);
        }
        TriMesh { vertices, triangles }
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Bounding-volume hierarchy over mesh triangles for nearest-point queries.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    // Leaf when `count > 0`: triangles `order[start..start + count]`.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

const BVH_LEAF_SIZE: usize = 4;

impl TriangleBvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let n = mesh.triangles.len();
        let mut order: Vec<usize> = (0..n).collect();
        let bounds: Vec<Aabb> = (0..n).map(|t| Aabb::from_points(&mesh.triangle(t))).collect();
        let centroids: Vec<Point3<f64>> = bounds.iter().map(Aabb::center).collect();
        let mut nodes = Vec::with_capacity(2 * n / BVH_LEAF_SIZE + 1);
        if n > 0 {
            Self::build_node(&mut nodes, &mut order, &bounds, &centroids, 0, n);
        }
        TriangleBvh { nodes, order }
    }

    fn build_node(
        nodes: &mut Vec<BvhNode>,
        order: &mut [usize],
        bounds: &[Aabb],
        centroids: &[Point3<f64>],
        start: usize,
        end: usize,
    ) -> usize {
        let mut b = Aabb::empty();
        for &t in &order[start..end] {
            b = b.merge(&bounds[t]);
        }
        let id = nodes.len();
        nodes.push(BvhNode { bounds: b, start, count: end - start, left: 0, right: 0 });
        if end - start <= BVH_LEAF_SIZE {
            return id;
        }
        let cb = Aabb::from_points(order[start..end].iter().map(|&t| &centroids[t]));
        let ext = cb.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        order[start..end].sort_by(|&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let mid = (start + end) / 2;
        let left = Self::build_node(nodes, order, bounds, centroids, start, mid);
        let right = Self::build_node(nodes, order, bounds, centroids, mid, end);
        nodes[id].count = 0;
        nodes[id].left = left;
        nodes[id].right = right;
        id
    }

    /// Closest point on the mesh surface and its unsigned distance.
    pub fn closest(&self, mesh: &TriMesh, p: &Point3<f64>) -> (Point3<f64>, f64) {
        let mut best = (Point3::origin(), f64::INFINITY);
        if self.nodes.is_empty() {
            return (best.0, f64::INFINITY);
        }
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.bounds.distance_squared(p) >= best.1 {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start..node.start + node.count] {
                    let [a, b, c] = mesh.triangle(t);
                    let q = closest_point_on_triangle(p, &a, &b, &c);
                    let d = (q - p).norm_squared();
                    if d < best.1 {
                        best = (q, d);
                    }
                }
            } else {
                let dl = self.nodes[node.left].bounds.distance_squared(p);
                let dr = self.nodes[node.right].bounds.distance_squared(p);
                if dl < dr {
                    stack.push(node.right);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.right);
                }
            }
        }
        (best.0, best.1.sqrt())
    }
}

/// Ray-parity inside test along +x with a small transverse jitter, used as
/// an independent check of the signed grid.
pub fn point_inside_mesh(mesh: &TriMesh, p: &Point3<f64>) -> bool {
    let scale = mesh.bounding_box().extent().norm().max(1e-9);
    let origin = Point3::new(p.x, p.y + 1.37e-7 * scale, p.z + 2.91e-7 * scale);
    let mut crossings = 0;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        if let Some(x) = ray_x_intersection(&origin, &a, &b, &c) {
            if x > origin.x {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

/// Intersection of the line `{(x, o.y, o.z)}` with triangle `abc`, returning x.
pub(crate) fn ray_x_intersection(
    o: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Option<f64> {
    // Barycentric test in the yz-projection.
    let (py, pz) = (o.y, o.z);
    let d = (b.y - a.y) * (c.z - a.z) - (c.y - a.y) * (b.z - a.z);
    if d.abs() < 1e-300 {
        return None;
    }
    let u = ((py - a.y) * (c.z - a.z) - (c.y - a.y) * (pz - a.z)) / d;
    let v = ((b.y - a.y) * (pz - a.z) - (py - a.y) * (b.z - a.z)) / d;
    if u < 0.0 || v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(a.x + u * (b.x - a.x) + v * (c.x - a.x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn icosphere_face_count() {
        let m = TriMesh::icosphere(1.0, 3);
        assert_eq!(m.triangles.len(), 1280);
        for v in &m.vertices {
            assert_relative_eq!(v.coords.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn primitives_are_outward_oriented() {
        for m in [
            TriMesh::cuboid(Vector3::new(0.1, 0.2, 0.3)),
            TriMesh::icosphere(0.5, 2),
            TriMesh::cylinder(0.035, 0.12, 48),
        ] {
            let c = m.volume_centroid().unwrap();
            assert!(c.coords.norm() < 1e-9);
            for t in 0..m.triangles.len() {
                let [a, b, cc] = m.triangle(t);
                let centroid = Point3::from((a.coords + b.coords + cc.coords) / 3.0);
                assert!(m.triangle_normal(t).dot(&(centroid - c)) > 0.0);
            }
        }
        let cube = TriMesh::cuboid(Vector3::new(0.5, 0.5, 0.5));
        assert_relative_eq!(cube.surface_area(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let m = TriMesh::icosphere(1.0, 2);
        let bvh = TriangleBvh::build(&m);
        for k in 0..200 {
            let f = k as f64;
            let p = Point3::new((f * 0.37).sin() * 1.6, (f * 0.73).cos() * 1.4, (f * 1.13).sin() * 0.9);
            let (_, d0) = m.brute_force_closest(&p);
            let (_, d1) = bvh.closest(&m, &p);
            assert_relative_eq!(d0, d1, epsilon = 1e-12);
        }
    }

    #[test]
    fn inside_test_on_cube() {
        let m = TriMesh::cuboid(Vector3::new(0.5, 0.5, 0.5));
        assert!(point_inside_mesh(&m, &Point3::new(0.0, 0.0, 0.0)));
        assert!(point_inside_mesh(&m, &Point3::new(0.49, 0.0, 0.0)));
        assert!(!point_inside_mesh(&m, &Point3::new(0.51, 0.0, 0.0)));
        assert!(!point_inside_mesh(&m, &Point3::new(0.0, 0.0, 2.0)));
    }
}
