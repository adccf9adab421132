//! Incremental 3-D convex hull and hull facet extraction.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use super::mesh::TriMesh;
use super::GeometryError;

/// Convex hull of a point set as an outward-oriented triangle mesh.
///
/// Only hull vertices are kept in the output. Fails with
/// `DegenerateGeometry` for fewer than four points or a (near) coplanar set.
pub fn convex_hull(points: &[Point3<f64>]) -> Result<TriMesh, GeometryError> {
    if points.len() < 4 {
        return Err(GeometryError::DegenerateGeometry(format!(
            "convex hull needs at least 4 points, got {}",
            points.len()
        )));
    }
    let scale = super::mesh::Aabb::from_points(points).extent().norm();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(GeometryError::DegenerateGeometry("points are coincident or non-finite".into()));
    }
    let eps = 1e-10 * scale;

    // Initial tetrahedron from extreme points.
    let i0 = (0..points.len()).min_by(|&a, &b| points[a].x.total_cmp(&points[b].x)).unwrap();
    let i1 = (0..points.len())
        .max_by(|&a, &b| (points[a] - points[i0]).norm().total_cmp(&(points[b] - points[i0]).norm()))
        .unwrap();
    let line = points[i1] - points[i0];
    if line.norm() <= eps {
        return Err(GeometryError::DegenerateGeometry("points are coincident".into()));
    }
    let i2 = (0..points.len())
        .max_by(|&a, &b| {
            line.cross(&(points[a] - points[i0]))
                .norm()
                .total_cmp(&line.cross(&(points[b] - points[i0])).norm())
        })
        .unwrap();
    let plane_n = line.cross(&(points[i2] - points[i0]));
    if plane_n.norm() <= eps * line.norm() {
        return Err(GeometryError::DegenerateGeometry("points are collinear".into()));
    }
    let plane_n = plane_n.normalize();
    let i3 = (0..points.len())
        .max_by(|&a, &b| {
            plane_n.dot(&(points[a] - points[i0])).abs().total_cmp(&plane_n.dot(&(points[b] - points[i0])).abs())
        })
        .unwrap();
    if plane_n.dot(&(points[i3] - points[i0])).abs() <= eps {
        return Err(GeometryError::DegenerateGeometry("points are coplanar".into()));
    }

    let mut faces: Vec<Face> = Vec::new();
    let add_face = |faces: &mut Vec<Face>, a: usize, b: usize, c: usize| {
        faces.push(Face::new(points, [a, b, c]));
    };
    let interior = Point3::from(
        (points[i0].coords + points[i1].coords + points[i2].coords + points[i3].coords) / 4.0,
    );
    for [a, b, c] in [[i0, i1, i2], [i0, i1, i3], [i0, i2, i3], [i1, i2, i3]] {
        add_face(&mut faces, a, b, c);
        let f = faces.last_mut().unwrap();
        if f.distance(&interior) > 0.0 {
            f.flip(points);
        }
    }

    for (pi, p) in points.iter().enumerate() {
        if [i0, i1, i2, i3].contains(&pi) {
            continue;
        }
        let visible: Vec<usize> =
            (0..faces.len()).filter(|&f| faces[f].alive && faces[f].distance(p) > eps).collect();
        if visible.is_empty() {
            continue;
        }
        // Horizon: directed edges of visible faces whose twin is not visible.
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for &f in &visible {
            let v = faces[f].v;
            for k in 0..3 {
                *edge_count.entry((v[k], v[(k + 1) % 3])).or_default() += 1;
            }
        }
        let mut horizon = Vec::new();
        for &f in &visible {
            let v = faces[f].v;
            for k in 0..3 {
                let e = (v[k], v[(k + 1) % 3]);
                if !edge_count.contains_key(&(e.1, e.0)) {
                    horizon.push(e);
                }
            }
        }
        for &f in &visible {
            faces[f].alive = false;
        }
        for (a, b) in horizon {
            add_face(&mut faces, a, b, pi);
        }
        faces.retain(|f| f.alive);
    }

    // Compact vertex indices.
    let mut remap: HashMap<usize, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for f in faces.iter().filter(|f| f.alive) {
        let mut tri = [0usize; 3];
        for k in 0..3 {
            tri[k] = *remap.entry(f.v[k]).or_insert_with(|| {
                vertices.push(points[f.v[k]]);
                vertices.len() - 1
            });
        }
        triangles.push(tri);
    }
    Ok(TriMesh { vertices, triangles })
}

#[derive(Debug, Clone)]
struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    alive: bool,
}

impl Face {
    fn new(points: &[Point3<f64>], v: [usize; 3]) -> Self {
        let n = (points[v[1]] - points[v[0]]).cross(&(points[v[2]] - points[v[0]]));
        let normal = n.try_normalize(1e-300).unwrap_or_else(Vector3::zeros);
        Face { v, normal, offset: normal.dot(&points[v[0]].coords), alive: true }
    }

    fn distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }

    fn flip(&mut self, points: &[Point3<f64>]) {
        self.v.swap(1, 2);
        *self = Face::new(points, self.v);
    }
}

/// A planar facet of a convex hull: coplanar hull triangles merged.
#[derive(Debug, Clone)]
pub struct HullFacet {
    pub normal: Vector3<f64>,
    pub offset: f64,
    /// Facet polygon vertices (convex, counter-clockwise about `normal`).
    pub polygon: Vec<Point3<f64>>,
}

impl HullFacet {
    /// Whether `p` (assumed on the facet plane) lies strictly inside the
    /// polygon, at least `margin` away from every edge.
    pub fn contains_strictly(&self, p: &Point3<f64>, margin: f64) -> bool {
        let n = self.polygon.len();
        if n < 3 {
            return false;
        }
        (0..n).all(|k| {
            let a = self.polygon[k];
            let b = self.polygon[(k + 1) % n];
            let edge = b - a;
            let inward = self.normal.cross(&edge).normalize();
            inward.dot(&(p - a)) > margin
        })
    }
}

/// Groups the triangles of a convex mesh into planar facets.
pub fn hull_facets(hull: &TriMesh) -> Vec<HullFacet> {
    let scale = hull.bounding_box().extent().norm().max(1e-12);
    let mut groups: Vec<(Vector3<f64>, f64, Vec<usize>)> = Vec::new();
    for t in 0..hull.triangles.len() {
        let n = hull.triangle_normal(t);
        if n.norm() == 0.0 {
            continue;
        }
        let d = n.dot(&hull.vertices[hull.triangles[t][0]].coords);
        match groups
            .iter_mut()
            .find(|(gn, gd, _)| gn.dot(&n) > 1.0 - 1e-9 && (gd - d).abs() < 1e-9 * scale)
        {
            Some(g) => g.2.push(t),
            None => groups.push((n, d, vec![t])),
        }
    }
    groups
        .into_iter()
        .map(|(normal, offset, tris)| {
            let mut idx: Vec<usize> = tris.iter().flat_map(|&t| hull.triangles[t]).collect();
            idx.sort_unstable();
            idx.dedup();
            let pts: Vec<Point3<f64>> = idx.iter().map(|&i| hull.vertices[i]).collect();
            HullFacet { normal, offset, polygon: planar_convex_polygon(&pts, &normal) }
        })
        .collect()
}

/// Counter-clockwise convex polygon (about `normal`) of coplanar points.
fn planar_convex_polygon(points: &[Point3<f64>], normal: &Vector3<f64>) -> Vec<Point3<f64>> {
    let (u, v) = super::tangent_basis(normal);
    let origin = points[0];
    let mut pts: Vec<(f64, f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - origin).dot(&u), (p - origin).dot(&v), i))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let cross = |o: &(f64, f64, usize), a: &(f64, f64, usize), b: &(f64, f64, usize)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    // Andrew's monotone chain.
    let mut lower: Vec<(f64, f64, usize)> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<(f64, f64, usize)> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    // (u, v, normal) is right-handed, so this order is counter-clockwise about `normal`.
    lower.into_iter().map(|(_, _, i)| points[i]).collect()
}
