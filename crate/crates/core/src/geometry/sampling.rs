//! Poisson-disk sampling of contact candidates on the object surface.

use std::collections::HashMap;

use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContactPoint, Environment, GeometryError, SurfaceModel};

/// Points closer than this to the table plane are treated as table contacts.
pub const TABLE_CONTACT_THRESHOLD: f64 = 0.005;

/// Candidate darts drawn per requested sample.
const DARTS_PER_SAMPLE: usize = 40;

/// Default Poisson radius for `count` samples on a surface of the given area.
pub fn default_poisson_radius(area: f64, count: usize) -> f64 {
    (area / (std::f64::consts::PI * count.max(1) as f64)).sqrt() * 0.8
}

/// Dart-throwing Poisson-disk sampling on the mesh surface.
///
/// Darts are drawn area-weighted, then accepted greedily while they keep
/// `min_radius` from every accepted point. Contacts carry the field normal
/// at the sample. When `env` is given, points within
/// [`TABLE_CONTACT_THRESHOLD`] of the table are dropped afterwards.
pub fn poisson_disk_sample(
    model: &SurfaceModel,
    count: usize,
    min_radius: f64,
    rng_seed: u64,
    env: Option<&Environment>,
) -> Result<Vec<ContactPoint>, GeometryError> {
    if count < 3 {
        return Err(GeometryError::InvalidArgument("count must be at least 3".into()));
    }
    if !(min_radius > 0.0) {
        return Err(GeometryError::InvalidArgument("min_radius must be positive".into()));
    }
    let mesh = &model.mesh;
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(GeometryError::DegenerateGeometry("mesh has zero surface area".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n_darts = (DARTS_PER_SAMPLE * count).max(2000);
    let mut darts: Vec<Point3<f64>> = (0..n_darts)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let t = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect();
    darts.shuffle(&mut rng);

    let cell = min_radius;
    let key = |p: &Point3<f64>| {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let mut accepted: Vec<Point3<f64>> = Vec::new();
    for p in darts {
        if accepted.len() == count {
            break;
        }
        let (i, j, k) = key(&p);
        let mut ok = true;
        'nb: for di in -1..=1 {
            for dj in -1..=1 {
                for dk in -1..=1 {
                    if let Some(list) = grid.get(&(i + di, j + dj, k + dk)) {
                        if list.iter().any(|&q| (accepted[q] - p).norm() < min_radius) {
                            ok = false;
                            break 'nb;
                        }
                    }
                }
            }
        }
        if ok {
            grid.entry((i, j, k)).or_default().push(accepted.len());
            accepted.push(p);
        }
    }

    let mut out = Vec::with_capacity(accepted.len());
    for p in accepted {
        if let Some(env) = env {
            if env.height(&p) < TABLE_CONTACT_THRESHOLD {
                continue;
            }
        }
        if let Ok(c) = model.contact_at(&p) {
            out.push(c);
        }
    }
    if out.len() < 3 {
        return Err(GeometryError::InsufficientSamples { found: out.len() });
    }
    Ok(out)
}

/// Drops contacts within [`TABLE_CONTACT_THRESHOLD`] of the table.
pub fn remove_table_contacts(points: &[ContactPoint], env: &Environment) -> Vec<ContactPoint> {
    points.iter().filter(|c| env.height(&c.position) >= TABLE_CONTACT_THRESHOLD).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn sphere() -> &'static SurfaceModel {
        static M: OnceLock<SurfaceModel> = OnceLock::new();
        M.get_or_init(|| SurfaceModel::from_mesh(TriMesh::icosphere(1.0, 3), 48).unwrap())
    }

    fn min_pairwise(c: &[ContactPoint]) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                m = m.min((c[i].position - c[j].position).norm());
            }
        }
        m
    }

    #[test]
    fn sphere_256_samples() {
        let s = poisson_disk_sample(sphere(), 256, 0.05, 1, None).unwrap();
        assert_eq!(s.len(), 256);
        assert!(min_pairwise(&s) >= 0.05);
        for c in &s {
            assert!(c.is_valid(1e-9));
            assert!(c.normal.dot(&c.position.coords.normalize()) > 0.98);
        }
    }

    #[test]
    fn three_on_a_plate() {
        let m = SurfaceModel::from_mesh(TriMesh::cuboid(Vector3::new(0.5, 0.5, 0.01)), 32).unwrap();
        assert_eq!(poisson_disk_sample(&m, 3, 0.05, 2, None).unwrap().len(), 3);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = poisson_disk_sample(sphere(), 64, 0.1, 17, None).unwrap();
        let b = poisson_disk_sample(sphere(), 64, 0.1, 17, None).unwrap();
        assert_eq!(a, b);
        let c = poisson_disk_sample(sphere(), 64, 0.1, 18, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn table_points_removed() {
        let env = Environment::table_at_height(-1.0);
        let s = poisson_disk_sample(sphere(), 256, 0.05, 3, Some(&env)).unwrap();
        assert!(s.iter().all(|c| env.height(&c.position) >= TABLE_CONTACT_THRESHOLD));
    }

    #[test]
    fn too_few_survivors() {
        let env = Environment::table_at_height(10.0);
        assert!(matches!(
            poisson_disk_sample(sphere(), 16, 0.05, 3, Some(&env)),
            Err(GeometryError::InsufficientSamples { found: 0 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn samples_keep_min_radius_and_repeat(seed in any::<u64>(), count in 3usize..80, radius in 0.02f64..0.2) {
            let Ok(a) = poisson_disk_sample(sphere(), count, radius, seed, None) else { return Ok(()) };
            prop_assert_eq!(a.len(), count);
            prop_assert!(min_pairwise(&a) >= radius);
            let b = poisson_disk_sample(sphere(), count, radius, seed, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
