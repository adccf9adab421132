//! Dense convex QP by a primal active-set method.
//!
//! Solves `min ½ xᵀHx + gᵀx + c  s.t.  A x ≥ b` for symmetric positive
//! semidefinite `H`. Singular Hessians are handled on the null space of the
//! working set: zero-curvature descent directions are followed to the first
//! blocking constraint. A feasible start comes from the caller or from an LP
//! phase 1 solved by the same iteration.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("constraints are infeasible (phase-1 residual {residual:e})")]
    Infeasible { residual: f64 },
    #[error("no convergence within {0} iterations")]
    MaxIterations(usize),
    #[error("objective is unbounded below")]
    Unbounded,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("supplied start violates constraint {index} by {violation:e}")]
    InfeasibleStart { index: usize, violation: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOptions {
    pub max_iterations: usize,
    /// Steps without progress before switching to lowest-index pivoting.
    pub bland_after: usize,
    pub start: Option<DVector<f64>>,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { max_iterations: 500, bland_after: 8, start: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub value: f64,
    /// One multiplier per inequality row; zero off the working set.
    pub duals: DVector<f64>,
    /// Working-set rows at termination, ascending.
    pub active_set: Vec<usize>,
    pub slacks: DVector<f64>,
    pub iterations: usize,
}

/// KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, QpError> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::Dimension(format!("H is {}x{}, expected {n}x{n}", h.nrows(), h.ncols())));
        }
        if a.ncols() != n || a.nrows() != b.len() {
            return Err(QpError::Dimension(format!(
                "A is {}x{}, b has {} rows, n = {n}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        Ok(QpProblem { h, g, c: 0.0, a, b })
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x) + self.c
    }

    pub fn kkt_residuals(&self, x: &DVector<f64>, duals: &DVector<f64>) -> KktResiduals {
        let slack = &self.a * x - &self.b;
        let stat = &self.h * x + &self.g - self.a.transpose() * duals;
        KktResiduals {
            stationarity: stat.amax(),
            primal: slack.iter().fold(0.0f64, |m, &s| m.max(-s)),
            dual: duals.iter().fold(0.0f64, |m, &l| m.max(-l)),
            complementarity: slack.iter().zip(duals.iter()).fold(0.0f64, |m, (s, l)| m.max((s * l).abs())),
        }
    }

    /// Plain-text dump: a header line, then `H`, `g`, `A`, `b` blocks with
    /// one matrix row per line in shortest round-trip notation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "qp {} {}", self.n(), self.m());
        let row = |s: &mut String, it: &mut dyn Iterator<Item = f64>| {
            let v: Vec<String> = it.map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{}", v.join(" "));
        };
        s.push_str("H\n");
        for i in 0..self.n() {
            row(&mut s, &mut self.h.row(i).iter().copied());
        }
        s.push_str("g\n");
        row(&mut s, &mut self.g.iter().copied());
        s.push_str("A\n");
        for i in 0..self.m() {
            row(&mut s, &mut self.a.row(i).iter().copied());
        }
        s.push_str("b\n");
        row(&mut s, &mut self.b.iter().copied());
        s
    }

    pub fn from_text(text: &str) -> Result<Self, QpError> {
        let bad = |m: &str| QpError::Dimension(format!("qp text: {m}"));
        let mut lines = text.lines();
        let head: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .skip(1)
            .map(|t| t.parse().map_err(|_| bad("header")))
            .collect::<Result<_, _>>()?;
        if head.len() != 2 {
            return Err(bad("header"));
        }
        let (n, m) = (head[0], head[1]);
        let mut nums = |label: &str, rows: usize, cols: usize| -> Result<Vec<f64>, QpError> {
            if lines.next().map(str::trim) != Some(label) {
                return Err(bad(&format!("expected {label}")));
            }
            let mut out = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let l = lines.next().ok_or_else(|| bad("truncated"))?;
                let v: Vec<f64> =
                    l.split_whitespace().map(|t| t.parse().map_err(|_| bad("number"))).collect::<Result<_, _>>()?;
                if v.len() != cols {
                    return Err(bad("row length"));
                }
                out.extend(v);
            }
            Ok(out)
        };
        let h = DMatrix::from_row_slice(n, n, &nums("H", n, n)?);
        let g = DVector::from_vec(nums("g", 1, n)?);
        let a = DMatrix::from_row_slice(m, n, &nums("A", m, n)?);
        let b = DVector::from_vec(if m == 0 { nums("b", 1, 0)? } else { nums("b", 1, m)? });
        QpProblem::new(h, g, a, b)
    }
}

/// Solves the QP. Without a supplied start, a phase-1 LP finds one.
pub fn solve_qp(problem: &QpProblem, options: &QpOptions) -> Result<QpSolution, QpError> {
    let n = problem.n();
    let m = problem.m();
    let scale_b = problem.b.amax().max(1.0);
    let x0 = match &options.start {
        Some(x) => {
            if x.len() != n {
                return Err(QpError::Dimension("start has wrong length".into()));
            }
            let slack = &problem.a * x - &problem.b;
            if let Some((i, s)) = slack.iter().enumerate().find(|(_, &s)| s < -1e-9 * scale_b) {
                return Err(QpError::InfeasibleStart { index: i, violation: -s });
            }
            x.clone()
        }
        None => phase_one(problem, options)?,
    };
    if m == 0 && n == 0 {
        return Ok(QpSolution {
            x: x0,
            value: problem.c,
            duals: DVector::zeros(0),
            active_set: vec![],
            slacks: DVector::zeros(0),
            iterations: 0,
        });
    }
    active_set(problem, x0, options)
}

/// LP `min s  s.t.  A x + s ≥ b, s ≥ 0`, started from `x = 0`.
fn phase_one(problem: &QpProblem, options: &QpOptions) -> Result<DVector<f64>, QpError> {
    let n = problem.n();
    let m = problem.m();
    let viol0 = problem.b.iter().fold(0.0f64, |a, &v| a.max(v));
    if viol0 <= 0.0 {
        return Ok(DVector::zeros(n));
    }
    let mut a = DMatrix::zeros(m + 1, n + 1);
    a.view_mut((0, 0), (m, n)).copy_from(&problem.a);
    for i in 0..m {
        a[(i, n)] = 1.0;
    }
    a[(m, n)] = 1.0;
    let mut b = DVector::zeros(m + 1);
    b.rows_mut(0, m).copy_from(&problem.b);
    let mut g = DVector::zeros(n + 1);
    g[n] = 1.0;
    let lp = QpProblem { h: DMatrix::zeros(n + 1, n + 1), g, c: 0.0, a, b };
    let mut x0 = DVector::zeros(n + 1);
    x0[n] = viol0;
    let opts = QpOptions { max_iterations: options.max_iterations.max(10 * (n + m + 2)), ..options.clone() };
    let sol = active_set(&lp, x0, &opts)?;
    let s = sol.x[n];
    if s > 1e-9 * problem.b.amax().max(1.0) {
        return Err(QpError::Infeasible { residual: s });
    }
    Ok(sol.x.rows(0, n).into_owned())
}

struct NullSpace {
    z: DMatrix<f64>,
}

/// Orthonormal basis of `{d : A_W d = 0}` from the eigenvectors of the
/// complementary projector.
fn null_space(a_w: &DMatrix<f64>, n: usize) -> NullSpace {
    if a_w.nrows() == 0 {
        return NullSpace { z: DMatrix::identity(n, n) };
    }
    let gram = a_w * a_w.transpose();
    let proj = match gram.clone().cholesky() {
        Some(ch) => DMatrix::identity(n, n) - a_w.transpose() * ch.solve(a_w),
        None => {
            let pinv = gram.pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::zeros(a_w.nrows(), a_w.nrows()));
            DMatrix::identity(n, n) - a_w.transpose() * pinv * a_w
        }
    };
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    let mut z = DMatrix::zeros(n, cols.len());
    for (k, &i) in cols.iter().enumerate() {
        z.set_column(k, &eig.eigenvectors.column(i));
    }
    NullSpace { z }
}

fn working_rows(a: &DMatrix<f64>, w: &[usize]) -> DMatrix<f64> {
    let n = a.ncols();
    let mut a_w = DMatrix::zeros(w.len(), n);
    for (k, &i) in w.iter().enumerate() {
        a_w.set_row(k, &a.row(i));
    }
    a_w
}

/// Multipliers solving `A_Wᵀ λ = H x + g` in the least-squares sense.
fn multipliers(a_w: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if a_w.nrows() == 0 {
        return DVector::zeros(0);
    }
    let gram = a_w * a_w.transpose();
    let rhs = a_w * grad;
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.pseudo_inverse(1e-14).map(|p| p * rhs).unwrap_or_else(|_| DVector::zeros(a_w.nrows())),
    }
}

fn active_set(problem: &QpProblem, mut x: DVector<f64>, options: &QpOptions) -> Result<QpSolution, QpError> {
    let n = problem.n();
    let m = problem.m();
    let h_scale = problem.h.amax().max(1e-300);
    let row_norms: Vec<f64> = (0..m).map(|i| problem.a.row(i).norm()).collect();
    let mut w: Vec<usize> = Vec::new();
    let mut stalls = 0usize;

    for it in 0..options.max_iterations {
        let grad = &problem.h * &x + &problem.g;
        let g_scale = (h_scale * x.amax()).max(problem.g.amax()).max(1e-300);
        let tol_g = 1e-12 * g_scale.max(1.0);
        let a_w = working_rows(&problem.a, &w);
        let ns = null_space(&a_w, n);
        let k = ns.z.ncols();

        let mut direction: Option<(DVector<f64>, bool)> = None;
        if k > 0 {
            let r = ns.z.transpose() * &grad;
            if r.amax() > tol_g {
                let red = ns.z.transpose() * &problem.h * &ns.z;
                let eig = SymmetricEigen::new(red);
                let c = eig.eigenvectors.transpose() * &r;
                let curv_tol = 1e-11 * h_scale.max(1.0);
                let mut flat = DVector::zeros(k);
                let mut newton = DVector::zeros(k);
                let mut flat_norm2 = 0.0;
                for j in 0..k {
                    let u = eig.eigenvectors.column(j);
                    if eig.eigenvalues[j] <= curv_tol {
                        flat -= u * c[j];
                        flat_norm2 += c[j] * c[j];
                    } else {
                        newton -= u * (c[j] / eig.eigenvalues[j]);
                    }
                }
                if flat_norm2.sqrt() > tol_g {
                    direction = Some((&ns.z * flat, true));
                } else {
                    let d = &ns.z * newton;
                    if d.amax() > 1e-15 * x.amax().max(1.0) {
                        direction = Some((d, false));
                    }
                }
            }
        }

        match direction {
            Some((d, unbounded_ray)) => {
                let mut alpha = if unbounded_ray { f64::INFINITY } else { 1.0 };
                let mut block = None;
                let dn = d.norm();
                for i in 0..m {
                    if w.contains(&i) {
                        continue;
                    }
                    let ad = problem.a.row(i).dot(&d.transpose());
                    if ad < -1e-13 * row_norms[i] * dn {
                        let slack = (problem.a.row(i).dot(&x.transpose()) - problem.b[i]).max(0.0);
                        let ai = slack / -ad;
                        if ai < alpha {
                            alpha = ai;
                            block = Some(i);
                        }
                    }
                }
                if alpha.is_infinite() {
                    return Err(QpError::Unbounded);
                }
                x += &d * alpha;
                if let Some(i) = block {
                    w.push(i);
                    w.sort_unstable();
                }
                if alpha * dn <= 1e-15 * x.amax().max(1.0) {
                    stalls += 1;
                } else {
                    stalls = 0;
                }
            }
            None => {
                let lambda = multipliers(&a_w, &grad);
                let tol_l = 1e-10 * g_scale.max(1.0);
                let mut drop: Option<usize> = None;
                if stalls >= options.bland_after {
                    drop = (0..w.len()).find(|&j| lambda[j] < -tol_l);
                } else {
                    let mut most = -tol_l;
                    for j in 0..w.len() {
                        if lambda[j] < most {
                            most = lambda[j];
                            drop = Some(j);
                        }
                    }
                }
                match drop {
                    Some(j) => {
                        w.remove(j);
                    }
                    None => {
                        let mut duals = DVector::zeros(m);
                        for (j, &i) in w.iter().enumerate() {
                            duals[i] = lambda[j].max(0.0);
                        }
                        let slacks = &problem.a * &x - &problem.b;
                        return Ok(QpSolution {
                            value: problem.objective(&x),
                            x,
                            duals,
                            active_set: w,
                            slacks,
                            iterations: it,
                        });
                    }
                }
            }
        }
    }
    Err(QpError::MaxIterations(options.max_iterations))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unconstrained_least_squares() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let p = QpProblem { h: DMatrix::identity(3, 3) * 2.0, g: -&a * 2.0, c: a.dot(&a), a: DMatrix::zeros(0, 3), b: DVector::zeros(0) };
        let s = solve_qp(&p, &QpOptions::default()).unwrap();
        assert!((s.x - a).amax() < 1e-12);
        assert!(s.value.abs() < 1e-12);
    }

    #[test]
    fn scalar_bound() {
        let p = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let s = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_relative_eq!(s.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.value, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.duals[0], 2.0, epsilon = 1e-12);
        assert_eq!(s.active_set, vec![0]);
    }

    #[test]
    fn infeasible_detected() {
        // x ≥ 1 and -x ≥ 0.
        let p = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(solve_qp(&p, &QpOptions::default()), Err(QpError::Infeasible { .. })));
    }

    #[test]
    fn unbounded_detected() {
        // min -x, x ≥ 0.
        let p = QpProblem::new(
            DMatrix::zeros(1, 1),
            DVector::from_element(1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(solve_qp(&p, &QpOptions::default()), Err(QpError::Unbounded));
    }

    #[test]
    fn singular_hessian_with_linear_term() {
        // min (x0 + x1)² - x0  s.t. x0 ≤ 1, x1 ≥ -3 → x0 = 1, x1 = -1.
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]);
        let p = QpProblem::new(
            h,
            DVector::from_vec(vec![-1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![-1.0, -3.0]),
        )
        .unwrap();
        let s = solve_qp(&p, &QpOptions::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-10 && (s.x[1] + 1.0).abs() < 1e-10, "{:?}", s.x);
        assert!((s.value + 1.0).abs() < 1e-10);
        assert!(p.kkt_residuals(&s.x, &s.duals).max() < 1e-10);
    }

    #[test]
    fn text_dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_instance(&mut rng, 4, 5, true);
        let back = QpProblem::from_text(&p.to_text()).unwrap();
        assert_eq!(back.h, p.h);
        assert_eq!(back.a, p.a);
        assert_eq!(back.b, p.b);
        assert_eq!(back.g, p.g);
    }

    pub(crate) fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize, singular: bool) -> QpProblem {
        let rank = if singular { n / 2 + 1 } else { n };
        let f = DMatrix::from_fn(rank, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut h = f.transpose() * &f * 2.0;
        if !singular {
            h += DMatrix::identity(n, n) * 0.1;
        }
        let x_feas = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let slack = DVector::from_fn(m, |_, _| rng.gen_range(0.0..0.5));
        let b = &a * &x_feas - slack;
        let g = if singular {
            // Keep g in range(H) so the objective is bounded.
            &f.transpose() * DVector::from_fn(rank, |_, _| rng.gen_range(-2.0..2.0))
        } else {
            DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0))
        };
        QpProblem { h, g, c: 0.0, a, b }
    }

    /// Minimum over all active subsets of feasible stationary points.
    pub(crate) fn enumerate(p: &QpProblem) -> f64 {
        let n = p.n();
        let m = p.m();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << m) {
            let rows: Vec<usize> = (0..m).filter(|&i| mask & (1 << i) != 0).collect();
            let k = rows.len();
            if k > n {
                continue;
            }
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
            let mut rhs = DVector::zeros(n + k);
            rhs.rows_mut(0, n).copy_from(&-&p.g);
            for (j, &i) in rows.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + j, c)] = p.a[(i, c)];
                    kkt[(c, n + j)] = -p.a[(i, c)];
                }
                rhs[n + j] = p.b[i];
            }
            let svd = kkt.clone().svd(true, true);
            let Ok(sol) = svd.solve(&rhs, 1e-10) else { continue };
            if (&kkt * &sol - &rhs).amax() > 1e-8 {
                continue;
            }
            let x = sol.rows(0, n).into_owned();
            if (&p.a * &x - &p.b).min() < -1e-9 {
                continue;
            }
            best = best.min(p.objective(&x));
        }
        best
    }

    #[test]
    fn matches_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..40 {
            let singular = trial % 2 == 1;
            let p = random_instance(&mut rng, 9, 10, singular);
            let s = solve_qp(&p, &QpOptions::default()).unwrap();
            let oracle = enumerate(&p);
            assert!((s.value - oracle).abs() <= 1e-7 * (1.0 + oracle.abs()), "trial {trial}: {} vs {}", s.value, oracle);
            let r = p.kkt_residuals(&s.x, &s.duals);
            assert!(r.max() <= 1e-8, "{r:?}");
        }
    }

    #[test]
    fn phase_one_from_infeasible_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut p = random_instance(&mut rng, 6, 9, false);
            // Shift the feasible region away from the origin.
            let shift = DVector::from_element(6, 3.0);
            p.b += &p.a * &shift;
            let s = solve_qp(&p, &QpOptions::default()).unwrap();
            assert!((&p.a * &s.x - &p.b).min() >= -1e-9);
            assert!(p.kkt_residuals(&s.x, &s.duals).max() <= 1e-8);
        }
    }
}
