//! Time slab partitioning, dG(r) temporal bases on right Gauss-Radau support
//! points, and the temporal weight operators of the error estimator.

use thiserror::Error;

use crate::fe::{gauss_legendre, Lagrange1d, Quadrature1d};

#[derive(Debug, Error)]
pub enum TimeError {
    #[error("time interval is empty or reversed")]
    EmptyInterval,
    #[error("slab {0} out of range")]
    SlabOutOfRange(usize),
    #[error("restriction requires target degree below source degree ({0} >= {1})")]
    DegreeOrder(usize, usize),
}

/// Right Gauss-Radau points on `[0,1]`: `n` points including the endpoint 1.
/// These are the support points of the dG(r) basis with `n = r + 1`, so the
/// right trace of a slab polynomial is a nodal value.
pub fn radau_right_points(n: usize) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![1.0];
    }
    // Interior points are the roots of P_{n-1} - P_n on (-1, 1).
    let f = |x: f64| legendre(n - 1, x) - legendre(n, x);
    let mut roots = Vec::with_capacity(n - 1);
    let samples = 2000;
    let mut x_prev = -1.0 + 1e-12;
    let mut f_prev = f(x_prev);
    for k in 1..samples {
        let x = -1.0 + 2.0 * k as f64 / samples as f64;
        if x >= 1.0 - 1e-9 {
            break;
        }
        let fx = f(x);
        if f_prev == 0.0 {
            roots.push(x_prev);
        } else if f_prev * fx < 0.0 {
            let (mut a, mut b) = (x_prev, x);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if f(a) * f(m) <= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            roots.push(0.5 * (a + b));
        }
        x_prev = x;
        f_prev = fx;
    }
    assert_eq!(roots.len(), n - 1, "Radau root search failed for n={n}");
    let mut pts: Vec<f64> = roots.into_iter().map(|x| 0.5 * (x + 1.0)).collect();
    pts.push(1.0);
    pts
}

fn legendre(n: usize, x: f64) -> f64 {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return p0;
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Nodal Lagrange basis of degree `r` on the reference interval `[0,1]`.
#[derive(Debug, Clone)]
pub struct TemporalBasis {
    pub degree: usize,
    line: Lagrange1d,
}

impl TemporalBasis {
    /// dG(r) basis on right Radau support points.
    pub fn dg(degree: usize) -> Self {
        TemporalBasis {
            degree,
            line: Lagrange1d::new(radau_right_points(degree + 1)),
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.degree + 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.line.nodes
    }

    pub fn value(&self, i: usize, s: f64) -> f64 {
        self.line.value(i, s)
    }

    /// Derivative with respect to the reference coordinate.
    pub fn deriv(&self, i: usize, s: f64) -> f64 {
        self.line.deriv(i, s)
    }

    pub fn values(&self, s: f64) -> Vec<f64> {
        self.line.values(s)
    }

    pub fn derivs(&self, s: f64) -> Vec<f64> {
        self.line.derivs(s)
    }
}

/// Gauss-Legendre quadrature on the reference interval, exact for polynomials
/// up to degree `2n-1`.
pub fn temporal_quadrature(n_points: usize) -> Quadrature1d {
    gauss_legendre(n_points)
}

/// Jump of two one-sided traces sharing a space: `[u]_n = u_n^+ - u_n^-`.
pub fn jump(plus: &[f64], minus: &[f64]) -> Vec<f64> {
    debug_assert_eq!(plus.len(), minus.len());
    plus.iter().zip(minus).map(|(p, m)| p - m).collect()
}

/// Lagrange basis of the degree-`(r+1)` temporal lift: support points are the
/// left slab end plus the `r+1` dG support points. The lift coefficients are
/// just `[left_value, slab values...]` in this basis.
pub fn extrapolation_basis(primal: &TemporalBasis) -> Lagrange1d {
    let mut nodes = Vec::with_capacity(primal.n_dofs() + 1);
    nodes.push(0.0);
    nodes.extend_from_slice(primal.nodes());
    // Radau points exclude the left endpoint, so the abscissae are distinct.
    debug_assert!(nodes.windows(2).all(|w| w[1] > w[0] + 1e-12));
    Lagrange1d::new(nodes)
}

/// Matrix of the temporal restriction `R_tau^r` acting on dual coefficients:
/// interpolate the degree-`s` slab polynomial at the `r+1` primal support
/// points, then re-express the degree-`r` result in the dual basis. The
/// composite is idempotent and reproduces polynomials of degree at most `r`.
pub fn restriction_matrix(
    dual: &TemporalBasis,
    primal: &TemporalBasis,
) -> Result<Vec<Vec<f64>>, TimeError> {
    let (s, r) = (dual.degree, primal.degree);
    if r >= s {
        return Err(TimeError::DegreeOrder(r, s));
    }
    let primal_line = Lagrange1d::new(primal.nodes().to_vec());
    let nd = dual.n_dofs();
    let np = primal.n_dofs();
    // M[b][i] = sum_a primal Lagrange_a(dual node b) * dual_i(primal node a).
    let mut m = vec![vec![0.0; nd]; nd];
    for b in 0..nd {
        let tb = dual.nodes()[b];
        for i in 0..nd {
            let mut acc = 0.0;
            for a in 0..np {
                acc += primal_line.value(a, tb) * dual.value(i, primal.nodes()[a]);
            }
            m[b][i] = acc;
        }
    }
    Ok(m)
}

/// Applies a temporal matrix to per-node spatial coefficient blocks.
pub fn apply_temporal_matrix(m: &[Vec<f64>], blocks: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_space = blocks[0].len();
    let mut out = vec![vec![0.0; n_space]; m.len()];
    for (b, row) in m.iter().enumerate() {
        for (i, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for k in 0..n_space {
                out[b][k] += w * blocks[i][k];
            }
        }
    }
    out
}

/// Partition of `[0, T]` into left-open slabs `(t_{n-1}, t_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabGrid {
    breakpoints: Vec<f64>,
}

impl SlabGrid {
    pub fn uniform(t0: f64, t1: f64, n: usize) -> Result<SlabGrid, TimeError> {
        if n == 0 || t1 <= t0 {
            return Err(TimeError::EmptyInterval);
        }
        let breakpoints = (0..=n)
            .map(|k| crate::mesh::lerp(t0, t1, k as f64 / n as f64))
            .collect();
        Ok(SlabGrid { breakpoints })
    }

    pub fn from_breakpoints(breakpoints: Vec<f64>) -> Result<SlabGrid, TimeError> {
        if breakpoints.len() < 2 || breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TimeError::EmptyInterval);
        }
        Ok(SlabGrid { breakpoints })
    }

    pub fn n_slabs(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn interval(&self, n: usize) -> (f64, f64) {
        (self.breakpoints[n], self.breakpoints[n + 1])
    }

    pub fn tau(&self, n: usize) -> f64 {
        self.breakpoints[n + 1] - self.breakpoints[n]
    }

    pub fn total_time(&self) -> f64 {
        *self.breakpoints.last().unwrap() - self.breakpoints[0]
    }

    /// Index of the slab whose left-open interval contains `t`.
    pub fn slab_containing(&self, t: f64) -> Result<usize, TimeError> {
        let t0 = self.breakpoints[0];
        let t1 = *self.breakpoints.last().unwrap();
        if t <= t0 || t > t1 + 1e-12 * (t1 - t0) {
            return Err(TimeError::SlabOutOfRange(usize::MAX));
        }
        for n in 0..self.n_slabs() {
            if t <= self.breakpoints[n + 1] {
                return Ok(n);
            }
        }
        Ok(self.n_slabs() - 1)
    }

    /// Bisects the marked slabs; indices refer to the current numbering.
    pub fn bisect(&self, marked: &[usize]) -> Result<SlabGrid, TimeError> {
        let mut marks = marked.to_vec();
        marks.sort_unstable();
        marks.dedup();
        if let Some(&bad) = marks.iter().find(|&&m| m >= self.n_slabs()) {
            return Err(TimeError::SlabOutOfRange(bad));
        }
        let mut breakpoints = Vec::with_capacity(self.breakpoints.len() + marks.len());
        breakpoints.push(self.breakpoints[0]);
        for n in 0..self.n_slabs() {
            let (a, b) = self.interval(n);
            if marks.binary_search(&n).is_ok() {
                breakpoints.push(crate::mesh::lerp(a, b, 0.5));
            }
            breakpoints.push(b);
        }
        Ok(SlabGrid { breakpoints })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radau_points_match_closed_forms() {
        assert_eq!(radau_right_points(1), vec![1.0]);
        let r2 = radau_right_points(2);
        assert!((r2[0] - 1.0 / 3.0).abs() < 1e-12 && r2[1] == 1.0);
        let r3 = radau_right_points(3);
        let s6 = 6.0_f64.sqrt();
        assert!((r3[0] - (4.0 - s6) / 10.0).abs() < 1e-12);
        assert!((r3[1] - (4.0 + s6) / 10.0).abs() < 1e-12);
        assert_eq!(r3[2], 1.0);
        for n in 4..=5 {
            let r = radau_right_points(n);
            assert_eq!(r.len(), n);
            assert!(r.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(*r.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn quadrature_exactness() {
        let q = temporal_quadrature(1);
        let s: f64 = q.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        let q = temporal_quadrature(2);
        let v: f64 = q.points.iter().zip(&q.weights).map(|(&t, &w)| w * t * t * t).sum();
        assert!((v - 0.25).abs() < 1e-15);
        // A degree-5 product integrand needs only 3 points.
        let q = temporal_quadrature(3);
        let v: f64 = q.points.iter().zip(&q.weights).map(|(&t, &w)| w * t.powi(5)).sum();
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn jump_of_equal_fields_vanishes() {
        let u = vec![0.3, -1.2, 4.5];
        assert!(jump(&u, &u).iter().all(|&j| j == 0.0));
    }

    #[test]
    fn lift_of_constant_is_constant() {
        let basis = TemporalBasis::dg(0);
        let lift = extrapolation_basis(&basis);
        // coefficients [left, slab values...] = [1, 1]
        for s in [0.0, 0.4, 1.0] {
            let v = lift.value(0, s) + lift.value(1, s);
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn lift_r0_is_two_point_interpolant() {
        // Left value 1, right value e^{-1}: the lift is 1 + (e^{-1} - 1) s.
        let basis = TemporalBasis::dg(0);
        let lift = extrapolation_basis(&basis);
        let c = [1.0, (-1.0_f64).exp()];
        for s in [0.0, 0.25, 0.7, 1.0] {
            let v = c[0] * lift.value(0, s) + c[1] * lift.value(1, s);
            let expect = 1.0 + ((-1.0_f64).exp() - 1.0) * s;
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn lift_r1_recovers_quadratics() {
        let basis = TemporalBasis::dg(1);
        let lift = extrapolation_basis(&basis);
        let q = |t: f64| t * t;
        let mut c = vec![q(0.0)];
        c.extend(basis.nodes().iter().map(|&t| q(t)));
        for s in [0.1, 0.5, 0.9] {
            let v: f64 = c.iter().enumerate().map(|(k, &ck)| ck * lift.value(k, s)).sum();
            assert!((v - q(s)).abs() < 1e-13);
        }
    }

    #[test]
    fn restriction_s1_r0() {
        // A linear dual restricted to dG(0) equals its value at the primal
        // support point; the weight vanishes there.
        let dual = TemporalBasis::dg(1);
        let primal = TemporalBasis::dg(0);
        let m = restriction_matrix(&dual, &primal).unwrap();
        let z = |t: f64| 2.0 - 3.0 * t;
        let zc: Vec<f64> = dual.nodes().iter().map(|&t| z(t)).collect();
        let rc: Vec<f64> = (0..2)
            .map(|b| (0..2).map(|i| m[b][i] * zc[i]).sum())
            .collect();
        for s in [0.0, 0.5, 1.0] {
            let rz: f64 = (0..2).map(|i| rc[i] * dual.value(i, s)).sum();
            assert!((rz - z(1.0)).abs() < 1e-13);
        }
        // weight z - Rz is linear and vanishes at the primal point s=1.
        let w1: f64 = (0..2).map(|i| (zc[i] - rc[i]) * dual.value(i, 1.0)).sum();
        assert!(w1.abs() < 1e-13);
    }

    #[test]
    fn restriction_of_constant_gives_zero_weight() {
        let dual = TemporalBasis::dg(2);
        let primal = TemporalBasis::dg(1);
        let m = restriction_matrix(&dual, &primal).unwrap();
        let zc = vec![1.0; 3];
        for b in 0..3 {
            let r: f64 = (0..3).map(|i| m[b][i] * zc[i]).sum();
            assert!((r - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn restriction_s2_r1_is_secant() {
        let dual = TemporalBasis::dg(2);
        let primal = TemporalBasis::dg(1);
        let m = restriction_matrix(&dual, &primal).unwrap();
        let zc: Vec<f64> = dual.nodes().iter().map(|&t| t * t).collect();
        let rc: Vec<f64> = (0..3)
            .map(|b| (0..3).map(|i| m[b][i] * zc[i]).sum())
            .collect();
        // Secant of t^2 through the primal Radau points {1/3, 1}.
        let (a, b) = (1.0 / 3.0, 1.0);
        let secant = |t: f64| a * a + (b * b - a * a) / (b - a) * (t - a);
        for s in [0.0, 0.2, 0.6, 1.0] {
            let rz: f64 = (0..3).map(|i| rc[i] * dual.value(i, s)).sum();
            assert!((rz - secant(s)).abs() < 1e-13);
        }
    }

    #[test]
    fn restriction_reproduces_low_degree_and_is_idempotent() {
        for (s, r) in [(1, 0), (2, 1), (3, 2)] {
            let dual = TemporalBasis::dg(s);
            let primal = TemporalBasis::dg(r);
            let m = restriction_matrix(&dual, &primal).unwrap();
            // Degree <= r polynomial: weight vanishes.
            let z = |t: f64| (1.0 + t).powi(r as i32);
            let zc: Vec<f64> = dual.nodes().iter().map(|&t| z(t)).collect();
            for b in 0..=s {
                let rz: f64 = (0..=s).map(|i| m[b][i] * zc[i]).sum();
                assert!((rz - zc[b]).abs() < 1e-13);
            }
            // Idempotence on arbitrary coefficients.
            let zc = vec![0.3, -1.0, 2.5, 0.7][..=s].to_vec();
            let apply = |c: &[f64]| -> Vec<f64> {
                (0..=s).map(|b| (0..=s).map(|i| m[b][i] * c[i]).sum()).collect()
            };
            let r1 = apply(&zc);
            let r2 = apply(&r1);
            for (x, y) in r1.iter().zip(&r2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(restriction_matrix(&TemporalBasis::dg(1), &TemporalBasis::dg(1)).is_err());
    }

    #[test]
    fn slab_grid_partition_and_bisection() {
        let g = SlabGrid::uniform(0.0, 1.0, 4).unwrap();
        assert_eq!(g.n_slabs(), 4);
        let total: f64 = (0..4).map(|n| g.tau(n)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let g2 = g.bisect(&[1, 3]).unwrap();
        assert_eq!(g2.n_slabs(), 6);
        let total: f64 = (0..6).map(|n| g2.tau(n)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(g.slab_containing(0.25).unwrap(), 0);
        assert_eq!(g.slab_containing(0.2500001).unwrap(), 1);
        assert!(g.slab_containing(0.0).is_err());
        assert_eq!(g.slab_containing(1.0).unwrap(), 3);
    }
}
