//! Reference Lagrange bases and Gauss-Legendre quadrature.

use super::FeError;

/// Gauss-Legendre rule with `n` points on `[0,1]`, exact for polynomials of
/// degree `2n-1`.
pub fn gauss_legendre(n: usize) -> Quadrature1d {
    assert!(n >= 1, "quadrature needs at least one point");
    let mut points = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        // Newton iteration on P_n over [-1,1], Chebyshev initial guess.
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        points.push(0.5 * (x + 1.0));
        weights.push(0.5 * w);
    }
    Quadrature1d { points, weights }
}

fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// One-dimensional quadrature rule on `[0,1]`.
#[derive(Debug, Clone)]
pub struct Quadrature1d {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Tensor-product quadrature rule on `[0,1]^2`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Tensor product of a 1D Gauss rule with `n` points per direction.
    pub fn gauss(n: usize) -> QuadratureRule {
        let q = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for (j, &y) in q.points.iter().enumerate() {
            for (i, &x) in q.points.iter().enumerate() {
                points.push([x, y]);
                weights.push(q.weights[i] * q.weights[j]);
            }
        }
        QuadratureRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lagrange basis on arbitrary distinct 1D nodes.
#[derive(Debug, Clone)]
pub struct Lagrange1d {
    pub nodes: Vec<f64>,
}

impl Lagrange1d {
    pub fn new(nodes: Vec<f64>) -> Self {
        Lagrange1d { nodes }
    }

    /// Equispaced nodes `i/p` on `[0,1]`; a single node at 1 for `p = 0`.
    pub fn equispaced(p: usize) -> Self {
        if p == 0 {
            return Lagrange1d { nodes: vec![1.0] };
        }
        Lagrange1d {
            nodes: (0..=p).map(|i| i as f64 / p as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, i: usize, t: f64) -> f64 {
        let xi = self.nodes[i];
        let mut v = 1.0;
        for (j, &xj) in self.nodes.iter().enumerate() {
            if j != i {
                v *= (t - xj) / (xi - xj);
            }
        }
        v
    }

    pub fn deriv(&self, i: usize, t: f64) -> f64 {
        let xi = self.nodes[i];
        let mut sum = 0.0;
        for (k, &xk) in self.nodes.iter().enumerate() {
            if k == i {
                continue;
            }
            let mut term = 1.0 / (xi - xk);
            for (j, &xj) in self.nodes.iter().enumerate() {
                if j != i && j != k {
                    term *= (t - xj) / (xi - xj);
                }
            }
            sum += term;
        }
        sum
    }

    pub fn second_deriv(&self, i: usize, t: f64) -> f64 {
        let xi = self.nodes[i];
        let mut sum = 0.0;
        for (k, &xk) in self.nodes.iter().enumerate() {
            if k == i {
                continue;
            }
            for (l, &xl) in self.nodes.iter().enumerate() {
                if l == i || l == k {
                    continue;
                }
                let mut term = 1.0 / ((xi - xk) * (xi - xl));
                for (j, &xj) in self.nodes.iter().enumerate() {
                    if j != i && j != k && j != l {
                        term *= (t - xj) / (xi - xj);
                    }
                }
                sum += term;
            }
        }
        sum
    }

    pub fn values(&self, t: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i, t)).collect()
    }

    pub fn derivs(&self, t: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.deriv(i, t)).collect()
    }
}

/// Tensor-product `Q_p` Lagrange basis on the reference square `[0,1]^2`,
/// equispaced support points, local dofs in lexicographic (x fastest) order.
#[derive(Debug, Clone)]
pub struct QuadBasis {
    pub degree: usize,
    line: Lagrange1d,
}

impl QuadBasis {
    pub fn new(degree: usize) -> Result<Self, FeError> {
        if degree == 0 || degree > 8 {
            return Err(FeError::UnsupportedDegree(degree));
        }
        Ok(QuadBasis {
            degree,
            line: Lagrange1d::equispaced(degree),
        })
    }

    pub fn n_dofs(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    /// Reference coordinates of local node `i`.
    pub fn node(&self, i: usize) -> [f64; 2] {
        let n = self.degree + 1;
        [self.line.nodes[i % n], self.line.nodes[i / n]]
    }

    pub fn value(&self, i: usize, xi: [f64; 2]) -> f64 {
        let n = self.degree + 1;
        self.line.value(i % n, xi[0]) * self.line.value(i / n, xi[1])
    }

    /// Gradient with respect to the reference coordinates.
    pub fn grad(&self, i: usize, xi: [f64; 2]) -> [f64; 2] {
        let n = self.degree + 1;
        let (ix, iy) = (i % n, i / n);
        [
            self.line.deriv(ix, xi[0]) * self.line.value(iy, xi[1]),
            self.line.value(ix, xi[0]) * self.line.deriv(iy, xi[1]),
        ]
    }

    /// Pure second derivatives `(d^2/dx^2, d^2/dy^2)` in reference coordinates.
    pub fn second(&self, i: usize, xi: [f64; 2]) -> [f64; 2] {
        let n = self.degree + 1;
        let (ix, iy) = (i % n, i / n);
        [
            self.line.second_deriv(ix, xi[0]) * self.line.value(iy, xi[1]),
            self.line.value(ix, xi[0]) * self.line.second_deriv(iy, xi[1]),
        ]
    }

    /// All basis values and reference gradients at a point.
    pub fn eval_all(&self, xi: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let n = self.n_dofs();
        let mut vals = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            vals.push(self.value(i, xi));
            grads.push(self.grad(i, xi));
        }
        (vals, grads)
    }
}

/// Basis values, gradients and pure second derivatives tabulated at the points
/// of a quadrature rule (reference coordinates).
#[derive(Debug, Clone)]
pub struct BasisTable {
    pub n_dofs: usize,
    /// `values[q][i]`
    pub values: Vec<Vec<f64>>,
    pub grads: Vec<Vec<[f64; 2]>>,
    pub seconds: Vec<Vec<[f64; 2]>>,
}

impl BasisTable {
    pub fn tabulate(basis: &QuadBasis, points: &[[f64; 2]]) -> BasisTable {
        let n = basis.n_dofs();
        let mut values = Vec::with_capacity(points.len());
        let mut grads = Vec::with_capacity(points.len());
        let mut seconds = Vec::with_capacity(points.len());
        for &p in points {
            values.push((0..n).map(|i| basis.value(i, p)).collect());
            grads.push((0..n).map(|i| basis.grad(i, p)).collect());
            seconds.push((0..n).map(|i| basis.second(i, p)).collect());
        }
        BasisTable {
            n_dofs: n,
            values,
            grads,
            seconds,
        }
    }
}
