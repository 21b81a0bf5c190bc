//! Gauss-Hermite quadrature (physicists' convention).
//!
//! Nodes and weights come from the Golub-Welsch eigendecomposition of the
//! Jacobi matrix, so `sum_i w_i f(x_i)` integrates `exp(-x^2) f(x)` exactly
//! for polynomials up to degree 2n-1.

use nalgebra::{DMatrix, DVector};

/// Nodes and weights for n-point Gauss-Hermite quadrature.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i - 1, i)] = b;
        jacobi[(i, i - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let node = eig.eigenvalues[j];
            let q0 = eig.eigenvectors[(0, j)];
            (node, std::f64::consts::PI.sqrt() * q0 * q0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// E_{X ~ N(mu, sigma^2)}[f(X)] by n-point Gauss-Hermite.
pub fn expect_gaussian_1d(mu: f64, sigma: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let inv = 1.0 / std::f64::consts::PI.sqrt();
    nodes
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| w * f(mu + std::f64::consts::SQRT_2 * sigma * x))
        .sum::<f64>()
        * inv
}

/// E[f(X, Y)] for independent X ~ N(mu_x, sx^2), Y ~ N(mu_y, sy^2) on an
/// n x n tensor grid.
pub fn expect_gaussian_2d(
    mu_x: f64,
    sx: f64,
    mu_y: f64,
    sy: f64,
    n: usize,
    f: impl Fn(f64, f64) -> f64,
) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let inv = 1.0 / std::f64::consts::PI;
    let mut acc = 0.0;
    for (&xi, &wi) in nodes.iter().zip(&weights) {
        let x = mu_x + std::f64::consts::SQRT_2 * sx * xi;
        for (&yj, &wj) in nodes.iter().zip(&weights) {
            let y = mu_y + std::f64::consts::SQRT_2 * sy * yj;
            acc += wi * wj * f(x, y);
        }
    }
    acc * inv
}

/// Central finite-difference gradient of a scalar field.
pub fn central_gradient(
    f: impl Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += h;
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    })
}

/// Central finite-difference Jacobian of a vector field.
pub fn central_jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::<f64>::zeros(m, n);
    for j in 0..n {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[j] += h;
        lo[j] -= h;
        let d = (f(&hi) - f(&lo)) / (2.0 * h);
        jac.set_column(j, &d);
    }
    jac
}
