//! Independent reference implementations used by the tests.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tte_core::stats::Posterior;

/// Standard Student-t density with `nu` degrees of freedom.
pub fn t_density(x: f64, nu: f64) -> f64 {
    let log_c = libm::lgamma((nu + 1.0) / 2.0) - libm::lgamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    (log_c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp()
}

pub fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

pub fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        left + right + (left + right - whole) / 15.0
    } else {
        adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, 1e-13, 50)
}

/// P(T < x) for a standard t, by quadrature from the symmetric centre.
pub fn oracle_cdf(x: f64, nu: f64) -> f64 {
    let f = |t: f64| t_density(t, nu);
    if x < 0.0 {
        0.5 - integrate(&f, x, 0.0)
    } else {
        0.5 + integrate(&f, 0.0, x)
    }
}

pub fn region_oracle(post: &Posterior, rope: f64) -> (f64, f64, f64) {
    let lo = (-rope - post.location) / post.scale;
    let hi = (rope - post.location) / post.scale;
    let left = oracle_cdf(lo, post.dof);
    let right = 1.0 - oracle_cdf(hi, post.dof);
    let mid = integrate(&|t| t_density(t, post.dof), lo, hi);
    (left, mid, right)
}

/// `(diffs, rho, rope)` cases for the quadrature comparison.
pub fn quadrature_fixtures(count: usize) -> Vec<(Vec<f64>, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    (0..count)
        .map(|case| {
            let n = rng.random_range(2..=15);
            let centre = rng.random_range(-3.0..3.0);
            let spread = rng.random_range(0.05..4.0);
            let diffs: Vec<f64> = (0..n).map(|_| centre + spread * rng.random_range(-1.0..1.0)).collect();
            let rho = rng.random_range(0.0..0.6);
            (diffs, rho, [0.1, 0.25, 0.5, 1.0, 2.0][case % 5])
        })
        .collect()
}

pub fn random_points(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<f64> {
    (0..k * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Coordinates from a dense eigensolver on the covariance, with the same
/// sign convention applied to the eigenvectors.
pub fn pca_oracle(data: &[f64], k: usize, d: usize) -> (Vec<[f64; 2]>, [f64; 2]) {
    let x = DMatrix::from_row_slice(k, d, data);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(k, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total = cov.trace();
    let mut dirs = Vec::new();
    for &i in &order[..2] {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let big = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        if v[big] < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        dirs.push(v);
    }
    let coords = (0..k)
        .map(|r| {
            let row: Vec<f64> = (0..d).map(|j| centred[(r, j)]).collect();
            let p = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [p(&dirs[0]), p(&dirs[1])]
        })
        .collect();
    let ratios = [eig.eigenvalues[order[0]] / total, eig.eigenvalues[order[1]] / total];
    (coords, ratios)
}

