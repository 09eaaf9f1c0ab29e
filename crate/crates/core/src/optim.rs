//! Derivative-free minimization and finite-difference curvature.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    /// Stop when `max f − min f` over the simplex falls below this ...
    pub f_tol: f64,
    /// ... and every vertex is within this distance (sup norm) of the best.
    pub x_tol: f64,
    /// Dimension-scaled expansion, contraction and shrink coefficients.
    pub adaptive: bool,
    /// Per-coordinate offsets of the initial simplex; defaults to
    /// `max(0.1·|x0_j|, 0.1)`.
    pub initial_step: Option<Vec<f64>>,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            f_tol: 1e-6,
            x_tol: 1e-6,
            adaptive: true,
            initial_step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration.
    pub best_history: Vec<f64>,
}

/// Reflection, expansion, contraction and shrink coefficients.
pub fn nelder_mead_coefficients(n: usize, adaptive: bool) -> (f64, f64, f64, f64) {
    if adaptive && n >= 1 {
        let n = n as f64;
        (1.0, 1.0 + 2.0 / n, 0.75 - 0.5 / n, 1.0 - 1.0 / n)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    }
}

/// Default initial simplex offset for a start value.
pub fn default_step(x: f64) -> f64 {
    (0.1 * x.abs()).max(0.1)
}

/// Minimizes `f` from `x0`. Non-finite objective values are treated as +∞.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let n = x0.len();
    assert!(n >= 1, "nothing to optimize");
    let (alpha, gamma, rho, sigma) = nelder_mead_coefficients(n, opts.adaptive);
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..n {
        let step = opts.initial_step.as_ref().map_or_else(|| default_step(x0[j]), |s| s[j]);
        let mut v = x0.to_vec();
        v[j] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let mut best_history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        // Stable sort keeps ties in insertion order.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let f_spread = values[n] - values[0];
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread < opts.f_tol && x_spread < opts.x_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = along(alpha * gamma);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc, accept) = if fr < values[n] {
                let xc = along(alpha * rho);
                let fc = eval(&xc);
                let ok = fc <= fr;
                (xc, fc, ok)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc);
                let ok = fc < values[n];
                (xc, fc, ok)
            };
            if accept {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, v)| b + sigma * (v - b))
                        .collect();
                    values[i] = eval(&shrunk);
                    simplex[i] = shrunk;
                }
            }
        }
        best_history.push(values.iter().copied().fold(f64::INFINITY, f64::min));
    }

    NelderMeadResult {
        x: simplex[0].clone(),
        f: values[0],
        iterations,
        evaluations,
        converged,
        best_history,
    }
}

/// Central finite-difference Hessian of `f` at `x` with per-coordinate
/// steps `h`.
pub fn numerical_hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut at = |dx: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(j, d) in dx {
            y[j] += d;
        }
        f(&y)
    };
    let f0 = at(&[]);
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let fp = at(&[(i, h[i])]);
        let fm = at(&[(i, -h[i])]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = at(&[(i, h[i]), (j, h[j])]);
            let fpm = at(&[(i, h[i]), (j, -h[j])]);
            let fmp = at(&[(i, -h[i]), (j, h[j])]);
            let fmm = at(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Step `max(1e-4, 1e-4·|p|)` used for standard errors.
pub fn hessian_step(p: f64) -> f64 {
    (1e-4 * p.abs()).max(1e-4)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// Whether the Hessian was positive definite; if not, `matrix` is the
    /// Moore–Penrose pseudo-inverse.
    pub positive_definite: bool,
}

impl Covariance {
    /// Square roots of the diagonal; NaN where the diagonal is negative.
    pub fn standard_errors(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|v| if *v >= 0.0 { v.sqrt() } else { f64::NAN }).collect()
    }
}

/// Inverts a Hessian of a negative log-likelihood.
pub fn invert_hessian(hess: &DMatrix<f64>) -> Covariance {
    let sym = (hess + hess.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        return Covariance {
            matrix: chol.inverse(),
            positive_definite: true,
        };
    }
    log::warn!("Hessian is not positive definite; using the pseudo-inverse");
    let svd = sym.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let matrix = svd
        .pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::from_element(hess.nrows(), hess.ncols(), f64::NAN));
    Covariance {
        matrix,
        positive_definite: false,
    }
}

/// Sample standard deviation (n − 1 denominator) of each column; zero for
/// a single row.
pub fn column_std_dev(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let k = first.len();
    if rows.len() < 2 {
        return vec![0.0; k];
    }
    let m = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    (0..k)
        .map(|j| {
            let col: DVector<f64> = m.column(j).into();
            col.variance() * rows.len() as f64 / (rows.len() - 1) as f64
        })
        .map(f64::sqrt)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn coefficients() {
        assert_eq!(nelder_mead_coefficients(7, false), (1.0, 2.0, 0.5, 0.5));
        let (a, g, r, s) = nelder_mead_coefficients(2, true);
        assert_eq!((a, g, r, s), (1.0, 2.0, 0.5, 0.5));
        let (_, g, r, s) = nelder_mead_coefficients(7, true);
        assert!((g - 9.0 / 7.0).abs() < 1e-15 && (r - (0.75 - 1.0 / 14.0)).abs() < 1e-15 && (s - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(default_step(-8.0), 0.8);
        assert_eq!(default_step(-0.03), 0.1);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let opts = NelderMeadOptions {
            max_iters: 5000,
            f_tol: 1e-12,
            x_tol: 1e-8,
            ..Default::default()
        };
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        assert!(r.best_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn minimizes_quadratic_in_seven_dimensions() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let f = |x: &[f64]| x.iter().zip(a).map(|(x, a)| a * (x - 1.0).powi(2)).sum::<f64>();
        let r = nelder_mead(f, &[0.0; 7], &NelderMeadOptions { max_iters: 10_000, ..Default::default() });
        assert!(r.converged);
        assert!(r.x.iter().all(|x| (x - 1.0).abs() < 1e-5));
    }

    #[test]
    fn reports_iteration_cap() {
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &NelderMeadOptions { max_iters: 5, ..Default::default() });
        assert!(!r.converged);
        assert_eq!(r.iterations, 5);
    }

    #[test]
    fn survives_non_finite_values() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let r = nelder_mead(f, &[0.5], &NelderMeadOptions::default());
        assert!((r.x[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn quadratic_standard_errors() {
        let a = [4.0, 1.0, 9.0];
        let f = |x: &[f64]| 0.5 * x.iter().zip(a).map(|(x, a)| a * x * x).sum::<f64>();
        let x = [0.3, -0.2, 0.1];
        let h: Vec<f64> = x.iter().map(|&p| hessian_step(p)).collect();
        let cov = invert_hessian(&numerical_hessian(f, &x, &h));
        assert!(cov.positive_definite);
        let se = cov.standard_errors();
        assert!((se[0] - 0.5).abs() < 1e-4);
        for (s, a) in se.iter().zip(a) {
            assert!((s - 1.0 / a.sqrt()).abs() < 1e-4);
        }
    }

    #[test]
    fn indefinite_hessian_falls_back_to_pseudo_inverse() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let cov = invert_hessian(&h);
        assert!(!cov.positive_definite);
        assert!((cov.matrix[(0, 0)] - 0.25).abs() < 1e-12);
        assert_eq!(cov.matrix[(1, 1)], 0.0);
    }

    #[test]
    fn std_dev_columns() {
        assert_eq!(column_std_dev(&[vec![1.0, 2.0]]), vec![0.0, 0.0]);
        let sd = column_std_dev(&[vec![1.0, 0.0], vec![3.0, 0.0]]);
        assert!((sd[0] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(sd[1], 0.0);
    }
}
