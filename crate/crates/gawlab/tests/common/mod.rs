//! Oracles shared by the integration suites. Everything here recomputes
//! expected values through an independent route from the implementation under
//! test: exhaustive policy enumeration with an exact linear solve for optimal
//! values, quadrature for order statistics, and dense-grid Riemann sums for
//! the weighting operator.

use gawlab::tabular::TabularMdp;

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        assert!(diag.abs() > 1e-14, "singular system");
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor != 0.0 {
                for j in col..n {
                    a[row * n + j] -= factor * a[col * n + j];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    x
}

/// Value of a fixed deterministic policy: solve `(I - gamma P_pi) V = r_pi`.
pub fn policy_value(mdp: &TabularMdp, policy: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        let action = policy[s];
        b[s] = mdp.reward(s, action);
        let row = mdp.transition_row(s, action);
        for s2 in 0..n {
            let identity = if s == s2 { 1.0 } else { 0.0 };
            a[s * n + s2] = identity - mdp.gamma * row[s2];
        }
    }
    solve_linear(a, b, n)
}

/// Optimal values by brute force: enumerate every deterministic policy,
/// solve each exactly, and take the elementwise maximum.
pub fn optimal_values_by_enumeration(mdp: &TabularMdp) -> Vec<f64> {
    let n_states = mdp.n_states();
    let n_actions = mdp.n_actions();
    let total = n_actions.pow(n_states as u32);
    let mut best = vec![f64::NEG_INFINITY; n_states];
    let mut policy = vec![0usize; n_states];
    for code in 0..total {
        let mut c = code;
        for slot in policy.iter_mut() {
            *slot = c % n_actions;
            c /= n_actions;
        }
        let value = policy_value(mdp, &policy);
        for (b, v) in best.iter_mut().zip(value) {
            *b = b.max(v);
        }
    }
    best
}

/// `E[max of n iid standard normals]` by Simpson quadrature of
/// `n x phi(x) Phi(x)^(n-1)`.
pub fn expected_max_of_standard_normals(n: u32) -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    let integrand =
        |x: f64| n as f64 * x * normal.pdf(x) * normal.cdf(x).powi(n as i32 - 1);
    let (a, b, steps) = (-10.0f64, 10.0f64, 40_000usize);
    let h = (b - a) / steps as f64;
    let mut acc = integrand(a) + integrand(b);
    for i in 1..steps {
        let x = a + h * i as f64;
        acc += integrand(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Dense-grid quadrature of the activated weighting operator restricted to a
/// 1-d interval with uniform measure: `sum g(q(a)) q(a) / sum g(q(a))` over a
/// uniform grid. Independent of the library's operator path.
pub fn grid_quadrature_ga(
    critic: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
    weight: impl Fn(f64) -> f64,
) -> f64 {
    let step = (hi - lo) / (points - 1) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..points {
        let a = lo + step * i as f64;
        let q = critic(a);
        let g = weight(q);
        num += g * q;
        den += g;
    }
    num / den
}
