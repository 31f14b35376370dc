//! Nelder-Mead downhill simplex minimisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Converged once both the vertex spread and the objective spread fall
    /// to this value.
    pub tol: f64,
    pub max_iter: usize,
    /// Edge length of the initial simplex.
    pub step: f64,
    /// Picks the direction of each initial edge.
    pub seed: u64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 500, step: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration.
    pub history: Vec<f64>,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn axpy(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    // a + t (b - a)
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

/// Minimises `f` from `x0`. Non-finite objective values are treated as
/// `+inf`, so the simplex backs away from them.
pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> SimplexResult {
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        x[i] += sign * opts.step;
        let v = eval(&x);
        simplex.push((x, v));
    }

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let f_spread = simplex.iter().map(|(_, v)| (v - best).abs()).fold(0.0, f64::max);
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread <= opts.tol && x_spread <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let second = simplex[n - 1].1;

        let xr = axpy(&centroid, &worst.0, -REFLECT);
        let fr = eval(&xr);
        if fr < best {
            let xe = axpy(&centroid, &worst.0, -EXPAND);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < second {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = axpy(&centroid, &xr, CONTRACT);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = axpy(&centroid, &worst.0, CONTRACT);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x = axpy(&x_best, &vertex.0, SHRINK);
                    let v = eval(&x);
                    *vertex = (x, v);
                }
            }
        }
        history.push(simplex.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min));
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    SimplexResult { x, value, iterations, evaluations, converged, history }
}
