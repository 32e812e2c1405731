//! Derivative-free minimization.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadSettings {
    pub max_evals: usize,
    /// Stop when the spread of simplex values falls below this.
    pub f_tolerance: f64,
    /// Stop when every vertex is within this distance of the best one.
    pub x_tolerance: f64,
    /// Edge length of the initial simplex, relative to `max(1, |x_j|)`.
    pub initial_step: f64,
}

impl Default for NelderMeadSettings {
    fn default() -> Self {
        Self { max_evals: 4000, f_tolerance: 1e-12, x_tolerance: 1e-9, initial_step: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead with standard coefficients (reflection 1, expansion 2,
/// contraction 1/2, shrink 1/2). Non-finite objective values are treated
/// as `+∞`.
pub fn nelder_mead(f: impl Fn(&DVector<f64>) -> f64, start: &DVector<f64>, settings: &NelderMeadSettings) -> Minimum {
    let dim = start.len();
    let eval = |x: &DVector<f64>| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut evals = 0usize;
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.clone(), eval(start)));
    evals += 1;
    for j in 0..dim {
        let mut v = start.clone();
        v[j] += settings.initial_step * start[j].abs().max(1.0);
        let fv = eval(&v);
        simplex.push((v, fv));
        evals += 1;
    }
    if dim == 0 {
        let (x, value) = simplex.pop().unwrap();
        return Minimum { x, value, evaluations: evals, converged: true };
    }
    let mut converged = false;
    while evals < settings.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let spread = if worst.is_finite() { (worst - best).abs() } else { f64::INFINITY };
        let size = simplex[1..].iter().map(|(v, _)| (v - &simplex[0].0).amax()).fold(0.0, f64::max);
        if spread <= settings.f_tolerance * (1.0 + best.abs()) && size <= settings.x_tolerance {
            converged = true;
            break;
        }
        let centroid = simplex[..dim].iter().fold(DVector::zeros(dim), |acc, (v, _)| acc + v) / dim as f64;
        let worst_x = simplex[dim].0.clone();
        let reflected = &centroid + (&centroid - &worst_x);
        let fr = eval(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = &centroid + (&reflected - &centroid) * 2.0;
            let fe = eval(&expanded);
            evals += 1;
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
            continue;
        }
        let (contracted, fc) = if fr < worst {
            let c = &centroid + (&reflected - &centroid) * 0.5;
            let fc = eval(&c);
            (c, fc)
        } else {
            let c = &centroid + (&worst_x - &centroid) * 0.5;
            let fc = eval(&c);
            (c, fc)
        };
        evals += 1;
        if fc < worst.min(fr) {
            simplex[dim] = (contracted, fc);
            continue;
        }
        let best_x = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let shrunk = &best_x + (&vertex.0 - &best_x) * 0.5;
            let fs = eval(&shrunk);
            *vertex = (shrunk, fs);
            evals += 1;
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum { x, value, evaluations: evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(f, &DVector::from_vec(vec![-1.2, 1.0]), &NelderMeadSettings::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{}", m.x);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &DVector<f64>| x.iter().map(|v| (v - 3.0).powi(4)).sum::<f64>();
        let start = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let m = nelder_mead(f, &start, &NelderMeadSettings { max_evals: 10, ..Default::default() });
        assert!(m.value <= f(&start));
    }

    #[test]
    fn flat_objective_returns_start() {
        let start = DVector::from_vec(vec![0.3, -0.2]);
        let m = nelder_mead(|_| 5.0, &start, &NelderMeadSettings::default());
        assert_eq!(m.x, start);
    }
}
