//! Central-difference gradient oracle.
//!
//! Independent of the adjoint code paths in [`graph`](crate::graph): the
//! numerical side only ever reads forward values.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step used by the standard checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Tolerance every differentiable path must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max over all entries of `|a - b| / max(|a|, |b|, 1e-8)`.
    pub max_rel_err: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        let worse = !(self.max_rel_err >= other.max_rel_err);
        GradCheck {
            max_rel_err: if worse { other.max_rel_err } else { self.max_rel_err },
            worst: if worse { other.worst } else { self.worst },
            checked: self.checked + other.checked,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    let err = (analytic - numeric).abs() / denom;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

fn analytic_grads<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(if g.requires_grad(out) {
        g.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    } else {
        // A constant function: every analytic gradient is zero.
        params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    })
}

/// Compares `backward` against central differences for every entry of every
/// tensor in `params`. `f` must build a scalar from the given leaves.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, params)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for ei in 0..base.len() {
            let mut plus = base.clone();
            plus[ei] += step;
            perturbed[pi] = Tensor::new(p.shape().to_vec(), plus)?;
            let f_plus = evaluate(&f, &perturbed)?;

            let mut minus = base.clone();
            minus[ei] -= step;
            perturbed[pi] = Tensor::new(p.shape().to_vec(), minus)?;
            let f_minus = evaluate(&f, &perturbed)?;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let err = relative_error(analytic[pi].data()[ei], numeric);
            report.checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = Some((pi, ei));
            }
        }
        perturbed[pi] = p.clone();
    }
    Ok(report)
}

/// Compares the analytic directional derivative `<grad, d>` with the central
/// difference along `d` for each direction. Every direction holds one tensor
/// per parameter and is scaled to unit norm first. The worst entry is
/// reported as `(direction index, 0)`.
pub fn directional_check<F>(f: F, params: &[Tensor], directions: &[Vec<Tensor>], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, params)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (di, dir) in directions.iter().enumerate() {
        if dir.len() != params.len() || dir.iter().zip(params).any(|(d, p)| d.shape() != p.shape()) {
            return Err(crate::error::contract("directional_check", "direction shapes must match the parameters"));
        }
        let norm = dir.iter().flat_map(|d| d.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(crate::error::contract("directional_check", "direction must be non-zero"));
        }
        let shifted = |sign: f64| -> Result<Vec<Tensor>> {
            params
                .iter()
                .zip(dir)
                .map(|(p, d)| {
                    let v = p.data().iter().zip(d.data()).map(|(x, e)| x + sign * step * e / norm).collect();
                    Tensor::new(p.shape().to_vec(), v)
                })
                .collect()
        };
        let numeric = (evaluate(&f, &shifted(1.0)?)? - evaluate(&f, &shifted(-1.0)?)?) / (2.0 * step);
        let exact = analytic
            .iter()
            .zip(dir)
            .flat_map(|(a, d)| a.data().iter().zip(d.data()).map(|(x, e)| x * e / norm))
            .sum::<f64>();
        let err = relative_error(exact, numeric);
        report.checked += 1;
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst = Some((di, 0));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_function_is_exact() {
        let w = rand_tensor(&[3, 4], 1);
        let r = finite_diff_check(
            |g, v| {
                let c = g.constant(w.clone())?;
                let h = g.hadamard(v[0], c)?;
                g.sum(h)
            },
            &[rand_tensor(&[3, 4], 2)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn softmax_self_test() {
        let w = rand_tensor(&[5], 3);
        let r = finite_diff_check(
            |g, v| {
                let s = g.softmax(v[0], 0)?;
                let c = g.constant(w.clone())?;
                let h = g.hadamard(s, c)?;
                g.sum(h)
            },
            &[rand_tensor(&[5], 4)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let r = finite_diff_check(
            |g, _| g.constant(Tensor::scalar(3.0)),
            &[rand_tensor(&[2, 2], 5)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at exactly zero: analytic 0, numeric 0.5.
        let r = finite_diff_check(
            |g, v| {
                let r = g.relu(v[0])?;
                g.sum(r)
            },
            &[Tensor::zeros(&[1])],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn directional_matches_entrywise() {
        let w = rand_tensor(&[4], 6);
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.softmax(v[0], 0)?;
            let c = g.constant(w.clone())?;
            let h = g.hadamard(s, c)?;
            g.sum(h)
        };
        let dirs: Vec<Vec<Tensor>> = (0..3).map(|i| vec![rand_tensor(&[4], 10 + i)]).collect();
        let r = directional_check(f, &[rand_tensor(&[4], 7)], &dirs, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.checked, 3);
        let zero = vec![vec![Tensor::zeros(&[4])]];
        assert!(directional_check(f, &[rand_tensor(&[4], 7)], &zero, DEFAULT_STEP).is_err());
    }

    #[test]
    fn nan_counts_as_failure() {
        assert_eq!(relative_error(f64::NAN, 1.0), f64::INFINITY);
    }
}
