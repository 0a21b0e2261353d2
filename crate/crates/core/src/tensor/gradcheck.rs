//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffTensor, Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Floor on the relative-error denominator. Central differences of a
/// unit-scale f64 loss carry roughly 1e-11 of rounding noise at step 1e-5,
/// so gradients below the floor are effectively held to an absolute bound.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// Which coordinates of each parameter tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// Up to `per_tensor` coordinates per tensor, chosen with a seeded RNG.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Backpropagates through `f` and compares the result against central
/// differences of step `step`.
///
/// `f` receives a fresh graph and one [`Var`] per parameter, and must
/// return a scalar loss. It is called `1 + 2·checked` times.
pub fn grad_check<T, F>(
    f: F,
    params: &mut [DiffTensor<T>],
    step: f64,
    selection: CoordSelection,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| match graph.grad(v) {
            Some(g) => g.iter().map(|x| x.widen()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    compare_gradients(f, params, &analytic, step, selection)
}

/// Compares externally supplied gradients against central differences.
pub fn compare_gradients<T, F>(
    f: F,
    params: &mut [DiffTensor<T>],
    analytic: &[Vec<f64>],
    step: f64,
    selection: CoordSelection,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidShape {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let eval = |params: &[DiffTensor<T>]| -> Result<f64> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| graph.constant(p.clone())).collect();
        let loss = f(&mut graph, &vars)?;
        Ok(graph.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for t in 0..params.len() {
        let n = params[t].len();
        let coords: Vec<usize> = match selection {
            CoordSelection::All => (0..n).collect(),
            CoordSelection::Sample { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9));
                let mut picked = sample(&mut rng, n, per_tensor.min(n)).into_vec();
                picked.sort_unstable();
                picked
            }
        };
        for i in coords {
            let original = params[t].values()[i];
            let base = original.widen();
            params[t].values_mut()[i] = T::narrow(base + step);
            let plus = eval(params);
            params[t].values_mut()[i] = T::narrow(base - step);
            let minus = eval(params);
            params[t].values_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::non_finite(format!(
                    "grad_check loss at tensor {t}, coordinate {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[t][i];
            if !exact.is_finite() {
                return Err(Error::non_finite(format!(
                    "analytic gradient at tensor {t}, coordinate {i}"
                )));
            }
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_sq_norm(g: &mut Graph<f64>, vars: &[Var]) -> Result<Var> {
        let sq = g.mul(vars[0], vars[0])?;
        let s = g.sum(sq);
        Ok(g.scale(s, 0.5))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut params =
            vec![DiffTensor::<f64>::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap()];
        let report = grad_check(half_sq_norm, &mut params, 1e-3, CoordSelection::All).unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.checked, 5);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut params = vec![DiffTensor::<f64>::new(vec![3], vec![0.5, -2.0, 1.5]).unwrap()];
        // exact gradient of ½‖θ‖² is θ itself; inflate it by 10%
        let wrong: Vec<Vec<f64>> = vec![params[0].to_f64().iter().map(|x| x * 1.1).collect()];
        let report = compare_gradients(
            half_sq_norm,
            &mut params,
            &wrong,
            1e-3,
            CoordSelection::All,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let mut params = vec![DiffTensor::<f64>::new(vec![2], vec![1.0, 0.0]).unwrap()];
        let log_sum = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let s = g.sum(vars[0]);
            let inf = g.constant(DiffTensor::scalar(f64::INFINITY));
            g.mul(s, inf)
        };
        let err = grad_check(log_sum, &mut params, 1e-3, CoordSelection::All).unwrap_err();
        assert!(err.to_string().contains("coordinate"), "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut params = vec![DiffTensor::<f64>::scalar(1.0)];
        assert!(grad_check(half_sq_norm, &mut params, 0.0, CoordSelection::All).is_err());
    }
}
