//! Central-difference verification of analytic gradients.

use rand::seq::SliceRandom as _;
use rand::SeedableRng as _;

use crate::diffcore::params::ParamSet;
use crate::diffcore::real::Real;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Cap on checked coordinates per parameter; larger parameters are
    /// subsampled with the given seed.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for FiniteDiffOpts {
    fn default() -> Self {
        FiniteDiffOpts {
            eps: 1e-3,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare `analytic[slot]` against central differences of `loss_fn` over
/// the trainable parameters. Returns the max relative error with
/// denominator max(|analytic|, |numeric|, 1e-8).
///
/// `loss_fn` must be deterministic; two evaluations at the unperturbed
/// point are compared bitwise and a mismatch is an invalid-argument error.
pub fn finite_diff_check<R, F>(
    loss_fn: F,
    params: &ParamSet<R>,
    analytic: &[Vec<R>],
    opts: FiniteDiffOpts,
) -> Result<f64>
where
    R: Real,
    F: Fn(&ParamSet<R>) -> Result<R>,
{
    let base1 = loss_fn(params)?.to_f64();
    let base2 = loss_fn(params)?.to_f64();
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::invalid_argument(format!(
            "loss_fn is not deterministic: {base1} vs {base2}"
        )));
    }

    let mut work = params.clone();
    let mut rng = Rng::seed_from_u64(opts.seed);
    let eps = opts.eps;
    let mut max_err = 0.0f64;

    for slot in 0..params.len() {
        if !params.get(slot).trainable {
            continue;
        }
        let n = params.get(slot).value.numel();
        if analytic[slot].is_empty() {
            return Err(Error::State(format!(
                "missing analytic gradient for {}",
                params.get(slot).name
            )));
        }
        let mut coords: Vec<usize> = (0..n).collect();
        if n > opts.max_coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(opts.max_coords_per_param);
            coords.sort_unstable();
        }
        for c in coords {
            let orig = params.get(slot).value.data()[c];
            work.get_mut(slot).value.data_mut()[c] = orig + R::from_f64(eps);
            let up = loss_fn(&work)?.to_f64();
            work.get_mut(slot).value.data_mut()[c] = orig - R::from_f64(eps);
            let down = loss_fn(&work)?.to_f64();
            work.get_mut(slot).value.data_mut()[c] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[slot][c].to_f64(), numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::Graph;
    use crate::diffcore::tensor::Tensor;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("p", Tensor::new(vec![3], vec![0.3, -1.2, 2.0]));
        let loss = |ps: &ParamSet<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let p = g.param(0, &ps.get(0).value);
            let s = g.sum_all(p);
            Ok(g.scalar(s))
        };
        let analytic = vec![vec![1.0, 1.0, 1.0]];
        let err = finite_diff_check(loss, &ps, &analytic, FiniteDiffOpts::default()).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn half_norm_squared_gradient_is_p() {
        // loss = ½‖p‖² at p = (1, 2) → grads (1, 2)
        let mut ps = ParamSet::<f64>::new();
        ps.register("p", Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let loss = |ps: &ParamSet<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let p = g.param(0, &ps.get(0).value);
            let sq = g.mean_row_sq_norm(p); // ‖p‖² with one row
            Ok(g.scalar(sq) * 0.5)
        };
        let analytic = vec![vec![1.0, 2.0]];
        let err = finite_diff_check(loss, &ps, &analytic, FiniteDiffOpts::default()).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let mut ps = ParamSet::<f64>::new();
        ps.register("p", Tensor::new(vec![1], vec![1.0]));
        let counter = Cell::new(0.0f64);
        let loss = |_: &ParamSet<f64>| -> Result<f64> {
            counter.set(counter.get() + 1.0);
            Ok(counter.get())
        };
        assert!(matches!(
            finite_diff_check(loss, &ps, &[vec![0.0]], FiniteDiffOpts::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
