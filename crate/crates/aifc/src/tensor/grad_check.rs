//! Finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Result, TensorError};
use crate::tensor::graph::{Graph, TrainGraph, VarId};
use crate::tensor::Tensor;

/// Compare tape gradients of a scalar-valued function against central
/// differences, checking every element of every input.
///
/// Returns the maximum over all input elements of
/// `|analytic - central| / max(1, |analytic|)`.
///
/// Declared inapplicable (an error) when the recorded graph contains
/// straight-through rounding, and fails on non-finite outputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut TrainGraph, &[VarId]) -> Result<VarId>,
{
    grad_check_impl(f, inputs, h, None)
}

/// Like [`grad_check`] but probing at most `samples` randomly chosen
/// elements per input; for composite graphs where a full sweep is too slow.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], h: f64, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut TrainGraph, &[VarId]) -> Result<VarId>,
{
    grad_check_impl(f, inputs, h, Some((samples, seed)))
}

fn grad_check_impl<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    sampling: Option<(usize, u64)>,
) -> Result<f64>
where
    F: Fn(&mut TrainGraph, &[VarId]) -> Result<VarId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = TrainGraph::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &ids)?;
        let out_t = g.value(&out);
        if !out_t.is_finite() {
            return Err(TensorError::NonFinite("grad_check output".into()));
        }
        Ok(out_t.item())
    };

    // analytic pass
    let mut g = TrainGraph::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &ids)?;
    let out_t = g.value(&out);
    if out_t.numel() != 1 {
        return Err(TensorError::Invalid(format!(
            "grad_check needs a scalar output, got shape {:?}",
            out_t.shape()
        )));
    }
    if !out_t.is_finite() {
        return Err(TensorError::NonFinite("grad_check output".into()));
    }
    if g.has_ste_round() {
        return Err(TensorError::Invalid(
            "graph contains rounding; finite-difference check inapplicable".into(),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(id, t)| g.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut max_err = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let elems: Vec<usize> = match sampling {
            None => (0..input.numel()).collect(),
            Some((samples, seed)) => {
                let mut all: Vec<usize> = (0..input.numel()).collect();
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ which as u64);
                all.shuffle(&mut rng);
                all.truncate(samples);
                all
            }
        };
        for e in elems {
            let perturb = |delta: f64| -> Result<f64> {
                let mut data = input.data().to_vec();
                data[e] += delta;
                let mut tensors: Vec<Tensor> = inputs.to_vec();
                tensors[which] = Tensor::from_vec(input.shape(), data);
                eval(&tensors)
            };
            let fp = perturb(h)?;
            let fm = perturb(-h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[which].data()[e];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::Graph;

    #[test]
    fn closed_form_sum_of_squares() {
        // f(x) = sum(x^2) at x = [1, 2]: analytic gradient [2, 4]
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let err = grad_check(
            |g, ids| {
                let sq = g.mul(&ids[0], &ids[0])?;
                Ok(g.sum(&sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn rounding_declared_inapplicable() {
        let x = Tensor::scalar(0.3);
        let res = grad_check(
            |g, ids| {
                let r = g.ste_round(&ids[0]);
                Ok(g.sum(&r))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(TensorError::Invalid(_))));
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let x = Tensor::rand_uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w = Tensor::rand_uniform(&mut rng, &[4, 3, 4, 4], -1.0, 1.0);
        let b = Tensor::rand_uniform(&mut rng, &[4], -1.0, 1.0);
        let err = grad_check(
            |g, ids| {
                let y = g.conv2d(&ids[0], &ids[1], Some(&ids[2]), 2, 1)?;
                // square before reducing so every output element matters
                let sq = g.mul(&y, &y)?;
                Ok(g.sum(&sq))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv2d gradient error {err}");
    }

    #[test]
    fn conv_transpose2d_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(22);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
        let w = Tensor::rand_uniform(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let b = Tensor::rand_uniform(&mut rng, &[2], -1.0, 1.0);
        let err = grad_check(
            |g, ids| {
                let y = g.conv_transpose2d(&ids[0], &ids[1], Some(&ids[2]), 2, 1)?;
                let sq = g.mul(&y, &y)?;
                Ok(g.sum(&sq))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv_transpose2d gradient error {err}");
    }

    #[test]
    fn matmul_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
        let a = Tensor::rand_uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let b = Tensor::rand_uniform(&mut rng, &[4, 5], -1.0, 1.0);
        let err = grad_check(
            |g, ids| {
                let y = g.matmul(&ids[0], &ids[1])?;
                let sq = g.mul(&y, &y)?;
                Ok(g.sum(&sq))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul gradient error {err}");
    }

    #[test]
    fn non_finite_reported() {
        let x = Tensor::scalar(-1.0);
        let res = grad_check(
            |g, ids| {
                let l = g.ln(&ids[0]); // ln of negative -> NaN
                Ok(g.sum(&l))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(TensorError::NonFinite(_))));
    }
}
