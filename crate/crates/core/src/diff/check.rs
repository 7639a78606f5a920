//! Central finite-difference gradient checking.

use crate::diff::graph::{Graph, Var};
use crate::diff::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Central differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every coordinate of `x`.
pub fn central_differences<S: Scalar, F>(mut f: F, x: &[S], eps: S) -> Result<Vec<S>>
where
    F: FnMut(&[S]) -> Result<S>,
{
    let mut probe = x.to_vec();
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe)?;
        probe[i] = x[i] - eps;
        let lo = f(&probe)?;
        probe[i] = x[i];
        out.push((hi - lo) / two_eps);
    }
    Ok(out)
}

/// `max |analytic − numeric| / max(1, |analytic|)` over coordinates.
pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> S {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(S::one()))
        .fold(S::zero(), S::max)
}

/// Checks the reverse-mode gradient of a scalar function built by `f` on a
/// graph against central differences at `x`.
pub fn finite_difference_check<S: Scalar, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    F: Fn(&mut Graph<'_, S>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let input = g.variable(x.clone());
        let out = f(&mut g, input)?;
        g.backward(out)?;
        g.grad(input)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); x.len()])
    };
    let numeric = central_differences(
        |values| {
            let mut g = Graph::new();
            let input = g.constant(Tensor::new(x.shape().to_vec(), values.to_vec())?);
            let out = f(&mut g, input)?;
            g.scalar(out)
        },
        x.data(),
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::graph::ElementwiseOp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn sum_has_zero_error() {
        // dyadic inputs and step keep every perturbed sum exact
        let x = Tensor::vector(vec![0.375, -1.25, 4.0]).unwrap();
        let err = finite_difference_check(|g, v| Ok(g.sum(v)), &x, 1.0 / 65536.0).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn log_softmax_index() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let y = g.log_softmax(v);
                g.slice_cols(y, 0, 1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_pointwise_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let unary = [
            ElementwiseOp::Scale(-1.7),
            ElementwiseOp::Tanh,
            ElementwiseOp::Sigmoid,
            ElementwiseOp::Relu,
            ElementwiseOp::Exp,
        ];
        for _ in 0..10 {
            let x = random_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
            for op in unary {
                let err = finite_difference_check(
                    |g, v| {
                        let y = g.elementwise(op, v, None)?;
                        let y2 = g.mul(y, y)?;
                        Ok(g.sum(y2))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{op:?}: {err}");
            }
            // log needs a positive domain
            let pos = random_tensor(&mut rng, vec![5], 0.5, 2.0);
            let err = finite_difference_check(
                |g, v| {
                    let y = g.log(v);
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum(y2))
                },
                &pos,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "log: {err}");

            let other = random_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
            for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul] {
                let err = finite_difference_check(
                    |g, v| {
                        let c = g.constant(other.clone());
                        let y = g.elementwise(op, v, Some(c))?;
                        let z = g.elementwise(op, c, Some(y))?;
                        let z2 = g.mul(z, z)?;
                        Ok(g.sum(z2))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{op:?}: {err}");
            }
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
            let w = random_tensor(&mut rng, vec![4, 2], -2.0, 2.0);
            let b = random_tensor(&mut rng, vec![1, 2], -2.0, 2.0);
            let err = finite_difference_check(
                |g, v| {
                    let wv = g.constant(w.clone());
                    let bv = g.constant(b.clone());
                    let h = g.matmul(v, wv)?;
                    let h = g.add_bias(h, bv)?;
                    let h = g.tanh(h);
                    let top = g.slice_rows(h, 0, 2)?;
                    let left = g.slice_rows(v, 1, 3)?;
                    let left = g.slice_cols(left, 1, 3)?;
                    let j = g.concat_cols(&[top, left])?;
                    let j = g.concat_rows(&[j, j])?;
                    let lp = g.log_softmax(j);
                    let t = g.constant(Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 * 0.1).collect())?);
                    let p = g.mul(lp, t)?;
                    Ok(g.mean(p))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");

            // gradient with respect to the right matmul operand
            let err = finite_difference_check(
                |g, wv| {
                    let xv = g.constant(x.clone());
                    let h = g.matmul(xv, wv)?;
                    let h = g.sigmoid(h);
                    Ok(g.sum(h))
                },
                &w,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }
}
