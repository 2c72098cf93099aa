use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)` over every
/// component of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Like [`finite_diff_check`], but differentiates with respect to every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor], record: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), record)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let probe = |values: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = eval(values, false).map_err(|e| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("{op} (finite-difference probe)")),
            other => other,
        })?;
        let y = tape.value(out).item();
        if !y.is_finite() {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let up = probe(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let down = probe(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([7], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_diff_check(
            |t, _x| {
                let c = t.constant(Tensor::scalar(4.0));
                t.scale(c, 1.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // finite at x, overflows at x + eps
        let x = Tensor::vector(vec![179_769.313_48]);
        let r = finite_diff_check(
            |t, x| {
                let y = t.scale(x, 1e303)?;
                t.sum(y)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(msg)) if msg.contains("probe")));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
