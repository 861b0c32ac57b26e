use super::tape::{Tape, Var};
use super::{Tensor, TensorError};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`finite_diff_check`]; every input is perturbed.
pub fn finite_diff_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64, TensorError> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NotScalar(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = finite_diff_check(
            |t, x| {
                let s = t.scale(x, 2.5)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), Some(&[1.0, 1.0, 1.0][..]));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x), Some(&[6.0][..]));

        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::scalar(0.7).with_grad(true));
        let twice = tape.add(y, y).unwrap();
        tape.backward(twice).unwrap();
        assert_eq!(tape.grad(y), Some(&[2.0][..]));
    }

    #[test]
    fn backward_rejects_detached_or_vector_loss() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert_eq!(tape.backward(c), Err(TensorError::DetachedLoss));
        let v = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad(true));
        assert!(matches!(tape.backward(v), Err(TensorError::NotScalar(_))));
        assert_eq!(tape.backward(Var(99)), Err(TensorError::DetachedLoss));
    }
}
