//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    tape.value(out)
        .item()
        .ok_or_else(|| Error::shape(format!("grad_check needs a scalar function, got shape {:?}", tape.value(out).shape())))
}

/// Max relative error `|a-b| / max(1, |a|, |b|)` between the tape gradient and
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`, over every coordinate of
/// every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_output(&tape, out)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let (t, _, o) = eval(&probe)?;
            let plus = scalar_output(&t, o)?;
            probe[which].data_mut()[i] = orig - eps;
            let (t, _, o) = eval(&probe)?;
            let minus = scalar_output(&t, o)?;
            probe[which].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
