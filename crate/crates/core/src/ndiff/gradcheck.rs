//! Central finite-difference gradient checker.

use super::{NdError, Tape, Tensor, Var};

/// Largest relative disagreement between the tape gradient of `f` and
/// central differences with step `h`, over every input coordinate.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64, NdError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NdError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&tape, &vars)?;
        let grads = tape.backward(root)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |point: &[Tensor]| -> Result<f64, NdError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            point[k].data_mut()[i] = x0 + h;
            let up = eval(&point)?;
            point[k].data_mut()[i] = x0 - h;
            let down = eval(&point)?;
            point[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_sum_is_accurate() {
        let x = Tensor::from_rows(2, 3, vec![0.1, -0.4, 2.0, -1.5, 0.0, 0.7]);
        let err = grad_check(|_, v| v[0].sigmoid()?.sum(), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let a = Tensor::from_rows(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let x = Tensor::from_rows(2, 1, vec![0.25, -0.75]);
        let err = grad_check(|_, v| v[0].matmul(v[1])?.sum(), &[a, x], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
