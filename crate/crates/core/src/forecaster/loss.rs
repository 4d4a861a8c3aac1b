use std::rc::Rc;

use crate::ndiff::{NdError, Tensor, Var};

/// Mean of `|pred - target|^p` over all entries, or the `weights`-weighted
/// mean when a mask is given. `p` is 1 or 2. A mask with no positive weight
/// gives zero.
pub fn forecast_loss<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    p: u8,
    weights: Option<&Rc<Tensor>>,
) -> Result<Var<'t>, NdError> {
    let diff = pred.sub(target)?;
    let err = match p {
        1 => diff.abs()?,
        2 => diff.square()?,
        _ => {
            return Err(NdError::BadParameter {
                op: "forecast_loss order",
                value: f64::from(p),
            })
        }
    };
    match weights {
        None => err.mean(),
        Some(w) => {
            let total = w.sum();
            if total <= 0.0 {
                return Ok(pred.tape().constant(Tensor::scalar(0.0)));
            }
            err.mul_const(Rc::clone(w))?.sum()?.scale(1.0 / total)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Tape;

    #[test]
    fn equal_inputs_give_zero() {
        let tape = Tape::new();
        let y = Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let l = forecast_loss(tape.constant(y.clone()), tape.constant(y), 1, None).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn constant_error_of_two() {
        let tape = Tape::new();
        let y = Tensor::zeros(3, 2);
        let pred = Tensor::filled(3, 2, 2.0);
        let l1 = forecast_loss(tape.constant(pred.clone()), tape.constant(y.clone()), 1, None).unwrap();
        assert_eq!(l1.value().item(), 2.0);
        let l2 = forecast_loss(tape.constant(pred), tape.constant(y), 2, None).unwrap();
        assert_eq!(l2.value().item(), 4.0);
    }

    #[test]
    fn mask_weights_entries() {
        let tape = Tape::new();
        let pred = Tensor::row(&[1.0, 5.0, 9.0]);
        let y = Tensor::row(&[0.0, 0.0, 0.0]);
        let w = Rc::new(Tensor::row(&[1.0, 0.0, 1.0]));
        let l = forecast_loss(tape.constant(pred.clone()), tape.constant(y.clone()), 1, Some(&w)).unwrap();
        assert_eq!(l.value().item(), 5.0);
        let none = Rc::new(Tensor::zeros(1, 3));
        let l = forecast_loss(tape.constant(pred), tape.constant(y), 1, Some(&none)).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn rejects_other_orders() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::zeros(1, 1));
        assert!(forecast_loss(y, y, 3, None).is_err());
    }
}
