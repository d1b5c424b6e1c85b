use super::ParamSet;
use crate::error::{Error, Result};

/// SGD with classical momentum:
/// `buf ← momentum·buf + grad; value ← value − lr·buf`, then grads are cleared.
pub fn sgd_step(params: &mut ParamSet, lr: f64, momentum: f64) -> Result<()> {
    for p in params.iter() {
        if p.trainable && p.grad.is_none() {
            return Err(Error::Contract(format!(
                "parameter {:?} has no gradient; run backward before stepping",
                p.name
            )));
        }
    }
    for p in params.iter_mut() {
        if !p.trainable {
            p.grad = None;
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        for ((v, b), g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum_buffer.iter_mut())
            .zip(grad.data())
        {
            *b = momentum * *b + g;
            *v -= lr * *b;
        }
    }
    Ok(())
}
