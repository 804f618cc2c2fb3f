use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates probed per parameter block.
pub const MAX_COORDS_PER_BLOCK: usize = 200;

/// Compares tape gradients with central finite differences.
///
/// `loss_fn` receives a fresh tape and one leaf per entry of `params` and must
/// return a scalar node. The result is the largest
/// `|analytic - numeric| / max(1, |numeric|)` over the probed coordinates.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(fd_step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {}", fd_step)));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {}", v)));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", v)));
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for b in 0..params.len() {
        let n = params[b].len();
        let count = n.min(MAX_COORDS_PER_BLOCK);
        for s in 0..count {
            let k = s * n / count;
            let orig = params[b].data()[k];
            work[b].data_mut()[k] = orig + fd_step;
            let plus = eval(&work)?;
            work[b].data_mut()[k] = orig - fd_step;
            let minus = eval(&work)?;
            work[b].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * fd_step);
            let err = (analytic[b].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
