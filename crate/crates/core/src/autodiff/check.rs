//! Gradient verification by central finite differences.

use super::{AdError, Tape, Val};
use crate::tensor::Tensor;

/// Evaluate a loss builder once at the given parameter values.
pub fn eval_loss<F>(build_loss: &F, params: &[Tensor]) -> Result<f64, AdError>
where
    F: for<'t> Fn(&'t Tape, &[Val<'t>]) -> Result<Val<'t>, AdError>,
{
    // Parameters stay differentiable: the builder may take gradients itself.
    let tape = Tape::new();
    let vals: Vec<Val<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build_loss(&tape, &vals)?;
    let v = loss.scalar()?;
    if !v.is_finite() {
        return Err(AdError::NonFinite { context: "loss evaluation".to_string() });
    }
    Ok(v)
}

/// Compare the analytic gradient of a scalar loss against central finite
/// differences, one coordinate at a time.
///
/// Returns the max over all coordinates of
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
///
/// The loss builder must be a pure function of the tape and the parameter
/// values it is handed; it is re-invoked on fresh tapes for every probe.
pub fn finite_diff_check<F>(build_loss: F, params: &[Tensor], eps: f64) -> Result<f64, AdError>
where
    F: for<'t> Fn(&'t Tape, &[Val<'t>]) -> Result<Val<'t>, AdError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");

    // Analytic gradients at the base point.
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vals: Vec<Val<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build_loss(&tape, &vals)?;
        let v = loss.scalar()?;
        if !v.is_finite() {
            return Err(AdError::NonFinite { context: "loss evaluation".to_string() });
        }
        let grads = tape.grad(loss, &vals, false)?;
        grads.iter().map(|g| (*g.tensor()).clone()).collect()
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let base = p.data()[j];
            probe[i].data_mut()[j] = base + eps;
            let plus = eval_loss(&build_loss, &probe)?;
            probe[i].data_mut()[j] = base - eps;
            let minus = eval_loss(&build_loss, &probe)?;
            probe[i].data_mut()[j] = base;

            let central = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
