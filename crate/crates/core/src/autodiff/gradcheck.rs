use super::{Graph, Var};
use crate::error::{EtcError, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar computation with central
/// differences of step `h`.
///
/// Returns the maximum over every input entry of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(EtcError::Usage(format!(
            "grad_check needs a scalar output, got shape {:?}",
            g.shape(out)
        )));
    }
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[which].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for (j, &orig) in inputs[which].data().iter().enumerate() {
            probe[which].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
