//! Evidence to Dirichlet opinion conversion.
//!
//! Per pixel `i` with `K` classes and nonnegative evidence `e_ik`:
//! `alpha = e + 1`, `S = sum_k alpha`, `b = e / S`, `u = K / S`,
//! `p = alpha / S`. Fields are channel-major: `(K, H, W)` or, batched,
//! `(B, K, H, W)`. Per-pixel scalars (`S`, `u`) keep the class axis with
//! size 1.

use crate::autodiff::{Graph, Var};
use crate::error::{EtcError, Result};
use crate::tensor::{split_axis, Tensor};

/// Index of the class axis for a `(K,H,W)` or `(B,K,H,W)` shape.
pub fn class_axis(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        3 => Ok(0),
        4 => Ok(1),
        _ => Err(EtcError::Dimension(format!(
            "expected (K,H,W) or (B,K,H,W), got {shape:?}"
        ))),
    }
}

/// Per-pixel argmax over the class axis (first maximum wins).
pub fn argmax_classes(t: &Tensor) -> Result<Vec<usize>> {
    let axis = class_axis(t.shape())?;
    let (outer, k, inner) = split_axis(t.shape(), axis);
    let d = t.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if d[(o * k + c) * inner + i] > d[(o * k + best) * inner + i] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn check_evidence(e: &Tensor) -> Result<()> {
    if let Some(bad) = e.data().iter().find(|&&v| !v.is_finite() || v < 0.0) {
        return Err(EtcError::Domain(format!(
            "evidence must be finite and nonnegative, got {bad}"
        )));
    }
    Ok(())
}

/// Value-semantic Dirichlet opinion field.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletField {
    pub alpha: Tensor,
    pub strength: Tensor,
    pub belief: Tensor,
    pub uncertainty: Tensor,
    pub prob: Tensor,
    pub classes: usize,
}

impl DirichletField {
    pub fn from_evidence(e: &Tensor) -> Result<Self> {
        let axis = class_axis(e.shape())?;
        check_evidence(e)?;
        let (outer, k, inner) = split_axis(e.shape(), axis);
        let ed = e.data();
        let alpha: Vec<f64> = ed.iter().map(|v| v + 1.0).collect();
        let mut strength = vec![0.0; outer * inner];
        for o in 0..outer {
            for c in 0..k {
                for i in 0..inner {
                    strength[o * inner + i] += alpha[(o * k + c) * inner + i];
                }
            }
        }
        let mut belief = vec![0.0; ed.len()];
        let mut prob = vec![0.0; ed.len()];
        for o in 0..outer {
            for c in 0..k {
                for i in 0..inner {
                    let idx = (o * k + c) * inner + i;
                    let s = strength[o * inner + i];
                    belief[idx] = ed[idx] / s;
                    prob[idx] = alpha[idx] / s;
                }
            }
        }
        let uncertainty: Vec<f64> = strength.iter().map(|s| k as f64 / s).collect();
        let mut pixel_shape = e.shape().to_vec();
        pixel_shape[axis] = 1;
        Ok(Self {
            alpha: Tensor::new(e.shape(), alpha)?,
            strength: Tensor::new(&pixel_shape, strength)?,
            belief: Tensor::new(e.shape(), belief)?,
            uncertainty: Tensor::new(&pixel_shape, uncertainty)?,
            prob: Tensor::new(e.shape(), prob)?,
            classes: k,
        })
    }

    pub fn class_axis(&self) -> usize {
        self.alpha.rank() - 3
    }
}

/// Uncertainty weight `w = 1 - u` per pixel, as a plain tensor.
pub fn uncertainty_weight(d: &DirichletField) -> Tensor {
    let w = d.uncertainty.data().iter().map(|u| 1.0 - u).collect();
    Tensor::new(d.uncertainty.shape(), w).expect("same shape as uncertainty")
}

/// Dirichlet opinion field living in an autodiff graph.
#[derive(Clone, Copy, Debug)]
pub struct DirichletVars {
    pub evidence: Var,
    pub alpha: Var,
    pub strength: Var,
    pub belief: Var,
    pub uncertainty: Var,
    pub prob: Var,
    pub classes: usize,
    pub axis: usize,
}

impl DirichletVars {
    /// Copies the current values out of the graph.
    pub fn snapshot(&self, g: &Graph) -> DirichletField {
        DirichletField {
            alpha: g.value(self.alpha).clone(),
            strength: g.value(self.strength).clone(),
            belief: g.value(self.belief).clone(),
            uncertainty: g.value(self.uncertainty).clone(),
            prob: g.value(self.prob).clone(),
            classes: self.classes,
        }
    }

    /// `1 - u` as a graph constant: no gradient reaches the producing
    /// branch through the weight.
    pub fn uncertainty_weight(&self, g: &mut Graph) -> Result<Var> {
        let u = g.detach(self.uncertainty);
        let neg = g.neg(u)?;
        g.add_scalar(neg, 1.0)
    }
}

/// Differentiable conversion of an evidence node.
pub fn dirichlet_from_evidence(g: &mut Graph, e: Var) -> Result<DirichletVars> {
    let axis = class_axis(g.shape(e))?;
    check_evidence(g.value(e))?;
    let k = g.shape(e)[axis];
    let alpha = g.add_scalar(e, 1.0)?;
    let strength = g.sum_axis(alpha, axis)?;
    let s_full = g.expand(strength, axis, k)?;
    let belief = g.div(e, s_full)?;
    let prob = g.div(alpha, s_full)?;
    let kk = g.scalar(k as f64);
    let uncertainty = g.div(kk, strength)?;
    Ok(DirichletVars {
        evidence: e,
        alpha,
        strength,
        belief,
        uncertainty,
        prob,
        classes: k,
        axis,
    })
}
