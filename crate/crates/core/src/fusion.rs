//! Dempster-Shafer combination of two Dirichlet opinion fields.
//!
//! Per pixel, with conflict `Q = sum_{k != j} b1_k b2_j`:
//!
//! ```text
//! b_k = (b1_k b2_k + b1_k u2 + b2_k u1) / (1 - Q)
//! u   = u1 u2 / (1 - Q)
//! e_k = K b_k / u,  alpha = e + 1,  p = alpha / sum(alpha)
//! ```
//!
//! The result is plain data (no gradients): it only ever serves as a
//! pseudo-label.

use crate::error::{EtcError, Result};
use crate::evidence::DirichletField;
use crate::tensor::{split_axis, Tensor};

/// Below this value of `1 - Q` a pixel is treated as totally conflicting.
pub const CONFLICT_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FusedDirichlet {
    pub belief: Tensor,
    pub uncertainty: Tensor,
    pub evidence: Tensor,
    pub alpha: Tensor,
    pub prob: Tensor,
    pub conflict: Tensor,
    pub classes: usize,
    /// Pixels that hit total conflict and fell back to the vacuous opinion.
    pub conflict_overflows: usize,
}

pub fn ds_combine(d1: &DirichletField, d2: &DirichletField) -> Result<FusedDirichlet> {
    if d1.alpha.shape() != d2.alpha.shape() {
        return Err(EtcError::Dimension(format!(
            "fusing fields of shape {:?} and {:?}",
            d1.alpha.shape(),
            d2.alpha.shape()
        )));
    }
    let shape = d1.alpha.shape().to_vec();
    let axis = d1.class_axis();
    let (outer, k, inner) = split_axis(&shape, axis);
    let (b1, b2) = (d1.belief.data(), d2.belief.data());
    let (u1, u2) = (d1.uncertainty.data(), d2.uncertainty.data());

    let n = b1.len();
    let mut belief = vec![0.0; n];
    let mut evidence = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut prob = vec![0.0; n];
    let mut uncertainty = vec![0.0; outer * inner];
    let mut conflict = vec![0.0; outer * inner];
    let mut overflows = 0;

    for o in 0..outer {
        for i in 0..inner {
            let px = o * inner + i;
            let at = |c: usize| (o * k + c) * inner + i;
            let (mut sum1, mut sum2, mut agree) = (0.0, 0.0, 0.0);
            for c in 0..k {
                sum1 += b1[at(c)];
                sum2 += b2[at(c)];
                agree += b1[at(c)] * b2[at(c)];
            }
            let q = (sum1 * sum2 - agree).max(0.0);
            conflict[px] = q;
            let norm = 1.0 - q;
            if norm < CONFLICT_FLOOR {
                overflows += 1;
                uncertainty[px] = 1.0;
                for c in 0..k {
                    alpha[at(c)] = 1.0;
                    prob[at(c)] = 1.0 / k as f64;
                }
                continue;
            }
            let u = u1[px] * u2[px] / norm;
            uncertainty[px] = u;
            let mut strength = 0.0;
            for c in 0..k {
                let j = at(c);
                let b = (b1[j] * b2[j] + b1[j] * u2[px] + b2[j] * u1[px]) / norm;
                belief[j] = b;
                evidence[j] = k as f64 * b / u;
                alpha[j] = evidence[j] + 1.0;
                strength += alpha[j];
            }
            for c in 0..k {
                prob[at(c)] = alpha[at(c)] / strength;
            }
        }
    }
    if overflows > 0 {
        log::warn!("{overflows} pixel(s) hit total conflict during fusion");
    }

    let mut pixel_shape = shape.clone();
    pixel_shape[axis] = 1;
    Ok(FusedDirichlet {
        belief: Tensor::new(&shape, belief)?,
        uncertainty: Tensor::new(&pixel_shape, uncertainty)?,
        evidence: Tensor::new(&shape, evidence)?,
        alpha: Tensor::new(&shape, alpha)?,
        prob: Tensor::new(&shape, prob)?,
        conflict: Tensor::new(&pixel_shape, conflict)?,
        classes: k,
        conflict_overflows: overflows,
    })
}

/// Expected class probabilities `alpha / S` of a fused opinion.
pub fn fused_prob(f: &FusedDirichlet) -> Tensor {
    let shape = f.alpha.shape();
    let axis = shape.len() - 3;
    let (outer, k, inner) = split_axis(shape, axis);
    let a = f.alpha.data();
    let mut out = vec![0.0; a.len()];
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..k).map(|c| a[(o * k + c) * inner + i]).sum();
            for c in 0..k {
                let j = (o * k + c) * inner + i;
                out[j] = a[j] / s;
            }
        }
    }
    Tensor::new(shape, out).expect("shape preserved")
}
