//! Training objectives.
//!
//! Every loss reduces over pixels with a mean so magnitudes do not depend
//! on resolution. Pseudo-label sources (the supervising branch in the
//! cross-supervision terms and the fused target of the fusion branch) enter
//! the graph as constants.

use crate::autodiff::{special, Graph, Var};
use crate::error::{EtcError, Result};
use crate::evidence::{dirichlet_from_evidence, DirichletVars};
use crate::fusion::ds_combine;
use crate::tensor::Tensor;

/// Smoothing added to numerator and denominator of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Iterations over which the KL weight ramps from 0 to 1.
pub const KL_WARMUP_ITERS: f64 = 200.0;

/// Checks that `y` is exactly one-hot along `axis`.
pub fn validate_one_hot(y: &Tensor, axis: usize) -> Result<()> {
    let (outer, k, inner) = crate::tensor::split_axis(y.shape(), axis);
    let d = y.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut ones = 0;
            for c in 0..k {
                let v = d[(o * k + c) * inner + i];
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(EtcError::Validation(format!(
                        "label entry {v} is neither 0 nor 1"
                    )));
                }
            }
            if ones != 1 {
                return Err(EtcError::Validation(format!(
                    "pixel with {ones} active classes in one-hot labels"
                )));
            }
        }
    }
    Ok(())
}

fn labels(g: &mut Graph, d: &DirichletVars, y: Var) -> Result<()> {
    if g.shape(y) != g.shape(d.alpha) {
        return Err(EtcError::Dimension(format!(
            "labels {:?} vs field {:?}",
            g.shape(y),
            g.shape(d.alpha)
        )));
    }
    validate_one_hot(g.value(y), d.axis)
}

/// Evidential cross-entropy: mean over pixels of
/// `sum_k y_k (psi(S) - psi(alpha_k))`.
pub fn ece_loss(g: &mut Graph, d: &DirichletVars, y: Var) -> Result<Var> {
    labels(g, d, y)?;
    let psi_s = g.digamma(d.strength)?;
    let psi_a = g.digamma(d.alpha)?;
    let picked = g.mul(y, psi_a)?;
    let picked = g.sum_axis(picked, d.axis)?;
    let per_pixel = g.sub(psi_s, picked)?;
    Ok(g.mean(per_pixel))
}

/// KL divergence from `Dir(alpha~)` to the uniform Dirichlet, where
/// `alpha~ = y + (1 - y) * alpha` drops the true-class evidence.
pub fn kl_to_uniform(g: &mut Graph, d: &DirichletVars, y: Var) -> Result<Var> {
    labels(g, d, y)?;
    let k = d.classes;
    let off: Vec<f64> = g.value(y).data().iter().map(|v| 1.0 - v).collect();
    let off = g.constant(Tensor::new(g.shape(y), off)?);
    let kept = g.mul(off, d.alpha)?;
    let alpha_t = g.add(y, kept)?;
    let s_t = g.sum_axis(alpha_t, d.axis)?;

    let lg_s = g.lgamma(s_t)?;
    let lg_a = g.lgamma(alpha_t)?;
    let lg_a = g.sum_axis(lg_a, d.axis)?;
    let log_norm = g.sub(lg_s, lg_a)?;
    let log_norm = g.add_scalar(log_norm, -special::lgamma(k as f64))?;

    let psi_a = g.digamma(alpha_t)?;
    let psi_s = g.digamma(s_t)?;
    let psi_s = g.expand(psi_s, d.axis, k)?;
    let dpsi = g.sub(psi_a, psi_s)?;
    let am1 = g.add_scalar(alpha_t, -1.0)?;
    let cross = g.mul(am1, dpsi)?;
    let cross = g.sum_axis(cross, d.axis)?;

    let kl = g.add(log_norm, cross)?;
    Ok(g.mean(kl))
}

/// `min(1, t / 200)`.
pub fn lambda_kl_schedule(t: u64) -> f64 {
    (t as f64 / KL_WARMUP_ITERS).min(1.0)
}

/// Conservative-branch objective `L_ece + lambda_kl(t) * L_kl`.
pub fn ecb_loss(g: &mut Graph, d: &DirichletVars, y: Var, t: u64) -> Result<Var> {
    let ece = ece_loss(g, d, y)?;
    let lkl = lambda_kl_schedule(t);
    if lkl == 0.0 {
        return Ok(ece);
    }
    let kl = kl_to_uniform(g, d, y)?;
    let kl = g.scale(kl, lkl)?;
    g.add(ece, kl)
}

/// Soft Dice loss averaged over classes, on probability maps.
pub fn dice_loss(g: &mut Graph, prob: Var, y: Var, axis: usize) -> Result<Var> {
    if g.shape(prob) != g.shape(y) {
        return Err(EtcError::Dimension(format!(
            "dice of {:?} vs {:?}",
            g.shape(prob),
            g.shape(y)
        )));
    }
    let rank = g.shape(prob).len();
    let py = g.mul(prob, y)?;
    let mut inter = py;
    let mut psum = prob;
    let mut ysum = y;
    for ax in (0..rank).rev().filter(|&a| a != axis) {
        inter = g.sum_axis(inter, ax)?;
        psum = g.sum_axis(psum, ax)?;
        ysum = g.sum_axis(ysum, ax)?;
    }
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(psum, ysum)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let per_class = g.neg(ratio)?;
    let per_class = g.add_scalar(per_class, 1.0)?;
    Ok(g.mean(per_class))
}

/// Progressive-branch objective: Dice on the expected probabilities.
pub fn epb_loss(g: &mut Graph, d: &DirichletVars, y: Var) -> Result<Var> {
    labels(g, d, y)?;
    dice_loss(g, d.prob, y, d.axis)
}

/// Uncertainty-weighted cross supervision from `source` to `target`:
/// mean over pixels of `(1/K) * (1 - u_src) * ||p_src - p_tgt||_2`. The
/// source probabilities and weights are constants.
pub fn cross_sup_loss(
    g: &mut Graph,
    source: &DirichletVars,
    target: &DirichletVars,
) -> Result<Var> {
    if g.shape(source.prob) != g.shape(target.prob) {
        return Err(EtcError::Dimension(format!(
            "cross supervision between {:?} and {:?}",
            g.shape(source.prob),
            g.shape(target.prob)
        )));
    }
    let src = g.detach(source.prob);
    let w = source.uncertainty_weight(g)?;
    let diff = g.sub(src, target.prob)?;
    let dist = g.l2_norm(diff, target.axis)?;
    let weighted = g.mul(w, dist)?;
    let m = g.mean(weighted);
    g.scale(m, 1.0 / target.classes as f64)
}

/// Both cross-supervision directions between the conservative (`d1`) and
/// progressive (`d2`) branches: `(l_cs12, l_cs21, l_cs12 + l_cs21)`.
pub fn bucs_loss(g: &mut Graph, d1: &DirichletVars, d2: &DirichletVars) -> Result<(Var, Var, Var)> {
    let cs12 = cross_sup_loss(g, d1, d2)?;
    let cs21 = cross_sup_loss(g, d2, d1)?;
    let total = g.add(cs12, cs21)?;
    Ok((cs12, cs21, total))
}

/// Fusion-branch distillation: mean over pixels of `||p_fuse - p_3||_2`.
pub fn efb_loss(g: &mut Graph, p_fuse: &Tensor, d3: &DirichletVars) -> Result<Var> {
    if p_fuse.shape() != g.shape(d3.prob) {
        return Err(EtcError::Dimension(format!(
            "fused target {:?} vs branch {:?}",
            p_fuse.shape(),
            g.shape(d3.prob)
        )));
    }
    let target = g.constant(p_fuse.clone());
    let diff = g.sub(target, d3.prob)?;
    let dist = g.l2_norm(diff, d3.axis)?;
    Ok(g.mean(dist))
}

/// Gaussian ramp-up `w_max * exp(-5 (1 - min(t, t_max)/t_max)^2)`.
pub fn lambda_schedule(t: u64, t_max: u64, w_max: f64) -> f64 {
    let t_max = t_max.max(1) as f64;
    let phase = 1.0 - (t as f64).min(t_max) / t_max;
    w_max * (-5.0 * phase * phase).exp()
}

/// Scalar loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_ecb: f64,
    pub l_epb: f64,
    pub l_cs12: f64,
    pub l_cs21: f64,
    pub l_bucs: f64,
    pub l_efb: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub lambda_kl: f64,
}

impl LossBundle {
    /// Recomputes the total from the stored components.
    pub fn recombined_total(&self) -> f64 {
        self.l_ecb + self.l_epb + self.lambda * (self.l_bucs + self.l_efb)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_ecb,
            self.l_epb,
            self.l_cs12,
            self.l_cs21,
            self.l_efb,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Schedule inputs for [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub t: u64,
    pub t_max: u64,
    pub w_max: f64,
    /// Replaces the ramp-up weight (e.g. `Some(0.0)` for supervised-only
    /// training).
    pub lambda_override: Option<f64>,
}

impl Schedule {
    pub fn lambda(&self) -> f64 {
        self.lambda_override
            .unwrap_or_else(|| lambda_schedule(self.t, self.t_max, self.w_max))
    }
}

/// Result of assembling the full objective.
pub struct Objective {
    pub total: Var,
    pub bundle: LossBundle,
    pub conflict_overflows: usize,
}

/// Assembles `L_ECB + L_EPB + lambda * (L_BUCS + L_EFB)`.
///
/// `evidence` holds the three branch outputs `(B, K, H, W)` whose first
/// `n_labeled` rows are labeled; `y` is the one-hot label tensor for those
/// rows. Supervised terms use labeled rows only; the cross-supervision and
/// fusion terms use the whole batch.
pub fn total_loss(
    g: &mut Graph,
    evidence: [Var; 3],
    y: &Tensor,
    n_labeled: usize,
    schedule: Schedule,
) -> Result<Objective> {
    if n_labeled == 0 {
        return Err(EtcError::Validation(
            "batch has no labeled pixels; supervised terms undefined".into(),
        ));
    }
    let [e1, e2, e3] = evidence;
    let d1 = dirichlet_from_evidence(g, e1)?;
    let d2 = dirichlet_from_evidence(g, e2)?;
    let d3 = dirichlet_from_evidence(g, e3)?;
    let batch = g.shape(e1)[0];
    if n_labeled > batch || y.shape().first() != Some(&n_labeled) {
        return Err(EtcError::Dimension(format!(
            "labels {:?} for {n_labeled} labeled rows of a batch of {batch}",
            y.shape()
        )));
    }

    let (l1, l2) = if n_labeled == batch {
        (d1, d2)
    } else {
        let s1 = g.narrow(e1, 0, 0, n_labeled)?;
        let s2 = g.narrow(e2, 0, 0, n_labeled)?;
        (
            dirichlet_from_evidence(g, s1)?,
            dirichlet_from_evidence(g, s2)?,
        )
    };
    let yv = g.constant(y.clone());
    let ecb = ecb_loss(g, &l1, yv, schedule.t)?;
    let epb = epb_loss(g, &l2, yv)?;

    let (cs12, cs21, bucs) = bucs_loss(g, &d1, &d2)?;
    let fused = ds_combine(&d1.snapshot(g), &d2.snapshot(g))?;
    let efb = efb_loss(g, &fused.prob, &d3)?;

    let lambda = schedule.lambda();
    let sup = g.add(ecb, epb)?;
    let unsup = g.add(bucs, efb)?;
    let unsup = g.scale(unsup, lambda)?;
    let total = g.add(sup, unsup)?;

    let val = |v: Var| g.value(v).data()[0];
    let bundle = LossBundle {
        l_ecb: val(ecb),
        l_epb: val(epb),
        l_cs12: val(cs12),
        l_cs21: val(cs21),
        l_bucs: val(bucs),
        l_efb: val(efb),
        l_total: val(total),
        lambda,
        lambda_kl: lambda_kl_schedule(schedule.t),
    };
    Ok(Objective {
        total,
        bundle,
        conflict_overflows: fused.conflict_overflows,
    })
}
