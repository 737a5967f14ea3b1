//! The training objective: coarse + fine photometric MSE plus an entropy
//! regularizer on the per-sample transparencies.
//!
//! The entropy terms push each field's alpha toward 0 or 1 and penalize the
//! static and dynamic volume occupying the same point; the joint term is
//! weighted by the total transparency so empty space stays unpenalized. All
//! entropies use the non-negative (negated) convention and natural logs,
//! with `0 ln 0 = 0`; they are averaged over the batch's sample count so
//! the regularization weight is batch-size invariant.

use serde::{Deserialize, Serialize};

/// Guards the normalized-transparency division and the entropy derivatives
/// near the boundary.
pub const EPS_DIV: f64 = 1e-8;

/// All components of one objective evaluation. `total` is
/// `mse_coarse + mse_fine + beta * (entropy_static + entropy_dynamic +
/// entropy_joint)`; entropy fields are the per-sample means, before `beta`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_coarse: f64,
    pub mse_fine: f64,
    pub entropy_static: f64,
    pub entropy_dynamic: f64,
    pub entropy_joint: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,k,mse_coarse,mse_fine,entropy_static,entropy_dynamic,entropy_joint,total"
    }

    pub fn csv_row(&self, step: u64, k: usize) -> String {
        format!(
            "{step},{k},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.mse_coarse,
            self.mse_fine,
            self.entropy_static,
            self.entropy_dynamic,
            self.entropy_joint,
            self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Mean over rays and channels of the squared error, separately for the two
/// passes. Both enter the total additively.
pub fn mse_term(
    pred_coarse: &[[f64; 3]],
    pred_fine: &[[f64; 3]],
    target: &[[f64; 3]],
) -> (f64, f64) {
    assert!(pred_coarse.len() == target.len() && pred_fine.len() == target.len());
    let n = (target.len() * 3) as f64;
    let mut mc = 0.0;
    let mut mf = 0.0;
    for i in 0..target.len() {
        for ch in 0..3 {
            let dc = pred_coarse[i][ch] - target[i][ch];
            let df = pred_fine[i][ch] - target[i][ch];
            mc += dc * dc;
            mf += df * df;
        }
    }
    (mc / n, mf / n)
}

/// Non-negative binary entropy `-a ln a - (1-a) ln(1-a)` with the boundary
/// convention `0 ln 0 = 0`. Maximized (ln 2) at `a = 1/2`.
pub fn binary_entropy(alpha: f64) -> f64 {
    debug_assert!((-1e-12..=1.0 + 1e-12).contains(&alpha));
    let a = alpha.clamp(0.0, 1.0);
    let mut h = 0.0;
    if a > 0.0 {
        h -= a * a.ln();
    }
    if a < 1.0 {
        h -= (1.0 - a) * (1.0 - a).ln();
    }
    h
}

/// Derivative of [`binary_entropy`], clamped to zero within `EPS_DIV` of the
/// boundary (where the true derivative diverges).
pub fn binary_entropy_grad(alpha: f64) -> f64 {
    if alpha < EPS_DIV || alpha > 1.0 - EPS_DIV {
        0.0
    } else {
        ((1.0 - alpha) / alpha).ln()
    }
}

/// Two-way entropy of the normalized transparencies, weighted by the total
/// transparency: `H2(a_s / (a_s + a_d)) * (a_s + a_d)`; zero when the point
/// is empty in both volumes or occupied by only one.
pub fn joint_entropy(alpha_s: f64, alpha_d: f64) -> f64 {
    let total = alpha_s + alpha_d;
    if total < EPS_DIV {
        return 0.0;
    }
    binary_entropy(alpha_s / total) * total
}

/// Partial derivatives of [`joint_entropy`] with respect to both alphas.
/// Each reduces to `-ln(alpha/total)`; clamped to zero where it diverges.
pub fn joint_entropy_grad(alpha_s: f64, alpha_d: f64) -> (f64, f64) {
    let total = alpha_s + alpha_d;
    if total < EPS_DIV {
        return (0.0, 0.0);
    }
    let gs = if alpha_s < EPS_DIV { 0.0 } else { -(alpha_s / total).ln() };
    let gd = if alpha_d < EPS_DIV { 0.0 } else { -(alpha_d / total).ln() };
    (gs, gd)
}

/// Per-sample transparencies of one batch, both passes concatenated.
pub struct EntropyInputs<'a> {
    pub alpha_s: &'a [f64],
    pub alpha_d: &'a [f64],
}

/// Assembles the full objective from the per-pass predictions and the
/// per-sample transparencies. `sample_count` is the batch's total number of
/// samples M (the entropy terms are averaged over it).
pub fn total_loss(
    pred_coarse: &[[f64; 3]],
    pred_fine: &[[f64; 3]],
    target: &[[f64; 3]],
    entropy: EntropyInputs,
    beta: f64,
) -> LossBreakdown {
    let (mse_coarse, mse_fine) = mse_term(pred_coarse, pred_fine, target);
    assert_eq!(entropy.alpha_s.len(), entropy.alpha_d.len());
    let m = entropy.alpha_s.len();
    let (mut hs, mut hd, mut hj) = (0.0, 0.0, 0.0);
    for i in 0..m {
        hs += binary_entropy(entropy.alpha_s[i]);
        hd += binary_entropy(entropy.alpha_d[i]);
        hj += joint_entropy(entropy.alpha_s[i], entropy.alpha_d[i]);
    }
    let denom = m.max(1) as f64;
    let breakdown = LossBreakdown {
        mse_coarse,
        mse_fine,
        entropy_static: hs / denom,
        entropy_dynamic: hd / denom,
        entropy_joint: hj / denom,
        total: 0.0,
    };
    LossBreakdown {
        total: mse_coarse
            + mse_fine
            + beta
                * (breakdown.entropy_static + breakdown.entropy_dynamic + breakdown.entropy_joint),
        ..breakdown
    }
}
