//! Asymmetric multi-label loss for the six attribute outputs: focusing
//! exponents per polarity plus a probability shift that discards easy
//! negatives.

use serde::{Deserialize, Serialize};

use crate::annotation::NUM_ATTRIBUTES;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsymmetricLossParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub shift: f64,
}

impl Default for AsymmetricLossParams {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            shift: 0.05,
        }
    }
}

impl AsymmetricLossParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::config(
                "attributes.gamma",
                "focusing exponents must be non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.shift) {
            return Err(Error::config("attributes.shift", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Loss of one attribute and its derivative with respect to the (clamped)
/// probability.
fn term<T: Scalar>(p: T, y: T, params: &AsymmetricLossParams) -> (T, T) {
    let one = T::one();
    let zero = T::zero();
    let gp = T::lit(params.gamma_pos);
    let gn = T::lit(params.gamma_neg);
    let shift = T::lit(params.shift);

    // positive part: -y (1-p)^γ+ ln p
    let q = one - p;
    let w_pos = q.powf(gp);
    let pos = -y * w_pos * p.ln();
    let mut d_pos = -y * w_pos / p;
    if params.gamma_pos != 0.0 {
        d_pos = d_pos + y * gp * q.powf(gp - one) * p.ln();
    }

    // negative part: -(1-y) p_m^γ- ln(1 - p_m), p_m = max(p - shift, 0)
    let pm = (p - shift).max(zero);
    let (neg, d_neg) = if pm > zero {
        let w_neg = pm.powf(gn);
        let l1 = (one - pm).ln();
        let mut d = (one - y) * w_neg / (one - pm);
        if params.gamma_neg != 0.0 {
            d = d - (one - y) * gn * pm.powf(gn - one) * l1;
        }
        (-(one - y) * w_neg * l1, d)
    } else {
        (zero, zero)
    };
    (pos + neg, d_pos + d_neg)
}

fn clamp<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Mean asymmetric loss over the six attributes, from probabilities.
pub fn asymmetric_attribute_loss<T: Scalar>(
    probs: &[T; NUM_ATTRIBUTES],
    targets: &[T; NUM_ATTRIBUTES],
    params: &AsymmetricLossParams,
) -> T {
    let sum = probs
        .iter()
        .zip(targets)
        .fold(T::zero(), |s, (&p, &y)| s + term(clamp(p).0, y, params).0);
    sum / T::lit(NUM_ATTRIBUTES as f64)
}

/// Same loss from logits, with the gradient with respect to the logits.
pub fn asymmetric_attribute_loss_logits<T: Scalar>(
    logits: &[T; NUM_ATTRIBUTES],
    targets: &[T; NUM_ATTRIBUTES],
    params: &AsymmetricLossParams,
) -> (T, [T; NUM_ATTRIBUTES]) {
    let n = T::lit(NUM_ATTRIBUTES as f64);
    let mut loss = T::zero();
    let mut grad = [T::zero(); NUM_ATTRIBUTES];
    for j in 0..NUM_ATTRIBUTES {
        let s = sigmoid(logits[j]);
        let (p, clamped) = clamp(s);
        let (l, dp) = term(p, targets[j], params);
        loss = loss + l;
        if !clamped {
            grad[j] = dp * s * (T::one() - s) / n;
        }
    }
    (loss / n, grad)
}
