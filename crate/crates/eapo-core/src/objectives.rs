//! Per-example loss functions with analytic gradients with respect to the
//! model logit.
//!
//! All losses operate on a scalar logit `z = f(x)` and a binary label,
//! mapping the label into a sign `s = 2y - 1` so that `sigmoid(s * z)` is the
//! probability assigned to the true class. The preference loss compares the
//! trainable logit against a frozen reference logit; for a binary sigmoid
//! policy the log-probability ratio between the preferred and rejected label
//! collapses to `s * (z_theta - z_ref)`, so the loss is evaluated in that
//! closed form rather than through four separate log-probability terms.

use serde::{Deserialize, Serialize};

use crate::error::{EapoError, Result};

/// Numerically stable `1 / (1 + exp(-x))`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn label_sign(y: u8) -> f64 {
    if y == 1 {
        1.0
    } else {
        -1.0
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(EapoError::NonFiniteInput(format!("{name} = {v}")))
    }
}

/// A per-example loss together with its derivative with respect to the logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub dvalue_dlogit: f64,
}

/// Weights of the combined objective: preference sharpness `beta`, weight of
/// the local preference term `lambda1`, weight of the extreme-event term
/// `lambda2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EapoWeights {
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl EapoWeights {
    pub fn new(beta: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self {
            beta,
            lambda1,
            lambda2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(EapoError::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(EapoError::InvalidConfig(format!(
                "lambda1 must be nonnegative, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return Err(EapoError::InvalidConfig(format!(
                "lambda2 must be nonnegative, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }
}

impl Default for EapoWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

/// Focal loss parameters. `alpha = None` disables alpha-weighting entirely
/// (`alpha_t = 1` for both classes); note that is not the same as
/// `alpha = 1`, which zeroes the negative-class weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Option<f64>,
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: Option<f64>) -> Result<Self> {
        let p = Self { gamma, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(EapoError::InvalidConfig(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0 && a <= 1.0) {
                return Err(EapoError::InvalidConfig(format!(
                    "alpha must lie in (0, 1], got {a}"
                )));
            }
        }
        Ok(())
    }

    fn alpha_t(&self, y: u8) -> f64 {
        match self.alpha {
            Some(a) => {
                if y == 1 {
                    a
                } else {
                    1.0 - a
                }
            }
            None => 1.0,
        }
    }
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

/// Supervised loss selector used by both training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    Bce,
    Focal(FocalParams),
}

impl BaseLoss {
    pub fn eval(&self, logit: f64, y: u8) -> Result<LossValue> {
        match self {
            BaseLoss::Bce => bce(logit, y),
            BaseLoss::Focal(p) => focal(logit, y, p),
        }
    }
}

/// Binary cross-entropy of a logit: `-ln sigmoid(s * z)` with `s = 2y - 1`.
pub fn bce(logit: f64, y: u8) -> Result<LossValue> {
    check_finite("logit", logit)?;
    let s = label_sign(y);
    Ok(LossValue {
        value: softplus(-s * logit),
        dvalue_dlogit: -s * sigmoid(-s * logit),
    })
}

/// Focal loss: `-alpha_t * (1 - p_t)^gamma * ln p_t` with `p_t = sigmoid(s*z)`.
///
/// With `gamma = 0` and alpha-weighting disabled this reduces exactly to
/// [`bce`].
pub fn focal(logit: f64, y: u8, params: &FocalParams) -> Result<LossValue> {
    check_finite("logit", logit)?;
    params.validate()?;
    let s = label_sign(y);
    let u = s * logit;
    let p = sigmoid(u);
    let one_minus_p = sigmoid(-u);
    let ln_p = -softplus(-u);
    let alpha_t = params.alpha_t(y);
    let weight = one_minus_p.powf(params.gamma);
    // gamma * p * ln_p must be forced to 0 at gamma = 0 so that a huge
    // negative ln_p cannot produce 0 * inf.
    let focusing = if params.gamma == 0.0 {
        0.0
    } else {
        params.gamma * p * ln_p
    };
    Ok(LossValue {
        value: -alpha_t * weight * ln_p,
        dvalue_dlogit: s * alpha_t * weight * (focusing - one_minus_p),
    })
}

/// Preference loss of a binary sigmoid policy against a frozen reference
/// logit: `-ln sigmoid(beta * s * (z_theta - z_ref))` with `s = 2*y_plus - 1`.
///
/// The derivative is taken with respect to `z_theta` only; the reference is
/// frozen.
pub fn dpo(logit_theta: f64, logit_ref: f64, y_plus: u8, beta: f64) -> Result<LossValue> {
    check_finite("logit_theta", logit_theta)?;
    check_finite("logit_ref", logit_ref)?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(EapoError::InvalidConfig(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let s = label_sign(y_plus);
    let margin = beta * s * (logit_theta - logit_ref);
    Ok(LossValue {
        value: softplus(-margin),
        dvalue_dlogit: -beta * s * sigmoid(-margin),
    })
}

/// One supervised item: the trainable logit and the true label.
#[derive(Debug, Clone, Copy)]
pub struct SftItem {
    pub logit: f64,
    pub label: u8,
}

/// One preference pair at the logit level: trainable logit, frozen reference
/// logit, and the preferred label.
#[derive(Debug, Clone, Copy)]
pub struct PairItem {
    pub logit_theta: f64,
    pub logit_ref: f64,
    pub y_plus: u8,
}

/// Value and per-item logit gradients of one combined-objective batch.
///
/// Gradient entries are already scaled by their term weight and by the
/// reciprocal of the term's item count, so summing a record's entries across
/// terms gives its total upstream derivative.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub value: f64,
    pub sft_grads: Vec<f64>,
    pub local_grads: Vec<f64>,
    pub extreme_grads: Vec<f64>,
}

/// Combined objective over one batch: mean supervised loss over `sft_items`
/// plus `lambda1` times the mean preference loss over `local_pairs` plus
/// `lambda2` times the mean preference loss over `extreme_pairs`. An empty
/// list contributes zero to its term.
pub fn eapo_batch(
    sft_items: &[SftItem],
    local_pairs: &[PairItem],
    extreme_pairs: &[PairItem],
    weights: &EapoWeights,
    base_loss: &BaseLoss,
) -> Result<BatchObjective> {
    weights.validate()?;
    if sft_items.is_empty() && local_pairs.is_empty() && extreme_pairs.is_empty() {
        return Err(EapoError::EmptyBatch);
    }

    let mut value = 0.0;

    let mut sft_grads = Vec::with_capacity(sft_items.len());
    if !sft_items.is_empty() {
        let scale = 1.0 / sft_items.len() as f64;
        let mut sum = 0.0;
        for item in sft_items {
            let loss = base_loss.eval(item.logit, item.label)?;
            sum += loss.value;
            sft_grads.push(scale * loss.dvalue_dlogit);
        }
        value += scale * sum;
    }

    let mut pair_term = |pairs: &[PairItem], lambda: f64| -> Result<Vec<f64>> {
        let mut grads = Vec::with_capacity(pairs.len());
        if pairs.is_empty() {
            return Ok(grads);
        }
        let scale = 1.0 / pairs.len() as f64;
        let mut sum = 0.0;
        for pair in pairs {
            let loss = dpo(pair.logit_theta, pair.logit_ref, pair.y_plus, weights.beta)?;
            sum += loss.value;
            grads.push(lambda * scale * loss.dvalue_dlogit);
        }
        value += lambda * scale * sum;
        Ok(grads)
    };

    let local_grads = pair_term(local_pairs, weights.lambda1)?;
    let extreme_grads = pair_term(extreme_pairs, weights.lambda2)?;

    Ok(BatchObjective {
        value,
        sft_grads,
        local_grads,
        extreme_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    /// Direct evaluation of the preference loss through its four
    /// log-probability terms. Test oracle only; the implementation uses the
    /// algebraically equivalent logit-difference form.
    pub(crate) fn dpo_four_term(logit_theta: f64, logit_ref: f64, y_plus: u8, beta: f64) -> f64 {
        let ln_policy = |logit: f64, y: u8| -> f64 {
            let p = if y == 1 {
                sigmoid(logit)
            } else {
                sigmoid(-logit)
            };
            p.ln()
        };
        let y_minus = 1 - y_plus;
        let h = beta
            * ((ln_policy(logit_theta, y_plus) - ln_policy(logit_ref, y_plus))
                - (ln_policy(logit_theta, y_minus) - ln_policy(logit_ref, y_minus)));
        -sigmoid(h).ln()
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn bce_at_zero_logit() {
        let l = bce(0.0, 1).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);
        assert!((l.dvalue_dlogit - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn bce_derived_value() {
        // ln(1 + e^-1)
        let l = bce(1.0, 1).unwrap();
        assert!((l.value - 0.313_261_687_5).abs() < 1e-9);
    }

    #[test]
    fn bce_label_flip_is_sign_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let z = rng.random_range(-40.0..40.0);
            let a = bce(z, 1).unwrap();
            let b = bce(-z, 0).unwrap();
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn bce_rejects_non_finite() {
        assert!(bce(f64::NAN, 1).is_err());
        assert!(bce(f64::INFINITY, 0).is_err());
    }

    #[test]
    fn focal_reduces_to_bce() {
        let p = FocalParams {
            gamma: 0.0,
            alpha: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let z = rng.random_range(-60.0..60.0);
            let y = rng.random_range(0..2u8);
            let f = focal(z, y, &p).unwrap();
            let b = bce(z, y).unwrap();
            assert!((f.value - b.value).abs() < 1e-12);
            assert!((f.dvalue_dlogit - b.dvalue_dlogit).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_derived_value() {
        // (1 - 0.5)^2 * ln 2
        let p = FocalParams {
            gamma: 2.0,
            alpha: None,
        };
        let l = focal(0.0, 1, &p).unwrap();
        assert!((l.value - 0.25 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_alpha_is_exact_linear_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let z = rng.random_range(-20.0..20.0);
            let y = rng.random_range(0..2u8);
            let alpha = rng.random_range(0.05..1.0);
            let plain = focal(
                z,
                y,
                &FocalParams {
                    gamma: 2.0,
                    alpha: None,
                },
            )
            .unwrap();
            let weighted = focal(
                z,
                y,
                &FocalParams {
                    gamma: 2.0,
                    alpha: Some(alpha),
                },
            )
            .unwrap();
            let alpha_t = if y == 1 { alpha } else { 1.0 - alpha };
            assert!((weighted.value - alpha_t * plain.value).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_bounded_by_bce() {
        let p = FocalParams {
            gamma: 2.0,
            alpha: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..500 {
            let z = rng.random_range(-50.0..50.0);
            let y = rng.random_range(0..2u8);
            assert!(focal(z, y, &p).unwrap().value <= bce(z, y).unwrap().value + 1e-15);
        }
    }

    #[test]
    fn dpo_at_reference_is_ln_two() {
        for (y, beta) in [(0u8, 0.1), (1u8, 0.1), (0, 2.5), (1, 2.5)] {
            let l = dpo(1.7, 1.7, y, beta).unwrap();
            assert!((l.value - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn dpo_derived_values() {
        let up = dpo(1.0, 0.0, 1, 0.1).unwrap();
        assert!((up.value - 0.644_396_660_1).abs() < 1e-9);
        let down = dpo(1.0, 0.0, 0, 0.1).unwrap();
        assert!((down.value - 0.744_396_660_1).abs() < 1e-9);
    }

    #[test]
    fn dpo_matches_four_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..2000 {
            let zt = rng.random_range(-30.0..30.0);
            let zr = rng.random_range(-30.0..30.0);
            let y = rng.random_range(0..2u8);
            let beta = rng.random_range(0.01..5.0);
            let got = dpo(zt, zr, y, beta).unwrap().value;
            let want = dpo_four_term(zt, zr, y, beta);
            assert!(
                (got - want).abs() < 1e-9,
                "mismatch at zt={zt} zr={zr} y={y} beta={beta}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn bce_strictly_decreasing_in_signed_logit() {
        for y in [0u8, 1] {
            let mut prev = f64::INFINITY;
            for i in 0..200 {
                let signed = -10.0 + 0.1 * i as f64;
                let z = if y == 1 { signed } else { -signed };
                let v = bce(z, y).unwrap().value;
                assert!(v < prev);
                prev = v;
            }
        }
    }

    #[test]
    fn dpo_strictly_decreasing_in_margin() {
        let beta = 0.7;
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let delta = -5.0 + 0.1 * i as f64;
            let v = dpo(delta, 0.0, 1, beta).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn losses_stable_at_extreme_logits() {
        let p = FocalParams::default();
        for z in [-500.0, -250.0, 0.0, 250.0, 500.0] {
            for y in [0u8, 1] {
                let b = bce(z, y).unwrap();
                let f = focal(z, y, &p).unwrap();
                let d = dpo(z, -z, y, 0.1).unwrap();
                for l in [b, f, d] {
                    assert!(l.value.is_finite() && l.value >= 0.0);
                    assert!(l.dvalue_dlogit.is_finite());
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let h = 1e-5;
        for _ in 0..300 {
            let z = rng.random_range(-8.0..8.0);
            let y = rng.random_range(0..2u8);
            let zr = rng.random_range(-8.0..8.0);
            let beta = rng.random_range(0.05..3.0);
            let params = FocalParams {
                gamma: rng.random_range(0.0..4.0),
                alpha: Some(rng.random_range(0.05..1.0)),
            };

            let check = |analytic: f64, numeric: f64| {
                let denom = analytic.abs().max(1e-7);
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-5,
                    "analytic {analytic} vs numeric {numeric}"
                );
            };
            check(
                bce(z, y).unwrap().dvalue_dlogit,
                central_diff(|x| bce(x, y).unwrap().value, z, h),
            );
            check(
                focal(z, y, &params).unwrap().dvalue_dlogit,
                central_diff(|x| focal(x, y, &params).unwrap().value, z, h),
            );
            check(
                dpo(z, zr, y, beta).unwrap().dvalue_dlogit,
                central_diff(|x| dpo(x, zr, y, beta).unwrap().value, z, h),
            );
        }
    }

    #[test]
    fn batch_degenerates_to_supervised_mean() {
        let weights = EapoWeights {
            beta: 0.1,
            lambda1: 0.0,
            lambda2: 0.0,
        };
        let sft = [
            SftItem {
                logit: 0.3,
                label: 1,
            },
            SftItem {
                logit: -1.2,
                label: 0,
            },
            SftItem {
                logit: 2.0,
                label: 1,
            },
        ];
        let pairs = [PairItem {
            logit_theta: 1.0,
            logit_ref: 0.0,
            y_plus: 1,
        }];
        let out = eapo_batch(&sft, &pairs, &pairs, &weights, &BaseLoss::Bce).unwrap();
        let mean: f64 = sft
            .iter()
            .map(|i| bce(i.logit, i.label).unwrap().value)
            .sum::<f64>()
            / 3.0;
        assert_eq!(out.value, mean);
    }

    #[test]
    fn batch_at_reference_adds_ln_two_terms() {
        let weights = EapoWeights {
            beta: 0.1,
            lambda1: 1.0,
            lambda2: 0.1,
        };
        let sft = [SftItem {
            logit: 0.0,
            label: 1,
        }];
        let pairs: Vec<PairItem> = (0..4)
            .map(|i| PairItem {
                logit_theta: i as f64,
                logit_ref: i as f64,
                y_plus: (i % 2) as u8,
            })
            .collect();
        let out = eapo_batch(&sft, &pairs, &pairs, &weights, &BaseLoss::Bce).unwrap();
        let want = LN_2 + (weights.lambda1 + weights.lambda2) * LN_2;
        assert!((out.value - want).abs() < 1e-12);
    }

    #[test]
    fn batch_three_term_derived_value() {
        let weights = EapoWeights {
            beta: 0.1,
            lambda1: 1.0,
            lambda2: 0.1,
        };
        let sft = [SftItem {
            logit: 0.0,
            label: 1,
        }];
        let local = [PairItem {
            logit_theta: 1.0,
            logit_ref: 0.0,
            y_plus: 1,
        }];
        let extreme = [PairItem {
            logit_theta: -1.0,
            logit_ref: 0.0,
            y_plus: 1,
        }];
        let out = eapo_batch(&sft, &local, &extreme, &weights, &BaseLoss::Bce).unwrap();
        assert!((out.value - 1.411_984).abs() < 1e-6);
    }

    #[test]
    fn batch_empty_lists_contribute_zero() {
        let weights = EapoWeights::default();
        let sft = [SftItem {
            logit: 0.5,
            label: 1,
        }];
        let out = eapo_batch(&sft, &[], &[], &weights, &BaseLoss::Bce).unwrap();
        assert_eq!(out.value, bce(0.5, 1).unwrap().value);
        assert!(out.local_grads.is_empty() && out.extreme_grads.is_empty());
    }

    #[test]
    fn batch_all_empty_is_error() {
        let weights = EapoWeights::default();
        assert!(matches!(
            eapo_batch(&[], &[], &[], &weights, &BaseLoss::Bce),
            Err(EapoError::EmptyBatch)
        ));
    }
}
