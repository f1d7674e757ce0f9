//! Numerically stable scalar kernels and the clipped/smoothed
//! reference-margin transforms shared by every objective.

use crate::error::{Error, Result};

/// Policy/reference log-likelihood margin pair for one preference example:
/// `delta_theta = log pi(y+|x) - log pi(y-|x)` under the trainable policy,
/// `delta_ref` the same difference under the frozen reference.
///
/// Both fields are guaranteed finite; NaN/infinite margins are rejected at
/// construction so they can never reach an objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginPair {
    delta_theta: f64,
    delta_ref: f64,
}

impl MarginPair {
    pub fn new(delta_theta: f64, delta_ref: f64) -> Result<Self> {
        if !delta_theta.is_finite() {
            return Err(Error::non_finite("delta_theta", delta_theta));
        }
        if !delta_ref.is_finite() {
            return Err(Error::non_finite("delta_ref", delta_ref));
        }
        Ok(Self {
            delta_theta,
            delta_ref,
        })
    }

    #[inline]
    pub fn delta_theta(&self) -> f64 {
        self.delta_theta
    }

    #[inline]
    pub fn delta_ref(&self) -> f64 {
        self.delta_ref
    }
}

/// Every tunable scalar of the objective family.
///
/// `beta` is the inverse temperature of the logistic loss; `gamma` the clip
/// threshold on the reference margin; `alpha` the softplus smoothness
/// (absent = hard clip; `tau = 1/alpha` is the equivalent temperature
/// spelling); `h` a uniform home-advantage margin subtracted from the loss
/// argument; `lambda_sft` the coefficient of the SFT-on-chosen term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    beta: f64,
    gamma: f64,
    alpha: Option<f64>,
    h: f64,
    lambda_sft: f64,
}

impl HyperParams {
    /// Hyperparameters with `beta`, everything else at its default
    /// (`gamma = 0`, hard clip, `h = 0`, `lambda_sft = 0`).
    pub fn new(beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::invalid_param(
                "beta",
                format!("must be > 0, got {beta}"),
            ));
        }
        Ok(Self {
            beta,
            gamma: 0.0,
            alpha: None,
            h: 0.0,
            lambda_sft: 0.0,
        })
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::invalid_param(
                "gamma",
                format!("must be finite, got {gamma}"),
            ));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::invalid_param(
                "alpha",
                format!("must be > 0, got {alpha}"),
            ));
        }
        self.alpha = Some(alpha);
        Ok(self)
    }

    /// Set smoothness via the temperature spelling `tau = 1/alpha`.
    pub fn with_tau(self, tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::invalid_param(
                "tau",
                format!("must be > 0, got {tau}"),
            ));
        }
        self.with_alpha(1.0 / tau)
    }

    pub fn with_home_advantage(mut self, h: f64) -> Result<Self> {
        if !h.is_finite() || h < 0.0 {
            return Err(Error::invalid_param("h", format!("must be >= 0, got {h}")));
        }
        self.h = h;
        Ok(self)
    }

    pub fn with_lambda_sft(mut self, lambda_sft: f64) -> Result<Self> {
        if !lambda_sft.is_finite() || lambda_sft < 0.0 {
            return Err(Error::invalid_param(
                "lambda_sft",
                format!("must be >= 0, got {lambda_sft}"),
            ));
        }
        self.lambda_sft = lambda_sft;
        Ok(self)
    }

    #[inline]
    pub fn beta(&self) -> f64 {
        self.beta
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// `tau = 1/alpha`, when smoothing is active.
    #[inline]
    pub fn tau(&self) -> Option<f64> {
        self.alpha.map(|a| 1.0 / a)
    }

    #[inline]
    pub fn home_advantage(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn lambda_sft(&self) -> f64 {
        self.lambda_sft
    }
}

/// Stable `1/(1+exp(-x))`.
///
/// Branchless core: one `exp(-|x|)` (always in (0,1], no overflow), then a
/// sign flip for negative inputs.
pub fn stable_sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::non_finite("sigmoid input", x));
    }
    Ok(sigmoid(x))
}

/// Stable `log(1+exp(x))`.
///
/// `log(1+exp(x)) = max(x,0) + log(1+exp(-|x|))`: for x >> 0 returns ~x, for
/// x << 0 returns ~exp(x), never overflows.
pub fn stable_log1pexp(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::non_finite("log1pexp input", x));
    }
    Ok(log1pexp(x))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let recip = 1.0 / (1.0 + e);
    if x >= 0.0 {
        recip
    } else {
        e * recip
    }
}

#[inline]
pub(crate) fn log1pexp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Fused `(log(1+exp(x)), sigmoid(x))` with a single `exp` call; the loss
/// and the gradient weight of every logistic objective come in this pair.
#[inline]
pub(crate) fn log1pexp_and_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let loss = x.max(0.0) + e.ln_1p();
    let recip = 1.0 / (1.0 + e);
    let sig = if x >= 0.0 { recip } else { e * recip };
    (loss, sig)
}

/// Hard-clipped reference margin `max(delta_ref, gamma)`.
pub fn clip_ref_margin(delta_ref: f64, gamma: f64) -> Result<f64> {
    if !delta_ref.is_finite() {
        return Err(Error::non_finite("delta_ref", delta_ref));
    }
    if !gamma.is_finite() {
        return Err(Error::non_finite("gamma", gamma));
    }
    Ok(delta_ref.max(gamma))
}

/// Softplus-smoothed clip `gamma + log(1+exp(alpha*(delta_ref-gamma)))/alpha`.
///
/// Strictly above the hard clip, within `ln 2 / alpha` of it, and recovers
/// it as `alpha -> inf`.
pub fn smooth_ref_margin(delta_ref: f64, gamma: f64, alpha: f64) -> Result<f64> {
    if !delta_ref.is_finite() {
        return Err(Error::non_finite("delta_ref", delta_ref));
    }
    if !gamma.is_finite() {
        return Err(Error::non_finite("gamma", gamma));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::invalid_param(
            "alpha",
            format!("must be > 0, got {alpha}"),
        ));
    }
    // gamma + softplus(z)/a = max(delta_ref, gamma) + ln(1+exp(-|z|))/a
    // with z = a*(delta_ref-gamma). The product only ever enters exp(-|z|),
    // so a huge alpha cannot overflow the result into infinity, and the
    // result dominates the hard clip exactly.
    let z = alpha * (delta_ref - gamma);
    Ok(delta_ref.max(gamma) + (-z.abs()).exp().ln_1p() / alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(stable_sigmoid(0.0).unwrap(), 0.5);
    }

    #[test]
    fn sigmoid_matches_worked_value() {
        // sigma(-2), the attenuated-weight example value
        let got = stable_sigmoid(-2.0).unwrap();
        assert!((got - 0.11920292202211755).abs() < 1e-15);
        assert!((got - 0.11920).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        // true value is 1 - 2.5e-435, inside (1 - 1e-300, 1]; the nearest
        // f64 is 1.0 exactly
        let got = stable_sigmoid(1000.0).unwrap();
        assert!(got.is_finite());
        assert!(got > 1.0 - 1e-12 && got <= 1.0);
        let lo = stable_sigmoid(-1000.0).unwrap();
        assert!(lo >= 0.0 && lo < 1e-300);
    }

    #[test]
    fn sigmoid_rejects_non_finite() {
        assert!(stable_sigmoid(f64::NAN).is_err());
        assert!(stable_sigmoid(f64::INFINITY).is_err());
        assert!(stable_sigmoid(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn log1pexp_at_zero_is_ln2() {
        assert!((stable_log1pexp(0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn log1pexp_deep_negative_tail() {
        // exp(-745) = 2.822e-324 in extended precision; nearest f64 is the
        // smallest subnormal. Tiny positive, not flushed to zero.
        let got = stable_log1pexp(-745.0).unwrap();
        let expected = f64::from_bits(1); // 5e-324
        assert!(got > 0.0);
        assert!((got - expected).abs() <= f64::from_bits(1));
    }

    #[test]
    fn log1pexp_large_positive_is_identity() {
        // 100 + exp(-100) rounds to exactly 100.0
        assert_eq!(stable_log1pexp(100.0).unwrap(), 100.0);
    }

    #[test]
    fn log1pexp_rejects_non_finite() {
        assert!(stable_log1pexp(f64::NAN).is_err());
        assert!(stable_log1pexp(f64::INFINITY).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_ref_margin(-3.0, 0.0).unwrap(), 0.0);
        assert_eq!(clip_ref_margin(2.0, 0.0).unwrap(), 2.0);
        assert_eq!(clip_ref_margin(-0.5, -1.0).unwrap(), -0.5);
        // idempotent
        let once = clip_ref_margin(-3.0, 0.5).unwrap();
        assert_eq!(clip_ref_margin(once, 0.5).unwrap(), once);
    }

    #[test]
    fn smooth_examples() {
        // gamma + softplus(0)/alpha = ln 2
        let got = smooth_ref_margin(0.0, 0.0, 1.0).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15);
        // extended-precision value of log(1+e^-30)/10
        let got = smooth_ref_margin(-3.0, 0.0, 10.0).unwrap();
        assert!((got - 9.357622968839737e-15).abs() < 1e-28);
        // converges onto the hard clip from above
        let got = smooth_ref_margin(5.0, 0.0, 10.0).unwrap();
        assert!((got - 5.0).abs() < 2e-22);
        assert!(got >= 5.0);
    }

    #[test]
    fn smooth_rejects_bad_alpha() {
        assert!(smooth_ref_margin(0.0, 0.0, 0.0).is_err());
        assert!(smooth_ref_margin(0.0, 0.0, -1.0).is_err());
        assert!(smooth_ref_margin(0.0, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn smooth_survives_extreme_alpha() {
        // alpha large enough that alpha*(d-g) overflows: must degrade to the
        // hard clip, not to infinity.
        let got = smooth_ref_margin(2.0, 0.0, 1e300).unwrap();
        assert_eq!(got, 2.0);
        let got = smooth_ref_margin(-2.0, 0.0, 1e300).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn margin_pair_rejects_non_finite() {
        assert!(MarginPair::new(f64::NAN, 0.0).is_err());
        assert!(MarginPair::new(0.0, f64::INFINITY).is_err());
        assert!(MarginPair::new(1.0, -2.0).is_ok());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(HyperParams::new(0.0).is_err());
        assert!(HyperParams::new(-1.0).is_err());
        assert!(HyperParams::new(1.0).unwrap().with_alpha(0.0).is_err());
        assert!(HyperParams::new(1.0)
            .unwrap()
            .with_home_advantage(-0.1)
            .is_err());
        assert!(HyperParams::new(1.0)
            .unwrap()
            .with_lambda_sft(-0.1)
            .is_err());
        let hp = HyperParams::new(0.5).unwrap().with_tau(0.1).unwrap();
        assert!((hp.alpha().unwrap() - 10.0).abs() < 1e-12);
        assert!((hp.tau().unwrap() - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clip_dominates_both_arguments(x in -50.0f64..50.0, g in -50.0f64..50.0) {
            let c = clip_ref_margin(x, g).unwrap();
            prop_assert!(c >= g);
            prop_assert!(c >= x);
            prop_assert_eq!(c == x, x >= g);
        }

        #[test]
        fn smooth_gap_is_positive_and_bounded(
            x in -20.0f64..20.0,
            g in -20.0f64..20.0,
            a in 0.1f64..100.0,
        ) {
            let clip = clip_ref_margin(x, g).unwrap();
            let smooth = smooth_ref_margin(x, g, a).unwrap();
            let gap = smooth - clip;
            prop_assert!(gap <= std::f64::consts::LN_2 / a + 1e-15);
            // strict positivity holds while the softplus tail is above
            // f64 resolution at the clip's magnitude
            if (a * (x - g)).abs() < 30.0 {
                prop_assert!(gap > 0.0);
            } else {
                prop_assert!(gap >= 0.0);
            }
        }

        #[test]
        fn smooth_monotone_in_input_and_alpha(
            x in -10.0f64..10.0,
            g in -5.0f64..5.0,
            a in 0.5f64..50.0,
        ) {
            let base = smooth_ref_margin(x, g, a).unwrap();
            let up = smooth_ref_margin(x + 0.25, g, a).unwrap();
            prop_assert!(up >= base);
            let sharper = smooth_ref_margin(x, g, a * 2.0).unwrap();
            prop_assert!(sharper <= base + 1e-15);
        }

        #[test]
        fn sigmoid_symmetry(x in -30.0f64..30.0) {
            let s = sigmoid(x) + sigmoid(-x);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log1pexp_softplus_identity(x in -30.0f64..30.0) {
            // log(1+e^x) - log(1+e^-x) = x
            let d = log1pexp(x) - log1pexp(-x);
            prop_assert!((d - x).abs() < 1e-10);
        }

        #[test]
        fn sigmoid_monotone(x in -30.0f64..20.0) {
            // above ~x=20 the increment falls below one ulp of 1.0
            prop_assert!(sigmoid(x + 1e-3) > sigmoid(x));
        }
    }
}
