//! The loss and gradient-weight family: DPO, reference-free absolute margin,
//! the clipped-reference hybrid (hard and softplus-smoothed, with optional
//! home advantage), and DPO with an auxiliary SFT-on-chosen term.
//!
//! Every member is a logistic loss `log(1+exp(-arg))` differing only in its
//! argument; the gradient weight `sigma(-arg)` is the multiplier on the
//! margin gradient, so `d loss / d delta_theta = -beta * weight` throughout.

use crate::error::{Error, Result};
use crate::exec;
use crate::math::{
    clip_ref_margin, log1pexp_and_sigmoid, smooth_ref_margin, HyperParams, MarginPair,
};

/// Which member of the objective family to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Logistic loss on the relative margin `delta_theta - delta_ref`.
    Dpo,
    /// Reference-free logistic loss on the absolute margin `delta_theta`.
    RefFree,
    /// DPO with the reference margin hard-clipped at `gamma`.
    HypoHard,
    /// DPO with the reference margin softplus-clipped (needs `alpha`).
    HypoSoft,
    /// DPO plus `lambda_sft * (-log pi(y+|x))` on the chosen response.
    DpoPlusSft,
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::RefFree => "ref_free",
            ObjectiveKind::HypoHard => "hypo_hard",
            ObjectiveKind::HypoSoft => "hypo_soft",
            ObjectiveKind::DpoPlusSft => "dpo_sft",
        }
    }

    /// True for the variants whose loss needs the chosen response's
    /// log-probability in addition to the margin pair.
    pub fn needs_logp_chosen(&self) -> bool {
        matches!(self, ObjectiveKind::DpoPlusSft)
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One objective evaluation: the per-example loss, the gradient weight
/// `w = -(1/beta) * d loss / d delta_theta`, and the reference margin the
/// objective actually used (clipped/smoothed/zeroed as applicable).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub weight: f64,
    pub effective_ref_margin: f64,
}

#[inline]
fn logistic_eval(scaled_arg: f64, effective_ref_margin: f64) -> LossEval {
    let (loss, weight) = log1pexp_and_sigmoid(-scaled_arg);
    LossEval {
        loss,
        weight,
        effective_ref_margin,
    }
}

/// DPO: `log(1+exp(-beta*(delta_theta - delta_ref)))`.
pub fn dpo_loss(pair: MarginPair, hp: &HyperParams) -> LossEval {
    let arg = hp.beta() * (pair.delta_theta() - pair.delta_ref());
    logistic_eval(arg, pair.delta_ref())
}

/// Reference-free absolute-margin loss: `log(1+exp(-beta*delta_theta))`.
pub fn absolute_loss(delta_theta: f64, hp: &HyperParams) -> Result<LossEval> {
    if !delta_theta.is_finite() {
        return Err(Error::non_finite("delta_theta", delta_theta));
    }
    let arg = hp.beta() * delta_theta;
    Ok(logistic_eval(arg, 0.0))
}

/// Clipped-reference hybrid. The loss argument is
/// `beta * (delta_theta - clipped_ref - h)` where `clipped_ref` is
/// `max(delta_ref, gamma)` in hard mode or its softplus smoothing in soft
/// mode (which requires `alpha`).
///
/// On pairs with `delta_ref >= gamma` and `h = 0` the hard form coincides
/// with [`dpo_loss`] bit for bit.
pub fn hypo_loss(pair: MarginPair, hp: &HyperParams, hard: bool) -> Result<LossEval> {
    let eff = if hard {
        clip_ref_margin(pair.delta_ref(), hp.gamma())?
    } else {
        let alpha = hp.alpha().ok_or_else(|| {
            Error::invalid_param("alpha", "soft clipping requires alpha (or tau) to be set")
        })?;
        smooth_ref_margin(pair.delta_ref(), hp.gamma(), alpha)?
    };
    let arg = hp.beta() * (pair.delta_theta() - eff - hp.home_advantage());
    Ok(logistic_eval(arg, eff))
}

/// DPO plus the SFT-on-chosen regularizer:
/// `dpo_loss + lambda_sft * (-logp_chosen)`.
///
/// The reported `weight` is the logistic component's weight only; the SFT
/// term's gradient is per-parameter, not per-margin, and is applied by the
/// policy/trainer layer.
pub fn dpo_plus_sft_loss(pair: MarginPair, logp_chosen: f64, hp: &HyperParams) -> Result<LossEval> {
    if !logp_chosen.is_finite() {
        return Err(Error::non_finite("logp_chosen", logp_chosen));
    }
    if logp_chosen > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "logp_chosen must be <= 0 (a log-probability), got {logp_chosen}"
        )));
    }
    let base = dpo_loss(pair, hp);
    Ok(LossEval {
        loss: base.loss + hp.lambda_sft() * (-logp_chosen),
        weight: base.weight,
        effective_ref_margin: base.effective_ref_margin,
    })
}

/// The exponential attenuation bound `e^{-z}`; for `z >= 0` it dominates the
/// DPO weight, `sigma(-z) <= e^{-z}`.
pub fn attenuation_bound(z: f64) -> f64 {
    (-z).exp()
}

/// Dispatch over the family. `logp_chosen` must be supplied exactly when
/// `kind` is [`ObjectiveKind::DpoPlusSft`].
pub fn evaluate(
    kind: ObjectiveKind,
    pair: MarginPair,
    logp_chosen: Option<f64>,
    hp: &HyperParams,
) -> Result<LossEval> {
    if kind.needs_logp_chosen() != logp_chosen.is_some() {
        return Err(Error::invalid_param(
            "logp_chosen",
            format!(
                "{} logp_chosen for objective {kind}",
                if logp_chosen.is_some() {
                    "unexpected"
                } else {
                    "missing"
                }
            ),
        ));
    }
    match kind {
        ObjectiveKind::Dpo => Ok(dpo_loss(pair, hp)),
        ObjectiveKind::RefFree => absolute_loss(pair.delta_theta(), hp),
        ObjectiveKind::HypoHard => hypo_loss(pair, hp, true),
        ObjectiveKind::HypoSoft => hypo_loss(pair, hp, false),
        ObjectiveKind::DpoPlusSft => {
            dpo_plus_sft_loss(pair, logp_chosen.expect("checked above"), hp)
        }
    }
}

/// Evaluate a whole batch, in input order. Parallel under the `parallel`
/// feature; the output order (and therefore any downstream reduction) is
/// identical either way.
pub fn batch_evaluate(
    kind: ObjectiveKind,
    pairs: &[MarginPair],
    logp_chosen: Option<&[f64]>,
    hp: &HyperParams,
) -> Result<Vec<LossEval>> {
    if let Some(lps) = logp_chosen {
        if lps.len() != pairs.len() {
            return Err(Error::InvalidArgument(format!(
                "logp_chosen length {} does not match pairs length {}",
                lps.len(),
                pairs.len()
            )));
        }
    }
    let evals = exec::map_range(pairs.len(), |i| {
        evaluate(kind, pairs[i], logp_chosen.map(|l| l[i]), hp)
    });
    evals.into_iter().collect()
}

/// Arithmetic mean of the per-example losses, accumulated in input order.
pub fn batch_mean_loss(
    kind: ObjectiveKind,
    pairs: &[MarginPair],
    logp_chosen: Option<&[f64]>,
    hp: &HyperParams,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let evals = batch_evaluate(kind, pairs, logp_chosen, hp)?;
    Ok(evals.iter().map(|e| e.loss).sum::<f64>() / pairs.len() as f64)
}
