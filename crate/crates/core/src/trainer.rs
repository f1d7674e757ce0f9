//! Deterministic mini-batch training: cosine learning-rate schedule with
//! linear warmup, bias-corrected adaptive-moment updates with decoupled
//! weight decay, per-step loss/gradient assembly with ordered reduction,
//! and periodic evaluation-set metrics into a run log.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{PreferenceDataset, PreferenceRecord};
use crate::error::{Error, Result};
use crate::exec;
use crate::math::{HyperParams, MarginPair};
use crate::metrics::{agreement_rate, pessimistic_margin};
use crate::objectives::{evaluate, LossEval, ObjectiveKind};
use crate::policy::{Checkpoint, ParametricPolicy, TabularPolicy};

const RUN_LOG_VERSION: u32 = 1;

/// Optimizer, schedule, batching, and logging knobs for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub hp: HyperParams,
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Decoupled weight decay; 0 keeps the update a pure Adam step.
    pub weight_decay: f64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Metrics are logged every this many optimizer steps (plus step 0 and
    /// the final step).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveKind, hp: HyperParams, peak_lr: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            objective,
            hp,
            peak_lr,
            epochs: 1,
            batch_size: 128,
            warmup_fraction: 0.10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            seed,
            eval_every: 10,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.peak_lr.is_finite() || self.peak_lr < 0.0 {
            return Err(Error::invalid_param("peak_lr", "must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid_param("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_param("batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid_param(
                "warmup_fraction",
                format!("must be in [0, 1), got {}", self.warmup_fraction),
            ));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid_param(
                    name,
                    format!("must be in [0, 1), got {v}"),
                ));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid_param("adam_epsilon", "must be > 0"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::invalid_param(
                "weight_decay",
                "must be finite and >= 0",
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid_param("grad_clip", "must be > 0 when set"));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::invalid_param("eval_every", "must be >= 1"));
        }
        if self.objective == ObjectiveKind::HypoSoft && self.hp.alpha().is_none() {
            return Err(Error::invalid_param(
                "alpha",
                "hypo_soft objective requires alpha (or tau)",
            ));
        }
        Ok(())
    }
}

/// One evaluation point of a run. `wall_time` (seconds since run start) is
/// kept in memory for reporting but never serialized, so logs from
/// identical runs are byte-identical; equality ignores it for the same
/// reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub step: u64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub agreement_rate: f64,
    pub pessimistic_margin: Option<f64>,
    pub pessimistic_subset_size: usize,
    #[serde(skip)]
    pub wall_time: f64,
}

impl PartialEq for RunLogEntry {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.learning_rate == other.learning_rate
            && self.train_loss == other.train_loss
            && self.agreement_rate == other.agreement_rate
            && self.pessimistic_margin == other.pessimistic_margin
            && self.pessimistic_subset_size == other.pessimistic_subset_size
    }
}

/// Append-only time series of training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    run_name: String,
    entries: Vec<RunLogEntry>,
}

#[derive(Serialize, Deserialize)]
struct RunLogHeader {
    version: u32,
    kind: String,
    run_name: String,
    n_entries: usize,
}

impl RunLog {
    pub fn new(run_name: impl Into<String>) -> Self {
        Self {
            run_name: run_name.into(),
            entries: Vec::new(),
        }
    }

    /// Assemble a log from prebuilt entries; steps must strictly increase.
    pub fn from_entries(run_name: impl Into<String>, entries: Vec<RunLogEntry>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::InvalidArgument(format!(
                    "run log steps must strictly increase, got {} then {}",
                    w[0].step, w[1].step
                )));
            }
        }
        Ok(Self {
            run_name: run_name.into(),
            entries,
        })
    }

    pub fn run_name(&self) -> &str {
        &self.run_name
    }

    /// Relabel the run (comparison legs need unique names even when two
    /// legs share an objective).
    pub fn renamed(mut self, run_name: impl Into<String>) -> Self {
        self.run_name = run_name.into();
        self
    }

    pub fn entries(&self) -> &[RunLogEntry] {
        &self.entries
    }

    fn push(&mut self, entry: RunLogEntry) {
        if let Some(last) = self.entries.last() {
            assert!(
                entry.step > last.step,
                "run log steps must strictly increase"
            );
        }
        self.entries.push(entry);
    }

    /// Header line plus one structured record per evaluation point.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = RunLogHeader {
            version: RUN_LOG_VERSION,
            kind: "run_log".into(),
            run_name: self.run_name.clone(),
            n_entries: self.entries.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        use std::io::BufRead;
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("run log file is empty".into()))??;
        let header: RunLogHeader = serde_json::from_str(&header_line)?;
        if header.version != RUN_LOG_VERSION {
            return Err(Error::Format(format!(
                "unsupported run log version {}",
                header.version
            )));
        }
        let mut entries = Vec::with_capacity(header.n_entries);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        if entries.len() != header.n_entries {
            return Err(Error::Format("run log entry count mismatch".into()));
        }
        Ok(Self {
            run_name: header.run_name,
            entries,
        })
    }
}

/// Trained policy, its metric log, and one checkpoint per completed epoch.
#[derive(Debug, Clone)]
pub struct TrainOutput<P> {
    pub policy: P,
    pub run_log: RunLog,
    pub epoch_checkpoints: Vec<Checkpoint>,
}

/// Learning rate at an optimizer step: linear ramp from 0 to `peak_lr` over
/// the first `warmup_fraction` of `total_steps`, then a half-cosine from
/// `peak_lr` down to exactly 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    Ok(lr_at_f(step as f64, total_steps as f64, config))
}

fn lr_at_f(step: f64, total_steps: f64, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_fraction * total_steps;
    if step < warmup {
        config.peak_lr * step / warmup
    } else {
        let progress = (step - warmup) / (total_steps - warmup);
        config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First/second moment accumulators and the step counter for the
/// adaptive-moment update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected adaptive-moment update with decoupled weight decay.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(&bad) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::non_finite("gradient entry", bad));
    }
    state.t += 1;
    let b1 = config.adam_beta1;
    let b2 = config.adam_beta2;
    let bias1 = 1.0 - b1.powi(state.t as i32);
    let bias2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + config.adam_epsilon));
        if config.weight_decay > 0.0 {
            params[i] -= lr * config.weight_decay * params[i];
        }
    }
    Ok(())
}

struct StepEval {
    mean_loss: f64,
}

/// Per-record quantities a step needs from the policy, computed in data
/// order (parallelizable; pure reads of a frozen snapshot).
fn record_evals<P: ParametricPolicy + Sync>(
    policy: &P,
    records: &[PreferenceRecord],
    ref_margins: &[f64],
    indices: &[usize],
    config: &TrainConfig,
) -> Vec<Result<(LossEval, Option<f64>)>> {
    let needs_logp = config.objective.needs_logp_chosen();
    exec::map_collect(indices, |&i| {
        let rec = &records[i];
        let dt = policy.policy_margin(rec.prompt_id, rec.chosen_id, rec.rejected_id)?;
        let pair = MarginPair::new(dt, ref_margins[i])?;
        let logp = if needs_logp {
            Some(policy.log_prob(rec.prompt_id, rec.chosen_id)?)
        } else {
            None
        };
        let eval = evaluate(config.objective, pair, logp, &config.hp)?;
        if !eval.loss.is_finite() || !eval.weight.is_finite() {
            return Err(Error::non_finite("loss", eval.loss));
        }
        Ok((eval, logp))
    })
}

/// Accumulate the batch-mean gradient into `grad` in record order and
/// return the batch-mean loss. Fails with the offending dataset indices on
/// any non-finite per-record evaluation.
fn batch_loss_and_grad<P: ParametricPolicy + Sync>(
    policy: &P,
    records: &[PreferenceRecord],
    ref_margins: &[f64],
    indices: &[usize],
    config: &TrainConfig,
    step: u64,
    grad: &mut [f64],
) -> Result<StepEval> {
    let evals = record_evals(policy, records, ref_margins, indices, config);
    let bad: Vec<usize> = indices
        .iter()
        .zip(&evals)
        .filter_map(|(&i, e)| e.is_err().then_some(i))
        .collect();
    if !bad.is_empty() {
        let reason = evals
            .iter()
            .find_map(|e| e.as_ref().err().map(|err| err.to_string()))
            .unwrap_or_default();
        return Err(Error::Training {
            step,
            record_ids: bad,
            reason,
        });
    }
    let inv_n = 1.0 / indices.len() as f64;
    let beta = config.hp.beta();
    let lambda = config.hp.lambda_sft();
    let mut loss_sum = 0.0;
    for (&i, eval) in indices.iter().zip(&evals) {
        let (eval, _) = eval.as_ref().expect("errors handled above");
        let rec = &records[i];
        loss_sum += eval.loss;
        policy.accumulate_margin_gradient(
            rec.prompt_id,
            rec.chosen_id,
            rec.rejected_id,
            -beta * eval.weight * inv_n,
            grad,
        )?;
        if config.objective == ObjectiveKind::DpoPlusSft && lambda > 0.0 {
            // d(lambda * -logp_chosen)/d(theta)
            policy.accumulate_logprob_gradient(
                rec.prompt_id,
                rec.chosen_id,
                -lambda * inv_n,
                grad,
            )?;
        }
    }
    if let Some(&bad) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::Training {
            step,
            record_ids: vec![],
            reason: format!("non-finite accumulated gradient entry {bad}"),
        });
    }
    Ok(StepEval {
        mean_loss: loss_sum * inv_n,
    })
}

/// Mean loss and analytic full-parameter gradient of the objective over a
/// record set: the chain rule `-beta * weight * grad(delta_theta)` plus the
/// SFT term's log-probability gradient where applicable.
pub fn batch_gradient<P: ParametricPolicy + Sync>(
    policy: &P,
    records: &[PreferenceRecord],
    ref_margins: &[f64],
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if records.len() != ref_margins.len() {
        return Err(Error::InvalidArgument(
            "ref_margins length does not match records".into(),
        ));
    }
    let indices: Vec<usize> = (0..records.len()).collect();
    let mut grad = vec![0.0; policy.n_params()];
    let eval = batch_loss_and_grad(policy, records, ref_margins, &indices, config, 0, &mut grad)?;
    Ok((eval.mean_loss, grad))
}

/// Mean loss of the objective over a whole dataset at the policy's current
/// parameters.
pub fn full_set_loss<P: ParametricPolicy + Sync>(
    policy: &P,
    dataset: &PreferenceDataset,
    ref_margins: &[f64],
    config: &TrainConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let evals = record_evals(policy, dataset.records(), ref_margins, &indices, config);
    let mut sum = 0.0;
    for e in evals {
        sum += e?.0.loss;
    }
    Ok(sum / dataset.len() as f64)
}

/// Reference margins for every record, recomputed once from the frozen
/// reference policy.
pub fn precompute_ref_margins<R: ParametricPolicy + Sync>(
    ref_policy: &R,
    dataset: &PreferenceDataset,
) -> Result<Vec<f64>> {
    exec::map_collect(dataset.records(), |rec| {
        ref_policy.policy_margin(rec.prompt_id, rec.chosen_id, rec.rejected_id)
    })
    .into_iter()
    .collect()
}

/// Train `policy` against the frozen `ref_policy`. Reference margins are
/// recomputed once up front; everything downstream is deterministic in the
/// config seed (fixed shuffle, ordered reduction).
pub fn train<P, R>(
    policy: &P,
    ref_policy: &R,
    train_set: &PreferenceDataset,
    eval_set: &PreferenceDataset,
    config: &TrainConfig,
) -> Result<TrainOutput<P>>
where
    P: ParametricPolicy + Clone + Sync,
    R: ParametricPolicy + Sync,
{
    let ref_margins = precompute_ref_margins(ref_policy, train_set)?;
    train_with_ref_margins(policy, ref_margins, train_set, eval_set, config)
}

/// Train using the datasets' cached reference margins instead of a live
/// reference policy. Byte-equivalent to [`train`] whenever the caches are
/// honest (they are written by the same margin computation).
pub fn train_with_cached_margins<P>(
    policy: &P,
    train_set: &PreferenceDataset,
    eval_set: &PreferenceDataset,
    config: &TrainConfig,
) -> Result<TrainOutput<P>>
where
    P: ParametricPolicy + Clone + Sync,
{
    let ref_margins: Vec<f64> = train_set.records().iter().map(|r| r.ref_margin).collect();
    train_with_ref_margins(policy, ref_margins, train_set, eval_set, config)
}

fn train_with_ref_margins<P>(
    policy: &P,
    ref_margins: Vec<f64>,
    train_set: &PreferenceDataset,
    eval_set: &PreferenceDataset,
    config: &TrainConfig,
) -> Result<TrainOutput<P>>
where
    P: ParametricPolicy + Clone + Sync,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }

    let started = Instant::now();
    let mut pol = policy.clone();
    pol.push_seed(config.seed);

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let records = train_set.records();

    let mut run_log = RunLog::new(format!("{}_seed{}", config.objective, config.seed));
    let log_point = |pol: &P, step: u64, lr: f64, log: &mut RunLog| -> Result<()> {
        let train_loss = full_set_loss(pol, train_set, &ref_margins, config)?;
        let agree = agreement_rate(pol, eval_set, step)?;
        let pess = pessimistic_margin(pol, eval_set, step)?;
        log.push(RunLogEntry {
            step,
            learning_rate: lr,
            train_loss,
            agreement_rate: agree.agree_rate,
            pessimistic_margin: pess.mean_margin,
            pessimistic_subset_size: pess.subset_size,
            wall_time: started.elapsed().as_secs_f64(),
        });
        Ok(())
    };
    log_point(&pol, 0, 0.0, &mut run_log)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(pol.n_params());
    let mut grad = vec![0.0; pol.n_params()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for _epoch in 0..config.epochs {
        // Fisher-Yates with the run's own stream
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let lr = lr_at_f(step as f64, total_steps as f64, config);
            step += 1;
            grad.iter_mut().for_each(|g| *g = 0.0);
            batch_loss_and_grad(&pol, records, &ref_margins, chunk, config, step, &mut grad)?;
            if let Some(clip) = config.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let scale = clip / norm;
                    grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
            adam_step(pol.params_mut(), &grad, &mut adam, lr, config).map_err(|e| match e {
                Error::NonFinite { value, .. } => Error::Training {
                    step,
                    record_ids: vec![],
                    reason: format!("non-finite gradient {value} reached the optimizer"),
                },
                other => other,
            })?;
            if step % config.eval_every as u64 == 0 && step != total_steps {
                log_point(&pol, step, lr, &mut run_log)?;
            }
        }
        checkpoints.push(pol.checkpoint());
    }
    let final_lr = lr_at_f(total_steps as f64, total_steps as f64, config);
    log_point(&pol, total_steps, final_lr, &mut run_log)?;

    Ok(TrainOutput {
        policy: pol,
        run_log,
        epoch_checkpoints: checkpoints,
    })
}

/// Full-batch fit of the weighted population DPO loss over a tabular
/// policy, with a cosine-annealed adaptive-moment loop. Used to check the
/// closed-form optimum `delta_theta - delta_ref = (r+ - r-) / beta` on
/// exhaustive Bradley-Terry-weighted pairs.
pub fn fit_population_dpo(
    init: &TabularPolicy,
    weighted_pairs: &[(PreferenceRecord, f64)],
    hp: &HyperParams,
    steps: usize,
    lr: f64,
) -> Result<TabularPolicy> {
    if weighted_pairs.is_empty() {
        return Err(Error::InvalidArgument("no weighted pairs".into()));
    }
    let total_weight: f64 = weighted_pairs.iter().map(|(_, w)| w).sum();
    let mut pol = init.clone();
    let config = TrainConfig::new(ObjectiveKind::Dpo, *hp, lr, 0)?;
    let mut adam = AdamState::new(pol.n_params());
    let mut grad = vec![0.0; pol.n_params()];
    let beta = hp.beta();
    for k in 0..steps {
        let lr_k = lr * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / steps as f64).cos());
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (rec, w) in weighted_pairs {
            let dt = pol.policy_margin(rec.prompt_id, rec.chosen_id, rec.rejected_id)?;
            let pair = MarginPair::new(dt, rec.ref_margin)?;
            let eval = evaluate(ObjectiveKind::Dpo, pair, None, hp)?;
            pol.accumulate_margin_gradient(
                rec.prompt_id,
                rec.chosen_id,
                rec.rejected_id,
                -beta * eval.weight * w / total_weight,
                &mut grad,
            )?;
        }
        adam_step(pol.params_mut(), &grad, &mut adam, lr_k, &config)?;
    }
    Ok(pol)
}
