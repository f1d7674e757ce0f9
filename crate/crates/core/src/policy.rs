//! Toy policy classes with exact log-probabilities and analytic gradients:
//! a tabular softmax policy (one logit per prompt/response cell) and a
//! log-linear policy over a fixed feature map. Both are small enough for
//! exhaustive oracles; a finite-difference gradient checker and the
//! closed-form Gibbs optimum live here too.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary cap keeping exhaustive oracles (full-support population
/// losses, brute-force win matrices) tractable.
pub const MAX_VOCAB: usize = 64;

const CHECKPOINT_VERSION: u32 = 1;

/// Dense per-(prompt, response) reward table, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMatrix {
    n_prompts: usize,
    n_responses: usize,
    values: Vec<f64>,
}

impl RewardMatrix {
    pub fn from_values(n_prompts: usize, n_responses: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_prompts * n_responses {
            return Err(Error::InvalidArgument(format!(
                "reward matrix needs {} values, got {}",
                n_prompts * n_responses,
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::non_finite("reward", bad));
        }
        Ok(Self {
            n_prompts,
            n_responses,
            values,
        })
    }

    pub fn zeros(n_prompts: usize, n_responses: usize) -> Self {
        Self {
            n_prompts,
            n_responses,
            values: vec![0.0; n_prompts * n_responses],
        }
    }

    #[inline]
    pub fn get(&self, prompt: usize, response: usize) -> f64 {
        self.values[prompt * self.n_responses + response]
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Gradient aligned with a policy's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::non_finite("gradient entry", bad));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Versioned, byte-stable snapshot of a policy: class tag, vocabulary
/// sizes, parameter array, and the seed lineage that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub policy_class: String,
    pub n_prompts: usize,
    pub n_responses: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feature_seed: Option<u64>,
    pub params: Vec<f64>,
    pub seed_lineage: Vec<u64>,
}

impl Checkpoint {
    /// Deterministic serialization; identical checkpoints produce identical
    /// bytes.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(text.trim_end())?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn into_policy(self) -> Result<PolicyBox> {
        match self.policy_class.as_str() {
            "tabular" => Ok(PolicyBox::Tabular(TabularPolicy::from_checkpoint(self)?)),
            "loglinear" => Ok(PolicyBox::LogLinear(LogLinearPolicy::from_checkpoint(
                self,
            )?)),
            other => Err(Error::Format(format!("unknown policy class {other:?}"))),
        }
    }
}

/// Either concrete policy class, for callers that dispatch at runtime.
#[derive(Debug, Clone)]
pub enum PolicyBox {
    Tabular(TabularPolicy),
    LogLinear(LogLinearPolicy),
}

impl PolicyBox {
    pub fn as_dyn(&self) -> &dyn ParametricPolicy {
        match self {
            PolicyBox::Tabular(p) => p,
            PolicyBox::LogLinear(p) => p,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            PolicyBox::Tabular(p) => p.checkpoint(),
            PolicyBox::LogLinear(p) => p.checkpoint(),
        }
    }
}

/// Common surface of the toy policy classes: exact log-probabilities,
/// margins with cancelled partition terms, and analytic gradients
/// accumulated straight into a caller-owned buffer.
pub trait ParametricPolicy {
    fn class_tag(&self) -> &'static str;
    fn n_prompts(&self) -> usize;
    fn n_responses(&self) -> usize;
    fn n_params(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Exact log-softmax over the prompt's response set.
    fn log_prob(&self, prompt: usize, response: usize) -> Result<f64>;

    /// Log-probabilities of every response to `prompt`.
    fn prompt_log_probs(&self, prompt: usize) -> Result<Vec<f64>>;

    /// `log pi(chosen|prompt) - log pi(rejected|prompt)`; partition terms
    /// cancel exactly, so ties produce an exact 0.
    fn policy_margin(&self, prompt: usize, chosen: usize, rejected: usize) -> Result<f64>;

    /// `out += scale * d(policy_margin)/d(params)`.
    fn accumulate_margin_gradient(
        &self,
        prompt: usize,
        chosen: usize,
        rejected: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()>;

    /// `out += scale * d(log_prob)/d(params)`.
    fn accumulate_logprob_gradient(
        &self,
        prompt: usize,
        response: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()>;

    fn seed_lineage(&self) -> &[u64];
    fn push_seed(&mut self, seed: u64);
    fn checkpoint(&self) -> Checkpoint;

    /// Highest-probability response; ties break to the lowest index.
    fn greedy_response(&self, prompt: usize) -> Result<usize> {
        let lps = self.prompt_log_probs(prompt)?;
        let mut best = 0;
        for (i, &lp) in lps.iter().enumerate() {
            if lp > lps[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Draw a response from the policy's distribution over the prompt.
    fn sample_response(&self, prompt: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        let lps = self.prompt_log_probs(prompt)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &lp) in lps.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return Ok(i);
            }
        }
        Ok(lps.len() - 1)
    }
}

fn check_vocab(n_prompts: usize, n_responses: usize) -> Result<()> {
    if n_prompts == 0 || n_prompts > MAX_VOCAB {
        return Err(Error::invalid_param(
            "n_prompts",
            format!("must be in 1..={MAX_VOCAB}, got {n_prompts}"),
        ));
    }
    if n_responses == 0 || n_responses > MAX_VOCAB {
        return Err(Error::invalid_param(
            "n_responses",
            format!("must be in 1..={MAX_VOCAB}, got {n_responses}"),
        ));
    }
    Ok(())
}

fn check_pair_indices(
    n_prompts: usize,
    n_responses: usize,
    prompt: usize,
    chosen: usize,
    rejected: usize,
) -> Result<()> {
    if prompt >= n_prompts {
        return Err(Error::UnknownIndex {
            kind: "prompt",
            index: prompt,
            len: n_prompts,
        });
    }
    if chosen >= n_responses {
        return Err(Error::UnknownIndex {
            kind: "response",
            index: chosen,
            len: n_responses,
        });
    }
    if rejected >= n_responses {
        return Err(Error::UnknownIndex {
            kind: "response",
            index: rejected,
            len: n_responses,
        });
    }
    if chosen == rejected {
        return Err(Error::InvalidArgument(format!(
            "chosen and rejected must differ, both are {chosen}"
        )));
    }
    Ok(())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax policy with one free logit per (prompt, response) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_prompts: usize,
    n_responses: usize,
    logits: Vec<f64>,
    seed_lineage: Vec<u64>,
}

impl TabularPolicy {
    pub fn new(n_prompts: usize, n_responses: usize, logits: Vec<f64>) -> Result<Self> {
        check_vocab(n_prompts, n_responses)?;
        if logits.len() != n_prompts * n_responses {
            return Err(Error::InvalidArgument(format!(
                "need {} logits, got {}",
                n_prompts * n_responses,
                logits.len()
            )));
        }
        if let Some(&bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::non_finite("logit", bad));
        }
        Ok(Self {
            n_prompts,
            n_responses,
            logits,
            seed_lineage: Vec::new(),
        })
    }

    /// Uniform policy (all logits zero).
    pub fn uniform(n_prompts: usize, n_responses: usize) -> Result<Self> {
        Self::new(n_prompts, n_responses, vec![0.0; n_prompts * n_responses])
    }

    #[inline]
    fn idx(&self, prompt: usize, response: usize) -> usize {
        prompt * self.n_responses + response
    }

    fn row(&self, prompt: usize) -> &[f64] {
        &self.logits[prompt * self.n_responses..(prompt + 1) * self.n_responses]
    }

    fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut p = Self::new(ck.n_prompts, ck.n_responses, ck.params)?;
        p.seed_lineage = ck.seed_lineage;
        Ok(p)
    }
}

impl ParametricPolicy for TabularPolicy {
    fn class_tag(&self) -> &'static str {
        "tabular"
    }

    fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    fn n_responses(&self) -> usize {
        self.n_responses
    }

    fn n_params(&self) -> usize {
        self.logits.len()
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn log_prob(&self, prompt: usize, response: usize) -> Result<f64> {
        if prompt >= self.n_prompts {
            return Err(Error::UnknownIndex {
                kind: "prompt",
                index: prompt,
                len: self.n_prompts,
            });
        }
        if response >= self.n_responses {
            return Err(Error::UnknownIndex {
                kind: "response",
                index: response,
                len: self.n_responses,
            });
        }
        let row = self.row(prompt);
        Ok(row[response] - log_sum_exp(row))
    }

    fn prompt_log_probs(&self, prompt: usize) -> Result<Vec<f64>> {
        if prompt >= self.n_prompts {
            return Err(Error::UnknownIndex {
                kind: "prompt",
                index: prompt,
                len: self.n_prompts,
            });
        }
        let row = self.row(prompt);
        let z = log_sum_exp(row);
        Ok(row.iter().map(|&l| l - z).collect())
    }

    fn policy_margin(&self, prompt: usize, chosen: usize, rejected: usize) -> Result<f64> {
        check_pair_indices(self.n_prompts, self.n_responses, prompt, chosen, rejected)?;
        Ok(self.logits[self.idx(prompt, chosen)] - self.logits[self.idx(prompt, rejected)])
    }

    fn accumulate_margin_gradient(
        &self,
        prompt: usize,
        chosen: usize,
        rejected: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        check_pair_indices(self.n_prompts, self.n_responses, prompt, chosen, rejected)?;
        out[self.idx(prompt, chosen)] += scale;
        out[self.idx(prompt, rejected)] -= scale;
        Ok(())
    }

    fn accumulate_logprob_gradient(
        &self,
        prompt: usize,
        response: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let probs: Vec<f64> = self
            .prompt_log_probs(prompt)?
            .iter()
            .map(|&l| l.exp())
            .collect();
        if response >= self.n_responses {
            return Err(Error::UnknownIndex {
                kind: "response",
                index: response,
                len: self.n_responses,
            });
        }
        out[self.idx(prompt, response)] += scale;
        for (y, &p) in probs.iter().enumerate() {
            out[self.idx(prompt, y)] -= scale * p;
        }
        Ok(())
    }

    fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    fn push_seed(&mut self, seed: u64) {
        self.seed_lineage.push(seed);
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            policy_class: "tabular".into(),
            n_prompts: self.n_prompts,
            n_responses: self.n_responses,
            feature_dim: None,
            feature_seed: None,
            params: self.logits.clone(),
            seed_lineage: self.seed_lineage.clone(),
        }
    }
}

/// Deterministic (prompt, response) -> feature-vector map backing the
/// log-linear policy. Regenerable from its seed, so checkpoints only need
/// the seed and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_prompts: usize,
    n_responses: usize,
    dim: usize,
    values: Vec<f64>,
    seed: u64,
}

impl FeatureMap {
    /// I.i.d. standard-normal features, deterministic in the seed.
    pub fn random(n_prompts: usize, n_responses: usize, dim: usize, seed: u64) -> Result<Self> {
        check_vocab(n_prompts, n_responses)?;
        if dim == 0 {
            return Err(Error::invalid_param("dim", "must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n_prompts * n_responses * dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Ok(Self {
            n_prompts,
            n_responses,
            dim,
            values,
            seed,
        })
    }

    #[inline]
    pub fn feature(&self, prompt: usize, response: usize) -> &[f64] {
        let start = (prompt * self.n_responses + response) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Log-linear policy: `log pi(y|x) = theta . phi(x,y) - logZ(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearPolicy {
    theta: Vec<f64>,
    features: FeatureMap,
    seed_lineage: Vec<u64>,
}

impl LogLinearPolicy {
    pub fn new(theta: Vec<f64>, features: FeatureMap) -> Result<Self> {
        if theta.len() != features.dim {
            return Err(Error::InvalidArgument(format!(
                "theta dimension {} does not match feature dimension {}",
                theta.len(),
                features.dim
            )));
        }
        if let Some(&bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::non_finite("theta entry", bad));
        }
        Ok(Self {
            theta,
            features,
            seed_lineage: Vec::new(),
        })
    }

    /// Zero-initialized parameters (the uniform-scoring policy for any
    /// feature map).
    pub fn zeros(features: FeatureMap) -> Self {
        let dim = features.dim;
        Self {
            theta: vec![0.0; dim],
            features,
            seed_lineage: Vec::new(),
        }
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    #[inline]
    fn score(&self, prompt: usize, response: usize) -> f64 {
        self.features
            .feature(prompt, response)
            .iter()
            .zip(&self.theta)
            .map(|(f, t)| f * t)
            .sum()
    }

    fn scores(&self, prompt: usize) -> Vec<f64> {
        (0..self.features.n_responses)
            .map(|y| self.score(prompt, y))
            .collect()
    }

    fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let dim = ck
            .feature_dim
            .ok_or_else(|| Error::Format("loglinear checkpoint missing feature_dim".into()))?;
        let seed = ck
            .feature_seed
            .ok_or_else(|| Error::Format("loglinear checkpoint missing feature_seed".into()))?;
        let features = FeatureMap::random(ck.n_prompts, ck.n_responses, dim, seed)?;
        let mut p = Self::new(ck.params, features)?;
        p.seed_lineage = ck.seed_lineage;
        Ok(p)
    }
}

impl ParametricPolicy for LogLinearPolicy {
    fn class_tag(&self) -> &'static str {
        "loglinear"
    }

    fn n_prompts(&self) -> usize {
        self.features.n_prompts
    }

    fn n_responses(&self) -> usize {
        self.features.n_responses
    }

    fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn log_prob(&self, prompt: usize, response: usize) -> Result<f64> {
        if prompt >= self.n_prompts() {
            return Err(Error::UnknownIndex {
                kind: "prompt",
                index: prompt,
                len: self.n_prompts(),
            });
        }
        if response >= self.n_responses() {
            return Err(Error::UnknownIndex {
                kind: "response",
                index: response,
                len: self.n_responses(),
            });
        }
        let scores = self.scores(prompt);
        Ok(scores[response] - log_sum_exp(&scores))
    }

    fn prompt_log_probs(&self, prompt: usize) -> Result<Vec<f64>> {
        if prompt >= self.n_prompts() {
            return Err(Error::UnknownIndex {
                kind: "prompt",
                index: prompt,
                len: self.n_prompts(),
            });
        }
        let scores = self.scores(prompt);
        let z = log_sum_exp(&scores);
        Ok(scores.iter().map(|&s| s - z).collect())
    }

    fn policy_margin(&self, prompt: usize, chosen: usize, rejected: usize) -> Result<f64> {
        check_pair_indices(
            self.n_prompts(),
            self.n_responses(),
            prompt,
            chosen,
            rejected,
        )?;
        Ok(self.score(prompt, chosen) - self.score(prompt, rejected))
    }

    fn accumulate_margin_gradient(
        &self,
        prompt: usize,
        chosen: usize,
        rejected: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        check_pair_indices(
            self.n_prompts(),
            self.n_responses(),
            prompt,
            chosen,
            rejected,
        )?;
        let fc = self.features.feature(prompt, chosen);
        let fr = self.features.feature(prompt, rejected);
        for k in 0..self.theta.len() {
            out[k] += scale * (fc[k] - fr[k]);
        }
        Ok(())
    }

    fn accumulate_logprob_gradient(
        &self,
        prompt: usize,
        response: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if response >= self.n_responses() {
            return Err(Error::UnknownIndex {
                kind: "response",
                index: response,
                len: self.n_responses(),
            });
        }
        let probs: Vec<f64> = self
            .prompt_log_probs(prompt)?
            .iter()
            .map(|&l| l.exp())
            .collect();
        let fy = self.features.feature(prompt, response);
        for k in 0..self.theta.len() {
            out[k] += scale * fy[k];
        }
        for (y, &p) in probs.iter().enumerate() {
            let f = self.features.feature(prompt, y);
            for k in 0..self.theta.len() {
                out[k] -= scale * p * f[k];
            }
        }
        Ok(())
    }

    fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    fn push_seed(&mut self, seed: u64) {
        self.seed_lineage.push(seed);
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            policy_class: "loglinear".into(),
            n_prompts: self.n_prompts(),
            n_responses: self.n_responses(),
            feature_dim: Some(self.features.dim),
            feature_seed: Some(self.features.seed),
            params: self.theta.clone(),
            seed_lineage: self.seed_lineage.clone(),
        }
    }
}

/// Dense margin gradient as a standalone vector; the `accumulate_*` trait
/// methods are the allocation-free path for training loops.
pub fn margin_gradient<P: ParametricPolicy>(
    policy: &P,
    prompt: usize,
    chosen: usize,
    rejected: usize,
) -> Result<GradientVector> {
    let mut out = vec![0.0; policy.n_params()];
    policy.accumulate_margin_gradient(prompt, chosen, rejected, 1.0, &mut out)?;
    GradientVector::new(out)
}

/// Central finite differences of `f` with respect to every policy
/// parameter. The verification oracle for all analytic gradients; never
/// used on any training path.
pub fn finite_diff_gradient<P, F>(f: F, policy: &P, step: f64) -> Result<GradientVector>
where
    P: ParametricPolicy + Clone,
    F: Fn(&P) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid_param(
            "step",
            format!("must be > 0, got {step}"),
        ));
    }
    let mut probe = policy.clone();
    let n = probe.n_params();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.params_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.params_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    GradientVector::new(grad)
}

/// Closed-form optimum of KL-regularized reward maximization:
/// `pi*(y|x) proportional to ref(y|x) * exp(r(x,y)/tau)`, returned exactly
/// normalized per prompt.
pub fn gibbs_optimum(
    reference: &TabularPolicy,
    reward: &RewardMatrix,
    tau: f64,
) -> Result<TabularPolicy> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid_param(
            "tau",
            format!("must be > 0, got {tau}"),
        ));
    }
    if reward.n_prompts != reference.n_prompts || reward.n_responses != reference.n_responses {
        return Err(Error::InvalidArgument(format!(
            "reward shape {}x{} does not match policy {}x{}",
            reward.n_prompts, reward.n_responses, reference.n_prompts, reference.n_responses
        )));
    }
    let nr = reference.n_responses;
    let mut logits = Vec::with_capacity(reference.logits.len());
    for x in 0..reference.n_prompts {
        let row: Vec<f64> = (0..nr)
            .map(|y| reference.logits[x * nr + y] + reward.get(x, y) / tau)
            .collect();
        let z = log_sum_exp(&row);
        logits.extend(row.iter().map(|&l| l - z));
    }
    let mut out = TabularPolicy::new(reference.n_prompts, nr, logits)?;
    out.seed_lineage = reference.seed_lineage.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tabular(n_prompts: usize, n_responses: usize, seed: u64) -> TabularPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..n_prompts * n_responses)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        TabularPolicy::new(n_prompts, n_responses, logits).unwrap()
    }

    fn loglinear(n_prompts: usize, n_responses: usize, dim: usize, seed: u64) -> LogLinearPolicy {
        let features = FeatureMap::random(n_prompts, n_responses, dim, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let theta = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        LogLinearPolicy::new(theta, features).unwrap()
    }

    #[test]
    fn log_prob_uniform_four() {
        let p = TabularPolicy::uniform(2, 4).unwrap();
        for y in 0..4 {
            let lp = p.log_prob(0, y).unwrap();
            assert!((lp - (-1.3862943611198906)).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_two_logits() {
        let p = TabularPolicy::new(1, 2, vec![1.0, 0.0]).unwrap();
        let lp = p.log_prob(0, 0).unwrap();
        assert!((lp - (-0.3132616875182228)).abs() < 1e-15);
    }

    #[test]
    fn log_prob_single_response() {
        let p = TabularPolicy::new(3, 1, vec![5.0, -2.0, 0.3]).unwrap();
        for x in 0..3 {
            assert_eq!(p.log_prob(x, 0).unwrap(), 0.0);
        }
    }

    #[test]
    fn log_prob_rejects_unknown_index() {
        let p = TabularPolicy::uniform(2, 3).unwrap();
        assert!(p.log_prob(2, 0).is_err());
        assert!(p.log_prob(0, 3).is_err());
    }

    #[test]
    fn margin_cancels_partition() {
        let p = TabularPolicy::new(1, 3, vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(p.policy_margin(0, 0, 1).unwrap(), 3.0);
        let u = TabularPolicy::uniform(1, 3).unwrap();
        assert_eq!(u.policy_margin(0, 0, 2).unwrap(), 0.0);
        assert!(p.policy_margin(0, 1, 1).is_err());
    }

    #[test]
    fn loglinear_margin_is_linear_in_theta() {
        let p = loglinear(3, 4, 6, 42);
        let m = p.policy_margin(1, 0, 2).unwrap();
        let fc = p.features().feature(1, 0).to_vec();
        let fr = p.features().feature(1, 2).to_vec();
        let dot: f64 = p
            .params()
            .iter()
            .zip(fc.iter().zip(&fr))
            .map(|(t, (a, b))| t * (a - b))
            .sum();
        assert!((m - dot).abs() < 1e-12);

        let mut doubled = p.clone();
        for t in doubled.params_mut() {
            *t *= 2.0;
        }
        assert!((doubled.policy_margin(1, 0, 2).unwrap() - 2.0 * m).abs() < 1e-12);
    }

    #[test]
    fn tabular_margin_gradient_is_two_hot() {
        let p = tabular(4, 5, 1);
        let g = margin_gradient(&p, 2, 1, 3).unwrap();
        for (i, &v) in g.values().iter().enumerate() {
            if i == 2 * 5 + 1 {
                assert_eq!(v, 1.0);
            } else if i == 2 * 5 + 3 {
                assert_eq!(v, -1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn loglinear_equal_features_zero_gradient() {
        // feature map with phi identical for two responses
        let mut fm = FeatureMap::random(1, 2, 3, 5).unwrap();
        let f0: Vec<f64> = fm.feature(0, 0).to_vec();
        fm.values[3..6].copy_from_slice(&f0);
        let p = LogLinearPolicy::new(vec![0.3, -0.2, 0.9], fm).unwrap();
        let g = margin_gradient(&p, 0, 0, 1).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn margin_gradient_matches_finite_differences() {
        let p = loglinear(4, 6, 8, 9);
        let g = margin_gradient(&p, 2, 4, 1).unwrap();
        let fd = finite_diff_gradient(|q| q.policy_margin(2, 4, 1), &p, 1e-5).unwrap();
        for (a, b) in g.values().iter().zip(fd.values()) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let tp = tabular(3, 4, 13);
        let mut g = vec![0.0; tp.n_params()];
        tp.accumulate_logprob_gradient(1, 2, 1.0, &mut g).unwrap();
        let fd = finite_diff_gradient(|q| q.log_prob(1, 2), &tp, 1e-5).unwrap();
        for (a, b) in g.iter().zip(fd.values()) {
            assert!((a - b).abs() < 1e-8);
        }

        let lp = loglinear(3, 4, 5, 14);
        let mut g = vec![0.0; lp.n_params()];
        lp.accumulate_logprob_gradient(2, 0, 1.0, &mut g).unwrap();
        let fd = finite_diff_gradient(|q| q.log_prob(2, 0), &lp, 1e-5).unwrap();
        for (a, b) in g.iter().zip(fd.values()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_on_constant_and_linear() {
        let p = tabular(2, 3, 21);
        let zero = finite_diff_gradient(|_| Ok(7.5), &p, 1e-5).unwrap();
        assert!(zero.values().iter().all(|&v| v.abs() < 1e-9));

        let coeffs: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let c = coeffs.clone();
        let lin = finite_diff_gradient(
            |q| Ok(q.params().iter().zip(&c).map(|(p, c)| p * c).sum()),
            &p,
            1e-5,
        )
        .unwrap();
        for (got, want) in lin.values().iter().zip(&coeffs) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let p = tabular(1, 2, 3);
        assert!(finite_diff_gradient(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(finite_diff_gradient(|_| Ok(0.0), &p, -1e-5).is_err());
    }

    #[test]
    fn normalization_holds_for_both_classes() {
        let tp = tabular(5, 7, 31);
        let lp = loglinear(5, 7, 9, 32);
        for x in 0..5 {
            let st: f64 = tp
                .prompt_log_probs(x)
                .unwrap()
                .iter()
                .map(|l| l.exp())
                .sum();
            assert!((st - 1.0).abs() < 1e-10);
            let sl: f64 = lp
                .prompt_log_probs(x)
                .unwrap()
                .iter()
                .map(|l| l.exp())
                .sum();
            assert!((sl - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gibbs_zero_reward_is_identity() {
        let r = tabular(3, 4, 41);
        let g = gibbs_optimum(&r, &RewardMatrix::zeros(3, 4), 1.0).unwrap();
        for x in 0..3 {
            for y in 0..4 {
                assert!((g.log_prob(x, y).unwrap() - r.log_prob(x, y).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gibbs_two_response_value() {
        let r = TabularPolicy::uniform(1, 2).unwrap();
        let reward = RewardMatrix::from_values(1, 2, vec![3.0f64.ln(), 0.0]).unwrap();
        let g = gibbs_optimum(&r, &reward, 1.0).unwrap();
        assert!((g.log_prob(0, 0).unwrap().exp() - 0.75).abs() < 1e-12);
        assert!((g.log_prob(0, 1).unwrap().exp() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gibbs_large_tau_approaches_reference() {
        let r = tabular(4, 6, 55);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let reward =
            RewardMatrix::from_values(4, 6, (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap();
        let g = gibbs_optimum(&r, &reward, 1e6).unwrap();
        for x in 0..4 {
            let tv: f64 = (0..6)
                .map(|y| (g.log_prob(x, y).unwrap().exp() - r.log_prob(x, y).unwrap().exp()).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 1e-5, "total variation {tv}");
        }
    }

    #[test]
    fn gibbs_idempotent_under_zero_extra_reward() {
        let r = tabular(3, 5, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let reward =
            RewardMatrix::from_values(3, 5, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
        let once = gibbs_optimum(&r, &reward, 0.7).unwrap();
        let twice = gibbs_optimum(&once, &RewardMatrix::zeros(3, 5), 0.7).unwrap();
        for (a, b) in once.params().iter().zip(twice.params()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gibbs_rejects_bad_tau_and_shape() {
        let r = tabular(2, 3, 70);
        assert!(gibbs_optimum(&r, &RewardMatrix::zeros(2, 3), 0.0).is_err());
        assert!(gibbs_optimum(&r, &RewardMatrix::zeros(2, 3), -1.0).is_err());
        assert!(gibbs_optimum(&r, &RewardMatrix::zeros(3, 2), 1.0).is_err());
    }

    #[test]
    fn vocab_caps_enforced() {
        assert!(TabularPolicy::uniform(65, 4).is_err());
        assert!(TabularPolicy::uniform(4, 65).is_err());
        assert!(TabularPolicy::uniform(0, 4).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_stability() {
        let dir = tempfile::tempdir().unwrap();

        let mut tp = tabular(3, 4, 80);
        tp.push_seed(80);
        let path = dir.path().join("tab.json");
        tp.checkpoint().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        match loaded.clone().into_policy().unwrap() {
            PolicyBox::Tabular(t) => {
                assert_eq!(t.params(), tp.params());
                assert_eq!(t.seed_lineage(), &[80]);
            }
            _ => panic!("wrong class"),
        }
        assert_eq!(loaded.to_json_string(), tp.checkpoint().to_json_string());

        let mut lp = loglinear(3, 4, 5, 81);
        lp.push_seed(81);
        let path = dir.path().join("ll.json");
        lp.checkpoint().save(&path).unwrap();
        match Checkpoint::load(&path).unwrap().into_policy().unwrap() {
            PolicyBox::LogLinear(l) => {
                assert_eq!(l.params(), lp.params());
                assert_eq!(l.features(), lp.features());
            }
            _ => panic!("wrong class"),
        }
    }

    #[test]
    fn greedy_breaks_ties_to_lowest_index() {
        let p = TabularPolicy::new(1, 4, vec![0.0, 2.0, 2.0, -1.0]).unwrap();
        assert_eq!(p.greedy_response(0).unwrap(), 1);
        let u = TabularPolicy::uniform(1, 4).unwrap();
        assert_eq!(u.greedy_response(0).unwrap(), 0);
    }

    #[test]
    fn sampling_tracks_distribution() {
        let p = TabularPolicy::new(1, 2, vec![3.0f64.ln(), 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 20_000;
        let mut count = 0;
        for _ in 0..n {
            if p.sample_response(0, &mut rng).unwrap() == 0 {
                count += 1;
            }
        }
        let freq = count as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
    }
}
