//! Synthetic preference worlds: i.i.d. normal rewards per (prompt,
//! response), a reference policy built as the Gibbs optimum of a perturbed
//! reward, and Bradley-Terry-sampled labeled pairs. The `ref_misalignment`
//! knob tunes how often the reference disagrees with the labels, and a
//! bisection calibrator pins the pessimistic fraction to a target.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::policy::{gibbs_optimum, ParametricPolicy, RewardMatrix, TabularPolicy};

const WORLD_VERSION: u32 = 1;
const DATASET_VERSION: u32 = 1;

/// First 16 hex digits of the SHA-256 of a value's canonical JSON; stamped
/// into every generated file so outputs can be traced back to their config.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialization cannot fail");
    let digest = Sha256::digest(&json);
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// World-generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_prompts: usize,
    pub n_responses: usize,
    /// Scale of the independent noise added to the reward before the
    /// reference policy is derived; 0 means the reference knows the true
    /// reward exactly.
    pub ref_misalignment: f64,
    /// Standard deviation of the i.i.d. true rewards.
    pub reward_std: f64,
    /// Temperature of the Gibbs construction for the reference policy.
    /// Scales reference margins without changing their signs.
    pub gibbs_tau: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(n_prompts: usize, n_responses: usize, ref_misalignment: f64, seed: u64) -> Self {
        Self {
            n_prompts,
            n_responses,
            ref_misalignment,
            reward_std: 1.0,
            gibbs_tau: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 || self.n_prompts > crate::policy::MAX_VOCAB {
            return Err(Error::invalid_param(
                "n_prompts",
                format!(
                    "must be in 1..={}, got {}",
                    crate::policy::MAX_VOCAB,
                    self.n_prompts
                ),
            ));
        }
        if self.n_responses < 2 || self.n_responses > crate::policy::MAX_VOCAB {
            return Err(Error::invalid_param(
                "n_responses",
                format!(
                    "must be in 2..={}, got {}",
                    crate::policy::MAX_VOCAB,
                    self.n_responses
                ),
            ));
        }
        if !self.ref_misalignment.is_finite() || self.ref_misalignment < 0.0 {
            return Err(Error::invalid_param(
                "ref_misalignment",
                format!("must be finite and >= 0, got {}", self.ref_misalignment),
            ));
        }
        if !self.reward_std.is_finite() || self.reward_std <= 0.0 {
            return Err(Error::invalid_param(
                "reward_std",
                format!("must be > 0, got {}", self.reward_std),
            ));
        }
        if !self.gibbs_tau.is_finite() || self.gibbs_tau <= 0.0 {
            return Err(Error::invalid_param(
                "gibbs_tau",
                format!("must be > 0, got {}", self.gibbs_tau),
            ));
        }
        Ok(())
    }
}

/// Prompts, candidate responses, the judge's true reward, and the frozen
/// reference policy. Regenerating with the same config is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    config: WorldConfig,
    true_reward: RewardMatrix,
    ref_policy: TabularPolicy,
}

impl SyntheticWorld {
    /// Draw rewards and noise, then derive
    /// `ref = gibbs(uniform, reward + misalignment*noise, tau)`.
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_prompts * config.n_responses;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let reward_values: Vec<f64> = (0..n)
            .map(|_| config.reward_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let perturbed: Vec<f64> = reward_values
            .iter()
            .zip(&noise)
            .map(|(r, z)| r + config.ref_misalignment * z)
            .collect();
        let true_reward =
            RewardMatrix::from_values(config.n_prompts, config.n_responses, reward_values)?;
        let perturbed = RewardMatrix::from_values(config.n_prompts, config.n_responses, perturbed)?;
        let uniform = TabularPolicy::uniform(config.n_prompts, config.n_responses)?;
        let mut ref_policy = gibbs_optimum(&uniform, &perturbed, config.gibbs_tau)?;
        ref_policy.push_seed(config.seed);
        Ok(Self {
            config: config.clone(),
            true_reward,
            ref_policy,
        })
    }

    /// Assemble a world from explicit parts (loaded files, hand-built test
    /// worlds).
    pub fn from_parts(
        config: WorldConfig,
        true_reward: RewardMatrix,
        ref_policy: TabularPolicy,
    ) -> Result<Self> {
        config.validate()?;
        if true_reward.n_prompts() != config.n_prompts
            || true_reward.n_responses() != config.n_responses
            || ref_policy.n_prompts() != config.n_prompts
            || ref_policy.n_responses() != config.n_responses
        {
            return Err(Error::InvalidArgument(
                "world parts disagree on prompt/response counts".into(),
            ));
        }
        Ok(Self {
            config,
            true_reward,
            ref_policy,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn true_reward(&self) -> &RewardMatrix {
        &self.true_reward
    }

    pub fn ref_policy(&self) -> &TabularPolicy {
        &self.ref_policy
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WorldFile {
            version: WORLD_VERSION,
            kind: "synthetic_world".into(),
            config_hash: self.config_hash(),
            config: self.config.clone(),
            true_reward: self.true_reward.clone(),
            ref_checkpoint: self.ref_policy.checkpoint(),
        };
        std::fs::write(path, serde_json::to_string(&file)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: WorldFile = serde_json::from_str(text.trim_end())?;
        if file.version != WORLD_VERSION {
            return Err(Error::Format(format!(
                "unsupported world version {}",
                file.version
            )));
        }
        let ref_policy = match file.ref_checkpoint.into_policy()? {
            crate::policy::PolicyBox::Tabular(t) => t,
            _ => return Err(Error::Format("world reference must be tabular".into())),
        };
        Self::from_parts(file.config, file.true_reward, ref_policy)
    }
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    version: u32,
    kind: String,
    config_hash: String,
    config: WorldConfig,
    true_reward: RewardMatrix,
    ref_checkpoint: crate::policy::Checkpoint,
}

/// Spec-signature convenience over [`SyntheticWorld::generate`] with the
/// default reward scale and Gibbs temperature.
pub fn build_world(
    n_prompts: usize,
    n_responses: usize,
    ref_misalignment: f64,
    seed: u64,
) -> Result<SyntheticWorld> {
    SyntheticWorld::generate(&WorldConfig::new(
        n_prompts,
        n_responses,
        ref_misalignment,
        seed,
    ))
}

/// One labeled pair; `ref_margin` caches the frozen reference's margin for
/// (chosen, rejected).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt_id: usize,
    pub chosen_id: usize,
    pub rejected_id: usize,
    pub ref_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// Labeled preference records plus the provenance stamped into the file
/// header (config hash and sampling seed).
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
    split: Split,
    config_hash: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    kind: String,
    config_hash: String,
    seed: u64,
    split: Split,
    n_records: usize,
}

impl PreferenceDataset {
    pub fn from_records(
        records: Vec<PreferenceRecord>,
        split: Split,
        config_hash: String,
        seed: u64,
    ) -> Self {
        Self {
            records,
            split,
            config_hash,
            seed,
        }
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Line-delimited records under a header line carrying the config hash
    /// and seed. Byte-stable for identical inputs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = DatasetHeader {
            version: DATASET_VERSION,
            kind: "preference_dataset".into(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            split: self.split,
            n_records: self.records.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for rec in &self.records {
            writeln!(w, "{}", serde_json::to_string(rec)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("dataset file is empty".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                header.version
            )));
        }
        let mut records = Vec::with_capacity(header.n_records);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        if records.len() != header.n_records {
            return Err(Error::Format(format!(
                "dataset header promises {} records, found {}",
                header.n_records,
                records.len()
            )));
        }
        Ok(Self {
            records,
            split: header.split,
            config_hash: header.config_hash,
            seed: header.seed,
        })
    }

    /// Deterministic 90/10-style split by record index after a seeded
    /// shuffle.
    pub fn split_train_eval(
        &self,
        eval_fraction: f64,
        seed: u64,
    ) -> Result<(PreferenceDataset, PreferenceDataset)> {
        if !(0.0..1.0).contains(&eval_fraction) || eval_fraction <= 0.0 {
            return Err(Error::invalid_param(
                "eval_fraction",
                format!("must be in (0, 1), got {eval_fraction}"),
            ));
        }
        if self.records.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 records to split".into(),
            ));
        }
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_eval = ((self.records.len() as f64 * eval_fraction) as usize).max(1);
        let n_train = self.records.len() - n_eval;
        let train: Vec<PreferenceRecord> =
            order[..n_train].iter().map(|&i| self.records[i]).collect();
        let eval: Vec<PreferenceRecord> =
            order[n_train..].iter().map(|&i| self.records[i]).collect();
        Ok((
            PreferenceDataset::from_records(
                train,
                Split::Train,
                self.config_hash.clone(),
                self.seed,
            ),
            PreferenceDataset::from_records(eval, Split::Eval, self.config_hash.clone(), self.seed),
        ))
    }
}

#[derive(Serialize)]
struct SamplingStamp<'a> {
    world: &'a WorldConfig,
    n_pairs: usize,
    label_noise: f64,
    seed: u64,
}

/// Uniformly sample `(prompt, a, b)` triples with `a != b`, order each by a
/// Bradley-Terry draw under the true reward
/// (`P(a beats b) = sigma(r_a - r_b)`), then flip the label independently
/// with probability `label_noise`. Reference margins are cached per record.
pub fn sample_preferences(
    world: &SyntheticWorld,
    n_pairs: usize,
    label_noise: f64,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n_pairs == 0 {
        return Err(Error::invalid_param("n_pairs", "must be >= 1"));
    }
    if !(0.0..1.0).contains(&label_noise) {
        return Err(Error::invalid_param(
            "label_noise",
            format!("must be in [0, 1), got {label_noise}"),
        ));
    }
    let np = world.config.n_prompts;
    let nr = world.config.n_responses;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_pairs);
    while records.len() < n_pairs {
        let x = rng.gen_range(0..np);
        let a = rng.gen_range(0..nr);
        let b = rng.gen_range(0..nr);
        if a == b {
            continue;
        }
        let gap = world.true_reward.get(x, a) - world.true_reward.get(x, b);
        let bt: f64 = rng.gen();
        let (mut chosen, mut rejected) = if bt < sigmoid(gap) { (a, b) } else { (b, a) };
        let flip: f64 = rng.gen();
        if flip < label_noise {
            std::mem::swap(&mut chosen, &mut rejected);
        }
        let ref_margin = world.ref_policy.policy_margin(x, chosen, rejected)?;
        records.push(PreferenceRecord {
            prompt_id: x,
            chosen_id: chosen,
            rejected_id: rejected,
            ref_margin,
        });
    }
    let stamp = SamplingStamp {
        world: &world.config,
        n_pairs,
        label_noise,
        seed,
    };
    Ok(PreferenceDataset::from_records(
        records,
        Split::Train,
        config_hash(&stamp),
        seed,
    ))
}

/// Fraction of records on which the reference prefers the rejected
/// response (margin recomputed from `ref_policy`, not the cache).
pub fn pessimism_fraction(dataset: &PreferenceDataset, ref_policy: &TabularPolicy) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut pessimistic = 0usize;
    for rec in dataset.records() {
        let m = ref_policy.policy_margin(rec.prompt_id, rec.chosen_id, rec.rejected_id)?;
        if m < 0.0 {
            pessimistic += 1;
        }
    }
    Ok(pessimistic as f64 / dataset.len() as f64)
}

/// Size of the probe dataset each calibration step measures on.
pub const CALIBRATION_PROBE_PAIRS: usize = 10_000;
const CALIBRATION_MAX_ITERS: usize = 40;
const CALIBRATION_MISALIGNMENT_RANGE: (f64, f64) = (0.0, 100.0);

/// Bisection over `ref_misalignment` until a 10k-pair probe measures a
/// pessimistic fraction within `tolerance` of `target`.
///
/// Labels are Bradley-Terry draws, so the label itself disagrees with the
/// reward ordering on a sizable fraction of pairs even with a perfectly
/// informed reference; the achievable range starts near 0.28 with unit
/// rewards and tops out just below 0.5. Targets outside it fail with the
/// best fraction achieved.
pub fn calibrate_pessimism(
    base: &WorldConfig,
    target: f64,
    tolerance: f64,
    seed: u64,
) -> Result<SyntheticWorld> {
    if !(0.0..1.0).contains(&target) || target <= 0.0 {
        return Err(Error::invalid_param(
            "target",
            format!("must be in (0, 1), got {target}"),
        ));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid_param("tolerance", "must be > 0"));
    }
    let probe = |misalignment: f64| -> Result<(SyntheticWorld, f64)> {
        let mut cfg = base.clone();
        cfg.ref_misalignment = misalignment;
        let world = SyntheticWorld::generate(&cfg)?;
        let ds = sample_preferences(&world, CALIBRATION_PROBE_PAIRS, 0.0, seed)?;
        let frac = pessimism_fraction(&ds, world.ref_policy())?;
        Ok((world, frac))
    };

    // The fraction rises monotonically (in expectation) toward 1/2, so a
    // whole interval of misalignments can satisfy the tolerance. Bisect
    // toward the low edge of the acceptance band and return the smallest
    // probed misalignment inside it: the least-distorted world that meets
    // the target.
    let aim = (target - 0.5 * tolerance).max(f64::MIN_POSITIVE);
    let (mut lo, mut hi) = CALIBRATION_MISALIGNMENT_RANGE;
    let mut probes: Vec<(f64, f64)> = Vec::with_capacity(CALIBRATION_MAX_ITERS);

    let (w, f_lo) = probe(lo)?;
    if (f_lo - target).abs() <= tolerance {
        return Ok(w);
    }
    probes.push((lo, f_lo));
    let (_, f_hi) = probe(hi)?;
    probes.push((hi, f_hi));

    for _ in 0..CALIBRATION_MAX_ITERS - 2 {
        let mid = 0.5 * (lo + hi);
        let (_, f_mid) = probe(mid)?;
        probes.push((mid, f_mid));
        if f_mid < aim {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-3 {
            break;
        }
    }

    let winner = probes
        .iter()
        .filter(|(_, f)| (f - target).abs() <= tolerance)
        .min_by(|a, b| a.0.partial_cmp(&b.0).expect("misalignments are finite"));
    match winner {
        Some(&(m, _)) => probe(m).map(|(world, _)| world),
        None => {
            let &(best_m, best_f) = probes
                .iter()
                .min_by(|a, b| {
                    (a.1 - target)
                        .abs()
                        .partial_cmp(&(b.1 - target).abs())
                        .expect("fractions are finite")
                })
                .expect("at least the endpoints were probed");
            Err(Error::Calibration {
                target,
                best: best_f,
                misalignment: best_m,
            })
        }
    }
}

/// Every ordered response pair of every prompt, weighted by its
/// Bradley-Terry probability under the true reward. The exhaustive
/// full-support population for closed-form optimum checks.
pub fn exhaustive_bt_pairs(world: &SyntheticWorld) -> Result<Vec<(PreferenceRecord, f64)>> {
    let np = world.config.n_prompts;
    let nr = world.config.n_responses;
    let mut out = Vec::with_capacity(np * nr * (nr - 1));
    for x in 0..np {
        for a in 0..nr {
            for b in 0..nr {
                if a == b {
                    continue;
                }
                let gap = world.true_reward.get(x, a) - world.true_reward.get(x, b);
                let weight = sigmoid(gap);
                let ref_margin = world.ref_policy.policy_margin(x, a, b)?;
                out.push((
                    PreferenceRecord {
                        prompt_id: x,
                        chosen_id: a,
                        rejected_id: b,
                        ref_margin,
                    },
                    weight,
                ));
            }
        }
    }
    Ok(out)
}
