//! Inference-aligned evaluation metrics: the absolute agreement rate, the
//! mean policy margin on the pessimistic subset, reference-margin summary
//! statistics, and a pairwise win matrix judged by the synthetic true
//! reward (an analogue of a judged win-rate table, not a reproduction).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{PreferenceDataset, SyntheticWorld};
use crate::error::{Error, Result};
use crate::exec;
use crate::policy::ParametricPolicy;

/// Fraction of evaluation pairs whose absolute likelihood ordering matches
/// the label: `Pr[delta_theta > 0]`. Ties count as disagreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub step: u64,
    pub agree_rate: f64,
    pub n_pairs: usize,
}

/// Mean policy margin over the pairs whose cached reference margin is
/// negative. `mean_margin` is absent when the subset is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PessimisticMarginReport {
    pub step: u64,
    pub mean_margin: Option<f64>,
    pub subset_size: usize,
}

/// Summary statistics of the reference margin over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefMarginStats {
    pub mean: f64,
    /// Lower median: for even counts, the lower of the two central order
    /// statistics.
    pub median: f64,
    pub fraction_pessimistic: f64,
}

/// Pairwise win rates in percent; diagonal entries are absent. Under the
/// greedy mode with tie-splitting, `entries[i][j] + entries[j][i] = 100`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub labels: Vec<String>,
    pub entries: Vec<Vec<Option<f64>>>,
}

/// Response selection for the win matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeMode {
    /// Each policy answers with its highest-probability response;
    /// deterministic given the prompt draw.
    Greedy,
    /// Each policy samples a response from its distribution.
    Sampled,
}

/// `Pr[delta_theta > 0]` over the evaluation set, by exact count.
pub fn agreement_rate<P: ParametricPolicy + Sync>(
    policy: &P,
    eval_set: &PreferenceDataset,
    step: u64,
) -> Result<AgreementReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let margins = eval_margins(policy, eval_set)?;
    let agree = margins.iter().filter(|&&m| m > 0.0).count();
    Ok(AgreementReport {
        step,
        agree_rate: agree as f64 / margins.len() as f64,
        n_pairs: margins.len(),
    })
}

/// Mean policy margin over records with cached `delta_ref < 0`. The subset
/// depends only on the frozen reference, never on the trained policy; an
/// empty subset reports an absent mean rather than an error.
pub fn pessimistic_margin<P: ParametricPolicy + Sync>(
    policy: &P,
    eval_set: &PreferenceDataset,
    step: u64,
) -> Result<PessimisticMarginReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let margins = eval_margins(policy, eval_set)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (rec, &m) in eval_set.records().iter().zip(&margins) {
        if rec.ref_margin < 0.0 {
            sum += m;
            count += 1;
        }
    }
    Ok(PessimisticMarginReport {
        step,
        mean_margin: (count > 0).then(|| sum / count as f64),
        subset_size: count,
    })
}

fn eval_margins<P: ParametricPolicy + Sync>(
    policy: &P,
    eval_set: &PreferenceDataset,
) -> Result<Vec<f64>> {
    let results = exec::map_collect(eval_set.records(), |rec| {
        policy.policy_margin(rec.prompt_id, rec.chosen_id, rec.rejected_id)
    });
    results.into_iter().collect()
}

/// Exact mean, lower median, and pessimistic fraction of the reference
/// margin, recomputed from `ref_policy` over the dataset's records.
pub fn ref_margin_stats<P: ParametricPolicy + Sync>(
    ref_policy: &P,
    dataset: &PreferenceDataset,
) -> Result<RefMarginStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut margins = eval_margins(ref_policy, dataset)?;
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let pessimistic = margins.iter().filter(|&&m| m < 0.0).count();
    margins.sort_by(|a, b| a.partial_cmp(b).expect("margins are finite"));
    let median = margins[(margins.len() - 1) / 2];
    Ok(RefMarginStats {
        mean,
        median,
        fraction_pessimistic: pessimistic as f64 / margins.len() as f64,
    })
}

/// Pairwise win matrix: every policy answers `n_prompts_eval` prompts drawn
/// from the world, the higher true reward wins, ties split 50/50.
pub fn win_matrix(
    policies: &[(String, &dyn ParametricPolicy)],
    world: &SyntheticWorld,
    n_prompts_eval: usize,
    mode: JudgeMode,
    seed: u64,
) -> Result<WinMatrix> {
    if policies.len() < 2 {
        return Err(Error::InvalidArgument(
            "win matrix needs at least 2 policies".into(),
        ));
    }
    if n_prompts_eval == 0 {
        return Err(Error::invalid_param("n_prompts_eval", "must be >= 1"));
    }
    for (name, p) in policies {
        if p.n_prompts() != world.config().n_prompts
            || p.n_responses() != world.config().n_responses
        {
            return Err(Error::InvalidArgument(format!(
                "policy {name:?} does not match the world's vocabularies"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts: Vec<usize> = (0..n_prompts_eval)
        .map(|_| rng.gen_range(0..world.config().n_prompts))
        .collect();

    // responses[k][t]: policy k's answer to the t-th drawn prompt
    let mut responses: Vec<Vec<usize>> = Vec::with_capacity(policies.len());
    for (_, policy) in policies {
        let answers: Vec<usize> = match mode {
            JudgeMode::Greedy => prompts
                .iter()
                .map(|&x| policy.greedy_response(x))
                .collect::<Result<_>>()?,
            JudgeMode::Sampled => prompts
                .iter()
                .map(|&x| policy.sample_response(x, &mut rng))
                .collect::<Result<_>>()?,
        };
        responses.push(answers);
    }

    let n = policies.len();
    let mut entries = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut score = 0.0;
            for (t, &x) in prompts.iter().enumerate() {
                let ri = world.true_reward().get(x, responses[i][t]);
                let rj = world.true_reward().get(x, responses[j][t]);
                if ri > rj {
                    score += 1.0;
                } else if ri == rj {
                    score += 0.5;
                }
            }
            entries[i][j] = Some(100.0 * score / prompts.len() as f64);
        }
    }
    Ok(WinMatrix {
        labels: policies.iter().map(|(name, _)| name.clone()).collect(),
        entries,
    })
}
