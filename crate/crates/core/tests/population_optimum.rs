//! Closed-form optimum checks: fitting the population DPO loss over
//! exhaustive Bradley-Terry-weighted pairs must land every margin on
//! `delta_theta - delta_ref = (r+ - r-) / beta`, the Gibbs-consistency
//! identity the objective inherits from KL-regularized reward
//! maximization.

use hypo_core::datagen::{exhaustive_bt_pairs, SyntheticWorld, WorldConfig};
use hypo_core::math::HyperParams;
use hypo_core::policy::ParametricPolicy;
use hypo_core::trainer::fit_population_dpo;

fn max_identity_gap(world: &SyntheticWorld, beta: f64, steps: usize, lr: f64) -> f64 {
    let hp = HyperParams::new(beta).unwrap();
    let pairs = exhaustive_bt_pairs(world).unwrap();
    let init = world.ref_policy().clone();
    let fitted = fit_population_dpo(&init, &pairs, &hp, steps, lr).unwrap();
    let mut worst: f64 = 0.0;
    for (rec, _) in &pairs {
        let dt = fitted
            .policy_margin(rec.prompt_id, rec.chosen_id, rec.rejected_id)
            .unwrap();
        let r_gap = world.true_reward().get(rec.prompt_id, rec.chosen_id)
            - world.true_reward().get(rec.prompt_id, rec.rejected_id);
        let target = rec.ref_margin + r_gap / beta;
        worst = worst.max((dt - target).abs());
    }
    worst
}

#[test]
fn population_dpo_converges_to_gibbs_identity() {
    let world = SyntheticWorld::generate(&WorldConfig::new(3, 4, 1.5, 314)).unwrap();
    let gap = max_identity_gap(&world, 1.0, 4000, 0.05);
    assert!(gap < 1e-4, "worst margin gap {gap}");
}

#[test]
fn population_identity_scales_with_beta() {
    let world = SyntheticWorld::generate(&WorldConfig::new(2, 4, 0.5, 315)).unwrap();
    let gap = max_identity_gap(&world, 0.5, 4000, 0.05);
    assert!(gap < 1e-4, "worst margin gap {gap}");
}
