//! Subcommand implementations over the core library: file layout,
//! summaries, and wiring. Every command is idempotent given identical
//! inputs and seeds.
//!
//! Output layout under `output_dir`:
//!   data/world.json, data/dataset_train.jsonl, data/dataset_eval.jsonl
//!   runs/<run_name>/{config.toml, meta.json, runlog.jsonl,
//!                    checkpoint_epoch_NNN.json}
//!   compare/{curves.csv, win_matrix.csv, summary.csv}

use std::path::{Path, PathBuf};

use serde::Serialize;

use hypo_core::datagen::{
    calibrate_pessimism, pessimism_fraction, sample_preferences, PreferenceDataset, SyntheticWorld,
};
use hypo_core::export::{
    export_curves, export_heatmap_csv, export_margin_histogram, weight_heatmap, GridSpec,
    CURVE_METRICS,
};
use hypo_core::metrics::{ref_margin_stats, win_matrix, JudgeMode, WinMatrix};
use hypo_core::policy::{Checkpoint, FeatureMap, LogLinearPolicy, ParametricPolicy, PolicyBox};
use hypo_core::trainer::{train as train_policy, RunLog, TrainOutput};

use crate::config::{
    check_compare_compatible, resolve_objective, ExperimentConfig, ObjectiveSection, PolicyClass,
};
use crate::{CliError, HeatmapArgs, RefstatsArgs};

fn core(err: hypo_core::Error) -> CliError {
    CliError::from_core(err)
}

fn io_ctx(what: &str, path: &Path, err: std::io::Error) -> CliError {
    CliError::Io(format!("{what} {}: {err}", path.display()))
}

struct DataPaths {
    world: PathBuf,
    train: PathBuf,
    eval: PathBuf,
}

fn data_paths(cfg: &ExperimentConfig) -> DataPaths {
    let dir = cfg.output_dir.join("data");
    DataPaths {
        world: dir.join("world.json"),
        train: dir.join("dataset_train.jsonl"),
        eval: dir.join("dataset_eval.jsonl"),
    }
}

fn generate_data(
    cfg: &ExperimentConfig,
) -> Result<(SyntheticWorld, PreferenceDataset, PreferenceDataset), CliError> {
    let world = match cfg.world.target_pessimism {
        Some(target) => calibrate_pessimism(
            &cfg.world_config(),
            target,
            cfg.world.pessimism_tolerance,
            cfg.sampling_seed(),
        )
        .map_err(core)?,
        None => SyntheticWorld::generate(&cfg.world_config()).map_err(core)?,
    };
    let full = sample_preferences(
        &world,
        cfg.world.n_pairs,
        cfg.world.label_noise,
        cfg.sampling_seed(),
    )
    .map_err(core)?;
    let (train_ds, eval_ds) = full
        .split_train_eval(cfg.world.eval_fraction, cfg.split_seed())
        .map_err(core)?;
    Ok((world, train_ds, eval_ds))
}

fn write_data(
    cfg: &ExperimentConfig,
    world: &SyntheticWorld,
    train_ds: &PreferenceDataset,
    eval_ds: &PreferenceDataset,
) -> Result<DataPaths, CliError> {
    let paths = data_paths(cfg);
    let dir = paths.world.parent().expect("data dir has a parent");
    std::fs::create_dir_all(dir).map_err(|e| io_ctx("cannot create", dir, e))?;
    world.save(&paths.world).map_err(core)?;
    train_ds.save(&paths.train).map_err(core)?;
    eval_ds.save(&paths.eval).map_err(core)?;
    Ok(paths)
}

pub fn datagen(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (world, train_ds, eval_ds) = generate_data(cfg)?;
    let paths = write_data(cfg, &world, &train_ds, &eval_ds)?;

    let full_records: Vec<_> = train_ds
        .records()
        .iter()
        .chain(eval_ds.records())
        .copied()
        .collect();
    let full = PreferenceDataset::from_records(
        full_records,
        hypo_core::datagen::Split::Train,
        train_ds.config_hash().to_string(),
        train_ds.seed(),
    );
    let frac = pessimism_fraction(&full, world.ref_policy()).map_err(core)?;
    println!(
        "world config_hash={} seed={} misalignment={:.6} pessimism_fraction={:.4} ({} pairs)",
        world.config_hash(),
        cfg.seed,
        world.config().ref_misalignment,
        frac,
        full.len(),
    );
    println!(
        "wrote {}\nwrote {} ({} records)\nwrote {} ({} records)",
        paths.world.display(),
        paths.train.display(),
        train_ds.len(),
        paths.eval.display(),
        eval_ds.len(),
    );
    Ok(())
}

fn world_matches_config(cfg: &ExperimentConfig, world: &SyntheticWorld) -> bool {
    let mut expected = cfg.world_config();
    if cfg.world.target_pessimism.is_some() {
        // calibration replaces the misalignment knob
        expected.ref_misalignment = world.config().ref_misalignment;
    }
    *world.config() == expected
}

fn load_data(
    cfg: &ExperimentConfig,
) -> Result<(SyntheticWorld, PreferenceDataset, PreferenceDataset), CliError> {
    let paths = data_paths(cfg);
    let world = SyntheticWorld::load(&paths.world).map_err(core)?;
    let train_ds = PreferenceDataset::load(&paths.train).map_err(core)?;
    let eval_ds = PreferenceDataset::load(&paths.eval).map_err(core)?;
    if !world_matches_config(cfg, &world) {
        return Err(CliError::Config(format!(
            "world file {} was generated from a different [world] config or seed; re-run datagen",
            paths.world.display()
        )));
    }
    if train_ds.seed() != cfg.sampling_seed() || train_ds.len() + eval_ds.len() != cfg.world.n_pairs
    {
        return Err(CliError::Config(
            "dataset files do not match the config's sampling parameters; re-run datagen".into(),
        ));
    }
    Ok((world, train_ds, eval_ds))
}

fn init_policy(cfg: &ExperimentConfig, world: &SyntheticWorld) -> Result<PolicyBox, CliError> {
    match cfg.train.policy {
        // the trainable policy starts at the frozen reference, mirroring
        // alignment from an SFT checkpoint
        PolicyClass::Tabular => Ok(PolicyBox::Tabular(world.ref_policy().clone())),
        PolicyClass::Loglinear => {
            let features = FeatureMap::random(
                world.config().n_prompts,
                world.config().n_responses,
                cfg.train.feature_dim,
                cfg.feature_seed(),
            )
            .map_err(core)?;
            Ok(PolicyBox::LogLinear(LogLinearPolicy::zeros(features)))
        }
    }
}

struct LegResult {
    policy: PolicyBox,
    run_log: RunLog,
    checkpoints: Vec<Checkpoint>,
}

fn run_leg(
    cfg: &ExperimentConfig,
    world: &SyntheticWorld,
    train_ds: &PreferenceDataset,
    eval_ds: &PreferenceDataset,
) -> Result<LegResult, CliError> {
    let train_cfg = cfg.train_config()?;
    match init_policy(cfg, world)? {
        PolicyBox::Tabular(init) => {
            let TrainOutput {
                policy,
                run_log,
                epoch_checkpoints,
            } = train_policy(&init, world.ref_policy(), train_ds, eval_ds, &train_cfg)
                .map_err(core)?;
            Ok(LegResult {
                policy: PolicyBox::Tabular(policy),
                run_log,
                checkpoints: epoch_checkpoints,
            })
        }
        PolicyBox::LogLinear(init) => {
            let TrainOutput {
                policy,
                run_log,
                epoch_checkpoints,
            } = train_policy(&init, world.ref_policy(), train_ds, eval_ds, &train_cfg)
                .map_err(core)?;
            Ok(LegResult {
                policy: PolicyBox::LogLinear(policy),
                run_log,
                checkpoints: epoch_checkpoints,
            })
        }
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: u32,
    kind: &'a str,
    config_hash: String,
    seed: u64,
    objective: String,
    policy_class: &'a str,
    n_train: usize,
    n_eval: usize,
}

fn write_run_dir(
    cfg: &ExperimentConfig,
    run_name: &str,
    leg: &LegResult,
    n_train: usize,
    n_eval: usize,
) -> Result<PathBuf, CliError> {
    let run_dir = cfg.output_dir.join("runs").join(run_name);
    std::fs::create_dir_all(&run_dir).map_err(|e| io_ctx("cannot create", &run_dir, e))?;

    std::fs::write(run_dir.join("config.toml"), cfg.to_toml_string())
        .map_err(|e| io_ctx("cannot write", &run_dir.join("config.toml"), e))?;

    let meta = RunMeta {
        version: 1,
        kind: "run_meta",
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        objective: cfg.resolved_objective()?.kind.to_string(),
        policy_class: leg.policy.as_dyn().class_tag(),
        n_train,
        n_eval,
    };
    std::fs::write(
        run_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serialization cannot fail") + "\n",
    )
    .map_err(|e| io_ctx("cannot write", &run_dir.join("meta.json"), e))?;

    leg.run_log
        .save(&run_dir.join("runlog.jsonl"))
        .map_err(core)?;
    for (i, ck) in leg.checkpoints.iter().enumerate() {
        let path = run_dir.join(format!("checkpoint_epoch_{:03}.json", i + 1));
        ck.save(&path).map_err(core)?;
    }
    Ok(run_dir)
}

fn final_summary_line(run_log: &RunLog) -> String {
    let last = run_log
        .entries()
        .last()
        .expect("training logs at least one point");
    let pess = last
        .pessimistic_margin
        .map(|m| format!("{m:.4}"))
        .unwrap_or_else(|| "n/a".into());
    format!(
        "step={} train_loss={:.6} agreement_rate={:.4} pessimistic_margin={} (subset {})",
        last.step, last.train_loss, last.agreement_rate, pess, last.pessimistic_subset_size
    )
}

pub fn train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (world, train_ds, eval_ds) = load_data(cfg)?;
    let leg = run_leg(cfg, &world, &train_ds, &eval_ds)?;
    let run_name = cfg.run_name()?;
    let run_dir = write_run_dir(cfg, &run_name, &leg, train_ds.len(), eval_ds.len())?;
    println!("run {} -> {}", run_name, run_dir.display());
    println!("final: {}", final_summary_line(&leg.run_log));
    Ok(())
}

fn write_win_matrix_csv(wm: &WinMatrix, path: &Path) -> Result<(), CliError> {
    let mut text = String::new();
    for label in &wm.labels {
        text.push(',');
        text.push_str(label);
    }
    text.push('\n');
    for (i, label) in wm.labels.iter().enumerate() {
        text.push_str(label);
        for j in 0..wm.labels.len() {
            text.push(',');
            if let Some(v) = wm.entries[i][j] {
                text.push_str(&format!("{v:.4}"));
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_ctx("cannot write", path, e))?;
    Ok(())
}

pub fn compare(configs: &[ExperimentConfig]) -> Result<(), CliError> {
    check_compare_compatible(configs)?;
    let base = &configs[0];

    // generate shared data on demand; regeneration is bit-deterministic so
    // an existing directory and a fresh one agree
    let paths = data_paths(base);
    let (world, train_ds, eval_ds) = if paths.world.exists() {
        load_data(base)?
    } else {
        let tuple = generate_data(base)?;
        write_data(base, &tuple.0, &tuple.1, &tuple.2)?;
        tuple
    };

    let mut labels: Vec<String> = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        labels.push(format!("leg{}_{}", i + 1, cfg.resolved_objective()?.kind));
    }

    let mut legs = Vec::with_capacity(configs.len());
    for (cfg, label) in configs.iter().zip(&labels) {
        let mut leg = run_leg(cfg, &world, &train_ds, &eval_ds)?;
        leg.run_log = leg.run_log.renamed(label.clone());
        write_run_dir(cfg, label, &leg, train_ds.len(), eval_ds.len())?;
        legs.push(leg);
    }

    let compare_dir = base.output_dir.join("compare");
    std::fs::create_dir_all(&compare_dir).map_err(|e| io_ctx("cannot create", &compare_dir, e))?;

    let logs: Vec<&RunLog> = legs.iter().map(|l| &l.run_log).collect();
    let curves_path = compare_dir.join("curves.csv");
    export_curves(&logs, CURVE_METRICS, &curves_path).map_err(core)?;

    let init = init_policy(base, &world)?;
    let mut wm_policies: Vec<(String, &dyn ParametricPolicy)> =
        vec![("init".into(), init.as_dyn())];
    for (label, leg) in labels.iter().zip(&legs) {
        wm_policies.push((label.clone(), leg.policy.as_dyn()));
    }
    let wm = win_matrix(
        &wm_policies,
        &world,
        1000,
        JudgeMode::Greedy,
        base.win_matrix_seed(),
    )
    .map_err(core)?;
    let wm_path = compare_dir.join("win_matrix.csv");
    write_win_matrix_csv(&wm, &wm_path)?;

    let mut summary = String::from(
        "run_name,final_step,final_train_loss,final_agreement_rate,final_pessimistic_margin\n",
    );
    println!(
        "comparison on world {} ({} train / {} eval pairs):",
        world.config_hash(),
        train_ds.len(),
        eval_ds.len()
    );
    for (label, leg) in labels.iter().zip(&legs) {
        let last = leg.run_log.entries().last().expect("non-empty log");
        let pess = last
            .pessimistic_margin
            .map(|m| format!("{m:.9e}"))
            .unwrap_or_default();
        summary.push_str(&format!(
            "{label},{},{:.9e},{:.9e},{pess}\n",
            last.step, last.train_loss, last.agreement_rate
        ));
        println!("  {label}: {}", final_summary_line(&leg.run_log));
    }
    let summary_path = compare_dir.join("summary.csv");
    std::fs::write(&summary_path, summary).map_err(|e| io_ctx("cannot write", &summary_path, e))?;

    println!(
        "wrote {}\nwrote {}\nwrote {}",
        curves_path.display(),
        wm_path.display(),
        summary_path.display()
    );
    Ok(())
}

pub fn heatmap(args: &HeatmapArgs, out: Option<&Path>) -> Result<(), CliError> {
    let section = ObjectiveSection {
        kind: args.objective.clone(),
        beta: args.beta,
        gamma: args.gamma,
        alpha: args.alpha,
        hypo_tau: args.tau,
        h: args.home_advantage,
        lambda_sft: args.lambda_sft,
    };
    let resolved = resolve_objective(&section)?;
    let grid = GridSpec::new(
        (args.theta_min, args.theta_max, args.theta_steps),
        (args.ref_min, args.ref_max, args.ref_steps),
    )
    .map_err(core)?;
    let matrix = weight_heatmap(resolved.kind, &resolved.hp, &grid).map_err(core)?;
    let path = out.unwrap_or_else(|| Path::new("heatmap.csv"));
    export_heatmap_csv(&matrix, &grid, path).map_err(core)?;
    println!(
        "wrote {} ({}x{} cells plus axis headers, objective {})",
        path.display(),
        args.theta_steps,
        args.ref_steps,
        resolved.kind
    );
    Ok(())
}

pub fn refstats(args: &RefstatsArgs, out: Option<&Path>) -> Result<(), CliError> {
    let world = SyntheticWorld::load(&args.world).map_err(core)?;
    let dataset = PreferenceDataset::load(&args.dataset).map_err(core)?;
    let path = out.unwrap_or_else(|| Path::new("refstats.csv"));
    export_margin_histogram(world.ref_policy(), &dataset, args.bins, path).map_err(core)?;
    let stats = ref_margin_stats(world.ref_policy(), &dataset).map_err(core)?;
    println!(
        "wrote {} ({} records, {} bins): mean={:.4} median={:.4} fraction_pessimistic={:.4}",
        path.display(),
        dataset.len(),
        args.bins,
        stats.mean,
        stats.median,
        stats.fraction_pessimistic
    );
    Ok(())
}
