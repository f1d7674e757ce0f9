//! Plain-data exports of the diagnostic surfaces: gradient-weight heatmap
//! grids over the (policy margin, reference margin) plane, long-format
//! training curves, and reference-margin histograms. Everything is CSV so
//! any plotting tool can render the figures; files are byte-stable for
//! identical inputs.

use std::io::Write;
use std::path::Path;

use crate::datagen::PreferenceDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::math::HyperParams;
use crate::metrics::ref_margin_stats;
use crate::objectives::{evaluate, ObjectiveKind};
use crate::policy::ParametricPolicy;
use crate::trainer::{RunLog, RunLogEntry};
use crate::MarginPair;

/// Inclusive evaluation grid over the margin plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub theta_steps: usize,
    pub ref_lo: f64,
    pub ref_hi: f64,
    pub ref_steps: usize,
}

impl GridSpec {
    pub fn new(theta: (f64, f64, usize), reference: (f64, f64, usize)) -> Result<Self> {
        let spec = Self {
            theta_lo: theta.0,
            theta_hi: theta.1,
            theta_steps: theta.2,
            ref_lo: reference.0,
            ref_hi: reference.1,
            ref_steps: reference.2,
        };
        for (name, lo, hi, n) in [
            ("theta", spec.theta_lo, spec.theta_hi, spec.theta_steps),
            ("ref", spec.ref_lo, spec.ref_hi, spec.ref_steps),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::invalid_param(
                    "grid",
                    format!("{name} range needs finite lo < hi, got [{lo}, {hi}]"),
                ));
            }
            if n < 2 {
                return Err(Error::invalid_param(
                    "grid",
                    format!("{name} axis needs >= 2 steps, got {n}"),
                ));
            }
        }
        Ok(spec)
    }

    /// The 121x121 grid over [-6, 6] x [-6, 6] used by the default heatmap
    /// exports; wide enough to show both the pessimistic and optimistic
    /// regimes.
    pub fn default_grid() -> Self {
        Self::new((-6.0, 6.0, 121), (-6.0, 6.0, 121)).expect("static grid is valid")
    }

    pub fn theta_coords(&self) -> Vec<f64> {
        linspace(self.theta_lo, self.theta_hi, self.theta_steps)
    }

    pub fn ref_coords(&self) -> Vec<f64> {
        linspace(self.ref_lo, self.ref_hi, self.ref_steps)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

/// Gradient weight of `objective` at every grid cell; entry `[i][j]` is the
/// weight at `(theta_coords[i], ref_coords[j])`. Pure delegation to the
/// objective family, one evaluation per cell.
pub fn weight_heatmap(
    objective: ObjectiveKind,
    hp: &HyperParams,
    grid: &GridSpec,
) -> Result<Vec<Vec<f64>>> {
    let thetas = grid.theta_coords();
    let refs = grid.ref_coords();
    // the SFT term has no margin-weight component; its logistic part is
    // what the heatmap shows
    let logp = objective.needs_logp_chosen().then_some(0.0);
    let rows = exec::map_collect(&thetas, |&dt| -> Result<Vec<f64>> {
        refs.iter()
            .map(|&dr| Ok(evaluate(objective, MarginPair::new(dt, dr)?, logp, hp)?.weight))
            .collect()
    });
    rows.into_iter().collect()
}

fn write_value(out: &mut String, v: f64) {
    // >= 6 significant digits, stable text for identical inputs
    out.push_str(&format!("{v:.9e}"));
}

/// CSV with the reference-margin coordinates across the first row and the
/// policy-margin coordinates down the first column.
pub fn export_heatmap_csv(matrix: &[Vec<f64>], grid: &GridSpec, path: &Path) -> Result<()> {
    let thetas = grid.theta_coords();
    let refs = grid.ref_coords();
    if matrix.len() != thetas.len() || matrix.iter().any(|row| row.len() != refs.len()) {
        return Err(Error::InvalidArgument(format!(
            "matrix shape does not match the {}x{} grid",
            thetas.len(),
            refs.len()
        )));
    }
    let mut text = String::new();
    for &r in &refs {
        text.push(',');
        text.push_str(&r.to_string());
    }
    text.push('\n');
    for (t, row) in thetas.iter().zip(matrix) {
        text.push_str(&t.to_string());
        for &v in row {
            text.push(',');
            write_value(&mut text, v);
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Metric names [`export_curves`] accepts.
pub const CURVE_METRICS: &[&str] = &[
    "train_loss",
    "learning_rate",
    "agreement_rate",
    "pessimistic_margin",
];

fn entry_metric(entry: &RunLogEntry, metric: &str) -> Option<f64> {
    match metric {
        "train_loss" => Some(entry.train_loss),
        "learning_rate" => Some(entry.learning_rate),
        "agreement_rate" => Some(entry.agreement_rate),
        "pessimistic_margin" => entry.pessimistic_margin,
        _ => None,
    }
}

/// Long-format curves CSV `(run_name, step, metric, value)`, one row per
/// evaluation point per requested metric. Points where a metric is absent
/// (empty pessimistic subset) are skipped.
pub fn export_curves(run_logs: &[&RunLog], metrics: &[&str], path: &Path) -> Result<()> {
    if run_logs.is_empty() {
        return Err(Error::InvalidArgument("no run logs to export".into()));
    }
    for m in metrics {
        if !CURVE_METRICS.contains(m) {
            return Err(Error::invalid_param(
                "metric",
                format!("unknown metric {m:?}, valid: {CURVE_METRICS:?}"),
            ));
        }
    }
    let mut text = String::from("run_name,step,metric,value\n");
    for log in run_logs {
        for entry in log.entries() {
            for metric in metrics {
                if let Some(v) = entry_metric(entry, metric) {
                    text.push_str(log.run_name());
                    text.push(',');
                    text.push_str(&entry.step.to_string());
                    text.push(',');
                    text.push_str(metric);
                    text.push(',');
                    write_value(&mut text, v);
                    text.push('\n');
                }
            }
        }
    }
    write_atomic(path, text.as_bytes())
}

/// Histogram CSV of the reference margin over a dataset
/// (`bin_left,bin_right,count` rows) with mean / lower-median /
/// pessimistic-fraction footer rows. Margins are recomputed from
/// `ref_policy`.
pub fn export_margin_histogram<P: ParametricPolicy + Sync>(
    ref_policy: &P,
    dataset: &PreferenceDataset,
    n_bins: usize,
    path: &Path,
) -> Result<()> {
    if n_bins == 0 {
        return Err(Error::invalid_param("n_bins", "must be >= 1"));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let margins: Vec<f64> = exec::map_collect(dataset.records(), |rec| {
        ref_policy.policy_margin(rec.prompt_id, rec.chosen_id, rec.rejected_id)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let lo = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &m in &margins {
        let idx = (((m - lo) / width) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    let stats = ref_margin_stats(ref_policy, dataset)?;

    let mut text = String::from("bin_left,bin_right,count\n");
    for (i, &c) in counts.iter().enumerate() {
        let left = lo + width * i as f64;
        let right = if i == n_bins - 1 {
            hi
        } else {
            lo + width * (i + 1) as f64
        };
        write_value(&mut text, left);
        text.push(',');
        write_value(&mut text, right);
        text.push(',');
        text.push_str(&c.to_string());
        text.push('\n');
    }
    for (name, v) in [
        ("mean", stats.mean),
        ("median", stats.median),
        ("fraction_pessimistic", stats.fraction_pessimistic),
    ] {
        text.push_str(name);
        text.push(',');
        write_value(&mut text, v);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(bytes)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        sample_preferences, PreferenceRecord, Split, SyntheticWorld, WorldConfig,
    };
    use crate::policy::TabularPolicy;
    use crate::trainer::RunLog;

    fn hp(beta: f64) -> HyperParams {
        HyperParams::new(beta).unwrap()
    }

    fn cell(matrix: &[Vec<f64>], grid: &GridSpec, theta: f64, dref: f64) -> f64 {
        let ti = grid
            .theta_coords()
            .iter()
            .position(|&t| (t - theta).abs() < 1e-9)
            .expect("theta on grid");
        let rj = grid
            .ref_coords()
            .iter()
            .position(|&r| (r - dref).abs() < 1e-9)
            .expect("ref on grid");
        matrix[ti][rj]
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new((0.0, 1.0, 2), (0.0, 1.0, 2)).is_ok());
        assert!(GridSpec::new((1.0, 0.0, 2), (0.0, 1.0, 2)).is_err());
        assert!(GridSpec::new((0.0, 1.0, 1), (0.0, 1.0, 2)).is_err());
        assert!(GridSpec::new((0.0, f64::NAN, 2), (0.0, 1.0, 2)).is_err());
        let g = GridSpec::default_grid();
        assert_eq!(g.theta_coords().len(), 121);
        assert_eq!(g.theta_coords()[0], -6.0);
        assert_eq!(*g.theta_coords().last().unwrap(), 6.0);
    }

    #[test]
    fn heatmap_worked_values() {
        let grid = GridSpec::default_grid();
        let dpo = weight_heatmap(ObjectiveKind::Dpo, &hp(1.0), &grid).unwrap();
        assert!((cell(&dpo, &grid, -1.0, -3.0) - 0.11920292202211755).abs() < 1e-9);

        let hy = weight_heatmap(ObjectiveKind::HypoHard, &hp(1.0), &grid).unwrap();
        assert!((cell(&hy, &grid, -1.0, -3.0) - 0.7310585786300049).abs() < 1e-9);

        let rf = weight_heatmap(ObjectiveKind::RefFree, &hp(1.0), &grid).unwrap();
        let ti = grid.theta_coords().iter().position(|&t| t == 0.0).unwrap();
        for &w in &rf[ti] {
            assert_eq!(w, 0.5);
        }
    }

    #[test]
    fn heatmap_delegates_to_objectives() {
        let grid = GridSpec::new((-2.0, 2.0, 9), (-2.0, 2.0, 9)).unwrap();
        let h = hp(0.7).with_gamma(0.5).unwrap();
        let m = weight_heatmap(ObjectiveKind::HypoHard, &h, &grid).unwrap();
        for (i, &t) in grid.theta_coords().iter().enumerate() {
            for (j, &r) in grid.ref_coords().iter().enumerate() {
                let direct = evaluate(
                    ObjectiveKind::HypoHard,
                    MarginPair::new(t, r).unwrap(),
                    None,
                    &h,
                )
                .unwrap()
                .weight;
                assert_eq!(m[i][j].to_bits(), direct.to_bits());
            }
        }
    }

    #[test]
    fn dpo_heatmap_constant_on_diagonals() {
        let grid = GridSpec::default_grid();
        let m = weight_heatmap(ObjectiveKind::Dpo, &hp(1.3), &grid).unwrap();
        let n = 121;
        for offset in [-40i64, -7, 0, 13, 55] {
            let mut values = Vec::new();
            for i in 0..n as i64 {
                let j = i - offset;
                if j >= 0 && j < n as i64 {
                    values.push(m[i as usize][j as usize]);
                }
            }
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo <= 1e-12, "diagonal spread {}", hi - lo);
        }
    }

    #[test]
    fn hypo_heatmap_structure() {
        let grid = GridSpec::default_grid();
        let gamma = 0.5;
        let h = hp(1.0).with_gamma(gamma).unwrap();
        let hy = weight_heatmap(ObjectiveKind::HypoHard, &h, &grid).unwrap();
        let dpo = weight_heatmap(ObjectiveKind::Dpo, &h, &grid).unwrap();
        let refs = grid.ref_coords();
        for (i, row) in hy.iter().enumerate() {
            let below: Vec<f64> = refs
                .iter()
                .zip(row)
                .filter(|(&r, _)| r < gamma)
                .map(|(_, &w)| w)
                .collect();
            // constant in the reference margin below gamma
            for w in below.windows(2) {
                assert_eq!(w[0].to_bits(), w[1].to_bits());
            }
            // identical to DPO at or above gamma
            for (j, &r) in refs.iter().enumerate() {
                if r >= gamma {
                    assert_eq!(row[j].to_bits(), dpo[i][j].to_bits());
                }
            }
        }
    }

    #[test]
    fn heatmap_csv_layout_and_stability() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new((0.0, 1.0, 2), (0.0, 1.0, 2)).unwrap();
        let m = weight_heatmap(ObjectiveKind::Dpo, &hp(1.0), &grid).unwrap();
        let path = dir.path().join("heat.csv");
        export_heatmap_csv(&m, &grid, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in &lines {
            assert_eq!(line.split(',').count(), 3);
        }
        // byte-stable re-export
        let again = dir.path().join("heat2.csv");
        export_heatmap_csv(&m, &grid, &again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
        // round-trip within print precision
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            for (j, field) in fields[1..].iter().enumerate() {
                let parsed: f64 = field.parse().unwrap();
                assert!((parsed - m[i][j]).abs() < 1e-9 * m[i][j].abs().max(1.0));
            }
        }
        // shape mismatch is rejected
        assert!(export_heatmap_csv(&m[..1], &grid, &path).is_err());
    }

    fn demo_log(name: &str, steps: &[u64]) -> RunLog {
        let entries: Vec<RunLogEntry> = steps
            .iter()
            .map(|&s| RunLogEntry {
                step: s,
                learning_rate: 0.01,
                train_loss: 1.0 / (s + 1) as f64,
                agreement_rate: 0.5 + s as f64 / 100.0,
                pessimistic_margin: Some(-1.0 + s as f64 / 50.0),
                pessimistic_subset_size: 10,
                wall_time: 0.0,
            })
            .collect();
        RunLog::from_entries(name, entries).unwrap()
    }

    #[test]
    fn curves_cardinality_and_run_names() {
        let dir = tempfile::tempdir().unwrap();
        let a = demo_log("run_a", &[0, 10, 20]);
        let path = dir.path().join("curves.csv");
        export_curves(&[&a], &["agreement_rate", "pessimistic_margin"], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_name,step,metric,value");
        assert_eq!(lines.len(), 1 + 6);

        let b = demo_log("run_b", &[0, 10]);
        export_curves(&[&a, &b], &["train_loss"], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let names: std::collections::BTreeSet<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(
            names.into_iter().collect::<Vec<_>>(),
            vec!["run_a", "run_b"]
        );

        // steps strictly increasing within each run
        let steps: Vec<u64> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .skip(1)
            .filter(|l| l.starts_with("run_a"))
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        for w in steps.windows(2) {
            assert!(w[1] > w[0]);
        }

        assert!(export_curves(&[&a], &["bogus"], &path).is_err());
        assert!(export_curves(&[], &["train_loss"], &path).is_err());
    }

    #[test]
    fn histogram_single_bin_and_conservation() {
        let dir = tempfile::tempdir().unwrap();
        // constant reference margins
        let refp = TabularPolicy::new(1, 2, vec![1.5, 0.0]).unwrap();
        let records = vec![
            PreferenceRecord {
                prompt_id: 0,
                chosen_id: 0,
                rejected_id: 1,
                ref_margin: 1.5,
            };
            40
        ];
        let ds =
            crate::datagen::PreferenceDataset::from_records(records, Split::Eval, "x".into(), 0);
        let path = dir.path().join("hist.csv");
        export_margin_histogram(&refp, &ds, 8, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let data_rows: Vec<&str> = text
            .lines()
            .skip(1)
            .filter(|l| {
                l.chars()
                    .next()
                    .is_some_and(|c| c.is_ascii_digit() || c == '-')
            })
            .collect();
        assert_eq!(data_rows.len(), 8);
        let counts: Vec<usize> = data_rows
            .iter()
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(counts.iter().sum::<usize>(), 40);
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn histogram_footer_matches_world_measurement() {
        let dir = tempfile::tempdir().unwrap();
        let world = SyntheticWorld::generate(&WorldConfig::new(32, 16, 10.0, 3)).unwrap();
        let ds = sample_preferences(&world, 10_000, 0.0, 4).unwrap();
        let path = dir.path().join("hist.csv");
        export_margin_histogram(world.ref_policy(), &ds, 40, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let frac_line = text
            .lines()
            .find(|l| l.starts_with("fraction_pessimistic"))
            .unwrap();
        let frac: f64 = frac_line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(frac > 0.45 && frac < 0.55, "footer fraction {frac}");
        let counts: usize = text
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with(|c: char| c.is_ascii_alphabetic()))
            .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(counts, 10_000);
    }
}
