//! Multi-seed desk-scale experiments: generate ground truth, derive a
//! prediction (traced with the oracle proposer, or corrupted directly),
//! evaluate with and without TNMS, and write per-sample plus aggregate
//! reports.
//!
//! Workers pull tasks from a shared queue but results land in slots indexed
//! by task, so reports are byte-identical however the pool is scheduled.

use crate::metrics::{evaluate, MetricsReport};
use crate::synth::{corrupt_tree, generate_tree, CorruptionParams, SynthParams};
use crate::tnms::{tnms, TnmsConfig};
use crate::tracer::{trace, OracleConfig, OracleProposer, TraceConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment needs at least one seed")]
    NoSeeds,
    #[error("experiment needs at least one noise level")]
    NoNoiseLevels,
    #[error("cannot write to output directory {dir}: {source}")]
    OutputDir {
        dir: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How predictions are derived from the generated ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    /// Trace with the oracle proposer at each position-noise level.
    Trace {
        noise_levels: Vec<f64>,
        #[serde(default)]
        radius_noise_std: f64,
    },
    /// Corrupt the ground truth directly at each position-noise level.
    Corrupt {
        noise_levels: Vec<f64>,
        #[serde(default)]
        radius_noise_std: f64,
        #[serde(default)]
        duplicate_branch_prob: f64,
        #[serde(default)]
        drop_branch_prob: f64,
    },
}

impl ExperimentMode {
    fn noise_levels(&self) -> &[f64] {
        match self {
            ExperimentMode::Trace { noise_levels, .. } => noise_levels,
            ExperimentMode::Corrupt { noise_levels, .. } => noise_levels,
        }
    }
}

/// Full experiment description; everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub synth: SynthParams,
    pub mode: ExperimentMode,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub tnms: TnmsConfig,
    pub output_dir: PathBuf,
}

/// One evaluated (seed, noise, tnms) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub seed: u64,
    pub noise: f64,
    pub tnms: bool,
    pub gt_nodes: usize,
    pub pred_nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
    pub metrics: MetricsReport,
}

/// A cell whose pipeline failed; the run continues without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub seed: u64,
    pub noise: f64,
    pub tnms: bool,
    pub error: String,
}

/// Mean and standard deviation of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Per (noise, tnms) aggregate across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub noise: f64,
    pub tnms: bool,
    pub samples: usize,
    pub rap: MeanStd,
    pub rar: MeanStd,
    pub rf1: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_mae: Option<MeanStd>,
    pub rbap: MeanStd,
    pub rbar: MeanStd,
    pub rbf1: MeanStd,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub samples: Vec<SampleReport>,
    pub failures: Vec<SampleFailure>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn fully_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn run_sample(
    spec: &ExperimentSpec,
    seed: u64,
    noise: f64,
    with_tnms: bool,
) -> Result<SampleReport, String> {
    let gt = generate_tree(&SynthParams { seed, ..spec.synth });
    let (pred, truncated) = match &spec.mode {
        ExperimentMode::Trace { radius_noise_std, .. } => {
            let oracle = OracleProposer::new(
                OracleConfig {
                    gt: gt.clone(),
                    pos_noise_std: noise,
                    radius_noise_std: *radius_noise_std,
                    seed,
                },
                spec.trace.half_extent,
            );
            let cfg = TraceConfig { apply_tnms: with_tnms, tnms: spec.tnms, ..spec.trace };
            let root_pos = gt.node(gt.root()).unwrap().pos;
            let result = trace(&oracle, root_pos, &cfg).map_err(|e| e.to_string())?;
            (result.tree, Some(result.truncated))
        }
        ExperimentMode::Corrupt {
            radius_noise_std,
            duplicate_branch_prob,
            drop_branch_prob,
            ..
        } => {
            let corrupted = corrupt_tree(
                &gt,
                &CorruptionParams {
                    pos_noise_std: noise,
                    radius_noise_std: *radius_noise_std,
                    duplicate_branch_prob: *duplicate_branch_prob,
                    drop_branch_prob: *drop_branch_prob,
                    seed,
                },
            )
            .map_err(|e| e.to_string())?;
            let pred = if with_tnms {
                tnms(&corrupted, &spec.tnms).map_err(|e| e.to_string())?
            } else {
                corrupted
            };
            (pred, None)
        }
    };
    let metrics = evaluate(&pred, &gt).map_err(|e| e.to_string())?;
    Ok(SampleReport {
        seed,
        noise,
        tnms: with_tnms,
        gt_nodes: gt.len(),
        pred_nodes: pred.len(),
        truncated,
        metrics,
    })
}

fn csv_cell(v: f64) -> String {
    format!("{v}")
}

/// Renders the per-sample CSV (header plus one row per successful sample).
pub fn report_csv(samples: &[SampleReport]) -> String {
    let mut out = String::from("seed,noise,tnms,rAP,rAR,rF1,radius_mae,rBAP,rBAR,rBF1\n");
    for s in samples {
        let mae = s.metrics.radius_mae.map(csv_cell).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.seed,
            csv_cell(s.noise),
            u8::from(s.tnms),
            csv_cell(s.metrics.rap),
            csv_cell(s.metrics.rar),
            csv_cell(s.metrics.rf1),
            mae,
            csv_cell(s.metrics.rbap),
            csv_cell(s.metrics.rbar),
            csv_cell(s.metrics.rbf1),
        ));
    }
    out
}

fn aggregate(samples: &[SampleReport], noise_levels: &[f64]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &noise in noise_levels {
        for with_tnms in [false, true] {
            let cell: Vec<&SampleReport> = samples
                .iter()
                .filter(|s| s.noise == noise && s.tnms == with_tnms)
                .collect();
            if cell.is_empty() {
                continue;
            }
            let collect = |f: &dyn Fn(&SampleReport) -> f64| -> Vec<f64> {
                cell.iter().map(|s| f(s)).collect()
            };
            let maes: Vec<f64> =
                cell.iter().filter_map(|s| s.metrics.radius_mae).collect();
            rows.push(AggregateRow {
                noise,
                tnms: with_tnms,
                samples: cell.len(),
                rap: mean_std(&collect(&|s| s.metrics.rap)),
                rar: mean_std(&collect(&|s| s.metrics.rar)),
                rf1: mean_std(&collect(&|s| s.metrics.rf1)),
                radius_mae: if maes.is_empty() { None } else { Some(mean_std(&maes)) },
                rbap: mean_std(&collect(&|s| s.metrics.rbap)),
                rbar: mean_std(&collect(&|s| s.metrics.rbar)),
                rbf1: mean_std(&collect(&|s| s.metrics.rbf1)),
            });
        }
    }
    rows
}

/// Runs every (seed, noise, tnms) cell on up to `jobs` worker threads and
/// writes `sample_*.json`, `aggregate.json`, and `report.csv` into the
/// spec's output directory.
///
/// Per-sample failures are recorded and skipped; callers decide how to
/// surface them (see [`ExperimentReport::fully_succeeded`]).
pub fn run_experiment(
    spec: &ExperimentSpec,
    jobs: usize,
) -> Result<ExperimentReport, ExperimentError> {
    if spec.seeds.is_empty() {
        return Err(ExperimentError::NoSeeds);
    }
    let noise_levels = spec.mode.noise_levels().to_vec();
    if noise_levels.is_empty() {
        return Err(ExperimentError::NoNoiseLevels);
    }
    std::fs::create_dir_all(&spec.output_dir)
        .map_err(|source| ExperimentError::OutputDir { dir: spec.output_dir.clone(), source })?;

    let mut tasks: Vec<(u64, f64, bool)> = Vec::new();
    for &seed in &spec.seeds {
        for &noise in &noise_levels {
            for with_tnms in [false, true] {
                tasks.push((seed, noise, with_tnms));
            }
        }
    }

    let jobs = jobs.max(1).min(tasks.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SampleReport, SampleFailure>>>> =
        Mutex::new(vec![None; tasks.len()]);

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= tasks.len() {
                    break;
                }
                let (seed, noise, with_tnms) = tasks[idx];
                let outcome = run_sample(spec, seed, noise, with_tnms).map_err(|error| {
                    SampleFailure { seed, noise, tnms: with_tnms, error }
                });
                slots.lock().unwrap()[idx] = Some(outcome);
            });
        }
    });

    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for outcome in slots.into_inner().unwrap() {
        match outcome.expect("every task ran") {
            Ok(sample) => samples.push(sample),
            Err(failure) => failures.push(failure),
        }
    }
    samples.sort_by(|a, b| {
        (a.seed, a.noise, a.tnms)
            .partial_cmp(&(b.seed, b.noise, b.tnms))
            .expect("noise levels are finite")
    });
    failures.sort_by(|a, b| {
        (a.seed, a.noise, a.tnms)
            .partial_cmp(&(b.seed, b.noise, b.tnms))
            .expect("noise levels are finite")
    });

    for sample in &samples {
        let name = format!(
            "sample_seed{}_noise{}_tnms{}.json",
            sample.seed,
            sample.noise,
            u8::from(sample.tnms)
        );
        write_pretty_json(&spec.output_dir.join(name), sample)?;
    }
    let aggregates = aggregate(&samples, &noise_levels);
    let report = ExperimentReport { samples, failures, aggregates };
    write_pretty_json(&spec.output_dir.join("aggregate.json"), &report)?;
    std::fs::write(spec.output_dir.join("report.csv"), report_csv(&report.samples))?;
    Ok(report)
}

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(dir: &Path, mode: ExperimentMode) -> ExperimentSpec {
        ExperimentSpec {
            seeds: vec![1, 2],
            // step_len * (l - 1) stays below the patch half-extent so
            // windows never clip at the patch wall, and step_len is large
            // enough that sibling branches separate beyond tau_min
            synth: SynthParams {
                max_depth: 3,
                bifurcation_prob: 0.5,
                segment_len: (4, 6),
                step_len: 6.0,
                tortuosity: 0.05,
                ..SynthParams::default()
            },
            mode,
            trace: TraceConfig { n: 12, l: 10, half_extent: 64.0, ..TraceConfig::default() },
            tnms: TnmsConfig::default(),
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn zero_noise_trace_experiment_is_perfect_and_deterministic() {
        let dir = std::env::temp_dir().join(format!("vg_exp_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = tiny_spec(
            &dir,
            ExperimentMode::Trace { noise_levels: vec![0.0], radius_noise_std: 0.0 },
        );
        let report = run_experiment(&spec, 2).unwrap();
        assert!(report.fully_succeeded());
        assert_eq!(report.samples.len(), 4); // 2 seeds x 1 noise x {off,on}
        for s in &report.samples {
            assert_eq!(s.metrics.rf1, 100.0, "seed {} tnms {}", s.seed, s.tnms);
        }
        for row in &report.aggregates {
            assert_eq!(row.rf1.mean, 100.0);
            assert_eq!(row.rf1.std, 0.0);
        }

        let csv1 = std::fs::read(dir.join("report.csv")).unwrap();
        let agg1 = std::fs::read(dir.join("aggregate.json")).unwrap();
        // identical spec, fresh run: byte-identical outputs
        let report2 = run_experiment(&spec, 1).unwrap();
        assert_eq!(report, report2);
        assert_eq!(csv1, std::fs::read(dir.join("report.csv")).unwrap());
        assert_eq!(agg1, std::fs::read(dir.join("aggregate.json")).unwrap());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn corrupt_mode_with_duplicates_rewards_tnms() {
        let dir = std::env::temp_dir().join(format!("vg_exp_c_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = tiny_spec(
            &dir,
            ExperimentMode::Corrupt {
                noise_levels: vec![0.5],
                radius_noise_std: 0.0,
                duplicate_branch_prob: 1.0,
                drop_branch_prob: 0.0,
            },
        );
        let report = run_experiment(&spec, 2).unwrap();
        assert!(report.fully_succeeded());
        let rap = |with: bool| {
            report
                .aggregates
                .iter()
                .find(|r| r.tnms == with)
                .map(|r| r.rap.mean)
                .unwrap()
        };
        assert!(rap(true) > rap(false), "tnms {} vs raw {}", rap(true), rap(false));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let spec = ExperimentSpec {
            seeds: vec![],
            synth: SynthParams::default(),
            mode: ExperimentMode::Trace { noise_levels: vec![0.0], radius_noise_std: 0.0 },
            trace: TraceConfig::default(),
            tnms: TnmsConfig::default(),
            output_dir: std::env::temp_dir(),
        };
        assert!(matches!(run_experiment(&spec, 1), Err(ExperimentError::NoSeeds)));
    }
}
