//! Experiment drivers: imbalance-ratio sweep, ablations, sensitivity sweeps.
//!
//! Runs are independent and execute in parallel; result rows always come
//! back in input order.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Split, SyntheticSpec};
use crate::metrics::MetricsReport;
use crate::trainer::{evaluate, prepare, train};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ir: f64,
    pub seed: u64,
    pub config: Ablation,
    /// Metrics on the test mask.
    pub report: MetricsReport,
}

/// Uses the graph's masks when it has a training set, otherwise splits it
/// with the config's fractions and seed.
pub fn ensure_split(g: &Graph, cfg: &TrainConfig) -> Result<Graph> {
    if g.mask(Split::Train).iter().any(|&m| m) {
        Ok(g.clone())
    } else {
        prepare(g, cfg)
    }
}

/// Trains `cfg` on a split graph and scores the test mask.
pub fn run_once(g: &Graph, cfg: &TrainConfig) -> Result<MetricsReport> {
    let (state, _) = train(g, cfg)?;
    evaluate(&state.model(), g, Split::Test)
}

/// For every `(ir, seed)` generates a graph from `base` (seeded with
/// `seed`), splits it once and trains each ablation in `configs` on it.
///
/// Rows are ordered by ir, then seed, then config.
pub fn ir_sweep(
    base: &SyntheticSpec,
    irs: &[f64],
    cfg: &TrainConfig,
    seeds: &[u64],
    configs: &[Ablation],
) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(f64, u64)> = irs
        .iter()
        .flat_map(|&ir| seeds.iter().map(move |&s| (ir, s)))
        .collect();
    let per_job: Vec<Result<Vec<SweepRow>>> = jobs
        .par_iter()
        .map(|&(ir, seed)| {
            let spec = SyntheticSpec { ir, seed, ..base.clone() };
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let g = prepare(&spec.generate()?, &run_cfg)?;
            configs
                .iter()
                .map(|&config| {
                    let report = run_once(&g, &TrainConfig { ablation: config, ..run_cfg.clone() })?;
                    Ok(SweepRow { ir, seed, config, report })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_job {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Mean of `metric` over the rows matching `ir` and `config`.
pub fn mean_metric(rows: &[SweepRow], ir: f64, config: Ablation, metric: impl Fn(&MetricsReport) -> f64) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.config == config && (r.ir - ir).abs() < 1e-12)
        .map(|r| metric(&r.report))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub const ABLATION_CONFIGS: [Ablation; 3] = [Ablation::Full, Ablation::NoSampler, Ablation::NoCost];

/// Full model and both single-module ablations on one shared split, all with
/// `cfg.seed`. Reports are on the test mask.
pub fn ablation_run(g: &Graph, cfg: &TrainConfig) -> Result<Vec<(Ablation, MetricsReport)>> {
    let g = ensure_split(g, cfg)?;
    ABLATION_CONFIGS
        .par_iter()
        .map(|&a| Ok((a, run_once(&g, &TrainConfig { ablation: a, ..cfg.clone() })?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityParam {
    TrainFrac,
    Beta,
    Layers,
    HiddenDim,
}

impl SensitivityParam {
    pub fn name(self) -> &'static str {
        match self {
            SensitivityParam::TrainFrac => "train_frac",
            SensitivityParam::Beta => "beta",
            SensitivityParam::Layers => "layers",
            SensitivityParam::HiddenDim => "hidden_dim",
        }
    }
}

impl FromStr for SensitivityParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SensitivityParam::TrainFrac,
            SensitivityParam::Beta,
            SensitivityParam::Layers,
            SensitivityParam::HiddenDim,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sensitivity parameter {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub param: SensitivityParam,
    pub value: f64,
    pub report: MetricsReport,
}

/// One training per value of `param`, everything else fixed. The graph is
/// re-split for every `train_frac` value; otherwise one split is shared.
pub fn sensitivity_sweep(
    param: SensitivityParam,
    values: &[f64],
    g: &Graph,
    cfg: &TrainConfig,
) -> Result<Vec<SensitivityRow>> {
    let shared = match param {
        SensitivityParam::TrainFrac => None,
        _ => Some(ensure_split(g, cfg)?),
    };
    values
        .par_iter()
        .map(|&value| {
            let mut run_cfg = cfg.clone();
            run_cfg.set(param.name(), &value.to_string())?;
            let split;
            let graph = match &shared {
                Some(s) => s,
                None => {
                    split = prepare(g, &run_cfg)?;
                    &split
                }
            };
            Ok(SensitivityRow {
                param,
                value,
                report: run_once(graph, &run_cfg)?,
            })
        })
        .collect()
}

pub fn ir_sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("ir,seed,config,auc,recall,gmean\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.ir, r.seed, r.config, r.report.macro_auc, r.report.macro_recall, r.report.g_mean
        );
    }
    s
}

pub fn ablation_csv(rows: &[(Ablation, MetricsReport)]) -> String {
    let k = rows.first().map_or(0, |(_, r)| r.num_classes());
    let mut s = String::from("config,auc,recall,gmean");
    for c in 0..k {
        let _ = write!(s, ",recall_class{c}");
    }
    s.push('\n');
    for (a, r) in rows {
        let _ = write!(s, "{a},{},{},{}", r.macro_auc, r.macro_recall, r.g_mean);
        for v in &r.per_class_recall {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut s = String::from("param,value,auc,recall,gmean\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.param.name(),
            r.value,
            r.report.macro_auc,
            r.report.macro_recall,
            r.report.g_mean
        );
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (SyntheticSpec, TrainConfig) {
        let spec = SyntheticSpec {
            n: 200,
            feature_dim: 8,
            class_separation: 3.0,
            ..SyntheticSpec::default()
        };
        let cfg = TrainConfig {
            epochs: 20,
            hidden_dim: 8,
            ..TrainConfig::default()
        };
        (spec, cfg)
    }

    #[test]
    fn sweep_cardinality_and_order() {
        let (spec, cfg) = tiny();
        let irs = [0.3, 0.6, 1.0];
        let rows = ir_sweep(&spec, &irs, &cfg, &[1, 2], &ABLATION_CONFIGS).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 3);
        assert_eq!((rows[0].ir, rows[0].seed, rows[0].config), (0.3, 1, Ablation::Full));
        assert_eq!((rows[5].ir, rows[5].seed, rows[5].config), (0.3, 2, Ablation::NoCost));
        let csv = ir_sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 19);
        assert!(csv.starts_with("ir,seed,config,auc,recall,gmean\n0.3,1,full,"));
        assert!(mean_metric(&rows, 1.0, Ablation::Full, |r| r.g_mean).is_some());
        assert!(mean_metric(&rows, 0.5, Ablation::Full, |r| r.g_mean).is_none());
    }

    #[test]
    fn ablation_shares_the_split() {
        let (spec, cfg) = tiny();
        let g = spec.generate().unwrap();
        let rows = ablation_run(&g, &cfg).unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), ABLATION_CONFIGS);
        // same test set: confusion row sums agree
        let support = |r: &MetricsReport| r.confusion.iter().map(|x| x.iter().sum::<usize>()).collect::<Vec<_>>();
        assert!(rows.windows(2).all(|w| support(&w[0].1) == support(&w[1].1)));
        let csv = ablation_csv(&rows);
        assert!(csv.starts_with("config,auc,recall,gmean,recall_class0,recall_class1\nfull,"));
    }

    #[test]
    fn sensitivity_rows() {
        let (spec, cfg) = tiny();
        let g = spec.generate().unwrap();
        let layers = [1.0, 2.0, 3.0, 4.0, 5.0];
        let rows = sensitivity_sweep(SensitivityParam::Layers, &layers, &g, &cfg).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), layers);
        assert!(sensitivity_sweep(SensitivityParam::Layers, &[1.5], &g, &cfg).is_err());
        let rows = sensitivity_sweep(SensitivityParam::TrainFrac, &[0.1, 0.3], &g, &cfg).unwrap();
        assert_eq!(sensitivity_csv(&rows).lines().count(), 3);
        assert_eq!("hidden_dim".parse::<SensitivityParam>().unwrap(), SensitivityParam::HiddenDim);
    }
}
