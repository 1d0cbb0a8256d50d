//! Command-line front end.
//!
//! Training settings come from built-in defaults, then `CSGNN_SEED`, then
//! an optional `--config` file, then explicit flags (later wins).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, KEYS};
use crate::error::{Error, Result};
use crate::gradcheck::{end_to_end_check, logit_gradient_check};
use crate::graph::{load_graph_with_classes, write_edges, write_features, write_labels, Graph, Split, SyntheticSpec};
use crate::harness::{
    ablation_csv, ablation_run, ensure_split, ir_sweep, ir_sweep_csv, sensitivity_csv, sensitivity_sweep, write_json,
    write_text, SensitivityParam, ABLATION_CONFIGS,
};
use crate::metrics::MetricsReport;
use crate::trainer::{evaluate, predict, train, EpochLosses, Model, TrainState};

#[derive(Debug, Parser)]
#[command(name = "csgnn", version, about = "Cost-sensitive GNN with bandit neighbor sampling for imbalanced node classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic planted-partition dataset (edges.csv, features.csv, labels.csv).
    Generate {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, env = "CSGNN_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, metrics.json and effective.cfg.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Also write bandit_trace.csv and cost_trace.csv.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class probabilities for every node from a checkpoint (CSV).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on one split (JSON).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Imbalance-ratio sweep on synthetic graphs; writes ir_sweep.csv.
    SweepIr {
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated imbalance ratios.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        irs: Vec<f64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full model vs. no_sampler vs. no_cost on one split; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        data: OptionalDataArgs,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-parameter sweep; writes sensitivity_<param>.csv.
    Sensitivity {
        /// train_frac, beta, layers or hidden_dim.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        data: OptionalDataArgs,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; exit 0 iff every error < 1e-4.
    Gradcheck {
        #[arg(long, env = "CSGNN_SEED", default_value_t = 0)]
        seed: u64,
        /// Random instances for the logit-gradient check.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Number of classes (default: largest label + 1).
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OptionalDataArgs {
    /// Dataset files; a synthetic graph is generated when omitted.
    #[arg(long, requires_all = ["features", "labels"])]
    pub edges: Option<PathBuf>,
    #[arg(long, requires = "edges")]
    pub features: Option<PathBuf>,
    #[arg(long, requires = "edges")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Imbalance ratio (smallest / largest class).
    #[arg(long, default_value_t = 0.1)]
    pub ir: f64,
    #[arg(long, default_value_t = 0.8)]
    pub homophily: f64,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 20.0)]
    pub mean_degree: f64,
}

impl SynthArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            k: self.k,
            ir: self.ir,
            homophily: self.homophily,
            feature_dim: self.feature_dim,
            class_separation: self.separation,
            mean_degree: self.mean_degree,
            seed,
        }
    }
}

fn default_of(key: &str) -> String {
    TrainConfig::default().get(key).expect("known key")
}

/// One flag per training setting. Argument ids equal the config keys.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = default_of("epochs"))]
    pub epochs: String,
    /// Encoder layers.
    #[arg(long, default_value_t = default_of("layers"))]
    pub layers: String,
    #[arg(long, default_value_t = default_of("hidden_dim"))]
    pub hidden_dim: String,
    /// Learning rate of the transform and encoder.
    #[arg(long, default_value_t = default_of("lr"))]
    pub lr: String,
    /// Step size of the cost-matrix update.
    #[arg(long, default_value_t = default_of("cost_lr"))]
    pub cost_lr: String,
    /// Weight of the transform loss.
    #[arg(long, default_value_t = default_of("lambda"))]
    pub lambda: String,
    /// Scale of the cost target.
    #[arg(long, default_value_t = default_of("beta"))]
    pub beta: String,
    /// Bandit step on the sampling fraction.
    #[arg(long, default_value_t = default_of("tau"))]
    pub tau: String,
    #[arg(long, default_value_t = default_of("p_init"))]
    pub p_init: String,
    #[arg(long, default_value_t = default_of("p_min"))]
    pub p_min: String,
    /// greedy or contrarian.
    #[arg(long, default_value_t = default_of("action_rule"))]
    pub action_rule: String,
    /// Bandit termination window.
    #[arg(long, default_value_t = default_of("window"))]
    pub window: String,
    /// Bandit stops once |sum of window rewards| <= threshold.
    #[arg(long, default_value_t = default_of("threshold"))]
    pub threshold: String,
    #[arg(long, env = "CSGNN_SEED", default_value_t = default_of("seed"))]
    pub seed: String,
    /// full, no_sampler, no_cost or vanilla.
    #[arg(long, default_value_t = default_of("ablation"))]
    pub ablation: String,
    /// gd or adam.
    #[arg(long, default_value_t = default_of("optimizer"))]
    pub optimizer: String,
    #[arg(long, default_value_t = default_of("train_frac"))]
    pub train_frac: String,
    #[arg(long, default_value_t = default_of("val_frac"))]
    pub val_frac: String,
    /// Bias terms in the transform and encoder.
    #[arg(long, default_value_t = default_of("bias"))]
    pub bias: String,
    /// softmax or raw.
    #[arg(long, default_value_t = default_of("similarity"))]
    pub similarity: String,
}

/// Resolves the effective config from a subcommand's matches.
fn resolve_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let value = |key: &str| m.get_one::<String>(key).cloned().unwrap_or_default();
    for key in KEYS {
        if m.value_source(key) == Some(ValueSource::EnvVariable) {
            cfg.set(key, &value(key))?;
        }
    }
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for key in KEYS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            cfg.set(key, &value(key))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(data: &DataArgs) -> Result<Graph> {
    load_graph_with_classes(&data.edges, &data.features, &data.labels, data.classes)
}

fn load_or_generate(data: &OptionalDataArgs, synth: &SynthArgs, seed: u64) -> Result<Graph> {
    match (&data.edges, &data.features, &data.labels) {
        (Some(e), Some(f), Some(l)) => load(&DataArgs {
            edges: e.clone(),
            features: f.clone(),
            labels: l.clone(),
            classes: data.classes,
        }),
        _ => synth.spec(seed).generate(),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    validation: &'a MetricsReport,
    test: &'a MetricsReport,
    final_p: Option<f64>,
    bandit_terminated: Option<bool>,
    cost_matrix: Vec<Vec<f64>>,
    history: &'a [EpochLosses],
}

fn matrix_rows(m: &crate::numeric::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn bandit_trace_csv(state: &TrainState) -> String {
    let mut s = String::from("epoch,avg_similarity,reward,p,terminated\n");
    for r in &state.bandit_trace {
        let reward = r.reward.map_or(String::new(), |x| x.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.avg_similarity, reward, r.p, r.terminated);
    }
    s
}

/// Long format: one row per (epoch, matrix, i, j).
fn cost_trace_csv(state: &TrainState) -> String {
    let mut s = String::from("epoch,matrix,i,j,value\n");
    for r in &state.cost_trace {
        let t = &r.target;
        for (name, m) in [("C", &r.cost), ("T", &t.target), ("H", &t.histogram), ("S", &t.scatter), ("R", &t.confusion)] {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let _ = writeln!(s, "{},{name},{i},{j},{}", r.epoch, m[(i, j)]);
                }
            }
        }
    }
    s
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&Checkpoint::parse(&std::fs::read_to_string(path)?)?)
}

fn execute(command: &Command, sub: &ArgMatches) -> Result<()> {
    match command {
        Command::Generate { synth, seed, out } => {
            let g = synth.spec(*seed).generate()?;
            std::fs::create_dir_all(out)?;
            write_edges(&g, &out.join("edges.csv"))?;
            write_features(&g, &out.join("features.csv"))?;
            write_labels(&g, &out.join("labels.csv"))?;
            println!("wrote {} nodes, {} edges to {}", g.num_nodes(), g.num_edges(), out.display());
        }
        Command::Train { data, trace, out, .. } => {
            let cfg = resolve_config(sub)?;
            let g = ensure_split(&load(data)?, &cfg)?;
            let (state, validation) = train(&g, &cfg)?;
            let model = state.model();
            let test = evaluate(&model, &g, Split::Test)?;
            std::fs::create_dir_all(out)?;
            write_text(&out.join("model.ckpt"), &model.to_checkpoint()?.to_text())?;
            write_text(&out.join("effective.cfg"), &cfg.to_text())?;
            let summary = TrainSummary {
                config: &cfg,
                validation: &validation,
                test: &test,
                final_p: state.bandit.as_ref().map(|b| b.p()),
                bandit_terminated: state.bandit.as_ref().map(|b| b.terminated()),
                cost_matrix: matrix_rows(&state.cost.values),
                history: &state.history,
            };
            write_json(&out.join("metrics.json"), &summary)?;
            if *trace {
                write_text(&out.join("bandit_trace.csv"), &bandit_trace_csv(&state))?;
                write_text(&out.join("cost_trace.csv"), &cost_trace_csv(&state))?;
            }
            println!(
                "validation: auc {:.4} recall {:.4} gmean {:.4}",
                validation.macro_auc, validation.macro_recall, validation.g_mean
            );
        }
        Command::Predict { checkpoint, data, out } => {
            let model = load_model(checkpoint)?;
            let g = load(data)?;
            let pred = predict(&model, &g, &vec![true; g.num_nodes()])?;
            let mut s = String::from("node,label");
            for c in 0..pred.probabilities.cols() {
                let _ = write!(s, ",prob_{c}");
            }
            s.push('\n');
            for (i, &v) in pred.nodes.iter().enumerate() {
                let _ = write!(s, "{},{}", g.node_ids()[v], pred.labels[i]);
                for p in pred.probabilities.row(i) {
                    let _ = write!(s, ",{p}");
                }
                s.push('\n');
            }
            match out {
                Some(path) => write_text(path, &s)?,
                None => print!("{s}"),
            }
        }
        Command::Eval { checkpoint, data, split, out, .. } => {
            let cfg = resolve_config(sub)?;
            let model = load_model(checkpoint)?;
            let g = ensure_split(&load(data)?, &cfg)?;
            let report = evaluate(&model, &g, parse_split(split)?)?;
            match out {
                Some(path) => write_json(path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Validation(e.to_string()))?),
            }
        }
        Command::SweepIr { synth, irs, seeds, out, .. } => {
            let cfg = resolve_config(sub)?;
            let rows = ir_sweep(&synth.spec(0), irs, &cfg, seeds, &crate::config::Ablation::ALL)?;
            write_text(&out.join("ir_sweep.csv"), &ir_sweep_csv(&rows))?;
            write_json(&out.join("ir_sweep.json"), &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.join("ir_sweep.csv").display());
        }
        Command::Ablate { data, synth, out, .. } => {
            let cfg = resolve_config(sub)?;
            let g = load_or_generate(data, synth, cfg.seed)?;
            let rows = ablation_run(&g, &cfg)?;
            write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
            for (a, r) in &rows {
                write_json(&out.join(format!("metrics_{a}.json")), r)?;
            }
            debug_assert_eq!(rows.len(), ABLATION_CONFIGS.len());
            print!("{}", ablation_csv(&rows));
        }
        Command::Sensitivity { param, values, data, synth, out, .. } => {
            let cfg = resolve_config(sub)?;
            let param: SensitivityParam = param.parse()?;
            let g = load_or_generate(data, synth, cfg.seed)?;
            let rows = sensitivity_sweep(param, values, &g, &cfg)?;
            write_text(&out.join(format!("sensitivity_{}.csv", param.name())), &sensitivity_csv(&rows))?;
            write_json(&out.join(format!("sensitivity_{}.json", param.name())), &rows)?;
            print!("{}", sensitivity_csv(&rows));
        }
        Command::Gradcheck { seed, instances } => {
            let logit = logit_gradient_check(*seed, *instances)?;
            println!("logit gradient: max relative error {logit:.3e} over {instances} instances");
            let mut worst = logit;
            for (name, err) in end_to_end_check(*seed)? {
                println!("{name}: max relative error {err:.3e}");
                worst = worst.max(err);
            }
            if !(worst < 1e-4) {
                return Err(Error::Numeric(format!("gradient check failed: worst relative error {worst:.3e}")));
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command.
///
/// Returns the process exit code: 0 on success, 1 on a runtime error and 2
/// on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match execute(&cli.command, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
