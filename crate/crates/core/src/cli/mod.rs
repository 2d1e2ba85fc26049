//! Command-line front end: `train | eval | sweep | verify | analyze`.
//!
//! Every subcommand takes an optional JSON config path, `--section.key=value`
//! overrides and the attack flags below. Outputs go to
//! `$CLBP_OUTPUT_ROOT/<name>/` (default root `runs`), each file written
//! atomically, with the resolved config and its hash alongside.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use commands::SweepAxis;
pub use config::{AnalysisConfig, RunConfig};

use crate::attack::LossKind;
use crate::data;
use crate::error::{Error, Result};
use crate::model::{checkpoint, ClbpModel};
use crate::persist;

/// Environment variable naming the directory runs are written under.
pub const OUTPUT_ROOT_ENV: &str = "CLBP_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "clbp", version, about = "Closed-loop bidirectional prompting on a synthetic task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground, adversarially train and save a checkpoint.
    Train(CommonArgs),
    /// Clean and robust accuracy of the baseline and the CLBP pipeline.
    Eval(CommonArgs),
    /// CLBP accuracy along one axis.
    Sweep(SweepArgs),
    /// Convergence, stability, margin and outlier checks.
    Verify(CommonArgs),
    /// Margin, cosine and feature-shift diagnostics, CKA and trajectories.
    Analyze(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run config; defaults apply to anything it leaves out.
    pub config: Option<PathBuf>,
    /// Use this trained checkpoint instead of training first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// `section.key=value` overrides, collected from `--section.key=value`.
    #[arg(skip)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// l-infinity budget.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Step size; defaults to eps / 4 when only --eps is given.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Gradient samples per step.
    #[arg(long)]
    pub eot: Option<usize>,
    /// Attack objective: ce or cw.
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Reuse one set of view seeds across attack steps.
    #[arg(long)]
    pub fixed_seed: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values, e.g. 8,16,32.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
}

impl AttackArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.attack;
        if let Some(eps) = self.eps {
            a.epsilon = eps;
            a.step_size = eps / 4.0;
        }
        if let Some(alpha) = self.alpha {
            a.step_size = alpha;
        }
        if let Some(n) = self.steps {
            a.num_steps = n;
        }
        if let Some(n) = self.restarts {
            a.num_restarts = n;
        }
        if let Some(n) = self.eot {
            a.eot_samples = n;
        }
        if let Some(k) = self.loss {
            a.loss_kind = k;
        }
        if self.fixed_seed {
            a.fixed_seed = true;
        }
    }
}

impl CommonArgs {
    /// Defaults, then the config file, then overrides, then attack flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        self.attack.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `--a.b=value` style overrides out of the raw arguments so clap
/// only sees its declared flags. Top-level keys without a dot are taken too
/// when they name a config field.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let top: Vec<String> = match serde_json::to_value(RunConfig::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let key = a.strip_prefix("--").and_then(|s| s.split_once('=')).map(|(k, _)| k);
        match key {
            Some(k) if k.contains('.') || top.iter().any(|t| t == k) => {
                overrides.push(a[2..].to_string())
            }
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Where a run's files go.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(cfg: &RunConfig) -> Self {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        Self {
            path: root.join(&cfg.name),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.file(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
        persist::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let path = self.file(name);
        persist::write_atomic(&path, &to_csv(rows)?)?;
        Ok(path)
    }

    /// The resolved config and its hash.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        persist::write_atomic(&self.file("config.json"), cfg.to_json().as_bytes())?;
        persist::write_atomic(&self.file("config.hash"), format!("{}\n", cfg.hash()).as_bytes())
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))
}

struct Models {
    grounded: ClbpModel,
    model: ClbpModel,
}

fn obtain_models(cfg: &RunConfig, task: &data::SyntheticTask, checkpoint_path: Option<&Path>, dir: &RunDir) -> Result<Models> {
    match checkpoint_path {
        Some(p) => {
            let model = checkpoint::load(p)?;
            if model.config != cfg.model {
                return Err(Error::config(format!(
                    "checkpoint {} was built with a different model config",
                    p.display()
                )));
            }
            Ok(Models {
                grounded: commands::grounded_model(cfg, task)?,
                model,
            })
        }
        None => {
            eprintln!("training (no --checkpoint given)");
            let t = commands::train_model(cfg, task)?;
            let hash = cfg.hash();
            let rows: Vec<_> = t.state.history.iter().map(|r| commands::HistoryRow::new(&hash, r)).collect();
            dir.write_csv("train_history.csv", &rows)?;
            checkpoint::save(&t.model, &dir.file("model.json"))?;
            Ok(Models {
                grounded: t.grounded,
                model: t.model,
            })
        }
    }
}

fn print_eval(label: &str, r: &crate::eval::EvalReport) {
    println!(
        "{label:<9} clean {:6.2}%  robust {:6.2}%  ({:.4} s/sample)",
        100.0 * r.clean_accuracy,
        100.0 * r.robust_accuracy,
        r.seconds_per_sample
    );
}

#[derive(Serialize)]
struct EvalRow<'a> {
    config_hash: &'a str,
    model: &'a str,
    n: usize,
    clean_accuracy: f64,
    robust_accuracy: f64,
    seconds_per_sample: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let dir = RunDir::new(&cfg);
            dir.write_config(&cfg)?;
            let task = commands::build_task(&cfg)?;
            data::save_task(&task, &dir.file("task.json"))?;
            let t = commands::train_model(&cfg, &task)?;
            let hash = cfg.hash();
            let rows: Vec<_> = t.state.history.iter().map(|r| commands::HistoryRow::new(&hash, r)).collect();
            dir.write_csv("train_history.csv", &rows)?;
            checkpoint::save(&t.model, &dir.file("model.json"))?;
            if let Some(last) = t.state.history.last() {
                println!("trained {} steps; final loss {:.4}", t.state.step, last.total);
            }
            println!("checkpoint: {}", dir.file("model.json").display());
        }
        Command::Eval(args) => {
            let cfg = args.resolve()?;
            let dir = RunDir::new(&cfg);
            dir.write_config(&cfg)?;
            let task = commands::build_task(&cfg)?;
            let m = obtain_models(&cfg, &task, args.checkpoint.as_deref(), &dir)?;
            let split = commands::eval_split(&cfg, &task);
            let s = commands::evaluate_models(&cfg, &m.model, &split)?;
            print_eval("baseline", &s.baseline);
            print_eval("clbp", &s.clbp);
            let rows: Vec<EvalRow> = [("baseline", &s.baseline), ("clbp", &s.clbp)]
                .into_iter()
                .map(|(name, r)| EvalRow {
                    config_hash: &s.config_hash,
                    model: name,
                    n: r.n,
                    clean_accuracy: r.clean_accuracy,
                    robust_accuracy: r.robust_accuracy,
                    seconds_per_sample: r.seconds_per_sample,
                })
                .collect();
            dir.write_csv("eval.csv", &rows)?;
            dir.write_json("eval.json", &s)?;
        }
        Command::Sweep(args) => {
            let cfg = args.common.resolve()?;
            let dir = RunDir::new(&cfg);
            dir.write_config(&cfg)?;
            let task = commands::build_task(&cfg)?;
            let m = obtain_models(&cfg, &task, args.common.checkpoint.as_deref(), &dir)?;
            let split = commands::eval_split(&cfg, &task);
            let rows = commands::sweep(&cfg, &m.model, &split, args.axis, &args.values)?;
            for r in &rows {
                println!(
                    "{:?}={:<8} clean {:6.2}%  robust {:6.2}%  ({:.4} s/sample)",
                    r.axis,
                    r.value,
                    100.0 * r.clean_accuracy,
                    100.0 * r.robust_accuracy,
                    r.seconds_per_sample
                );
            }
            dir.write_csv("sweep.csv", &rows)?;
        }
        Command::Verify(args) => {
            let cfg = args.resolve()?;
            let dir = RunDir::new(&cfg);
            dir.write_config(&cfg)?;
            let task = commands::build_task(&cfg)?;
            let m = obtain_models(&cfg, &task, args.checkpoint.as_deref(), &dir)?;
            let report = commands::verify(&cfg, &m.model, &task)?;
            for c in &report.checks {
                println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            dir.write_json("verify.json", &report)?;
            dir.write_csv("depth.csv", &report.depth)?;
        }
        Command::Analyze(args) => {
            let cfg = args.resolve()?;
            let dir = RunDir::new(&cfg);
            dir.write_config(&cfg)?;
            let task = commands::build_task(&cfg)?;
            let m = obtain_models(&cfg, &task, args.checkpoint.as_deref(), &dir)?;
            let out = commands::analyze(&cfg, &m.grounded, &m.model, &task)?;
            let s = &out.summary;
            println!(
                "median delta: baseline {:.4}, clbp {:.4}; median adversarial margin: baseline {:.3}, clbp {:.3}",
                s.median_delta_baseline, s.median_delta_clbp, s.median_adv_margin_baseline, s.median_adv_margin_clbp
            );
            for l in &out.cka {
                println!("cka {}: {:.4}", l.layer, l.cka);
            }
            dir.write_csv("diagnostics.csv", &commands::diagnostics_rows(&out.config_hash, &out.diagnostics))?;
            dir.write_csv("trajectories.csv", &out.trajectories)?;
            dir.write_json("analysis.json", &serde_json::json!({
                "config_hash": out.config_hash,
                "summary": out.summary,
                "cka": out.cka,
            }))?;
        }
    }
    Ok(())
}

/// Parses process arguments, overrides included.
pub fn parse(args: Vec<String>) -> std::result::Result<Cli, clap::Error> {
    let (rest, overrides) = split_overrides(args);
    let mut cli = Cli::try_parse_from(rest)?;
    let common = match &mut cli.command {
        Command::Train(c) | Command::Eval(c) | Command::Verify(c) | Command::Analyze(c) => c,
        Command::Sweep(s) => &mut s.common,
    };
    common.overrides = overrides;
    Ok(cli)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_and_flags_resolve() {
        let cli = parse(argv("clbp eval --eps 0.2 --loss cw --aggregation.num_views=8 --name=x")).unwrap();
        let Command::Eval(c) = cli.command else { panic!() };
        let cfg = c.resolve().unwrap();
        assert_eq!(cfg.attack.epsilon, 0.2);
        assert_eq!(cfg.attack.step_size, 0.05);
        assert_eq!(cfg.attack.loss_kind, LossKind::CwMargin);
        assert_eq!(cfg.aggregation.num_views, 8);
        assert_eq!(cfg.name, "x");
    }

    #[test]
    fn sweep_values_parse() {
        let cli = parse(argv("clbp sweep --axis views --values 8,16,32")).unwrap();
        let Command::Sweep(s) = cli.command else { panic!() };
        assert_eq!(s.axis, SweepAxis::Views);
        assert_eq!(s.values, vec![8.0, 16.0, 32.0]);
        assert!(parse(argv("clbp sweep --axis nope --values 1")).is_err());
    }

    #[test]
    fn csv_rows_have_headers() {
        let rows = vec![commands::TrajectoryRow {
            config_hash: "ab".into(),
            sample: 0,
            k: 1,
            distance_to_fixed_point: 0.5,
        }];
        let text = String::from_utf8(to_csv(&rows).unwrap()).unwrap();
        assert_eq!(text, "config_hash,sample,k,distance_to_fixed_point\nab,0,1,0.5\n");
    }
}
