use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pnf_core::agent::ConservativeAgent;
use pnf_core::analysis::{
    compare_runs, dataset_band, histogram, rollout_distance_study, spearman, uncertainty_error_table,
    write_comparison_csv, write_unc_err_csv, Category,
};
use pnf_core::diffcore::Tensor;
use pnf_core::ensemble::DynamicsEnsemble;
use pnf_core::envdata::{generate_dataset, load_dataset, save_dataset, Behavior, EnvName, EnvSpec, UniformPolicy};
use pnf_core::rng;
use pnf_core::trainer::{evaluate_policy, fit_model, run, run_with_model, TrainCfg};
use rand::Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "pnf", version, about = "Model-based offline RL with perturb-and-filter state augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset from a toy environment.
    GenData {
        #[arg(long, default_value = "point_maze")]
        env: EnvName,
        #[arg(long, default_value = "medium")]
        behavior: Behavior,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a dynamics ensemble to a dataset.
    FitModel {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: CfgArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent; writes config.txt, model/, agent/ and metrics.jsonl.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: CfgArgs,
        /// Reuse a fitted model instead of fitting one.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Train on this leading fraction of the dataset rows.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved agent's mean action policy.
    Eval {
        #[arg(long)]
        agent: PathBuf,
        #[arg(long, default_value = "point_maze")]
        env: EnvName,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Diagnostics emitted as CSV or JSON.
    Analyze {
        #[command(subcommand)]
        mode: Analyze,
    },
}

#[derive(Args)]
struct CfgArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set f_aug=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl CfgArgs {
    fn load(&self) -> Result<TrainCfg> {
        let mut cfg = match &self.config {
            Some(p) => TrainCfg::load(p)?,
            None => TrainCfg::default(),
        };
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not KEY=VALUE");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// Nearest-neighbour distance histograms of rollout states, with and
    /// without augmentation, from one agent/model snapshot.
    NnDist {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cfg: CfgArgs,
        /// Start-batch fraction replaced in the augmented arm.
        #[arg(long = "f-aug", default_value_t = 0.5)]
        f_aug: f64,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model disagreement against true one-step error on uniform-policy
    /// model rollouts started from dataset states.
    UncErr {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired comparison of metrics files; runs are paired by position.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        baseline: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        treatment: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Per-epoch CSV; the JSON summary goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn unc_err(dataset: &Path, model: &Path, n: usize, horizon: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 || horizon == 0 {
        bail!("--n and --horizon must be positive");
    }
    let d = load_dataset(dataset)?;
    let model = DynamicsEnsemble::load(model)?;
    let spec = *d.env();
    let mut r = rng::stream(seed);
    let (mut states, mut actions) = (Vec::with_capacity(n), Vec::with_capacity(n));
    while states.len() < n {
        let mut s = d.transitions()[r.random_range(0..d.len())].s.clone();
        for _ in 0..horizon {
            let a = UniformPolicy.sample(spec.action_dim, &mut r);
            let next = model.sample_transition(&s, &a, &mut r)?.0;
            states.push(s);
            actions.push(a);
            s = next;
        }
    }
    states.truncate(n);
    actions.truncate(n);
    let rows = |v: &[Vec<f64>]| Tensor::from_rows(&v.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let band = dataset_band(&model, &d)?;
    let table = uncertainty_error_table(&model, &spec, &rows(&states)?, &rows(&actions)?, &band)?;
    write_unc_err_csv(out, &table)?;
    let u: Vec<f64> = table.iter().map(|t| t.u).collect();
    let e: Vec<f64> = table.iter().map(|t| t.true_error).collect();
    let count = |c: Category| table.iter().filter(|t| t.category == c).count();
    let summary = json!({
        "u_low": band.u_low,
        "u_high": band.u_high,
        "spearman": spearman(&u, &e)?,
        "low": count(Category::Low),
        "mid": count(Category::Mid),
        "high": count(Category::High),
    });
    println!("{summary}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { env, behavior, n, seed, out } => {
            let d = generate_dataset(&EnvSpec::new(env), behavior, n, seed)?;
            save_dataset(&d, &out)?;
            log::info!("wrote {} transitions to {}", d.len(), out.display());
        }
        Command::FitModel { dataset, cfg, out } => {
            let cfg = cfg.load()?;
            let model = fit_model(&load_dataset(&dataset)?, &cfg)?;
            model.save(&out)?;
            log::info!("saved {}-member ensemble to {}", model.n_members(), out.display());
        }
        Command::Train { dataset, cfg, model, fraction, out } => {
            let cfg = cfg.load()?;
            let art = match (model, fraction) {
                (None, None) => run(&cfg, &dataset, &out)?,
                (model, fraction) => {
                    let mut d = load_dataset(&dataset)?;
                    if let Some(f) = fraction {
                        d = d.front_fraction(f)?;
                    }
                    let model = match model {
                        Some(m) => DynamicsEnsemble::load(&m)?,
                        None => fit_model(&d, &cfg)?,
                    };
                    run_with_model(&cfg, d, model, &out)?
                }
            };
            if let Some(last) = art.metrics.last() {
                println!("{}", last.to_json_line().trim_end());
            }
        }
        Command::Eval { agent, env, episodes, seed } => {
            let agent = ConservativeAgent::load(&agent)?;
            let (ret, score) = evaluate_policy(&EnvSpec::new(env), &agent, episodes, seed)?;
            println!("{}", json!({ "mean_return": ret, "score": score }));
        }
        Command::Analyze { mode } => match mode {
            Analyze::NnDist { dataset, agent, model, cfg, f_aug, bins, out } => {
                let cfg = TrainCfg { f_aug, ..cfg.load()? };
                cfg.validate()?;
                let d = load_dataset(&dataset)?;
                let agent = ConservativeAgent::load(&agent)?;
                let model = DynamicsEnsemble::load(&model)?;
                let dist = rollout_distance_study(&d, &agent, &model, &cfg, &mut rng::stream(cfg.seed))?;
                let value = json!({
                    "horizon": cfg.H,
                    "f_aug": cfg.f_aug,
                    "baseline": histogram(&dist.baseline, bins)?,
                    "augmented": histogram(&dist.augmented, bins)?,
                });
                write_json(&out, &value)?;
                println!("{}", json!({ "baseline_median": dist.baseline_median(), "augmented_median": dist.augmented_median() }));
            }
            Analyze::UncErr { dataset, model, n, horizon, seed, out } => unc_err(&dataset, &model, n, horizon, seed, &out)?,
            Analyze::Compare { baseline, treatment, window, out } => {
                let c = compare_runs(&baseline, &treatment, window)?;
                if let Some(p) = out {
                    write_comparison_csv(&p, &c)?;
                }
                println!("{}", serde_json::to_string_pretty(&c)?);
            }
        },
    }
    Ok(())
}
