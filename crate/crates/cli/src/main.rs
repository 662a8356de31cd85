//! `stmask`: data generation, training, regime evaluation and masking
//! comparisons driven by one run configuration file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stmask_core::config::Task;
use stmask_core::diffusion::{reverse_sample, DenoiserLayout, DiffusionSchedule, SampleOptions};
use stmask_core::eval::{self, PoolState};
use stmask_core::io;
use stmask_core::model::Model;
use stmask_core::pipeline::{self, at, Dataset, Stage, StageError};
use stmask_core::rng::{self, tag};
use stmask_core::runconfig::RunConfig;
use stmask_core::tensor::BehaviorTensor;
use stmask_core::training;
use stmask_core::Error;

type Outcome = std::result::Result<(), StageError>;

#[derive(Parser)]
#[command(name = "stmask", version, about = "Adaptive spatio-temporal evidence masking with diffusion completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the data and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output.dir` of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training precision in bits.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Args, Clone)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Parameters saved by `train` or `run`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restricts the run to one task regime.
    #[arg(long)]
    regime: Option<Task>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen(Common),
    /// Train a model and save metrics and a checkpoint.
    Train(Common),
    /// Evaluate the configured policy on the evaluation users.
    Eval(FromCheckpoint),
    /// Compare the configured policy against the baseline policy.
    Compare(FromCheckpoint),
    /// Complete one evaluation user's tensor.
    Sample {
        #[command(flatten)]
        from: FromCheckpoint,
        /// Position of the user within the evaluation users.
        #[arg(long, default_value_t = 0)]
        user: usize,
        /// Also write the state after every reverse step.
        #[arg(long)]
        trajectory: bool,
    },
    /// Write the evidence masks the configured policy selects.
    ExportMasks(FromCheckpoint),
    /// Generate, train, evaluate and report in one go.
    Run(Common),
}

fn load(c: &Common) -> std::result::Result<(RunConfig, String, PathBuf), StageError> {
    let (mut cfg, text) = RunConfig::load(&c.config).map_err(at(Stage::Config))?;
    if let Some(s) = c.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    if let Some(p) = &c.precision {
        cfg.train.precision = p.parse().map_err(|_| at(Stage::Config)(Error::Config(format!("precision {p}"))))?;
    }
    cfg.validate().map_err(at(Stage::Config))?;
    let out = c.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&out).map_err(|e| at(Stage::Report)(e.into()))?;
    Ok((cfg, text, out))
}

fn restore(cfg: &RunConfig, path: &Path) -> std::result::Result<Model, StageError> {
    let mut m = Model::new(cfg.model.clone(), cfg.train.seed).map_err(at(Stage::Config))?;
    training::load_checkpoint(path, &mut m.store).map_err(|e| {
        at(Stage::Config)(Error::Config(format!("checkpoint {}: {e}", path.display())))
    })?;
    Ok(m)
}

fn tasks(cfg: &RunConfig, regime: Option<Task>) -> Vec<Task> {
    regime.map_or_else(|| cfg.eval.tasks.clone(), |t| vec![t])
}

fn gen(c: &Common) -> Outcome {
    let (cfg, _, out) = load(c)?;
    let data = Dataset::generate(&cfg).map_err(at(Stage::Generate))?;
    pipeline::write_data(&out, &data).map_err(at(Stage::Report))?;
    println!("wrote {} users to {}", data.users.len(), out.display());
    Ok(())
}

fn train(c: &Common) -> Outcome {
    let (cfg, text, out) = load(c)?;
    fs::write(out.join("config.ini"), text).map_err(|e| at(Stage::Report)(e.into()))?;
    let data = Dataset::generate(&cfg).map_err(at(Stage::Generate))?;
    let (train_set, _) = data.split(cfg.data.eval_users);
    let mut m = Model::new(cfg.model.clone(), cfg.train.seed).map_err(at(Stage::Config))?;
    let epochs = training::train(&mut m, train_set, &cfg.train, |e| {
        println!(
            "epoch {:>3}  total {:.6}  rec {:.6}  infonce {:.6}",
            e.epoch, e.loss_total, e.loss_rec, e.loss_infonce
        );
    })
    .map_err(at(Stage::Train))?;
    training::write_metrics_csv(out.join("metrics.csv"), &epochs).map_err(at(Stage::Report))?;
    training::save_checkpoint(out.join("checkpoint.stck"), &m.store).map_err(at(Stage::Report))?;
    println!("checkpoint written to {}", out.join("checkpoint.stck").display());
    Ok(())
}

fn evaluate(f: &FromCheckpoint) -> Outcome {
    let (cfg, _, out) = load(&f.common)?;
    let m = restore(&cfg, &f.checkpoint)?;
    let data = Dataset::generate(&cfg).map_err(at(Stage::Generate))?;
    let (_, pool) = data.split(cfg.data.eval_users);
    let e = &cfg.eval;
    let mut rows = Vec::new();
    for task in tasks(&cfg, f.regime) {
        let got = eval::evaluate(&m, pool, task, e.ours, e.seeds[0], e.parallel).map_err(at(Stage::Evaluate))?;
        let (rmse, mae) = eval::mean_errors(&got);
        println!("{task:<6} {:<13} rmse {rmse:.6}  mae {mae:.6}", e.ours.name());
        if task == Task::Cold {
            let r = eval::cold_ranking(&got, pool, cfg.data.generator.n_apps, &e.cutoffs, e.relevant_k)
                .map_err(at(Stage::Evaluate))?;
            pipeline::write_ranking_csv(out.join("ranking.csv"), &r).map_err(at(Stage::Report))?;
            for (i, k) in r.apps.cutoffs.iter().enumerate() {
                println!(
                    "cold   apps@{k} recall {:.4} ndcg {:.4} mrr {:.4} | locations@{k} recall {:.4} ndcg {:.4} mrr {:.4}",
                    r.apps.recall[i], r.apps.ndcg[i], r.apps.mrr[i], r.locations.recall[i], r.locations.ndcg[i], r.locations.mrr[i]
                );
            }
        }
        rows.extend(got);
    }
    eval::write_user_csv(out.join("eval_users.csv"), &rows).map_err(at(Stage::Report))
}

fn compare(f: &FromCheckpoint) -> Outcome {
    let (cfg, _, out) = load(&f.common)?;
    let m = restore(&cfg, &f.checkpoint)?;
    let data = Dataset::generate(&cfg).map_err(at(Stage::Generate))?;
    let (_, pool) = data.split(cfg.data.eval_users);
    let e = &cfg.eval;
    let rows = eval::compare_masking(&m, pool, &tasks(&cfg, f.regime), &e.seeds, e.ours, e.baseline, e.parallel)
        .map_err(at(Stage::Evaluate))?;
    eval::write_comparison_csv(out.join("comparison.csv"), &rows).map_err(at(Stage::Report))?;
    for r in rows.iter().filter(|r| r.seed.is_none()) {
        let (d_rmse, d_mae) = r.deltas();
        println!(
            "{:<6} rmse {} {:.6} vs {} {:.6} (delta {:+.4})  mae delta {:+.4}",
            r.task, r.baseline, r.rmse_baseline, r.ours, r.rmse_ours, d_rmse, d_mae
        );
    }
    Ok(())
}

fn sample(f: &FromCheckpoint, user: usize, trajectory: bool) -> Outcome {
    let (cfg, _, out) = load(&f.common)?;
    let m = restore(&cfg, &f.checkpoint)?;
    let data = Dataset::generate(&cfg).map_err(at(Stage::Generate))?;
    let (_, pool) = data.split(cfg.data.eval_users);
    if user >= pool.len() {
        return Err(at(Stage::Config)(Error::Config(format!(
            "user {user} outside the {} evaluation users",
            pool.len()
        ))));
    }
    let task = f.regime.unwrap_or(Task::Short);
    let seed = cfg.eval.seeds[0];
    let lay = DenoiserLayout::new(&m).map_err(at(Stage::Evaluate))?;
    let sched = DiffusionSchedule::for_model(&m).map_err(at(Stage::Evaluate))?;
    let state = PoolState::new(&m, pool, task);
    let plan = eval::plan_evidence(&m, pool, &state, user, cfg.eval.ours, seed).map_err(at(Stage::Evaluate))?;
    let sample = if trajectory {
        let dir = out.join("trajectory");
        fs::create_dir_all(&dir).map_err(|e| at(Stage::Report)(e.into()))?;
        let dims = m.cfg.dims;
        let mut failed = None;
        let mut dump = |t: usize, x: &[f64]| {
            let step = BehaviorTensor::from_f64(dims, x)
                .and_then(|x| io::write_tensor(dir.join(format!("step_{t:03}.stbt")), &x));
            if let Err(e) = step {
                failed.get_or_insert(e);
            }
        };
        let opts = SampleOptions {
            clamp: task != Task::Cold,
            observer: Some(&mut dump),
        };
        let seed = rng::derive_seed(seed, &[tag::EVAL, plan.user as u64, task.index() as u64]);
        let x = reverse_sample(&m, &lay, &plan.mask, &plan.evidence, &plan.bundle, &sched, seed, opts)
            .map_err(at(Stage::Evaluate))?;
        if let Some(e) = failed {
            return Err(at(Stage::Report)(e));
        }
        x
    } else {
        eval::complete(&m, &lay, &sched, &plan, seed).map_err(at(Stage::Evaluate))?
    };
    let path = out.join(format!("sample_{task}_{:04}.stbt", plan.user));
    io::write_tensor(&path, &sample).map_err(at(Stage::Report))?;
    println!(
        "user {} ({task}): budget {} evidence coordinates, sample written to {}",
        plan.user,
        plan.budget,
        path.display()
    );
    Ok(())
}

fn export_masks(f: &FromCheckpoint) -> Outcome {
    let (cfg, _, out) = load(&f.common)?;
    let m = restore(&cfg, &f.checkpoint)?;
    let data = Dataset::generate(&cfg).map_err(at(Stage::Generate))?;
    let (_, pool) = data.split(cfg.data.eval_users);
    let dir = out.join("masks");
    fs::create_dir_all(&dir).map_err(|e| at(Stage::Report)(e.into()))?;
    let mut written = 0;
    for task in tasks(&cfg, f.regime) {
        let state = PoolState::new(&m, pool, task);
        for policy in [cfg.eval.ours, cfg.eval.baseline] {
            for b in 0..pool.len() {
                let plan =
                    eval::plan_evidence(&m, pool, &state, b, policy, cfg.eval.seeds[0]).map_err(at(Stage::Evaluate))?;
                let path = dir.join(format!("{task}_{}_{:04}.csv", policy.name(), plan.user));
                io::write_mask_csv(path, &plan.mask).map_err(at(Stage::Report))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} masks to {}", dir.display());
    Ok(())
}

fn run(c: &Common) -> Outcome {
    let (cfg, text, out) = load(c)?;
    let report = pipeline::run_pipeline(&cfg, &text, &out)?;
    for r in report.means() {
        let (d_rmse, _) = r.deltas();
        println!(
            "{:<6} rmse {} {:.6} vs {} {:.6} (delta {:+.4})",
            r.task, r.baseline, r.rmse_baseline, r.ours, r.rmse_ours, d_rmse
        );
    }
    println!("run written to {}", report.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Train(c) => train(c),
        Command::Eval(f) => evaluate(f),
        Command::Compare(f) => compare(f),
        Command::Sample { from, user, trajectory } => sample(from, *user, *trajectory),
        Command::ExportMasks(f) => export_masks(f),
        Command::Run(c) => run(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
