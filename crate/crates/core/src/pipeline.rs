//! End-to-end runs: generate, train, evaluate and report into one run
//! directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::eval::{self, ColdRanking, ComparisonRow, PoolState, UserEval};
use crate::io;
use crate::model::Model;
use crate::plot;
use crate::profile::ProfileEmbedding;
use crate::runconfig::RunConfig;
use crate::synth::{generate_with, UserRecord};
use crate::training::{self, EpochMetrics, UserData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    Train,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// 2 configuration, 3 training, 4 evaluation, 5 generation, 6 report.
    pub fn exit_code(&self) -> i32 {
        if matches!(self.source, Error::Config(_)) {
            return 2;
        }
        match self.stage {
            Stage::Config => 2,
            Stage::Train => 3,
            Stage::Evaluate => 4,
            Stage::Generate => 5,
            Stage::Report => 6,
        }
    }
}

pub fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |source| StageError { stage, source }
}

/// Generated records and their training view.
pub struct Dataset {
    pub records: Vec<UserRecord>,
    pub users: Vec<UserData>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let records = generate_with(cfg.data.seed, cfg.data.users, &cfg.data.generator)?;
        let users = training::users_from_records(&records, cfg.model.profile_dim, cfg.data.generator.slots_per_day)?;
        Ok(Self { records, users })
    }

    /// Training users first, the last `eval_users` for evaluation.
    pub fn split(&self, eval_users: usize) -> (&[UserData], &[UserData]) {
        self.users.split_at(self.users.len() - eval_users)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub dir: PathBuf,
    pub epochs: Vec<EpochMetrics>,
    pub comparison: Vec<ComparisonRow>,
    pub ranking: Option<ColdRanking>,
}

impl PipelineReport {
    /// Per-task mean rows.
    pub fn means(&self) -> impl Iterator<Item = &ComparisonRow> {
        self.comparison.iter().filter(|r| r.seed.is_none())
    }
}

pub fn write_data(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hist: Vec<_> = data.records.iter().enumerate().map(|(i, r)| (i, &r.history)).collect();
    io::write_events_csv(dir.join("events.csv"), &hist)?;
    let emb: Vec<(usize, ProfileEmbedding)> = data
        .users
        .iter()
        .map(|u| Ok((u.id, ProfileEmbedding::external(u.profile.clone())?)))
        .collect::<Result<_>>()?;
    let rows: Vec<_> = emb.iter().map(|(i, e)| (*i, e)).collect();
    io::write_embeddings_csv(dir.join("embeddings.csv"), &rows)?;
    for u in &data.users {
        io::write_tensor(dir.join(format!("user_{:04}.stbt", u.id)), &u.tensor)?;
    }
    Ok(())
}

pub fn write_ranking_csv(path: impl AsRef<Path>, r: &ColdRanking) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["items", "k", "recall", "ndcg", "mrr"])?;
    for (name, rec) in [("apps", &r.apps), ("locations", &r.locations)] {
        for (i, k) in rec.cutoffs.iter().enumerate() {
            w.write_record([
                name.to_string(),
                k.to_string(),
                rec.recall[i].to_string(),
                rec.ndcg[i].to_string(),
                rec.mrr[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loss curves plus the relevance field of the first evaluation user.
pub fn write_plots(dir: &Path, epochs: &[EpochMetrics], m: &Model, pool: &[UserData]) -> Result<()> {
    let curve = |f: fn(&EpochMetrics) -> f64| epochs.iter().map(|e| (e.epoch as f64, f(e))).collect::<Vec<_>>();
    let svg = plot::line_chart(
        "training loss",
        "epoch",
        &[
            ("total", curve(|e| e.loss_total)),
            ("reconstruction", curve(|e| e.loss_rec)),
            ("contrastive", curve(|e| e.loss_infonce)),
        ],
    );
    plot::write_svg(dir.join("loss.svg"), &svg)?;
    if !pool.is_empty() {
        for task in Task::ALL {
            let state = PoolState::new(m, pool, task);
            let field = &state.fields[0];
            let g = field.grid;
            let svg = plot::heatmap(&format!("{task} relevance (time x cell)"), g.time, g.cells(), &field.scores);
            plot::write_svg(dir.join(format!("relevance_{task}.svg")), &svg)?;
        }
    }
    Ok(())
}

/// Runs every stage; `snapshot` is copied verbatim into the run directory.
pub fn run_pipeline(cfg: &RunConfig, snapshot: &str, dir: &Path) -> std::result::Result<PipelineReport, StageError> {
    cfg.validate().map_err(at(Stage::Config))?;
    fs::create_dir_all(dir).map_err(|e| at(Stage::Report)(e.into()))?;
    fs::write(dir.join("config.ini"), snapshot).map_err(|e| at(Stage::Report)(e.into()))?;

    let data = Dataset::generate(cfg).map_err(at(Stage::Generate))?;
    write_data(&dir.join("data"), &data).map_err(at(Stage::Report))?;
    let (train_set, eval_set) = data.split(cfg.data.eval_users);

    let mut model = Model::new(cfg.model.clone(), cfg.train.seed).map_err(at(Stage::Config))?;
    let epochs = training::train(&mut model, train_set, &cfg.train, |_| {}).map_err(at(Stage::Train))?;
    training::write_metrics_csv(dir.join("metrics.csv"), &epochs).map_err(at(Stage::Report))?;
    training::save_checkpoint(dir.join("checkpoint.stck"), &model.store).map_err(at(Stage::Report))?;

    let report = evaluate_run(cfg, &model, eval_set, dir).map_err(at(Stage::Evaluate))?;
    if cfg.output.plots {
        write_plots(dir, &epochs, &model, eval_set).map_err(at(Stage::Report))?;
    }
    Ok(PipelineReport {
        dir: dir.to_path_buf(),
        epochs,
        comparison: report.0,
        ranking: report.1,
    })
}

/// Masking comparison, per-user rows for the first seed and cold ranking.
pub fn evaluate_run(
    cfg: &RunConfig,
    model: &Model,
    pool: &[UserData],
    dir: &Path,
) -> Result<(Vec<ComparisonRow>, Option<ColdRanking>)> {
    let e = &cfg.eval;
    let rows = eval::compare_masking(model, pool, &e.tasks, &e.seeds, e.ours, e.baseline, e.parallel)?;
    eval::write_comparison_csv(dir.join("comparison.csv"), &rows)?;
    let mut per_user: Vec<UserEval> = Vec::new();
    let mut ranking = None;
    for &task in &e.tasks {
        let got = eval::evaluate(model, pool, task, e.ours, e.seeds[0], e.parallel)?;
        if task == Task::Cold {
            let r = eval::cold_ranking(&got, pool, cfg.data.generator.n_apps, &e.cutoffs, e.relevant_k)?;
            write_ranking_csv(dir.join("ranking.csv"), &r)?;
            ranking = Some(r);
        }
        per_user.extend(got);
    }
    eval::write_user_csv(dir.join("eval_users.csv"), &per_user)?;
    Ok((rows, ranking))
}

/// Mean relevance mass per time slot of the pool under `task`, for
/// inspecting what the policy learned.
pub fn temporal_mass(m: &Model, pool: &[UserData], task: Task) -> Vec<f64> {
    let state = PoolState::new(m, pool, task);
    let g = m.cfg.dims.grid();
    let mut out = vec![0.0; g.time];
    for f in &state.fields {
        for (i, s) in f.scores.iter().enumerate() {
            out[i / g.cells()] += s / state.fields.len() as f64;
        }
    }
    out
}
