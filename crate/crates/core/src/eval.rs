//! Held-out evaluation under each task regime and evidence policy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;

use crate::config::Task;
use crate::diffusion::{reverse_sample, ConditioningBundle, DenoiserLayout, DiffusionSchedule, SampleOptions};
use crate::encoder::{latents, UserLatents};
use crate::error::{Error, Result};
use crate::metrics::{rank_metrics, rmse_mae, RankRecord};
use crate::model::Model;
use crate::policy::{self, BatchReliability, RelevanceField};
use crate::regime;
use crate::rng::{self, tag};
use crate::tensor::{BehaviorTensor, EvidenceMask, GridDims};
use crate::training::UserData;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvidencePolicy {
    Adaptive,
    RandomFixed,
    BlockFixed,
}

impl EvidencePolicy {
    pub const ALL: [EvidencePolicy; 3] = [Self::Adaptive, Self::RandomFixed, Self::BlockFixed];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::RandomFixed => "random-fixed",
            Self::BlockFixed => "block-fixed",
        }
    }

    fn index(self) -> u64 {
        match self {
            Self::Adaptive => 0,
            Self::RandomFixed => 1,
            Self::BlockFixed => 2,
        }
    }
}

impl fmt::Display for EvidencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvidencePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown evidence policy `{s}`")))
    }
}

/// Everything the sampler is allowed to see for one user, decided before
/// any sampling happens.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidencePlan {
    pub user: usize,
    pub task: Task,
    pub policy: EvidencePolicy,
    pub ratio: f64,
    pub budget: usize,
    pub peer: Option<usize>,
    pub mask: EvidenceMask,
    /// Masked evidence handed to the sampler: only selected coordinates
    /// are nonzero.
    pub evidence: BehaviorTensor,
    pub bundle: ConditioningBundle,
}

/// Selects `budget` candidates under a non-adaptive policy; selected
/// coordinates carry the uniform weight `1/N`.
pub fn fixed_mask(
    grid: GridDims,
    candidates: &[usize],
    budget: usize,
    policy: EvidencePolicy,
    r: &mut rng::Stream,
) -> Result<EvidenceMask> {
    if budget > candidates.len() {
        return Err(Error::Config(format!("budget {budget} exceeds {} coordinates", candidates.len())));
    }
    let n = grid.coords();
    let mut binary = vec![false; n];
    match policy {
        EvidencePolicy::RandomFixed => {
            for k in index::sample(r, candidates.len(), budget) {
                binary[candidates[k]] = true;
            }
        }
        EvidencePolicy::BlockFixed => {
            for &i in &candidates[candidates.len() - budget..] {
                binary[i] = true;
            }
        }
        EvidencePolicy::Adaptive => return Err(Error::Config("adaptive masks come from the relevance field".into())),
    }
    let w = 1.0 / n as f64;
    let weights = binary.iter().map(|&b| if b { w } else { 0.0 }).collect();
    EvidenceMask::new(grid, binary, weights)
}

/// Keeps `x` only at coordinates the mask selects.
pub fn masked_evidence(x: &BehaviorTensor, mask: &EvidenceMask) -> BehaviorTensor {
    let n = mask.binary().len();
    let mut out = x.clone();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        if !mask.binary()[i % n] {
            *v = 0.0;
        }
    }
    out
}

/// Encoder state of an evaluation pool under one task: per-user latents,
/// relevance fields and the batch reliability quantities.
pub struct PoolState {
    pub task: Task,
    pub latents: Vec<UserLatents>,
    pub fields: Vec<RelevanceField>,
    pub reliability: BatchReliability,
    pub peers: Vec<Option<usize>>,
}

impl PoolState {
    pub fn new(m: &Model, pool: &[UserData], task: Task) -> Self {
        let visible: Vec<BehaviorTensor> = pool.iter().map(|u| regime::visible(&u.tensor, task, &m.cfg)).collect();
        let lat = latents(
            m,
            &visible.iter().collect::<Vec<_>>(),
            &pool.iter().map(|u| u.profile.as_slice()).collect::<Vec<_>>(),
            task,
        );
        let fields = lat
            .iter()
            .map(|l| policy::user_field(m, task, &l.z_refined, &l.lambda_profile))
            .collect();
        let z = stmask_autograd::Matrix::from_vec(
            lat.len(),
            m.cfg.latent,
            lat.iter().flat_map(|l| l.z_refined.iter().copied()).collect(),
        );
        let reliability = BatchReliability::compute(m, &z);
        let peers = policy::nearest_peer(&reliability.similarity);
        Self {
            task,
            latents: lat,
            fields,
            reliability,
            peers,
        }
    }
}

/// Decides the evidence for user `b` of the pool. Every policy shares the
/// adaptive budget and evidence source.
pub fn plan_evidence(m: &Model, pool: &[UserData], state: &PoolState, b: usize, policy: EvidencePolicy, seed: u64) -> Result<EvidencePlan> {
    let task = state.task;
    let cfg = &m.cfg;
    let cand = regime::candidates(task, cfg);
    let ratio = policy::final_ratio(policy::base_ratio(m, task), state.reliability.scaling[b]);
    let (peer, source) = match task {
        Task::Cold => (state.peers[b], state.peers[b].map(|j| pool[j].tensor.clone())),
        _ => (None, Some(regime::visible(&pool[b].tensor, task, cfg))),
    };
    let budget = if source.is_some() {
        policy::evidence_budget(ratio, cand.len())
    } else {
        0
    };
    let id = pool[b].id as u64;
    let mut r = rng::stream(seed, &[tag::EVAL, tag::MASK, id, task.index() as u64, policy.index()]);
    let mask = match policy {
        EvidencePolicy::Adaptive => policy::sample_mask(&state.fields[b], Some(&cand), budget, &mut r, false, cfg.p_floor)?,
        _ => fixed_mask(cfg.dims.grid(), &cand, budget, policy, &mut r)?,
    };
    let source = source.unwrap_or_else(|| BehaviorTensor::zeros(cfg.dims));
    let evidence = masked_evidence(&source, &mask);
    let bundle = ConditioningBundle::build(
        m,
        &state.latents[b].f_task,
        Some(&pool[b].profile),
        task,
        mask.binary(),
        &evidence,
    )?;
    Ok(EvidencePlan {
        user: pool[b].id,
        task,
        policy,
        ratio,
        budget,
        peer,
        mask,
        evidence,
        bundle,
    })
}

/// Outcome for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEval {
    pub user: usize,
    pub task: Task,
    pub policy: EvidencePolicy,
    pub budget: usize,
    pub ratio: f64,
    pub peer: Option<usize>,
    pub rmse: f64,
    pub mae: f64,
    pub sample: BehaviorTensor,
}

/// Completes one planned user. The diffusion noise stream depends only on
/// `(seed, user, task)`, never on the policy. Peer evidence in the cold
/// regime conditions the denoiser but is not clamped into the output.
pub fn complete(m: &Model, lay: &DenoiserLayout, sched: &DiffusionSchedule, plan: &EvidencePlan, seed: u64) -> Result<BehaviorTensor> {
    let sample_seed = rng::derive_seed(seed, &[tag::EVAL, plan.user as u64, plan.task.index() as u64]);
    let opts = SampleOptions {
        clamp: plan.task != Task::Cold,
        observer: None,
    };
    reverse_sample(m, lay, &plan.mask, &plan.evidence, &plan.bundle, sched, sample_seed, opts)
}

/// Evaluates every user of `pool` under one task and policy.
pub fn evaluate(m: &Model, pool: &[UserData], task: Task, policy: EvidencePolicy, seed: u64, parallel: bool) -> Result<Vec<UserEval>> {
    let state = PoolState::new(m, pool, task);
    evaluate_with(m, pool, &state, policy, seed, parallel)
}

pub fn evaluate_with(
    m: &Model,
    pool: &[UserData],
    state: &PoolState,
    policy: EvidencePolicy,
    seed: u64,
    parallel: bool,
) -> Result<Vec<UserEval>> {
    let lay = DenoiserLayout::new(m)?;
    let sched = DiffusionSchedule::for_model(m)?;
    let region = regime::held_out(state.task, &m.cfg);
    let one = |b: usize| -> Result<UserEval> {
        let plan = plan_evidence(m, pool, state, b, policy, seed)?;
        let sample = complete(m, &lay, &sched, &plan, seed)?;
        let (rmse, mae) = rmse_mae(&sample, &pool[b].tensor, &region)?;
        Ok(UserEval {
            user: plan.user,
            task: plan.task,
            policy,
            budget: plan.budget,
            ratio: plan.ratio,
            peer: plan.peer,
            rmse,
            mae,
            sample,
        })
    };
    if parallel {
        use rayon::prelude::*;
        (0..pool.len()).into_par_iter().map(one).collect()
    } else {
        (0..pool.len()).map(one).collect()
    }
}

/// Mean RMSE and MAE over users.
pub fn mean_errors(rows: &[UserEval]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|r| r.rmse).sum::<f64>() / n,
        rows.iter().map(|r| r.mae).sum::<f64>() / n,
    )
}

/// One line of the masking comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub task: Task,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub baseline: EvidencePolicy,
    pub ours: EvidencePolicy,
    pub rmse_baseline: f64,
    pub rmse_ours: f64,
    pub mae_baseline: f64,
    pub mae_ours: f64,
}

impl ComparisonRow {
    /// `(baseline - ours) / baseline` for RMSE and MAE.
    pub fn deltas(&self) -> (f64, f64) {
        (
            relative_delta(self.rmse_baseline, self.rmse_ours),
            relative_delta(self.mae_baseline, self.mae_ours),
        )
    }
}

pub fn relative_delta(baseline: f64, ours: f64) -> f64 {
    if baseline == ours {
        0.0
    } else {
        (baseline - ours) / baseline
    }
}

/// Runs both policies on each task and seed; per-seed rows are followed
/// by one mean row per task.
pub fn compare_masking(
    m: &Model,
    pool: &[UserData],
    tasks: &[Task],
    seeds: &[u64],
    ours: EvidencePolicy,
    baseline: EvidencePolicy,
    parallel: bool,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &task in tasks {
        let state = PoolState::new(m, pool, task);
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (rb, mb) = mean_errors(&evaluate_with(m, pool, &state, baseline, seed, parallel)?);
            let (ro, mo) = if ours == baseline {
                (rb, mb)
            } else {
                mean_errors(&evaluate_with(m, pool, &state, ours, seed, parallel)?)
            };
            per_seed.push(ComparisonRow {
                task,
                seed: Some(seed),
                baseline,
                ours,
                rmse_baseline: rb,
                rmse_ours: ro,
                mae_baseline: mb,
                mae_ours: mo,
            });
        }
        let n = per_seed.len().max(1) as f64;
        let mean = |f: fn(&ComparisonRow) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        let summary = ComparisonRow {
            task,
            seed: None,
            baseline,
            ours,
            rmse_baseline: mean(|r| r.rmse_baseline),
            rmse_ours: mean(|r| r.rmse_ours),
            mae_baseline: mean(|r| r.mae_baseline),
            mae_ours: mean(|r| r.mae_ours),
        };
        rows.extend(per_seed);
        rows.push(summary);
    }
    Ok(rows)
}

pub fn write_comparison_csv(path: impl AsRef<Path>, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "task",
        "seed",
        "baseline",
        "ours",
        "rmse_baseline",
        "rmse_ours",
        "delta_rmse",
        "mae_baseline",
        "mae_ours",
        "delta_mae",
    ])?;
    for r in rows {
        let (dr, dm) = r.deltas();
        w.write_record([
            r.task.name().to_string(),
            r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
            r.baseline.name().to_string(),
            r.ours.name().to_string(),
            r.rmse_baseline.to_string(),
            r.rmse_ours.to_string(),
            dr.to_string(),
            r.mae_baseline.to_string(),
            r.mae_ours.to_string(),
            dm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_user_csv(path: impl AsRef<Path>, rows: &[UserEval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user", "task", "policy", "budget", "ratio", "peer", "rmse", "mae"])?;
    for r in rows {
        w.write_record([
            r.user.to_string(),
            r.task.name().to_string(),
            r.policy.name().to_string(),
            r.budget.to_string(),
            r.ratio.to_string(),
            r.peer.map_or_else(String::new, |p| p.to_string()),
            r.rmse.to_string(),
            r.mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Item scores read from a tensor over slots `from..T`: apps from their
/// proxy cells of the app channel, locations from the occupancy channel.
pub fn item_scores(x: &BehaviorTensor, from: usize, n_apps: usize) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims();
    let cells = d.height * d.width;
    let sum_cell = |c: usize, cell: usize| -> f64 {
        (from..d.time)
            .map(|t| x.values()[d.index(c, t, 0, 0) + cell] as f64)
            .sum()
    };
    let apps = (0..n_apps.min(cells)).map(|a| sum_cell(0, a)).collect();
    let occupancy = if d.channels > 2 { 2 } else { d.channels - 1 };
    let locations = (0..cells).map(|c| sum_cell(occupancy, c)).collect();
    (apps, locations)
}

/// The `k` highest-scoring items with a positive score, ties to the lower
/// index.
pub fn top_items(scores: &[f64], k: usize) -> Vec<usize> {
    crate::metrics::ranking(scores)
        .into_iter()
        .filter(|&i| scores[i] > 0.0)
        .take(k)
        .collect()
}

/// Cold-start ranking averaged over users, for apps and locations.
#[derive(Clone, Debug, PartialEq)]
pub struct ColdRanking {
    pub apps: RankRecord,
    pub locations: RankRecord,
    pub users: usize,
}

/// Ranks items from cold-start completions against each user's `relevant_k`
/// most engaged items in the true tensor.
pub fn cold_ranking(rows: &[UserEval], pool: &[UserData], n_apps: usize, cutoffs: &[usize], relevant_k: usize) -> Result<ColdRanking> {
    let mut acc: [Option<(RankRecord, usize)>; 2] = [None, None];
    for r in rows {
        let truth = &pool
            .iter()
            .find(|u| u.id == r.user)
            .ok_or_else(|| Error::Evaluation(format!("user {} not in pool", r.user)))?
            .tensor;
        let (pa, pl) = item_scores(&r.sample, 0, n_apps);
        let (ta, tl) = item_scores(truth, 0, n_apps);
        for (k, (pred, tr)) in [(pa, ta), (pl, tl)].into_iter().enumerate() {
            let relevant = top_items(&tr, relevant_k);
            if relevant.is_empty() {
                continue;
            }
            let rec = rank_metrics(&pred, &relevant, cutoffs)?;
            match &mut acc[k] {
                Some((sum, n)) => {
                    for i in 0..cutoffs.len() {
                        sum.recall[i] += rec.recall[i];
                        sum.ndcg[i] += rec.ndcg[i];
                        sum.mrr[i] += rec.mrr[i];
                    }
                    *n += 1;
                }
                slot => *slot = Some((rec, 1)),
            }
        }
    }
    let finish = |a: Option<(RankRecord, usize)>| -> Result<RankRecord> {
        let (mut r, n) = a.ok_or_else(|| Error::Evaluation("no user has engaged items".into()))?;
        for v in r.recall.iter_mut().chain(r.ndcg.iter_mut()).chain(r.mrr.iter_mut()) {
            *v /= n as f64;
        }
        Ok(r)
    };
    let [a, l] = acc;
    Ok(ColdRanking {
        apps: finish(a)?,
        locations: finish(l)?,
        users: rows.len(),
    })
}
