//! Joint training: masked reconstruction plus a contrastive term tying
//! short- and long-range factors of the same user.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use stmask_autograd::{Graph, Matrix, Var};

use crate::config::{Prediction, Task, TrainConfig};
use crate::diffusion::{conditioning_tape, denoise_tape, evidence_planes, patchify, DenoiserLayout, DiffusionSchedule};
use crate::encoder::{behavior_summary, encode_batch, stack};
use crate::error::{format_err, Error, Result};
use crate::model::Model;
use crate::params::ParameterStore;
use crate::policy::{self, BatchReliability, RelevanceField};
use crate::profile;
use crate::regime;
use crate::rng::{self, tag};
use crate::synth::UserRecord;
use crate::tensor::{BehaviorTensor, EvidenceMask};

/// One user as seen by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct UserData {
    pub id: usize,
    pub tensor: BehaviorTensor,
    pub profile: Vec<f64>,
}

impl UserData {
    /// Profile embedding from the record's event history.
    pub fn from_record(id: usize, rec: &UserRecord, profile_dim: usize, slots_per_day: usize) -> Result<Self> {
        let summary = profile::summarize(&rec.history, profile::DEFAULT_BINS, slots_per_day)?;
        Ok(Self {
            id,
            tensor: rec.tensor.clone(),
            profile: profile::embed_dim(&summary, profile_dim).vec().to_vec(),
        })
    }
}

pub fn users_from_records(records: &[UserRecord], profile_dim: usize, slots_per_day: usize) -> Result<Vec<UserData>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| UserData::from_record(i, r, profile_dim, slots_per_day))
        .collect()
}

/// Mean squared difference over all entries.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Symmetric InfoNCE on plain values: row `b` of `short` is paired with
/// row `b` of `long`; every other row is a negative.
pub fn infonce_loss(short: &Matrix, long: &Matrix, temperature: f64) -> f64 {
    let norm = |m: &Matrix| {
        let mut m = m.clone();
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        m
    };
    let logits = norm(short).matmul_nt(&norm(long)).map(|v| v / temperature);
    let ce = |l: &Matrix| {
        (0..l.rows())
            .map(|i| {
                let row = l.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[i]
            })
            .sum::<f64>()
            / l.rows() as f64
    };
    0.5 * (ce(&logits) + ce(&logits.transpose()))
}

/// The same loss on the tape; `log_temp` is a `1 x 1` variable.
pub fn infonce_tape(g: &mut Graph, short: Var, long: Var, log_temp: Var) -> Var {
    let b = g.shape(short).0;
    let s = g.l2_normalize_rows(short);
    let l = g.l2_normalize_rows(long);
    let cos = g.matmul_nt(s, l);
    let temp = g.exp(log_temp);
    let inv = g.recip(temp);
    let logits = g.mul_scalar(cos, inv);
    let eye = g.constant(Matrix::identity(b));
    let rows = g.log_softmax_rows(logits);
    let rows = g.mul(rows, eye);
    let t = g.transpose(logits);
    let cols = g.log_softmax_rows(t);
    let cols = g.mul(cols, eye);
    let both = g.add(rows, cols);
    let s = g.sum(both);
    g.scale(s, -0.5 / b as f64)
}

/// Random draws of one batch that do not depend on the parameters.
#[derive(Clone, Debug)]
pub struct BatchDraws {
    pub task: Task,
    pub timesteps: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
    pub mask_seeds: Vec<u64>,
}

impl BatchDraws {
    pub fn new(seed: u64, epoch: usize, batch: usize, users: &[&UserData], len: usize, horizon: usize) -> Self {
        let e = epoch as u64;
        let task = Task::ALL[rng::stream(seed, &[tag::TASK, e, batch as u64]).random_range(0..3)];
        Self::with_task(seed, epoch, task, users, len, horizon)
    }

    pub fn with_task(seed: u64, epoch: usize, task: Task, users: &[&UserData], len: usize, horizon: usize) -> Self {
        let e = epoch as u64;
        let timesteps = users
            .iter()
            .map(|u| rng::stream(seed, &[tag::TIMESTEP, e, u.id as u64]).random_range(1..=horizon))
            .collect();
        let noise = users
            .iter()
            .map(|u| {
                let mut r = rng::stream(seed, &[tag::NOISE, e, u.id as u64]);
                (0..len).map(|_| rng::normal(&mut r)).collect()
            })
            .collect();
        let mask_seeds = users
            .iter()
            .map(|u| rng::derive_seed(seed, &[tag::MASK, e, u.id as u64, task.index() as u64]))
            .collect();
        Self {
            task,
            timesteps,
            noise,
            mask_seeds,
        }
    }
}

/// Parameter-dependent discrete choices of one batch: held fixed when
/// the loss is re-evaluated for finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub masks: Vec<EvidenceMask>,
    /// Index within the batch of the tensor the evidence is read from.
    pub sources: Vec<Option<usize>>,
    pub ratios: Vec<f64>,
    pub gammas: Vec<f64>,
}

/// Draws the mask plan from the current relevance values.
pub fn plan_masks(m: &Model, task: Task, z: &Matrix, fields: &[RelevanceField], seeds: &[u64]) -> Result<MaskPlan> {
    let rel = BatchReliability::compute(m, z);
    let rho = policy::base_ratio(m, task);
    let cand = regime::candidates(task, &m.cfg);
    let peers = policy::nearest_peer(&rel.similarity);
    let mut plan = MaskPlan {
        masks: Vec::new(),
        sources: Vec::new(),
        ratios: Vec::new(),
        gammas: rel.scaling.clone(),
    };
    for (b, field) in fields.iter().enumerate() {
        let ratio = policy::final_ratio(rho, rel.scaling[b]);
        let source = if task == Task::Cold { peers[b] } else { Some(b) };
        let budget = if source.is_some() {
            policy::evidence_budget(ratio, cand.len())
        } else {
            0
        };
        let mut r = rng::Stream::from_seed_u64(seeds[b]);
        plan.masks
            .push(policy::sample_mask(field, Some(&cand), budget, &mut r, false, m.cfg.p_floor)?);
        plan.sources.push(source);
        plan.ratios.push(ratio);
    }
    Ok(plan)
}

/// Seeds a stream directly from a derived seed.
trait FromSeed {
    fn from_seed_u64(seed: u64) -> Self;
}

impl FromSeed for rng::Stream {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}

/// One batch member's reconstruction pass, taped on its own graph.
#[derive(Clone, Debug)]
pub struct MemberOutcome {
    pub loss: f64,
    pub prediction: Vec<f64>,
    pub target: Vec<f64>,
    /// Gradients of `loss` for every store array, in store order.
    pub param_grads: Vec<Matrix>,
    /// `∂loss/∂scores`, nonzero only at selected coordinates.
    pub score_grads: Vec<f64>,
    pub f_task_grads: Vec<f64>,
}

/// Everything the reconstruction term needs for one user.
#[derive(Clone, Copy, Debug)]
pub struct MemberInput<'a> {
    pub task: Task,
    pub x0: &'a BehaviorTensor,
    /// Tensor the evidence is read from; `None` gives zero evidence.
    pub evidence: Option<&'a BehaviorTensor>,
    pub mask: &'a EvidenceMask,
    pub scores: &'a [f64],
    pub f_task: &'a [f64],
    pub profile: &'a [f64],
    pub t: usize,
    pub noise: &'a [f64],
}

/// Mean squared error between the denoiser output and its target for
/// one user, with gradients for the parameters and the two inputs that
/// come from the encoder.
pub fn reconstruction_member(
    m: &Model,
    lay: &DenoiserLayout,
    sched: &DiffusionSchedule,
    inp: &MemberInput<'_>,
) -> Result<MemberOutcome> {
    let cfg = &m.cfg;
    let x0 = inp.x0.to_f64();
    let xt = crate::diffusion::forward_values(&x0, inp.t, inp.noise, sched)?;
    let zeros;
    let source = match inp.evidence {
        Some(x) => x,
        None => {
            zeros = BehaviorTensor::zeros(cfg.dims);
            &zeros
        }
    };
    let ev = patchify(&evidence_planes(inp.mask.binary(), source)?, cfg.patch)?;
    let mut g = Graph::new();
    let p = m.store.bind(&mut g, true);
    let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec());
    let scores = g.param(row(inp.scores));
    let f_task = g.param(row(inp.f_task));
    let ind = g.constant(row(&inp.mask.indicator()));
    let weights = g.mul(scores, ind);
    let ev = g.constant(ev.tokens);
    let prof = g.constant(row(inp.profile));
    let cond = conditioning_tape(&mut g, &p, m, f_task, Some(prof), inp.task);
    let xt_var = g.constant(row(&xt));
    let pred = denoise_tape(&mut g, &p, m, lay, xt_var, weights, ev, cond, inp.t);
    let target = match cfg.prediction {
        Prediction::CleanSignal => x0,
        Prediction::Noise => inp.noise.to_vec(),
    };
    let tv = g.constant(row(&target));
    let diff = g.sub(pred, tv);
    let sq = g.square(diff);
    let loss = g.mean(sq);
    let mut grads = g.backward(loss);
    let take = |grads: &mut stmask_autograd::Gradients, v: Var, n: usize| {
        grads.take(v).map_or_else(|| vec![0.0; n], Matrix::into_vec)
    };
    Ok(MemberOutcome {
        loss: g.value(loss).get(0, 0),
        prediction: g.value(pred).data().to_vec(),
        target,
        score_grads: take(&mut grads, scores, inp.scores.len()),
        f_task_grads: take(&mut grads, f_task, inp.f_task.len()),
        param_grads: m.store.collect_grads(&p, &grads),
    })
}

/// Result of one batch: loss terms, gradients and the discrete choices.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub total: f64,
    pub rec: f64,
    pub infonce: Option<f64>,
    /// Gradients of `total` in store order.
    pub grads: Vec<Matrix>,
    pub plan: MaskPlan,
    pub scores: Vec<Vec<f64>>,
    pub members: Vec<MemberOutcome>,
}

/// Composite loss and gradients of one batch.
///
/// The encoder, relevance and contrastive parts live on one tape; each
/// member's denoiser pass lives on its own tape and is folded back in
/// index order through its input gradients, so serial and parallel runs
/// agree bit-for-bit. With `plan = None` the masks are drawn from this
/// pass's relevance values; otherwise the given plan is reused.
/// `lambda_con = None` drops the contrastive term entirely.
pub fn batch_step(
    m: &Model,
    users: &[&UserData],
    draws: &BatchDraws,
    plan: Option<&MaskPlan>,
    lambda_con: Option<f64>,
    parallel: bool,
) -> Result<BatchOutcome> {
    let task = draws.task;
    let cfg = &m.cfg;
    let lay = DenoiserLayout::new(m)?;
    let sched = DiffusionSchedule::for_model(m)?;
    let mut g = Graph::new();
    let p = m.store.bind(&mut g, true);
    let summaries = stack(
        &users
            .iter()
            .map(|u| behavior_summary(&regime::visible(&u.tensor, task, cfg)))
            .collect::<Vec<_>>(),
    );
    let profiles = stack(&users.iter().map(|u| u.profile.clone()).collect::<Vec<_>>());
    let lat = encode_batch(&mut g, &p, m, summaries, profiles, task);
    let b = users.len();
    let mut score_vars = Vec::with_capacity(b);
    let mut fields = Vec::with_capacity(b);
    for i in 0..b {
        let z = g.slice_rows(lat.z, i, 1);
        let l = g.slice_rows(lat.lambda, i, 1);
        let s = policy::relevance_tape(&mut g, &p, m, z, l, task);
        fields.push(RelevanceField::from_scores(cfg.dims.grid(), g.value(s).data().to_vec())?);
        score_vars.push(s);
    }
    let plan = match plan {
        Some(pl) => pl.clone(),
        None => plan_masks(m, task, g.value(lat.z), &fields, &draws.mask_seeds)?,
    };
    let f_task = g.value(lat.f_task).clone();
    let member = |i: usize| {
        reconstruction_member(
            m,
            &lay,
            &sched,
            &MemberInput {
                task,
                x0: &users[i].tensor,
                evidence: plan.sources[i].map(|j| &users[j].tensor),
                mask: &plan.masks[i],
                scores: &fields[i].scores,
                f_task: f_task.row(i),
                profile: &users[i].profile,
                t: draws.timesteps[i],
                noise: &draws.noise[i],
            },
        )
    };
    let members: Vec<MemberOutcome> = if parallel {
        use rayon::prelude::*;
        (0..b).into_par_iter().map(member).collect::<Result<_>>()?
    } else {
        (0..b).map(member).collect::<Result<_>>()?
    };

    let inv_b = 1.0 / b as f64;
    let mut surrogate = Vec::with_capacity(2 * b + 1);
    for (i, mo) in members.iter().enumerate() {
        let gs = g.constant(Matrix::from_vec(1, mo.score_grads.len(), mo.score_grads.iter().map(|v| v * inv_b).collect()));
        let ws = g.mul(score_vars[i], gs);
        surrogate.push(g.sum(ws));
        let gf = g.constant(Matrix::from_vec(1, mo.f_task_grads.len(), mo.f_task_grads.iter().map(|v| v * inv_b).collect()));
        let fi = g.slice_rows(lat.f_task, i, 1);
        let wf = g.mul(fi, gf);
        surrogate.push(g.sum(wf));
    }
    let infonce = lambda_con.map(|lambda| {
        let nce = infonce_tape(&mut g, lat.f_short, lat.f_long, p[m.infonce_log_temp]);
        surrogate.push(g.scale(nce, lambda));
        (lambda, g.value(nce).get(0, 0))
    });
    let cat = g.concat_cols(&surrogate);
    let root = g.sum(cat);
    let mut grads = m.store.collect_grads(&p, &g.backward(root));
    let mut rec = 0.0;
    for mo in &members {
        rec += mo.loss;
        for (acc, gr) in grads.iter_mut().zip(&mo.param_grads) {
            for (a, v) in acc.data_mut().iter_mut().zip(gr.data()) {
                *a += v * inv_b;
            }
        }
    }
    rec *= inv_b;
    let total = infonce.map_or(rec, |(lambda, nce)| rec + lambda * nce);
    Ok(BatchOutcome {
        total,
        rec,
        infonce: infonce.map(|(_, v)| v),
        grads,
        plan,
        scores: fields.into_iter().map(|f| f.scores).collect(),
        members,
    })
}

/// Total loss, per-array gradients in store order and the mask plan used.
pub fn loss_and_grads(
    m: &Model,
    users: &[&UserData],
    draws: &BatchDraws,
    plan: Option<&MaskPlan>,
    lambda_con: Option<f64>,
) -> Result<(f64, Vec<Matrix>, MaskPlan)> {
    let out = batch_step(m, users, draws, plan, lambda_con, false)?;
    Ok((out.total, out.grads, out.plan))
}

/// Adaptive moment estimation over every array of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        let zeros = |s: &ParameterStore| {
            s.ids()
                .map(|id| {
                    let (r, c) = s.get(id).shape();
                    Matrix::zeros(r, c)
                })
                .collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn apply(&mut self, store: &mut ParameterStore, grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[k].data();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let mut delta = vec![0.0; g.len()];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                delta[j] = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
            if self.lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            for (x, d) in p.iter_mut().zip(delta) {
                *x -= d;
            }
        }
    }
}

pub fn sgd_step(store: &mut ParameterStore, grads: &[Matrix], lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        for (x, g) in store.get_mut(id).data_mut().iter_mut().zip(grads[k].data()) {
            *x -= lr * g;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_infonce: f64,
    pub mean_rho: f64,
    pub mean_gamma: f64,
}

/// Optimizer state carried across epochs.
pub enum Optimizer {
    Adam(Adam),
    Sgd(f64),
}

impl Optimizer {
    pub fn new(store: &ParameterStore, cfg: &TrainConfig) -> Self {
        if cfg.plain_sgd {
            Optimizer::Sgd(cfg.learning_rate)
        } else {
            Optimizer::Adam(Adam::new(store, cfg.learning_rate))
        }
    }

    fn apply(&mut self, store: &mut ParameterStore, grads: &[Matrix]) {
        match self {
            Optimizer::Adam(a) => a.apply(store, grads),
            Optimizer::Sgd(lr) => sgd_step(store, grads, *lr),
        }
    }
}

/// Batches of one epoch: a seeded permutation cut into `batch_size`
/// chunks; a trailing single user joins the previous chunk.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::BATCH, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

pub fn train_epoch(
    m: &mut Model,
    data: &[UserData],
    cfg: &TrainConfig,
    epoch: usize,
    opt: &mut Optimizer,
) -> Result<EpochMetrics> {
    if data.len() < 2 {
        return Err(Error::Config("training needs at least two users".into()));
    }
    cfg.validate()?;
    let lambda = (!cfg.reconstruction_only).then_some(cfg.lambda_con);
    let mut sums = [0.0f64; 5];
    let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
    for (bi, idx) in batches.iter().enumerate() {
        let users: Vec<&UserData> = idx.iter().map(|&i| &data[i]).collect();
        let draws = BatchDraws::new(cfg.seed, epoch, bi, &users, m.cfg.dims.len(), m.cfg.horizon);
        let out = batch_step(m, &users, &draws, None, lambda, cfg.parallel)?;
        if !out.total.is_finite() {
            let (array, what) = match m.store.first_non_finite() {
                Some(name) => (name, "parameter"),
                None => (m.store.largest().unwrap_or_default(), "loss; largest parameter"),
            };
            return Err(Error::Divergence {
                array: array.to_string(),
                what,
            });
        }
        if let Some(k) = out.grads.iter().position(|gr| !gr.is_finite()) {
            return Err(Error::Divergence {
                array: m.store.ids().nth(k).map(|id| m.store.name(id).to_string()).unwrap_or_default(),
                what: "gradient",
            });
        }
        sums[0] += out.total;
        sums[1] += out.rec;
        sums[2] += out.infonce.unwrap_or(0.0);
        sums[3] += out.plan.ratios.iter().sum::<f64>() / users.len() as f64;
        sums[4] += out.plan.gammas.iter().sum::<f64>() / users.len() as f64;
        let grads = out.grads;
        opt.apply(&mut m.store, &grads);
        if cfg.precision == 32 {
            m.store.round_to_f32();
        }
        if let Some(name) = m.store.first_non_finite() {
            return Err(Error::Divergence {
                array: name.to_string(),
                what: "parameter",
            });
        }
    }
    let nb = batches.len() as f64;
    Ok(EpochMetrics {
        epoch,
        loss_total: sums[0] / nb,
        loss_rec: sums[1] / nb,
        loss_infonce: sums[2] / nb,
        mean_rho: sums[3] / nb,
        mean_gamma: sums[4] / nb,
    })
}

/// Runs `cfg.epochs` epochs, reporting each one to `on_epoch`.
pub fn train(
    m: &mut Model,
    data: &[UserData],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut opt = Optimizer::new(&m.store, cfg);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let rec = train_epoch(m, data, cfg, epoch, &mut opt)?;
        on_epoch(&rec);
        out.push(rec);
    }
    Ok(out)
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss_total", "loss_rec", "loss_infonce", "mean_rho", "mean_gamma"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.loss_total.to_string(),
            r.loss_rec.to_string(),
            r.loss_infonce.to_string(),
            r.mean_rho.to_string(),
            r.mean_gamma.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub array: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradFailure>,
    pub failures: Vec<GradFailure>,
}

/// Central differences with step `1e-5` against analytic gradients on at
/// most `max_entries` evenly spaced entries of every array.
pub fn grad_check(
    store: &ParameterStore,
    mut loss: impl FnMut(&ParameterStore) -> (f64, Vec<Matrix>),
    max_entries: usize,
    tolerance: f64,
) -> GradReport {
    let h = 1e-5;
    let (_, analytic) = loss(store);
    let mut report = GradReport::default();
    let mut probe = store.clone();
    for (k, id) in store.ids().enumerate() {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            (0..max_entries).map(|j| j * n / max_entries).collect()
        };
        for i in picks {
            let x = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x + h;
            let up = loss(&probe).0;
            probe.get_mut(id).data_mut()[i] = x - h;
            let down = loss(&probe).0;
            probe.get_mut(id).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            let rec = GradFailure {
                array: store.name(id).to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            };
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(rec.clone());
            }
            if rel > tolerance {
                report.failures.push(rec);
            }
        }
    }
    report
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `STCK` bytes: magic, version, count, then per array the name, rank,
/// dims and `f64` payload, all little-endian.
pub fn encode_checkpoint(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let m = store.get(id);
        buf.push(2);
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err("checkpoint", format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Arrays in file order; rank-1 arrays load as single rows.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err("checkpoint", "name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(format_err("checkpoint", format!("`{name}` has rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format_err("checkpoint", format!("`{name}` dims overflow")))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if r.at != bytes.len() {
        return Err(format_err("checkpoint", format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParameterStore) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(store))?;
    Ok(())
}

/// Loads arrays into `store`, which must have exactly the same layout.
pub fn load_checkpoint(path: impl AsRef<Path>, store: &mut ParameterStore) -> Result<()> {
    restore(store, decode_checkpoint(&fs::read(path)?)?)
}

pub fn restore(store: &mut ParameterStore, arrays: Vec<(String, Matrix)>) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(format_err(
            "checkpoint",
            format!("{} arrays, model has {}", arrays.len(), store.len()),
        ));
    }
    for (name, value) in arrays {
        let id = store
            .id(&name)
            .ok_or_else(|| format_err("checkpoint", format!("unknown array `{name}`")))?;
        store
            .set(id, value)
            .map_err(|e| format_err("checkpoint", e.to_string()))?;
    }
    Ok(())
}
