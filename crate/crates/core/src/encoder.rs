//! Behavior encoder and the hierarchical latent chain.
//!
//! `x_obs -> h -> (f_short, f_long, f_pat) -> f_task -> (fisher, λ) -> z`

use stmask_autograd::{Graph, Matrix, Var};

use crate::config::Task;
use crate::model::Model;
use crate::params::Bound;
use crate::tensor::BehaviorTensor;

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Spatial means per `(c, t)` followed by temporal means per `(c, h, w)`.
pub fn behavior_summary(x: &BehaviorTensor) -> Vec<f64> {
    let d = x.dims();
    let cells = d.height * d.width;
    let v = x.values();
    let mut out = Vec::with_capacity(d.channels * (d.time + cells));
    for c in 0..d.channels {
        for t in 0..d.time {
            let start = d.index(c, t, 0, 0);
            out.push(v[start..start + cells].iter().map(|&a| a as f64).sum::<f64>() / cells as f64);
        }
    }
    for c in 0..d.channels {
        for cell in 0..cells {
            let s: f64 = (0..d.time).map(|t| v[d.index(c, t, 0, 0) + cell] as f64).sum();
            out.push(s / d.time as f64);
        }
    }
    out
}

/// Stacks per-user rows into a `B x n` matrix.
pub(crate) fn stack(rows: &[Vec<f64>]) -> Matrix {
    let n = rows.first().map_or(0, Vec::len);
    Matrix::from_vec(rows.len(), n, rows.iter().flatten().copied().collect())
}

/// `h` from `B x S` summaries.
pub fn encode_behavior(g: &mut Graph, p: &Bound, m: &Model, summaries: Var) -> Var {
    let e = &m.encoder;
    let a = linear(g, summaries, p[e.w1], p[e.b1]);
    let a = g.tanh(a);
    let a = linear(g, a, p[e.w2], p[e.b2]);
    let a = g.tanh(a);
    linear(g, a, p[e.w3], p[e.b3])
}

/// `h` plus a linear read of the profile embedding, so a user with no
/// visible behavior still gets a personal latent.
pub fn encode_user(g: &mut Graph, p: &Bound, m: &Model, summaries: Var, profiles: Var) -> Var {
    let h = encode_behavior(g, p, m, summaries);
    let hp = g.matmul(profiles, p[m.encoder.profile_w]);
    g.add(h, hp)
}

/// Three learned query slots attend over a re-expansion of one `1 x d`
/// row of `h`; returns `(f_short, f_long, f_pat)` as `1 x d` rows.
pub fn disentangle(g: &mut Graph, p: &Bound, m: &Model, h: Var) -> [Var; 3] {
    let e = &m.encoder;
    let d = m.cfg.latent;
    let r = m.cfg.hier_tokens;
    let x = linear(g, h, p[e.expand_w], p[e.expand_b]);
    let x = g.reshape(x, r, d);
    let q = g.matmul(p[e.queries], p[e.wq]);
    let k = g.matmul(x, p[e.wk]);
    let v = g.matmul(x, p[e.wv]);
    let s = g.matmul_nt(q, k);
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let a = g.softmax_rows(s);
    let o = g.matmul(a, v);
    let o = g.matmul(o, p[e.wo]);
    [0, 1, 2].map(|i| g.slice_rows(o, i, 1))
}

/// `f_task = concat(f_short, f_long, f_pat) P_τ + b_τ` for `B` rows.
pub fn task_project(g: &mut Graph, p: &Bound, m: &Model, f: [Var; 3], task: Task) -> Var {
    let t = m.task(task);
    let cat = g.concat_cols(&f);
    linear(g, cat, p[t.proj_w], p[t.proj_b])
}

/// Returns `(diag_fisher, λ)` with `diag_fisher = G(f)⊙G(f) + ε`.
pub fn sensitivity(g: &mut Graph, p: &Bound, m: &Model, f_task: Var, task: Task) -> (Var, Var) {
    let t = m.task(task);
    let out = linear(g, f_task, p[t.sens_w], p[t.sens_b]);
    let sq = g.square(out);
    let fisher = g.add_const(sq, m.cfg.fisher_eps);
    let lambda = g.sqrt(fisher);
    (fisher, lambda)
}

/// One refinement increment `Δ_τ(z)`.
pub fn refine_delta(g: &mut Graph, p: &Bound, m: &Model, z: Var, task: Task) -> Var {
    let t = m.task(task);
    let a = linear(g, z, p[t.delta_w1], p[t.delta_b1]);
    let a = g.tanh(a);
    linear(g, a, p[t.delta_w2], p[t.delta_b2])
}

pub fn refine_pattern(g: &mut Graph, p: &Bound, m: &Model, f_pat: Var, task: Task, steps: usize, rate: f64) -> Var {
    let mut z = f_pat;
    for _ in 0..steps {
        let dz = refine_delta(g, p, m, z, task);
        let dz = g.scale(dz, rate);
        z = g.add(z, dz);
    }
    z
}

/// Formula-level reference of the sensitivity step for a given predictor output.
pub fn fisher_diag(pred: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let fisher: Vec<f64> = pred.iter().map(|v| v * v + eps).collect();
    let lambda = fisher.iter().map(|v| v.sqrt()).collect();
    (fisher, lambda)
}

/// Formula-level reference of the unrolled refinement for any increment map.
pub fn refine_with(f_pat: &[f64], steps: usize, rate: f64, delta: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut z = f_pat.to_vec();
    for _ in 0..steps {
        let dz = delta(&z);
        z.iter_mut().zip(dz).for_each(|(a, b)| *a += rate * b);
    }
    z
}

/// Tape handles of the latent chain for a batch; every entry is `B x _`.
pub struct LatentVars {
    pub h: Var,
    pub f_short: Var,
    pub f_long: Var,
    pub f_pat: Var,
    pub f_task: Var,
    pub fisher: Var,
    pub lambda: Var,
    pub z: Var,
}

/// Runs the whole chain for a batch of summaries and profile rows.
pub fn encode_batch(g: &mut Graph, p: &Bound, m: &Model, summaries: Matrix, profiles: Matrix, task: Task) -> LatentVars {
    let s = g.constant(summaries);
    let pr = g.constant(profiles);
    let h = encode_user(g, p, m, s, pr);
    let b = g.shape(h).0;
    let mut parts: [Vec<Var>; 3] = Default::default();
    for i in 0..b {
        let row = g.slice_rows(h, i, 1);
        for (k, f) in disentangle(g, p, m, row).into_iter().enumerate() {
            parts[k].push(f);
        }
    }
    let [f_short, f_long, f_pat] = parts.map(|rows| g.concat_rows(&rows));
    let f_task = task_project(g, p, m, [f_short, f_long, f_pat], task);
    let (fisher, lambda) = sensitivity(g, p, m, f_task, task);
    let z = refine_pattern(g, p, m, f_pat, task, m.cfg.refine_steps, m.cfg.refine_rate);
    LatentVars {
        h,
        f_short,
        f_long,
        f_pat,
        f_task,
        fisher,
        lambda,
        z,
    }
}

/// Plain-value snapshot of one user's latent chain.
#[derive(Clone, Debug, PartialEq)]
pub struct UserLatents {
    pub h: Vec<f64>,
    pub f_short: Vec<f64>,
    pub f_long: Vec<f64>,
    pub f_pat: Vec<f64>,
    pub f_task: Vec<f64>,
    pub diag_fisher: Vec<f64>,
    pub lambda_profile: Vec<f64>,
    pub z_refined: Vec<f64>,
}

impl UserLatents {
    pub fn read(g: &Graph, v: &LatentVars, row: usize) -> Self {
        let r = |x: Var| g.value(x).row(row).to_vec();
        Self {
            h: r(v.h),
            f_short: r(v.f_short),
            f_long: r(v.f_long),
            f_pat: r(v.f_pat),
            f_task: r(v.f_task),
            diag_fisher: r(v.fisher),
            lambda_profile: r(v.lambda),
            z_refined: r(v.z),
        }
    }
}

/// Evaluates the chain without recording gradients.
pub fn latents(m: &Model, observed: &[&BehaviorTensor], profiles: &[&[f64]], task: Task) -> Vec<UserLatents> {
    let mut g = Graph::new();
    let p = m.store.bind(&mut g, false);
    let s = stack(&observed.iter().map(|x| behavior_summary(x)).collect::<Vec<_>>());
    let pr = stack(&profiles.iter().map(|v| v.to_vec()).collect::<Vec<_>>());
    let v = encode_batch(&mut g, &p, m, s, pr, task);
    (0..observed.len()).map(|i| UserLatents::read(&g, &v, i)).collect()
}
