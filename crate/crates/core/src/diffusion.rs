//! Variance-preserving diffusion, the patch-token denoiser and
//! evidence-clamped reverse sampling.

use std::sync::Arc;

use stmask_autograd::{Graph, Matrix, Var};

use crate::config::{Prediction, Task};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::model::{BlockParams, Model};
use crate::params::Bound;
use crate::rng::{self, tag};
use crate::tensor::{BehaviorTensor, Dims, EvidenceMask};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub horizon: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear `β` from `beta_start` to `beta_end` over `horizon` steps.
pub fn make_schedule(horizon: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if horizon == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs horizon >= 1 and 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let beta: Vec<f64> = (0..horizon)
        .map(|i| {
            if horizon == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (horizon - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule {
        horizon,
        beta,
        alpha,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn for_model(m: &Model) -> Result<Self> {
        make_schedule(m.cfg.horizon, m.cfg.beta_start, m.cfg.beta_end)
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.horizon)));
        }
        Ok(())
    }

    /// `ᾱ_t` for `t` in `1..=horizon`; `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) noise` on plain values.
pub fn forward_values(x0: &[f64], t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x0.len() != noise.len() {
        return Err(Error::Shape(format!("{} values vs {} noise draws", x0.len(), noise.len())));
    }
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

pub fn forward_sample(x0: &BehaviorTensor, t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Result<BehaviorTensor> {
    let v = forward_values(&x0.to_f64(), t, noise, sched)?;
    BehaviorTensor::from_f64(x0.dims(), &v)
}

/// Non-overlapping `(t0, h0, w0)` patches over all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub dims: Dims,
    pub patch: (usize, usize, usize),
    /// `index[token * patch_len + k]` is the tensor position of entry `k`
    /// of a token; entries run `(c, dt, dh, dw)`, tokens `(pt, ph, pw)`.
    index: Arc<[usize]>,
    inverse: Arc<[usize]>,
}

impl PatchLayout {
    pub fn new(dims: Dims, patch: (usize, usize, usize)) -> Result<Self> {
        let (t0, h0, w0) = patch;
        if t0 == 0 || h0 == 0 || w0 == 0 || dims.time % t0 != 0 || dims.height % h0 != 0 || dims.width % w0 != 0 {
            return Err(Error::Shape(format!("patch {patch:?} does not tile {dims:?}")));
        }
        let (nt, nh, nw) = (dims.time / t0, dims.height / h0, dims.width / w0);
        let mut index = Vec::with_capacity(dims.len());
        for pt in 0..nt {
            for ph in 0..nh {
                for pw in 0..nw {
                    for c in 0..dims.channels {
                        for dt in 0..t0 {
                            for dh in 0..h0 {
                                for dw in 0..w0 {
                                    index.push(dims.index(c, pt * t0 + dt, ph * h0 + dh, pw * w0 + dw));
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inverse = vec![0; index.len()];
        for (k, &i) in index.iter().enumerate() {
            inverse[i] = k;
        }
        Ok(Self {
            dims,
            patch,
            index: index.into(),
            inverse: inverse.into(),
        })
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (
            self.dims.time / self.patch.0,
            self.dims.height / self.patch.1,
            self.dims.width / self.patch.2,
        )
    }

    pub fn tokens(&self) -> usize {
        let (a, b, c) = self.grid();
        a * b * c
    }

    pub fn patch_len(&self) -> usize {
        self.dims.channels * self.patch.0 * self.patch.1 * self.patch.2
    }
}

/// Raw patches before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub layout: PatchLayout,
}

pub fn patchify_values(values: &[f64], layout: &PatchLayout) -> Matrix {
    Matrix::from_vec(
        layout.tokens(),
        layout.patch_len(),
        layout.index.iter().map(|&i| values[i]).collect(),
    )
}

pub fn patchify(x: &BehaviorTensor, patch: (usize, usize, usize)) -> Result<TokenSequence> {
    let layout = PatchLayout::new(x.dims(), patch)?;
    let values: Vec<f64> = x.to_f64();
    Ok(TokenSequence {
        tokens: patchify_values(&values, &layout),
        layout,
    })
}

pub fn unpatchify(seq: &TokenSequence) -> Result<BehaviorTensor> {
    let data = seq.tokens.data();
    let values: Vec<f64> = seq.layout.inverse.iter().map(|&k| data[k]).collect();
    BehaviorTensor::from_f64(seq.layout.dims, &values)
}

/// Sinusoidal code of a diffusion step.
pub fn time_code(t: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(1, dim);
    for (j, v) in m.row_mut(0).iter_mut().enumerate() {
        let freq = 1.0 / 10_000f64.powf((j / 2 * 2) as f64 / dim as f64);
        let a = t as f64 * freq;
        *v = if j % 2 == 0 { a.sin() } else { a.cos() };
    }
    m
}

/// Conditioning for one user under one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub user_vec: Vec<f64>,
    pub task_vec: Vec<f64>,
    pub global: Vec<f64>,
    /// Patches of `[M ⊙ x_evidence ; M]`, `C + 1` channels.
    pub evidence_tokens: TokenSequence,
}

/// `[M ⊙ x ; M]` as a `(C+1)`-channel tensor.
pub fn evidence_planes(binary: &[bool], x_evidence: &BehaviorTensor) -> Result<BehaviorTensor> {
    let d = x_evidence.dims();
    let n = d.grid().coords();
    if binary.len() != n {
        return Err(Error::Shape(format!("mask of {} coordinates for {n}", binary.len())));
    }
    let mut values = Vec::with_capacity((d.channels + 1) * n);
    for c in 0..d.channels {
        let slab = &x_evidence.values()[c * n..(c + 1) * n];
        values.extend(slab.iter().zip(binary).map(|(&v, &m)| if m { v } else { 0.0 }));
    }
    values.extend(binary.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    BehaviorTensor::from_values(
        Dims {
            channels: d.channels + 1,
            ..d
        },
        values,
    )
}

impl ConditioningBundle {
    /// Assembles the bundle from latent rows on plain values.
    pub fn build(
        m: &Model,
        f_task: &[f64],
        profile: Option<&[f64]>,
        task: Task,
        binary: &[bool],
        x_evidence: &BehaviorTensor,
    ) -> Result<Self> {
        let st = &m.store;
        let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec());
        let mut user = row(f_task).matmul(st.get(m.denoiser.user_w));
        if let Some(pr) = profile {
            user.add_assign(&row(pr).matmul(st.get(m.denoiser.profile_w)));
        }
        let task_vec = st.get(m.task(task).embedding).matmul(st.get(m.denoiser.task_w));
        let mut global = user.clone();
        global.add_assign(&task_vec);
        Ok(Self {
            user_vec: user.into_vec(),
            task_vec: task_vec.into_vec(),
            global: global.into_vec(),
            evidence_tokens: patchify(&evidence_planes(binary, x_evidence)?, m.cfg.patch)?,
        })
    }
}

/// `user_vec + task_vec` on the tape, `1 x D`.
pub fn conditioning_tape(g: &mut Graph, p: &Bound, m: &Model, f_task: Var, profile: Option<Var>, task: Task) -> Var {
    let dn = &m.denoiser;
    let mut user = g.matmul(f_task, p[dn.user_w]);
    if let Some(pr) = profile {
        let u2 = g.matmul(pr, p[dn.profile_w]);
        user = g.add(user, u2);
    }
    let task_vec = g.matmul(p[m.task(task).embedding], p[dn.task_w]);
    g.add(user, task_vec)
}

fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let dm = g.shape(q).1;
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            g.matmul(a, vh)
        })
        .collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// `LN(x) ⊙ (1 + scale) + shift`.
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm_rows(x, 1e-6);
    let s1 = g.add_const(scale, 1.0);
    let y = g.mul_row(n, s1);
    g.add_row(y, shift)
}

fn block(g: &mut Graph, p: &Bound, blk: &BlockParams, x: Var, ev: Var, c: Var, heads: usize) -> Var {
    let dm = g.shape(x).1;
    let mods = linear(g, c, p[blk.ada_w], p[blk.ada_b]);
    let part = |g: &mut Graph, i: usize| g.slice_cols(mods, i * dm, dm);
    let (sh1, sc1, sh2, sc2, sh3, sc3) = (part(g, 0), part(g, 1), part(g, 2), part(g, 3), part(g, 4), part(g, 5));

    let h = modulate(g, x, sh1, sc1);
    let [wq, wk, wv, wo] = blk.self_attn;
    let q = g.matmul(h, p[wq]);
    let k = g.matmul(h, p[wk]);
    let v = g.matmul(h, p[wv]);
    let a = attention(g, q, k, v, heads);
    let a = g.matmul(a, p[wo]);
    let x = g.add(x, a);

    let h = modulate(g, x, sh2, sc2);
    let [wq, wk, wv, wo] = blk.cross_attn;
    let q = g.matmul(h, p[wq]);
    let k = g.matmul(ev, p[wk]);
    let v = g.matmul(ev, p[wv]);
    let a = attention(g, q, k, v, heads);
    let a = g.matmul(a, p[wo]);
    let x = g.add(x, a);

    let h = modulate(g, x, sh3, sc3);
    let h = linear(g, h, p[blk.mlp_w1], p[blk.mlp_b1]);
    let h = g.silu(h);
    let h = linear(g, h, p[blk.mlp_w2], p[blk.mlp_b2]);
    g.add(x, h)
}

/// Precomputed gather tables for one tensor shape.
pub struct DenoiserLayout {
    pub layout: PatchLayout,
    /// Broadcasts a `1 x N` mask row over channels.
    channel_broadcast: Arc<[usize]>,
}

impl DenoiserLayout {
    pub fn new(m: &Model) -> Result<Self> {
        let layout = PatchLayout::new(m.cfg.dims, m.cfg.patch)?;
        let n = m.cfg.dims.grid().coords();
        let channel_broadcast = (0..m.cfg.dims.len()).map(|i| i % n).collect();
        Ok(Self {
            layout,
            channel_broadcast,
        })
    }
}

/// The denoiser on the tape.
///
/// `x_t` is `1 x C·N`, `weights` the `1 x N` weighted mask `ℳ′`,
/// `evidence` the `L x P'` evidence patches and `cond` the `1 x D`
/// global conditioning. The gated input is scaled by `N` so that weights
/// summing to about one still carry unit-scale signal.
#[allow(clippy::too_many_arguments)]
pub fn denoise_tape(
    g: &mut Graph,
    p: &Bound,
    m: &Model,
    lay: &DenoiserLayout,
    x_t: Var,
    weights: Var,
    evidence: Var,
    cond: Var,
    t: usize,
) -> Var {
    let dn = &m.denoiser;
    let dims = m.cfg.dims;
    let n = dims.grid().coords();
    let (l, pl) = (lay.layout.tokens(), lay.layout.patch_len());
    let w = g.gather(weights, Arc::clone(&lay.channel_broadcast), 1, dims.len());
    let gated = g.mul(x_t, w);
    let gated = g.scale(gated, n as f64);
    let patches = g.gather(gated, Arc::clone(&lay.layout.index), l, pl);
    let tokens = linear(g, patches, p[dn.in_w], p[dn.in_b]);
    let tokens = g.add(tokens, p[dn.pos]);
    let tc = g.constant(time_code(t, m.cfg.model_dim));
    let te = linear(g, tc, p[dn.time_w1], p[dn.time_b1]);
    let te = g.silu(te);
    let te = linear(g, te, p[dn.time_w2], p[dn.time_b2]);
    let mut x = g.add_row(tokens, te);
    let ev = linear(g, evidence, p[dn.ev_w], p[dn.ev_b]);
    let ev = g.add(ev, p[dn.pos]);
    let c = g.silu(cond);
    for blk in &dn.blocks {
        x = block(g, p, blk, x, ev, c, m.cfg.heads);
    }
    let dm = m.cfg.model_dim;
    let mods = linear(g, c, p[dn.final_ada_w], p[dn.final_ada_b]);
    let shift = g.slice_cols(mods, 0, dm);
    let scale = g.slice_cols(mods, dm, dm);
    let h = modulate(g, x, shift, scale);
    let out = linear(g, h, p[dn.out_w], p[dn.out_b]);
    g.gather(out, Arc::clone(&lay.layout.inverse), 1, dims.len())
}

/// Plain-value denoiser call: the prediction for `x_t` at step `t`.
pub fn denoise(
    m: &Model,
    lay: &DenoiserLayout,
    x_t: &[f64],
    weights: &[f64],
    bundle: &ConditioningBundle,
    t: usize,
) -> Vec<f64> {
    let mut g = Graph::new();
    let p = m.store.bind(&mut g, false);
    let x = g.constant(Matrix::from_vec(1, x_t.len(), x_t.to_vec()));
    let w = g.constant(Matrix::from_vec(1, weights.len(), weights.to_vec()));
    let ev = g.constant(bundle.evidence_tokens.tokens.clone());
    let c = g.constant(Matrix::from_vec(1, bundle.global.len(), bundle.global.clone()));
    let out = denoise_tape(&mut g, &p, m, lay, x, w, ev, c, t);
    g.value(out).data().to_vec()
}

/// Clean-signal estimate from a denoiser output.
pub fn predicted_x0(pred: &[f64], x_t: &[f64], t: usize, sched: &DiffusionSchedule, kind: Prediction) -> Vec<f64> {
    let est: Vec<f64> = match kind {
        Prediction::CleanSignal => pred.to_vec(),
        Prediction::Noise => {
            let ab = sched.alpha_bar_at(t);
            x_t.iter()
                .zip(pred)
                .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
                .collect()
        }
    };
    est.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Writes `x_evidence` into every observed coordinate of `x`.
pub fn clamp_evidence(x: &mut [f64], binary: &[bool], x_evidence: &BehaviorTensor) {
    let n = binary.len();
    for (i, v) in x.iter_mut().enumerate() {
        if binary[i % n] {
            *v = x_evidence.values()[i] as f64;
        }
    }
}

pub struct SampleOptions<'a> {
    /// Overwrite observed coordinates with the evidence after every step.
    pub clamp: bool,
    /// Called with `(t, x_t)` for the initial state and after every step.
    pub observer: Option<&'a mut dyn FnMut(usize, &[f64])>,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        Self {
            clamp: true,
            observer: None,
        }
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` with the posterior step built
/// on the predicted clean signal; mask weights gate the denoiser input.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample(
    m: &Model,
    lay: &DenoiserLayout,
    mask: &EvidenceMask,
    x_evidence: &BehaviorTensor,
    bundle: &ConditioningBundle,
    sched: &DiffusionSchedule,
    seed: u64,
    mut opts: SampleOptions<'_>,
) -> Result<BehaviorTensor> {
    let dims = x_evidence.dims();
    if mask.grid() != dims.grid() {
        return Err(Error::Shape(format!("mask grid {:?} vs evidence {:?}", mask.grid(), dims)));
    }
    let binary = mask.binary();
    let mut r = rng::stream(seed, &[tag::SAMPLE]);
    let mut x: Vec<f64> = (0..dims.len()).map(|_| rng::normal(&mut r)).collect();
    let check = |x: &[f64], t: usize| -> Result<()> {
        let n = binary.len();
        let bad = x
            .iter()
            .enumerate()
            .any(|(i, &v)| binary[i % n] && v != x_evidence.values()[i] as f64);
        if bad {
            return Err(Error::Evaluation(format!("evidence altered at step {t}")));
        }
        Ok(())
    };
    if opts.clamp {
        clamp_evidence(&mut x, binary, x_evidence);
        check(&x, sched.horizon)?;
    }
    if let Some(obs) = opts.observer.as_mut() {
        obs(sched.horizon, &x);
    }
    for t in (1..=sched.horizon).rev() {
        let pred = denoise(m, lay, &x, mask.weights(), bundle, t);
        let x0 = predicted_x0(&pred, &x, t, sched, m.cfg.prediction);
        let (ab, ab_prev) = (sched.alpha_bar_at(t), sched.alpha_bar_at(t - 1));
        let beta = sched.beta[t - 1];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = sched.alpha[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        for (xi, x0i) in x.iter_mut().zip(&x0) {
            let noise = if t > 1 { rng::normal(&mut r) } else { 0.0 };
            *xi = c0 * x0i + ct * *xi + sigma * noise;
        }
        if opts.clamp {
            clamp_evidence(&mut x, binary, x_evidence);
            check(&x, t - 1)?;
        }
        if let Some(obs) = opts.observer.as_mut() {
            obs(t - 1, &x);
        }
    }
    let out: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    BehaviorTensor::from_values(dims, out)
}
