//! Parameter layout of the full model and its initialization.

use stmask_autograd::Matrix;

use crate::config::{ModelConfig, Task};
use crate::error::Result;
use crate::params::{Init, ParamId, ParameterStore};
use crate::rng::tag;

#[derive(Clone)]
pub struct EncoderParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub profile_w: ParamId,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub queries: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone)]
pub struct TaskParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub sens_w: ParamId,
    pub sens_b: ParamId,
    pub delta_w1: ParamId,
    pub delta_b1: ParamId,
    pub delta_w2: ParamId,
    pub delta_b2: ParamId,
    pub base_ratio_logit: ParamId,
    pub temporal_raw: ParamId,
    pub mix_v: ParamId,
    pub mix_c: ParamId,
    pub embedding: ParamId,
}

#[derive(Clone)]
pub struct PolicyParams {
    pub assign_w: ParamId,
    pub assign_b: ParamId,
    pub log_temp: ParamId,
    pub alpha_logit: ParamId,
    pub ratio_w: ParamId,
    pub ratio_c: ParamId,
    pub locations: ParamId,
}

#[derive(Clone)]
pub struct BlockParams {
    pub ada_w: ParamId,
    pub ada_b: ParamId,
    pub self_attn: [ParamId; 4],
    pub cross_attn: [ParamId; 4],
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Clone)]
pub struct DenoiserParams {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub ev_w: ParamId,
    pub ev_b: ParamId,
    pub pos: ParamId,
    pub time_w1: ParamId,
    pub time_b1: ParamId,
    pub time_w2: ParamId,
    pub time_b2: ParamId,
    pub user_w: ParamId,
    pub profile_w: ParamId,
    pub task_w: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_ada_w: ParamId,
    pub final_ada_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Every learnable array plus the handles that name them.
#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub encoder: EncoderParams,
    pub tasks: [TaskParams; 3],
    pub policy: PolicyParams,
    pub denoiser: DenoiserParams,
    pub infonce_log_temp: ParamId,
}

/// Inverse of softplus.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `rows x dim` sinusoidal code of positions `0..rows`.
pub fn sinusoidal(rows: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        for (j, v) in m.row_mut(r).iter_mut().enumerate() {
            let freq = 1.0 / 10_000f64.powf((j / 2 * 2) as f64 / dim as f64);
            let a = r as f64 * freq;
            *v = if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}

/// One row per cell: the first half of the columns encodes the row
/// coordinate, the second half the column coordinate.
pub fn grid_code(height: usize, width: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let rows = sinusoidal(height, half.max(1));
    let cols = sinusoidal(width, (dim - half).max(1));
    let mut m = Matrix::zeros(height * width, dim);
    for h in 0..height {
        for w in 0..width {
            let row = m.row_mut(h * width + w);
            row[..half].copy_from_slice(&rows.row(h)[..half]);
            row[half..].copy_from_slice(&cols.row(w)[..dim - half]);
        }
    }
    m
}

/// One row per token of a `gt x gh x gw` token grid: half the columns
/// encode the time index, a quarter each the two spatial indices.
pub fn token_code(gt: usize, gh: usize, gw: usize, dim: usize) -> Matrix {
    let (dt, dh) = (dim / 2, dim / 4);
    let dw = dim - dt - dh;
    let parts = [sinusoidal(gt, dt.max(1)), sinusoidal(gh, dh.max(1)), sinusoidal(gw, dw.max(1))];
    let widths = [dt, dh, dw];
    let mut m = Matrix::zeros(gt * gh * gw, dim);
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                let row = m.row_mut((t * gh + h) * gw + w);
                let mut at = 0;
                for (k, idx) in [t, h, w].into_iter().enumerate() {
                    row[at..at + widths[k]].copy_from_slice(&parts[k].row(idx)[..widths[k]]);
                    at += widths[k];
                }
            }
        }
    }
    m
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParameterStore::new();
        let mut init = Init::new(seed, &[tag::INIT]);
        let d = cfg.latent;
        let dims = cfg.dims;
        let summary = dims.channels * dims.time + dims.channels * dims.height * dims.width;
        let zeros = Matrix::zeros;

        let encoder = EncoderParams {
            w1: s.insert("enc.w1", init.glorot(summary, cfg.encoder_hidden)),
            b1: s.insert("enc.b1", zeros(1, cfg.encoder_hidden)),
            w2: s.insert("enc.w2", init.glorot(cfg.encoder_hidden, cfg.encoder_hidden)),
            b2: s.insert("enc.b2", zeros(1, cfg.encoder_hidden)),
            w3: s.insert("enc.w3", init.glorot(cfg.encoder_hidden, d)),
            b3: s.insert("enc.b3", zeros(1, d)),
            profile_w: s.insert("enc.profile", init.glorot(cfg.profile_dim, d)),
            expand_w: s.insert("hier.expand_w", init.glorot(d, cfg.hier_tokens * d)),
            expand_b: s.insert("hier.expand_b", zeros(1, cfg.hier_tokens * d)),
            queries: s.insert("hier.queries", init.normal(3, d, 1.0)),
            wq: s.insert("hier.wq", init.glorot(d, d)),
            wk: s.insert("hier.wk", init.glorot(d, d)),
            wv: s.insert("hier.wv", init.glorot(d, d)),
            wo: s.insert("hier.wo", init.glorot(d, d)),
        };

        let tasks = Task::ALL.map(|task| {
            let n = task.name();
            TaskParams {
                proj_w: s.insert(format!("task.{n}.proj_w"), init.glorot(3 * d, cfg.task_latent)),
                proj_b: s.insert(format!("task.{n}.proj_b"), zeros(1, cfg.task_latent)),
                sens_w: s.insert(format!("task.{n}.sens_w"), init.glorot(cfg.task_latent, cfg.task_latent)),
                sens_b: s.insert(format!("task.{n}.sens_b"), zeros(1, cfg.task_latent)),
                delta_w1: s.insert(format!("task.{n}.delta_w1"), init.glorot(d, d)),
                delta_b1: s.insert(format!("task.{n}.delta_b1"), zeros(1, d)),
                delta_w2: s.insert(format!("task.{n}.delta_w2"), init.glorot(d, d)),
                delta_b2: s.insert(format!("task.{n}.delta_b2"), zeros(1, d)),
                base_ratio_logit: s.insert(format!("task.{n}.base_ratio_logit"), Matrix::scalar(logit(cfg.base_ratio))),
                temporal_raw: s.insert(
                    format!("task.{n}.temporal_raw"),
                    Matrix::filled(1, dims.time, softplus_inv(1.0)),
                ),
                mix_v: s.insert(format!("task.{n}.mix_v"), zeros(d, 1)),
                mix_c: s.insert(format!("task.{n}.mix_c"), zeros(1, 1)),
                embedding: s.insert(format!("task.{n}.embedding"), init.normal(1, d, 1.0)),
            }
        });

        let policy = PolicyParams {
            assign_w: s.insert("policy.assign_w", init.glorot(d, cfg.groups)),
            assign_b: s.insert("policy.assign_b", zeros(1, cfg.groups)),
            log_temp: s.insert("policy.log_temp", Matrix::scalar(0.0)),
            alpha_logit: s.insert("policy.alpha_logit", Matrix::scalar(0.0)),
            ratio_w: s.insert("policy.ratio_w", Matrix::from_vec(1, 3, vec![-1.0, 0.0, 1.0])),
            ratio_c: s.insert("policy.ratio_c", Matrix::scalar(1.0)),
            locations: s.insert("policy.locations", grid_code(dims.height, dims.width, d)),
        };

        let dm = cfg.model_dim;
        let (t0, h0, w0) = cfg.patch;
        let patch = dims.channels * t0 * h0 * w0;
        let ev_patch = (dims.channels + 1) * t0 * h0 * w0;
        let hidden = cfg.mlp_ratio * dm;
        let blocks = (0..cfg.blocks)
            .map(|k| BlockParams {
                ada_w: s.insert(format!("dit.{k}.ada_w"), zeros(dm, 6 * dm)),
                ada_b: s.insert(format!("dit.{k}.ada_b"), zeros(1, 6 * dm)),
                self_attn: ["q", "k", "v", "o"].map(|p| s.insert(format!("dit.{k}.self_{p}"), init.glorot(dm, dm))),
                cross_attn: ["q", "k", "v", "o"].map(|p| s.insert(format!("dit.{k}.cross_{p}"), init.glorot(dm, dm))),
                mlp_w1: s.insert(format!("dit.{k}.mlp_w1"), init.glorot(dm, hidden)),
                mlp_b1: s.insert(format!("dit.{k}.mlp_b1"), zeros(1, hidden)),
                mlp_w2: s.insert(format!("dit.{k}.mlp_w2"), init.glorot(hidden, dm)),
                mlp_b2: s.insert(format!("dit.{k}.mlp_b2"), zeros(1, dm)),
            })
            .collect();
        let denoiser = DenoiserParams {
            in_w: s.insert("dit.in_w", init.glorot(patch, dm)),
            in_b: s.insert("dit.in_b", zeros(1, dm)),
            ev_w: s.insert("dit.ev_w", init.glorot(ev_patch, dm)),
            ev_b: s.insert("dit.ev_b", zeros(1, dm)),
            pos: s.insert("dit.pos", token_code(dims.time / t0, dims.height / h0, dims.width / w0, dm)),
            time_w1: s.insert("dit.time_w1", init.glorot(dm, dm)),
            time_b1: s.insert("dit.time_b1", zeros(1, dm)),
            time_w2: s.insert("dit.time_w2", init.glorot(dm, dm)),
            time_b2: s.insert("dit.time_b2", zeros(1, dm)),
            user_w: s.insert("dit.user_w", init.glorot(cfg.task_latent, dm)),
            profile_w: s.insert("dit.profile_w", init.glorot(cfg.profile_dim, dm)),
            task_w: s.insert("dit.task_w", init.glorot(d, dm)),
            blocks,
            final_ada_w: s.insert("dit.final_ada_w", zeros(dm, 2 * dm)),
            final_ada_b: s.insert("dit.final_ada_b", zeros(1, 2 * dm)),
            out_w: s.insert("dit.out_w", zeros(dm, patch)),
            out_b: s.insert("dit.out_b", zeros(1, patch)),
        };
        let infonce_log_temp = s.insert("infonce.log_temp", Matrix::scalar(0.1f64.ln()));

        Ok(Self {
            cfg,
            store: s,
            encoder,
            tasks,
            policy,
            denoiser,
            infonce_log_temp,
        })
    }

    pub fn task(&self, task: Task) -> &TaskParams {
        &self.tasks[task.index()]
    }

    pub fn summary_len(&self) -> usize {
        let d = self.cfg.dims;
        d.channels * d.time + d.channels * d.height * d.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_deterministic_and_finite() {
        let a = Model::new(ModelConfig::default(), 3).unwrap();
        let b = Model::new(ModelConfig::default(), 3).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for id in a.store.ids() {
            assert_eq!(a.store.get(id), b.store.get(id), "{}", a.store.name(id));
        }
        assert_eq!(a.store.first_non_finite(), None);
    }

    #[test]
    fn location_rows_are_nonzero() {
        let m = grid_code(8, 8, 32);
        for r in 0..64 {
            assert!(m.row(r).iter().any(|&v| v != 0.0));
        }
        // distinct cells get distinct codes
        assert_ne!(m.row(1), m.row(8));
    }

    #[test]
    fn softplus_inverse_round_trips() {
        let y = softplus_inv(1.0);
        assert!(((1.0 + y.exp()).ln() - 1.0).abs() < 1e-12);
    }
}
