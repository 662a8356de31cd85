//! User-adaptive evidence masking.
//!
//! Batch reliability analysis sets a per-user observation ratio; a
//! spatio-temporal relevance field decides where the evidence goes; a
//! Gumbel-Top-k draw picks exactly `floor(ρ̃ · N)` coordinates.
//!
//! Gradients reach the relevance field only through the weighted mask
//! `I ⊙ p` (straight-through: the binary selection is a constant on the
//! tape), so the ratio path is evaluated on plain values.

use std::cmp::Ordering;
use std::sync::Arc;

use stmask_autograd::{Graph, Matrix, Var};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Bound;
use crate::rng;
use crate::tensor::{EvidenceMask, GridDims};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Row-wise softmax of `logits / temperature`.
pub fn assign_groups(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    let mut a = logits.map(|v| v / temperature);
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(a)
}

fn normalized_rows(features: &Matrix) -> Result<Matrix> {
    let mut u = features.clone();
    for r in 0..u.rows() {
        let row = u.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Normalization(format!("feature row {r} is zero")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(u)
}

/// `S = α A Aᵀ + (1-α) U Uᵀ` with `U` the row-normalized features.
pub fn batch_similarity(assignment: &Matrix, features: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if assignment.rows() != features.rows() {
        return Err(Error::Shape(format!(
            "{} assignment rows vs {} feature rows",
            assignment.rows(),
            features.rows()
        )));
    }
    let u = normalized_rows(features)?;
    let mut s = assignment.matmul_nt(assignment);
    s.scale_assign(alpha);
    let mut uu = u.matmul_nt(&u);
    uu.scale_assign(1.0 - alpha);
    s.add_assign(&uu);
    // exact symmetry despite rounding in the products
    for i in 0..s.rows() {
        for j in 0..i {
            let v = s.get(i, j);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

/// Row `b = (max_{j≠b} S_bj, ‖z_b‖, entropy(A_b))`; a lone user has `s_b = 0`.
pub fn reliability_context(similarity: &Matrix, z: &Matrix, assignment: &Matrix) -> Matrix {
    let b = similarity.rows();
    let mut ctx = Matrix::zeros(b, 3);
    for i in 0..b {
        let s = (0..b)
            .filter(|&j| j != i)
            .map(|j| similarity.get(i, j))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .unwrap_or(0.0);
        let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let ent = -assignment
            .row(i)
            .iter()
            .filter(|&&a| a > 0.0)
            .map(|&a| a * a.ln())
            .sum::<f64>();
        ctx.row_mut(i).copy_from_slice(&[s, norm, ent]);
    }
    ctx
}

/// `γ_b = sigmoid(wᵀ e_b + c)`.
pub fn scaling_factor(context: &Matrix, w: &[f64], c: f64) -> Vec<f64> {
    (0..context.rows())
        .map(|i| sigmoid(context.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + c))
        .collect()
}

/// `ρ̃ = ρ_τ γ`.
pub fn final_ratio(rho_tau: f64, gamma: f64) -> f64 {
    rho_tau * gamma
}

/// `k = floor(ρ̃ N)`, capped at `N`.
pub fn evidence_budget(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).floor().max(0.0) as usize).min(n)
}

/// Most similar other user of every row; `None` for a lone user.
pub fn nearest_peer(similarity: &Matrix) -> Vec<Option<usize>> {
    let b = similarity.rows();
    (0..b)
        .map(|i| {
            (0..b)
                .filter(|&j| j != i)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(k) if similarity.get(i, k) >= similarity.get(i, j) => Some(k),
                    _ => Some(j),
                })
        })
        .collect()
}

/// Everything the ratio path computes for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchReliability {
    pub assignment: Matrix,
    pub similarity: Matrix,
    pub neighbor_sim: Vec<f64>,
    pub context: Matrix,
    pub scaling: Vec<f64>,
}

impl BatchReliability {
    /// Evaluates the ratio path for refined patterns `z` (`B x d`). Zero
    /// rows of `z` are left out of the feature similarity.
    pub fn compute(m: &Model, z: &Matrix) -> Self {
        let st = &m.store;
        let pp = &m.policy;
        let mut logits = z.matmul(st.get(pp.assign_w));
        for r in 0..logits.rows() {
            logits.row_mut(r).iter_mut().zip(st.get(pp.assign_b).data()).for_each(|(a, b)| *a += b);
        }
        let temperature = st.get(pp.log_temp).get(0, 0).exp();
        let assignment = assign_groups(&logits, temperature).expect("exp is positive");
        let alpha = sigmoid(st.get(pp.alpha_logit).get(0, 0));
        let mut u = z.clone();
        for r in 0..u.rows() {
            let row = u.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let mut similarity = assignment.matmul_nt(&assignment);
        similarity.scale_assign(alpha);
        let mut uu = u.matmul_nt(&u);
        uu.scale_assign(1.0 - alpha);
        similarity.add_assign(&uu);
        for i in 0..similarity.rows() {
            for j in 0..i {
                let v = similarity.get(i, j);
                similarity.set(j, i, v);
            }
        }
        let context = reliability_context(&similarity, z, &assignment);
        let scaling = scaling_factor(&context, st.get(pp.ratio_w).data(), st.get(pp.ratio_c).get(0, 0));
        Self {
            neighbor_sim: (0..context.rows()).map(|i| context.get(i, 0)).collect(),
            assignment,
            similarity,
            context,
            scaling,
        }
    }
}

/// `ρ_τ = sigmoid(base_ratio_logit_τ)`.
pub fn base_ratio(m: &Model, task: Task) -> f64 {
    sigmoid(m.store.get(m.task(task).base_ratio_logit).get(0, 0))
}

/// `ψ_hw = ReLU(cos(z ⊙ λ, E_hw))`; all zeros when `z ⊙ λ = 0`.
pub fn spatial_affinity(z: &[f64], lambda: &[f64], locations: &Matrix) -> Vec<f64> {
    let q: Vec<f64> = z.iter().zip(lambda).map(|(a, b)| a * b).collect();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    (0..locations.rows())
        .map(|r| {
            let e = locations.row(r);
            let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if qn == 0.0 || en == 0.0 {
                return 0.0;
            }
            let cos = q.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / (qn * en);
            cos.max(0.0)
        })
        .collect()
}

/// Relevance over the `(t, h, w)` grid with its temporal and spatial parts.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceField {
    pub grid: GridDims,
    pub beta: f64,
    /// `φ`, length `T`.
    pub temporal: Vec<f64>,
    /// `ψ`, length `H·W`.
    pub spatial: Vec<f64>,
    /// `β φ_t + (1-β) ψ_hw` before canonicalization.
    pub raw: Vec<f64>,
    /// Canonical distribution used for sampling.
    pub scores: Vec<f64>,
}

impl RelevanceField {
    pub fn new(grid: GridDims, beta: f64, temporal: Vec<f64>, spatial: Vec<f64>, p_floor: f64) -> Result<Self> {
        if temporal.len() != grid.time || spatial.len() != grid.cells() {
            return Err(Error::Shape(format!(
                "temporal {} / spatial {} vs grid {:?}",
                temporal.len(),
                spatial.len(),
                grid
            )));
        }
        let cells = grid.cells();
        let raw: Vec<f64> = (0..grid.coords())
            .map(|i| beta * temporal[i / cells] + (1.0 - beta) * spatial[i % cells])
            .collect();
        let scores = canonicalize(&raw, p_floor);
        Ok(Self {
            grid,
            beta,
            temporal,
            spatial,
            raw,
            scores,
        })
    }

    /// A field whose canonical scores are `scores` as given.
    pub fn from_scores(grid: GridDims, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.coords() {
            return Err(Error::Shape(format!("{} scores for {:?}", scores.len(), grid)));
        }
        Ok(Self {
            grid,
            beta: 0.0,
            temporal: vec![0.0; grid.time],
            spatial: vec![0.0; grid.cells()],
            raw: scores.clone(),
            scores,
        })
    }

    pub fn uniform(grid: GridDims) -> Self {
        let n = grid.coords();
        Self::from_scores(grid, vec![1.0 / n as f64; n]).expect("sized to grid")
    }
}

/// Clamps at `p_floor` and normalizes; an all-zero input becomes uniform.
pub fn canonicalize(raw: &[f64], p_floor: f64) -> Vec<f64> {
    if raw.iter().all(|&v| v <= 0.0) {
        return vec![1.0 / raw.len() as f64; raw.len()];
    }
    let clamped: Vec<f64> = raw.iter().map(|&v| v.max(p_floor)).collect();
    let s: f64 = clamped.iter().sum();
    clamped.into_iter().map(|v| v / s).collect()
}

/// `p̃ = (1-ε) p + ε / N`.
pub fn cold_adjust(field: &RelevanceField, epsilon: f64) -> Result<RelevanceField> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let n = field.scores.len() as f64;
    let mut out = field.clone();
    out.scores = field.scores.iter().map(|&p| (1.0 - epsilon) * p + epsilon / n).collect();
    Ok(out)
}

/// Temporal profile `φ = softplus(raw)` and mixing gate `β` of a task.
pub fn task_profile(m: &Model, task: Task) -> (Vec<f64>, f64) {
    let st = &m.store;
    let t = m.task(task);
    let phi = st.get(t.temporal_raw).data().iter().map(|&v| softplus(v)).collect();
    let e = st.get(t.embedding);
    let v = st.get(t.mix_v);
    let dot: f64 = e.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    (phi, sigmoid(dot + st.get(t.mix_c).get(0, 0)))
}

/// Builds the canonical field for one user, including the cold mixture.
pub fn user_field(m: &Model, task: Task, z: &[f64], lambda: &[f64]) -> RelevanceField {
    let (phi, beta) = task_profile(m, task);
    let psi = spatial_affinity(z, lambda, m.store.get(m.policy.locations));
    let field = RelevanceField::new(m.cfg.dims.grid(), beta, phi, psi, m.cfg.p_floor).expect("model-shaped parts");
    if task == Task::Cold {
        cold_adjust(&field, m.cfg.cold_epsilon).expect("validated epsilon")
    } else {
        field
    }
}

/// The same field recorded on the tape as a `1 x N` row of scores, so
/// the weighted mask can pass gradients to the encoder, the location
/// embeddings and the task profile.
pub fn relevance_tape(g: &mut Graph, p: &Bound, m: &Model, z: Var, lambda: Var, task: Task) -> Var {
    let grid = m.cfg.dims.grid();
    let t = m.task(task);
    let q = g.mul(z, lambda);
    let q = g.l2_normalize_rows(q);
    let e = g.l2_normalize_rows(p[m.policy.locations]);
    let cos = g.matmul_nt(q, e);
    let psi = g.relu(cos);
    let phi = g.softplus(p[t.temporal_raw]);
    let gate = g.matmul(p[t.embedding], p[t.mix_v]);
    let gate = g.add(gate, p[t.mix_c]);
    let beta = g.sigmoid(gate);
    let neg = g.scale(beta, -1.0);
    let one_minus = g.add_const(neg, 1.0);
    let cells = grid.cells();
    let n = grid.coords();
    let t_index: Arc<[usize]> = (0..n).map(|i| i / cells).collect();
    let s_index: Arc<[usize]> = (0..n).map(|i| i % cells).collect();
    let phi_b = g.gather(phi, t_index, 1, n);
    let psi_b = g.gather(psi, s_index, 1, n);
    let a = g.mul_scalar(phi_b, beta);
    let b = g.mul_scalar(psi_b, one_minus);
    let raw = g.add(a, b);
    let clamped = g.clamp_min(raw, m.cfg.p_floor);
    let total = g.sum(clamped);
    let inv = g.recip(total);
    let scores = g.mul_scalar(clamped, inv);
    if task == Task::Cold {
        let eps = m.cfg.cold_epsilon;
        let kept = g.scale(scores, 1.0 - eps);
        g.add_const(kept, eps / n as f64)
    } else {
        scores
    }
}

/// Gumbel-Top-k over `candidates` (all coordinates when `None`).
///
/// Keys are `ln max(p, p_floor) + G`; with `hard` the noise is dropped.
/// Ties go to the lowest linear index. Weights are `binary ⊙ p`.
pub fn sample_mask(
    field: &RelevanceField,
    candidates: Option<&[usize]>,
    budget: usize,
    rng: &mut rng::Stream,
    hard: bool,
    p_floor: f64,
) -> Result<EvidenceMask> {
    let n = field.scores.len();
    let all: Vec<usize>;
    let cand = match candidates {
        Some(c) => c,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    if budget > cand.len() {
        return Err(Error::Config(format!("budget {budget} exceeds {} coordinates", cand.len())));
    }
    if let Some(&bad) = cand.iter().find(|&&i| i >= n) {
        return Err(Error::Shape(format!("candidate {bad} outside {n} coordinates")));
    }
    let mut keyed: Vec<(f64, usize)> = cand
        .iter()
        .map(|&i| {
            let noise = if hard { 0.0 } else { rng::gumbel(rng) };
            (field.scores[i].max(p_floor).ln() + noise, i)
        })
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    if budget < keyed.len() && budget > 0 {
        keyed.select_nth_unstable_by(budget - 1, order);
    }
    let mut binary = vec![false; n];
    let mut weights = vec![0.0; n];
    for &(_, i) in &keyed[..budget] {
        binary[i] = true;
        weights[i] = field.scores[i];
    }
    EvidenceMask::new(field.grid, binary, weights)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn grid(t: usize, h: usize, w: usize) -> GridDims {
        Dims::new(1, t, h, w).unwrap().grid()
    }

    #[test]
    fn equal_logits_give_uniform_rows() {
        let a = assign_groups(&Matrix::filled(3, 4, 2.5), 1.0).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let hot = assign_groups(&Matrix::from_vec(1, 4, vec![3.0, -2.0, 1.0, 0.5]), 1e6).unwrap();
        assert!(hot.data().iter().all(|&v| (v - 0.25).abs() < 1e-4));
        assert!(assign_groups(&Matrix::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn peaked_logits_match_direct_softmax() {
        let a = assign_groups(&Matrix::from_vec(1, 4, vec![10.0, 0.0, 0.0, 0.0]), 1.0).unwrap();
        let z = 10f64.exp() + 3.0;
        assert!((a.get(0, 0) - 10f64.exp() / z).abs() < 1e-15);
        assert!((a.get(0, 0) - 0.99986).abs() < 1e-5);
        assert!((a.get(0, 1) - 4.5e-5).abs() < 1e-6);
    }

    #[test]
    fn similarity_examples() {
        let feats = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]);
        let a = Matrix::from_vec(2, 2, vec![0.3, 0.7, 0.6, 0.4]);
        assert_eq!(batch_similarity(&a, &feats, 0.0).unwrap(), Matrix::identity(2));
        let one_hot = Matrix::from_vec(2, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(batch_similarity(&one_hot, &feats, 1.0).unwrap().get(0, 1), 1.0);
        let same = Matrix::from_vec(2, 2, vec![0.3, 0.7, 0.3, 0.7]);
        let f = Matrix::from_vec(2, 2, vec![1.0, 2.0, 1.0, 2.0]);
        let s = batch_similarity(&same, &f, 0.5).unwrap();
        assert!((s.get(0, 1) - (0.5 * 0.58 + 0.5)).abs() < 1e-12);
        assert!(matches!(
            batch_similarity(&same, &Matrix::zeros(2, 2), 0.5),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn context_components() {
        let s = Matrix::from_vec(2, 2, vec![1.0, 0.4, 0.4, 1.0]);
        let z = Matrix::from_vec(2, 2, vec![0.0, 0.0, 3.0, 4.0]);
        let a = Matrix::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]);
        let c = reliability_context(&s, &z, &a);
        assert_eq!(c.row(0), &[0.4, 0.0, 0.0]);
        assert!((c.get(1, 1) - 5.0).abs() < 1e-15);
        assert!((c.get(1, 2) - 4f64.ln()).abs() < 1e-12);
        let lone = reliability_context(&Matrix::identity(1), &Matrix::zeros(1, 2), &Matrix::filled(1, 2, 0.5));
        assert_eq!(lone.get(0, 0), 0.0);
    }

    #[test]
    fn scaling_examples() {
        let ctx = Matrix::from_vec(2, 3, vec![1.0, 2.0, 0.5, 0.3, 1.0, 1.2]);
        assert_eq!(scaling_factor(&ctx, &[0.0; 3], 0.0), vec![0.5, 0.5]);
        assert!(scaling_factor(&ctx, &[0.0; 3], 50.0).iter().all(|g| (1.0 - g).abs() < 1e-9));
        let g = scaling_factor(&ctx, &[-1.0, 0.0, 0.0], 0.0)[0];
        assert!((g - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-15);
        assert!((g - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn ratio_and_budget_examples() {
        let r = final_ratio(0.5, 0.5);
        assert_eq!(r, 0.25);
        assert_eq!(evidence_budget(r, 2048), 512);
        assert_eq!(evidence_budget(0.4 / 2048.0, 2048), 0);
        assert!(final_ratio(sigmoid(30.0), sigmoid(30.0)) < 1.0);
        assert_eq!(evidence_budget(final_ratio(sigmoid(30.0), sigmoid(30.0)), 2048), 2047);
    }

    #[test]
    fn affinity_examples() {
        let locs = Matrix::from_vec(3, 2, vec![2.0, 1.0, -2.0, -1.0, -1.0, 2.0]);
        let psi = spatial_affinity(&[1.0, 0.5], &[2.0, 2.0], &locs);
        assert!((psi[0] - 1.0).abs() < 1e-12);
        assert_eq!(psi[1], 0.0);
        assert!(psi[2].abs() < 1e-12);
        assert_eq!(spatial_affinity(&[0.0, 0.0], &[1.0, 1.0], &locs), vec![0.0; 3]);
    }

    #[test]
    fn relevance_limits() {
        let g = grid(3, 2, 2);
        let phi = vec![0.2, 0.5, 1.0];
        let psi = vec![0.1, 0.9, 0.0, 0.4];
        let f = RelevanceField::new(g, 1.0, phi.clone(), psi.clone(), 1e-8).unwrap();
        for t in 0..3 {
            let slice = &f.scores[t * 4..t * 4 + 4];
            assert!(slice.iter().all(|&v| v == slice[0]));
        }
        let f = RelevanceField::new(g, 0.0, phi, psi, 1e-8).unwrap();
        assert_eq!(&f.scores[0..4], &f.scores[8..12]);
        let u = RelevanceField::new(g, 0.3, vec![0.7; 3], vec![0.7; 4], 1e-8).unwrap();
        assert!(u.scores.iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let zero = RelevanceField::new(g, 0.5, vec![0.0; 3], vec![0.0; 4], 1e-8).unwrap();
        assert!(zero.scores.iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn hard_sampling_is_deterministic_top_k() {
        let g = grid(1, 1, 5);
        let f = RelevanceField::from_scores(g, vec![0.1, 0.3, 0.3, 0.2, 0.1]).unwrap();
        let mut r = rng::stream(0, &[]);
        let m = sample_mask(&f, None, 2, &mut r, true, 1e-8).unwrap();
        assert_eq!(m.binary(), &[false, true, true, false, false]);
        let m = sample_mask(&f, None, 4, &mut r, true, 1e-8).unwrap();
        assert_eq!(m.binary(), &[true, true, true, true, false]);
        let full = sample_mask(&f, None, 5, &mut r, false, 1e-8).unwrap();
        assert_eq!(full.weights(), f.scores.as_slice());
        assert!(sample_mask(&f, None, 6, &mut r, false, 1e-8).is_err());
        let restricted = sample_mask(&f, Some(&[0, 4]), 1, &mut r, true, 1e-8).unwrap();
        assert_eq!(restricted.binary(), &[true, false, false, false, false]);
    }

    #[test]
    fn cold_adjust_examples() {
        let g = grid(2, 1, 2);
        let f = RelevanceField::from_scores(g, vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        assert_eq!(cold_adjust(&f, 0.0).unwrap().scores, f.scores);
        assert!(cold_adjust(&f, 1.0).unwrap().scores.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(cold_adjust(&f, 1.5).is_err());
    }

    #[test]
    fn peers_skip_self() {
        let s = Matrix::from_vec(3, 3, vec![1.0, 0.2, 0.8, 0.2, 1.0, 0.1, 0.8, 0.1, 1.0]);
        assert_eq!(nearest_peer(&s), vec![Some(2), Some(0), Some(0)]);
        assert_eq!(nearest_peer(&Matrix::identity(1)), vec![None]);
    }
}
