//! Deterministic profile featurizer.
//!
//! Turns an event history into temporal activity statistics, an
//! app-location co-occurrence table and a session-regularity score, then
//! projects them to a unit-norm profile embedding with a fixed seeded
//! Gaussian matrix. Externally produced embeddings enter through
//! [`ProfileEmbedding::external`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::synth::{Event, EventHistory};

pub const PROFILE_DIM: usize = 32;
pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_THETA_CORR: f64 = 0.15;
const PROJECTION_SEED: u64 = 0x0005_eed0;
const AUGMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorSummary {
    pub time_hist: Vec<f64>,
    /// Raw counts, `n_locations x n_apps`, row-major.
    pub cooccur: Vec<f64>,
    /// `cooccur` with every nonzero location row scaled to sum 1.
    pub cooccur_norm: Vec<f64>,
    pub session_regularity: f64,
    pub n_apps: usize,
    pub n_locations: usize,
}

impl BehaviorSummary {
    pub fn is_zero(&self) -> bool {
        self.cooccur.iter().all(|&v| v == 0.0)
    }

    /// `[cooccur_norm, time_hist, session_regularity]`
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.cooccur_norm.clone();
        f.extend_from_slice(&self.time_hist);
        f.push(self.session_regularity);
        f
    }
}

fn row_normalize(counts: &[f64], cols: usize) -> Vec<f64> {
    let mut out = counts.to_vec();
    for row in out.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

fn cooccurrence(events: &[Event], n_apps: usize, n_locations: usize) -> Vec<f64> {
    let mut c = vec![0.0; n_apps * n_locations];
    for e in events {
        c[e.location * n_apps + e.app] += 1.0;
    }
    c
}

/// Shannon entropy of `counts` normalized by `ln(counts.len())`.
fn normalized_entropy(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 || counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let q = c / total;
            -q * q.ln()
        })
        .sum();
    h / (counts.len() as f64).ln()
}

/// Summarizes a history whose timestamps count slots of `slots_per_day`.
pub fn summarize(history: &EventHistory, bins: usize, slots_per_day: usize) -> Result<BehaviorSummary> {
    if bins == 0 || slots_per_day == 0 {
        return Err(Error::Config("bins and slots_per_day must be >= 1".into()));
    }
    let (n_apps, n_locations) = (history.n_apps(), history.n_locations());
    let events = history.events();
    let bin_of = |ts: usize| (ts % slots_per_day) * bins / slots_per_day;
    let cooccur = cooccurrence(events, n_apps, n_locations);
    let mut time_hist = vec![0.0; bins];
    for e in events {
        time_hist[bin_of(e.timestamp)] += 1.0;
    }
    if !events.is_empty() {
        let n = events.len() as f64;
        time_hist.iter_mut().for_each(|v| *v /= n);
    }
    // first event of each active day
    let mut starts = vec![0.0; bins];
    let mut last_day = None;
    for e in events {
        let day = e.timestamp / slots_per_day;
        if last_day != Some(day) {
            starts[bin_of(e.timestamp)] += 1.0;
            last_day = Some(day);
        }
    }
    let session_regularity = if events.is_empty() {
        0.0
    } else {
        1.0 - normalized_entropy(&starts)
    };
    Ok(BehaviorSummary {
        time_hist,
        cooccur_norm: row_normalize(&cooccur, n_apps),
        cooccur,
        session_regularity,
        n_apps,
        n_locations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Deterministic,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileEmbedding {
    vec: Vec<f64>,
    provenance: Provenance,
}

impl ProfileEmbedding {
    /// Canonical embedding for users without usable history: `e_0`.
    pub fn unknown(dim: usize) -> Self {
        let mut vec = vec![0.0; dim];
        vec[0] = 1.0;
        Self {
            vec,
            provenance: Provenance::Deterministic,
        }
    }

    /// Wraps an externally computed vector, rescaling it to unit norm.
    pub fn external(vals: Vec<f64>) -> Result<Self> {
        Self::normalized(vals, Provenance::External)
    }

    fn normalized(mut vec: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if vec.is_empty() || vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Normalization("embedding must be finite and nonempty".into()));
        }
        let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Normalization("zero embedding vector".into()));
        }
        vec.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { vec, provenance })
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.vec.iter().zip(&other.vec).map(|(a, b)| a * b).sum()
    }
}

/// Fixed `dim x input` Gaussian projection with entries `N(0, 1/input)`.
pub fn projection_matrix(input: usize, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(PROJECTION_SEED, &[tag::PROJECTION, input as u64, dim as u64]);
    let scale = 1.0 / (input as f64).sqrt();
    (0..dim * input).map(|_| scale * rng::normal(&mut r)).collect()
}

/// Projected features before normalization.
pub fn project(summary: &BehaviorSummary, dim: usize) -> Vec<f64> {
    let f = summary.features();
    let p = projection_matrix(f.len(), dim);
    p.chunks(f.len())
        .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn embed(summary: &BehaviorSummary) -> ProfileEmbedding {
    embed_dim(summary, PROFILE_DIM)
}

pub fn embed_dim(summary: &BehaviorSummary, dim: usize) -> ProfileEmbedding {
    if summary.is_zero() {
        return ProfileEmbedding::unknown(dim);
    }
    ProfileEmbedding::normalized(project(summary, dim), Provenance::Deterministic)
        .unwrap_or_else(|_| ProfileEmbedding::unknown(dim))
}

fn check_vocab(a: &EventHistory, b: &EventHistory) -> Result<()> {
    if (a.n_apps(), a.n_locations()) != (b.n_apps(), b.n_locations()) {
        return Err(Error::Config("histories use different vocabularies".into()));
    }
    Ok(())
}

fn joint(h: &EventHistory) -> Vec<f64> {
    let mut c = cooccurrence(h.events(), h.n_apps(), h.n_locations());
    let n = h.len().max(1) as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Frobenius distance between the co-occurrence tables, each normalized
/// to a joint distribution over (location, app).
pub fn correlation_gap(real: &EventHistory, augmented: &EventHistory) -> Result<f64> {
    check_vocab(real, augmented)?;
    let (a, b) = (joint(real), joint(augmented));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `a` and `b` merged in timestamp order.
pub fn merge(a: &EventHistory, b: &EventHistory) -> Result<EventHistory> {
    check_vocab(a, b)?;
    let mut events: Vec<Event> = a.events().iter().chain(b.events()).copied().collect();
    events.sort_by_key(|e| e.timestamp);
    EventHistory::new(events, a.n_apps(), a.n_locations())
}

/// Draws `n_events` events from the empirical joint of `history`.
///
/// Draws are rejected and retried until the merged history stays within
/// `theta_corr` of the source; repeated failure is reported as drift.
pub fn augment(history: &EventHistory, n_events: usize, seed: u64, theta_corr: f64) -> Result<EventHistory> {
    let src = history.events();
    let empty = || EventHistory::new(Vec::new(), history.n_apps(), history.n_locations());
    if n_events == 0 {
        return empty();
    }
    if src.is_empty() {
        return Err(Error::Config("cannot augment an empty history".into()));
    }
    let mut best = f64::INFINITY;
    for attempt in 0..AUGMENT_ATTEMPTS {
        let mut r = rng::stream(seed, &[tag::AUGMENT, attempt as u64]);
        let mut events: Vec<Event> = (0..n_events).map(|_| src[r.random_range(0..src.len())]).collect();
        events.sort_by_key(|e| e.timestamp);
        let aug = EventHistory::new(events, history.n_apps(), history.n_locations())?;
        let gap = correlation_gap(history, &merge(history, &aug)?)?;
        if gap <= theta_corr {
            return Ok(aug);
        }
        best = best.min(gap);
    }
    Err(Error::Drift {
        gap: best,
        limit: theta_corr,
    })
}
