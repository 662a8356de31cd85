//! Seeded synthetic mobile-behavior generator.
//!
//! Each user follows a two-anchor routine: nights and evenings at a home
//! cell, working hours at a work cell, with a commute along a Manhattan
//! path in between. Irregular users deviate from the routine (alternate
//! work places, evening outings, random detours) and carry additive noise
//! scaled by `1 - regularity`.
//!
//! Channels follow [`ChannelRole::default_for`]: channel 0 marks the app in
//! use at that app's proxy cell (app `a` lives at row-major cell `a`),
//! channel 1 holds traffic volume, channel 2 holds location occupancy.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{BehaviorTensor, Dims};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub app: usize,
    pub location: usize,
    pub timestamp: usize,
}

/// Time-ordered app/location events of one user.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventHistory {
    events: Vec<Event>,
    n_apps: usize,
    n_locations: usize,
}

impl EventHistory {
    pub fn new(events: Vec<Event>, n_apps: usize, n_locations: usize) -> Result<Self> {
        if let Some(w) = events.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Config(format!(
                "timestamps must be non-decreasing ({} after {})",
                w[1].timestamp, w[0].timestamp
            )));
        }
        if let Some(e) = events.iter().find(|e| e.app >= n_apps || e.location >= n_locations) {
            return Err(Error::Config(format!(
                "event {e:?} outside vocabularies ({n_apps} apps, {n_locations} locations)"
            )));
        }
        Ok(Self {
            events,
            n_apps,
            n_locations,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn n_apps(&self) -> usize {
        self.n_apps
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Ground-truth routine of a synthetic user.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUserProfile {
    pub home_cell: (usize, usize),
    pub work_cell: (usize, usize),
    /// Day phases of the morning commute.
    pub commute_window: Range<usize>,
    /// Day phases after the return commute (which takes the phase just
    /// before this window).
    pub evening_window: Range<usize>,
    pub app_preferences: Vec<f64>,
    pub regularity: f64,
}

impl SyntheticUserProfile {
    pub fn work_phases(&self) -> Range<usize> {
        self.commute_window.end..self.evening_window.start - 1
    }

    pub fn return_phase(&self) -> usize {
        self.evening_window.start - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub dims: Dims,
    pub n_apps: usize,
    pub slots_per_day: usize,
    pub history_days: usize,
    /// Standard deviation of the additive noise for a fully irregular user.
    pub noise: f64,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            dims: Dims::desk(),
            n_apps: 8,
            slots_per_day: 8,
            history_days: 14,
            noise: 0.05,
        }
    }

    pub fn with_dims(dims: Dims) -> Self {
        Self { dims, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.dims.channels < 3 {
            return Err(Error::Config("the generator fills three channels".into()));
        }
        if self.slots_per_day < 4 {
            return Err(Error::Config("a day needs at least 4 slots".into()));
        }
        if self.n_apps == 0 || self.n_apps > self.dims.height * self.dims.width {
            return Err(Error::Config(format!(
                "{} apps cannot each own a proxy cell on a {}x{} grid",
                self.n_apps, self.dims.height, self.dims.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserRecord {
    pub tensor: BehaviorTensor,
    pub history: EventHistory,
    pub profile: SyntheticUserProfile,
}

/// Generates `n_users` users; user `u` draws only from streams keyed by
/// `(seed, u)`, so the result is independent of generation order.
pub fn generate_dataset(seed: u64, n_users: usize, dims: Dims) -> Result<Vec<UserRecord>> {
    generate_with(seed, n_users, &GeneratorConfig::with_dims(dims))
}

pub fn generate_with(seed: u64, n_users: usize, cfg: &GeneratorConfig) -> Result<Vec<UserRecord>> {
    if n_users == 0 {
        return Err(Error::Config("n_users must be >= 1".into()));
    }
    cfg.validate()?;
    (0..n_users)
        .map(|u| {
            let user_seed = seed ^ u as u64;
            let profile = sample_profile(user_seed, cfg);
            let tensor = render_tensor(user_seed, &profile, cfg)?;
            let history = render_history(user_seed, &profile, cfg)?;
            Ok(UserRecord {
                tensor,
                history,
                profile,
            })
        })
        .collect()
}

pub fn sample_profile(user_seed: u64, cfg: &GeneratorConfig) -> SyntheticUserProfile {
    let mut r = rng::stream(user_seed, &[tag::PROFILE]);
    let (h, w) = (cfg.dims.height, cfg.dims.width);
    let home = (r.random_range(0..h), r.random_range(0..w));
    let far: Vec<(usize, usize)> = (0..h)
        .flat_map(|a| (0..w).map(move |b| (a, b)))
        .filter(|&c| manhattan(c, home) >= 2)
        .collect();
    let work = if far.is_empty() {
        home
    } else {
        far[r.random_range(0..far.len())]
    };
    let s = cfg.slots_per_day;
    let morning = (s / 4).saturating_sub(1).max(1) + r.random_range(0..2);
    let back = (3 * s / 4 - 1 + r.random_range(0..2)).clamp(morning + 2, s - 1);
    let gamma = Gamma::new(0.5, 1.0).expect("valid gamma parameters");
    let raw: Vec<f64> = (0..cfg.n_apps).map(|_| gamma.sample(&mut r) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    SyntheticUserProfile {
        home_cell: home,
        work_cell: work,
        commute_window: morning..morning + 1,
        evening_window: back + 1..s,
        app_preferences: raw.iter().map(|v| v / total).collect(),
        regularity: r.random_range(0.0..1.0),
    }
}

fn manhattan(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

/// Cells visited going from `a` to `b`, rows first, inclusive.
pub fn commute_path(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
    let mut path = vec![a];
    let mut cur = a;
    while cur.0 != b.0 {
        cur.0 = if b.0 > cur.0 { cur.0 + 1 } else { cur.0 - 1 };
        path.push(cur);
    }
    while cur.1 != b.1 {
        cur.1 = if b.1 > cur.1 { cur.1 + 1 } else { cur.1 - 1 };
        path.push(cur);
    }
    path
}

/// Where the user is during one slot.
enum Whereabouts {
    At((usize, usize)),
    Moving(Vec<(usize, usize)>),
}

struct DayPlan {
    work: (usize, usize),
    evening: (usize, usize),
}

fn plan_day(r: &mut impl Rng, p: &SyntheticUserProfile, h: usize, w: usize) -> DayPlan {
    let irregular = 1.0 - p.regularity;
    let random_cell = |r: &mut dyn rand::RngCore| (r.random_range(0..h), r.random_range(0..w));
    let work = if r.random_bool(0.5 * irregular) {
        random_cell(r)
    } else {
        p.work_cell
    };
    let evening = if r.random_bool(irregular) {
        random_cell(r)
    } else {
        p.home_cell
    };
    DayPlan { work, evening }
}

fn whereabouts(
    r: &mut impl Rng,
    p: &SyntheticUserProfile,
    plan: &DayPlan,
    phase: usize,
    h: usize,
    w: usize,
) -> Whereabouts {
    if p.commute_window.contains(&phase) {
        return Whereabouts::Moving(commute_path(p.home_cell, plan.work));
    }
    if phase == p.return_phase() {
        return Whereabouts::Moving(commute_path(plan.work, p.home_cell));
    }
    if r.random_bool(0.2 * (1.0 - p.regularity)) {
        return Whereabouts::At((r.random_range(0..h), r.random_range(0..w)));
    }
    if p.work_phases().contains(&phase) {
        Whereabouts::At(plan.work)
    } else if p.evening_window.contains(&phase) {
        Whereabouts::At(plan.evening)
    } else {
        Whereabouts::At(p.home_cell)
    }
}

fn sample_app(r: &mut impl Rng, prefs: &[f64]) -> usize {
    let u: f64 = r.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (a, &p) in prefs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    prefs.len() - 1
}

/// Renders the behavior tensor of one user.
pub fn render_tensor(user_seed: u64, p: &SyntheticUserProfile, cfg: &GeneratorConfig) -> Result<BehaviorTensor> {
    let d = cfg.dims;
    let (h, w) = (d.height, d.width);
    let mut r = rng::stream(user_seed, &[tag::TENSOR]);
    let mut vals = vec![0.0f64; d.len()];
    let idx = |c: usize, t: usize, cell: (usize, usize)| d.index(c, t, cell.0, cell.1);
    let mut plan = plan_day(&mut r, p, h, w);
    for t in 0..d.time {
        let phase = t % cfg.slots_per_day;
        if phase == 0 && t > 0 {
            plan = plan_day(&mut r, p, h, w);
        }
        match whereabouts(&mut r, p, &plan, phase, h, w) {
            Whereabouts::At(cell) => {
                vals[idx(2, t, cell)] = 1.0;
                vals[idx(1, t, cell)] = 0.15 + 0.1 * r.random_range(0.0..1.0);
            }
            Whereabouts::Moving(path) => {
                for &cell in &path {
                    vals[idx(2, t, cell)] = 1.0;
                    vals[idx(1, t, cell)] = 0.7 + 0.3 * r.random_range(0.0..1.0);
                }
            }
        }
        let app = sample_app(&mut r, &p.app_preferences);
        vals[idx(0, t, (app / w, app % w))] = 1.0;
    }
    let sigma = cfg.noise * (1.0 - p.regularity);
    if sigma > 0.0 {
        for v in &mut vals {
            *v += sigma * rng::normal(&mut r);
        }
    }
    for v in &mut vals {
        *v = v.clamp(0.0, 1.0);
    }
    BehaviorTensor::from_f64(d, &vals)
}

/// Events over `history_days` days preceding the tensor window. Each slot
/// logs an event with probability `0.4 + 0.6 * regularity`.
pub fn render_history(user_seed: u64, p: &SyntheticUserProfile, cfg: &GeneratorConfig) -> Result<EventHistory> {
    let (h, w) = (cfg.dims.height, cfg.dims.width);
    let mut r = rng::stream(user_seed, &[tag::HISTORY]);
    let mut events = Vec::with_capacity(cfg.history_days * cfg.slots_per_day);
    let mut plan = plan_day(&mut r, p, h, w);
    for ts in 0..cfg.history_days * cfg.slots_per_day {
        let phase = ts % cfg.slots_per_day;
        if phase == 0 && ts > 0 {
            plan = plan_day(&mut r, p, h, w);
        }
        let cell = match whereabouts(&mut r, p, &plan, phase, h, w) {
            Whereabouts::At(c) => c,
            Whereabouts::Moving(path) => path[path.len() / 2],
        };
        if !r.random_bool(0.4 + 0.6 * p.regularity) {
            continue;
        }
        events.push(Event {
            app: sample_app(&mut r, &p.app_preferences),
            location: cell.0 * w + cell.1,
            timestamp: ts,
        });
    }
    EventHistory::new(events, cfg.n_apps, h * w)
}

/// Mean over time slots of the Shannon entropy of the occupancy channel
/// normalized to a distribution over cells.
pub fn occupancy_entropy(x: &BehaviorTensor) -> f64 {
    let d = x.dims();
    let c = x
        .channel_of(crate::tensor::ChannelRole::LocationOccupancy)
        .unwrap_or(d.channels - 1);
    let cells = d.height * d.width;
    let mut total = 0.0;
    for t in 0..d.time {
        let start = d.index(c, t, 0, 0);
        let slab = &x.values()[start..start + cells];
        let mass: f64 = slab.iter().map(|&v| v as f64).sum();
        if mass <= 0.0 {
            continue;
        }
        total -= slab
            .iter()
            .map(|&v| v as f64 / mass)
            .filter(|&q| q > 0.0)
            .map(|q| q * q.ln())
            .sum::<f64>();
    }
    total / d.time as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_regularity(seed: u64, reg: f64) -> (SyntheticUserProfile, BehaviorTensor) {
        let cfg = GeneratorConfig::desk();
        let mut p = sample_profile(seed, &cfg);
        p.regularity = reg;
        let x = render_tensor(seed, &p, &cfg).unwrap();
        (p, x)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(11, 4, Dims::desk()).unwrap();
        let b = generate_dataset(11, 4, Dims::desk()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(12, 4, Dims::desk()).unwrap();
        assert_ne!(a[0].tensor, c[0].tensor);
    }

    #[test]
    fn fully_regular_user_stays_home_outside_commute_and_work() {
        let (p, x) = with_regularity(3, 1.0);
        let cfg = GeneratorConfig::desk();
        let d = x.dims();
        for t in 0..d.time {
            let phase = t % cfg.slots_per_day;
            if p.commute_window.contains(&phase) || phase == p.return_phase() || p.work_phases().contains(&phase) {
                continue;
            }
            for h in 0..d.height {
                for w in 0..d.width {
                    let expect = if (h, w) == p.home_cell { 1.0 } else { 0.0 };
                    assert_eq!(x.get(2, t, h, w), expect, "t={t} cell=({h},{w})");
                }
            }
        }
    }

    #[test]
    fn irregular_user_has_higher_occupancy_entropy() {
        for seed in [1, 2, 3, 4, 5] {
            let (_, regular) = with_regularity(seed, 1.0);
            let (_, irregular) = with_regularity(seed, 0.0);
            let (a, b) = (occupancy_entropy(&irregular), occupancy_entropy(&regular));
            assert!(a > b, "seed {seed}: irregular {a} vs regular {b}");
        }
    }

    #[test]
    fn values_are_normalized_and_nonzero() {
        for rec in generate_dataset(5, 8, Dims::desk()).unwrap() {
            let v = rec.tensor.values();
            assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!(v.iter().any(|&x| x > 0.0));
            let s: f64 = rec.profile.app_preferences.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let (h, w) = rec.profile.home_cell;
            assert!(h < 8 && w < 8);
        }
    }

    #[test]
    fn history_follows_profile_vocabularies() {
        let rec = &generate_dataset(9, 1, Dims::desk()).unwrap()[0];
        assert!(!rec.history.is_empty() && rec.history.len() <= 14 * 8);
        assert!(rec.history.events().iter().all(|e| e.app < 8 && e.location < 64));
    }

    #[test]
    fn invalid_requests_are_rejected() {
        assert!(generate_dataset(1, 0, Dims::desk()).is_err());
        assert!(generate_dataset(1, 1, Dims { channels: 2, ..Dims::desk() }).is_err());
    }

    #[test]
    fn path_connects_endpoints() {
        let p = commute_path((0, 3), (2, 1));
        assert_eq!(p, vec![(0, 3), (1, 3), (2, 3), (2, 2), (2, 1)]);
    }
}
