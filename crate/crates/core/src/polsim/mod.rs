//! Agent-based patterns-of-life generator.
//!
//! Every agent lives on a random POI map: it wakes at home, works on
//! weekdays, eats whenever its hunger clock runs out and sometimes spends
//! the evening at a favorite venue. From the onset day on, outlier agents
//! skip work, get hungry faster, or pick venues at random.

mod inject;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{CheckinLog, DatasetHeader, Intensity, Label, LabelTable, OutlierType, StayPoint, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, stream_id_of, SeededRng};

pub use inject::{inject, inject_roll, DayPlan, RecreationPool};

/// 2024-01-01 00:00 UTC, a Monday.
pub const DEFAULT_EPOCH: i64 = 1_704_067_200;
/// Length of the timestamp grid.
pub const GRID_SECONDS: i64 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PoiKind {
    Home,
    Workplace,
    Restaurant,
    Recreation,
    Pub,
}

impl PoiKind {
    pub const ALL: [PoiKind; 5] = [
        PoiKind::Home,
        PoiKind::Workplace,
        PoiKind::Restaurant,
        PoiKind::Recreation,
        PoiKind::Pub,
    ];

    /// Category string written to check-in files.
    pub fn category(self) -> &'static str {
        match self {
            PoiKind::Home => "Home",
            PoiKind::Workplace => "Workplace",
            PoiKind::Restaurant => "Restaurant",
            PoiKind::Recreation => "Recreation",
            PoiKind::Pub => "Pub",
        }
    }

    /// Evening venues an agent may pick as favorites.
    pub fn is_leisure(self) -> bool {
        matches!(self, PoiKind::Recreation | PoiKind::Pub)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Poi {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub kind: PoiKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiMap {
    pub pois: Vec<Poi>,
    pub seed: u64,
}

impl PoiMap {
    pub fn of_kind(&self, kind: PoiKind) -> Vec<usize> {
        self.pois.iter().filter(|p| p.kind == kind).map(|p| p.id).collect()
    }

    pub fn leisure(&self) -> Vec<usize> {
        self.pois.iter().filter(|p| p.kind.is_leisure()).map(|p| p.id).collect()
    }

    pub fn count(&self, kind: PoiKind) -> usize {
        self.pois.iter().filter(|p| p.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_agents: usize,
    /// Days before outlier onset; also the default split day.
    pub n_normal_days: usize,
    pub n_outlier_days: usize,
    pub outliers: BTreeMap<(OutlierType, Intensity), usize>,
    pub n_homes: usize,
    pub n_workplaces: usize,
    pub n_restaurants: usize,
    pub n_recreation: usize,
    pub n_pubs: usize,
    /// Favorite evening venues per agent.
    pub n_favorites: usize,
    /// Range of the per-agent hunger period, in hours.
    pub hunger_hours: (f64, f64),
    /// Hunger outliers divide their period by this on abnormal days.
    pub hunger_factor: f64,
    /// Chance of an evening out on any day.
    pub evening_prob: f64,
    pub epoch: i64,
    pub epoch_weekday: u8,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_agents: 200,
            n_normal_days: 63,
            n_outlier_days: 14,
            outliers: desk_outliers(),
            n_homes: 120,
            n_workplaces: 30,
            n_restaurants: 40,
            n_recreation: 25,
            n_pubs: 15,
            n_favorites: 3,
            hunger_hours: (5.0, 6.5),
            hunger_factor: 3.0,
            evening_prob: 0.5,
            epoch: DEFAULT_EPOCH,
            epoch_weekday: 0,
            seed: 1,
        }
    }
}

/// Split `n` over red/orange/yellow as evenly as possible, extras going to
/// the stronger intensities first.
pub fn split_evenly(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

/// 12 hunger, 4 work and 4 social outliers.
pub fn desk_outliers() -> BTreeMap<(OutlierType, Intensity), usize> {
    outlier_counts(12, 4, 4)
}

pub fn outlier_counts(hunger: usize, work: usize, social: usize) -> BTreeMap<(OutlierType, Intensity), usize> {
    let mut m = BTreeMap::new();
    for (kind, n) in [
        (OutlierType::Hunger, hunger),
        (OutlierType::Work, work),
        (OutlierType::Social, social),
    ] {
        for (level, c) in Intensity::LEVELS.into_iter().zip(split_evenly(n)) {
            m.insert((kind, level), c);
        }
    }
    m
}

impl SimConfig {
    pub fn n_outliers(&self) -> usize {
        self.outliers.values().sum()
    }

    pub fn n_days(&self) -> usize {
        self.n_normal_days + self.n_outlier_days
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("homes", self.n_homes),
            ("workplaces", self.n_workplaces),
            ("restaurants", self.n_restaurants),
            ("recreation", self.n_recreation),
            ("pubs", self.n_pubs),
        ];
        for (name, c) in counts {
            if c == 0 {
                return Err(Error::Config(format!("sim.{name} must be at least 1")));
            }
        }
        if self.n_agents == 0 {
            return Err(Error::Config("sim.agents must be at least 1".into()));
        }
        if self.n_outlier_days == 0 {
            return Err(Error::Config("sim.outlier_days must be at least 1".into()));
        }
        if self.n_outliers() > self.n_agents {
            return Err(Error::Config(format!(
                "{} outliers requested but only {} agents",
                self.n_outliers(),
                self.n_agents
            )));
        }
        for &(kind, level) in self.outliers.keys() {
            if kind == OutlierType::None || level == Intensity::None {
                return Err(Error::Config(format!("invalid outlier class {kind}/{level}")));
            }
        }
        if self.n_favorites == 0 {
            return Err(Error::Config("sim.favorites must be at least 1".into()));
        }
        let (lo, hi) = self.hunger_hours;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("sim.hunger_hours needs 0 < min <= max".into()));
        }
        if !(self.hunger_factor >= 1.0) {
            return Err(Error::Config("sim.hunger_factor must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.evening_prob) {
            return Err(Error::Config("sim.evening_prob must lie in [0, 1]".into()));
        }
        if self.epoch_weekday > 6 {
            return Err(Error::Config("sim.epoch_weekday must be in 0..=6".into()));
        }
        Ok(())
    }
}

/// Place POIs uniformly at random in the unit square.
pub fn generate_map(cfg: &SimConfig) -> Result<PoiMap> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, stream_id_of(&["map"]));
    let mut pois = Vec::new();
    let counts = [
        (PoiKind::Home, cfg.n_homes),
        (PoiKind::Workplace, cfg.n_workplaces),
        (PoiKind::Restaurant, cfg.n_restaurants),
        (PoiKind::Recreation, cfg.n_recreation),
        (PoiKind::Pub, cfg.n_pubs),
    ];
    for (kind, n) in counts {
        for _ in 0..n {
            let (x, y) = (rng.uniform(), rng.uniform());
            pois.push(Poi {
                id: pois.len(),
                x,
                y,
                kind,
            });
        }
    }
    Ok(PoiMap { pois, seed: cfg.seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentProfile {
    pub user_id: String,
    pub home: usize,
    pub work: usize,
    /// Restaurants the agent normally eats at, nearest first.
    pub restaurants: Vec<usize>,
    pub favorite_recreation: Vec<usize>,
    pub hunger_period_hours: f64,
    pub label: Label,
    pub onset_day: usize,
}

pub fn user_id(index: usize) -> String {
    format!("u{index:04}")
}

fn nearest(map: &PoiMap, candidates: &[usize], x: f64, y: f64, n: usize) -> Vec<usize> {
    let mut by_dist: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&id| {
            let p = &map.pois[id];
            ((p.x - x).powi(2) + (p.y - y).powi(2), id)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    by_dist.into_iter().take(n).map(|(_, id)| id).collect()
}

/// Labels for every agent: a seeded shuffle picks which agents become
/// outliers of each class.
pub fn assign_labels(cfg: &SimConfig) -> Vec<Label> {
    let mut rng = seeded_rng(cfg.seed, stream_id_of(&["labels"]));
    let mut order: Vec<usize> = (0..cfg.n_agents).collect();
    rng.shuffle(&mut order);
    let mut labels = vec![Label::NORMAL; cfg.n_agents];
    let mut next = order.into_iter();
    for (&(kind, level), &count) in &cfg.outliers {
        for _ in 0..count {
            if let Some(i) = next.next() {
                labels[i] = Label::outlier(kind, level);
            }
        }
    }
    labels
}

pub fn build_profiles(cfg: &SimConfig, map: &PoiMap) -> Vec<AgentProfile> {
    let homes = map.of_kind(PoiKind::Home);
    let works = map.of_kind(PoiKind::Workplace);
    let restaurants = map.of_kind(PoiKind::Restaurant);
    let leisure = map.leisure();
    assign_labels(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let uid = user_id(i);
            let mut rng = seeded_rng(cfg.seed, stream_id_of(&["profile", &uid]));
            let home = *rng.choice(&homes).expect("map has homes");
            let work = *rng.choice(&works).expect("map has workplaces");
            let hp = &map.pois[home];
            let wp = &map.pois[work];
            let mut eat = nearest(map, &restaurants, hp.x, hp.y, 2);
            for r in nearest(map, &restaurants, wp.x, wp.y, 2) {
                if !eat.contains(&r) {
                    eat.push(r);
                }
            }
            let n_fav = cfg.n_favorites.min(leisure.len());
            let pool = nearest(map, &leisure, hp.x, hp.y, (2 * n_fav).min(leisure.len()));
            let favorite_recreation = rng
                .sample_indices(pool.len(), n_fav)
                .into_iter()
                .map(|k| pool[k])
                .collect();
            let (lo, hi) = cfg.hunger_hours;
            AgentProfile {
                user_id: uid,
                home,
                work,
                restaurants: eat,
                favorite_recreation,
                hunger_period_hours: rng.uniform_range(lo, hi),
                label,
                onset_day: cfg.n_normal_days,
            }
        })
        .collect()
}

/// Ordered `(time of day in seconds, poi)` visits for one agent-day.
pub fn schedule_day(plan: &DayPlan, profile: &AgentProfile, map: &PoiMap, rng: &mut SeededRng) -> Vec<(i64, usize)> {
    const H: f64 = 3600.0;
    let jitter = |rng: &mut SeededRng, sd_hours: f64| rng.normal() * sd_hours * H;
    let wake = 7.0 * H + jitter(rng, 0.5);
    let day_end = 23.0 * H;
    let work = plan.work.then(|| {
        let start = wake + 1.5 * H + jitter(rng, 0.25);
        (start, start + 8.0 * H + jitter(rng, 0.5))
    });
    let evening = rng.bernoulli(plan.evening_prob).then(|| 19.0 * H + jitter(rng, 0.75));
    let venue = match plan.recreation {
        RecreationPool::Favorites => *rng.choice(&profile.favorite_recreation).expect("agent has favorites"),
        RecreationPool::All => *rng.choice(&map.leisure()).expect("map has leisure venues"),
    };

    let mut visits: Vec<(f64, usize)> = vec![(wake, profile.home)];
    if let Some((start, end)) = work {
        visits.push((start, profile.work));
        visits.push((end, profile.home));
    }
    if let Some(t) = evening {
        visits.push((t, venue));
    }
    // Meals interrupt whatever the agent is doing; outside work hours the
    // agent heads home afterwards.
    let period = plan.hunger_period_hours * H;
    let mut meal = wake + period;
    while meal < day_end {
        let r = *rng.choice(&profile.restaurants).expect("agent has restaurants");
        visits.push((meal, r));
        let at_work = work.is_some_and(|(s, e)| meal >= s && meal < e);
        let back = meal + 0.75 * H;
        if !at_work && back < day_end {
            visits.push((back, profile.home));
        }
        meal += period;
    }
    if let Some(t) = evening {
        visits.push((t + 2.5 * H, profile.home));
    }

    let mut out: Vec<(i64, usize)> = visits
        .into_iter()
        .map(|(t, poi)| {
            let slot = (t / GRID_SECONDS as f64).round() as i64;
            let jit = rng.below(GRID_SECONDS as usize / 5) as i64;
            ((slot * GRID_SECONDS + jit).clamp(0, SECONDS_PER_DAY - 1), poi)
        })
        .collect();
    out.sort_by_key(|&(t, _)| t);
    out.dedup_by(|b, a| a.1 == b.1);
    out
}

/// Base plan before any injection.
pub fn base_plan(cfg: &SimConfig, profile: &AgentProfile, weekday: u8) -> DayPlan {
    DayPlan {
        work: weekday < 5,
        hunger_period_hours: profile.hunger_period_hours,
        evening_prob: cfg.evening_prob,
        recreation: RecreationPool::Favorites,
    }
}

/// Simulate one agent over the whole calendar.
pub fn simulate_agent(cfg: &SimConfig, map: &PoiMap, profile: &AgentProfile) -> Vec<StayPoint> {
    let mut points = Vec::new();
    for day in 0..cfg.n_days() {
        let weekday = ((day + cfg.epoch_weekday as usize) % 7) as u8;
        let mut plan = base_plan(cfg, profile, weekday);
        if day >= profile.onset_day && profile.label.is_outlier {
            let mut roll = seeded_rng(cfg.seed, inject_stream(&profile.user_id, day));
            plan = inject(
                profile.label.kind,
                profile.label.intensity,
                plan,
                cfg.hunger_factor,
                &mut roll,
            )
            .expect("labels are validated");
        }
        let mut rng = seeded_rng(cfg.seed, stream_id_of(&["day", &profile.user_id, &day.to_string()]));
        let base = cfg.epoch + day as i64 * SECONDS_PER_DAY;
        for (t, poi) in schedule_day(&plan, profile, map, &mut rng) {
            let p = &map.pois[poi];
            points.push(StayPoint {
                x: p.x,
                y: p.y,
                t: base + t,
                category: p.kind.category().to_string(),
            });
        }
    }
    points
}

/// RNG stream deciding whether an outlier acts abnormally on `day`.
pub fn inject_stream(user: &str, day: usize) -> u64 {
    stream_id_of(&["inject", user, &day.to_string()])
}

/// Simulated dataset and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub checkins: CheckinLog,
    pub labels: LabelTable,
    pub profiles: Vec<AgentProfile>,
}

pub fn simulate(cfg: &SimConfig, map: &PoiMap) -> Result<Simulation> {
    cfg.validate()?;
    let profiles = build_profiles(cfg, map);
    let streams: Vec<(String, Vec<StayPoint>)> = profiles
        .par_iter()
        .map(|p| (p.user_id.clone(), simulate_agent(cfg, map, p)))
        .collect();
    let labels = LabelTable {
        labels: profiles.iter().map(|p| (p.user_id.clone(), p.label)).collect(),
        unknown_fields: 0,
    };
    let checkins = CheckinLog {
        header: DatasetHeader {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            epoch: cfg.epoch,
            epoch_weekday: cfg.epoch_weekday,
            split_day: cfg.n_normal_days,
            n_days: cfg.n_days(),
        },
        streams: streams.into_iter().collect(),
        unknown_fields: 0,
    };
    Ok(Simulation {
        checkins,
        labels,
        profiles,
    })
}

#[cfg(test)]
mod tests;
