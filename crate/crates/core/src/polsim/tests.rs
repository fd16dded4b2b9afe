use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::data::render_checkins;

fn small(seed: u64) -> SimConfig {
    SimConfig {
        n_agents: 40,
        n_normal_days: 63,
        n_outlier_days: 14,
        outliers: outlier_counts(3, 6, 3),
        seed,
        ..SimConfig::default()
    }
}

fn run(cfg: &SimConfig) -> Simulation {
    simulate(cfg, &generate_map(cfg).unwrap()).unwrap()
}

fn is_test_weekday(cfg: &SimConfig, t: i64) -> Option<usize> {
    let day = ((t - cfg.epoch) / SECONDS_PER_DAY) as usize;
    let weekday = (day + cfg.epoch_weekday as usize) % 7;
    (day >= cfg.n_normal_days && weekday < 5).then_some(day)
}

#[test]
fn map_is_deterministic_and_sized() {
    let cfg = SimConfig {
        n_restaurants: 10,
        ..SimConfig::default()
    };
    let a = generate_map(&cfg).unwrap();
    assert_eq!(a, generate_map(&cfg).unwrap());
    assert_eq!(a.count(PoiKind::Restaurant), 10);
    assert!(a
        .pois
        .iter()
        .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
    for kind in PoiKind::ALL {
        assert!(a.count(kind) >= 1);
    }
}

#[test]
fn zero_homes_is_rejected() {
    let cfg = SimConfig {
        n_homes: 0,
        ..SimConfig::default()
    };
    match generate_map(&cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("homes"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = small(5);
    let (a, b) = (run(&cfg), run(&cfg));
    assert_eq!(render_checkins(&a.checkins), render_checkins(&b.checkins));
    assert_eq!(
        crate::data::render_labels(&a.labels),
        crate::data::render_labels(&b.labels)
    );
    let other = run(&small(6));
    assert_ne!(render_checkins(&a.checkins), render_checkins(&other.checkins));
}

#[test]
fn thread_count_does_not_change_output() {
    let cfg = small(9);
    let map = generate_map(&cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let parallel = pool.install(|| simulate(&cfg, &map).unwrap());
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| simulate(&cfg, &map).unwrap());
    assert_eq!(render_checkins(&parallel.checkins), render_checkins(&single.checkins));
}

#[test]
fn normal_weekdays_visit_work_once() {
    let cfg = small(2);
    let sim = run(&cfg);
    for (user, pts) in &sim.checkins.streams {
        if sim.labels.is_outlier(user) {
            continue;
        }
        let mut per_day = vec![0usize; cfg.n_days()];
        for p in pts.iter().filter(|p| p.category == "Workplace") {
            per_day[((p.t - cfg.epoch) / SECONDS_PER_DAY) as usize] += 1;
        }
        for (day, n) in per_day.iter().enumerate() {
            let weekday = (day + cfg.epoch_weekday as usize) % 7;
            assert_eq!(*n, usize::from(weekday < 5), "user {user} day {day}");
        }
    }
}

#[test]
fn label_counts_match_table_one() {
    let cfg = SimConfig {
        n_agents: 1000,
        outliers: outlier_counts(90, 30, 30),
        n_normal_days: 1,
        n_outlier_days: 1,
        ..SimConfig::default()
    };
    let sim = run(&cfg);
    assert_eq!(sim.labels.len(), 1000);
    assert_eq!(sim.labels.n_outliers(), 150);
}

#[test]
fn red_work_outliers_never_work_in_test_window() {
    let cfg = small(3);
    let sim = run(&cfg);
    let red: Vec<_> = sim
        .profiles
        .iter()
        .filter(|p| p.label == Label::outlier(OutlierType::Work, Intensity::Red))
        .collect();
    assert!(!red.is_empty());
    for p in red {
        let n = sim.checkins.streams[&p.user_id]
            .iter()
            .filter(|s| s.category == "Workplace" && is_test_weekday(&cfg, s.t).is_some())
            .count();
        assert_eq!(n, 0, "{}", p.user_id);
    }
}

#[test]
fn yellow_work_skips_match_rng_replay() {
    let cfg = small(4);
    let sim = run(&cfg);
    let test_weekdays: Vec<usize> = (cfg.n_normal_days..cfg.n_days())
        .filter(|d| (d + cfg.epoch_weekday as usize) % 7 < 5)
        .collect();
    assert_eq!(test_weekdays.len(), 10);
    let yellow: Vec<_> = sim
        .profiles
        .iter()
        .filter(|p| p.label == Label::outlier(OutlierType::Work, Intensity::Yellow))
        .collect();
    assert!(!yellow.is_empty());
    for p in yellow {
        // Independent replay of the per-day injection draw.
        let expected = test_weekdays
            .iter()
            .filter(|&&d| {
                let mut rng = seeded_rng(cfg.seed, stream_id_of(&["inject", &p.user_id, &d.to_string()]));
                rng.uniform() < 0.2
            })
            .count();
        let worked: std::collections::BTreeSet<usize> = sim.checkins.streams[&p.user_id]
            .iter()
            .filter(|s| s.category == "Workplace")
            .filter_map(|s| is_test_weekday(&cfg, s.t))
            .collect();
        assert_eq!(test_weekdays.len() - worked.len(), expected, "{}", p.user_id);
    }
}

#[test]
fn inject_none_is_identity() {
    let plan = DayPlan {
        work: true,
        hunger_period_hours: 5.0,
        evening_prob: 0.5,
        recreation: RecreationPool::Favorites,
    };
    let mut rng = seeded_rng(1, 2);
    let mut untouched = seeded_rng(1, 2);
    let out = inject(OutlierType::None, Intensity::None, plan.clone(), 3.0, &mut rng).unwrap();
    assert_eq!(out, plan);
    assert_eq!(rng.next_u64(), untouched.next_u64());
    assert!(inject(OutlierType::Work, Intensity::None, plan.clone(), 3.0, &mut rng).is_err());

    let mut rng = seeded_rng(1, 3);
    let hungry = inject(OutlierType::Hunger, Intensity::Red, plan.clone(), 3.0, &mut rng).unwrap();
    assert_eq!(hungry.hunger_period_hours, 5.0 / 3.0);
    let social = inject(OutlierType::Social, Intensity::Red, plan.clone(), 3.0, &mut rng).unwrap();
    assert_eq!(social.recreation, RecreationPool::All);
}

#[test]
fn outlier_label_iff_behavior_was_injected() {
    let cfg = small(7);
    let map = generate_map(&cfg).unwrap();
    let sim = simulate(&cfg, &map).unwrap();
    for p in &sim.profiles {
        let mut never = p.clone();
        never.onset_day = usize::MAX;
        let untouched = simulate_agent(&cfg, &map, &never);
        let actual = &sim.checkins.streams[&p.user_id];
        if !p.label.is_outlier {
            assert_eq!(&untouched, actual, "{}", p.user_id);
        } else if p.label.intensity == Intensity::Red {
            assert_ne!(&untouched, actual, "{}", p.user_id);
        }
    }
}

#[test]
fn normal_agents_behave_the_same_after_the_split() {
    let cfg = SimConfig {
        n_agents: 60,
        outliers: outlier_counts(3, 3, 3),
        seed: 11,
        ..SimConfig::default()
    };
    let sim = run(&cfg);
    let cats = PoiKind::ALL.map(PoiKind::category);
    let mut counts = [[0.0f64; 5]; 2];
    for (user, pts) in &sim.checkins.streams {
        if sim.labels.is_outlier(user) {
            continue;
        }
        for p in pts {
            let side = usize::from((p.t - cfg.epoch) / SECONDS_PER_DAY >= cfg.n_normal_days as i64);
            let c = cats.iter().position(|c| *c == p.category).unwrap();
            counts[side][c] += 1.0;
        }
    }
    // Chi-square test of homogeneity between the two windows.
    let total: f64 = counts.iter().flatten().sum();
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let mut stat = 0.0;
    for c in 0..5 {
        let col = counts[0][c] + counts[1][c];
        for r in 0..2 {
            let e = rows[r] * col / total;
            stat += (counts[r][c] - e).powi(2) / e;
        }
    }
    let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat}, p = {p}");
}

#[test]
fn split_evenly_favors_strong_intensities() {
    assert_eq!(split_evenly(12), [4, 4, 4]);
    assert_eq!(split_evenly(4), [2, 1, 1]);
    assert_eq!(split_evenly(5), [2, 2, 1]);
    assert_eq!(desk_outliers().values().sum::<usize>(), 20);
}

#[test]
fn checkins_are_sorted_and_in_calendar() {
    let cfg = small(8);
    let sim = run(&cfg);
    for pts in sim.checkins.streams.values() {
        assert!(pts.windows(2).all(|w| w[0].t <= w[1].t));
        let last = cfg.epoch + cfg.n_days() as i64 * SECONDS_PER_DAY;
        assert!(pts.iter().all(|p| p.t >= cfg.epoch && p.t < last));
    }
}
