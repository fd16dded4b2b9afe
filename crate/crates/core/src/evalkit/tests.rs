use super::*;
use crate::data::{DatasetHeader, Label};
use crate::numerics::seeded_rng;
use crate::scoring::UserScore;
use proptest::prelude::*;

/// Precision at each positive's rank, with ranks taken from strict
/// comparisons and input order among ties.
fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let rank_of = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let mut total = 0.0;
    for &i in &pos {
        let r = rank_of(i);
        let above = pos.iter().filter(|&&j| rank_of(j) <= r).count();
        total += above as f64 / r as f64;
    }
    total / pos.len() as f64
}

/// Enumerate every (positive, negative) pair.
fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

fn table(outliers: &[(&str, OutlierType, Intensity)], normals: &[&str]) -> LabelTable {
    let mut labels = BTreeMap::new();
    for &(u, t, i) in outliers {
        labels.insert(u.to_string(), Label::outlier(t, i));
    }
    for &u in normals {
        labels.insert(u.to_string(), Label::NORMAL);
    }
    LabelTable {
        labels,
        unknown_fields: 0,
    }
}

#[test]
fn worked_example() {
    let s = [0.9, 0.8, 0.7, 0.6];
    let y = [true, false, true, false];
    assert!((average_precision(&s, &y).unwrap() - 0.833_333_333_3).abs() < 1e-9);
    assert!((roc_auc(&s, &y).unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn perfect_and_tied_rankings() {
    let y = [true, true, false, false, false];
    let s = [5.0, 4.0, 3.0, 2.0, 1.0];
    assert_eq!(average_precision(&s, &y).unwrap(), 1.0);
    assert_eq!(roc_auc(&s, &y).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.3; 5], &y).unwrap(), 0.5);
}

#[test]
fn single_class_is_an_error() {
    assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
    assert!(average_precision(&[1.0, 2.0], &[false, false]).is_err());
    assert!(roc_auc(&[1.0], &[true, false]).is_err());
}

#[test]
fn metrics_match_oracles_on_random_instances() {
    let mut rng = seeded_rng(11, 0);
    let mut done = 0;
    while done < 200 {
        let n = 2 + rng.below(49);
        // Coarse scores so ties are common.
        let s: Vec<f64> = (0..n).map(|_| (rng.below(8) as f64) / 4.0).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
        if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
            continue;
        }
        let (ap, auc) = (average_precision(&s, &y).unwrap(), roc_auc(&s, &y).unwrap());
        assert!((ap - ap_oracle(&s, &y)).abs() < 1e-9, "ap {s:?} {y:?}");
        assert!((auc - auc_oracle(&s, &y)).abs() < 1e-9, "auc {s:?} {y:?}");
        done += 1;
    }
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_maps(
        s in prop::collection::vec(-5.0f64..5.0, 2..40),
        y in prop::collection::vec(any::<bool>(), 40),
    ) {
        let y = &y[..s.len()];
        prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
        let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(roc_auc(&s, y).unwrap(), roc_auc(&t, y).unwrap());
    }
}

#[test]
fn top_k_counts() {
    let labels = table(
        &[
            ("a", OutlierType::Work, Intensity::Red),
            ("b", OutlierType::Hunger, Intensity::Yellow),
        ],
        &["c", "d", "e"],
    );
    let perfect: Vec<String> = ["a", "b", "c", "d", "e"].map(String::from).to_vec();
    assert_eq!(top_k_hits(&perfect, &labels, 2), 2);
    assert_eq!(top_k_hits(&perfect, &labels, 0), 0);
    assert_eq!(top_k_hits(&perfect, &labels, 5), labels.n_outliers());
}

#[test]
fn random_ranking_hits_match_replayed_permutation() {
    let users: Vec<String> = (0..100).map(|i| format!("u{i:03}")).collect();
    let outliers: Vec<(&str, OutlierType, Intensity)> = users[..10]
        .iter()
        .map(|u| (u.as_str(), OutlierType::Hunger, Intensity::Red))
        .collect();
    let normals: Vec<&str> = users[10..].iter().map(String::as_str).collect();
    let labels = table(&outliers, &normals);
    let mut ranking = users.clone();
    seeded_rng(5, 0).shuffle(&mut ranking);
    // Replay the same permutation on indices and count outlier indices.
    let mut idx: Vec<usize> = (0..100).collect();
    seeded_rng(5, 0).shuffle(&mut idx);
    let expected = idx[..10].iter().filter(|&&i| i < 10).count();
    assert_eq!(top_k_hits(&ranking, &labels, 10), expected);
}

#[test]
fn breakdown_partitions_hits() {
    let labels = table(
        &[
            ("a", OutlierType::Work, Intensity::Red),
            ("b", OutlierType::Work, Intensity::Red),
            ("c", OutlierType::Social, Intensity::Orange),
        ],
        &["d", "e"],
    );
    let ranking: Vec<String> = ["a", "d", "b", "c", "e"].map(String::from).to_vec();
    let cells = breakdown(&ranking, &labels, 3);
    assert_eq!(cells[&(OutlierType::Work, Intensity::Red)], 2);
    assert_eq!(cells[&(OutlierType::Hunger, Intensity::Yellow)], 0);
    assert_eq!(cells.len(), 9);
    assert_eq!(cells.values().sum::<usize>(), top_k_hits(&ranking, &labels, 3));
    assert_eq!(detection_rate(&cells, &labels, OutlierType::Work), Some(1.0));
    assert_eq!(detection_rate(&cells, &labels, OutlierType::Social), Some(0.0));
    assert_eq!(detection_rate(&cells, &labels, OutlierType::Hunger), None);
}

fn dataset(days: &[(&str, Vec<Vec<(f64, f64)>>)], split: usize) -> Dataset {
    let mut ds = Dataset::empty(16);
    ds.header = DatasetHeader {
        split_day: split,
        n_days: days[0].1.len(),
        ..DatasetHeader::default()
    };
    for (u, per_day) in days {
        let trajs = per_day
            .iter()
            .enumerate()
            .map(|(d, pts)| crate::data::DailyTrajectory {
                user_id: u.to_string(),
                day_index: d,
                weekday: ds.header.weekday_of(d),
                points: pts
                    .iter()
                    .enumerate()
                    .map(|(i, &(x, y))| crate::data::StayPoint {
                        x,
                        y,
                        t: ds.header.epoch + 86_400 * d as i64 + 3600 * i as i64,
                        category: "Home".into(),
                    })
                    .collect(),
                cutoff_len: 16,
            })
            .collect();
        ds.daily.insert(u.to_string(), trajs);
    }
    ds
}

#[test]
fn distance_baseline_flags_an_agent_that_stops_moving() {
    let commute = vec![(0.0, 0.0), (0.5, 0.0), (0.0, 0.0)];
    let wobble = vec![(0.0, 0.0), (0.45, 0.0), (0.0, 0.0)];
    let still = vec![(0.0, 0.0)];
    let steady: Vec<Vec<(f64, f64)>> = (0..6)
        .map(|d| if d % 2 == 0 { commute.clone() } else { wobble.clone() })
        .collect();
    let mut stops = steady.clone();
    stops[4] = still.clone();
    stops[5] = still;
    let ds = dataset(&[("a", steady.clone()), ("b", stops)], 4);
    let scores = distance_baseline(&ds);
    assert!(scores[0].1 < 1e-9, "{scores:?}");
    assert!(scores[1].1 > 10.0, "{scores:?}");
    assert_eq!(scores, distance_baseline(&ds));
}

fn user(id: &str, ct: Option<f64>, cp: Option<f64>, fused: f64) -> UserScore {
    UserScore {
        user_id: id.into(),
        cross_time: ct,
        cross_population: cp,
        fused,
        rank: 0,
    }
}

#[test]
fn evaluation_picks_the_best_channel() {
    let labels = table(&[("a", OutlierType::Work, Intensity::Red)], &["b", "c"]);
    let scores = [
        user("a", Some(0.9), Some(0.1), 0.5),
        user("b", Some(0.1), Some(0.5), 0.6),
        user("c", None, Some(0.9), 0.4),
    ];
    let ev = evaluate(&scores, &labels, &[1], None).unwrap();
    assert_eq!(ev.best, Channel::CrossTime);
    assert_eq!(ev.best_metrics().auc, 1.0);
    assert_eq!(ev.channel(Channel::CrossPopulation).unwrap().auc, 0.0);
    assert_eq!(ev.breakdown[&(OutlierType::Work, Intensity::Red)], 1);
    let report = render_report("# x\n", &ev, Some(&ev), &[0.5, 1.5]);
    assert!(report.contains("best_auc = 1.000000"));
    assert!(report.contains("original,cross_time"));
    assert!(report.contains("transfer,cross_time"));
    assert!(report.contains("mean,1.0000"));
}

#[test]
fn unlabeled_users_are_rejected() {
    let labels = table(&[("a", OutlierType::Work, Intensity::Red)], &["b"]);
    let scores = [user("a", None, None, 1.0), user("zz", None, None, 0.0)];
    assert!(evaluate(&scores, &labels, &[1], None).is_err());
}

#[test]
fn scaled_cutoff() {
    assert_eq!(scaled_k(200), 20);
    assert_eq!(scaled_k(1000), 100);
    assert_eq!(scaled_k(5), 1);
    assert_eq!(cutoffs(&[10, 100], 200), vec![10, 20, 100]);
}
