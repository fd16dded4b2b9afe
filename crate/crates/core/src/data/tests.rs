use proptest::prelude::*;

use super::*;

const T0: i64 = 1_704_067_200;

fn point(t: i64, cat: &str) -> StayPoint {
    StayPoint {
        x: 0.25,
        y: 0.75,
        t,
        category: cat.to_string(),
    }
}

fn log_with(points: Vec<StayPoint>, n_days: usize) -> CheckinLog {
    let mut log = CheckinLog {
        header: DatasetHeader {
            epoch: T0,
            n_days,
            split_day: n_days / 2,
            ..DatasetHeader::default()
        },
        ..CheckinLog::default()
    };
    log.streams.insert("a1".into(), points);
    log
}

#[test]
fn cutoff_keeps_first_points() {
    let pts: Vec<_> = (0..20).map(|i| point(T0 + 3600 + i * 60, "Restaurant")).collect();
    let ds = segment_daily(&log_with(pts.clone(), 1), 16).unwrap();
    let day = &ds.days("a1")[0];
    assert_eq!(day.valid_len(), 16);
    assert_eq!(day.points, pts[..16]);
}

#[test]
fn empty_day_is_fully_masked() {
    let pts = vec![point(T0 + 100, "Home"), point(T0 + 2 * SECONDS_PER_DAY + 100, "Home")];
    let ds = segment_daily(&log_with(pts, 3), 16).unwrap();
    let empty = &ds.days("a1")[1];
    assert_eq!(empty.valid_len(), 0);
    assert!(empty.mask().iter().all(|m| !m));
    assert_eq!(empty.mask().len(), 16);
}

#[test]
fn exact_cutoff_has_no_padding() {
    let pts: Vec<_> = (0..16).map(|i| point(T0 + i * 60, "Workplace")).collect();
    let ds = segment_daily(&log_with(pts, 1), 16).unwrap();
    assert_eq!(ds.days("a1")[0].valid_len(), 16);
    assert!(ds.days("a1")[0].mask().iter().all(|m| *m));
}

#[test]
fn unsorted_input_names_user_and_time() {
    let pts = vec![point(T0 + 500, "Home"), point(T0 + 100, "Pub")];
    match segment_daily(&log_with(pts, 1), 16) {
        Err(Error::Unsorted { user, t }) => {
            assert_eq!(user, "a1");
            assert_eq!(t, T0 + 100);
        }
        other => panic!("expected unsorted error, got {other:?}"),
    }
}

#[test]
fn empty_stream_gives_empty_dataset() {
    let ds = segment_daily(&CheckinLog::default(), 16).unwrap();
    assert!(ds.is_empty());
    let parsed = parse_checkins("", "empty").unwrap();
    assert!(segment_daily(&parsed, 16).unwrap().is_empty());
}

#[test]
fn weekday_follows_epoch() {
    let mut log = log_with(vec![point(T0, "Home")], 10);
    log.header.epoch_weekday = 5;
    let ds = segment_daily(&log, 4).unwrap();
    for d in ds.days("a1") {
        assert_eq!(d.weekday as usize, (d.day_index + 5) % 7);
    }
}

#[test]
fn day_pattern_examples() {
    assert_eq!(day_pattern_set(10, 7, 21).into_iter().collect::<Vec<_>>(), vec![3, 17]);
    assert!(day_pattern_set(1, 7, 7).is_empty());
    assert_eq!(
        day_pattern_set(8, 7, 22).into_iter().collect::<Vec<_>>(),
        vec![1, 15, 22]
    );
}

/// Straight evaluation of the set definition over a window of q values.
fn pattern_brute(d: usize, f: usize, total: usize) -> BTreeSet<usize> {
    let mut s = BTreeSet::new();
    for q in -(total as i64)..=(total as i64) {
        if q == 0 {
            continue;
        }
        let v = d as i64 + f as i64 * q;
        if v >= 1 && v <= total as i64 {
            s.insert(v as usize);
        }
    }
    s
}

#[test]
fn day_pattern_brute_force_properties() {
    for total in 1..=60 {
        for f in 1..=9 {
            for d in 1..=total {
                let set = day_pattern_set(d, f, total);
                assert_eq!(set, pattern_brute(d, f, total), "d={d} f={f} D={total}");
                assert!(set.len() <= total.div_ceil(f));
                for other in 1..=total {
                    assert_eq!(set.contains(&other), in_day_pattern(d, other, f, total));
                    assert_eq!(set.contains(&other), day_pattern_set(other, f, total).contains(&d));
                }
            }
        }
    }
}

#[test]
fn checkin_record_parses() {
    let text = concat!(
        r#"{"format":"semtraj-checkins/1","x_min":0.0,"x_max":1.0,"y_min":0.0,"y_max":1.0,"epoch":1700000000,"epoch_weekday":1,"split_day":0,"n_days":1}"#,
        "\n",
        r#"{"user":"a1","t":1700000000,"x":0.5,"y":0.5,"category":"Restaurant"}"#,
        "\n"
    );
    let log = parse_checkins(text, "mem").unwrap();
    assert_eq!(log.n_records(), 1);
    assert_eq!(
        log.streams["a1"][0],
        StayPoint {
            x: 0.5,
            y: 0.5,
            t: 1_700_000_000,
            category: "Restaurant".into()
        }
    );
}

#[test]
fn normalization_uses_header_box_and_counts_unknown_fields() {
    let text = concat!(
        r#"{"format":"semtraj-checkins/1","x_min":10.0,"x_max":20.0,"y_min":-5.0,"y_max":5.0,"epoch":0,"epoch_weekday":0,"split_day":0,"n_days":1,"city":"x"}"#,
        "\n",
        r#"{"user":"b","t":5,"x":15.0,"y":5.0,"category":"Pub","venue":"The Anchor"}"#,
        "\n"
    );
    let log = parse_checkins(text, "mem").unwrap();
    let p = &log.streams["b"][0];
    assert_eq!((p.x, p.y), (0.5, 1.0));
    assert_eq!(log.unknown_fields, 2);
}

#[test]
fn malformed_line_reports_line_number() {
    let text = concat!(
        r#"{"format":"semtraj-checkins/1","x_min":0.0,"x_max":1.0,"y_min":0.0,"y_max":1.0,"epoch":0,"epoch_weekday":0,"split_day":0,"n_days":1}"#,
        "\n",
        r#"{"user":"b","t":5,"x":0.5,"y":0.5,"category":"Pub"}"#,
        "\n",
        r#"{"user":"b","t":"late","x":0.5,"y":0.5,"category":"Pub"}"#,
        "\n"
    );
    match parse_checkins(text, "mem") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn label_rows() {
    let t = parse_labels("a7,1,work,red\nb2,0,none,none\n", "mem").unwrap();
    assert_eq!(t.get("a7"), Some(&Label::outlier(OutlierType::Work, Intensity::Red)));
    assert_eq!(t.get("b2"), Some(&Label::NORMAL));
    assert_eq!(t.n_outliers(), 1);
    assert!(parse_labels("c,0,work,none\n", "mem").is_err());
    assert!(parse_labels("c,2,work,red\n", "mem").is_err());
    assert!(parse_labels("", "mem").unwrap().is_empty());
}

fn arb_log() -> impl Strategy<Value = CheckinLog> {
    let user = prop::collection::vec(
        (0i64..6 * SECONDS_PER_DAY, 0.0f64..=1.0, 0.0f64..=1.0, 0usize..4),
        1..40,
    );
    prop::collection::btree_map("[a-c][0-9]", user, 1..4).prop_map(|m| {
        let cats = ["Home", "Workplace", "Restaurant", "Pub"];
        let streams = m
            .into_iter()
            .map(|(u, mut pts)| {
                pts.sort_by_key(|p| p.0);
                let pts = pts
                    .into_iter()
                    .map(|(t, x, y, c)| StayPoint {
                        x,
                        y,
                        t: T0 + t,
                        category: cats[c].to_string(),
                    })
                    .collect();
                (u, pts)
            })
            .collect();
        CheckinLog {
            header: DatasetHeader {
                epoch: T0,
                epoch_weekday: 3,
                split_day: 4,
                n_days: 6,
                ..DatasetHeader::default()
            },
            streams,
            unknown_fields: 0,
        }
    })
}

proptest! {
    #[test]
    fn write_then_load_is_identity(log in arb_log(), cutoff in 1usize..6) {
        let ds = segment_daily(&log, cutoff).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        ds.write(&path).unwrap();
        let back = Dataset::load(&path, cutoff).unwrap();
        prop_assert_eq!(&back, &ds);
        // Segmenting already-segmented data changes nothing.
        let again = segment_daily(&ds.to_checkin_log(), cutoff).unwrap();
        prop_assert_eq!(again, ds);
    }
}
