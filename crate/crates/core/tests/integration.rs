//! Cross-module checks: flux feeding the patch dynamics, and the cascade
//! stages measured on seeded generator output.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{Duration, NaiveDate, TimeZone, Utc};

use arbomap::coarsegeo;
use arbomap::epimodel::{step_rk4, EpiParams, EpiState, PatchGraph};
use arbomap::flux::{build_visit_sets, to_rate_matrix, TextMapping, VisitSet};
use arbomap::geo::{haversine_m, GeoPoint, Patch, Polygon};
use arbomap::homeloc::{
    dbscan_user, extract_records, forest_prune, forest_train, label_records, predict_homes,
    train_cascade, CascadeConfig, ClusterRecord, ForestConfig, LocationIndex, Verdict,
    DEFAULT_EPS_M,
};
use arbomap::ingest::{synth_generate_with, ActivityEvent, SynthConfig};

fn rect(id: &str, lat0: f64, lon0: f64, dlat: f64, dlon: f64, pop: f64) -> Patch {
    Patch {
        id: id.into(),
        name: id.into(),
        geometry: Polygon::new(vec![vec![
            GeoPoint { lat: lat0, lon: lon0 },
            GeoPoint { lat: lat0, lon: lon0 + dlon },
            GeoPoint { lat: lat0 + dlat, lon: lon0 + dlon },
            GeoPoint { lat: lat0 + dlat, lon: lon0 },
        ]])
        .unwrap(),
        human_population: pop,
        vector_capacity: pop * 1.5,
    }
}

fn small_synth_zones() -> Vec<Patch> {
    vec![
        rect("src", 18.00, -66.50, 0.40, 0.50, 100_000.0),
        rect("dst_a", 25.50, -80.50, 0.40, 0.50, 50_000.0),
        rect("dst_b", 27.90, -82.55, 0.40, 0.50, 50_000.0),
    ]
}

fn small_synth_config(seed: u64, n_users: usize) -> SynthConfig {
    SynthConfig {
        seed,
        n_users,
        home_rate: 0.6,
        travel_fraction: 0.3,
        source_zone: "src".into(),
        zones_geojson: PathBuf::new(),
        neighborhoods_geojson: None,
        vocabulary_per_zone: BTreeMap::from([
            ("src".to_string(), vec!["coqui".into(), "playa".into(), "isla".into()]),
            ("dst_a".to_string(), vec!["causeway".into(), "biscayne".into()]),
            ("dst_b".to_string(), vec!["ybor".into(), "bayshore".into()]),
        ]),
        events_per_user: (20, 40),
        per_user_cap: None,
        tz_offset_hours: -4,
    }
}

/// Return flow at factor 1 keeps total human population flat: derived flux
/// rates feed the integrator for a year with drift under 1e-6 relative.
#[test]
fn return_flow_preserves_population_over_a_year() {
    let patches = small_synth_zones();
    let flux = BTreeMap::from([("dst_a".to_string(), 120.0), ("dst_b".to_string(), 40.0)]);
    let alpha = to_rate_matrix(&flux, &patches, "src", 1.0).unwrap();
    let graph = PatchGraph::new(patches, alpha).unwrap();
    let mut state = EpiState::all_susceptible(&graph);
    state.e_h[0] = 500.0;
    state.s_h[0] -= 500.0;
    let params = EpiParams::default();
    let before = state.total_humans();
    for _ in 0..3650 {
        state = step_rk4(&state, &graph, &params, 0.1).unwrap();
    }
    let drift = (state.total_humans() - before).abs() / before;
    assert!(drift <= 1e-6, "population drift {drift:.3e} > 1e-6 over 365 days");
}

fn labeled_records_from_synth(seed: u64, n_users: usize) -> Vec<ClusterRecord> {
    let zones = small_synth_zones();
    let cfg = small_synth_config(seed, n_users);
    let data = synth_generate_with(&cfg, &zones, &[]).unwrap();
    let index = LocationIndex::build(&data.events);
    let mut by_user: BTreeMap<&str, Vec<ActivityEvent>> = BTreeMap::new();
    for ev in &data.events {
        by_user.entry(ev.user_id.as_str()).or_default().push(ev.clone());
    }
    let mut records = Vec::new();
    for evs in by_user.values() {
        let clusters = dbscan_user(evs, DEFAULT_EPS_M, 1);
        records.extend(extract_records(evs, &clusters, &index, cfg.tz_offset_hours));
    }
    label_records(&mut records, &data.truth, DEFAULT_EPS_M);
    records
}

/// The prune stage keeps nearly every true home while dropping a sizable
/// share of candidate records.
#[test]
fn forest_prune_keeps_recall_while_discarding() {
    let records = labeled_records_from_synth(7, 150);
    let forest = forest_train(&records, &ForestConfig::default(), 7).unwrap();
    let surviving = forest_prune(&records, &forest);

    let true_homes: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == Some(true))
        .map(|(i, _)| i)
        .collect();
    let kept_homes = true_homes.iter().filter(|i| surviving.contains(i)).count();
    let recall = kept_homes as f64 / true_homes.len() as f64;
    let discard = 1.0 - surviving.len() as f64 / records.len() as f64;
    assert!(recall >= 0.95, "prune recall {recall:.3} < 0.95");
    assert!(discard >= 0.30, "prune discarded only {discard:.3} < 0.30");
}

/// After training, true-home records score above non-homes on average.
#[test]
fn scorer_separates_homes_from_non_homes() {
    let records = labeled_records_from_synth(11, 120);
    let model = train_cascade(&records, &CascadeConfig::default(), 11).unwrap();
    let score =
        |r: &ClusterRecord| model.scorer.predict(&model.norm.apply(&r.features));
    let (mut home_sum, mut home_n, mut other_sum, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    for r in &records {
        match r.label {
            Some(true) => {
                home_sum += score(r);
                home_n += 1;
            }
            _ => {
                other_sum += score(r);
                other_n += 1;
            }
        }
    }
    let (home_mean, other_mean) = (home_sum / home_n as f64, other_sum / other_n as f64);
    assert!(
        home_mean > other_mean,
        "mean home score {home_mean:.3} not above non-home {other_mean:.3}"
    );
}

/// A tightly jittered five-event user resolves to within 100 m when the
/// model was trained on a matching generator run.
#[test]
fn five_event_user_round_trip() {
    let zones = small_synth_zones();
    let mut cfg = small_synth_config(13, 120);
    cfg.events_per_user = (5, 12); // sparse users are in-distribution
    let data = synth_generate_with(&cfg, &zones, &[]).unwrap();

    let index = LocationIndex::build(&data.events);
    let mut by_user: BTreeMap<&str, Vec<ActivityEvent>> = BTreeMap::new();
    for ev in &data.events {
        by_user.entry(ev.user_id.as_str()).or_default().push(ev.clone());
    }
    let mut records = Vec::new();
    for evs in by_user.values() {
        let clusters = dbscan_user(evs, DEFAULT_EPS_M, 1);
        records.extend(extract_records(evs, &clusters, &index, cfg.tz_offset_hours));
    }
    label_records(&mut records, &data.truth, DEFAULT_EPS_M);
    let model = train_cascade(&records, &CascadeConfig::default(), 13).unwrap();

    // A fresh user: five evening events within 20 m of one point.
    let home = GeoPoint { lat: 25.733, lon: -80.271 };
    let meters_per_deg = std::f64::consts::PI * 6_371_000.0 / 180.0;
    let mut events = data.events.clone();
    for day in 0..5u32 {
        let wobble = (day as f64 - 2.0) * 8.0 / meters_per_deg; // +-16 m
        let local = NaiveDate::from_ymd_opt(2016, 6, 3 + day)
            .unwrap()
            .and_hms_opt(if day % 2 == 0 { 21 } else { 1 }, 15, 0)
            .unwrap();
        events.push(ActivityEvent {
            user_id: "fresh".into(),
            ts: Utc.from_utc_datetime(&(local + Duration::hours(4))),
            geo: Some(GeoPoint { lat: home.lat + wobble, lon: home.lon }),
            text: None,
        });
    }
    let predictions = predict_homes(&events, &model, 1).unwrap();
    let fresh = predictions.iter().find(|p| p.user_id == "fresh").unwrap();
    match fresh.verdict {
        Verdict::Home(got) => {
            let dist = haversine_m(got, home);
            assert!(dist <= 100.0, "prediction {dist:.1} m from the planted point");
        }
        Verdict::Unknown => panic!("fresh user was rejected (score {})", fresh.score),
    }
}

/// Twenty users with hand-written movement patterns; the expected visit
/// sets are spelled out literally.
#[test]
fn visit_sets_match_hand_labeling() {
    let zones = small_synth_zones();
    let src = GeoPoint { lat: 18.2, lon: -66.25 };
    let a = GeoPoint { lat: 25.7, lon: -80.25 };
    let b = GeoPoint { lat: 28.1, lon: -82.30 };
    let nowhere = GeoPoint { lat: 0.0, lon: 0.0 };

    let corpus = vec![
        ("src".to_string(), "coqui playa isla".to_string()),
        ("src".to_string(), "playa coqui".to_string()),
        ("dst_a".to_string(), "causeway biscayne".to_string()),
        ("dst_a".to_string(), "biscayne causeway causeway".to_string()),
    ];
    let model = coarsegeo::fit(&corpus).unwrap();

    let mut events = Vec::new();
    let mut ts_counter = 0i64;
    let mut push_geo = |events: &mut Vec<ActivityEvent>, user: &str, at: GeoPoint| {
        ts_counter += 60;
        events.push(ActivityEvent {
            user_id: user.into(),
            ts: Utc.timestamp_opt(1_464_739_200 + ts_counter, 0).unwrap(),
            geo: Some(at),
            text: None,
        });
    };

    // u00..u05: source plus county A.
    for i in 0..6 {
        let user = format!("u{i:02}");
        push_geo(&mut events, &user, src);
        push_geo(&mut events, &user, a);
    }
    // u06..u09: source plus both counties.
    for i in 6..10 {
        let user = format!("u{i:02}");
        push_geo(&mut events, &user, src);
        push_geo(&mut events, &user, a);
        push_geo(&mut events, &user, b);
    }
    // u10..u13: county A only.
    for i in 10..14 {
        push_geo(&mut events, &format!("u{i:02}"), a);
    }
    // u14..u16: source only.
    for i in 14..17 {
        push_geo(&mut events, &format!("u{i:02}"), src);
    }
    // u17: outside every zone (omitted entirely).
    push_geo(&mut events, "u17", nowhere);
    // u18: text-only with confident source markers.
    events.push(ActivityEvent {
        user_id: "u18".into(),
        ts: Utc.timestamp_opt(1_464_800_000, 0).unwrap(),
        geo: None,
        text: Some("coqui playa isla".into()),
    });
    // u19: text-only gibberish; it falls back to the 0.5 class prior,
    // below the confidence floor (omitted).
    events.push(ActivityEvent {
        user_id: "u19".into(),
        ts: Utc.timestamp_opt(1_464_800_060, 0).unwrap(),
        geo: None,
        text: Some("zzz qqq xxx".into()),
    });

    let sets = build_visit_sets(
        &events,
        &zones,
        Some(TextMapping { model: &model, min_confidence: 0.6 }),
    )
    .unwrap();

    let expect = |user: &str, zones: &[&str]| VisitSet {
        user_id: user.into(),
        zones_visited: zones.iter().map(|s| s.to_string()).collect(),
    };
    let mut expected = Vec::new();
    for i in 0..6 {
        expected.push(expect(&format!("u{i:02}"), &["dst_a", "src"]));
    }
    for i in 6..10 {
        expected.push(expect(&format!("u{i:02}"), &["dst_a", "dst_b", "src"]));
    }
    for i in 10..14 {
        expected.push(expect(&format!("u{i:02}"), &["dst_a"]));
    }
    for i in 14..17 {
        expected.push(expect(&format!("u{i:02}"), &["src"]));
    }
    expected.push(expect("u18", &["src"]));
    assert_eq!(sets, expected);
}
