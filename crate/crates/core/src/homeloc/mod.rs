//! High-resolution home-location inference.
//!
//! Per user: cluster geo-tagged events at 100 m, turn each cluster into a
//! ten-feature record, prune obvious non-homes with a random forest, rank
//! the survivors with a regression network, then accept or reject the top
//! candidate with a classifier network. Rejected or under-observed users
//! come out as `unknown`.
//!
//! The ten features per cluster record:
//!
//! | #   | meaning                                                        |
//! |-----|----------------------------------------------------------------|
//! | f1  | events in the cluster                                          |
//! | f2  | fraction of the user's geo events in the cluster               |
//! | f3  | end-of-day fraction (local 19:00-24:00)                        |
//! | f4  | overnight/early fraction (local 00:00-08:00)                   |
//! | f5  | weekend fraction                                               |
//! | f6  | distinct active days                                           |
//! | f7  | day span between first and last event                          |
//! | f8  | days whose chronologically last event falls in this cluster   |
//! | f9  | distinct other users with events within 100 m of the centroid |
//! | f10 | fraction of all users' events within 100 m of the centroid    |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_m, GeoPoint};
use crate::ingest::ActivityEvent;

mod dbscan;
pub mod forest;
pub mod network;

pub use dbscan::{dbscan_user, Cluster, DEFAULT_EPS_M, MIN_GEO_EVENTS};
pub use forest::{forest_prune, forest_train, Forest, ForestConfig};
pub use network::{DenseNet, OptimizerKind, TrainConfig, HIDDEN_WIDTHS};

pub const FEATURE_COUNT: usize = 10;
/// Radius for the cross-user popularity features (f9, f10).
pub const FEATURE_RADIUS_M: f64 = 100.0;

/// One candidate-home record: a cluster reduced to its ten features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub user_id: String,
    pub features: [f64; FEATURE_COUNT],
    /// True-home flag; present on training data only.
    pub label: Option<bool>,
    /// Present when the record came from live clustering (not a CSV).
    pub centroid: Option<GeoPoint>,
    pub first_event_ts: Option<DateTime<Utc>>,
}

/// The cascade's verdict for one user.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Home(GeoPoint),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomePrediction {
    pub user_id: String,
    pub verdict: Verdict,
    /// Verifier probability (0 when the cascade never reached the verifier).
    pub score: f64,
}

// ---------------------------------------------------------------------------
// Cross-user location index
// ---------------------------------------------------------------------------

const CELL_DEG: f64 = 0.002;

/// Grid index over every user's geo events, answering "who else posts
/// here" queries for f9/f10. Built once, then read-only.
pub struct LocationIndex {
    cells: HashMap<(i32, i32), Vec<(u32, GeoPoint)>>,
    users: BTreeMap<String, u32>,
    total_events: usize,
}

impl LocationIndex {
    pub fn build(events: &[ActivityEvent]) -> Self {
        let mut users: BTreeMap<String, u32> = BTreeMap::new();
        let mut cells: HashMap<(i32, i32), Vec<(u32, GeoPoint)>> = HashMap::new();
        let mut total_events = 0usize;
        for ev in events {
            let Some(geo) = ev.geo else { continue };
            let next = users.len() as u32;
            let uid = *users.entry(ev.user_id.clone()).or_insert(next);
            cells.entry(Self::cell(geo)).or_default().push((uid, geo));
            total_events += 1;
        }
        LocationIndex {
            cells,
            users,
            total_events,
        }
    }

    fn cell(p: GeoPoint) -> (i32, i32) {
        ((p.lat / CELL_DEG).floor() as i32, (p.lon / CELL_DEG).floor() as i32)
    }

    pub fn total_events(&self) -> usize {
        self.total_events
    }

    /// (distinct users other than `exclude_user`, total event count) within
    /// `radius_m` of `center`.
    pub fn around(&self, center: GeoPoint, radius_m: f64, exclude_user: &str) -> (usize, usize) {
        let lat_span = (radius_m / (std::f64::consts::PI * crate::geo::EARTH_RADIUS_M / 180.0)
            / CELL_DEG)
            .ceil() as i32;
        let cos = center.lat.to_radians().cos().max(0.05);
        let lon_span = ((radius_m
            / (std::f64::consts::PI * crate::geo::EARTH_RADIUS_M / 180.0 * cos))
            / CELL_DEG)
            .ceil() as i32;
        let (c_lat, c_lon) = Self::cell(center);
        let exclude = self.users.get(exclude_user).copied();
        let mut seen: Vec<u32> = Vec::new();
        let mut count = 0usize;
        for dl in -lat_span..=lat_span {
            for dn in -lon_span..=lon_span {
                let Some(bucket) = self.cells.get(&(c_lat + dl, c_lon + dn)) else {
                    continue;
                };
                for &(uid, p) in bucket {
                    if haversine_m(p, center) <= radius_m {
                        count += 1;
                        if Some(uid) != exclude && !seen.contains(&uid) {
                            seen.push(uid);
                        }
                    }
                }
            }
        }
        (seen.len(), count)
    }
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

fn local_time(ts: DateTime<Utc>, tz_offset_hours: i32) -> DateTime<FixedOffset> {
    let offset = FixedOffset::east_opt(tz_offset_hours * 3600)
        .unwrap_or_else(|| FixedOffset::east_opt(0).unwrap());
    ts.with_timezone(&offset)
}

/// Build the ten-feature record for every cluster of one user.
/// `user_events` must be the exact slice the clusters were built from;
/// `index` spans every user's events.
pub fn extract_records(
    user_events: &[ActivityEvent],
    clusters: &[Cluster],
    index: &LocationIndex,
    tz_offset_hours: i32,
) -> Vec<ClusterRecord> {
    if clusters.is_empty() {
        return Vec::new();
    }
    let user_id = clusters[0].user_id.clone();
    let geo_total = user_events.iter().filter(|e| e.geo.is_some()).count();

    // The chronologically last geo event of each local date, by canonical
    // (ts, lat, lon, index) order.
    let mut last_of_day: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for (i, ev) in user_events.iter().enumerate() {
        let Some(g) = ev.geo else { continue };
        let date = local_time(ev.ts, tz_offset_hours).date_naive();
        let better = match last_of_day.get(&date) {
            None => true,
            Some(&j) => {
                let h = user_events[j].geo.unwrap();
                (ev.ts, g.lat, g.lon, i) > (user_events[j].ts, h.lat, h.lon, j)
            }
        };
        if better {
            last_of_day.insert(date, i);
        }
    }

    clusters
        .iter()
        .map(|cluster| {
            let n = cluster.member_indices.len() as f64;
            let mut end_of_day = 0usize;
            let mut overnight = 0usize;
            let mut weekend = 0usize;
            let mut dates: Vec<NaiveDate> = Vec::new();
            let mut first_ts: Option<DateTime<Utc>> = None;
            for &i in &cluster.member_indices {
                let ev = &user_events[i];
                let local = local_time(ev.ts, tz_offset_hours);
                let hour = local.hour();
                if (19..24).contains(&hour) {
                    end_of_day += 1;
                }
                if hour < 8 {
                    overnight += 1;
                }
                if matches!(local.weekday(), chrono::Weekday::Sat | chrono::Weekday::Sun) {
                    weekend += 1;
                }
                dates.push(local.date_naive());
                first_ts = Some(first_ts.map_or(ev.ts, |t: DateTime<Utc>| t.min(ev.ts)));
            }
            dates.sort_unstable();
            let day_span = (*dates.last().unwrap() - dates[0]).num_days() as f64;
            dates.dedup();

            let ends_here = last_of_day
                .values()
                .filter(|&&i| cluster.member_indices.contains(&i))
                .count();
            let (other_users, nearby_events) =
                index.around(cluster.centroid, FEATURE_RADIUS_M, &user_id);

            let features = [
                n,
                n / geo_total as f64,
                end_of_day as f64 / n,
                overnight as f64 / n,
                weekend as f64 / n,
                dates.len() as f64,
                day_span,
                ends_here as f64,
                other_users as f64,
                nearby_events as f64 / index.total_events().max(1) as f64,
            ];
            ClusterRecord {
                user_id: user_id.clone(),
                features,
                label: None,
                centroid: Some(cluster.centroid),
                first_event_ts: first_ts,
            }
        })
        .collect()
}

/// Mark each record's label by whether its centroid lies within
/// `radius_m` of the user's planted home. Users absent from the truth stay
/// unlabeled.
pub fn label_records(
    records: &mut [ClusterRecord],
    truth: &crate::ingest::GroundTruth,
    radius_m: f64,
) {
    for r in records.iter_mut() {
        let (Some(centroid), Some(home)) = (r.centroid, truth.homes.get(&r.user_id)) else {
            continue;
        };
        r.label = Some(haversine_m(centroid, home.point) <= radius_m);
    }
}

// ---------------------------------------------------------------------------
// Records CSV (user_id, f1..f10, label)
// ---------------------------------------------------------------------------

pub fn write_records(path: impl AsRef<Path>, records: &[ClusterRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    let mut header = vec!["user_id".to_string()];
    header.extend((1..=FEATURE_COUNT).map(|i| format!("f{i}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for r in records {
        let mut row = vec![r.user_id.clone()];
        row.extend(r.features.iter().map(|v| format!("{v}")));
        row.push(match r.label {
            Some(true) => "1".into(),
            Some(false) => "0".into(),
            None => String::new(),
        });
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<ClusterRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if row.len() < FEATURE_COUNT + 2 {
            return Err(Error::Format(format!(
                "{}: row has {} fields, want {}",
                path.display(),
                row.len(),
                FEATURE_COUNT + 2
            )));
        }
        let mut features = [0.0; FEATURE_COUNT];
        for (k, slot) in features.iter_mut().enumerate() {
            *slot = row
                .get(k + 1)
                .unwrap()
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad f{}", path.display(), k + 1)))?;
        }
        let label = match row.get(FEATURE_COUNT + 1).unwrap() {
            "" => None,
            "1" | "true" => Some(true),
            "0" | "false" => Some(false),
            other => return Err(Error::Format(format!("{}: bad label {other:?}", path.display()))),
        };
        out.push(ClusterRecord {
            user_id: row.get(0).unwrap().to_string(),
            features,
            label,
            centroid: None,
            first_event_ts: None,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cascade model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(records: &[ClusterRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut mean = vec![0.0; FEATURE_COUNT];
        for r in records {
            for (m, v) in mean.iter_mut().zip(&r.features) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; FEATURE_COUNT];
        for r in records {
            for (s, (v, m)) in std.iter_mut().zip(r.features.iter().zip(&mean)) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, features: &[f64; FEATURE_COUNT]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeConfig {
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default = "d_scorer_epochs")]
    pub scorer_epochs: usize,
    #[serde(default = "d_scorer_lr")]
    pub scorer_lr: f64,
    #[serde(default = "d_verifier_epochs")]
    pub verifier_epochs: usize,
    #[serde(default = "d_verifier_lr")]
    pub verifier_lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_eps")]
    pub eps_m: f64,
    #[serde(default = "d_min_pts")]
    pub min_pts: usize,
    #[serde(default = "d_tz")]
    pub tz_offset_hours: i32,
}

fn d_scorer_epochs() -> usize {
    120
}
fn d_scorer_lr() -> f64 {
    0.05
}
fn d_verifier_epochs() -> usize {
    120
}
fn d_verifier_lr() -> f64 {
    0.002
}
fn d_batch() -> usize {
    32
}
fn d_dropout() -> f64 {
    0.3
}
fn d_eps() -> f64 {
    DEFAULT_EPS_M
}
fn d_min_pts() -> usize {
    1
}
fn d_tz() -> i32 {
    -4
}

impl Default for CascadeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// The trained prune/score/verify bundle plus everything needed to apply
/// it exactly as trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub config: CascadeConfigSnapshot,
    pub norm: Normalization,
    pub forest: Forest,
    pub scorer: DenseNet,
    pub verifier: DenseNet,
    pub seed: u64,
}

/// The parts of [`CascadeConfig`] that matter at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfigSnapshot {
    pub eps_m: f64,
    pub min_pts: usize,
    pub tz_offset_hours: i32,
    pub decision_threshold: f64,
}

impl CascadeModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Train the full cascade from labeled records.
pub fn train_cascade(records: &[ClusterRecord], cfg: &CascadeConfig, seed: u64) -> Result<CascadeModel> {
    if records.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let forest_seed: u64 = seeder.gen();
    let scorer_seed: u64 = seeder.gen();
    let verifier_seed: u64 = seeder.gen();

    let norm = Normalization::fit(records);
    let forest = forest_train(records, &cfg.forest, forest_seed)?;
    let surviving = forest_prune(records, &forest);
    if surviving.is_empty() {
        return Err(Error::Validation("forest pruned every training record".into()));
    }

    let xs: Vec<Vec<f64>> = surviving.iter().map(|&i| norm.apply(&records[i].features)).collect();
    let ys: Vec<f64> = surviving
        .iter()
        .map(|&i| if records[i].label == Some(true) { 1.0 } else { 0.0 })
        .collect();
    let mut scorer_cfg = TrainConfig::sgd(cfg.scorer_lr, cfg.scorer_epochs);
    scorer_cfg.batch_size = cfg.batch_size;
    let scorer = network::train(&xs, &ys, &HIDDEN_WIDTHS, cfg.dropout, &scorer_cfg, scorer_seed)?;

    // Candidate per user: the surviving record the scorer ranks highest.
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &surviving {
        by_user.entry(records[i].user_id.as_str()).or_default().push(i);
    }
    let mut cand_xs = Vec::new();
    let mut cand_ys = Vec::new();
    for indices in by_user.values() {
        let user_records: Vec<&ClusterRecord> = indices.iter().map(|&i| &records[i]).collect();
        let scores: Vec<f64> = user_records
            .iter()
            .map(|r| scorer.predict(&norm.apply(&r.features)))
            .collect();
        let best = rank_by_scores(&user_records, &scores).expect("non-empty");
        cand_xs.push(norm.apply(&user_records[best].features));
        cand_ys.push(if user_records[best].label == Some(true) { 1.0 } else { 0.0 });
    }
    let mut verifier_cfg = TrainConfig::rmsprop(cfg.verifier_lr, cfg.verifier_epochs);
    verifier_cfg.batch_size = cfg.batch_size;
    let verifier = network::train(
        &cand_xs,
        &cand_ys,
        &HIDDEN_WIDTHS,
        cfg.dropout,
        &verifier_cfg,
        verifier_seed,
    )?;

    Ok(CascadeModel {
        config: CascadeConfigSnapshot {
            eps_m: cfg.eps_m,
            min_pts: cfg.min_pts,
            tz_offset_hours: cfg.tz_offset_hours,
            decision_threshold: 0.5,
        },
        norm,
        forest,
        scorer,
        verifier,
        seed,
    })
}

/// Argmax over scores; ties go to the earliest first-event time, then to
/// input order.
fn rank_by_scores(records: &[&ClusterRecord], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(b) = best else {
            best = Some(i);
            continue;
        };
        if *s > scores[b] {
            best = Some(i);
        } else if *s == scores[b] {
            let earlier = match (records[i].first_event_ts, records[b].first_event_ts) {
                (Some(a), Some(c)) => a < c,
                _ => false,
            };
            if earlier {
                best = Some(i);
            }
        }
    }
    best
}

/// Rank one user's surviving records; returns (index, score) of the
/// candidate.
pub fn scorer_rank(records: &[&ClusterRecord], model: &CascadeModel) -> Option<(usize, f64)> {
    let scores: Vec<f64> = records
        .iter()
        .map(|r| model.scorer.predict(&model.norm.apply(&r.features)))
        .collect();
    rank_by_scores(records, &scores).map(|i| (i, scores[i]))
}

fn accepts(probability: f64, threshold: f64) -> bool {
    probability > threshold
}

/// Accept or reject a candidate record. Acceptance is strict: a verifier
/// probability of exactly the threshold rejects.
pub fn verifier_decide(record: &ClusterRecord, model: &CascadeModel) -> Result<HomePrediction> {
    let p = model.verifier.predict(&model.norm.apply(&record.features));
    let verdict = if accepts(p, model.config.decision_threshold) {
        let centroid = record.centroid.ok_or_else(|| {
            Error::Validation(format!(
                "record for {} has no cluster centroid; cannot emit a home",
                record.user_id
            ))
        })?;
        Verdict::Home(centroid)
    } else {
        Verdict::Unknown
    };
    Ok(HomePrediction {
        user_id: record.user_id.clone(),
        verdict,
        score: p,
    })
}

fn predict_one_user(
    user_id: &str,
    events: &[ActivityEvent],
    index: &LocationIndex,
    model: &CascadeModel,
) -> Result<HomePrediction> {
    let unknown = |score: f64| HomePrediction {
        user_id: user_id.to_string(),
        verdict: Verdict::Unknown,
        score,
    };
    let geo_count = events.iter().filter(|e| e.geo.is_some()).count();
    if geo_count < MIN_GEO_EVENTS {
        return Ok(unknown(0.0));
    }
    let clusters = dbscan_user(events, model.config.eps_m, model.config.min_pts);
    let records = extract_records(events, &clusters, index, model.config.tz_offset_hours);
    let surviving_idx = forest_prune(&records, &model.forest);
    if surviving_idx.is_empty() {
        return Ok(unknown(0.0));
    }
    let surviving: Vec<&ClusterRecord> = surviving_idx.iter().map(|&i| &records[i]).collect();
    let (best, _) = scorer_rank(&surviving, model).expect("non-empty survivors");
    verifier_decide(surviving[best], model)
}

/// Run the whole cascade for every user in `events`. `jobs` bounds the
/// worker threads; results are identical for any job count.
pub fn predict_homes(events: &[ActivityEvent], model: &CascadeModel, jobs: usize) -> Result<Vec<HomePrediction>> {
    let index = LocationIndex::build(events);
    let mut by_user: BTreeMap<&str, Vec<ActivityEvent>> = BTreeMap::new();
    for ev in events {
        by_user.entry(ev.user_id.as_str()).or_default().push(ev.clone());
    }
    let users: Vec<(&str, Vec<ActivityEvent>)> = by_user.into_iter().collect();

    let jobs = jobs.max(1).min(users.len().max(1));
    let mut results: Vec<HomePrediction> = Vec::with_capacity(users.len());
    if jobs == 1 {
        for (user_id, evs) in &users {
            results.push(predict_one_user(user_id, evs, &index, model)?);
        }
    } else {
        let chunk = users.len().div_ceil(jobs);
        let chunks: Vec<&[(&str, Vec<ActivityEvent>)]> = users.chunks(chunk).collect();
        let outcomes: Vec<Result<Vec<HomePrediction>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|part| {
                    let index = &index;
                    scope.spawn(move || {
                        part.iter()
                            .map(|(user_id, evs)| predict_one_user(user_id, evs, index, model))
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for outcome in outcomes {
            results.extend(outcome?);
        }
    }
    results.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    Ok(results)
}

// ---------------------------------------------------------------------------
// Prediction JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawPrediction {
    user_id: String,
    verdict: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    score: f64,
}

pub fn save_predictions(path: impl AsRef<Path>, predictions: &[HomePrediction]) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<RawPrediction> = predictions
        .iter()
        .map(|p| match p.verdict {
            Verdict::Home(g) => RawPrediction {
                user_id: p.user_id.clone(),
                verdict: "home".into(),
                lat: Some(g.lat),
                lon: Some(g.lon),
                score: p.score,
            },
            Verdict::Unknown => RawPrediction {
                user_id: p.user_id.clone(),
                verdict: "unknown".into(),
                lat: None,
                lon: None,
                score: p.score,
            },
        })
        .collect();
    let json = serde_json::to_string_pretty(&raw).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<HomePrediction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let raw: Vec<RawPrediction> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|r| {
            let verdict = match r.verdict.as_str() {
                "home" => match (r.lat, r.lon) {
                    (Some(lat), Some(lon)) => Verdict::Home(GeoPoint::new(lat, lon)?),
                    _ => return Err(Error::Format(format!("home verdict without lat/lon for {}", r.user_id))),
                },
                "unknown" => Verdict::Unknown,
                other => return Err(Error::Format(format!("bad verdict {other:?}"))),
            };
            Ok(HomePrediction {
                user_id: r.user_id,
                verdict,
                score: r.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{NaiveDate, TimeZone};

    /// Event at an exact local wall-clock time (tz = UTC-4).
    fn local_ev(user: &str, d: u32, h: u32, m: u32, lat: f64, lon: f64) -> ActivityEvent {
        let local = NaiveDate::from_ymd_opt(2016, 6, d)
            .unwrap()
            .and_hms_opt(h, m, 0)
            .unwrap();
        ActivityEvent {
            user_id: user.into(),
            ts: Utc.from_utc_datetime(&(local + chrono::Duration::hours(4))),
            geo: Some(GeoPoint { lat, lon }),
            text: None,
        }
    }

    /// Three clusters with every feature value computed by hand.
    #[test]
    fn ten_features_match_hand_computation() {
        let a = (25.76, -80.19);
        let b = (25.77, -80.19);
        let c = (25.78, -80.19);
        let u1_events = vec![
            // Cluster A: evenings + one overnight, 3 of 4 on the home side.
            local_ev("u1", 3, 20, 0, a.0, a.1),  // Fri 20:00
            local_ev("u1", 4, 21, 30, a.0, a.1), // Sat 21:30
            local_ev("u1", 4, 2, 0, a.0, a.1),   // Sat 02:00
            local_ev("u1", 6, 23, 15, a.0, a.1), // Mon 23:15
            // Cluster B: working hours.
            local_ev("u1", 3, 9, 0, b.0, b.1),  // Fri 09:00
            local_ev("u1", 4, 10, 0, b.0, b.1), // Sat 10:00
            local_ev("u1", 6, 12, 0, b.0, b.1), // Mon 12:00
            // Cluster C: single Sunday afternoon.
            local_ev("u1", 5, 15, 0, c.0, c.1), // Sun 15:00
        ];
        let mut all_events = u1_events.clone();
        all_events.push(local_ev("u2", 3, 19, 0, a.0, a.1));
        all_events.push(local_ev("u2", 5, 20, 0, a.0, a.1));
        all_events.push(local_ev("u3", 6, 11, 0, b.0, b.1));

        let clusters = dbscan_user(&u1_events, DEFAULT_EPS_M, 1);
        assert_eq!(clusters.len(), 3);
        let index = LocationIndex::build(&all_events);
        let records = extract_records(&u1_events, &clusters, &index, -4);

        let by_centroid = |lat: f64| {
            records
                .iter()
                .find(|r| (r.centroid.unwrap().lat - lat).abs() < 1e-9)
                .unwrap()
        };

        let ra = by_centroid(a.0);
        assert_eq!(ra.features[0], 4.0);
        assert_eq!(ra.features[1], 0.5);
        assert_eq!(ra.features[2], 0.75);
        assert_eq!(ra.features[3], 0.25);
        assert_eq!(ra.features[4], 0.5);
        assert_eq!(ra.features[5], 3.0);
        assert_eq!(ra.features[6], 3.0);
        assert_eq!(ra.features[7], 3.0);
        assert_eq!(ra.features[8], 1.0);
        assert!((ra.features[9] - 6.0 / 11.0).abs() < 1e-12);

        let rb = by_centroid(b.0);
        assert_eq!(rb.features[0], 3.0);
        assert_eq!(rb.features[1], 0.375);
        assert_eq!(rb.features[2], 0.0);
        assert_eq!(rb.features[3], 0.0);
        assert!((rb.features[4] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rb.features[5], 3.0);
        assert_eq!(rb.features[6], 3.0);
        assert_eq!(rb.features[7], 0.0);
        assert_eq!(rb.features[8], 1.0);
        assert!((rb.features[9] - 4.0 / 11.0).abs() < 1e-12);

        let rc = by_centroid(c.0);
        assert_eq!(rc.features[0], 1.0);
        assert_eq!(rc.features[1], 0.125);
        assert_eq!(rc.features[2], 0.0);
        assert_eq!(rc.features[3], 0.0);
        assert_eq!(rc.features[4], 1.0);
        assert_eq!(rc.features[5], 1.0);
        assert_eq!(rc.features[6], 0.0);
        assert_eq!(rc.features[7], 1.0);
        assert_eq!(rc.features[8], 0.0);
        assert!((rc.features[9] - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_user_has_full_event_fraction() {
        let events: Vec<_> = (0..6).map(|i| local_ev("u1", 3 + i % 2, 20, i, 25.76, -80.19)).collect();
        let clusters = dbscan_user(&events, DEFAULT_EPS_M, 1);
        let index = LocationIndex::build(&events);
        let records = extract_records(&events, &clusters, &index, -4);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].features[1], 1.0);
    }

    #[test]
    fn all_evening_cluster_has_unit_end_of_day_fraction() {
        let events: Vec<_> = (0..5).map(|i| local_ev("u1", 3 + i, 20, 0, 25.76, -80.19)).collect();
        let clusters = dbscan_user(&events, DEFAULT_EPS_M, 1);
        let index = LocationIndex::build(&events);
        let records = extract_records(&events, &clusters, &index, -4);
        assert_eq!(records[0].features[2], 1.0);
    }

    #[test]
    fn records_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let records = vec![
            ClusterRecord {
                user_id: "u1".into(),
                features: [1.0, 0.5, 0.25, 0.0, 0.5, 3.0, 3.0, 2.0, 1.0, 0.1],
                label: Some(true),
                centroid: None,
                first_event_ts: None,
            },
            ClusterRecord {
                user_id: "u2".into(),
                features: [2.0; FEATURE_COUNT],
                label: None,
                centroid: None,
                first_event_ts: None,
            },
        ];
        write_records(&path, &records).unwrap();
        assert_eq!(load_records(&path).unwrap(), records);
    }

    #[test]
    fn rank_prefers_score_then_earliest() {
        let mk = |ts_s: i64| ClusterRecord {
            user_id: "u".into(),
            features: [0.0; FEATURE_COUNT],
            label: None,
            centroid: None,
            first_event_ts: Some(Utc.timestamp_opt(ts_s, 0).unwrap()),
        };
        let (r1, r2, r3) = (mk(100), mk(50), mk(75));
        let records = vec![&r1, &r2, &r3];
        assert_eq!(rank_by_scores(&records, &[0.9, 0.2, 0.5]), Some(0));
        // Tie on score: earliest first-event wins.
        assert_eq!(rank_by_scores(&records, &[0.4, 0.4, 0.4]), Some(1));
        // Single record is the candidate regardless of score.
        assert_eq!(rank_by_scores(&records[..1], &[0.01]), Some(0));
    }

    #[test]
    fn acceptance_threshold_is_strict() {
        assert!(accepts(0.51, 0.5));
        assert!(!accepts(0.5, 0.5));
        assert!(!accepts(0.49, 0.5));
    }

    #[test]
    fn predictions_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.json");
        let preds = vec![
            HomePrediction {
                user_id: "u1".into(),
                verdict: Verdict::Home(GeoPoint { lat: 25.76, lon: -80.19 }),
                score: 0.93,
            },
            HomePrediction {
                user_id: "u2".into(),
                verdict: Verdict::Unknown,
                score: 0.21,
            },
        ];
        save_predictions(&path, &preds).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), preds);
    }

    /// A forest that prunes everything can never yield a home verdict, and
    /// under-observed users come back unknown before the cascade runs.
    #[test]
    fn unknown_paths_never_emit_homes() {
        use crate::homeloc::forest::{DecisionTree, Forest, TreeNode};
        let model = CascadeModel {
            config: CascadeConfigSnapshot {
                eps_m: DEFAULT_EPS_M,
                min_pts: 1,
                tz_offset_hours: -4,
                decision_threshold: 0.5,
            },
            norm: Normalization {
                mean: vec![0.0; FEATURE_COUNT],
                std: vec![1.0; FEATURE_COUNT],
            },
            forest: Forest {
                trees: vec![DecisionTree {
                    nodes: vec![TreeNode::Leaf { prob_home: 0.0 }],
                }],
            },
            scorer: DenseNet::new(FEATURE_COUNT, &HIDDEN_WIDTHS, 0.0, 1),
            verifier: DenseNet::new(FEATURE_COUNT, &HIDDEN_WIDTHS, 0.0, 2),
            seed: 0,
        };
        // Six geo events, but every record is pruned.
        let mut events: Vec<ActivityEvent> =
            (0..6).map(|i| local_ev("pruned", 3, 20, i, 25.76, -80.19)).collect();
        // Four geo events: below the observation floor.
        events.extend((0..4).map(|i| local_ev("sparse", 3, 20, i, 25.80, -80.19)));
        let predictions = predict_homes(&events, &model, 1).unwrap();
        assert_eq!(predictions.len(), 2);
        for p in &predictions {
            assert_eq!(p.verdict, Verdict::Unknown, "{} got a home", p.user_id);
            assert_eq!(p.score, 0.0);
        }
    }

    #[test]
    fn location_index_counts_neighbors() {
        let events = vec![
            local_ev("a", 3, 10, 0, 25.76, -80.19),
            local_ev("a", 3, 11, 0, 25.76, -80.19),
            local_ev("b", 3, 12, 0, 25.76001, -80.19001), // a couple meters off
            local_ev("c", 3, 13, 0, 25.80, -80.19),       // far away
        ];
        let index = LocationIndex::build(&events);
        let (others, count) = index.around(GeoPoint { lat: 25.76, lon: -80.19 }, 100.0, "a");
        assert_eq!(others, 1);
        assert_eq!(count, 3);
        assert_eq!(index.total_events(), 4);
    }
}
