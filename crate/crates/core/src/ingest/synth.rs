//! Seeded synthetic dataset generator.
//!
//! Produces activity traces with planted home locations, per-zone text
//! vocabulary, cross-region trips, profiles, and a follower graph, all as a
//! pure function of [`SynthConfig`] (seed included). Homes are planted only
//! in non-source zones; a `travel_fraction` of users additionally post from
//! the source zone, and some of those travelers self-report the source zone
//! as their profile home so the visitor-share stage has a sample to work
//! with.
//!
//! Home-located events are jittered at most 49 m from the planted home so a
//! 100 m clustering radius groups them cleanly; distinct anchor points are
//! kept at least 250 m apart so clusters never bridge.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_m, point_in_polygon, GeoPoint, Neighborhood, Patch, Polygon};
use crate::ingest::{ActivityEvent, SocialGraph, UserProfile};

const METERS_PER_DEGREE: f64 = std::f64::consts::PI * crate::geo::EARTH_RADIUS_M / 180.0;
const JITTER_MAX_M: f64 = 49.0;
const ANCHOR_MIN_SEPARATION_M: f64 = 250.0;
const NOISE_WORDS: &[&str] = &["today", "lol", "vibes", "morning", "coffee", "omg", "weekend"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    /// Fraction of each user's events posted from their planted home.
    pub home_rate: f64,
    /// Fraction of users who also post from the source zone.
    pub travel_fraction: f64,
    pub source_zone: String,
    /// GeoJSON FeatureCollection of patches (zones).
    pub zones_geojson: PathBuf,
    /// Optional GeoJSON of neighborhoods; homes are preferentially planted
    /// inside these when they fall within the user's home zone.
    #[serde(default)]
    pub neighborhoods_geojson: Option<PathBuf>,
    /// Zone id -> marker words injected into texts posted from that zone.
    #[serde(default)]
    pub vocabulary_per_zone: BTreeMap<String, Vec<String>>,
    /// Inclusive range of events generated per user before capping.
    #[serde(default = "default_events_per_user")]
    pub events_per_user: (usize, usize),
    /// Optional cap per user; the newest events are retained. The upstream
    /// harvesting APIs cap per-user history without documenting which end
    /// is truncated; newest-first retention is an assumption.
    #[serde(default)]
    pub per_user_cap: Option<usize>,
    /// Fixed local-time offset in hours (no DST handling at this scale).
    #[serde(default = "default_tz_offset")]
    pub tz_offset_hours: i32,
}

fn default_events_per_user() -> (usize, usize) {
    (20, 60)
}

fn default_tz_offset() -> i32 {
    -4
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::Config("n_users must be > 0".into()));
        }
        for (name, v) in [("home_rate", self.home_rate), ("travel_fraction", self.travel_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let (lo, hi) = self.events_per_user;
        if lo < 5 || hi < lo {
            return Err(Error::Config(format!(
                "events_per_user must satisfy 5 <= min <= max, got ({lo}, {hi})"
            )));
        }
        if let Some(cap) = self.per_user_cap {
            if cap < 5 {
                return Err(Error::Config(format!("per_user_cap must be >= 5, got {cap}")));
            }
        }
        Ok(())
    }
}

/// The planted truth for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHome {
    pub zone: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighborhood: Option<String>,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub homes: BTreeMap<String, PlantedHome>,
    /// Whether the user's final trace contains source-zone activity.
    pub trips: BTreeMap<String, bool>,
    pub tz_offset_hours: i32,
}

impl GroundTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub events: Vec<ActivityEvent>,
    pub profiles: Vec<UserProfile>,
    pub graph: SocialGraph,
    pub truth: GroundTruth,
    /// (zone_label, text) pairs for every text-bearing event, usable as a
    /// zone-classifier training corpus.
    pub corpus: Vec<(String, String)>,
}

/// Generate a dataset, loading zone/neighborhood geometry from the paths in
/// the config.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    let zones = crate::geo::load_patches(&cfg.zones_geojson)
        .map_err(|e| Error::Config(format!("zones_geojson: {e}")))?;
    let neighborhoods = match &cfg.neighborhoods_geojson {
        Some(p) => crate::geo::load_neighborhoods(p)
            .map_err(|e| Error::Config(format!("neighborhoods_geojson: {e}")))?,
        None => Vec::new(),
    };
    synth_generate_with(cfg, &zones, &neighborhoods)
}

/// Generate a dataset from already-loaded geometry.
pub fn synth_generate_with(
    cfg: &SynthConfig,
    zones: &[Patch],
    neighborhoods: &[Neighborhood],
) -> Result<SynthOutput> {
    cfg.validate()?;
    if !zones.iter().any(|z| z.id == cfg.source_zone) {
        return Err(Error::Config(format!(
            "source_zone {:?} not present in the zones file",
            cfg.source_zone
        )));
    }
    for zone_id in cfg.vocabulary_per_zone.keys() {
        if !zones.iter().any(|z| &z.id == zone_id) {
            return Err(Error::Config(format!(
                "vocabulary_per_zone references unknown zone {zone_id:?}"
            )));
        }
    }
    let dest_zones: Vec<&Patch> = zones.iter().filter(|z| z.id != cfg.source_zone).collect();
    if dest_zones.is_empty() {
        return Err(Error::Config("need at least one non-source zone".into()));
    }
    let source = zones.iter().find(|z| z.id == cfg.source_zone).unwrap();

    // Neighborhoods grouped by the zone containing their bbox center.
    let mut nbhd_by_zone: BTreeMap<String, Vec<&Neighborhood>> = BTreeMap::new();
    for nb in neighborhoods {
        let (lo_lat, lo_lon, hi_lat, hi_lon) = nb.geometry.bbox();
        let center = GeoPoint::new((lo_lat + hi_lat) / 2.0, (lo_lon + hi_lon) / 2.0)?;
        for z in zones {
            if point_in_polygon(center, &z.geometry)? {
                nbhd_by_zone.entry(z.id.clone()).or_default().push(nb);
                break;
            }
        }
    }

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let user_seeds: Vec<u64> = (0..cfg.n_users).map(|_| master.gen()).collect();

    let mut events = Vec::new();
    let mut profiles = Vec::new();
    let mut corpus = Vec::new();
    let mut truth = GroundTruth {
        tz_offset_hours: cfg.tz_offset_hours,
        ..GroundTruth::default()
    };

    for (k, &user_seed) in user_seeds.iter().enumerate() {
        let user_id = format!("u{k:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
        let home_zone = dest_zones[k % dest_zones.len()];

        // Plant the home, preferring a neighborhood interior when available.
        let mut home_neighborhood = None;
        let home_point = {
            let nbs = nbhd_by_zone.get(&home_zone.id);
            match nbs {
                Some(list) if !list.is_empty() && rng.gen_bool(0.7) => {
                    let nb = list[rng.gen_range(0..list.len())];
                    home_neighborhood = Some(nb.id.clone());
                    sample_point_in(&nb.geometry, &mut rng)?
                }
                _ => sample_point_in(&home_zone.geometry, &mut rng)?,
            }
        };

        let traveler = cfg.travel_fraction > 0.0 && rng.gen_bool(cfg.travel_fraction);

        let n_away = rng.gen_range(2..=4);
        let mut anchors = vec![home_point];
        for _ in 0..n_away {
            anchors.push(sample_point_apart(&home_zone.geometry, &anchors, &mut rng)?);
        }
        let away_anchors = anchors[1..].to_vec();
        let mut trip_anchors = Vec::new();
        if traveler {
            for _ in 0..rng.gen_range(1..=2usize) {
                trip_anchors.push(sample_point_apart(&source.geometry, &trip_anchors, &mut rng)?);
            }
        }

        let n_events = rng.gen_range(cfg.events_per_user.0..=cfg.events_per_user.1);
        let mut user_events: Vec<(ActivityEvent, String)> = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            let at_home = rng.gen::<f64>() < cfg.home_rate;
            let on_trip = !at_home && traveler && rng.gen_bool(0.35);
            let (anchor, zone_id) = if at_home {
                (home_point, home_zone.id.as_str())
            } else if on_trip {
                (trip_anchors[rng.gen_range(0..trip_anchors.len())], source.id.as_str())
            } else {
                (away_anchors[rng.gen_range(0..away_anchors.len())], home_zone.id.as_str())
            };
            let point = jitter(anchor, JITTER_MAX_M, &mut rng);

            // Home posts skew to evenings/nights and weekends; that temporal
            // signature is what the downstream feature extraction keys on.
            let mut day = rng.gen_range(0..90u32);
            let hour = if at_home {
                if rng.gen_bool(0.35) {
                    // Base date 2016-06-01 is a Wednesday: weekend days are
                    // those congruent to 3 or 4 mod 7.
                    day = (day / 7) * 7 + if rng.gen_bool(0.5) { 3 } else { 4 };
                }
                if rng.gen_bool(0.6) {
                    rng.gen_range(19..24u32)
                } else {
                    rng.gen_range(0..8u32)
                }
            } else {
                rng.gen_range(9..19u32)
            };
            let (minute, second) = (rng.gen_range(0..60u32), rng.gen_range(0..60u32));
            let local = NaiveDate::from_ymd_opt(2016, 6, 1)
                .unwrap()
                .and_hms_opt(hour, minute, second)
                .unwrap()
                + Duration::days(i64::from(day));
            let utc = Utc.from_utc_datetime(&(local - Duration::hours(i64::from(cfg.tz_offset_hours))));

            let text = match cfg.vocabulary_per_zone.get(zone_id) {
                Some(vocab) if !vocab.is_empty() && rng.gen_bool(0.55) => {
                    let n_words = rng.gen_range(3..=8);
                    let mut words: Vec<&str> = (0..n_words)
                        .map(|_| vocab[rng.gen_range(0..vocab.len())].as_str())
                        .collect();
                    if rng.gen_bool(0.3) {
                        words.push(NOISE_WORDS[rng.gen_range(0..NOISE_WORDS.len())]);
                    }
                    Some(words.join(" "))
                }
                _ => None,
            };

            user_events.push((
                ActivityEvent {
                    user_id: user_id.clone(),
                    ts: utc,
                    geo: Some(point),
                    text,
                },
                zone_id.to_string(),
            ));
        }

        user_events.sort_by(|(a, _), (b, _)| {
            a.ts.cmp(&b.ts).then_with(|| {
                let ka = a.geo.map(|g| (g.lat, g.lon)).unwrap_or((0.0, 0.0));
                let kb = b.geo.map(|g| (g.lat, g.lon)).unwrap_or((0.0, 0.0));
                ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
            })
        });

        // Turn a few text-bearing events text-only, always keeping at least
        // five geo-tagged events per user.
        let mut geo_count = user_events.len();
        for (ev, _) in user_events.iter_mut() {
            if geo_count > 5 && ev.text.is_some() && rng.gen_bool(0.15) {
                ev.geo = None;
                geo_count -= 1;
            }
        }

        if let Some(cap) = cfg.per_user_cap {
            if user_events.len() > cap {
                user_events.drain(..user_events.len() - cap);
            }
        }

        let visited_source = user_events.iter().any(|(_, z)| z == &source.id);
        truth.trips.insert(user_id.clone(), visited_source);
        truth.homes.insert(
            user_id.clone(),
            PlantedHome {
                zone: home_zone.id.clone(),
                neighborhood: home_neighborhood,
                point: home_point,
            },
        );

        let profile_home = if traveler && rng.gen_bool(0.5) {
            source.id.clone()
        } else {
            home_zone.id.clone()
        };
        profiles.push(UserProfile {
            user_id: user_id.clone(),
            profile_home: Some(profile_home),
        });

        for (ev, zone_id) in user_events {
            if let Some(text) = &ev.text {
                corpus.push((zone_id.clone(), text.clone()));
            }
            events.push(ev);
        }
    }

    // Follower graph: an id-ordered chain so a walk from the first user can
    // reach everyone, plus random extra edges for texture.
    let user_ids: Vec<String> = (0..cfg.n_users).map(|k| format!("u{k:05}")).collect();
    let mut adjacency: BTreeMap<String, Vec<String>> =
        user_ids.iter().map(|u| (u.clone(), Vec::new())).collect();
    for w in user_ids.windows(2) {
        adjacency.get_mut(&w[0]).unwrap().push(w[1].clone());
    }
    for _ in 0..cfg.n_users * 2 {
        let a = master.gen_range(0..cfg.n_users);
        let b = master.gen_range(0..cfg.n_users);
        if a != b {
            adjacency.get_mut(&user_ids[a]).unwrap().push(user_ids[b].clone());
        }
    }
    for followers in adjacency.values_mut() {
        followers.sort_unstable();
        followers.dedup();
    }

    Ok(SynthOutput {
        events,
        profiles,
        graph: SocialGraph { adjacency },
        truth,
        corpus,
    })
}

fn sample_point_in(poly: &Polygon, rng: &mut ChaCha8Rng) -> Result<GeoPoint> {
    let (lo_lat, lo_lon, hi_lat, hi_lon) = poly.bbox();
    for _ in 0..10_000 {
        let p = GeoPoint::new(rng.gen_range(lo_lat..=hi_lat), rng.gen_range(lo_lon..=hi_lon))?;
        if point_in_polygon(p, poly)? {
            return Ok(p);
        }
    }
    Err(Error::Config(
        "could not sample a point inside a zone polygon (degenerate geometry?)".into(),
    ))
}

/// Sample a point in `poly` at least [`ANCHOR_MIN_SEPARATION_M`] from every
/// point in `others`, falling back to the last candidate if the polygon is
/// too small to honor the separation.
fn sample_point_apart(poly: &Polygon, others: &[GeoPoint], rng: &mut ChaCha8Rng) -> Result<GeoPoint> {
    let mut candidate = sample_point_in(poly, rng)?;
    for _ in 0..200 {
        if others.iter().all(|o| haversine_m(candidate, *o) >= ANCHOR_MIN_SEPARATION_M) {
            return Ok(candidate);
        }
        candidate = sample_point_in(poly, rng)?;
    }
    log::warn!("anchor separation not achieved; zone polygon may be very small");
    Ok(candidate)
}

fn jitter(center: GeoPoint, max_m: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
    let r = max_m * rng.gen::<f64>().sqrt();
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let dlat = r * theta.cos() / METERS_PER_DEGREE;
    let dlon = r * theta.sin() / (METERS_PER_DEGREE * center.lat.to_radians().cos().max(0.01));
    GeoPoint {
        lat: (center.lat + dlat).clamp(-90.0, 90.0),
        lon: center.lon + dlon,
    }
}
