//! Loading of activity traces, user profiles, follower graphs, and
//! air-traffic volumes, plus the snowball walk over a follower graph and a
//! seeded synthetic dataset generator.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

mod synth;
pub use synth::{synth_generate, synth_generate_with, GroundTruth, PlantedHome, SynthConfig, SynthOutput};

/// One timestamped post by a user. At least one of `geo` and `text` is
/// always present.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityEvent {
    pub user_id: String,
    pub ts: DateTime<Utc>,
    pub geo: Option<GeoPoint>,
    pub text: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    user_id: String,
    ts: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

impl RawEvent {
    fn into_event(self) -> Result<ActivityEvent> {
        if self.user_id.is_empty() {
            return Err(Error::Format("empty user_id".into()));
        }
        let ts = DateTime::parse_from_rfc3339(&self.ts)
            .map_err(|e| Error::Format(format!("bad timestamp {:?}: {e}", self.ts)))?
            .with_timezone(&Utc);
        let geo = match (self.lat, self.lon) {
            (Some(lat), Some(lon)) => Some(GeoPoint::new(lat, lon)?),
            (None, None) => None,
            _ => return Err(Error::Format("lat/lon must both be present or both absent".into())),
        };
        let text = self.text.filter(|t| !t.is_empty());
        if geo.is_none() && text.is_none() {
            return Err(Error::Format("event has neither geo nor text".into()));
        }
        Ok(ActivityEvent {
            user_id: self.user_id,
            ts,
            geo,
            text,
        })
    }

    fn from_event(ev: &ActivityEvent) -> RawEvent {
        RawEvent {
            user_id: ev.user_id.clone(),
            ts: ev.ts.to_rfc3339_opts(SecondsFormat::Secs, true),
            lat: ev.geo.map(|g| g.lat),
            lon: ev.geo.map(|g| g.lon),
            text: ev.text.clone(),
        }
    }
}

/// Result of [`load_events`]: valid events in file order plus the count of
/// rejected lines.
#[derive(Debug)]
pub struct EventLoad {
    pub events: Vec<ActivityEvent>,
    pub rejected: usize,
}

/// Load newline-delimited JSON events. Invalid lines are counted, not
/// returned; if more than half of the non-blank lines are malformed the
/// whole file is rejected as a format error.
pub fn load_events(path: impl AsRef<Path>) -> Result<EventLoad> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut events = Vec::new();
    let mut rejected = 0usize;
    let mut total = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed: std::result::Result<RawEvent, _> = serde_json::from_str(&line);
        match parsed.map_err(|e| Error::Format(e.to_string())).and_then(RawEvent::into_event) {
            Ok(ev) => events.push(ev),
            Err(_) => rejected += 1,
        }
    }
    if total > 0 && rejected * 2 > total {
        return Err(Error::Format(format!(
            "{}: {rejected} of {total} lines malformed",
            path.display()
        )));
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} of {total} event lines", path.display());
    }
    Ok(EventLoad { events, rejected })
}

/// Write events as newline-delimited JSON, one record per line.
pub fn write_events(path: impl AsRef<Path>, events: &[ActivityEvent]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    for ev in events {
        let raw = RawEvent::from_event(ev);
        serde_json::to_writer(&mut out, &raw).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// A user's self-declared coarse home zone, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub profile_home: Option<String>,
}

/// Load profiles from a CSV with header `user_id,profile_home`. An empty
/// `profile_home` field means the profile does not declare one.
pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<UserProfile>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let user_id = row
            .get(0)
            .ok_or_else(|| Error::Validation(format!("{}: missing user_id column", path.display())))?
            .to_string();
        if user_id.is_empty() {
            return Err(Error::Validation(format!("{}: empty user_id", path.display())));
        }
        let home = row.get(1).unwrap_or("").to_string();
        out.push(UserProfile {
            user_id,
            profile_home: if home.is_empty() { None } else { Some(home) },
        });
    }
    Ok(out)
}

pub fn write_profiles(path: impl AsRef<Path>, profiles: &[UserProfile]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["user_id", "profile_home"]).map_err(|e| csv_error(path, e))?;
    for p in profiles {
        w.write_record([p.user_id.as_str(), p.profile_home.as_deref().unwrap_or("")])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => Error::Validation(format!("{}: {e}", path.display())),
    }
}

/// Follower adjacency: `adjacency[user]` lists the users who follow `user`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SocialGraph {
    pub adjacency: BTreeMap<String, Vec<String>>,
}

impl SocialGraph {
    pub fn followers(&self, user: &str) -> &[String] {
        self.adjacency.get(user).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Serialize, Deserialize)]
struct RawGraphLine {
    user: String,
    followers: Vec<String>,
}

/// Load a follower graph from newline-delimited JSON
/// `{"user": ..., "followers": [...]}` records.
pub fn load_graph(path: impl AsRef<Path>) -> Result<SocialGraph> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut adjacency = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawGraphLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        adjacency.insert(raw.user, raw.followers);
    }
    Ok(SocialGraph { adjacency })
}

pub fn write_graph(path: impl AsRef<Path>, graph: &SocialGraph) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    for (user, followers) in &graph.adjacency {
        let raw = RawGraphLine {
            user: user.clone(),
            followers: followers.clone(),
        };
        serde_json::to_writer(&mut out, &raw).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Frontier walk over the follower graph: starting from seed users (which
/// must satisfy `keep`), repeatedly pull in the followers of every kept
/// user, expanding only through users that satisfy `keep`. The returned set
/// holds every user on a kept chain from a seed plus the immediate
/// followers of kept users, so it also contains users who merely followed
/// someone in the kept zones.
pub fn snowball_sample<F>(graph: &SocialGraph, seeds: &[String], keep: F) -> Result<BTreeSet<String>>
where
    F: Fn(&str) -> bool,
{
    for seed in seeds {
        if !graph.adjacency.contains_key(seed) {
            return Err(Error::Config(format!("unknown seed user {seed:?}")));
        }
        if !keep(seed) {
            return Err(Error::Config(format!(
                "seed user {seed:?} does not satisfy the keep predicate"
            )));
        }
    }
    let mut result: BTreeSet<String> = seeds.iter().cloned().collect();
    let mut expanded: BTreeSet<String> = BTreeSet::new();
    let mut queue: VecDeque<String> = seeds.iter().cloned().collect();
    while let Some(user) = queue.pop_front() {
        if !expanded.insert(user.clone()) {
            continue;
        }
        for follower in graph.followers(&user) {
            if follower == &user {
                continue; // self-edges are ignored by the walk
            }
            result.insert(follower.clone());
            if keep(follower) && !expanded.contains(follower) {
                queue.push_back(follower.clone());
            }
        }
    }
    Ok(result)
}

/// Load air-traffic volumes from a CSV with header
/// `source,dest_region,persons_per_day`. Duplicate (source, dest) rows sum.
pub fn load_air_traffic(path: impl AsRef<Path>) -> Result<BTreeMap<(String, String), f64>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let want = ["source", "dest_region", "persons_per_day"];
    let idx: Vec<usize> = want
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::Validation(format!("{}: missing column {name:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<(String, String), f64> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let get = |i: usize| row.get(idx[i]).unwrap_or("").to_string();
        let volume: f64 = get(2)
            .parse()
            .map_err(|_| Error::Validation(format!("{}: bad persons_per_day {:?}", path.display(), get(2))))?;
        if volume < 0.0 {
            return Err(Error::Validation(format!(
                "{}: negative volume {volume} for {} -> {}",
                path.display(),
                get(0),
                get(1)
            )));
        }
        *out.entry((get(0), get(1))).or_insert(0.0) += volume;
    }
    Ok(out)
}
