//! Population-flux estimation from per-user zone visit sets.
//!
//! Users who posted from both the source zone and at least one destination
//! patch define the mobility sample; the fraction of that sample seen in
//! each patch, scaled by the air-traffic volume, gives persons/day into the
//! patch. Division by patch populations turns those volumes into the
//! per-capita daily rates the patch dynamics consume. A user visiting k
//! patches contributes to all k, so patch flux sums may exceed the air
//! volume.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::coarsegeo::{predict_zone, ZoneModel};
use crate::error::{Error, Result};
use crate::geo::{Patch, RegionLocator};
use crate::ingest::ActivityEvent;

/// The set of zones a user was observed in.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitSet {
    pub user_id: String,
    pub zones_visited: BTreeSet<String>,
}

/// Per-capita daily movement rates between patches; `rates[i][j]` is the
/// rate from `patch_ids[i]` to `patch_ids[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxMatrix {
    pub patch_ids: Vec<String>,
    pub rates: Vec<Vec<f64>>,
}

impl FluxMatrix {
    pub fn zeros(patch_ids: Vec<String>) -> Self {
        let z = patch_ids.len();
        FluxMatrix {
            patch_ids,
            rates: vec![vec![0.0; z]; z],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let z = self.patch_ids.len();
        if self.rates.len() != z || self.rates.iter().any(|row| row.len() != z) {
            return Err(Error::Validation(format!(
                "flux matrix must be {z}x{z} to match the patch list"
            )));
        }
        for (i, row) in self.rates.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "flux rate [{i}][{j}] = {v} must be finite and >= 0"
                    )));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Validation(format!(
                        "flux matrix diagonal [{i}] must be 0, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Write nonzero entries as CSV `from,to,rate_per_day`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
        w.write_record(["from", "to", "rate_per_day"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for (i, row) in self.rates.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    w.write_record([
                        self.patch_ids[i].as_str(),
                        self.patch_ids[j].as_str(),
                        &format!("{v:e}"),
                    ])
                    .map_err(|e| Error::Format(e.to_string()))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Load a matrix saved by [`FluxMatrix::save_csv`], aligned to the given
    /// patch order. Entries absent from the file are zero.
    pub fn load_csv(path: impl AsRef<Path>, patch_ids: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let index: BTreeMap<&str, usize> = patch_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut out = FluxMatrix::zeros(patch_ids.to_vec());
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let from = row.get(0).unwrap_or("");
            let to = row.get(1).unwrap_or("");
            let rate: f64 = row
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad rate in row {row:?}", path.display())))?;
            let (&i, &j) = match (index.get(from), index.get(to)) {
                (Some(i), Some(j)) => (i, j),
                _ => {
                    return Err(Error::Validation(format!(
                        "{}: unknown patch in row {from:?} -> {to:?}",
                        path.display()
                    )))
                }
            };
            out.rates[i][j] = rate;
        }
        out.validate()?;
        Ok(out)
    }
}

/// Write a flux vector (persons/day out of one source) as CSV
/// `from,to,rate_per_day`.
pub fn save_flux_vector_csv(
    path: impl AsRef<Path>,
    source_id: &str,
    flux: &BTreeMap<String, f64>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    w.write_record(["from", "to", "rate_per_day"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (to, volume) in flux {
        w.write_record([source_id, to, &format!("{volume}")])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// How to map text-only events to zones.
pub struct TextMapping<'m> {
    pub model: &'m ZoneModel,
    /// Predictions below this confidence are ignored.
    pub min_confidence: f64,
}

/// Build one visit set per user. Geo-tagged events map through
/// point-in-polygon (geo wins when an event carries both geo and text);
/// text-only events map through the zone classifier and count only at or
/// above the confidence threshold. Users with no locatable events are
/// omitted.
pub fn build_visit_sets(
    events: &[ActivityEvent],
    zones: &[Patch],
    text: Option<TextMapping<'_>>,
) -> Result<Vec<VisitSet>> {
    if let Some(t) = &text {
        if !(0.0..=1.0).contains(&t.min_confidence) {
            return Err(Error::Validation(format!(
                "min_confidence must lie in [0, 1], got {}",
                t.min_confidence
            )));
        }
    }
    let locator = RegionLocator::new(zones);
    let mut sets: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for ev in events {
        let zone: Option<String> = if let Some(g) = ev.geo {
            locator.locate(g)?.map(str::to_owned)
        } else if let (Some(txt), Some(mapping)) = (&ev.text, &text) {
            let (zone, confidence) = predict_zone(txt, mapping.model);
            (confidence >= mapping.min_confidence).then(|| zone.to_owned())
        } else {
            None
        };
        if let Some(z) = zone {
            sets.entry(&ev.user_id).or_default().insert(z);
        }
    }
    Ok(sets
        .into_iter()
        .map(|(user_id, zones_visited)| VisitSet {
            user_id: user_id.to_owned(),
            zones_visited,
        })
        .collect())
}

/// Outcome of [`estimate_source_flux`].
#[derive(Debug, Clone, PartialEq)]
pub struct FluxEstimate {
    /// Persons/day from the source into each destination patch.
    pub flux: BTreeMap<String, f64>,
    /// |U|: users seen in the source zone and at least one destination.
    pub users_in_sample: usize,
}

/// Persons/day into each destination patch: the fraction of the
/// source+destination sample seen in the patch times the air volume.
pub fn estimate_source_flux(
    visit_sets: &[VisitSet],
    source_zone: &str,
    dest_patch_ids: &[String],
    air_volume: f64,
) -> Result<FluxEstimate> {
    if !air_volume.is_finite() || air_volume < 0.0 {
        return Err(Error::Validation(format!(
            "air volume must be >= 0, got {air_volume}"
        )));
    }
    let dest: BTreeSet<&str> = dest_patch_ids.iter().map(String::as_str).collect();
    let sample: Vec<&VisitSet> = visit_sets
        .iter()
        .filter(|vs| {
            vs.zones_visited.contains(source_zone)
                && vs.zones_visited.iter().any(|z| dest.contains(z.as_str()))
        })
        .collect();
    if sample.is_empty() {
        return Err(Error::EmptySample(format!(
            "no users with activity in both {source_zone:?} and a destination patch; widen the data"
        )));
    }
    let denom = sample.len() as f64;
    let mut flux = BTreeMap::new();
    for id in dest_patch_ids {
        let count = sample
            .iter()
            .filter(|vs| vs.zones_visited.contains(id))
            .count();
        flux.insert(id.clone(), count as f64 / denom * air_volume);
    }
    Ok(FluxEstimate {
        flux,
        users_in_sample: sample.len(),
    })
}

/// Convert persons/day into per-capita daily rates: the source row divides
/// by the source population, and the optional return flow mirrors each
/// volume back at `return_factor` of its magnitude, divided by the
/// destination population, so populations do not drain monotonically.
pub fn to_rate_matrix(
    flux: &BTreeMap<String, f64>,
    patches: &[Patch],
    source_id: &str,
    return_factor: f64,
) -> Result<FluxMatrix> {
    if !(0.0..=1.0).contains(&return_factor) {
        return Err(Error::Validation(format!(
            "return_factor must lie in [0, 1], got {return_factor}"
        )));
    }
    let index: BTreeMap<&str, usize> = patches
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    let src = *index
        .get(source_id)
        .ok_or_else(|| Error::Validation(format!("source patch {source_id:?} not in patch list")))?;
    if patches[src].human_population <= 0.0 {
        return Err(Error::Validation(format!(
            "source patch {source_id:?} has zero population"
        )));
    }
    let mut m = FluxMatrix::zeros(patches.iter().map(|p| p.id.clone()).collect());
    for (id, &volume) in flux {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Validation(format!("flux destination {id:?} not in patch list")))?;
        if i == src {
            continue;
        }
        m.rates[src][i] = volume / patches[src].human_population;
        if patches[i].human_population > 0.0 {
            m.rates[i][src] = return_factor * volume / patches[i].human_population;
        }
    }
    m.validate()?;
    Ok(m)
}
