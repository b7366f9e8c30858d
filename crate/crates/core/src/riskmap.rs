//! Neighborhood-level aggregation and the two-criteria high-risk set.
//!
//! Two share tables feed the final call: where source-zone residents spend
//! their visits, and where inferred resident homes sit. A neighborhood is
//! high risk when it ranks in the top k of both tables. Events or homes
//! outside every named neighborhood land in an explicit "other" bucket so
//! denominators stay honest.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Neighborhood, Patch, RegionLocator};
use crate::homeloc::{HomePrediction, Verdict};
use crate::ingest::ActivityEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareKind {
    VisitorVisits,
    ResidentHomes,
}

/// What a visitor-share row counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShareUnit {
    /// Each geo-tagged event counts once (the default).
    Events,
    /// Each user counts once per region they appear in.
    Users,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub id: String,
    pub count: u64,
}

/// Per-neighborhood counts over a common denominator, sorted by
/// descending count (ties toward the smaller id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareTable {
    pub kind: ShareKind,
    pub rows: Vec<ShareRow>,
    pub other_count: u64,
    pub denominator: u64,
}

impl ShareTable {
    fn from_counts(
        kind: ShareKind,
        mut counts: Vec<(String, u64)>,
        other_count: u64,
    ) -> ShareTable {
        counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let denominator = counts.iter().map(|(_, c)| c).sum::<u64>() + other_count;
        ShareTable {
            kind,
            rows: counts
                .into_iter()
                .map(|(id, count)| ShareRow { id, count })
                .collect(),
            other_count,
            denominator,
        }
    }

    pub fn percentage(&self, count: u64) -> f64 {
        count as f64 * 100.0 / self.denominator as f64
    }

    /// Percentage rendered to one decimal place with exact integer
    /// arithmetic (half away from zero).
    pub fn rendered_percentage(&self, count: u64) -> String {
        let tenths = (count * 1000 + self.denominator / 2) / self.denominator;
        format!("{}.{}", tenths / 10, tenths % 10)
    }

    /// The ids making up the top `k` rows; a tie at the k-th rank pulls in
    /// every row with the tied count. The "other" bucket never ranks.
    pub fn top_set(&self, k: usize) -> BTreeSet<String> {
        assert!(k >= 1, "top_k must be at least 1");
        if self.rows.is_empty() {
            return BTreeSet::new();
        }
        let cutoff = self.rows[k.min(self.rows.len()) - 1].count;
        self.rows
            .iter()
            .take_while(|r| r.count >= cutoff)
            .map(|r| r.id.clone())
            .collect()
    }
}

/// Per-neighborhood shares of geo-tagged activity. `events` must already be
/// filtered to the population of interest (visitors from the source zone).
pub fn visitor_shares(events: &[ActivityEvent], neighborhoods: &[Neighborhood]) -> Result<ShareTable> {
    visitor_shares_by(events, neighborhoods, ShareUnit::Events)
}

pub fn visitor_shares_by(
    events: &[ActivityEvent],
    neighborhoods: &[Neighborhood],
    unit: ShareUnit,
) -> Result<ShareTable> {
    let locator = RegionLocator::new(neighborhoods);
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new(); // (region, user) for Users mode
    let mut counts: std::collections::BTreeMap<&str, u64> = Default::default();
    let mut other = 0u64;
    let mut located_any = false;
    for ev in events {
        let Some(geo) = ev.geo else { continue };
        located_any = true;
        let region = locator.locate(geo)?;
        let key = region.unwrap_or("__other__");
        if unit == ShareUnit::Users && !seen.insert((key.to_string(), ev.user_id.clone())) {
            continue;
        }
        match region {
            Some(id) => *counts.entry(id).or_default() += 1,
            None => other += 1,
        }
    }
    if !located_any {
        return Err(Error::EmptySample(
            "no geo-tagged events to aggregate into visitor shares".into(),
        ));
    }
    let rows: Vec<(String, u64)> = neighborhoods
        .iter()
        .map(|n| (n.id.clone(), counts.get(n.id.as_str()).copied().unwrap_or(0)))
        .collect();
    Ok(ShareTable::from_counts(ShareKind::VisitorVisits, rows, other))
}

/// Per-neighborhood shares of accepted home locations. Unknown verdicts are
/// excluded from both numerator and denominator.
pub fn resident_shares(
    predictions: &[HomePrediction],
    neighborhoods: &[Neighborhood],
) -> Result<ShareTable> {
    let locator = RegionLocator::new(neighborhoods);
    let mut counts: std::collections::BTreeMap<&str, u64> = Default::default();
    let mut other = 0u64;
    let mut any = false;
    for p in predictions {
        let Verdict::Home(geo) = p.verdict else { continue };
        any = true;
        match locator.locate(geo)? {
            Some(id) => *counts.entry(id).or_default() += 1,
            None => other += 1,
        }
    }
    if !any {
        return Err(Error::EmptySample(
            "no accepted home predictions to aggregate".into(),
        ));
    }
    let rows: Vec<(String, u64)> = neighborhoods
        .iter()
        .map(|n| (n.id.clone(), counts.get(n.id.as_str()).copied().unwrap_or(0)))
        .collect();
    Ok(ShareTable::from_counts(ShareKind::ResidentHomes, rows, other))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Both,
    VisitorOnly,
    ResidentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSet {
    pub criterion: Criterion,
    pub neighborhoods: BTreeSet<String>,
}

/// Neighborhoods in the top `k` of both tables.
pub fn intersect_high_risk(visitors: &ShareTable, residents: &ShareTable, top_k: usize) -> RiskSet {
    let a = visitors.top_set(top_k);
    let b = residents.top_set(top_k);
    RiskSet {
        criterion: Criterion::Both,
        neighborhoods: a.intersection(&b).cloned().collect(),
    }
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

fn polygon_to_geojson(poly: &crate::geo::Polygon) -> serde_json::Value {
    let rings: Vec<serde_json::Value> = poly
        .rings
        .iter()
        .map(|ring| {
            let mut coords: Vec<serde_json::Value> = ring
                .iter()
                .map(|p| serde_json::json!([p.lon, p.lat]))
                .collect();
            if let Some(first) = coords.first().cloned() {
                coords.push(first); // GeoJSON rings close explicitly
            }
            serde_json::Value::Array(coords)
        })
        .collect();
    serde_json::json!({ "type": "Polygon", "coordinates": rings })
}

/// Write the final artifacts: `county_risk.csv`, `county_risk.geojson`,
/// `neighborhood_shares.csv`, and `risk_set.json`. Output is byte-stable
/// for identical inputs.
pub fn emit_report(
    county_risks: &crate::epimodel::RiskScores,
    patches: &[Patch],
    tables: &[&ShareTable],
    risk_set: &RiskSet,
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;

    crate::epimodel::save_risk_csv(out.join("county_risk.csv"), county_risks)?;

    let features: Vec<serde_json::Value> = county_risks
        .entries
        .iter()
        .map(|entry| {
            let patch = patches.iter().find(|p| p.id == entry.patch_id);
            let geometry = patch
                .map(|p| polygon_to_geojson(&p.geometry))
                .unwrap_or(serde_json::Value::Null);
            serde_json::json!({
                "type": "Feature",
                "geometry": geometry,
                "properties": {
                    "id": entry.patch_id,
                    "name": patch.map(|p| p.name.clone()).unwrap_or_default(),
                    "I_h_steady": entry.i_h_steady,
                    "risk": entry.risk,
                    "relative": county_risks.relative,
                }
            })
        })
        .collect();
    let collection = serde_json::json!({
        "type": "FeatureCollection",
        "features": features,
    });
    let geojson_path = out.join("county_risk.geojson");
    std::fs::write(
        &geojson_path,
        serde_json::to_string_pretty(&collection).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(geojson_path.display().to_string(), e))?;

    let shares_path = out.join("neighborhood_shares.csv");
    let mut w = csv::Writer::from_path(&shares_path)
        .map_err(|e| Error::io(shares_path.display().to_string(), std::io::Error::other(e.to_string())))?;
    w.write_record(["kind", "neighborhood_id", "count", "denominator", "percentage"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for table in tables {
        let kind = match table.kind {
            ShareKind::VisitorVisits => "visitor-visits",
            ShareKind::ResidentHomes => "resident-homes",
        };
        for row in &table.rows {
            w.write_record([
                kind,
                row.id.as_str(),
                &row.count.to_string(),
                &table.denominator.to_string(),
                &table.rendered_percentage(row.count),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.write_record([
            kind,
            "other",
            &table.other_count.to_string(),
            &table.denominator.to_string(),
            &table.rendered_percentage(table.other_count),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(shares_path.display().to_string(), e))?;

    let risk_path = out.join("risk_set.json");
    std::fs::write(
        &risk_path,
        serde_json::to_string_pretty(risk_set).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(risk_path.display().to_string(), e))?;
    Ok(())
}
