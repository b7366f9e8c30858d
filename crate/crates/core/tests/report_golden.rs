//! Byte-for-byte check of report emission against committed golden files.
//! Regenerate with `UPDATE_GOLDEN=1 cargo test -p arbomap --test report_golden`
//! and review the diff before committing.

use arbomap::epimodel::{RiskEntry, RiskScores};
use arbomap::geo::{GeoPoint, Patch, Polygon};
use arbomap::riskmap::{emit_report, intersect_high_risk, ShareKind, ShareRow, ShareTable};

fn fixture_patch(id: &str, name: &str, lat0: f64) -> Patch {
    Patch {
        id: id.into(),
        name: name.into(),
        geometry: Polygon::new(vec![vec![
            GeoPoint { lat: lat0, lon: -80.4 },
            GeoPoint { lat: lat0, lon: -80.1 },
            GeoPoint { lat: lat0 + 0.3, lon: -80.1 },
            GeoPoint { lat: lat0 + 0.3, lon: -80.4 },
        ]])
        .unwrap(),
        human_population: 50_000.0,
        vector_capacity: 75_000.0,
    }
}

fn table(kind: ShareKind, rows: &[(&str, u64)], other: u64) -> ShareTable {
    let denominator = rows.iter().map(|(_, c)| c).sum::<u64>() + other;
    ShareTable {
        kind,
        rows: rows
            .iter()
            .map(|(id, count)| ShareRow { id: id.to_string(), count: *count })
            .collect(),
        other_count: other,
        denominator,
    }
}

#[test]
fn report_matches_committed_golden_files() {
    let risks = RiskScores {
        entries: vec![
            RiskEntry { patch_id: "miami_dade".into(), i_h_steady: 629.079453, risk: 172.350535 },
            RiskEntry { patch_id: "broward".into(), i_h_steady: 570.644334, risk: 156.340913 },
        ],
        relative: true,
    };
    let patches = vec![
        fixture_patch("miami_dade", "Miami-Dade", 25.6),
        fixture_patch("broward", "Broward", 26.0),
    ];
    let visitors = table(
        ShareKind::VisitorVisits,
        &[("airport", 169), ("wynwood", 140), ("beach", 100)],
        591,
    );
    let residents = table(
        ShareKind::ResidentHomes,
        &[("downtown", 25), ("beach", 20), ("wynwood", 10)],
        45,
    );
    let risk_set = intersect_high_risk(&visitors, &residents, 2);

    let out = tempfile::tempdir().unwrap();
    emit_report(&risks, &patches, &[&visitors, &residents], &risk_set, out.path()).unwrap();

    let golden_dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let files = [
        "county_risk.csv",
        "county_risk.geojson",
        "neighborhood_shares.csv",
        "risk_set.json",
    ];
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(&golden_dir).unwrap();
        for f in files {
            std::fs::copy(out.path().join(f), golden_dir.join(f)).unwrap();
        }
        panic!("golden files regenerated; review and re-run without UPDATE_GOLDEN");
    }
    for f in files {
        let got = std::fs::read(out.path().join(f)).unwrap();
        let want = std::fs::read(golden_dir.join(f))
            .unwrap_or_else(|e| panic!("missing golden file {f}: {e}"));
        assert_eq!(got, want, "{f} drifted from the committed golden copy");
    }

    // The emitted GeoJSON re-parses with the risk values intact.
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join("county_risk.geojson")).unwrap())
            .unwrap();
    let features = parsed["features"].as_array().unwrap();
    assert_eq!(features.len(), risks.entries.len());
    for (feature, entry) in features.iter().zip(&risks.entries) {
        assert_eq!(feature["properties"]["id"], entry.patch_id.as_str());
        assert_eq!(feature["properties"]["risk"].as_f64().unwrap(), entry.risk);
    }
}
