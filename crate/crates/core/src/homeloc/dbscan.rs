//! Per-user density clustering of geo-tagged events.
//!
//! With `min_pts = 1` (the default) every point is a core point and the
//! clusters are exactly the connected components of the "within eps"
//! adjacency graph. For larger `min_pts`, border points attach to their
//! nearest core point, ties resolving by canonical event order, so the
//! partition never depends on input order.

use chrono::{DateTime, Utc};

use crate::geo::{haversine_m, GeoPoint};
use crate::ingest::ActivityEvent;

/// Clustering radius used throughout the home-location stage.
pub const DEFAULT_EPS_M: f64 = 100.0;
/// Users with fewer geo-tagged events than this are skipped entirely.
pub const MIN_GEO_EVENTS: usize = 5;

/// One spatial cluster of a user's geo-tagged events.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub user_id: String,
    /// Arithmetic mean of member coordinates.
    pub centroid: GeoPoint,
    /// Positions of the member events in the slice given to [`dbscan_user`].
    pub member_indices: Vec<usize>,
}

struct Point {
    original: usize,
    geo: GeoPoint,
    ts: DateTime<Utc>,
}

/// Cluster one user's geo-tagged events with a haversine metric. Events
/// without geo are ignored. Noise points (non-core, no core neighbor) are
/// dropped; with `min_pts = 1` nothing is noise.
pub fn dbscan_user(events: &[ActivityEvent], eps_m: f64, min_pts: usize) -> Vec<Cluster> {
    let mut points: Vec<Point> = events
        .iter()
        .enumerate()
        .filter_map(|(i, ev)| {
            ev.geo.map(|geo| Point {
                original: i,
                geo,
                ts: ev.ts,
            })
        })
        .collect();
    if points.is_empty() {
        return Vec::new();
    }
    // Canonical processing order: identical events are interchangeable, so
    // the resulting partition is invariant under input permutation.
    points.sort_by(|a, b| {
        a.ts.cmp(&b.ts)
            .then_with(|| a.geo.lat.total_cmp(&b.geo.lat))
            .then_with(|| a.geo.lon.total_cmp(&b.geo.lon))
    });
    let n = points.len();

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if haversine_m(points[i].geo, points[j].geo) <= eps_m {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    // Neighborhood counts include the point itself.
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() + 1 >= min_pts).collect();

    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0usize;
    for start in 0..n {
        if !core[start] || assignment[start].is_some() {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        let mut stack = vec![start];
        assignment[start] = Some(cluster);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && assignment[q].is_none() {
                    assignment[q] = Some(cluster);
                    stack.push(q);
                }
            }
        }
    }
    // Border points: nearest core neighbor wins, ties to the earliest in
    // canonical order.
    for p in 0..n {
        if core[p] || assignment[p].is_some() {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &q in &neighbors[p] {
            if !core[q] {
                continue;
            }
            let d = haversine_m(points[p].geo, points[q].geo);
            let better = match best {
                None => true,
                Some((bd, bq)) => d < bd || (d == bd && q < bq),
            };
            if better {
                best = Some((d, q));
            }
        }
        if let Some((_, q)) = best {
            assignment[p] = assignment[q];
        }
    }

    let user_id = events
        .iter()
        .find_map(|e| (!e.user_id.is_empty()).then(|| e.user_id.clone()))
        .unwrap_or_default();
    let mut clusters: Vec<Cluster> = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let members: Vec<&Point> = (0..n)
            .filter(|&p| assignment[p] == Some(c))
            .map(|p| &points[p])
            .collect();
        if members.is_empty() {
            continue;
        }
        let lat = members.iter().map(|p| p.geo.lat).sum::<f64>() / members.len() as f64;
        let lon = members.iter().map(|p| p.geo.lon).sum::<f64>() / members.len() as f64;
        let mut member_indices: Vec<usize> = members.iter().map(|p| p.original).collect();
        member_indices.sort_unstable();
        clusters.push(Cluster {
            user_id: user_id.clone(),
            centroid: GeoPoint { lat, lon },
            member_indices,
        });
    }
    // Deterministic cluster order: by earliest member in canonical order.
    clusters.sort_by(|a, b| {
        let ka = cluster_key(a, events);
        let kb = cluster_key(b, events);
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    clusters
}

fn cluster_key(c: &Cluster, events: &[ActivityEvent]) -> (i64, f64, f64) {
    c.member_indices
        .iter()
        .map(|&i| {
            let g = events[i].geo.unwrap();
            (events[i].ts.timestamp(), g.lat, g.lon)
        })
        .min_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or((0, 0.0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::collections::BTreeSet;

    fn geo_ev(user: &str, sec: i64, lat: f64, lon: f64) -> ActivityEvent {
        ActivityEvent {
            user_id: user.into(),
            ts: Utc.timestamp_opt(1_464_739_200 + sec, 0).unwrap(),
            geo: Some(GeoPoint { lat, lon }),
            text: None,
        }
    }

    #[test]
    fn five_identical_points_form_one_cluster() {
        let events: Vec<_> = (0..5).map(|i| geo_ev("u", i, 25.76, -80.19)).collect();
        let clusters = dbscan_user(&events, DEFAULT_EPS_M, 1);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].member_indices.len(), 5);
        assert_eq!(clusters[0].centroid, GeoPoint { lat: 25.76, lon: -80.19 });
    }

    #[test]
    fn groups_a_kilometer_apart_stay_separate() {
        // ~0.01 deg latitude is ~1.1 km.
        let mut events: Vec<_> = (0..4).map(|i| geo_ev("u", i, 25.76, -80.19)).collect();
        events.extend((0..4).map(|i| geo_ev("u", 10 + i, 25.77, -80.19)));
        let clusters = dbscan_user(&events, DEFAULT_EPS_M, 1);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].member_indices, vec![0, 1, 2, 3]);
        assert_eq!(clusters[1].member_indices, vec![4, 5, 6, 7]);
    }

    #[test]
    fn chain_linkage_bridges_components() {
        // 80 m spacing: consecutive points link even though the ends are
        // far apart.
        let step = 80.0 / (std::f64::consts::PI * crate::geo::EARTH_RADIUS_M / 180.0);
        let events: Vec<_> = (0..6)
            .map(|i| geo_ev("u", i as i64, 25.76 + step * i as f64, -80.19))
            .collect();
        let clusters = dbscan_user(&events, DEFAULT_EPS_M, 1);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].member_indices.len(), 6);
    }

    /// Union-find over the <=eps adjacency graph; the independent oracle
    /// for the min_pts = 1 behavior.
    pub(crate) fn linkage_oracle(points: &[GeoPoint], eps_m: f64) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, x: usize) -> usize {
            if parent[x] != x {
                let root = find(parent, parent[x]);
                parent[x] = root;
            }
            parent[x]
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if haversine_m(points[i], points[j]) <= eps_m {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri] = rj;
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    fn partition_sets(clusters: &[Cluster]) -> BTreeSet<Vec<usize>> {
        clusters.iter().map(|c| c.member_indices.clone()).collect()
    }

    #[test]
    fn matches_union_find_oracle_on_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let n = rng.gen_range(1..=50);
            let events: Vec<_> = (0..n)
                .map(|i| {
                    geo_ev(
                        "u",
                        i as i64,
                        25.76 + rng.gen_range(-0.004..0.004),
                        -80.19 + rng.gen_range(-0.004..0.004),
                    )
                })
                .collect();
            let clusters = dbscan_user(&events, DEFAULT_EPS_M, 1);
            let points: Vec<GeoPoint> = events.iter().map(|e| e.geo.unwrap()).collect();
            let oracle: BTreeSet<Vec<usize>> = linkage_oracle(&points, DEFAULT_EPS_M)
                .into_iter()
                .map(|mut g| {
                    g.sort_unstable();
                    g
                })
                .collect();
            assert_eq!(partition_sets(&clusters), oracle, "case {case}");
        }
    }

    #[test]
    fn partition_is_permutation_invariant() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let events: Vec<_> = (0..30)
            .map(|i| {
                geo_ev(
                    "u",
                    i as i64,
                    25.76 + rng.gen_range(-0.003..0.003),
                    -80.19 + rng.gen_range(-0.003..0.003),
                )
            })
            .collect();
        let key_sets = |clusters: &[Cluster], evs: &[ActivityEvent]| -> BTreeSet<Vec<(i64, String)>> {
            clusters
                .iter()
                .map(|c| {
                    let mut keys: Vec<(i64, String)> = c
                        .member_indices
                        .iter()
                        .map(|&i| (evs[i].ts.timestamp(), format!("{:?}", evs[i].geo)))
                        .collect();
                    keys.sort();
                    keys
                })
                .collect()
        };
        let base = dbscan_user(&events, DEFAULT_EPS_M, 1);
        let base_sets = key_sets(&base, &events);
        for round in 0..5 {
            let mut shuffled = events.clone();
            shuffled.shuffle(&mut rng);
            let got = dbscan_user(&shuffled, DEFAULT_EPS_M, 1);
            assert_eq!(base_sets, key_sets(&got, &shuffled), "round {round}");
        }
    }

    #[test]
    fn min_pts_two_leaves_isolated_points_as_noise() {
        let mut events: Vec<_> = (0..3).map(|i| geo_ev("u", i, 25.76, -80.19)).collect();
        events.push(geo_ev("u", 10, 25.80, -80.19)); // isolated
        let clusters = dbscan_user(&events, DEFAULT_EPS_M, 2);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].member_indices, vec![0, 1, 2]);
    }

    #[test]
    fn text_only_events_are_ignored() {
        let mut events: Vec<_> = (0..5).map(|i| geo_ev("u", i, 25.76, -80.19)).collect();
        events.push(ActivityEvent {
            user_id: "u".into(),
            ts: Utc.timestamp_opt(1_464_739_900, 0).unwrap(),
            geo: None,
            text: Some("no geotag".into()),
        });
        let clusters = dbscan_user(&events, DEFAULT_EPS_M, 1);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].member_indices.len(), 5);
    }
}
