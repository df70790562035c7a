//! Random atomic-file datasets and their GeoJSON/CSV source form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{TimeZone, Utc};
use maprl::data::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn coord(rng: &mut ChaCha8Rng) -> Coord {
    // millidegree grid keeps the text form short but still fractional
    [rng.random_range(-180_000..180_000) as f64 / 1000.0, rng.random_range(-90_000..90_000) as f64 / 1000.0]
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..7);
    (0..n).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect::<String>() + "_x"
}

fn geometry(kind: EntityKind, rng: &mut ChaCha8Rng) -> Vec<Coord> {
    match kind {
        EntityKind::Poi => vec![coord(rng)],
        EntityKind::Segment => (0..rng.random_range(2..5)).map(|_| coord(rng)).collect(),
        EntityKind::Parcel => {
            let mut ring: Vec<Coord> = (0..rng.random_range(3..6)).map(|_| coord(rng)).collect();
            ring.push(ring[0]);
            ring
        }
    }
}

pub fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let n = rng.random_range(1..25);
    let feature_names: Vec<String> = (0..rng.random_range(0..4)).map(|i| format!("f{i}_{}", word(rng))).collect();
    let entities: Vec<MapEntity> = (0..n)
        .map(|i| {
            let kind = EntityKind::ALL[rng.random_range(0..3)];
            let mut e = MapEntity::new(format!("e{i:03}"), kind, geometry(kind, rng));
            for f in &feature_names {
                match rng.random_range(0..3) {
                    0 => {}
                    1 => {
                        e.features.insert(f.clone(), FeatureValue::Number(rng.random_range(-1e4..1e4)));
                    }
                    _ => {
                        e.features.insert(f.clone(), FeatureValue::Category(word(rng)));
                    }
                }
            }
            e
        })
        .collect();
    let ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 8, 0, 0).unwrap();
    let trajectories: Vec<Trajectory> = (0..rng.random_range(0..12))
        .map(|i| {
            let coords = rng.random_bool(0.3);
            let mut t = t0 + chrono::Duration::milliseconds(rng.random_range(0..86_400_000));
            let samples = (0..rng.random_range(1..8))
                .map(|_| {
                    t += chrono::Duration::milliseconds(rng.random_range(1..600_000));
                    if coords {
                        Sample::coord(coord(rng), t)
                    } else {
                        Sample::entity(ids[rng.random_range(0..ids.len())].clone(), t)
                    }
                })
                .collect();
            let user = rng.random_bool(0.7).then(|| format!("u{}", rng.random_range(0..5)));
            Trajectory::new(format!("t{i:02}"), user, samples)
        })
        .collect();
    let mut networks = Vec::new();
    for kind in [RelationKind::Geographical, RelationKind::Social] {
        if rng.random_bool(0.7) {
            let mut net = RelationNetwork::new(ids.clone(), kind);
            for _ in 0..rng.random_range(1..30) {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                let w = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(1..1000) as f64 / 8.0 };
                net.edges.insert((a, b), w);
            }
            networks.push(net);
        }
    }
    let meta = Metadata { city: word(rng), crs: DEFAULT_CRS.into(), entity_kind: entities[0].kind, source_crs: BTreeMap::new() };
    Dataset { meta, entities, trajectories, networks }
}

fn feature_json(v: &FeatureValue) -> Value {
    match v {
        FeatureValue::Number(x) => json!(x),
        FeatureValue::Category(s) => json!(s),
    }
}

/// Writes one GeoJSON file per entity kind present and a trajectory CSV with
/// shuffled rows. Returns the GeoJSON paths and the CSV path.
pub fn write_standard_inputs(d: &Dataset, dir: &Path, rng: &mut ChaCha8Rng) -> (Vec<std::path::PathBuf>, std::path::PathBuf) {
    let mut paths = Vec::new();
    for kind in EntityKind::ALL {
        let feats: Vec<Value> = d
            .entities
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| {
                let coords = match kind {
                    EntityKind::Poi => json!(e.geometry[0]),
                    EntityKind::Segment => json!(e.geometry),
                    EntityKind::Parcel => json!([e.geometry]),
                };
                let props: serde_json::Map<String, Value> = e.features.iter().map(|(k, v)| (k.clone(), feature_json(v))).collect();
                // ids alternate between the feature member and a property
                if rng.random_bool(0.5) {
                    json!({"type": "Feature", "id": e.id, "geometry": {"type": kind.geo_type(), "coordinates": coords}, "properties": props})
                } else {
                    let mut props = props;
                    props.insert("id".into(), json!(e.id));
                    json!({"type": "Feature", "geometry": {"type": kind.geo_type(), "coordinates": coords}, "properties": props})
                }
            })
            .collect();
        if feats.is_empty() {
            continue;
        }
        let p = dir.join(format!("{}.geojson", kind.name()));
        fs::write(&p, json!({"type": "FeatureCollection", "features": feats}).to_string()).unwrap();
        paths.push(p);
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for t in &d.trajectories {
        for s in &t.samples {
            let (e, x, y) = match &s.location {
                Location::Entity(id) => (id.clone(), String::new(), String::new()),
                Location::Coord(c) => (String::new(), c[0].to_string(), c[1].to_string()),
            };
            rows.push(vec![t.id.clone(), t.user.clone().unwrap_or_default(), format_time(&s.time), e, x, y]);
        }
    }
    rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), rng);
    let csv_path = dir.join("trajectories.csv");
    let mut w = csv::Writer::from_path(&csv_path).unwrap();
    w.write_record(["lat", "traj_id", "user_id", "time", "entity_id", "lon"]).unwrap();
    for r in rows {
        w.write_record([&r[5], &r[0], &r[1], &r[2], &r[3], &r[4]]).unwrap();
    }
    w.flush().unwrap();
    (paths, csv_path)
}
