//! Conversion from GeoJSON and CSV inputs into atomic files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::atomic::{parse_time, save_dataset};
use super::model::*;
use super::network::build_od_network;
use crate::error::{Error, Result};

/// CRS names that denote plain WGS84 lon/lat.
fn canonical_crs(name: &str) -> String {
    match name {
        "urn:ogc:def:crs:OGC:1.3:CRS84" | "urn:ogc:def:crs:EPSG::4326" | "CRS84" | "WGS84" => DEFAULT_CRS.into(),
        other => other.to_string(),
    }
}

fn coord(v: &Value) -> Option<Coord> {
    let a = v.as_array()?;
    Some([a.first()?.as_f64()?, a.get(1)?.as_f64()?])
}

fn coords(v: &Value) -> Option<Vec<Coord>> {
    v.as_array()?.iter().map(coord).collect()
}

/// GeoJSON FeatureCollection contents plus the CRS it declares (WGS84 when absent).
#[derive(Clone, Debug, PartialEq)]
pub struct GeoJsonLayer {
    pub entities: Vec<MapEntity>,
    pub crs: String,
}

pub fn parse_geojson(text: &str, label: &str) -> Result<GeoJsonLayer> {
    let doc: Value = serde_json::from_str(text)?;
    let crs = doc
        .pointer("/crs/properties/name")
        .and_then(Value::as_str)
        .map(canonical_crs)
        .unwrap_or_else(|| DEFAULT_CRS.to_string());
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(label, 0, "not a FeatureCollection"))?;
    let mut entities = Vec::with_capacity(features.len());
    for (row, f) in features.iter().enumerate() {
        let bad = |m: &str| Error::format(label, row + 1, m.to_string());
        let props = f.get("properties").and_then(Value::as_object);
        let id = f
            .get("id")
            .or_else(|| props.and_then(|p| p.get("id")))
            .and_then(|v| match v {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .ok_or_else(|| bad("feature has no id property"))?;
        let geom = f.get("geometry").ok_or_else(|| bad("feature has no geometry"))?;
        let gtype = geom.get("type").and_then(Value::as_str).unwrap_or_default();
        let kind = EntityKind::from_geo_type(gtype).ok_or_else(|| bad(&format!("unsupported geometry `{gtype}`")))?;
        let raw = geom.get("coordinates").ok_or_else(|| bad("geometry has no coordinates"))?;
        let geometry = match kind {
            EntityKind::Poi => coord(raw).map(|c| vec![c]),
            EntityKind::Segment => coords(raw),
            EntityKind::Parcel => raw.get(0).and_then(coords),
        }
        .ok_or_else(|| bad("malformed coordinates"))?;
        let mut entity = MapEntity::new(id, kind, geometry);
        for (name, value) in props.into_iter().flatten() {
            if name == "id" {
                continue;
            }
            let v = match value {
                Value::Null => continue,
                Value::Number(n) => FeatureValue::Number(n.as_f64().ok_or_else(|| bad("non-finite number"))?),
                Value::String(s) => FeatureValue::parse(s),
                Value::Bool(b) => FeatureValue::Category(b.to_string()),
                other => FeatureValue::Category(other.to_string()),
            };
            entity.features.insert(name.clone(), v);
        }
        entity.check_geometry().map_err(Error::Integrity)?;
        entities.push(entity);
    }
    Ok(GeoJsonLayer { entities, crs })
}

/// Reads the standard trajectory CSV (`traj_id,user_id,time,entity_id,lon,lat`,
/// any column order). Samples are ordered by time within each trajectory;
/// trajectories keep their first-appearance order.
pub fn parse_traj_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let label = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ti), Some(tm)) = (col("traj_id"), col("time")) else {
        return Err(Error::format(&label, 1, "trajectory CSV needs traj_id and time columns"));
    };
    let (ui, ei, xi, yi) = (col("user_id"), col("entity_id"), col("lon"), col("lat"));
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Option<String>, Vec<Sample>)> = HashMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = n + 2;
        let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).filter(|s| !s.is_empty());
        let id = get(Some(ti)).ok_or_else(|| Error::format(&label, row, "empty traj_id"))?.to_string();
        let time = get(Some(tm))
            .and_then(parse_time)
            .ok_or_else(|| Error::format(&label, row, "bad or missing ISO-8601 time"))?;
        let location = match (get(ei), get(xi), get(yi)) {
            (Some(e), None, None) => Location::Entity(e.to_string()),
            (None, Some(x), Some(y)) => Location::Coord([
                x.parse().map_err(|_| Error::format(&label, row, "bad lon"))?,
                y.parse().map_err(|_| Error::format(&label, row, "bad lat"))?,
            ]),
            _ => return Err(Error::format(&label, row, "exactly one of entity_id or lon,lat must be set")),
        };
        let user = get(ui).map(str::to_string);
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (user.clone(), Vec::new())
        });
        if entry.0 != user {
            return Err(Error::format(&label, row, format!("trajectory `{id}` changes user_id")));
        }
        entry.1.push(Sample { location, time });
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let (user, mut samples) = groups.remove(&id).expect("grouped");
        samples.sort_by_key(|s| s.time);
        let t = Trajectory::new(id, user, samples);
        t.check().map_err(Error::Integrity)?;
        out.push(t);
    }
    Ok(out)
}

/// Options for [`convert_standard`].
#[derive(Clone, Debug)]
pub struct ConvertOptions {
    pub city: String,
    pub crs: String,
    pub entity_kind: Option<EntityKind>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self { city: "city".into(), crs: DEFAULT_CRS.into(), entity_kind: None }
    }
}

/// Parses the inputs into a dataset without touching the file system for output.
pub fn parse_standard(geo_inputs: &[&Path], traj_input: Option<&Path>, opts: &ConvertOptions) -> Result<Dataset> {
    let mut entities = Vec::new();
    let mut source_crs = BTreeMap::new();
    let want = canonical_crs(&opts.crs);
    for path in geo_inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::io(*path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let layer = parse_geojson(&text, &path.display().to_string())?;
        if layer.crs != want {
            return Err(Error::integrity(format!("`{name}` declares CRS {} but the dataset uses {want}", layer.crs)));
        }
        source_crs.insert(name, layer.crs);
        entities.extend(layer.entities);
    }
    let mut seen = std::collections::HashSet::new();
    for e in &entities {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::integrity(format!("duplicate entity id `{}` across inputs", e.id)));
        }
    }
    let trajectories = match traj_input {
        Some(p) => parse_traj_csv(p)?,
        None => Vec::new(),
    };
    let ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
    let checkins: Vec<&Trajectory> =
        trajectories.iter().filter(|t| t.variant() == Some(TrajVariant::Checkin)).collect();
    let mut networks = Vec::new();
    let od = build_od_network(&checkins, &ids);
    if od.n_edges() > 0 {
        networks.push(od);
    }
    let entity_kind = opts.entity_kind.or_else(|| entities.first().map(|e| e.kind)).unwrap_or(EntityKind::Poi);
    Ok(Dataset {
        meta: Metadata { city: opts.city.clone(), crs: want, entity_kind, source_crs },
        entities,
        trajectories,
        networks,
    })
}

/// Converts GeoJSON layers and a trajectory CSV into a dataset directory of
/// atomic files. The `.rel` file carries the OD network of the check-in
/// trajectories.
pub fn convert_standard(
    geo_inputs: &[&Path],
    traj_input: Option<&Path>,
    out_dir: &Path,
    opts: &ConvertOptions,
) -> Result<Dataset> {
    let d = parse_standard(geo_inputs, traj_input, opts)?;
    save_dataset(out_dir, &d)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_POINTS: &str = r#"{"type":"FeatureCollection","features":[
        {"type":"Feature","id":"a","geometry":{"type":"Point","coordinates":[116.3,39.9]},"properties":{"category":"cafe","rating":4.5}},
        {"type":"Feature","geometry":{"type":"Point","coordinates":[116.31,39.91]},"properties":{"id":"b","category":"bar","rating":3}}
    ]}"#;

    #[test]
    fn two_points_become_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("pois.geojson");
        fs::write(&src, TWO_POINTS).unwrap();
        let out = dir.path().join("out");
        let d = convert_standard(&[&src], None, &out, &ConvertOptions::default()).unwrap();
        let loaded = crate::data::load_geo(out.join("city.geo")).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded, d.entities);
        assert_eq!(loaded[1].features["rating"], FeatureValue::Number(3.0));
    }

    #[test]
    fn missing_id_and_crs_mismatch() {
        let no_id = r#"{"type":"FeatureCollection","features":[{"type":"Feature","geometry":{"type":"Point","coordinates":[0,0]},"properties":{}}]}"#;
        assert!(matches!(parse_geojson(no_id, "x"), Err(Error::Format { .. })));
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("merc.geojson");
        fs::write(
            &src,
            r#"{"type":"FeatureCollection","crs":{"type":"name","properties":{"name":"EPSG:3857"}},"features":[]}"#,
        )
        .unwrap();
        let err = parse_standard(&[&src], None, &ConvertOptions::default());
        assert!(matches!(err, Err(Error::Integrity(_))));
    }
}
