//! Reading and writing the `.geo`, `.traj` and `.rel` atomic files.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};

use super::model::*;
use crate::error::{Error, Result};

const GEO_FIXED: [&str; 3] = ["geo_id", "type", "coordinates"];
const TRAJ_HEADER: [&str; 7] = ["traj_id", "step", "user_id", "entity_id", "lon", "lat", "time"];
const REL_HEADER: [&str; 5] = ["rel_id", "origin_id", "destination_id", "rel_type", "weight"];

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).from_reader(file))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn row_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

pub fn format_time(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s).ok().map(|t| t.with_timezone(&Utc))
}

/// Serialises a geometry as the JSON array string used in `.geo`.
pub fn geometry_json(kind: EntityKind, geometry: &[Coord]) -> String {
    let value = match kind {
        EntityKind::Poi => serde_json::json!(geometry[0]),
        _ => serde_json::json!(geometry),
    };
    value.to_string()
}

fn parse_geometry(kind: EntityKind, s: &str) -> Result<Vec<Coord>, String> {
    let bad = |e: serde_json::Error| format!("bad coordinates `{s}`: {e}");
    match kind {
        EntityKind::Poi => serde_json::from_str::<Coord>(s).map(|c| vec![c]).map_err(bad),
        _ => serde_json::from_str::<Vec<Coord>>(s).map_err(bad),
    }
}

/// Reads a `.geo` file. Empty feature cells mean the feature does not apply
/// to that row's entity kind.
pub fn load_geo(path: impl AsRef<Path>) -> Result<Vec<MapEntity>> {
    let path = path.as_ref();
    let label = file_label(path);
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || headers.iter().take(3).ne(GEO_FIXED) {
        return Err(Error::format(&label, 1, "header must start with geo_id,type,coordinates"));
    }
    let feature_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_of(&rec);
        if rec.len() != headers.len() {
            return Err(Error::format(&label, row, format!("expected {} cells, got {}", headers.len(), rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::format(&label, row, "empty geo_id"));
        }
        let kind = EntityKind::from_geo_type(&rec[1])
            .ok_or_else(|| Error::format(&label, row, format!("unknown type `{}`", &rec[1])))?;
        let geometry = parse_geometry(kind, &rec[2]).map_err(|m| Error::format(&label, row, m))?;
        let mut entity = MapEntity::new(id, kind, geometry);
        for (name, cell) in feature_names.iter().zip(rec.iter().skip(3)) {
            if !cell.is_empty() {
                entity.features.insert(name.clone(), FeatureValue::parse(cell));
            }
        }
        entity.check_geometry().map_err(Error::Integrity)?;
        if !seen.insert(entity.id.clone()) {
            return Err(Error::integrity(format!("duplicate geo_id `{}` at row {row}", entity.id)));
        }
        out.push(entity);
    }
    Ok(out)
}

pub fn save_geo(path: impl AsRef<Path>, entities: &[MapEntity]) -> Result<()> {
    let names: BTreeSet<&str> = entities.iter().flat_map(|e| e.features.keys().map(String::as_str)).collect();
    let mut w = writer(path.as_ref())?;
    let mut header: Vec<&str> = GEO_FIXED.to_vec();
    header.extend(names.iter().copied());
    w.write_record(&header)?;
    for e in entities {
        let mut row = vec![e.id.clone(), e.kind.geo_type().to_string(), geometry_json(e.kind, &e.geometry)];
        for name in &names {
            let cell = match e.features.get(*name) {
                None => String::new(),
                Some(FeatureValue::Category(s)) => {
                    if s.is_empty() || matches!(FeatureValue::parse(s), FeatureValue::Number(_)) {
                        return Err(Error::usage(format!(
                            "categorical value `{s}` of `{}` would not read back as a category",
                            e.id
                        )));
                    }
                    s.clone()
                }
                Some(v) => v.to_string(),
            };
            row.push(cell);
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// Reads a `.traj` file. Rows of one trajectory must be contiguous with
/// steps 0, 1, 2, ...
pub fn load_traj(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let label = file_label(path);
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(TRAJ_HEADER) {
        return Err(Error::format(&label, 1, format!("header must be {}", TRAJ_HEADER.join(","))));
    }
    let mut out: Vec<Trajectory> = Vec::new();
    let mut closed: HashSet<String> = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_of(&rec);
        if rec.len() != TRAJ_HEADER.len() {
            return Err(Error::format(&label, row, format!("expected 7 cells, got {}", rec.len())));
        }
        let traj_id = &rec[0];
        let step: usize = rec[1]
            .parse()
            .map_err(|_| Error::format(&label, row, format!("bad step `{}`", &rec[1])))?;
        let user = (!rec[2].is_empty()).then(|| rec[2].to_string());
        let location = match (&rec[3], &rec[4], &rec[5]) {
            (e, "", "") if !e.is_empty() => Location::Entity(e.to_string()),
            ("", lon, lat) if !lon.is_empty() && !lat.is_empty() => {
                let lon: f64 = lon.parse().map_err(|_| Error::format(&label, row, "bad lon"))?;
                let lat: f64 = lat.parse().map_err(|_| Error::format(&label, row, "bad lat"))?;
                Location::Coord([lon, lat])
            }
            _ => return Err(Error::format(&label, row, "exactly one of entity_id or lon,lat must be set")),
        };
        let time = parse_time(&rec[6])
            .ok_or_else(|| Error::format(&label, row, format!("bad ISO-8601 time `{}`", &rec[6])))?;

        let continues = out.last().is_some_and(|t| t.id == traj_id);
        if !continues {
            if let Some(prev) = out.last() {
                closed.insert(prev.id.clone());
            }
            if closed.contains(traj_id) {
                return Err(Error::format(&label, row, format!("rows of trajectory `{traj_id}` are not contiguous")));
            }
            out.push(Trajectory::new(traj_id, user.clone(), Vec::new()));
        }
        let traj = out.last_mut().expect("just pushed");
        if step != traj.samples.len() {
            return Err(Error::format(
                &label,
                row,
                format!("trajectory `{traj_id}` expected step {}, got {step}", traj.samples.len()),
            ));
        }
        if traj.user != user {
            return Err(Error::format(&label, row, format!("trajectory `{traj_id}` changes user_id")));
        }
        traj.samples.push(Sample { location, time });
    }
    for t in &out {
        t.check().map_err(Error::Integrity)?;
    }
    Ok(out)
}

pub fn save_traj(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    w.write_record(TRAJ_HEADER)?;
    for t in trajectories {
        let user = t.user.clone().unwrap_or_default();
        for (step, s) in t.samples.iter().enumerate() {
            let (entity, lon, lat) = match &s.location {
                Location::Entity(id) => (id.clone(), String::new(), String::new()),
                Location::Coord([lon, lat]) => (String::new(), lon.to_string(), lat.to_string()),
            };
            w.write_record([t.id.clone(), step.to_string(), user.clone(), entity, lon, lat, format_time(&s.time)])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// Reads a `.rel` file against a declared vertex list. Returns one network
/// per `rel_type` present, geographical first.
pub fn load_rel(path: impl AsRef<Path>, vertices: &[String]) -> Result<Vec<RelationNetwork>> {
    let path = path.as_ref();
    let label = file_label(path);
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let has_weight = match headers.len() {
        5 if headers.iter().eq(REL_HEADER) => true,
        4 if headers.iter().eq(REL_HEADER[..4].iter().copied()) => false,
        _ => return Err(Error::format(&label, 1, format!("header must be {}", REL_HEADER.join(",")))),
    };
    let index: HashMap<&str, usize> = vertices.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let mut geo = RelationNetwork::new(vertices.to_vec(), RelationKind::Geographical);
    let mut social = RelationNetwork::new(vertices.to_vec(), RelationKind::Social);
    let (mut any_geo, mut any_social) = (false, false);
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_of(&rec);
        if rec.len() != headers.len() {
            return Err(Error::format(&label, row, format!("expected {} cells, got {}", headers.len(), rec.len())));
        }
        let endpoint = |cell: &str| {
            index
                .get(cell)
                .copied()
                .ok_or_else(|| Error::integrity(format!("row {row}: `{cell}` is not a declared vertex")))
        };
        let (a, b) = (endpoint(&rec[1])?, endpoint(&rec[2])?);
        let kind = RelationKind::from_rel_type(&rec[3])
            .ok_or_else(|| Error::format(&label, row, format!("unknown rel_type `{}`", &rec[3])))?;
        let weight = if has_weight {
            rec[4].parse::<f64>().map_err(|_| Error::format(&label, row, format!("bad weight `{}`", &rec[4])))?
        } else {
            1.0
        };
        if weight < 0.0 {
            return Err(Error::integrity(format!("row {row}: negative weight {weight}")));
        }
        let net = match kind {
            RelationKind::Geographical => {
                any_geo = true;
                &mut geo
            }
            RelationKind::Social => {
                any_social = true;
                &mut social
            }
        };
        if net.edges.insert((a, b), weight).is_some() {
            return Err(Error::integrity(format!("row {row}: duplicate edge {} -> {}", &rec[1], &rec[2])));
        }
    }
    let mut out = Vec::new();
    if any_geo {
        out.push(geo);
    }
    if any_social {
        out.push(social);
    }
    Ok(out)
}

pub fn save_rel(path: impl AsRef<Path>, networks: &[RelationNetwork]) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    w.write_record(REL_HEADER)?;
    let mut rel_id = 0usize;
    for net in networks {
        for (&(a, b), &weight) in &net.edges {
            w.write_record([
                rel_id.to_string(),
                net.vertices[a].clone(),
                net.vertices[b].clone(),
                net.kind.rel_type().to_string(),
                weight.to_string(),
            ])?;
            rel_id += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// File locations of a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub geo: PathBuf,
    pub traj: PathBuf,
    pub rel: PathBuf,
    pub meta: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: impl AsRef<Path>, city: &str) -> Self {
        let dir = dir.as_ref();
        Self {
            geo: dir.join(format!("{city}.geo")),
            traj: dir.join(format!("{city}.traj")),
            rel: dir.join(format!("{city}.rel")),
            meta: dir.join("config.json"),
        }
    }
}

/// Writes the three atomic files plus `config.json` with the metadata.
pub fn save_dataset(dir: impl AsRef<Path>, d: &Dataset) -> Result<DatasetPaths> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::new(dir, &d.meta.city);
    save_geo(&paths.geo, &d.entities)?;
    save_traj(&paths.traj, &d.trajectories)?;
    let all: Vec<String> = d.entities.iter().map(|e| e.id.clone()).collect();
    let lifted = d.networks.iter().map(|n| n.lift(&all)).collect::<Result<Vec<_>>>()?;
    save_rel(&paths.rel, &lifted)?;
    let meta = serde_json::to_string_pretty(&d.meta)? + "\n";
    fs::write(&paths.meta, meta).map_err(|e| Error::io(&paths.meta, e))?;
    Ok(paths)
}

/// Loads a dataset directory written by [`save_dataset`]. Networks are keyed
/// over every entity id in `.geo` order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("config.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Metadata = serde_json::from_str(&text)?;
    let paths = DatasetPaths::new(dir, &meta.city);
    let entities = load_geo(&paths.geo)?;
    let trajectories = load_traj(&paths.traj)?;
    let ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();
    let networks = load_rel(&paths.rel, &ids)?;
    Ok(Dataset { meta, entities, trajectories, networks })
}
