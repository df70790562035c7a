//! Seeded synthetic city with planted, learnable structure.
//!
//! The city is a `rows x cols` grid of square parcels. Road intersections sit
//! at parcel centres and segments join 4-neighbour intersections. POIs are
//! scattered inside parcels; each parcel has a dominant POI category. Users
//! walk the road grid from a home parcel with a personal heading bias and
//! check in at their favourite POI of each parcel they pass. Segment speeds
//! depend on district (distance from the centre) and orientation.

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::*;
use super::network::{build_geo_network, build_od_network, haversine, Proximity};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCitySpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub n_pois: usize,
    pub n_users: usize,
    pub n_trajectories: usize,
    pub n_categories: usize,
    pub seed: u64,
}

impl Default for SyntheticCitySpec {
    fn default() -> Self {
        Self { grid_rows: 4, grid_cols: 4, n_pois: 200, n_users: 50, n_trajectories: 2000, n_categories: 8, seed: 42 }
    }
}

const MAX_CELLS: usize = 10_000;
const LON0: f64 = 116.30;
const LAT0: f64 = 39.90;
const CELL_DEG: f64 = 0.005;
const CATEGORY_PURITY: f64 = 0.97;
const FAVOURITE_RATE: f64 = 0.85;
const KNN_POI: usize = 5;
const FUNCTIONS: [&str; 4] = ["residential", "commercial", "industrial", "green"];

/// Feature columns that hold labels rather than encoder inputs.
pub const LABEL_FEATURES: [&str; 3] = ["category", "speed", "function"];

impl SyntheticCitySpec {
    pub fn check(&self) -> Result<()> {
        let counts = [self.grid_rows, self.grid_cols, self.n_pois, self.n_users, self.n_trajectories, self.n_categories];
        if counts.contains(&0) {
            return Err(Error::usage("synthetic city counts must all be at least 1"));
        }
        let cells = self.grid_rows.saturating_mul(self.grid_cols);
        if cells < 2 || cells > MAX_CELLS {
            return Err(Error::usage(format!("grid must have between 2 and {MAX_CELLS} cells, got {cells}")));
        }
        if self.n_categories > self.n_pois {
            return Err(Error::usage("more categories than POIs"));
        }
        if self.n_users > self.n_trajectories {
            return Err(Error::usage("more users than trajectories"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Undirected segment count of the grid road network.
    pub fn n_segments(&self) -> usize {
        2 * self.grid_rows * self.grid_cols - self.grid_rows - self.grid_cols
    }
}

fn pad(prefix: &str, i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).max(1).to_string().len();
    format!("{prefix}_{i:0width$}")
}

fn cell_center(r: usize, c: usize) -> Coord {
    [LON0 + (c as f64 + 0.5) * CELL_DEG, LAT0 + (r as f64 + 0.5) * CELL_DEG]
}

struct Segment {
    a: usize,
    b: usize,
    horizontal: bool,
}

fn grid_segments(rows: usize, cols: usize) -> Vec<Segment> {
    let mut segs = Vec::new();
    for r in 0..rows {
        for c in 0..cols - 1 {
            segs.push(Segment { a: r * cols + c, b: r * cols + c + 1, horizontal: true });
        }
    }
    for r in 0..rows - 1 {
        for c in 0..cols {
            segs.push(Segment { a: r * cols + c, b: (r + 1) * cols + c, horizontal: false });
        }
    }
    segs
}

/// Ring index of a segment midpoint, measured in cells from the grid centre.
fn district(seg: &Segment, rows: usize, cols: usize) -> usize {
    let pos = |n: usize| ((n / cols) as f64, (n % cols) as f64);
    let (ra, ca) = pos(seg.a);
    let (rb, cb) = pos(seg.b);
    let (mr, mc) = ((ra + rb) / 2.0, (ca + cb) / 2.0);
    let d = (mr - (rows as f64 - 1.0) / 2.0).abs().max((mc - (cols as f64 - 1.0) / 2.0).abs());
    d.floor() as usize
}

struct User {
    id: String,
    home: usize,
    heading: [f64; 4],
    favourite: Vec<Option<usize>>,
    start_hour: u32,
}

pub fn generate_synthetic_city(spec: &SyntheticCitySpec) -> Result<Dataset> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols) = (spec.grid_rows, spec.grid_cols);
    let n_cells = spec.n_cells();
    let parcel_ids: Vec<String> = (0..n_cells).map(|i| pad("parcel", i, n_cells)).collect();

    // dominant category per cell, cycling through a shuffled category list
    let mut cats: Vec<usize> = (0..spec.n_categories).collect();
    cats.shuffle(&mut rng);
    let dominant: Vec<usize> = (0..n_cells).map(|c| cats[c % cats.len()]).collect();
    let cat_name = |k: usize| pad("cat", k, spec.n_categories);

    // POIs
    let mut pois = Vec::with_capacity(spec.n_pois);
    let mut poi_cell = Vec::with_capacity(spec.n_pois);
    let mut pois_in_cell: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
    for k in 0..spec.n_pois {
        let cell = rng.random_range(0..n_cells);
        let (r, c) = (cell / cols, cell % cols);
        let lon = LON0 + (c as f64 + rng.random_range(0.1..0.9)) * CELL_DEG;
        let lat = LAT0 + (r as f64 + rng.random_range(0.1..0.9)) * CELL_DEG;
        let category = if rng.random_bool(CATEGORY_PURITY) { dominant[cell] } else { rng.random_range(0..spec.n_categories) };
        let popularity = (rng.random_range(0.0..5.0f64) * 10.0).round() / 10.0;
        pois.push(
            MapEntity::new(pad("poi", k, spec.n_pois), EntityKind::Poi, vec![[lon, lat]])
                .with_feature("cell", FeatureValue::Category(parcel_ids[cell].clone()))
                .with_feature("popularity", FeatureValue::Number(popularity))
                .with_feature("category", FeatureValue::Category(cat_name(category))),
        );
        poi_cell.push(cell);
        pois_in_cell[cell].push(k);
    }

    // parcels
    let mut parcels = Vec::with_capacity(n_cells);
    for cell in 0..n_cells {
        let (r, c) = (cell / cols, cell % cols);
        let (x0, y0) = (LON0 + c as f64 * CELL_DEG, LAT0 + r as f64 * CELL_DEG);
        let ring = vec![[x0, y0], [x0 + CELL_DEG, y0], [x0 + CELL_DEG, y0 + CELL_DEG], [x0, y0 + CELL_DEG], [x0, y0]];
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &p in &pois_in_cell[cell] {
            *counts.entry(pois[p].features["category"].as_category().unwrap()).or_default() += 1;
        }
        // most frequent category, smallest name on ties
        let top = counts.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0))).map(|(k, _)| k.to_string());
        let function = match &top {
            Some(name) => {
                let idx: usize = name.trim_start_matches("cat_").parse().unwrap_or(0);
                FUNCTIONS[idx % 3]
            }
            None => FUNCTIONS[3],
        };
        parcels.push(
            MapEntity::new(parcel_ids[cell].clone(), EntityKind::Parcel, ring)
                .with_feature("poi_count", FeatureValue::Number(pois_in_cell[cell].len() as f64))
                .with_feature("top_category", FeatureValue::Category(top.unwrap_or_else(|| "none".into())))
                .with_feature("function", FeatureValue::Category(function.into())),
        );
    }

    // road segments
    let segs = grid_segments(rows, cols);
    let noise = Normal::new(0.0, 1.5).expect("valid normal");
    let mut segments = Vec::with_capacity(segs.len());
    let mut seg_speed = Vec::with_capacity(segs.len());
    let mut seg_length = Vec::with_capacity(segs.len());
    let mut seg_between: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, s) in segs.iter().enumerate() {
        let (pa, pb) = (cell_center(s.a / cols, s.a % cols), cell_center(s.b / cols, s.b % cols));
        let level = district(s, rows, cols);
        let speed = 25.0 + 15.0 * level as f64 + if s.horizontal { 6.0 } else { 0.0 } + noise.sample(&mut rng);
        let speed = (speed.max(5.0) * 100.0).round() / 100.0;
        let length = (haversine(pa, pb) * 100.0).round() / 100.0;
        segments.push(
            MapEntity::new(pad("seg", k, segs.len()), EntityKind::Segment, vec![pa, pb])
                .with_feature("orientation", FeatureValue::Category(if s.horizontal { "h" } else { "v" }.into()))
                .with_feature("district", FeatureValue::Category(format!("d{level}")))
                .with_feature("length", FeatureValue::Number(length))
                .with_feature("speed", FeatureValue::Number(speed)),
        );
        seg_speed.push(speed);
        seg_length.push(length);
        seg_between.insert((s.a, s.b), k);
        seg_between.insert((s.b, s.a), k);
    }

    // users
    let users: Vec<User> = (0..spec.n_users)
        .map(|u| {
            let mut heading = [0.0; 4];
            for h in &mut heading {
                *h = rng.random_range(0.2..1.0);
            }
            heading[rng.random_range(0..4)] *= 4.0;
            let favourite = pois_in_cell.iter().map(|list| list.choose(&mut rng).copied()).collect();
            User {
                id: pad("user", u, spec.n_users),
                home: rng.random_range(0..n_cells),
                heading,
                favourite,
                start_hour: rng.random_range(6..20),
            }
        })
        .collect();

    // walks
    let origin = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date");
    let moves: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
    let mut checkins = Vec::with_capacity(spec.n_trajectories);
    let mut drives = Vec::with_capacity(spec.n_trajectories);
    for t in 0..spec.n_trajectories {
        let user = &users[t % spec.n_users];
        let len = rng.random_range(5..=12usize);
        let mut path = vec![user.home];
        let mut prev: Option<usize> = None;
        while path.len() < len {
            let here = *path.last().unwrap();
            let (r, c) = ((here / cols) as isize, (here % cols) as isize);
            let mut options: Vec<(usize, f64)> = moves
                .iter()
                .enumerate()
                .filter_map(|(d, (dr, dc))| {
                    let (nr, nc) = (r + dr, c + dc);
                    (nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols)
                        .then(|| (nr as usize * cols + nc as usize, user.heading[d]))
                })
                .collect();
            if options.len() > 1 {
                options.retain(|(n, _)| Some(*n) != prev);
            }
            let total: f64 = options.iter().map(|o| o.1).sum();
            let mut pick = rng.random_range(0.0..total);
            let mut next = options[0].0;
            for (n, w) in &options {
                if pick < *w {
                    next = *n;
                    break;
                }
                pick -= w;
            }
            prev = Some(here);
            path.push(next);
        }

        let day = (t / spec.n_users) as i64;
        let start = origin
            + Duration::days(day)
            + Duration::hours(user.start_hour as i64)
            + Duration::minutes(rng.random_range(0..30));
        let mut clock = start;
        let mut drive_clock = start;
        let mut visits = Vec::new();
        let mut passes = Vec::new();
        for (step, &cell) in path.iter().enumerate() {
            if !pois_in_cell[cell].is_empty() {
                let poi = match user.favourite[cell] {
                    Some(f) if rng.random_bool(FAVOURITE_RATE) => f,
                    _ => *pois_in_cell[cell].choose(&mut rng).unwrap(),
                };
                visits.push(Sample::entity(pois[poi].id.clone(), clock));
                clock += Duration::minutes(rng.random_range(2..20));
            }
            if let Some(&next) = path.get(step + 1) {
                let k = seg_between[&(cell, next)];
                passes.push(Sample::entity(segments[k].id.clone(), drive_clock));
                let secs = (seg_length[k] / (seg_speed[k] / 3.6)).round() as i64;
                clock += Duration::seconds(secs);
                drive_clock += Duration::seconds(secs);
            }
        }
        if !visits.is_empty() {
            checkins.push(Trajectory::new(pad("tp", t, spec.n_trajectories), Some(user.id.clone()), visits));
        }
        drives.push(Trajectory::new(pad("ts", t, spec.n_trajectories), Some(user.id.clone()), passes));
    }

    let mut entities = pois;
    entities.extend(segments);
    entities.extend(parcels);
    let all_ids: Vec<String> = entities.iter().map(|e| e.id.clone()).collect();

    // geographical network: POI kNN, segment line graph, parcel rook adjacency
    let mut geo = RelationNetwork::new(all_ids.clone(), RelationKind::Geographical);
    let poi_refs: Vec<&MapEntity> = entities.iter().filter(|e| e.kind == EntityKind::Poi).collect();
    let knn = build_geo_network(&poi_refs, Proximity::Nearest(KNN_POI.min(poi_refs.len().saturating_sub(1))));
    geo.edges.extend(knn.lift(&all_ids)?.edges);
    let seg_base = spec.n_pois;
    for i in 0..segs.len() {
        for j in 0..segs.len() {
            let (a, b) = (&segs[i], &segs[j]);
            if i != j && (a.a == b.a || a.a == b.b || a.b == b.a || a.b == b.b) {
                geo.edges.insert((seg_base + i, seg_base + j), 1.0);
            }
        }
    }
    let parcel_base = seg_base + segs.len();
    for s in &segs {
        geo.edges.insert((parcel_base + s.a, parcel_base + s.b), 1.0);
        geo.edges.insert((parcel_base + s.b, parcel_base + s.a), 1.0);
    }

    // social network: parcel-level OD flows of the check-in trajectories
    let parcel_trajs: Vec<Trajectory> = checkins
        .iter()
        .map(|t| {
            let samples = t
                .samples
                .iter()
                .map(|s| {
                    let poi: usize = s.entity_id().unwrap().trim_start_matches("poi_").parse().unwrap();
                    Sample::entity(parcel_ids[poi_cell[poi]].clone(), s.time)
                })
                .collect();
            Trajectory::new(t.id.clone(), t.user.clone(), samples)
        })
        .collect();
    let od = build_od_network(&parcel_trajs.iter().collect::<Vec<_>>(), &parcel_ids).lift(&all_ids)?;

    let mut trajectories = checkins;
    trajectories.extend(drives);
    let city = format!("synth{}", spec.seed);
    Ok(Dataset {
        meta: Metadata {
            source_crs: BTreeMap::new(),
            city,
            crs: DEFAULT_CRS.into(),
            entity_kind: EntityKind::Poi,
        },
        entities,
        trajectories,
        networks: vec![geo, od],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate::validate_dataset;

    fn small() -> SyntheticCitySpec {
        SyntheticCitySpec { grid_rows: 4, grid_cols: 4, n_pois: 40, n_users: 5, n_trajectories: 30, n_categories: 3, seed: 9 }
    }

    #[test]
    fn grid_counts() {
        let d = generate_synthetic_city(&small()).unwrap();
        assert_eq!(d.entities_of(EntityKind::Parcel).len(), 16);
        assert_eq!(d.entities_of(EntityKind::Segment).len(), 24);
        assert_eq!(d.entities_of(EntityKind::Poi).len(), 40);
        assert!(validate_dataset(&d).is_empty(), "{:?}", validate_dataset(&d));
    }

    #[test]
    fn single_category() {
        let d = generate_synthetic_city(&SyntheticCitySpec { n_categories: 1, ..small() }).unwrap();
        let cats: std::collections::BTreeSet<_> =
            d.entities_of(EntityKind::Poi).iter().map(|e| e.features["category"].to_string()).collect();
        assert_eq!(cats.len(), 1);
    }

    #[test]
    fn seeded() {
        assert_eq!(generate_synthetic_city(&small()).unwrap(), generate_synthetic_city(&small()).unwrap());
        assert_ne!(
            generate_synthetic_city(&small()).unwrap(),
            generate_synthetic_city(&SyntheticCitySpec { seed: 10, ..small() }).unwrap()
        );
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic_city(&SyntheticCitySpec { n_pois: 0, ..small() }).is_err());
        assert!(generate_synthetic_city(&SyntheticCitySpec { grid_rows: 1, grid_cols: 1, ..small() }).is_err());
        assert!(generate_synthetic_city(&SyntheticCitySpec { grid_rows: 200, grid_cols: 200, ..small() }).is_err());
        assert!(generate_synthetic_city(&SyntheticCitySpec { n_categories: 41, ..small() }).is_err());
    }
}
