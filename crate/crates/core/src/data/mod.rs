//! Atomic-file data model: map entities, trajectories and relation networks.

mod atomic;
mod convert;
mod model;
mod network;
mod preprocess;
mod split;
mod synth;
mod validate;

pub use atomic::{
    format_time, geometry_json, load_dataset, load_geo, load_rel, load_traj, parse_time, save_dataset, save_geo,
    save_rel, save_traj, DatasetPaths,
};
pub use convert::{convert_standard, parse_geojson, parse_standard, parse_traj_csv, ConvertOptions, GeoJsonLayer};
pub use model::*;
pub use network::{build_geo_network, build_od_network, haversine, Proximity, EARTH_RADIUS_M};
pub use preprocess::*;
pub use split::{split_dataset, split_sizes, Split, DEFAULT_RATIOS};
pub use synth::{generate_synthetic_city, SyntheticCitySpec, LABEL_FEATURES};
pub use validate::{feature_schema, validate_dataset, Violation, ViolationKind};
