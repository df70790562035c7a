//! Length and user-count filtering of trajectories.

use std::collections::HashMap;

use super::model::{TrajVariant, Trajectory};
use crate::error::{Error, Result};

fn require_variant(trajs: &[Trajectory], want: TrajVariant) -> Result<()> {
    match trajs.iter().find(|t| t.variant().is_some_and(|v| v != want)) {
        Some(t) => Err(Error::usage(format!("trajectory `{}` is not a {want:?} trajectory", t.id))),
        None => Ok(()),
    }
}

/// Check-in filtering: drop short trajectories, then users with too few
/// remaining trajectories, then truncate long ones to their first samples.
pub fn preprocess_checkin(
    trajs: &[Trajectory],
    min_len: usize,
    min_user_trajs: usize,
    max_len: usize,
) -> Result<Vec<Trajectory>> {
    require_variant(trajs, TrajVariant::Checkin)?;
    let long_enough: Vec<&Trajectory> = trajs.iter().filter(|t| t.len() >= min_len).collect();
    let mut per_user: HashMap<Option<&str>, usize> = HashMap::new();
    for t in &long_enough {
        *per_user.entry(t.user.as_deref()).or_default() += 1;
    }
    Ok(long_enough
        .into_iter()
        .filter(|t| per_user[&t.user.as_deref()] >= min_user_trajs)
        .map(|t| truncate(t, max_len))
        .collect())
}

pub fn preprocess_coordinate(trajs: &[Trajectory], min_len: usize, max_len: usize) -> Result<Vec<Trajectory>> {
    require_variant(trajs, TrajVariant::Coordinate)?;
    Ok(trajs.iter().filter(|t| t.len() >= min_len).map(|t| truncate(t, max_len)).collect())
}

fn truncate(t: &Trajectory, max_len: usize) -> Trajectory {
    let mut t = t.clone();
    t.samples.truncate(max_len);
    t
}

pub const CHECKIN_MIN_LEN: usize = 3;
pub const CHECKIN_MIN_USER_TRAJS: usize = 3;
pub const CHECKIN_MAX_LEN: usize = 32;
pub const COORD_MIN_LEN: usize = 10;
pub const COORD_MAX_LEN: usize = 128;
