use std::collections::{HashSet, VecDeque};

use rand::Rng;

use crate::data::RelationNetwork;
use crate::encoders::EncodedTraj;

const MIN_SPAN: usize = 2;
const MAX_SPAN: usize = 4;

/// Shortest path from `from` to `to` along out-edges that avoids `banned`,
/// expanding neighbours in ascending order.
pub fn shortest_path(adj: &[Vec<usize>], from: usize, to: usize, banned: &HashSet<usize>) -> Option<Vec<usize>> {
    let mut prev = vec![usize::MAX; adj.len()];
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(v) = queue.pop_front() {
        if v == to {
            let mut path = vec![to];
            let mut cur = to;
            while cur != from {
                cur = prev[cur];
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for &n in &adj[v] {
            if !seen[n] && !banned.contains(&n) {
                seen[n] = true;
                prev[n] = v;
                queue.push_back(n);
            }
        }
    }
    None
}

fn sorted_out(net: &RelationNetwork) -> Vec<Vec<usize>> {
    let mut adj = net.out_neighbors();
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    adj
}

/// Every span `(i, j)` of 2 to 4 hops whose interior can be bypassed, with
/// its replacement path (endpoints included).
pub fn detour_candidates(entities: &[usize], net: &RelationNetwork) -> Vec<(usize, usize, Vec<usize>)> {
    let adj = sorted_out(net);
    let mut out = Vec::new();
    for i in 0..entities.len() {
        for hops in MIN_SPAN..=MAX_SPAN {
            let j = i + hops;
            if j >= entities.len() {
                break;
            }
            let (a, b) = (entities[i], entities[j]);
            if a == b || a >= adj.len() || b >= adj.len() {
                continue;
            }
            let banned: HashSet<usize> = entities[i + 1..j].iter().copied().filter(|&v| v != a && v != b).collect();
            if let Some(path) = shortest_path(&adj, a, b, &banned) {
                if path.len() > 2 {
                    out.push((i, j, path));
                }
            }
        }
    }
    out
}

/// Replaces a uniformly chosen bypassable span with its shortest detour.
/// `None` when no span admits one.
pub fn generate_detour<R: Rng + ?Sized>(traj: &EncodedTraj, net: &RelationNetwork, rng: &mut R) -> Option<EncodedTraj> {
    let cands = detour_candidates(&traj.entities, net);
    if cands.is_empty() {
        return None;
    }
    let (i, j, path) = &cands[rng.random_range(0..cands.len())];
    let mut out = EncodedTraj { id: traj.id.clone(), user: traj.user.clone(), entities: vec![], slots: vec![], times: vec![] };
    for k in 0..*i {
        out.entities.push(traj.entities[k]);
        out.slots.push(traj.slots[k]);
        out.times.push(traj.times[k]);
    }
    for &v in &path[..path.len() - 1] {
        out.entities.push(v);
        out.slots.push(traj.slots[*i]);
        out.times.push(traj.times[*i]);
    }
    for k in *j..traj.len() {
        out.entities.push(traj.entities[k]);
        out.slots.push(traj.slots[k]);
        out.times.push(traj.times[k]);
    }
    Some(out)
}
