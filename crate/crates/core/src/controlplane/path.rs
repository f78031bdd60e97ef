//! Relay route selection over active physical links.
//!
//! Routes minimize hop count, since every hop spends one pad of key
//! material. Equal-length routes are ranked by their bottleneck expected
//! key rate (higher first), then by the node id sequence.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::ControlError;
use crate::model::{NodeId, Topology};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConstraints {
    /// Every hop must hold at least this many available bits.
    #[serde(default)]
    pub min_available_bits: u64,
}

/// Undirected graph of usable hops with the best expected rate per node pair.
pub(crate) fn hop_graph<F>(
    topology: &Topology,
    constraints: &PathConstraints,
    available_bits: F,
) -> BTreeMap<NodeId, BTreeMap<NodeId, f64>>
where
    F: Fn(&str) -> u64,
{
    let mut adj: BTreeMap<NodeId, BTreeMap<NodeId, f64>> = BTreeMap::new();
    for link in topology.physical_links().filter(|l| l.is_active()) {
        if available_bits(&link.link_id) < constraints.min_available_bits {
            continue;
        }
        let rate = link.expected_rate_bps().unwrap_or(0.0);
        let (a, b) = (&link.endpoints.0, &link.endpoints.1);
        for (x, y) in [(a, b), (b, a)] {
            let slot = adj.entry(x.clone()).or_default().entry(y.clone()).or_insert(rate);
            if rate > *slot {
                *slot = rate;
            }
        }
    }
    adj
}

/// Best relay route from `src` to `dst`, or `None` when no route satisfies
/// the constraints. `available_bits` reports the usable key material of a
/// physical link.
pub fn compute_path<F>(
    topology: &Topology,
    src: &str,
    dst: &str,
    constraints: &PathConstraints,
    available_bits: F,
) -> Result<Option<Vec<NodeId>>, ControlError>
where
    F: Fn(&str) -> u64,
{
    for n in [src, dst] {
        if !topology.nodes.contains_key(n) {
            return Err(ControlError::UnknownNode(n.to_string()));
        }
    }
    if src == dst {
        return Err(ControlError::InvalidRequest(format!("path endpoints are both `{src}`")));
    }
    let adj = hop_graph(topology, constraints, available_bits);

    // Hop distance to the destination.
    let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([dst]);
    dist.insert(dst, 0);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        let d = dist[v];
        for w in adj.get(v).into_iter().flat_map(|m| m.keys()) {
            if !dist.contains_key(w.as_str()) {
                dist.insert(w, d + 1);
                queue.push_back(w);
            }
        }
    }
    if !dist.contains_key(src) {
        return Ok(None);
    }

    // Widest bottleneck to the destination along shortest routes only.
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    best.insert(dst, f64::INFINITY);
    for v in order.iter().skip(1) {
        let d = dist[v];
        let width = adj[*v]
            .iter()
            .filter(|(w, _)| dist.get(w.as_str()) == Some(&(d - 1)))
            .map(|(w, rate)| rate.min(best[w.as_str()]))
            .fold(f64::NEG_INFINITY, f64::max);
        best.insert(v, width);
    }

    // Walk forward taking the smallest node id that keeps the optimum.
    let target = best[src];
    let mut path = vec![src.to_string()];
    let mut here = src;
    while here != dst {
        let d = dist[here];
        // adjacency maps are ordered, so the first match is the smallest id
        let next = adj[here]
            .iter()
            .find(|(w, rate)| {
                dist.get(w.as_str()) == Some(&(d - 1)) && rate.min(best[w.as_str()]) >= target
            })
            .map(|(w, _)| w.as_str())
            .expect("a widest shortest route exists");
        path.push(next.to_string());
        here = next;
    }
    Ok(Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FiberSpec, Link, LinkStatus, NodeDescriptor};
    use crate::RateProfile;

    fn topo(nodes: &[&str], links: &[(&str, &str, f64)]) -> Topology {
        let mut t = Topology::new();
        for n in nodes {
            t.insert_node(NodeDescriptor::new(*n, *n));
        }
        for (a, b, km) in links {
            t.insert_link(
                Link::physical(format!("{a}-{b}"), *a, *b, FiberSpec::new(*km, vec![]), RateProfile::default())
                    .with_status(LinkStatus::Active),
            );
        }
        t
    }

    #[test]
    fn madrid_route_goes_through_almagro() {
        let t = topo(
            &["almagro", "norte", "concepcion"],
            &[("almagro", "norte", 30.0), ("almagro", "concepcion", 55.0)],
        );
        let p = compute_path(&t, "norte", "concepcion", &PathConstraints::default(), |_| 0).unwrap();
        assert_eq!(p.unwrap(), vec!["norte", "almagro", "concepcion"]);
    }

    #[test]
    fn isolated_source_has_no_route() {
        let t = topo(&["a", "b", "c"], &[("b", "c", 1.0)]);
        assert_eq!(compute_path(&t, "a", "c", &PathConstraints::default(), |_| 0).unwrap(), None);
    }

    #[test]
    fn diamond_prefers_higher_bottleneck() {
        // s-a-t has a 40 km hop, s-b-t only 10 km hops
        let t = topo(
            &["s", "a", "b", "t"],
            &[("s", "a", 40.0), ("a", "t", 1.0), ("s", "b", 10.0), ("b", "t", 10.0)],
        );
        let p = compute_path(&t, "s", "t", &PathConstraints::default(), |_| 0).unwrap();
        assert_eq!(p.unwrap(), vec!["s", "b", "t"]);
    }

    #[test]
    fn equal_routes_break_ties_lexicographically() {
        let t = topo(
            &["s", "a", "b", "t"],
            &[("s", "b", 5.0), ("b", "t", 5.0), ("s", "a", 5.0), ("a", "t", 5.0)],
        );
        let p = compute_path(&t, "s", "t", &PathConstraints::default(), |_| 0).unwrap();
        assert_eq!(p.unwrap(), vec!["s", "a", "t"]);
    }

    #[test]
    fn availability_constraint_prunes_hops() {
        let t = topo(&["s", "a", "b", "t"], &[("s", "a", 1.0), ("a", "t", 1.0), ("s", "b", 1.0), ("b", "t", 1.0)]);
        let c = PathConstraints { min_available_bits: 100 };
        let p = compute_path(&t, "s", "t", &c, |l| if l == "s-a" { 0 } else { 1000 }).unwrap();
        assert_eq!(p.unwrap(), vec!["s", "b", "t"]);
        assert_eq!(compute_path(&t, "s", "t", &c, |_| 0).unwrap(), None);
    }

    #[test]
    fn bad_endpoints() {
        let t = topo(&["a"], &[]);
        assert!(matches!(compute_path(&t, "a", "a", &PathConstraints::default(), |_| 0), Err(ControlError::InvalidRequest(_))));
        assert!(matches!(compute_path(&t, "a", "z", &PathConstraints::default(), |_| 0), Err(ControlError::UnknownNode(_))));
    }
}
