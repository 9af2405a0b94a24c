//! Fat-tree topology with a canonical link ordering.
//!
//! The link order is the action space of the load balancer: core–aggregation
//! links sorted by (core, agg), then aggregation–edge by (agg, edge), then
//! edge–host by (edge, host).

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tier {
    Core,
    Agg,
    Edge,
    Host,
}

impl Tier {
    fn prefix(self) -> &'static str {
        match self {
            Tier::Core => "core",
            Tier::Agg => "agg",
            Tier::Edge => "edge",
            Tier::Host => "host",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub tier: Tier,
    /// Index within the tier (`agg2` has index 2).
    pub index: usize,
}

impl Node {
    pub fn name(&self) -> String {
        format!("{}{}", self.tier.prefix(), self.index)
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.tier.prefix(), self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TierPair {
    CoreAgg,
    AggEdge,
    EdgeHost,
}

impl TierPair {
    pub fn label(self) -> &'static str {
        match self {
            TierPair::CoreAgg => "core-agg",
            TierPair::AggEdge => "agg-edge",
            TierPair::EdgeHost => "edge-host",
        }
    }
}

/// Undirected link; `src` is always the upper-tier endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub index: usize,
    pub src: Node,
    pub dst: Node,
    pub tier_pair: TierPair,
    /// Kbps (simulator units).
    pub capacity: f64,
    /// Milliseconds.
    pub base_latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FatTreeConfig {
    pub n_core: usize,
    pub n_agg: usize,
    pub n_edge: usize,
    pub hosts_per_edge: usize,
    /// Capacity of core–agg and agg–edge links.
    pub upper_capacity: f64,
    /// Capacity of edge–host links.
    pub host_capacity: f64,
    pub base_latency_ms: f64,
}

impl Default for FatTreeConfig {
    fn default() -> Self {
        Self {
            n_core: 2,
            n_agg: 4,
            n_edge: 8,
            hosts_per_edge: 2,
            upper_capacity: 10_000.0,
            host_capacity: 5_000.0,
            base_latency_ms: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FatTreeTopology {
    nodes: Vec<Node>,
    links: Vec<Link>,
}

pub fn build_fat_tree(cfg: &FatTreeConfig) -> Result<FatTreeTopology> {
    if cfg.n_core == 0 || cfg.n_agg == 0 || cfg.n_edge == 0 {
        return Err(Error::Config("fat-tree tiers must be non-empty".into()));
    }
    if cfg.n_agg % 2 != 0 {
        return Err(Error::Config(format!(
            "n_agg = {} must be even (two aggregation switches per pod)",
            cfg.n_agg
        )));
    }
    let pods = cfg.n_agg / 2;
    if cfg.n_edge % pods != 0 {
        return Err(Error::Config(format!(
            "n_edge = {} must be divisible by the number of pods ({pods})",
            cfg.n_edge
        )));
    }
    if !(cfg.upper_capacity > 0.0 && cfg.host_capacity > 0.0 && cfg.base_latency_ms > 0.0) {
        return Err(Error::Config("capacities and latency must be positive".into()));
    }
    let edges_per_pod = cfg.n_edge / pods;
    let node = |tier, index| Node { tier, index };

    let mut nodes = Vec::new();
    for (tier, n) in [
        (Tier::Core, cfg.n_core),
        (Tier::Agg, cfg.n_agg),
        (Tier::Edge, cfg.n_edge),
        (Tier::Host, cfg.n_edge * cfg.hosts_per_edge),
    ] {
        nodes.extend((0..n).map(|i| node(tier, i)));
    }

    let mut links = Vec::new();
    let mut link = |src: Node, dst: Node, pair, capacity| {
        links.push(Link {
            index: 0,
            src,
            dst,
            tier_pair: pair,
            capacity,
            base_latency: cfg.base_latency_ms,
        })
    };
    for c in 0..cfg.n_core {
        for a in 0..cfg.n_agg {
            link(node(Tier::Core, c), node(Tier::Agg, a), TierPair::CoreAgg, cfg.upper_capacity);
        }
    }
    for a in 0..cfg.n_agg {
        let pod = a / 2;
        for e in pod * edges_per_pod..(pod + 1) * edges_per_pod {
            link(node(Tier::Agg, a), node(Tier::Edge, e), TierPair::AggEdge, cfg.upper_capacity);
        }
    }
    for e in 0..cfg.n_edge {
        for j in 0..cfg.hosts_per_edge {
            let h = e * cfg.hosts_per_edge + j;
            link(node(Tier::Edge, e), node(Tier::Host, h), TierPair::EdgeHost, cfg.host_capacity);
        }
    }
    Ok(FatTreeTopology::from_parts(nodes, links))
}

impl FatTreeTopology {
    /// Canonicalizes arbitrary node/link input order into the documented order.
    pub fn from_parts(mut nodes: Vec<Node>, mut links: Vec<Link>) -> Self {
        nodes.sort_by_key(|n| (n.tier, n.index));
        links.sort_by(|a, b| {
            (a.tier_pair, a.src.index, a.dst.index).cmp(&(b.tier_pair, b.src.index, b.dst.index))
        });
        for (i, l) in links.iter_mut().enumerate() {
            l.index = i;
        }
        Self { nodes, links }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Links in action order; `links()[i].index == i`.
    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn count(&self, tier: Tier) -> usize {
        self.nodes.iter().filter(|n| n.tier == tier).count()
    }

    pub fn degree(&self, n: &Node) -> usize {
        self.links.iter().filter(|l| &l.src == n || &l.dst == n).count()
    }

    pub fn capacities(&self) -> Vec<f64> {
        self.links.iter().map(|l| l.capacity).collect()
    }

    fn node_id(&self, n: &Node) -> usize {
        self.nodes.iter().position(|m| m == n).expect("link endpoint not in node list")
    }

    /// True when every node reaches every other node.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for l in &self.links {
            let (a, b) = (self.node_id(&l.src), self.node_id(&l.dst));
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// CSV: `link_index,src,dst,tier_pair,capacity,base_latency`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["link_index", "src", "dst", "tier_pair", "capacity", "base_latency"])?;
        for l in &self.links {
            out.write_record([
                l.index.to_string(),
                l.src.name(),
                l.dst.name(),
                l.tier_pair.label().to_string(),
                l.capacity.to_string(),
                l.base_latency.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<topology csv>", e))?;
        Ok(())
    }
}

/// The canonical action ordering.
pub fn link_order(topology: &FatTreeTopology) -> &[Link] {
    topology.links()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_topo() -> FatTreeTopology {
        build_fat_tree(&FatTreeConfig::default()).unwrap()
    }

    #[test]
    fn default_counts() {
        let t = default_topo();
        assert_eq!(t.num_links(), 40);
        assert_eq!(t.nodes().len(), 30);
        assert_eq!(
            [Tier::Core, Tier::Agg, Tier::Edge, Tier::Host].map(|x| t.count(x)),
            [2, 4, 8, 16]
        );
        let by_pair = |p| t.links().iter().filter(|l| l.tier_pair == p).count();
        assert_eq!(by_pair(TierPair::CoreAgg), 8);
        assert_eq!(by_pair(TierPair::AggEdge), 16);
        assert_eq!(by_pair(TierPair::EdgeHost), 16);
    }

    #[test]
    fn degrees_per_tier() {
        let t = default_topo();
        for n in t.nodes() {
            let expected = match n.tier {
                Tier::Core => 4,
                Tier::Agg => 2 + 4,
                Tier::Edge => 2 + 2,
                Tier::Host => 1,
            };
            assert_eq!(t.degree(n), expected, "{n}");
        }
    }

    #[test]
    fn every_core_reaches_every_agg_and_graph_is_connected() {
        let t = default_topo();
        for c in 0..2 {
            for a in 0..4 {
                assert!(t.links().iter().any(|l| l.src == Node { tier: Tier::Core, index: c }
                    && l.dst == Node { tier: Tier::Agg, index: a }));
            }
        }
        assert!(t.is_connected());
    }

    #[test]
    fn order_endpoints_and_dense_indices() {
        let t = default_topo();
        let first = &link_order(&t)[0];
        assert_eq!((first.src.name(), first.dst.name()), ("core0".into(), "agg0".into()));
        let last = link_order(&t).last().unwrap();
        assert_eq!((last.src.name(), last.dst.name()), ("edge7".into(), "host15".into()));
        for (i, l) in t.links().iter().enumerate() {
            assert_eq!(l.index, i);
        }
        assert_eq!(default_topo(), t);
    }

    #[test]
    fn permuted_construction_input_is_canonicalized() {
        let t = default_topo();
        let mut nodes = t.nodes().to_vec();
        let mut links = t.links().to_vec();
        nodes.reverse();
        links.reverse();
        links.rotate_left(7);
        assert_eq!(FatTreeTopology::from_parts(nodes, links), t);
    }

    #[test]
    fn divisibility_errors() {
        let odd = FatTreeConfig { n_agg: 3, ..Default::default() };
        assert!(matches!(build_fat_tree(&odd), Err(Error::Config(_))));
        let uneven = FatTreeConfig { n_edge: 7, ..Default::default() };
        assert!(matches!(build_fat_tree(&uneven), Err(Error::Config(_))));
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let mut buf = Vec::new();
        default_topo().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "link_index,src,dst,tier_pair,capacity,base_latency");
        assert_eq!(lines.next().unwrap(), "0,core0,agg0,core-agg,10000,1");
        assert_eq!(text.lines().count(), 41);
    }
}
