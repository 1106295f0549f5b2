//! Directed connectivity of a single KirchhoffNet layer.
//!
//! Nodes are indexed `0..num_nodes` and never include the ground node,
//! which is implicit. Every learnable edge `(src, dst)` carries one device
//! whose current flows from `src` to `dst`; `ground_edges` lists nodes with
//! an additional learnable device towards ground. Duplicate edges are legal
//! and model parallel devices between the same pair of nodes.
//!
//! Builders:
//! - [`fc_topo`]: every ordered pair of distinct nodes.
//! - [`ne_topo`]: a `k x k` window slides over a `c x w x h` grid with
//!   stride 1 and fully connects the nodes it covers at each position.
//! - [`proj_topo`]: an NE layer plus projected nodes that connect to every
//!   grid node in both directions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub ground_edges: Vec<usize>,
}

/// First invariant violation found by [`Topology::validate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Violation {
    IndexOutOfRange {
        edge: usize,
        node: usize,
        num_nodes: usize,
    },
    SelfLoop {
        edge: usize,
        node: usize,
    },
    GroundIndexOutOfRange {
        ground_edge: usize,
        node: usize,
        num_nodes: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::IndexOutOfRange {
                edge,
                node,
                num_nodes,
            } => write!(f, "edge {edge} references node {node} but only {num_nodes} nodes exist"),
            Violation::SelfLoop { edge, node } => write!(f, "edge {edge} is a self-loop on node {node}"),
            Violation::GroundIndexOutOfRange {
                ground_edge,
                node,
                num_nodes,
            } => write!(
                f,
                "ground edge {ground_edge} references node {node} but only {num_nodes} nodes exist"
            ),
        }
    }
}

impl Topology {
    /// Build a topology and reject it if any invariant is violated.
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, ground_edges: Vec<usize>) -> Result<Self> {
        let topo = Topology {
            num_nodes,
            edges,
            ground_edges,
        };
        topo.check()?;
        Ok(topo)
    }

    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let n = self.num_nodes;
        for (idx, &(s, d)) in self.edges.iter().enumerate() {
            for node in [s, d] {
                if node >= n {
                    return Err(Violation::IndexOutOfRange {
                        edge: idx,
                        node,
                        num_nodes: n,
                    });
                }
            }
            if s == d {
                return Err(Violation::SelfLoop { edge: idx, node: s });
            }
        }
        for (idx, &node) in self.ground_edges.iter().enumerate() {
            if node >= n {
                return Err(Violation::GroundIndexOutOfRange {
                    ground_edge: idx,
                    node,
                    num_nodes: n,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn check(&self) -> Result<()> {
        self.validate()
            .map_err(|v| Error::invalid(format!("invalid topology: {v}")))
    }

    /// Number of learnable devices: internal edges plus ground edges.
    pub fn num_devices(&self) -> usize {
        self.edges.len() + self.ground_edges.len()
    }

    /// Append `repeat` ground edges on every node.
    pub fn with_ground_edges(mut self, repeat: usize) -> Self {
        for node in 0..self.num_nodes {
            self.ground_edges.extend(std::iter::repeat_n(node, repeat));
        }
        self
    }

    /// Number of devices touching each node (internal edges count for both
    /// endpoints, ground edges for their node).
    pub fn incidence(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(s, d) in &self.edges {
            deg[s] += 1;
            deg[d] += 1;
        }
        for &j in &self.ground_edges {
            deg[j] += 1;
        }
        deg
    }

    /// Serialize to the line-oriented text format (`nodes`, `edge`, `gedge`).
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 + 16 * self.edges.len());
        out.push_str(&format!("nodes {}\n", self.num_nodes));
        for &(s, d) in &self.edges {
            out.push_str(&format!("edge {s} {d}\n"));
        }
        for &j in &self.ground_edges {
            out.push_str(&format!("gedge {j}\n"));
        }
        out
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut num_nodes = None;
        let mut edges = Vec::new();
        let mut ground_edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let loc = || format!("line {}", lineno + 1);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let tag = fields.next().unwrap_or_default();
            let nums = fields
                .map(|f| f.parse::<usize>().map_err(|e| Error::parse(loc(), format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            match (tag, nums.as_slice()) {
                ("nodes", [n]) if num_nodes.is_none() && lineno == 0 => num_nodes = Some(*n),
                ("edge", [s, d]) if num_nodes.is_some() && ground_edges.is_empty() => edges.push((*s, *d)),
                ("gedge", [j]) if num_nodes.is_some() => ground_edges.push(*j),
                _ => return Err(Error::parse(loc(), format!("unexpected record {line:?}"))),
            }
        }
        let num_nodes = num_nodes.ok_or_else(|| Error::parse("line 1", "missing `nodes` header"))?;
        Topology::new(num_nodes, edges, ground_edges)
    }
}

/// All ordered pairs `(i, j)`, `i != j`, each repeated `repeat` times.
pub fn fc_topo(num_node: usize, repeat: usize) -> Result<Topology> {
    if num_node == 0 || repeat == 0 {
        return Err(Error::invalid("fc_topo requires num_node >= 1 and repeat >= 1"));
    }
    let mut edges = Vec::with_capacity(num_node * (num_node - 1) * repeat);
    for i in 0..num_node {
        for j in 0..num_node {
            if i != j {
                edges.extend(std::iter::repeat_n((i, j), repeat));
            }
        }
    }
    Ok(Topology {
        num_nodes: num_node,
        edges,
        ground_edges: Vec::new(),
    })
}

/// Neighbor-emphasizing connectivity over a `c x w x h` grid.
///
/// Node `(ch, x, y)` has index `ch*w*h + x*h + y`. Window positions are
/// visited row-major; inside a window, covered nodes are listed channel by
/// channel, then by kernel row and column, and every ordered pair of
/// distinct covered nodes becomes `repeat` edges.
pub fn ne_topo(c: usize, w: usize, h: usize, k: usize, repeat: usize) -> Result<Topology> {
    if c == 0 || w == 0 || h == 0 || repeat == 0 {
        return Err(Error::invalid("ne_topo requires c, w, h, repeat >= 1"));
    }
    if k == 0 || k > w.min(h) {
        return Err(Error::invalid(format!(
            "ne_topo kernel {k} must lie in 1..={}",
            w.min(h)
        )));
    }
    let window = c * k * k;
    let positions = (w - k + 1) * (h - k + 1);
    let mut edges = Vec::with_capacity(positions * window * (window - 1) * repeat);
    let mut covered = Vec::with_capacity(window);
    for x0 in 0..=(w - k) {
        for y0 in 0..=(h - k) {
            covered.clear();
            for ch in 0..c {
                for dx in 0..k {
                    for dy in 0..k {
                        covered.push(ch * w * h + (x0 + dx) * h + (y0 + dy));
                    }
                }
            }
            for (a, &src) in covered.iter().enumerate() {
                for (b, &dst) in covered.iter().enumerate() {
                    if a != b {
                        edges.extend(std::iter::repeat_n((src, dst), repeat));
                    }
                }
            }
        }
    }
    Ok(Topology {
        num_nodes: c * w * h,
        edges,
        ground_edges: Vec::new(),
    })
}

/// NE connectivity plus `n_proj` projected nodes (indices `c*w*h..`), each
/// joined to every grid node in both directions `repeat_proj` times.
/// Projected nodes are not connected to each other.
pub fn proj_topo(
    c: usize,
    w: usize,
    h: usize,
    k: usize,
    n_proj: usize,
    repeat_ne: usize,
    repeat_proj: usize,
) -> Result<Topology> {
    if n_proj == 0 || repeat_proj == 0 {
        return Err(Error::invalid("proj_topo requires n_proj >= 1 and repeat_proj >= 1"));
    }
    let mut topo = ne_topo(c, w, h, k, repeat_ne)?;
    let grid = topo.num_nodes;
    topo.edges.reserve(2 * n_proj * grid * repeat_proj);
    for p in grid..grid + n_proj {
        for j in 0..grid {
            for _ in 0..repeat_proj {
                topo.edges.push((p, j));
                topo.edges.push((j, p));
            }
        }
    }
    topo.num_nodes = grid + n_proj;
    Ok(topo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn multiset(edges: &[(usize, usize)]) -> BTreeMap<(usize, usize), usize> {
        let mut m = BTreeMap::new();
        for &e in edges {
            *m.entry(e).or_insert(0) += 1;
        }
        m
    }

    /// Brute force: connect two nodes once per window position that covers
    /// both of them.
    fn ne_brute(c: usize, w: usize, h: usize, k: usize, r: usize) -> BTreeMap<(usize, usize), usize> {
        let n = c * w * h;
        let pos = |i: usize| ((i % (w * h)) / h, i % h);
        let mut m = BTreeMap::new();
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let ((xa, ya), (xb, yb)) = (pos(a), pos(b));
                let mut count = 0;
                for x0 in 0..=(w - k) {
                    for y0 in 0..=(h - k) {
                        let inside = |x: usize, y: usize| x >= x0 && x < x0 + k && y >= y0 && y < y0 + k;
                        if inside(xa, ya) && inside(xb, yb) {
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    m.insert((a, b), count * r);
                }
            }
        }
        m
    }

    #[test]
    fn fc_examples() {
        assert_eq!(fc_topo(2, 1).unwrap().edges, vec![(0, 1), (1, 0)]);
        assert!(fc_topo(1, 1).unwrap().edges.is_empty());
        let t = fc_topo(3, 2).unwrap();
        assert_eq!(t.edges.len(), 12);
        assert!(multiset(&t.edges).values().all(|&c| c == 2));
        assert_eq!(multiset(&t.edges).len(), 6);
        assert!(fc_topo(0, 1).is_err());
        assert!(fc_topo(3, 0).is_err());
    }

    #[test]
    fn ne_examples() {
        assert_eq!(ne_topo(1, 3, 3, 2, 1).unwrap().edges.len(), 48);
        assert_eq!(ne_topo(1, 3, 3, 1, 1).unwrap().edges.len(), 0);
        assert_eq!(ne_topo(1, 3, 3, 3, 1).unwrap().edges.len(), 72);
        assert!(ne_topo(1, 3, 3, 4, 1).is_err());
    }

    #[test]
    fn ne_two_by_two_kernel_matches_grid_adjacency() {
        // 3x3 grid, k = 2: nodes 1 and 4 share two windows, the corner 0
        // lies in one window only, opposite corners 0 and 8 share none.
        let m = multiset(&ne_topo(1, 3, 3, 2, 1).unwrap().edges);
        assert_eq!(m.get(&(1, 4)), Some(&2));
        assert_eq!(m.get(&(0, 1)), Some(&1));
        assert_eq!(m.get(&(4, 0)), Some(&1));
        assert_eq!(m.get(&(0, 8)), None);
        assert_eq!(m.get(&(8, 0)), None);
    }

    #[test]
    fn proj_examples() {
        let t = proj_topo(1, 2, 2, 2, 1, 1, 1).unwrap();
        assert_eq!((t.edges.len(), t.num_nodes), (20, 5));
        let t = proj_topo(1, 3, 3, 1, 2, 1, 1).unwrap();
        assert_eq!(t.edges.len(), 36);
        assert!(t.edges.iter().all(|&(s, d)| (s >= 9) != (d >= 9)));
        assert_eq!(proj_topo(1, 2, 2, 2, 1, 1, 3).unwrap().edges.len(), 36);
        assert!(proj_topo(1, 2, 2, 2, 0, 1, 1).is_err());
    }

    #[test]
    fn validate_examples() {
        assert_eq!(fc_topo(3, 1).unwrap().validate(), Ok(()));
        let t = Topology {
            num_nodes: 1,
            edges: vec![(0, 0)],
            ground_edges: vec![],
        };
        assert_eq!(t.validate(), Err(Violation::SelfLoop { edge: 0, node: 0 }));
        let t = Topology {
            num_nodes: 3,
            edges: vec![(0, 5)],
            ground_edges: vec![],
        };
        assert_eq!(
            t.validate(),
            Err(Violation::IndexOutOfRange {
                edge: 0,
                node: 5,
                num_nodes: 3
            })
        );
        let t = Topology {
            num_nodes: 2,
            edges: vec![],
            ground_edges: vec![2],
        };
        assert!(matches!(t.validate(), Err(Violation::GroundIndexOutOfRange { .. })));
    }

    #[test]
    fn text_format() {
        let t = fc_topo(2, 1).unwrap().with_ground_edges(1);
        let text = t.to_text();
        assert_eq!(text, "nodes 2\nedge 0 1\nedge 1 0\ngedge 0\ngedge 1\n");
        assert_eq!(text.parse::<Topology>().unwrap(), t);
        assert!("edge 0 1\n".parse::<Topology>().is_err());
        assert!("nodes 2\nedge 0 7\n".parse::<Topology>().is_err());
        assert!("nodes 2\nedge 0 x\n".parse::<Topology>().is_err());
    }

    proptest! {
        #[test]
        fn fc_edge_count(n in 1usize..=50, r in 1usize..=4) {
            prop_assert_eq!(fc_topo(n, r).unwrap().edges.len(), n * (n - 1) * r);
        }

        #[test]
        fn ne_matches_brute_force(c in 1usize..=2, w in 1usize..=6, h in 1usize..=6, k in 1usize..=6, r in 1usize..=2) {
            prop_assume!(k <= w.min(h));
            let t = ne_topo(c, w, h, k, r).unwrap();
            let window = c * k * k;
            prop_assert_eq!(t.edges.len(), (w - k + 1) * (h - k + 1) * window * (window - 1) * r);
            prop_assert_eq!(multiset(&t.edges), ne_brute(c, w, h, k, r));
            prop_assert_eq!(t.validate(), Ok(()));
            // deterministic ordering
            prop_assert_eq!(t, ne_topo(c, w, h, k, r).unwrap());
        }

        #[test]
        fn ne_full_kernel_is_fc(s in 1usize..=4, r in 1usize..=3) {
            let ne = ne_topo(1, s, s, s, r).unwrap();
            let fc = fc_topo(s * s, r).unwrap();
            prop_assert_eq!(multiset(&ne.edges), multiset(&fc.edges));
        }
    }
}
