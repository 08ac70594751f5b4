//! Computation graphs of depth units, effective depth, boundary fractions.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Family, NormPlacement};
use crate::error::{domain, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Plain,
    ResidualAdd,
    Stem,
    Head,
    BranchInterior,
}

impl NodeKind {
    pub fn depth_weight(self) -> u32 {
        match self {
            NodeKind::BranchInterior => 0,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Plain => "plain",
            NodeKind::ResidualAdd => "residual_add",
            NodeKind::Stem => "stem",
            NodeKind::Head => "head",
            NodeKind::BranchInterior => "branch_interior",
        }
    }
}

impl FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "plain" => NodeKind::Plain,
            "residual_add" => NodeKind::ResidualAdd,
            "stem" => NodeKind::Stem,
            "head" => NodeKind::Head,
            "branch_interior" => NodeKind::BranchInterior,
            _ => return Err(format!("unknown node kind `{s}`")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthNode {
    pub id: u64,
    pub kind: NodeKind,
}

impl DepthNode {
    pub fn depth_weight(&self) -> u32 {
        self.kind.depth_weight()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ComputationGraph {
    pub nodes: Vec<DepthNode>,
    pub edges: Vec<(u64, u64)>,
    pub input_id: u64,
    pub output_id: u64,
}

fn structural<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Structural(msg.into()))
}

impl ComputationGraph {
    /// Chain of `kinds`, ids `0..n`.
    pub fn chain(kinds: &[NodeKind]) -> Self {
        let mut g = ComputationGraph::default();
        for (i, &k) in kinds.iter().enumerate() {
            g.nodes.push(DepthNode {
                id: i as u64,
                kind: k,
            });
            if i > 0 {
                g.edges.push((i as u64 - 1, i as u64));
            }
        }
        g.output_id = kinds.len().saturating_sub(1) as u64;
        g
    }

    pub fn next_id(&self) -> u64 {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0)
    }

    pub fn add_node(&mut self, kind: NodeKind) -> u64 {
        let id = self.next_id();
        self.nodes.push(DepthNode { id, kind });
        id
    }

    /// Appends a residual block after the current output: interior nodes on the
    /// branch, then the addition node, which becomes the new output.
    pub fn push_residual(&mut self, interior: usize) -> u64 {
        let src = self.output_id;
        let mut prev = src;
        for _ in 0..interior {
            let n = self.add_node(NodeKind::BranchInterior);
            self.edges.push((prev, n));
            prev = n;
        }
        let add = self.add_node(NodeKind::ResidualAdd);
        self.edges.push((src, add));
        self.edges.push((prev, add));
        self.output_id = add;
        add
    }

    pub fn push(&mut self, kind: NodeKind) -> u64 {
        let src = self.output_id;
        let n = self.add_node(kind);
        self.edges.push((src, n));
        self.output_id = n;
        n
    }

    fn index(&self) -> Result<HashMap<u64, usize>> {
        let mut idx = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if idx.insert(n.id, i).is_some() {
                return structural(format!("duplicate node id {}", n.id));
            }
        }
        Ok(idx)
    }

    /// Checks every invariant and returns a topological order of node indices.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let idx = self.index()?;
        let n = self.nodes.len();
        let at = |id: u64| {
            idx.get(&id)
                .copied()
                .ok_or_else(|| Error::Structural(format!("unknown node id {id}")))
        };
        let src = at(self.input_id)?;
        let dst = at(self.output_id)?;
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            let (a, b) = (at(a)?, at(b)?);
            indeg[b] += 1;
            succ[a].push(b);
            pred[b].push(a);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let want = match (i == src, node.kind) {
                (true, _) => Some(0),
                (false, NodeKind::ResidualAdd) => Some(2),
                (false, NodeKind::Plain) => Some(1),
                _ => None,
            };
            match want {
                Some(w) if indeg[i] != w => {
                    return structural(format!(
                        "node {} ({}) has {} in-edges, expected {w}",
                        node.id,
                        node.kind.as_str(),
                        indeg[i]
                    ))
                }
                None if indeg[i] == 0 => {
                    return structural(format!("node {} has no in-edges", node.id))
                }
                _ => {}
            }
        }
        // Kahn
        let mut deg = indeg.clone();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| deg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &succ[u] {
                deg[v] -= 1;
                if deg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        if order.len() != n {
            return structural("graph contains a cycle");
        }
        let reach = |start: usize, adj: &[Vec<usize>]| {
            let mut seen = vec![false; n];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            seen
        };
        let fwd = reach(src, &succ);
        if let Some(i) = fwd.iter().position(|&s| !s) {
            return structural(format!("node {} unreachable from input", self.nodes[i].id));
        }
        let back = reach(dst, &pred);
        if let Some(i) = back.iter().position(|&s| !s) {
            return structural(format!("output unreachable from node {}", self.nodes[i].id));
        }
        Ok(order)
    }

    /// Minimal total depth weight over all input-to-output paths.
    pub fn effective_depth(&self) -> Result<usize> {
        let order = self.validate()?;
        let idx = self.index()?;
        let mut pred = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            pred[idx[&b]].push(idx[&a]);
        }
        let mut dist = vec![u64::MAX; self.nodes.len()];
        for &v in &order {
            let w = self.nodes[v].depth_weight() as u64;
            let best = pred[v].iter().map(|&u| dist[u]).min().unwrap_or(0);
            dist[v] = best + w;
        }
        match dist[idx[&self.output_id]] {
            0 => structural("effective depth is zero"),
            d => Ok(d as usize),
        }
    }

    /// `a` followed by `b`: an edge joins a's output to b's input.
    pub fn series(a: &Self, b: &Self) -> Self {
        let shift = a.next_id();
        let mut g = a.clone();
        g.nodes.extend(b.nodes.iter().map(|n| DepthNode {
            id: n.id + shift,
            kind: n.kind,
        }));
        g.edges
            .extend(b.edges.iter().map(|&(s, t)| (s + shift, t + shift)));
        g.edges.push((a.output_id, b.input_id + shift));
        g.output_id = b.output_id + shift;
        g
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut g = ComputationGraph::default();
        let (mut input, mut output) = (None, None);
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: ln + 1, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            let id = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| err(format!("bad node id `{s}`")))
            };
            match toks.as_slice() {
                ["node", i, kind] => {
                    let kind = kind.parse().map_err(err)?;
                    g.nodes.push(DepthNode { id: id(i)?, kind });
                }
                ["edge", a, b] => g.edges.push((id(a)?, id(b)?)),
                ["input", i] if input.is_none() => input = Some(id(i)?),
                ["output", i] if output.is_none() => output = Some(id(i)?),
                ["input", _] | ["output", _] => {
                    return Err(err("repeated input/output line".into()))
                }
                _ => return Err(err(format!("unrecognized line `{line}`"))),
            }
        }
        g.input_id = input.ok_or_else(|| Error::Structural("missing input line".into()))?;
        g.output_id = output.ok_or_else(|| Error::Structural("missing output line".into()))?;
        g.validate()?;
        Ok(g)
    }
}

impl fmt::Display for ComputationGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            writeln!(f, "node {} {}", n.id, n.kind.as_str())?;
        }
        for (a, b) in &self.edges {
            writeln!(f, "edge {a} {b}")?;
        }
        writeln!(f, "input {}", self.input_id)?;
        writeln!(f, "output {}", self.output_id)
    }
}

/// Graph of depth units for a preset architecture. The readout is not a unit.
pub fn graph_of_preset(arch: &ArchSpec) -> Result<ComputationGraph> {
    arch.validate()?;
    Ok(match arch.family {
        Family::Mlp | Family::Cnn1d | Family::Cnn2d => {
            ComputationGraph::chain(&vec![NodeKind::Plain; arch.depth])
        }
        Family::ResNet => {
            let mut kinds = vec![NodeKind::Plain; arch.plain_units];
            kinds[0] = NodeKind::Stem;
            let mut g = ComputationGraph::chain(&kinds);
            for _ in 0..arch.blocks {
                g.push_residual(1);
            }
            g
        }
        Family::Transformer => {
            // the embedding is a zero-weight entry when the stem is not counted
            let entry = if arch.plain_units == 1 {
                NodeKind::Stem
            } else {
                NodeKind::BranchInterior
            };
            let mut g = ComputationGraph::chain(&[entry]);
            for _ in 0..2 * arch.blocks {
                g.push_residual(2);
                if arch.norm_placement == NormPlacement::Post {
                    g.push(NodeKind::BranchInterior);
                }
            }
            g
        }
    })
}

pub fn depth_of_preset(arch: &ArchSpec) -> Result<usize> {
    graph_of_preset(arch)?.effective_depth()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub dims: Vec<usize>,
}

impl SpatialGrid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return domain(format!("empty grid {dims:?}"));
        }
        Ok(SpatialGrid {
            dims: dims.to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Multi-index of flat site `p` (row-major).
    pub fn coords(&self, mut p: usize) -> Vec<i64> {
        let mut c = vec![0i64; self.dims.len()];
        for (ax, &d) in self.dims.iter().enumerate().rev() {
            c[ax] = (p % d) as i64;
            p /= d;
        }
        c
    }

    /// Flat index of `c + delta`, wrapped when `circular`, `None` if outside.
    pub fn shift(&self, c: &[i64], delta: &[i64], circular: bool) -> Option<usize> {
        let mut flat = 0usize;
        for ((&x, &dx), &d) in c.iter().zip(delta).zip(&self.dims) {
            let mut y = x + dx;
            if circular {
                y = y.rem_euclid(d as i64);
            } else if y < 0 || y >= d as i64 {
                return None;
            }
            flat = flat * d + y as usize;
        }
        Some(flat)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelOffsets {
    pub offsets: Vec<Vec<i64>>,
}

impl KernelOffsets {
    pub fn new(mut offsets: Vec<Vec<i64>>) -> Result<Self> {
        offsets.sort();
        offsets.dedup();
        match offsets.first() {
            None => domain("empty kernel"),
            Some(o) if offsets.iter().any(|x| x.len() != o.len()) => {
                domain("mixed offset dimensions")
            }
            _ => Ok(KernelOffsets { offsets }),
        }
    }

    /// Centered box kernel, `size` taps per axis (offsets `-(s-1)/2 ..= s/2`).
    pub fn centered(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
            return domain(format!("bad kernel sizes {sizes:?}"));
        }
        let mut offs: Vec<Vec<i64>> = vec![vec![]];
        for &s in sizes {
            let lo = -((s as i64 - 1) / 2);
            offs = offs
                .into_iter()
                .flat_map(|o| {
                    (lo..lo + s as i64).map(move |d| {
                        let mut v = o.clone();
                        v.push(d);
                        v
                    })
                })
                .collect();
        }
        Self::new(offs)
    }

    pub fn k(&self) -> usize {
        self.offsets.len()
    }

    pub fn ndim(&self) -> usize {
        self.offsets[0].len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Circular,
    Zero,
}

impl FromStr for PaddingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "circular" => Ok(PaddingMode::Circular),
            "zero" => Ok(PaddingMode::Zero),
            _ => Err(format!("unknown padding `{s}`")),
        }
    }
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaddingMode::Circular => "circular",
            PaddingMode::Zero => "zero",
        })
    }
}

/// Number of boundary sites, by enumeration.
pub fn boundary_count(
    grid: &SpatialGrid,
    kernel: &KernelOffsets,
    padding: PaddingMode,
) -> Result<usize> {
    if kernel.ndim() != grid.ndim() {
        return domain(format!(
            "kernel dimension {} vs grid dimension {}",
            kernel.ndim(),
            grid.ndim()
        ));
    }
    if padding == PaddingMode::Circular {
        return Ok(0);
    }
    Ok((0..grid.size())
        .filter(|&p| {
            let c = grid.coords(p);
            kernel
                .offsets
                .iter()
                .any(|d| grid.shift(&c, d, false).is_none())
        })
        .count())
}

pub fn boundary_fraction(
    grid: &SpatialGrid,
    kernel: &KernelOffsets,
    padding: PaddingMode,
) -> Result<f64> {
    Ok(boundary_count(grid, kernel, padding)? as f64 / grid.size() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_chain_depth() {
        let g = ComputationGraph::chain(&[NodeKind::Plain; 5]);
        assert_eq!(g.effective_depth().unwrap(), 5);
    }

    #[test]
    fn resnet_depth_is_m_plus_k() {
        let mut g = ComputationGraph::chain(&[NodeKind::Stem, NodeKind::Plain]);
        for _ in 0..4 {
            g.push_residual(2);
        }
        assert_eq!(g.effective_depth().unwrap(), 6);
    }

    #[test]
    fn transformer_six_blocks_no_stem() {
        let mut g = ComputationGraph::chain(&[NodeKind::BranchInterior]);
        for _ in 0..12 {
            g.push_residual(2);
        }
        assert_eq!(g.effective_depth().unwrap(), 12);
    }

    #[test]
    fn cycle_is_structural_error() {
        let mut g =
            ComputationGraph::chain(&[NodeKind::Plain, NodeKind::ResidualAdd, NodeKind::Plain]);
        g.edges.push((2, 1));
        assert!(matches!(g.effective_depth(), Err(Error::Structural(_))));
    }

    #[test]
    fn dangling_node_rejected() {
        let mut g = ComputationGraph::chain(&[NodeKind::Plain; 3]);
        let n = g.add_node(NodeKind::Head);
        g.edges.push((1, n));
        assert!(g.validate().is_err());
    }

    #[test]
    fn plain_in_degree_enforced() {
        let mut g = ComputationGraph::chain(&[NodeKind::Plain; 3]);
        g.edges.push((0, 2));
        assert!(g.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut g = ComputationGraph::chain(&[NodeKind::Stem]);
        g.push_residual(1);
        g.push(NodeKind::Head);
        let back = ComputationGraph::parse(&g.to_string()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.effective_depth().unwrap(), 3);
    }

    #[test]
    fn unknown_kind_rejected() {
        let e = ComputationGraph::parse("node 0 lstm\ninput 0\noutput 0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn boundary_examples() {
        let k1 = KernelOffsets::centered(&[3]).unwrap();
        let g1 = SpatialGrid::new(&[10]).unwrap();
        assert_eq!(boundary_fraction(&g1, &k1, PaddingMode::Zero).unwrap(), 0.2);
        assert_eq!(
            boundary_fraction(&g1, &k1, PaddingMode::Circular).unwrap(),
            0.0
        );
        let k2 = KernelOffsets::centered(&[3, 3]).unwrap();
        let g2 = SpatialGrid::new(&[5, 5]).unwrap();
        assert_eq!(
            boundary_fraction(&g2, &k2, PaddingMode::Zero).unwrap(),
            0.64
        );
    }

    #[test]
    fn boundary_errors() {
        assert!(SpatialGrid::new(&[0]).is_err());
        let k2 = KernelOffsets::centered(&[3, 3]).unwrap();
        let g1 = SpatialGrid::new(&[10]).unwrap();
        assert!(boundary_fraction(&g1, &k2, PaddingMode::Zero).is_err());
    }
}
