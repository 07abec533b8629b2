//! Per-modality positional graphs over detection centers.
//!
//! Nodes are detection centers; edges form a spanning, acyclic structure in
//! which no node has more than two incident edges — a Hamiltonian path over
//! the detections. Edges are chosen by a greedy Kruskal variant on Euclidean
//! pixel distance: candidate edges are sorted by (length, lexicographic
//! endpoint ids) and accepted iff they close no cycle and leave both endpoint
//! degrees within the cap. A true minimum spanning tree may need degree
//! three, and the degree-constrained minimum spanning tree is NP-hard, so
//! the result is not guaranteed globally minimal; it is deterministic and
//! always a spanning path.
//!
//! Distances are taken in each modality's own pixel frame (the two images
//! have different sizes and fields of view); the serialized form exposes
//! normalized centers so downstream matchers see comparable coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::scene_io::{AppearanceRecord, Detection, Modality};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate det_id `{0}`")]
    DuplicateId(String),
    #[error("description refers to unknown node `{0}`")]
    UnknownNode(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub det_id: String,
    /// Bounding-box center in pixel coordinates.
    pub center: (f64, f64),
    /// Center divided by image width/height; inside `[0, 1]` whenever the
    /// center lies inside the image.
    pub normalized_center: (f64, f64),
}

/// Undirected edge; endpoints are stored with `a < b` lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub a: String,
    pub b: String,
    /// Euclidean pixel distance between the two node centers.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalGraph {
    pub modality: Modality,
    pub nodes: Vec<GraphNode>,
    /// Edges in greedy acceptance order; `nodes.len().saturating_sub(1)` of
    /// them, forming a Hamiltonian path.
    pub edges: Vec<GraphEdge>,
}

impl PositionalGraph {
    pub fn node(&self, det_id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.det_id == det_id)
    }

    pub fn degree(&self, det_id: &str) -> usize {
        self.edges
            .iter()
            .filter(|e| e.a == det_id || e.b == det_id)
            .count()
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).sum()
    }

    /// Node det_ids in path order.
    ///
    /// A path can be walked from either endpoint; the walk starts at the
    /// endpoint whose (normalized center, det_id) is smaller. Resolving the
    /// direction geometrically instead of by id keeps the ordering
    /// consistent between the two modalities — ids are arbitrary per
    /// modality, while the endpoint geometry is shared scene structure that
    /// translation and positive scaling preserve.
    pub fn path_order(&self) -> Vec<&str> {
        match self.nodes.len() {
            0 => return Vec::new(),
            1 => return vec![self.nodes[0].det_id.as_str()],
            _ => {}
        }
        let mut adjacency: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for node in &self.nodes {
            adjacency.entry(node.det_id.as_str()).or_default();
        }
        for edge in &self.edges {
            adjacency
                .get_mut(edge.a.as_str())
                .unwrap()
                .push(edge.b.as_str());
            adjacency
                .get_mut(edge.b.as_str())
                .unwrap()
                .push(edge.a.as_str());
        }
        let mut endpoints: Vec<&str> = adjacency
            .iter()
            .filter(|(_, neighbors)| neighbors.len() <= 1)
            .map(|(id, _)| *id)
            .collect();
        debug_assert_eq!(
            endpoints.len(),
            2,
            "spanning path has exactly two endpoints"
        );
        endpoints.sort_by(|a, b| {
            let na = self.node(a).expect("endpoint is a node");
            let nb = self.node(b).expect("endpoint is a node");
            na.normalized_center
                .0
                .total_cmp(&nb.normalized_center.0)
                .then_with(|| na.normalized_center.1.total_cmp(&nb.normalized_center.1))
                .then_with(|| na.det_id.cmp(&nb.det_id))
        });
        fn walk<'g>(
            adjacency: &BTreeMap<&'g str, Vec<&'g str>>,
            start: &'g str,
            capacity: usize,
        ) -> Vec<&'g str> {
            let mut order = Vec::with_capacity(capacity);
            let mut prev: Option<&str> = None;
            let mut current = start;
            loop {
                order.push(current);
                let next = adjacency[current]
                    .iter()
                    .copied()
                    .find(|&n| Some(n) != prev);
                match next {
                    Some(n) => {
                        prev = Some(current);
                        current = n;
                    }
                    None => break,
                }
            }
            order
        }
        walk(&adjacency, endpoints[0], self.nodes.len())
    }

    /// Normalized ordinal position of every node along the path: `0.0` for
    /// the first node, `1.0` for the last (`0.0` for a single node).
    pub fn path_positions(&self) -> BTreeMap<&str, f64> {
        let order = self.path_order();
        let span = (order.len().saturating_sub(1)).max(1) as f64;
        order
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i as f64 / span))
            .collect()
    }
}

/// Build the positional graph for one modality's detections.
///
/// Deterministic for a given input order: equal-length candidate edges are
/// ordered by lexicographic (min det_id, max det_id). Zero detections yield
/// an empty graph, one detection a single node without edges. Exact
/// duplicate centers are allowed; the connecting zero-length edge is valid.
pub fn build_graph(
    detections: &[Detection],
    image_size: (u32, u32),
    modality: Modality,
) -> Result<PositionalGraph, GraphError> {
    let (img_w, img_h) = (f64::from(image_size.0), f64::from(image_size.1));
    let mut nodes = Vec::with_capacity(detections.len());
    for det in detections {
        if nodes.iter().any(|n: &GraphNode| n.det_id == det.det_id) {
            return Err(GraphError::DuplicateId(det.det_id.clone()));
        }
        let center = det.bbox.center();
        nodes.push(GraphNode {
            det_id: det.det_id.clone(),
            center,
            normalized_center: (center.0 / img_w, center.1 / img_h),
        });
    }

    // All pairwise candidates, sorted by (length, min id, max id).
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            let (xi, yi) = nodes[i].center;
            let (xj, yj) = nodes[j].center;
            let length = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
            let (lo, hi) = if nodes[i].det_id <= nodes[j].det_id {
                (i, j)
            } else {
                (j, i)
            };
            candidates.push((length, lo, hi));
        }
    }
    candidates.sort_by(|(la, ia, ja), (lb, ib, jb)| {
        la.total_cmp(lb)
            .then_with(|| nodes[*ia].det_id.cmp(&nodes[*ib].det_id))
            .then_with(|| nodes[*ja].det_id.cmp(&nodes[*jb].det_id))
    });

    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        if parent[x] != x {
            parent[x] = find(parent, parent[x]);
        }
        parent[x]
    }

    let mut degree = vec![0usize; nodes.len()];
    let mut edges = Vec::with_capacity(nodes.len().saturating_sub(1));
    for (length, i, j) in candidates {
        if edges.len() + 1 == nodes.len() {
            break;
        }
        if degree[i] >= 2 || degree[j] >= 2 {
            continue;
        }
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            continue;
        }
        parent[ri] = rj;
        degree[i] += 1;
        degree[j] += 1;
        edges.push(GraphEdge {
            a: nodes[i].det_id.clone(),
            b: nodes[j].det_id.clone(),
            length,
        });
    }

    Ok(PositionalGraph {
        modality,
        nodes,
        edges,
    })
}

/// Serialize a graph to the frozen line format used verbatim inside matcher
/// prompts:
///
/// ```text
/// NODE <det_id> pos=(<nx>,<ny>) attrs={k=v; ...}
/// EDGE <idA>-<idB> dist=<d>
/// ```
///
/// Normalized centers are rounded to 3 decimals and edge lengths to 1.
/// `attrs` appears only for nodes with a description carrying at least one
/// attribute. Every description key must name a node of the graph.
pub fn serialize_graph(
    graph: &PositionalGraph,
    descriptions: Option<&BTreeMap<String, AppearanceRecord>>,
) -> Result<String, GraphError> {
    if let Some(desc) = descriptions {
        for det_id in desc.keys() {
            if graph.node(det_id).is_none() {
                return Err(GraphError::UnknownNode(det_id.clone()));
            }
        }
    }
    let mut out = String::new();
    for node in &graph.nodes {
        write!(
            out,
            "NODE {} pos=({:.3},{:.3})",
            node.det_id, node.normalized_center.0, node.normalized_center.1
        )
        .unwrap();
        if let Some(record) = descriptions.and_then(|d| d.get(&node.det_id)) {
            if !record.attributes.is_empty() {
                let rendered: Vec<String> = record
                    .attributes
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                write!(out, " attrs={{{}}}", rendered.join("; ")).unwrap();
            }
        }
        out.push('\n');
    }
    for edge in &graph.edges {
        writeln!(out, "EDGE {}-{} dist={:.1}", edge.a, edge.b, edge.length).unwrap();
    }
    Ok(out)
}
