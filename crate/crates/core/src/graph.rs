//! Graph samples, validity masks, the class-to-continuous coding and the
//! JSON-lines dataset format.
//!
//! Class indices are 1-based throughout. Class 1 of the edge channel is the
//! "no edge" class: absent pairs in a dataset record take it, and masked
//! entries carry it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Class index used for absent edges and for masked entries.
pub const NULL_CLASS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NodeChannel {
    #[default]
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeAttrs {
    /// One class index per node slot; padded slots hold [`NULL_CLASS`].
    Classes(Vec<u32>),
    /// `dim` reals per node slot, row-major; padded slots hold zeros.
    Coords { dim: usize, values: Vec<f64> },
}

impl NodeAttrs {
    pub fn dim(&self) -> usize {
        match self {
            NodeAttrs::Classes(_) => 1,
            NodeAttrs::Coords { dim, .. } => *dim,
        }
    }

    pub fn channel(&self) -> NodeChannel {
        match self {
            NodeAttrs::Classes(_) => NodeChannel::Discrete,
            NodeAttrs::Coords { .. } => NodeChannel::Continuous,
        }
    }
}

/// A graph padded to `max_n` node slots. Valid nodes occupy the first `n`
/// slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub n: usize,
    pub max_n: usize,
    pub nodes: NodeAttrs,
    /// Row-major `max_n × max_n`, symmetric.
    pub edge_classes: Vec<u32>,
    pub node_mask: Vec<bool>,
    pub edge_mask: Vec<bool>,
}

pub fn node_mask_for(n: usize, max_n: usize) -> Vec<bool> {
    (0..max_n).map(|i| i < n).collect()
}

pub fn edge_mask_for(node_mask: &[bool], mask_diag: bool) -> Vec<bool> {
    let m = node_mask.len();
    let mut out = vec![false; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = node_mask[i] && node_mask[j] && !(mask_diag && i == j);
        }
    }
    out
}

impl GraphSample {
    /// Builds a padded sample. `edges` lists `(i, j, class)` for the pairs
    /// that are not [`NULL_CLASS`]; both orientations are written.
    pub fn new(
        n: usize,
        max_n: usize,
        nodes: NodeAttrs,
        edges: &[(usize, usize, u32)],
        mask_diag: bool,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        if n > max_n {
            return Err(Error::invalid(format!("n = {n} exceeds max_n = {max_n}")));
        }
        let nodes = match nodes {
            NodeAttrs::Classes(mut c) => {
                if c.len() == n {
                    c.resize(max_n, NULL_CLASS);
                }
                check_len(max_n, c.len())?;
                NodeAttrs::Classes(c)
            }
            NodeAttrs::Coords { dim, mut values } => {
                if values.len() == n * dim {
                    values.resize(max_n * dim, 0.0);
                }
                check_len(max_n * dim, values.len())?;
                NodeAttrs::Coords { dim, values }
            }
        };
        let node_mask = node_mask_for(n, max_n);
        let edge_mask = edge_mask_for(&node_mask, mask_diag);
        let mut edge_classes = vec![NULL_CLASS; max_n * max_n];
        for &(i, j, c) in edges {
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            if i == j && mask_diag {
                return Err(Error::invalid(format!("diagonal edge ({i}, {i}) while diagonal is masked")));
            }
            if c == 0 {
                return Err(Error::invalid("class indices are 1-based"));
            }
            edge_classes[i * max_n + j] = c;
            edge_classes[j * max_n + i] = c;
        }
        Ok(GraphSample {
            n,
            max_n,
            nodes,
            edge_classes,
            node_mask,
            edge_mask,
        })
    }

    pub fn mask_diag(&self) -> bool {
        self.max_n == 0 || !self.edge_mask[0]
    }

    pub fn edge_class(&self, i: usize, j: usize) -> u32 {
        self.edge_classes[i * self.max_n + j]
    }

    /// Non-null edges `(i, j, class)` with `i <= j` among valid nodes.
    pub fn edges(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i..self.n {
                if !self.edge_mask[i * self.max_n + j] {
                    continue;
                }
                let c = self.edge_class(i, j);
                if c != NULL_CLASS {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    /// Adjacency lists over valid nodes, ignoring self-loops.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for (i, j, _) in self.edges() {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        adj
    }
}

/// Class centers and interval boundaries tiling `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    pub centers: Vec<f64>,
    pub lowers: Vec<f64>,
    pub uppers: Vec<f64>,
}

pub fn build_class_grid(k: usize) -> Result<ClassGrid> {
    if k == 0 {
        return Err(Error::invalid("class count must be at least 1"));
    }
    let kf = k as f64;
    let mut centers = Vec::with_capacity(k);
    let mut lowers = Vec::with_capacity(k);
    let mut uppers = Vec::with_capacity(k);
    for idx in 1..=k {
        // Boundaries are computed directly rather than as center ± 1/K so
        // that neighbouring intervals share bit-identical endpoints.
        let c = (2.0 * idx as f64 - 1.0) / kf - 1.0;
        centers.push(c);
        lowers.push(2.0 * (idx as f64 - 1.0) / kf - 1.0);
        uppers.push(2.0 * idx as f64 / kf - 1.0);
    }
    Ok(ClassGrid {
        centers,
        lowers,
        uppers,
    })
}

impl ClassGrid {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn center(&self, class: u32) -> Result<f64> {
        let idx = class as usize;
        if idx == 0 || idx > self.k() {
            return Err(Error::invalid(format!(
                "class {class} outside 1..={}",
                self.k()
            )));
        }
        Ok(self.centers[idx - 1])
    }

    /// 1-based class whose center is closest to `x` (ties go to the lower class).
    pub fn nearest_class(&self, x: f64) -> u32 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.centers.iter().enumerate() {
            let d = (x - c).abs();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best as u32 + 1
    }
}

/// Continuous relaxation of a [`GraphSample`]; masked entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousGraph {
    pub max_n: usize,
    pub d_x: usize,
    /// `max_n · d_x` node values.
    pub x_c: Vec<f64>,
    /// `max_n × max_n` edge values, row-major.
    pub a_c: Vec<f64>,
    pub node_mask: Vec<bool>,
    pub edge_mask: Vec<bool>,
}

impl ContinuousGraph {
    /// Node mask expanded over the `d_x` feature channels.
    pub fn node_entry_mask(&self) -> Vec<bool> {
        self.node_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, self.d_x))
            .collect()
    }
}

pub fn encode_continuous(
    g: &GraphSample,
    grid_x: &ClassGrid,
    grid_a: &ClassGrid,
) -> Result<ContinuousGraph> {
    let m = g.max_n;
    let (d_x, x_c) = match &g.nodes {
        NodeAttrs::Classes(c) => {
            let mut x = vec![0.0; m];
            for i in 0..m {
                if g.node_mask[i] {
                    x[i] = grid_x.center(c[i])?;
                }
            }
            (1, x)
        }
        NodeAttrs::Coords { dim, values } => {
            let mut x = values.clone();
            for i in 0..m {
                if !g.node_mask[i] {
                    x[i * dim..(i + 1) * dim].fill(0.0);
                }
            }
            (*dim, x)
        }
    };
    let mut a_c = vec![0.0; m * m];
    for (idx, (&valid, &c)) in g.edge_mask.iter().zip(&g.edge_classes).enumerate() {
        if valid {
            a_c[idx] = grid_a.center(c)?;
        }
    }
    Ok(ContinuousGraph {
        max_n: m,
        d_x,
        x_c,
        a_c,
        node_mask: g.node_mask.clone(),
        edge_mask: g.edge_mask.clone(),
    })
}

/// Bijection between a list of `(i, j)` pairs with `i <= j` and flat slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeVectorization {
    pub max_n: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl EdgeVectorization {
    /// Every upper-triangle pair of a `max_n`-slot graph, row-major,
    /// optionally including the diagonal.
    pub fn full(max_n: usize, include_diag: bool) -> Self {
        let mut pairs = Vec::new();
        for i in 0..max_n {
            let start = if include_diag { i } else { i + 1 };
            for j in start..max_n {
                pairs.push((i, j));
            }
        }
        EdgeVectorization { max_n, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gather(&self, a: &[f64]) -> Vec<f64> {
        self.pairs
            .iter()
            .map(|&(i, j)| a[i * self.max_n + j])
            .collect()
    }

    pub fn gather_mask(&self, mask: &[bool]) -> Vec<bool> {
        self.pairs
            .iter()
            .map(|&(i, j)| mask[i * self.max_n + j])
            .collect()
    }

    /// Writes slot values into a symmetric `max_n × max_n` array; pairs not
    /// covered by the vectorization stay zero.
    pub fn scatter(&self, v: &[f64]) -> Vec<f64> {
        let m = self.max_n;
        let mut a = vec![0.0; m * m];
        for (&(i, j), &x) in self.pairs.iter().zip(v) {
            a[i * m + j] = x;
            a[j * m + i] = x;
        }
        a
    }
}

const SYMMETRY_TOL: f64 = 1e-9;

/// Vectorizes the valid upper-triangle entries of a symmetric edge array.
pub fn vectorize_edges(
    a: &[f64],
    max_n: usize,
    mask: &[bool],
) -> Result<(Vec<f64>, EdgeVectorization)> {
    check_len(max_n * max_n, a.len())?;
    check_len(max_n * max_n, mask.len())?;
    let mut pairs = Vec::new();
    for i in 0..max_n {
        for j in i..max_n {
            let (ij, ji) = (i * max_n + j, j * max_n + i);
            if mask[ij] && mask[ji] && (a[ij] - a[ji]).abs() > SYMMETRY_TOL {
                return Err(Error::invalid(format!(
                    "edge array not symmetric at ({i}, {j}): {} vs {}",
                    a[ij], a[ji]
                )));
            }
            if mask[ij] {
                pairs.push((i, j));
            }
        }
    }
    let vec = EdgeVectorization { max_n, pairs };
    Ok((vec.gather(a), vec))
}

pub fn unvectorize_edges(v: &[f64], vectorization: &EdgeVectorization) -> Result<Vec<f64>> {
    check_len(vectorization.len(), v.len())?;
    Ok(vectorization.scatter(v))
}

// ---------------------------------------------------------------------------
// Dataset IO

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "K_X")]
    pub k_x: usize,
    #[serde(rename = "K_A")]
    pub k_a: usize,
    pub max_n: usize,
    #[serde(default)]
    pub node_channel: NodeChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub graphs: Vec<GraphSample>,
}

impl Dataset {
    /// Node-count histogram `n -> count`.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for g in &self.graphs {
            *h.entry(g.n).or_insert(0) += 1;
        }
        h
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: DatasetMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_classes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_coords: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    edges: Vec<(usize, usize, u32)>,
}

pub fn read_dataset(path: impl AsRef<Path>, mask_diag: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, mask_diag)
}

pub fn parse_dataset(text: &str, path: &Path, mask_diag: bool) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut meta: Option<DatasetMeta> = None;
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        if value.get("meta").is_some() {
            if meta.is_some() || !records.is_empty() {
                return Err(err(line_no, "header must be the first record".into()));
            }
            let h: Header =
                serde_json::from_value(value).map_err(|e| err(line_no, e.to_string()))?;
            meta = Some(h.meta);
            continue;
        }
        let rec: Record =
            serde_json::from_value(value).map_err(|e| err(line_no, e.to_string()))?;
        records.push((line_no, rec));
    }

    let meta = match meta {
        Some(m) => m,
        None => infer_meta(&records),
    };

    let mut graphs = Vec::with_capacity(records.len());
    for (line_no, rec) in records {
        if rec.n > meta.max_n {
            return Err(err(line_no, format!("n = {} exceeds max_n = {}", rec.n, meta.max_n)));
        }
        let nodes = match meta.node_channel {
            NodeChannel::Discrete => {
                let classes = rec
                    .node_classes
                    .ok_or_else(|| err(line_no, "missing node_classes".into()))?;
                if classes.len() != rec.n {
                    return Err(err(line_no, format!("expected {} node classes", rec.n)));
                }
                if let Some(&c) = classes.iter().find(|&&c| c == 0 || c as usize > meta.k_x) {
                    return Err(err(line_no, format!("node class {c} outside 1..={}", meta.k_x)));
                }
                NodeAttrs::Classes(classes)
            }
            NodeChannel::Continuous => {
                let coords = rec
                    .node_coords
                    .ok_or_else(|| err(line_no, "missing node_coords".into()))?;
                if coords.len() != rec.n {
                    return Err(err(line_no, format!("expected {} coordinate rows", rec.n)));
                }
                let dim = coords.first().map_or(1, Vec::len);
                if coords.iter().any(|r| r.len() != dim) {
                    return Err(err(line_no, "ragged node_coords".into()));
                }
                NodeAttrs::Coords {
                    dim,
                    values: coords.into_iter().flatten().collect(),
                }
            }
        };
        let mut edges = Vec::with_capacity(rec.edges.len());
        for (i, j, c) in rec.edges {
            if c == 0 || c as usize > meta.k_a {
                return Err(err(line_no, format!("edge class {c} outside 1..={}", meta.k_a)));
            }
            edges.push((i.min(j), i.max(j), c));
        }
        let g = GraphSample::new(rec.n, meta.max_n, nodes, &edges, mask_diag)
            .map_err(|e| err(line_no, e.to_string()))?;
        graphs.push(g);
    }
    Ok(Dataset { meta, graphs })
}

fn infer_meta(records: &[(usize, Record)]) -> DatasetMeta {
    let max_n = records.iter().map(|(_, r)| r.n).max().unwrap_or(0);
    let continuous = records.iter().any(|(_, r)| r.node_coords.is_some());
    let k_x = records
        .iter()
        .filter_map(|(_, r)| r.node_classes.as_ref())
        .flatten()
        .copied()
        .max()
        .unwrap_or(1) as usize;
    let k_a = records
        .iter()
        .flat_map(|(_, r)| r.edges.iter().map(|e| e.2))
        .max()
        .unwrap_or(2)
        .max(2) as usize;
    DatasetMeta {
        k_x: k_x.max(1),
        k_a,
        max_n,
        node_channel: if continuous {
            NodeChannel::Continuous
        } else {
            NodeChannel::Discrete
        },
    }
}

pub fn format_dataset(meta: &DatasetMeta, samples: &[GraphSample]) -> Result<String> {
    let mut out = serde_json::to_string(&Header { meta: meta.clone() })?;
    out.push('\n');
    for g in samples {
        let (node_classes, node_coords) = match &g.nodes {
            NodeAttrs::Classes(c) => (Some(c[..g.n].to_vec()), None),
            NodeAttrs::Coords { dim, values } => (
                None,
                Some(values[..g.n * dim].chunks(*dim).map(<[f64]>::to_vec).collect()),
            ),
        };
        let rec = Record {
            n: g.n,
            node_classes,
            node_coords,
            edges: g.edges(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_samples(path: impl AsRef<Path>, meta: &DatasetMeta, samples: &[GraphSample]) -> Result<()> {
    let path = path.as_ref();
    let text = format_dataset(meta, samples)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15)
    }

    #[test]
    fn class_grid_small_cases() {
        let g = build_class_grid(1).unwrap();
        assert_eq!(g.centers, vec![0.0]);
        assert_eq!((g.lowers[0], g.uppers[0]), (-1.0, 1.0));

        let g = build_class_grid(2).unwrap();
        assert!(approx(&g.centers, &[-0.5, 0.5]));
        assert!(approx(&g.lowers, &[-1.0, 0.0]));
        assert!(approx(&g.uppers, &[0.0, 1.0]));

        let g = build_class_grid(4).unwrap();
        assert!(approx(&g.centers, &[-0.75, -0.25, 0.25, 0.75]));

        assert!(build_class_grid(0).is_err());
    }

    #[test]
    fn grid_tiles_interval() {
        for k in 1..=64 {
            let g = build_class_grid(k).unwrap();
            let total: f64 = g.lowers.iter().zip(&g.uppers).map(|(l, u)| u - l).sum();
            assert!((total - 2.0).abs() < 1e-12, "K={k}: {total}");
            assert_eq!(g.lowers[0], -1.0);
            assert_eq!(*g.uppers.last().unwrap(), 1.0);
            for i in 1..k {
                assert_eq!(g.uppers[i - 1], g.lowers[i]);
                assert!(g.centers[i] > g.centers[i - 1]);
            }
            for i in 0..k {
                assert!((g.centers[i] - (g.lowers[i] + 1.0 / k as f64)).abs() < 1e-12);
                assert!((g.uppers[i] - (g.centers[i] + 1.0 / k as f64)).abs() < 1e-12);
            }
        }
    }

    fn full_graph(n: usize, class: u32) -> GraphSample {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j, class));
            }
        }
        GraphSample::new(n, n, NodeAttrs::Classes(vec![class; n]), &edges, true).unwrap()
    }

    #[test]
    fn encode_all_class_one() {
        let grid = build_class_grid(2).unwrap();
        let g = full_graph(3, 1);
        let c = encode_continuous(&g, &grid, &grid).unwrap();
        assert!(c.x_c.iter().all(|&x| x == -0.5));
        for i in 0..3 {
            for j in 0..3 {
                let v = c.a_c[i * 3 + j];
                assert_eq!(v, if i == j { 0.0 } else { -0.5 });
            }
        }
    }

    #[test]
    fn encode_masked_is_zero() {
        let grid = build_class_grid(3).unwrap();
        let mut g = full_graph(3, 2);
        g.node_mask = vec![false; 3];
        g.edge_mask = vec![false; 9];
        let c = encode_continuous(&g, &grid, &grid).unwrap();
        assert!(c.x_c.iter().chain(&c.a_c).all(|&x| x == 0.0));
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let grid = build_class_grid(2).unwrap();
        let g = full_graph(2, 3);
        assert!(encode_continuous(&g, &grid, &grid).is_err());
    }

    #[test]
    fn vectorize_examples() {
        let mask = edge_mask_for(&node_mask_for(3, 3), true);
        let (v, vec) = vectorize_edges(&[0.0; 9], 3, &mask).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(vec.pairs, vec![(0, 1), (0, 2), (1, 2)]);

        let mask = edge_mask_for(&node_mask_for(2, 2), true);
        let a = [0.0, 0.5, 0.5, 0.0];
        let (v, vec) = vectorize_edges(&a, 2, &mask).unwrap();
        assert_eq!(v, vec![0.5]);
        assert_eq!(unvectorize_edges(&v, &vec).unwrap(), a.to_vec());

        let mask = edge_mask_for(&node_mask_for(3, 4), true);
        let (v, _) = vectorize_edges(&[0.0; 16], 4, &mask).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vectorize_rejects_asymmetry() {
        let mask = edge_mask_for(&node_mask_for(2, 2), true);
        assert!(vectorize_edges(&[0.0, 0.5, 0.4, 0.0], 2, &mask).is_err());
    }

    #[test]
    fn dataset_minimal_record() {
        let text = r#"{"n":2,"node_classes":[1,1],"edges":[[0,1,1]]}"#;
        let ds = parse_dataset(text, Path::new("mem"), true).unwrap();
        assert_eq!(ds.graphs.len(), 1);
        let g = &ds.graphs[0];
        assert_eq!((g.n, g.max_n), (2, 2));
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn dataset_empty() {
        let ds = parse_dataset("", Path::new("mem"), true).unwrap();
        assert!(ds.graphs.is_empty());
    }

    #[test]
    fn dataset_error_names_line() {
        let text = "{\"n\":2,\"node_classes\":[1,1],\"edges\":[]}\n{\"n\":2,\"edges\":[[0,1,2]]}\n";
        match parse_dataset(text, Path::new("d.jsonl"), true) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = "{\"n\":2,\"node_classes\":[1,1]}\nnot json\n";
        match parse_dataset(text, Path::new("d.jsonl"), true) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip() {
        let meta = DatasetMeta {
            k_x: 3,
            k_a: 2,
            max_n: 5,
            node_channel: NodeChannel::Discrete,
        };
        let graphs = vec![
            GraphSample::new(3, 5, NodeAttrs::Classes(vec![1, 2, 3]), &[(0, 1, 2), (1, 2, 2)], true).unwrap(),
            GraphSample::new(5, 5, NodeAttrs::Classes(vec![1; 5]), &[(0, 4, 2)], true).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_samples(&path, &meta, &graphs).unwrap();
        let ds = read_dataset(&path, true).unwrap();
        assert_eq!(ds.meta, meta);
        assert_eq!(ds.graphs, graphs);
    }

    #[test]
    fn continuous_round_trip() {
        let meta = DatasetMeta {
            k_x: 1,
            k_a: 2,
            max_n: 3,
            node_channel: NodeChannel::Continuous,
        };
        let g = GraphSample::new(
            2,
            3,
            NodeAttrs::Coords { dim: 2, values: vec![0.1, 0.2, -0.3, 0.4] },
            &[(0, 1, 2)],
            true,
        )
        .unwrap();
        let text = format_dataset(&meta, std::slice::from_ref(&g)).unwrap();
        let ds = parse_dataset(&text, Path::new("mem"), true).unwrap();
        assert_eq!(ds.graphs[0], g);
        let grid = build_class_grid(2).unwrap();
        let c = encode_continuous(&g, &grid, &grid).unwrap();
        assert_eq!(c.d_x, 2);
        assert_eq!(&c.x_c[..4], &[0.1, 0.2, -0.3, 0.4]);
        assert_eq!(&c.x_c[4..], &[0.0, 0.0]);
    }

    fn arb_graph() -> impl Strategy<Value = (GraphSample, usize, usize)> {
        (1usize..=16, 1usize..=16, 1usize..=7, 0usize..=3).prop_flat_map(|(kx, ka, n, pad)| {
            let max_n = n + pad;
            let pairs = n * n;
            (
                proptest::collection::vec(1..=kx as u32, n),
                proptest::collection::vec(1..=ka as u32, pairs),
                Just((kx, ka, n, max_n)),
            )
                .prop_map(|(nc, ec, (kx, ka, n, max_n))| {
                    let mut edges = Vec::new();
                    for i in 0..n {
                        for j in i + 1..n {
                            edges.push((i, j, ec[i * n + j]));
                        }
                    }
                    let g = GraphSample::new(n, max_n, NodeAttrs::Classes(nc), &edges, true).unwrap();
                    (g, kx, ka)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn encode_then_round_recovers_classes((g, kx, ka) in arb_graph()) {
            let gx = build_class_grid(kx).unwrap();
            let ga = build_class_grid(ka).unwrap();
            let c = encode_continuous(&g, &gx, &ga).unwrap();
            let NodeAttrs::Classes(nc) = &g.nodes else { unreachable!() };
            for i in 0..g.n {
                prop_assert_eq!(gx.nearest_class(c.x_c[i]), nc[i]);
            }
            for idx in 0..g.max_n * g.max_n {
                if g.edge_mask[idx] {
                    prop_assert_eq!(ga.nearest_class(c.a_c[idx]), g.edge_classes[idx]);
                }
            }
        }

        #[test]
        fn vectorize_round_trip(n in 1usize..=8, pad in 0usize..=3, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let max_n = n + pad;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mask = edge_mask_for(&node_mask_for(n, max_n), true);
            let mut a = vec![0.0; max_n * max_n];
            for i in 0..max_n {
                for j in i + 1..max_n {
                    if mask[i * max_n + j] {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        a[i * max_n + j] = v;
                        a[j * max_n + i] = v;
                    }
                }
            }
            let (v, vec) = vectorize_edges(&a, max_n, &mask).unwrap();
            prop_assert_eq!(v.len(), n * (n - 1) / 2);
            prop_assert_eq!(unvectorize_edges(&v, &vec).unwrap(), a);
        }
    }
}
