//! Random labeled trees, the tree validity predicate, WL hashing and
//! validity/uniqueness/novelty metrics.

use std::cmp::Reverse;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, DatasetMeta, GraphSample, NodeAttrs, NodeChannel, NULL_CLASS};
use crate::par::stream_rng;

/// Edge class of a present tree edge.
pub const TREE_EDGE_CLASS: u32 = 2;
pub const WL_ROUNDS: usize = 3;

/// Decodes a Prüfer sequence over `0..n` (length `n − 2`) into tree edges.
pub fn prufer_to_edges(seq: &[usize], n: usize) -> Result<Vec<(usize, usize)>> {
    if n < 2 || seq.len() != n - 2 {
        return Err(Error::invalid(format!(
            "a Prüfer sequence for n = {n} has length n - 2, got {}",
            seq.len()
        )));
    }
    if let Some(&bad) = seq.iter().find(|&&v| v >= n) {
        return Err(Error::invalid(format!("label {bad} out of range for n = {n}")));
    }
    let mut degree = vec![1usize; n];
    for &v in seq {
        degree[v] += 1;
    }
    let mut leaves: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| degree[v] == 1).map(Reverse).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &v in seq {
        let Reverse(leaf) = leaves.pop().expect("a tree always has a leaf");
        edges.push((leaf.min(v), leaf.max(v)));
        degree[v] -= 1;
        if degree[v] == 1 {
            leaves.push(Reverse(v));
        }
    }
    let Reverse(a) = leaves.pop().expect("two leaves remain");
    let Reverse(b) = leaves.pop().expect("two leaves remain");
    edges.push((a.min(b), a.max(b)));
    Ok(edges)
}

pub fn random_tree_edges<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let seq: Vec<usize> = (0..n.saturating_sub(2)).map(|_| rng.random_range(0..n)).collect();
    prufer_to_edges(&seq, n)
}

fn tree_sample(edges: &[(usize, usize)], n: usize, max_n: usize, mask_diag: bool) -> Result<GraphSample> {
    let labeled: Vec<_> = edges.iter().map(|&(i, j)| (i, j, TREE_EDGE_CLASS)).collect();
    GraphSample::new(n, max_n, NodeAttrs::Classes(vec![1; n]), &labeled, mask_diag)
}

pub fn tree_meta(max_n: usize) -> DatasetMeta {
    DatasetMeta {
        k_x: 1,
        k_a: 2,
        max_n,
        node_channel: NodeChannel::Discrete,
    }
}

/// `count` uniform labeled trees on exactly `n` nodes.
pub fn gen_random_trees(count: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_tree_dataset(count, n, n, seed, true)
}

/// `count` uniform labeled trees with `n` drawn uniformly from `min_n..=max_n`.
pub fn gen_tree_dataset(count: usize, min_n: usize, max_n: usize, seed: u64, mask_diag: bool) -> Result<Dataset> {
    if min_n < 2 || min_n > max_n {
        return Err(Error::invalid(format!("need 2 <= min_n <= max_n, got {min_n} and {max_n}")));
    }
    let mut rng = stream_rng(seed, 0x74ee);
    let graphs = (0..count)
        .map(|_| {
            let n = rng.random_range(min_n..=max_n);
            let edges = random_tree_edges(n, &mut rng)?;
            tree_sample(&edges, n, max_n, mask_diag)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: tree_meta(max_n),
        graphs,
    })
}

pub fn is_connected(g: &GraphSample) -> bool {
    if g.n == 0 {
        return true;
    }
    let adj = g.adjacency();
    let mut seen = vec![false; g.n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut reached = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                reached += 1;
                stack.push(v);
            }
        }
    }
    reached == g.n
}

/// Connected with exactly `n − 1` non-null edges (self-loops included in
/// the count, so any loop makes the graph invalid).
pub fn is_valid_tree(g: &GraphSample) -> bool {
    g.num_edges() + 1 == g.n && is_connected(g)
}

fn hash_of<T: Hash>(v: &T) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

fn node_label(g: &GraphSample, i: usize) -> u64 {
    let loop_class = if g.edge_mask[i * g.max_n + i] { g.edge_class(i, i) } else { NULL_CLASS };
    match &g.nodes {
        NodeAttrs::Classes(c) => hash_of(&(c[i], loop_class)),
        NodeAttrs::Coords { dim, values } => {
            let bits: Vec<u64> = values[i * dim..(i + 1) * dim].iter().map(|v| v.to_bits()).collect();
            hash_of(&(bits, loop_class))
        }
    }
}

/// Order-independent canonical hash from [`WL_ROUNDS`] rounds of 1-WL
/// color refinement over node and edge classes. Isomorphic graphs always
/// collide; WL-equivalent non-isomorphic graphs may too.
pub fn wl_hash(g: &GraphSample) -> u64 {
    let n = g.n;
    let m = g.max_n;
    let mut nbrs: Vec<Vec<(u32, usize)>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && g.edge_mask[i * m + j] && g.edge_class(i, j) != NULL_CLASS {
                nbrs[i].push((g.edge_class(i, j), j));
            }
        }
    }
    let mut colors: Vec<u64> = (0..n).map(|i| node_label(g, i)).collect();
    let mut summary = Vec::with_capacity(WL_ROUNDS + 1);
    let multiset = |c: &[u64]| {
        let mut s = c.to_vec();
        s.sort_unstable();
        s
    };
    summary.push(multiset(&colors));
    for _ in 0..WL_ROUNDS {
        colors = (0..n)
            .map(|i| {
                let mut sig: Vec<(u32, u64)> = nbrs[i].iter().map(|&(c, j)| (c, colors[j])).collect();
                sig.sort_unstable();
                hash_of(&(colors[i], sig))
            })
            .collect();
        summary.push(multiset(&colors));
    }
    hash_of(&(n, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    /// Distinct hashes among samples that are valid and novel, over `count`.
    pub vun: f64,
    pub valid_count: usize,
    pub connected_count: usize,
    pub edge_count_ok: usize,
    pub distinct_count: usize,
    pub novel_count: usize,
    /// Node degree → number of nodes across all samples.
    pub degree_histogram: BTreeMap<usize, usize>,
}

pub fn evaluate_vun(samples: &[GraphSample], train_set: &[GraphSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let train: HashSet<u64> = train_set.iter().map(wl_hash).collect();
    let hashes: Vec<u64> = samples.iter().map(wl_hash).collect();
    let mut report = MetricsReport {
        count: samples.len(),
        validity: 0.0,
        uniqueness: 0.0,
        novelty: 0.0,
        vun: 0.0,
        valid_count: 0,
        connected_count: 0,
        edge_count_ok: 0,
        distinct_count: hashes.iter().collect::<HashSet<_>>().len(),
        novel_count: hashes.iter().filter(|h| !train.contains(h)).count(),
        degree_histogram: BTreeMap::new(),
    };
    let mut vun_hashes = HashSet::new();
    for (g, h) in samples.iter().zip(&hashes) {
        let connected = is_connected(g);
        let edges_ok = g.num_edges() + 1 == g.n;
        report.connected_count += connected as usize;
        report.edge_count_ok += edges_ok as usize;
        if connected && edges_ok {
            report.valid_count += 1;
            if !train.contains(h) {
                vun_hashes.insert(*h);
            }
        }
        for a in g.adjacency() {
            *report.degree_histogram.entry(a.len()).or_insert(0) += 1;
        }
    }
    let c = samples.len() as f64;
    report.validity = report.valid_count as f64 / c;
    report.uniqueness = report.distinct_count as f64 / c;
    report.novelty = report.novel_count as f64 / c;
    report.vun = vun_hashes.len() as f64 / c;
    Ok(report)
}
