//! Per-size precision operators and the maps between padded graph arrays
//! and the compact belief vectors they act on.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::{Layout, PrecisionConfig};
use crate::error::{check_len, Result};
use crate::flow::Channel;
use crate::graph::EdgeVectorization;
use crate::solver::NoiseFactor;
use crate::structure::{
    build_edge_dependency_line_complete, build_joint_dependency, build_node_dependency_complete,
    build_obs_precision, build_prior_precision, condition_bound_from, joint_a_index, joint_x_index,
    spectral_bounds, DependencyGraph, MaskOperator, PrecisionOperator, SpectralEstimate, POWER_ITERS,
    POWER_TOL,
};

/// One Gaussian belief with its operators.
#[derive(Debug, Clone)]
pub struct BeliefBlock {
    /// Which accuracy schedule drives this block.
    pub channel: Channel,
    pub prior: PrecisionOperator,
    pub obs: PrecisionOperator,
    pub obs_factor: NoiseFactor,
    /// Valid entries; invalid ones are pinned to zero.
    pub mask: Vec<bool>,
}

impl BeliefBlock {
    fn new(channel: Channel, dep: &DependencyGraph, mask: Vec<bool>, p: &PrecisionConfig, dense_cap: usize) -> Result<Self> {
        let prior = build_prior_precision(dep, &MaskOperator::new(mask.clone()), p.eps)?;
        let obs = build_obs_precision(&prior, p.obs_mode, p.eps_obs)?;
        let obs_factor = NoiseFactor::new(&obs, dense_cap)?;
        Ok(BeliefBlock {
            channel,
            prior,
            obs,
            obs_factor,
            mask,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn apply_mask(&self, v: &mut [f64]) {
        for (x, &m) in v.iter_mut().zip(&self.mask) {
            if !m {
                *x = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Placement {
    Separate { slots: EdgeVectorization },
    Joint,
}

/// Operators for graphs with exactly `n` valid nodes, laid out in the
/// padded `max_n` frame. Couplings touch only valid slots.
#[derive(Debug, Clone)]
pub struct OperatorBundle {
    pub n: usize,
    pub max_n: usize,
    pub d_x: usize,
    pub mask_diag: bool,
    pub blocks: Vec<BeliefBlock>,
    placement: Placement,
}

/// Upper-triangle slots over the first `n` nodes in row-major order, in the
/// padded frame.
fn edge_slots(n: usize, max_n: usize, mask_diag: bool) -> EdgeVectorization {
    let mut pairs = Vec::new();
    for i in 0..n {
        let start = if mask_diag { i + 1 } else { i };
        for j in start..n {
            pairs.push((i, j));
        }
    }
    EdgeVectorization { max_n, pairs }
}

/// Line graph of `K_n` over `slots`. Diagonal slots, when present, carry
/// no couplings.
fn edge_dependency(n: usize, slots: &EdgeVectorization, lambda_a: f64) -> Result<DependencyGraph> {
    let base = build_edge_dependency_line_complete(n, 1, lambda_a)?;
    if slots.pairs.iter().all(|&(i, j)| i != j) {
        return Ok(base);
    }
    let off = EdgeVectorization::full(n, false);
    let index: BTreeMap<(usize, usize), usize> = slots.pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
    let remap = |k: usize| index[&off.pairs[k]];
    DependencyGraph::new(slots.len(), base.edges.iter().map(|&(u, v, w)| (remap(u), remap(v), w)))
}

impl OperatorBundle {
    pub fn build(n: usize, max_n: usize, d_x: usize, mask_diag: bool, p: &PrecisionConfig, dense_cap: usize) -> Result<Self> {
        let (blocks, placement) = match p.layout {
            Layout::Separate => {
                let node_dep = build_node_dependency_complete(n, d_x, p.lambda_x)?;
                let node = BeliefBlock::new(Channel::Node, &node_dep, vec![true; n * d_x], p, dense_cap)?;
                let slots = edge_slots(n, max_n, mask_diag);
                let edge_dep = edge_dependency(n, &slots, p.lambda_a)?;
                let edge = BeliefBlock::new(Channel::Edge, &edge_dep, vec![true; slots.len()], p, dense_cap)?;
                (vec![node, edge], Placement::Separate { slots })
            }
            Layout::Joint => {
                let dep = build_joint_dependency(n, d_x, 1, p.lambda_x, p.lambda_a, p.symmetry)?;
                let mut mask = vec![true; dep.dim];
                if mask_diag {
                    for i in 0..n {
                        mask[joint_a_index(n, d_x, 1, i, i, 0)] = false;
                    }
                }
                (vec![BeliefBlock::new(Channel::Edge, &dep, mask, p, dense_cap)?], Placement::Joint)
            }
        };
        Ok(OperatorBundle {
            n,
            max_n,
            d_x,
            mask_diag,
            blocks,
            placement,
        })
    }

    /// Compact per-block vectors from padded node (`max_n · d_x`) and edge
    /// (`max_n²`) arrays.
    pub fn gather(&self, x: &[f64], a: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (n, m, d_x) = (self.n, self.max_n, self.d_x);
        check_len(m * d_x, x.len())?;
        check_len(m * m, a.len())?;
        Ok(match &self.placement {
            Placement::Separate { slots } => vec![x[..n * d_x].to_vec(), slots.gather(a)],
            Placement::Joint => {
                let block = &self.blocks[0];
                let mut z = vec![0.0; block.dim()];
                for i in 0..n {
                    for c in 0..d_x {
                        z[joint_x_index(d_x, i, c)] = x[i * d_x + c];
                    }
                    for j in 0..n {
                        z[joint_a_index(n, d_x, 1, i, j, 0)] = a[i * m + j];
                    }
                }
                block.apply_mask(&mut z);
                vec![z]
            }
        })
    }

    /// Inverse of [`gather`](Self::gather) into padded arrays. In the joint
    /// layout the two orientations of an edge are averaged.
    pub fn scatter(&self, blocks: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, m, d_x) = (self.n, self.max_n, self.d_x);
        check_len(self.blocks.len(), blocks.len())?;
        for (b, v) in self.blocks.iter().zip(blocks) {
            check_len(b.dim(), v.len())?;
        }
        let mut x = vec![0.0; m * d_x];
        Ok(match &self.placement {
            Placement::Separate { slots } => {
                x[..n * d_x].copy_from_slice(&blocks[0]);
                (x, slots.scatter(&blocks[1]))
            }
            Placement::Joint => {
                let z = &blocks[0];
                let mut a = vec![0.0; m * m];
                for i in 0..n {
                    for c in 0..d_x {
                        x[i * d_x + c] = z[joint_x_index(d_x, i, c)];
                    }
                    for j in 0..n {
                        if self.mask_diag && i == j {
                            continue;
                        }
                        let (ij, ji) = (joint_a_index(n, d_x, 1, i, j, 0), joint_a_index(n, d_x, 1, j, i, 0));
                        a[i * m + j] = 0.5 * (z[ij] + z[ji]);
                    }
                }
                (x, a)
            }
        })
    }
}

/// Bundles for every node count in `sizes`.
pub fn build_bundles(
    sizes: impl IntoIterator<Item = usize>,
    max_n: usize,
    d_x: usize,
    mask_diag: bool,
    p: &PrecisionConfig,
    dense_cap: usize,
) -> Result<BTreeMap<usize, OperatorBundle>> {
    sizes
        .into_iter()
        .map(|n| OperatorBundle::build(n, max_n, d_x, mask_diag, p, dense_cap).map(|b| (n, b)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockSummary {
    pub channel: String,
    pub dim: usize,
    pub prior_nonzeros: usize,
    pub obs_nonzeros: usize,
    pub prior_spectrum: SpectralEstimate,
    pub obs_spectrum: SpectralEstimate,
    /// Bound on `κ(Ω_prior + β Ω_obs)` at the end of the schedule.
    pub beta_final: f64,
    pub condition_bound: f64,
}

pub fn summarize_block(block: &BeliefBlock, beta_final: f64) -> Result<BlockSummary> {
    let prior_spectrum = spectral_bounds(&block.prior, POWER_ITERS, POWER_TOL)?;
    let obs_spectrum = spectral_bounds(&block.obs, POWER_ITERS, POWER_TOL)?;
    Ok(BlockSummary {
        channel: block.channel.to_string(),
        dim: block.dim(),
        prior_nonzeros: block.prior.nnz(),
        obs_nonzeros: block.obs.nnz(),
        condition_bound: condition_bound_from(&prior_spectrum, &obs_spectrum, beta_final)?,
        prior_spectrum,
        obs_spectrum,
        beta_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn precision(layout: Layout) -> PrecisionConfig {
        PrecisionConfig {
            layout,
            ..RunConfig::default().precision
        }
    }

    #[test]
    fn separate_round_trip() {
        let (n, m) = (4, 6);
        let b = OperatorBundle::build(n, m, 1, true, &precision(Layout::Separate), 4096).unwrap();
        assert_eq!(b.blocks[0].dim(), 4);
        assert_eq!(b.blocks[1].dim(), 6);
        let x: Vec<f64> = (0..m).map(|i| if i < n { i as f64 } else { 0.0 }).collect();
        let mut a = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a[i * m + j] = (i + j) as f64 * 0.1;
                }
            }
        }
        let z = b.gather(&x, &a).unwrap();
        let (x2, a2) = b.scatter(&z).unwrap();
        assert_eq!(x, x2);
        assert_eq!(a, a2);
    }

    #[test]
    fn joint_round_trip_and_mask() {
        let (n, m) = (3, 5);
        let b = OperatorBundle::build(n, m, 1, true, &precision(Layout::Joint), 4096).unwrap();
        assert_eq!(b.blocks.len(), 1);
        assert_eq!(b.blocks[0].dim(), n + n * n);
        assert_eq!(b.blocks[0].mask.iter().filter(|&&v| !v).count(), n);
        let x = vec![0.5, -0.5, 0.25, 0.0, 0.0];
        let mut a = vec![0.0; m * m];
        a[1] = 0.5;
        a[m] = 0.5;
        a[2 * m + 1] = -0.5;
        a[m + 2] = -0.5;
        let (x2, a2) = b.scatter(&b.gather(&x, &a).unwrap()).unwrap();
        assert_eq!(x, x2);
        assert_eq!(a, a2);
    }

    #[test]
    fn diagonal_slots_when_unmasked() {
        let b = OperatorBundle::build(3, 3, 1, false, &precision(Layout::Separate), 4096).unwrap();
        assert_eq!(b.blocks[1].dim(), 6);
        let off = OperatorBundle::build(3, 3, 1, true, &precision(Layout::Separate), 4096).unwrap();
        let coupled = |op: &PrecisionOperator| op.upper_entries().iter().filter(|e| e.0 != e.1).count();
        assert_eq!(coupled(&b.blocks[1].prior), coupled(&off.blocks[1].prior));
    }

    #[test]
    fn summary_reports_bound() {
        let b = OperatorBundle::build(5, 5, 1, true, &precision(Layout::Separate), 4096).unwrap();
        let s = summarize_block(&b.blocks[1], 24.0).unwrap();
        assert_eq!(s.dim, 10);
        assert!(s.condition_bound >= 1.0);
    }
}
