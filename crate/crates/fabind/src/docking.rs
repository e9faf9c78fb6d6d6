//! Pose regression inside the pocket: the stacked-layer tower with
//! iterative refinement, dual distance-map reconstruction, and the docking
//! loss with the local-atomic-structure (conformer consistency) constraint.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::complex::{LigandGraph, ProteinGraph};
use crate::geom::{self, Vec3};
use crate::layer::{tensor_coords, LayerState};
use crate::model::{build_topo, normalize_coords, unnormalize_coords, ModelConfig, Trunk};
use crate::nn::{Activation, Mlp, ParamStore};

#[derive(Debug, Error)]
pub enum DockError {
    #[error("non-finite coordinates during refinement iteration {iteration} of {total}")]
    NonFinite { iteration: usize, total: usize },
}

pub struct DockingModule {
    pub trunk: Trunk,
    /// Per-pair distance head; output passed through softplus.
    pub dist_head: Mlp,
}

impl DockingModule {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let lc = cfg.dock_layer_config();
        DockingModule {
            trunk: Trunk::new(store, &format!("{prefix}.trunk"), lc, cfg.dock_layers, true, rng),
            dist_head: Mlp::new(
                store,
                &format!("{prefix}.dist_head"),
                cfg.pair_dim,
                cfg.mlp_hidden,
                1,
                Activation::Relu,
                rng,
            ),
        }
    }
}

/// How many refinement rounds to run. Inference uses the configured
/// maximum; training samples the count uniformly (see the trainer).
#[derive(Clone, Copy, Debug)]
pub struct RefinementPolicy {
    pub iterations: usize,
}

pub struct DockingResult {
    /// Final ligand pose in angstroms.
    pub coords: Vec<Vec3>,
    /// `(n_l, 3)` differentiable final pose in normalized units.
    pub coords_tensor: Tensor,
    /// Final layer state (real + global rows).
    pub state: LayerState,
    /// `(n_l * n_p, 1)` coordinate-derived distance map, normalized units.
    pub d_direct: Tensor,
    /// `(n_l * n_p, 1)` pair-embedding-predicted distance map.
    pub d_pair: Tensor,
}

/// Run `policy.iterations` refinement rounds. Each round restarts from the
/// initial embeddings, rebuilds interfacial contacts at the current
/// coordinates, and feeds the predicted pose back in. Gradients flow only
/// through the last round; earlier rounds see value snapshots.
pub fn dock(
    module: &DockingModule,
    ligand: &LigandGraph,
    pocket: &ProteinGraph,
    policy: &RefinementPolicy,
) -> Result<DockingResult, DockError> {
    assert!(policy.iterations >= 1, "at least one refinement round");
    let topo = build_topo(ligand, pocket);
    let (h_l0, h_p0, z0) = module.trunk.initial_embeddings(ligand, pocket);
    let pocket_coords = pocket.coords();

    let mut cur = ligand.coords();
    let mut state = None;
    for it in 1..=policy.iterations {
        let last = it == policy.iterations;
        let (h_l, h_p, z) = if last {
            (h_l0.clone(), h_p0.clone(), z0.clone())
        } else {
            (h_l0.detach(), h_p0.detach(), z0.detach())
        };
        // coordinates re-enter as fresh constants: the value snapshot is
        // the gradient block between rounds
        let (x_l, x_p) = module.trunk.initial_coords(&cur, &pocket_coords);
        let out = catch_unwind(AssertUnwindSafe(|| {
            module.trunk.forward(LayerState { h_l, h_p, x_l, x_p, z }, &topo)
        }))
        .map_err(|_| DockError::NonFinite {
            iteration: it,
            total: policy.iterations,
        })?;
        cur = unnormalize_coords(&tensor_coords(&out.x_l, topo.n_l));
        state = Some(out);
    }
    let state = state.expect("at least one iteration ran");
    let real: Vec<usize> = (0..topo.n_l).collect();
    let coords_tensor = state.x_l.gather_rows(&real);
    let pocket_norm = crate::layer::coords_tensor(&normalize_coords(&pocket_coords));
    let d_direct = reconstruct_distance_direct(&coords_tensor, &pocket_norm);
    let d_pair = reconstruct_distance_pair(&module.dist_head, &state.z);
    Ok(DockingResult {
        coords: cur,
        coords_tensor,
        state,
        d_direct,
        d_pair,
    })
}

/// Pairwise atom-residue distances from coordinates: `(n_l * n_p, 1)`,
/// row-major pairs.
pub fn reconstruct_distance_direct(x_l: &Tensor, x_p: &Tensor) -> Tensor {
    let (n_l, n_p) = (x_l.rows(), x_p.rows());
    let idx_i: Vec<usize> = (0..n_l).flat_map(|i| std::iter::repeat(i).take(n_p)).collect();
    let idx_j: Vec<usize> = (0..n_l).flat_map(|_| 0..n_p).collect();
    x_l.gather_rows(&idx_i)
        .sub(&x_p.gather_rows(&idx_j))
        .square()
        .sum_cols()
        .sqrt()
}

/// Distance map predicted from pair embeddings; softplus keeps every entry
/// non-negative.
pub fn reconstruct_distance_pair(head: &Mlp, z: &Tensor) -> Tensor {
    head.forward(z).softplus()
}

/// Distance-map loss
/// `(1/P) [sum (D - D~)^2 + sum (D - D^)^2 + gamma * sum (D~ - D^)^2]`
/// over the `P = n_l * n_p` pair grid.
pub fn dist_map_loss(d: &Tensor, d_direct: &Tensor, d_pair: &Tensor, gamma: f64) -> Tensor {
    assert_eq!(d.rows(), d_direct.rows());
    assert_eq!(d.rows(), d_pair.rows());
    let p = d.rows() as f64;
    d.sub(d_direct)
        .square()
        .sum()
        .add(&d.sub(d_pair).square().sum())
        .add(&d_direct.sub(d_pair).square().sum().scale(gamma))
        .scale(1.0 / p)
}

/// Huber loss between predicted and true pose (normalized units).
pub fn coord_loss(x: &Tensor, truth: &[Vec3]) -> Tensor {
    x.huber(&crate::layer::coords_tensor(truth), 1.0)
}

/// Atom pairs held to the initial conformer's geometry: bonded pairs,
/// 2-hop bond neighbors, and co-ring members. Deduplicated, `i < j`.
pub fn las_pairs(ligand: &LigandGraph) -> Vec<(usize, usize)> {
    let n = ligand.len();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in &ligand.bonds {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut keep = vec![false; n * n];
    for &(a, b) in &ligand.bonds {
        keep[a.min(b) * n + a.max(b)] = true;
    }
    for mid in 0..n {
        for &a in &adj[mid] {
            for &b in &adj[mid] {
                if a < b {
                    keep[a * n + b] = true;
                }
            }
        }
    }
    for ring in &ligand.rings {
        for (ri, &a) in ring.iter().enumerate() {
            for &b in &ring[ri + 1..] {
                keep[a.min(b) * n + a.max(b)] = true;
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if keep[i * n + j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean squared deviation between predicted pair distances and the initial
/// conformer's, over the constrained pair set. `x` and `reference` must be
/// in the same units.
pub fn las_constraint(x: &Tensor, reference: &[Vec3], pairs: &[(usize, usize)]) -> Tensor {
    if pairs.is_empty() {
        return Tensor::scalar(0.0);
    }
    let idx_i: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let idx_j: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let pred = x
        .gather_rows(&idx_i)
        .sub(&x.gather_rows(&idx_j))
        .square()
        .sum_cols()
        .sqrt();
    let ref_d: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| geom::dist(reference[i], reference[j]))
        .collect();
    pred.sub(&Tensor::constant(pairs.len(), 1, ref_d)).square().mean()
}

/// `L_docking = L_coord + beta * L_dist + w_las * LAS`.
pub fn docking_loss(coord: &Tensor, dist: &Tensor, las: &Tensor, beta: f64, w_las: f64) -> Tensor {
    coord.add(&dist.scale(beta)).add(&las.scale(w_las))
}
