//! Ligand-informed pocket prediction: one lightweight layer over the whole
//! protein with the ligand parked at the protein centroid, a per-residue
//! classifier, a Gumbel-Softmax center for the all-negative fallback, and
//! the pocket losses.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::complex::{
    extract_pocket, place_ligand_at, ComplexError, LigandGraph, PocketSubgraph, ProteinGraph,
    POCKET_RADIUS,
};
use crate::geom::{self, Vec3};
use crate::layer::coords_tensor;
use crate::model::{build_topo, normalize_coords, ModelConfig, Trunk, NORM_SCALE};
use crate::nn::{sample_gumbel, Activation, Mlp, ParamStore};

pub struct PocketModule {
    pub trunk: Trunk,
    pub classifier: Mlp,
}

impl PocketModule {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let lc = cfg.pocket_layer_config();
        PocketModule {
            trunk: Trunk::new(store, &format!("{prefix}.trunk"), lc, cfg.pocket_layers, false, rng),
            classifier: Mlp::new(
                store,
                &format!("{prefix}.classifier"),
                lc.hidden,
                cfg.mlp_hidden,
                1,
                Activation::Relu,
                rng,
            ),
        }
    }
}

pub struct PocketPrediction {
    /// Per-residue pocket probability.
    pub probs: Vec<f64>,
    /// `(n_p, 1)` differentiable probabilities.
    pub probs_tensor: Tensor,
    /// Mean coordinate of residues with p > 0.5 (angstroms), if any.
    pub hard_center: Option<Vec3>,
    /// Gumbel-Softmax center (angstroms).
    pub gumbel_center: Vec3,
    /// `(1, 3)` differentiable Gumbel center in normalized units.
    pub gumbel_center_tensor: Tensor,
    /// Hard center when available, Gumbel center otherwise (angstroms).
    pub decided_center: Vec3,
}

pub struct PocketLossReport {
    pub classification: Tensor,
    pub center: Tensor,
    pub combined: Tensor,
    pub alpha: f64,
}

/// Mean coordinate of residues classified positive (p > 0.5).
pub fn hard_center(probs: &[f64], coords: &[Vec3]) -> Option<Vec3> {
    let positive: Vec<Vec3> = probs
        .iter()
        .zip(coords)
        .filter(|(&p, _)| p > 0.5)
        .map(|(_, &c)| c)
        .collect();
    (!positive.is_empty()).then(|| geom::centroid(&positive))
}

/// Differentiable Gumbel-Softmax center: weights
/// `softmax_j((log p_j + g_j) / tau)` over residues, applied to `coords`.
/// Returned in the units of `coords`.
pub fn gumbel_center(probs: &Tensor, coords: &[Vec3], tau: f64, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(probs.cols(), 1);
    assert_eq!(probs.rows(), coords.len());
    let n = coords.len();
    let g = Tensor::constant(n, 1, (0..n).map(|_| sample_gumbel(rng)).collect());
    let gamma = probs
        .ln_clamped(1e-12)
        .add(&g)
        .scale(1.0 / tau)
        .transpose()
        .row_softmax();
    gamma.matmul(&coords_tensor(coords))
}

/// Run the pocket tower: ligand moved to the protein centroid, one layer
/// over the whole complex, residue classification, and both centers.
pub fn predict_pocket(
    module: &PocketModule,
    cfg: &ModelConfig,
    ligand: &LigandGraph,
    protein: &ProteinGraph,
    rng: &mut ChaCha8Rng,
) -> PocketPrediction {
    let lig0 = place_ligand_at(ligand, protein.centroid());
    let topo = build_topo(&lig0, protein);
    let (h_l, h_p, z) = module.trunk.initial_embeddings(&lig0, protein);
    let (x_l, x_p) = module.trunk.initial_coords(&lig0.coords(), &protein.coords());
    let state = module.trunk.forward(
        crate::layer::LayerState { h_l, h_p, x_l, x_p, z },
        &topo,
    );
    let real: Vec<usize> = (0..topo.n_p).collect();
    let probs_tensor = module
        .classifier
        .forward(&state.h_p.gather_rows(&real))
        .sigmoid();
    let probs = probs_tensor.to_vec();
    let coords = protein.coords();
    let hard = hard_center(&probs, &coords);
    let gumbel_t = gumbel_center(&probs_tensor, &normalize_coords(&coords), cfg.tau_e, rng);
    let gv = gumbel_t.to_vec();
    let gumbel = geom::scale([gv[0], gv[1], gv[2]], NORM_SCALE);
    PocketPrediction {
        decided_center: hard.unwrap_or(gumbel),
        probs,
        probs_tensor,
        hard_center: hard,
        gumbel_center: gumbel,
        gumbel_center_tensor: gumbel_t,
    }
}

/// Binary cross-entropy over residue labels.
pub fn classification_loss(probs: &Tensor, labels: &[bool]) -> Tensor {
    let l: Vec<f64> = labels.iter().map(|&b| f64::from(b)).collect();
    probs.bce(&l, 1e-12)
}

/// Huber penalty pulling the Gumbel center toward the native center; both
/// arguments in normalized units.
pub fn center_constraint_loss(center: &Tensor, native: Vec3) -> Tensor {
    center.huber(&Tensor::constant(1, 3, native.to_vec()), 1.0)
}

pub fn pocket_loss(classification: Tensor, center: Tensor, alpha: f64) -> PocketLossReport {
    let combined = classification.add(&center.scale(alpha));
    PocketLossReport {
        classification,
        center,
        combined,
        alpha,
    }
}

/// Crop the 20-angstrom sphere around the decided center.
pub fn decide_pocket(
    prediction: &PocketPrediction,
    protein: &ProteinGraph,
) -> Result<PocketSubgraph, ComplexError> {
    extract_pocket(protein, prediction.decided_center, POCKET_RADIUS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rigid_motion;
    use crate::nn::{fd_grad, grad_rel_err};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_setup(seed: u64, n_l: usize, n_p: usize) -> (PocketModule, ModelConfig, LigandGraph, ProteinGraph) {
        let mut r = rng(seed);
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let module = PocketModule::new(&mut store, "pocket", &cfg, &mut r);
        let ligand = crate::model::tests::toy_ligand(&mut r, n_l);
        let protein = crate::model::tests::toy_protein(&mut r, n_p);
        (module, cfg, ligand, protein)
    }

    #[test]
    fn hard_center_uniform_positive_is_residue_mean() {
        let coords = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [4.0, 6.0, -3.0]];
        let c = hard_center(&[1.0, 1.0, 1.0], &coords).unwrap();
        assert_eq!(c, geom::centroid(&coords));
        assert!(hard_center(&[0.2, 0.3, 0.1], &coords).is_none());
    }

    #[test]
    fn gumbel_weights_sum_to_one_and_argmax_ignores_tau() {
        let mut r = rng(3);
        let n = 7;
        let probs_v: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
        let probs = Tensor::constant(n, 1, probs_v.clone());
        let coords: Vec<Vec3> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        for tau in [0.1, 1.0, 7.0] {
            let mut rr = rng(11);
            let g: Vec<f64> = (0..n).map(|_| sample_gumbel(&mut rr)).collect();
            // argmax of the perturbed log-probs does not depend on tau
            let argmax = (0..n)
                .max_by(|&a, &b| {
                    let va = probs_v[a].ln() + g[a];
                    let vb = probs_v[b].ln() + g[b];
                    va.partial_cmp(&vb).unwrap()
                })
                .unwrap();
            let mut rr = rng(11);
            let c = gumbel_center(&probs, &coords, tau, &mut rr).to_vec();
            assert!(c[0] >= 0.0 && c[0] <= (n - 1) as f64, "inside convex hull");
            if tau < 0.2 {
                assert!((c[0] - argmax as f64).abs() < 0.05, "low tau concentrates on argmax");
            }
        }
    }

    #[test]
    fn gumbel_center_limits() {
        let coords = vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        // one prob far larger, near-zero temperature: picks that residue.
        // Gumbel noise is bounded for a fixed seed, so shrink tau until the
        // log-prob gap dominates.
        let probs = Tensor::constant(3, 1, vec![1e-6, 1.0 - 2e-6, 1e-6]);
        let mut r = rng(5);
        let c = gumbel_center(&probs, &coords, 0.01, &mut r).to_vec();
        assert!(geom::dist([c[0], c[1], c[2]], coords[1]) < 1e-6);
        // equal probs with g = 0 is the centroid; emulate g = 0 via huge tau
        let probs = Tensor::constant(3, 1, vec![0.5; 3]);
        let mut r = rng(5);
        let c = gumbel_center(&probs, &coords, 1e9, &mut r).to_vec();
        assert!(geom::dist([c[0], c[1], c[2]], geom::centroid(&coords)) < 1e-6);
    }

    #[test]
    fn gumbel_max_identity_monte_carlo() {
        // empirical pick frequency of argmax(log p + g) matches softmax(log p)
        let probs_v = [0.6, 0.25, 0.1, 0.05];
        let z: f64 = probs_v.iter().sum();
        let mut counts = [0usize; 4];
        let mut r = rng(77);
        let n = 100_000;
        for _ in 0..n {
            let scores: Vec<f64> = probs_v.iter().map(|p| p.ln() + sample_gumbel(&mut r)).collect();
            let best = (0..4)
                .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
                .unwrap();
            counts[best] += 1;
        }
        for i in 0..4 {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - probs_v[i] / z).abs() < 0.01, "class {i}: {freq}");
        }
    }

    #[test]
    fn classification_loss_values() {
        let labels = [true, false, true];
        let perfect = Tensor::constant(3, 1, vec![1.0, 0.0, 1.0]);
        assert!(classification_loss(&perfect, &labels).value() < 1e-9);
        let half = Tensor::constant(3, 1, vec![0.5; 3]);
        let v = classification_loss(&half, &labels).value();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn flipping_one_label_changes_bce_by_expected_amount() {
        let mut r = rng(9);
        let n = 10;
        let probs_v: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..0.9)).collect();
        let probs = Tensor::constant(n, 1, probs_v.clone());
        let mut labels = vec![true; n];
        let a = classification_loss(&probs, &labels).value();
        labels[4] = false;
        let b = classification_loss(&probs, &labels).value();
        let p = probs_v[4];
        let expect = ((-(1.0 - p).ln()) - (-p.ln())) / n as f64;
        assert!((b - a - expect).abs() < 1e-12);
    }

    #[test]
    fn center_constraint_values_and_gradient() {
        let c = Tensor::constant(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(center_constraint_loss(&c, [1.0, 2.0, 3.0]).value(), 0.0);
        let c = Tensor::constant(1, 3, vec![0.5, 0.0, 0.0]);
        let v = center_constraint_loss(&c, [0.0, 0.0, 0.0]).value();
        assert!((v - 0.125 / 3.0).abs() < 1e-14);

        // gradient through the Gumbel weights to the probabilities
        let mut r = rng(13);
        let n = 5;
        let base: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..0.8)).collect();
        let coords: Vec<Vec3> = (0..n).map(|_| {
            [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]
        }).collect();
        let probs = Tensor::leaf(n, 1, base.clone(), true);
        let mut gr = rng(31);
        let loss = center_constraint_loss(&gumbel_center(&probs, &coords, 1.0, &mut gr), [0.3, -0.2, 0.1]);
        loss.backward().unwrap();
        let analytic = probs.grad().unwrap();
        let mut f = |v: &[f64]| {
            let p = Tensor::constant(n, 1, v.to_vec());
            let mut gr = rng(31);
            center_constraint_loss(&gumbel_center(&p, &coords, 1.0, &mut gr), [0.3, -0.2, 0.1]).value()
        };
        let numeric = fd_grad(&mut f, &base, 1e-6);
        assert!(grad_rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn pocket_loss_composition() {
        let rep = pocket_loss(Tensor::scalar(1.0), Tensor::scalar(0.5), 0.2);
        assert!((rep.combined.value() - 1.1).abs() < 1e-14);
        let rep = pocket_loss(Tensor::scalar(0.7), Tensor::scalar(0.0), 0.2);
        assert!((rep.combined.value() - 0.7).abs() < 1e-14);
    }

    #[test]
    fn predict_is_translation_equivariant_and_prob_invariant() {
        let (module, cfg, ligand, protein) = toy_setup(41, 4, 6);
        let base = predict_pocket(&module, &cfg, &ligand, &protein, &mut rng(100));
        let mut mr = rng(55);
        for _ in 0..3 {
            let m = random_rigid_motion(&mut mr, 8.0);
            let lig2 = ligand.with_coords(&m.apply_all(&ligand.coords()));
            let prot2 = ProteinGraph::new(
                protein
                    .residues
                    .iter()
                    .map(|res| (res.aa_code.clone(), m.apply(res.coord)))
                    .collect(),
            )
            .unwrap();
            let moved = predict_pocket(&module, &cfg, &lig2, &prot2, &mut rng(100));
            for (a, b) in base.probs.iter().zip(&moved.probs) {
                assert!((a - b).abs() < 1e-8, "probabilities are geometry-invariant");
            }
            let expect = m.apply(base.decided_center);
            assert!(geom::dist(expect, moved.decided_center) < 1e-6);
        }
    }

    #[test]
    fn decide_pocket_membership_is_brute_force_sphere() {
        let (module, cfg, ligand, protein) = toy_setup(42, 4, 10);
        let pred = predict_pocket(&module, &cfg, &ligand, &protein, &mut rng(7));
        let pocket = decide_pocket(&pred, &protein).unwrap();
        let expect: Vec<usize> = protein
            .coords()
            .iter()
            .enumerate()
            .filter(|(_, &c)| geom::dist(c, pred.decided_center) <= POCKET_RADIUS)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(pocket.parent_indices, expect);
    }

    #[test]
    fn all_negative_probs_fall_back_to_gumbel_center() {
        let coords = vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let probs = vec![0.1, 0.2];
        assert!(hard_center(&probs, &coords).is_none());
        // fallback wiring: decided center equals the gumbel center
        let (module, cfg, ligand, protein) = toy_setup(43, 3, 5);
        let pred = predict_pocket(&module, &cfg, &ligand, &protein, &mut rng(1));
        if pred.hard_center.is_none() {
            assert_eq!(pred.decided_center, pred.gumbel_center);
        } else {
            assert_eq!(pred.decided_center, pred.hard_center.unwrap());
        }
    }
}
