//! Self-contained gradient and equivariance check suites, shared by the
//! CLI (`grad-check`, `equiv-check`) and the integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::complex::ComplexRecord;
use crate::docking::{dock, RefinementPolicy};
use crate::geom::{self, random_rigid_motion, RigidMotion};
use crate::layer::{
    coords_tensor, fabind_layer_forward, independent_mp, interfacial_mask, interfacial_mp,
    tensor_coords, FabindLayerParams, GraphTopo, LayerConfig, LayerState,
};
use crate::model::{FabindModel, ModelConfig};
use crate::nn::{fd_grad, grad_rel_err, Activation, Mlp, ParamStore};
use crate::synth::{generate_synthetic_complex, SyntheticSpec};
use crate::train::{complex_losses, predict_complex, TrainConfig};

pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.value < self.tolerance
    }
}

fn fd_check(
    name: &str,
    tolerance: f64,
    build: &dyn Fn(&Tensor) -> Tensor,
    x0: Vec<f64>,
    rows: usize,
    cols: usize,
) -> CheckResult {
    let x = Tensor::leaf(rows, cols, x0.clone(), true);
    let loss = build(&x);
    loss.backward().unwrap();
    let analytic = x.grad().unwrap();
    let mut f = |v: &[f64]| build(&Tensor::constant(rows, cols, v.to_vec())).value();
    let numeric = fd_grad(&mut f, &x0, 1e-6);
    CheckResult {
        name: name.to_string(),
        value: grad_rel_err(&analytic, &numeric),
        tolerance,
    }
}

/// Finite-difference checks over every differentiable primitive.
pub fn grad_check_primitives(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_vec = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    };
    let tol = 1e-6;
    let mut out = Vec::new();

    let w = Tensor::constant(3, 2, rand_vec(6, -1.0, 1.0));
    out.push(fd_check("matmul+add_row", tol, &|x| {
        x.matmul(&w).add_row(&Tensor::constant(1, 2, vec![0.3, -0.2])).square().sum()
    }, rand_vec(6, -1.0, 1.0), 2, 3));

    out.push(fd_check("mul+sub", tol, &|x| {
        let a = x.narrow_cols(0, 2);
        let b = x.narrow_cols(2, 2);
        a.mul(&b).sub(&a).square().sum()
    }, rand_vec(8, -1.0, 1.0), 2, 4));

    out.push(fd_check("relu", tol, &|x| x.relu().square().sum(), rand_vec(6, 0.1, 1.0), 2, 3));
    out.push(fd_check("softplus", tol, &|x| x.softplus().square().sum(), rand_vec(6, -2.0, 2.0), 2, 3));
    out.push(fd_check("sigmoid", tol, &|x| x.sigmoid().square().sum(), rand_vec(6, -2.0, 2.0), 2, 3));
    out.push(fd_check("exp", tol, &|x| x.exp().sum(), rand_vec(4, -1.0, 1.0), 2, 2));
    out.push(fd_check("ln", tol, &|x| x.ln_clamped(1e-12).sum(), rand_vec(4, 0.5, 2.0), 2, 2));
    out.push(fd_check("sqrt", tol, &|x| x.sqrt().sum(), rand_vec(4, 0.5, 2.0), 2, 2));
    out.push(fd_check("mean", tol, &|x| x.square().mean(), rand_vec(6, -1.0, 1.0), 3, 2));
    out.push(fd_check("sum_cols", tol, &|x| x.sum_cols().square().sum(), rand_vec(6, -1.0, 1.0), 2, 3));
    out.push(fd_check("mul_col", tol, &|x| {
        let a = x.narrow_cols(0, 3);
        let c = x.narrow_cols(3, 1);
        a.mul_col(&c).square().sum()
    }, rand_vec(8, -1.0, 1.0), 2, 4));
    out.push(fd_check("row_softmax", tol, &|x| {
        x.row_softmax().square().sum()
    }, rand_vec(8, -1.0, 1.0), 2, 4));
    out.push(fd_check("masked_row_softmax", tol, &|x| {
        x.masked_row_softmax(&[true, false, true, true, true, false]).square().sum()
    }, rand_vec(6, -1.0, 1.0), 2, 3));
    out.push(fd_check("gather_scatter", tol, &|x| {
        x.gather_rows(&[2, 0, 1, 2]).scatter_add_rows(&[0, 0, 1, 2], 3).square().sum()
    }, rand_vec(9, -1.0, 1.0), 3, 3));
    out.push(fd_check("transpose+reshape+concat", tol, &|x| {
        let t = x.transpose().reshape(2, 3);
        Tensor::concat_cols(&[&t, &t]).square().sum()
    }, rand_vec(6, -1.0, 1.0), 2, 3));
    let target = Tensor::constant(2, 3, rand_vec(6, -1.0, 1.0));
    out.push(fd_check("huber", tol, &|x| x.huber(&target, 1.0), rand_vec(6, -2.0, 2.0), 2, 3));
    out.push(fd_check("bce", tol, &|x| {
        x.sigmoid().bce(&[1.0, 0.0, 1.0, 0.0], 1e-12)
    }, rand_vec(4, -2.0, 2.0), 4, 1));
    out.push(fd_check("pair_outer", tol, &|x| {
        let a = x.narrow_cols(0, 2);
        let b = x.narrow_cols(2, 2);
        a.pair_outer(&b).square().sum()
    }, rand_vec(8, -1.0, 1.0), 2, 4));
    out.push(fd_check("clamp", tol, &|x| x.clamp(-0.5, 0.5).square().sum(), rand_vec(6, -0.4, 0.4), 2, 3));

    // a two-layer perceptron end to end through its input
    let x0 = rand_vec(6, -1.0, 1.0);
    let mut store = ParamStore::new();
    let mut mlp_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let mlp = Mlp::new(&mut store, "m", 3, 5, 2, Activation::Softplus, &mut mlp_rng);
    out.push(fd_check("mlp", tol, &|x| mlp.forward(x).square().sum(), x0, 2, 3));
    out
}

/// Finite-difference check of the composed layer with respect to a slice
/// of its parameters.
pub fn grad_check_layer(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LayerConfig {
        hidden: 6,
        pair_dim: 4,
        opm_dim: 3,
        heads: 2,
        mlp_hidden: 6,
        coord_clamp: 20.0,
        update_protein_coords: false,
    };
    let mut store = ParamStore::new();
    let params = FabindLayerParams::new(&mut store, "l", &cfg, &mut rng);
    let topo = GraphTopo::build(3, 4, &[(0, 1), (1, 2)], &[(0, 1), (2, 3)], false);
    let h_l0: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let h_p0: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let z0: Vec<f64> = (0..12 * 4).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let xl: Vec<geom::Vec3> = (0..3).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let xp: Vec<geom::Vec3> = (0..4).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let mask = vec![true; 12];

    let run = || {
        let state = LayerState {
            h_l: Tensor::constant(3, 6, h_l0.clone()),
            h_p: Tensor::constant(4, 6, h_p0.clone()),
            x_l: coords_tensor(&xl),
            x_p: coords_tensor(&xp),
            z: Tensor::constant(12, 4, z0.clone()),
        };
        let out = fabind_layer_forward(&params, &cfg, &state, &topo, &mask);
        out.x_l.square().sum().add(&out.h_l.square().sum().scale(0.1))
    };

    // check a handful of parameter tensors end to end
    let mut worst = 0.0f64;
    for (name, p) in store.iter() {
        if !(name.contains("phi_x.l1") || name.contains("lig_q.w") || name.contains("pair_update.out.w")) {
            continue;
        }
        store.zero_grad();
        run().backward().unwrap();
        let Some(analytic) = p.grad() else {
            continue; // not part of this graph (frozen protein side)
        };
        let base = p.to_vec();
        let mut f = |v: &[f64]| {
            p.set_values(v.to_vec());
            let out = run().value();
            out
        };
        let numeric = fd_grad(&mut f, &base, 1e-5);
        p.set_values(base);
        // floor the denominator at a fraction of the gradient scale so
        // finite-difference roundoff on near-zero entries doesn't dominate
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale).max(1e-9))
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    CheckResult {
        name: "full_layer_params".into(),
        value: worst,
        tolerance: 1e-4,
    }
}

/// Finite-difference check of the combined pocket + docking training loss
/// against a sample of parameter entries on a tiny complex.
pub fn grad_check_end_to_end(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SyntheticSpec {
        residue_range: (8, 8),
        atom_range: (4, 4),
        ..SyntheticSpec::default()
    };
    let rec = generate_synthetic_complex(&spec, &mut rng);
    let mcfg = ModelConfig {
        pocket_hidden: 8,
        dock_hidden: 8,
        dock_layers: 1,
        pair_dim: 4,
        opm_dim: 3,
        heads: 2,
        mlp_hidden: 8,
        refine_iterations: 1,
        ..ModelConfig::toy()
    };
    let tcfg = TrainConfig {
        model: mcfg,
        pocket_shift: 0.0,
        ..TrainConfig::default()
    };
    let model = FabindModel::new(mcfg, seed);

    let loss_value = |model: &FabindModel| {
        let mut r = ChaCha8Rng::seed_from_u64(999);
        complex_losses(model, &rec, false, &tcfg, &mut r).unwrap().total.value()
    };

    model.store.zero_grad();
    {
        let mut r = ChaCha8Rng::seed_from_u64(999);
        complex_losses(&model, &rec, false, &tcfg, &mut r)
            .unwrap()
            .total
            .backward()
            .unwrap();
    }
    model.store.ensure_grads();

    // sample entries across several parameter tensors
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst = 0.0f64;
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for name in names.iter().filter(|n| {
        n.contains("classifier.l1") || n.contains("dist_head.l1") || n.contains("enc.lig_embed.w")
            || n.contains("layer0.interfacial.lig.phi_xv.l1")
    }) {
        let p = model.store.get(name).unwrap().clone();
        let analytic = p.grad().unwrap();
        let base = p.to_vec();
        for _ in 0..2 {
            let i = probe.gen_range(0..base.len());
            let h = 1e-5;
            let mut v = base.clone();
            v[i] = base[i] + h;
            p.set_values(v.clone());
            let fp = loss_value(&model);
            v[i] = base[i] - h;
            p.set_values(v);
            let fm = loss_value(&model);
            p.set_values(base.clone());
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    CheckResult {
        name: "end_to_end_loss".into(),
        value: worst,
        tolerance: 1e-4,
    }
}

fn apply_motion(m: &RigidMotion, x: &Tensor) -> Tensor {
    coords_tensor(&m.apply_all(&tensor_coords(x, x.rows())))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.to_vec()
        .iter()
        .zip(b.to_vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Equivariance deviations for each block and for the full docking
/// pipeline, over `trials` random rigid motions (reflections included).
pub fn equiv_check(seed: u64, trials: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LayerConfig {
        hidden: 8,
        pair_dim: 6,
        opm_dim: 3,
        heads: 2,
        mlp_hidden: 10,
        coord_clamp: 20.0,
        update_protein_coords: false,
    };
    let mut store = ParamStore::new();
    let params = FabindLayerParams::new(&mut store, "l", &cfg, &mut rng);
    let (n_l, n_p) = (6, 9);
    let lig_bonds: Vec<(usize, usize)> = (1..n_l).map(|i| (i - 1, i)).collect();
    let prot_edges: Vec<(usize, usize)> = (1..n_p).map(|i| (i - 1, i)).collect();
    let topo = GraphTopo::build(n_l, n_p, &lig_bonds, &prot_edges, false);
    let h_l = Tensor::constant(n_l, 8, (0..n_l * 8).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let h_p = Tensor::constant(n_p, 8, (0..n_p * 8).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let z = Tensor::constant(n_l * n_p, 6, (0..n_l * n_p * 6).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let xl: Vec<geom::Vec3> = (0..n_l).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    let xp: Vec<geom::Vec3> = (0..n_p).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    let x_l = coords_tensor(&xl);
    let x_p = coords_tensor(&xp);
    let mask = interfacial_mask(&xl, &xp, 10.0);

    let (mut d_ind, mut d_cross, mut d_intf, mut d_layer) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (ih, ix) = independent_mp(&params.lig_ind, &cfg, &h_l, &x_l, &topo.lig_edges, true);
    let (ch_l, ch_p, cz) = crate::layer::cross_attention_update(&params.cross, &cfg, &h_l, &h_p, &z);
    let (fh_l, fh_p, fx_l) = interfacial_mp(&params.interfacial, &cfg, &h_l, &h_p, &x_l, &x_p, &z, &mask);
    let state = LayerState {
        h_l: h_l.clone(),
        h_p: h_p.clone(),
        x_l: x_l.clone(),
        x_p: x_p.clone(),
        z: z.clone(),
    };
    let full = fabind_layer_forward(&params, &cfg, &state, &topo, &mask);

    for _ in 0..trials {
        let m = random_rigid_motion(&mut rng, 10.0);
        let mx_l = apply_motion(&m, &x_l);
        let mx_p = apply_motion(&m, &x_p);

        let (ih2, ix2) = independent_mp(&params.lig_ind, &cfg, &h_l, &mx_l, &topo.lig_edges, true);
        d_ind = d_ind.max(max_diff(&ih, &ih2)).max(max_diff(&apply_motion(&m, &ix), &ix2));

        let (c2_l, c2_p, c2z) = crate::layer::cross_attention_update(&params.cross, &cfg, &h_l, &h_p, &z);
        d_cross = d_cross
            .max(max_diff(&ch_l, &c2_l))
            .max(max_diff(&ch_p, &c2_p))
            .max(max_diff(&cz, &c2z));

        let (f2_l, f2_p, f2x) =
            interfacial_mp(&params.interfacial, &cfg, &h_l, &h_p, &mx_l, &mx_p, &z, &mask);
        d_intf = d_intf
            .max(max_diff(&fh_l, &f2_l))
            .max(max_diff(&fh_p, &f2_p))
            .max(max_diff(&apply_motion(&m, &fx_l), &f2x));

        let moved = LayerState {
            h_l: h_l.clone(),
            h_p: h_p.clone(),
            x_l: mx_l,
            x_p: mx_p,
            z: z.clone(),
        };
        let full2 = fabind_layer_forward(&params, &cfg, &moved, &topo, &mask);
        d_layer = d_layer
            .max(max_diff(&full.h_l, &full2.h_l))
            .max(max_diff(&full.h_p, &full2.h_p))
            .max(max_diff(&apply_motion(&m, &full.x_l), &full2.x_l));
    }

    // full docking pipeline with k = 8 refinement rounds
    let mut d_dock = 0.0f64;
    {
        let spec = SyntheticSpec {
            residue_range: (12, 15),
            atom_range: (6, 10),
            ..SyntheticSpec::default()
        };
        let rec = generate_synthetic_complex(&spec, &mut rng);
        let mcfg = ModelConfig {
            refine_iterations: 8,
            ..ModelConfig::toy()
        };
        let model = FabindModel::new(mcfg, seed ^ 1);
        let lig = crate::complex::place_ligand_at(&rec.ligand, rec.protein.centroid());
        let base = dock(&model.dock, &lig, &rec.protein, &RefinementPolicy { iterations: 8 }).unwrap();
        for _ in 0..trials.min(5) {
            let m = random_rigid_motion(&mut rng, 8.0);
            let lig2 = lig.with_coords(&m.apply_all(&lig.coords()));
            let prot2 = crate::complex::ProteinGraph::new(
                rec.protein
                    .residues
                    .iter()
                    .map(|r| (r.aa_code.clone(), m.apply(r.coord)))
                    .collect(),
            )
            .unwrap();
            let moved = dock(&model.dock, &lig2, &prot2, &RefinementPolicy { iterations: 8 }).unwrap();
            for (b, mv) in base.coords.iter().zip(&moved.coords) {
                d_dock = d_dock.max(geom::dist(m.apply(*b), *mv));
            }
        }
    }

    vec![
        CheckResult { name: "independent_mp".into(), value: d_ind, tolerance: 1e-8 },
        CheckResult { name: "cross_attention".into(), value: d_cross, tolerance: 1e-8 },
        CheckResult { name: "interfacial_mp".into(), value: d_intf, tolerance: 1e-8 },
        CheckResult { name: "full_layer".into(), value: d_layer, tolerance: 1e-8 },
        CheckResult { name: "dock_k8".into(), value: d_dock, tolerance: 1e-6 },
    ]
}

/// Equivariance of the full predict pipeline on a concrete record; used by
/// the acceptance suite.
pub fn predict_equivariance_deviation(
    model: &FabindModel,
    rec: &ComplexRecord,
    motions: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = predict_complex(model, &rec.ligand, &rec.protein, model.cfg.refine_iterations, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..motions {
        let m = random_rigid_motion(&mut rng, 8.0);
        let lig2 = rec.ligand.with_coords(&m.apply_all(&rec.ligand.coords()));
        let prot2 = crate::complex::ProteinGraph::new(
            rec.protein
                .residues
                .iter()
                .map(|r| (r.aa_code.clone(), m.apply(r.coord)))
                .collect(),
        )
        .unwrap();
        let moved = predict_complex(model, &lig2, &prot2, model.cfg.refine_iterations, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (b, mv) in base.pose.iter().zip(&moved.pose) {
            worst = worst.max(geom::dist(m.apply(*b), *mv));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_gradients_pass() {
        for c in grad_check_primitives(1) {
            assert!(c.passed(), "{}: rel err {}", c.name, c.value);
        }
    }

    #[test]
    fn layer_gradient_passes() {
        let c = grad_check_layer(2);
        assert!(c.passed(), "{}: rel err {}", c.name, c.value);
    }

    #[test]
    fn end_to_end_gradient_passes() {
        let c = grad_check_end_to_end(3);
        assert!(c.passed(), "{}: rel err {}", c.name, c.value);
    }

    #[test]
    fn equivariance_suite_passes() {
        for c in equiv_check(4, 5) {
            assert!(c.passed(), "{}: deviation {}", c.name, c.value);
        }
    }
}
