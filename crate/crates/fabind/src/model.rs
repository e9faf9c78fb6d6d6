//! Shared model trunk: feature encoders, the stacked layer forward pass,
//! and the configuration for both the pocket and docking towers.
//!
//! The trunk works in normalized coordinates (angstroms divided by
//! [`NORM_SCALE`]); callers normalize on the way in and unnormalize on the
//! way out. Graph topology (internal edges, interfacial contacts) is always
//! decided from angstrom geometry, so the interfacial cutoff passed to the
//! mask is `C_EX / NORM_SCALE` when coordinates are normalized.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::complex::{
    LigandGraph, ProteinGraph, AA_TYPE_COUNT, C_EX, LIGAND_FEATURE_DIM, RESIDUE_FEATURE_DIM,
};
use crate::geom::{self, Vec3};
use crate::layer::{
    coords_tensor, fabind_layer_forward, independent_mp, interfacial_mask, FabindLayerParams,
    GraphTopo, IndependentParams, LayerConfig, LayerState, OpmParams,
};
use crate::nn::{Linear, ParamStore};

/// Coordinate normalization scale: the network sees angstroms divided by 5.
pub const NORM_SCALE: f64 = 5.0;

pub fn normalize_coords(coords: &[Vec3]) -> Vec<Vec3> {
    coords.iter().map(|c| geom::scale(*c, 1.0 / NORM_SCALE)).collect()
}

pub fn unnormalize_coords(coords: &[Vec3]) -> Vec<Vec3> {
    coords.iter().map(|c| geom::scale(*c, NORM_SCALE)).collect()
}

/// Interfacial contact cutoff in normalized units.
pub fn contact_cutoff_normalized() -> f64 {
    C_EX / NORM_SCALE
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Pocket tower width and depth (one layer by default).
    pub pocket_hidden: usize,
    pub pocket_layers: usize,
    /// Docking tower width and depth.
    pub dock_hidden: usize,
    pub dock_layers: usize,
    /// Refinement rounds at inference.
    pub refine_iterations: usize,
    pub pair_dim: usize,
    pub opm_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub coord_clamp: f64,
    /// Gumbel-Softmax temperature for the pocket center.
    pub tau_e: f64,
    /// Pocket loss center-term weight.
    pub alpha_pocket: f64,
    /// Docking loss distance-map weight.
    pub beta: f64,
    /// Distance-map consistency weight.
    pub gamma: f64,
    /// Conformer-consistency (local atomic structure) weight.
    pub w_las: f64,
}

impl ModelConfig {
    /// Full-scale configuration (heavy; use for real training runs).
    pub fn full_scale() -> ModelConfig {
        ModelConfig {
            pocket_hidden: 128,
            pocket_layers: 1,
            dock_hidden: 512,
            dock_layers: 4,
            refine_iterations: 8,
            pair_dim: 64,
            opm_dim: 16,
            heads: 4,
            mlp_hidden: 128,
            coord_clamp: 20.0,
            tau_e: 1.0,
            alpha_pocket: 0.2,
            beta: 1.0,
            gamma: 1.0,
            w_las: 1.0,
        }
    }

    /// Small configuration for tests and desk-scale training.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            pocket_hidden: 32,
            pocket_layers: 1,
            dock_hidden: 32,
            dock_layers: 2,
            refine_iterations: 8,
            pair_dim: 16,
            opm_dim: 8,
            heads: 2,
            mlp_hidden: 32,
            coord_clamp: 20.0,
            tau_e: 1.0,
            alpha_pocket: 0.2,
            beta: 1.0,
            gamma: 1.0,
            w_las: 1.0,
        }
    }

    pub fn pocket_layer_config(&self) -> LayerConfig {
        LayerConfig {
            hidden: self.pocket_hidden,
            pair_dim: self.pair_dim,
            opm_dim: self.opm_dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            coord_clamp: self.coord_clamp,
            update_protein_coords: false,
        }
    }

    pub fn dock_layer_config(&self) -> LayerConfig {
        LayerConfig {
            hidden: self.dock_hidden,
            pair_dim: self.pair_dim,
            opm_dim: self.opm_dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            coord_clamp: self.coord_clamp,
            update_protein_coords: false,
        }
    }
}

/// Input encoders for one tower: atom features and residue types to node
/// embeddings, learned global-node embeddings, and the initial pair grid.
pub struct Encoders {
    pub lig_embed: Linear,
    /// Learned residue-type table, one row per type (incl. unknown).
    pub res_table: Tensor,
    pub res_embed: Linear,
    pub lig_global: Tensor,
    pub prot_global: Tensor,
    pub init_opm: OpmParams,
}

impl Encoders {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        Encoders {
            lig_embed: Linear::new(store, &format!("{prefix}.lig_embed"), LIGAND_FEATURE_DIM, d, rng),
            res_table: store.create(
                &format!("{prefix}.res_table"),
                AA_TYPE_COUNT,
                RESIDUE_FEATURE_DIM,
                RESIDUE_FEATURE_DIM,
                rng,
            ),
            res_embed: Linear::new(store, &format!("{prefix}.res_embed"), RESIDUE_FEATURE_DIM, d, rng),
            lig_global: store.create(&format!("{prefix}.lig_global"), 1, d, d, rng),
            prot_global: store.create(&format!("{prefix}.prot_global"), 1, d, d, rng),
            init_opm: OpmParams::new(store, &format!("{prefix}.init_opm"), cfg, rng),
        }
    }

    /// `(n_l, d)` real-atom embeddings.
    pub fn embed_ligand(&self, ligand: &LigandGraph) -> Tensor {
        let n = ligand.len();
        let mut vals = Vec::with_capacity(n * LIGAND_FEATURE_DIM);
        for a in &ligand.atoms {
            vals.extend_from_slice(&a.feature);
        }
        self.lig_embed.forward(&Tensor::constant(n, LIGAND_FEATURE_DIM, vals))
    }

    /// `(n_p, d)` residue embeddings from the learned type table.
    pub fn embed_protein(&self, protein: &ProteinGraph) -> Tensor {
        let ids: Vec<usize> = protein.residues.iter().map(|r| r.type_id).collect();
        self.res_embed.forward(&self.res_table.gather_rows(&ids))
    }
}

/// A stack of layers plus an optional trailing independent pass, with its
/// own encoders.
pub struct Trunk {
    pub cfg: LayerConfig,
    pub enc: Encoders,
    pub layers: Vec<FabindLayerParams>,
    pub final_independent: Option<(IndependentParams, IndependentParams)>,
}

impl Trunk {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: LayerConfig,
        n_layers: usize,
        final_independent: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let enc = Encoders::new(store, &format!("{prefix}.enc"), &cfg, rng);
        let layers = (0..n_layers)
            .map(|i| FabindLayerParams::new(store, &format!("{prefix}.layer{i}"), &cfg, rng))
            .collect();
        let final_independent = final_independent.then(|| {
            (
                IndependentParams::new(store, &format!("{prefix}.final_lig"), &cfg, rng),
                IndependentParams::new(store, &format!("{prefix}.final_prot"), &cfg, rng),
            )
        });
        Trunk {
            cfg,
            enc,
            layers,
            final_independent,
        }
    }

    /// Initial embeddings for a complex: `(h_l, h_p, z)` with the global
    /// rows appended to `h_l`/`h_p`.
    pub fn initial_embeddings(&self, ligand: &LigandGraph, protein: &ProteinGraph) -> (Tensor, Tensor, Tensor) {
        let h_l = self.enc.embed_ligand(ligand);
        let h_p = self.enc.embed_protein(protein);
        let z = self.enc.init_opm.forward(&h_l, &h_p);
        (
            Tensor::concat_rows(&[&h_l, &self.enc.lig_global]),
            Tensor::concat_rows(&[&h_p, &self.enc.prot_global]),
            z,
        )
    }

    /// Initial coordinate tensors in normalized units. Global nodes sit at
    /// their component centroid so the whole pipeline stays equivariant.
    pub fn initial_coords(&self, lig_coords: &[Vec3], prot_coords: &[Vec3]) -> (Tensor, Tensor) {
        let lig_n = normalize_coords(lig_coords);
        let prot_n = normalize_coords(prot_coords);
        let mut xl = lig_n.clone();
        xl.push(geom::centroid(&lig_n));
        let mut xp = prot_n.clone();
        xp.push(geom::centroid(&prot_n));
        (coords_tensor(&xl), coords_tensor(&xp))
    }

    /// One pass through the full stack. The interfacial mask is built once
    /// from the entry coordinates (angstrom geometry).
    pub fn forward(&self, state: LayerState, topo: &GraphTopo) -> LayerState {
        let mask = interfacial_mask(
            &state.lig_coords(topo.n_l),
            &state.prot_coords(topo.n_p),
            contact_cutoff_normalized(),
        );
        let mut state = state;
        for layer in &self.layers {
            state = fabind_layer_forward(layer, &self.cfg, &state, topo, &mask);
        }
        if let Some((lig_ind, prot_ind)) = &self.final_independent {
            let (h_l, x_l) = independent_mp(lig_ind, &self.cfg, &state.h_l, &state.x_l, &topo.lig_edges, true);
            let (h_p, x_p) = independent_mp(
                prot_ind,
                &self.cfg,
                &state.h_p,
                &state.x_p,
                &topo.prot_edges,
                self.cfg.update_protein_coords,
            );
            state = LayerState { h_l, h_p, x_l, x_p, z: state.z };
        }
        state
    }
}

pub fn build_topo(ligand: &LigandGraph, protein: &ProteinGraph) -> GraphTopo {
    GraphTopo::build(ligand.len(), protein.len(), &ligand.bonds, &protein.edges, true)
}

/// Both towers plus their shared parameter registry.
pub struct FabindModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pocket: crate::pocket::PocketModule,
    pub dock: crate::docking::DockingModule,
}

impl FabindModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> FabindModel {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pocket = crate::pocket::PocketModule::new(&mut store, "pocket", &cfg, &mut rng);
        let dock = crate::docking::DockingModule::new(&mut store, "dock", &cfg, &mut rng);
        FabindModel {
            cfg,
            store,
            pocket,
            dock,
        }
    }
}

/// Flat key=value serialization of the configuration (checkpoint header
/// and train-config file format).
pub fn render_config(cfg: &ModelConfig) -> String {
    format!(
        "pocket_hidden={}\npocket_layers={}\ndock_hidden={}\ndock_layers={}\nrefine_iterations={}\npair_dim={}\nopm_dim={}\nheads={}\nmlp_hidden={}\ncoord_clamp={}\ntau_e={}\nalpha_pocket={}\nbeta={}\ngamma={}\nw_las={}\n",
        cfg.pocket_hidden,
        cfg.pocket_layers,
        cfg.dock_hidden,
        cfg.dock_layers,
        cfg.refine_iterations,
        cfg.pair_dim,
        cfg.opm_dim,
        cfg.heads,
        cfg.mlp_hidden,
        cfg.coord_clamp,
        cfg.tau_e,
        cfg.alpha_pocket,
        cfg.beta,
        cfg.gamma,
        cfg.w_las,
    )
}

/// Parse key=value lines into a configuration, starting from `base` so a
/// partial file overrides only what it names.
pub fn parse_config(text: &str, base: ModelConfig) -> Result<ModelConfig, String> {
    let mut cfg = base;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got `{line}`", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let us = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        let fl = |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
        match key {
            "pocket_hidden" => cfg.pocket_hidden = us(value)?,
            "pocket_layers" => cfg.pocket_layers = us(value)?,
            "dock_hidden" => cfg.dock_hidden = us(value)?,
            "dock_layers" => cfg.dock_layers = us(value)?,
            "refine_iterations" => cfg.refine_iterations = us(value)?,
            "pair_dim" => cfg.pair_dim = us(value)?,
            "opm_dim" => cfg.opm_dim = us(value)?,
            "heads" => cfg.heads = us(value)?,
            "mlp_hidden" => cfg.mlp_hidden = us(value)?,
            "coord_clamp" => cfg.coord_clamp = fl(value)?,
            "tau_e" => cfg.tau_e = fl(value)?,
            "alpha_pocket" => cfg.alpha_pocket = fl(value)?,
            "beta" => cfg.beta = fl(value)?,
            "gamma" => cfg.gamma = fl(value)?,
            "w_las" => cfg.w_las = fl(value)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::complex::AtomDescriptor;
    use crate::geom::random_rigid_motion;
    use crate::layer::tensor_coords;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn carbon(coord: Vec3) -> (AtomDescriptor, Vec3) {
        (
            AtomDescriptor {
                element: "C".into(),
                degree: 1,
                h_count: 3,
                valence: 4,
                charge: 0,
                aromatic: false,
            },
            coord,
        )
    }

    pub(crate) fn toy_ligand(rng: &mut ChaCha8Rng, n: usize) -> LigandGraph {
        let atoms: Vec<_> = (0..n)
            .map(|i| {
                carbon([
                    i as f64 * 1.5 + rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ])
            })
            .collect();
        let bonds: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        LigandGraph::new(atoms, bonds).unwrap()
    }

    pub(crate) fn toy_protein(rng: &mut ChaCha8Rng, n: usize) -> ProteinGraph {
        let residues: Vec<(String, Vec3)> = (0..n)
            .map(|i| {
                (
                    "ALA".to_string(),
                    [
                        i as f64 * 3.0 + rng.gen_range(-1.0..1.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                    ],
                )
            })
            .collect();
        ProteinGraph::new(residues).unwrap()
    }

    #[test]
    fn normalize_is_exact_inverse() {
        let coords = vec![[5.0, 10.0, -5.0], [1.25, 0.0, 3.75]];
        let n = normalize_coords(&coords);
        assert_eq!(n[0], [1.0, 2.0, -1.0]);
        assert_eq!(unnormalize_coords(&n), coords);
        // arbitrary values round-trip to machine precision
        let mut r = rng(1);
        for _ in 0..100 {
            let c = [r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)];
            let back = unnormalize_coords(&normalize_coords(&[c]))[0];
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() <= c[k].abs() * 1e-15);
            }
        }
    }

    #[test]
    fn normalized_distances_scale_by_exactly_one_fifth() {
        let a = [1.0, 2.0, 3.0];
        let b = [-2.0, 0.5, 7.0];
        let n = normalize_coords(&[a, b]);
        assert!((geom::dist(n[0], n[1]) - geom::dist(a, b) / 5.0).abs() < 1e-15);
    }

    #[test]
    fn trunk_forward_is_e3_equivariant() {
        let mut r = rng(21);
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, "t", cfg.dock_layer_config(), 2, true, &mut r);
        let ligand = toy_ligand(&mut r, 4);
        let protein = toy_protein(&mut r, 5);
        let topo = build_topo(&ligand, &protein);
        let (h_l, h_p, z) = trunk.initial_embeddings(&ligand, &protein);

        let run = |lig_coords: &[Vec3], prot_coords: &[Vec3]| {
            let (x_l, x_p) = trunk.initial_coords(lig_coords, prot_coords);
            trunk.forward(
                LayerState {
                    h_l: h_l.clone(),
                    h_p: h_p.clone(),
                    x_l,
                    x_p,
                    z: z.clone(),
                },
                &topo,
            )
        };
        let base = run(&ligand.coords(), &protein.coords());
        for _ in 0..5 {
            let m = random_rigid_motion(&mut r, 6.0);
            let moved = run(&m.apply_all(&ligand.coords()), &m.apply_all(&protein.coords()));
            // embeddings invariant
            let dh: f64 = base
                .h_l
                .to_vec()
                .iter()
                .zip(moved.h_l.to_vec())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dh < 1e-8, "dh {dh}");
            // coordinates equivariant: motion acts in angstroms, so in
            // normalized units the translation shrinks by the scale
            let base_ang = unnormalize_coords(&tensor_coords(&base.x_l, topo.n_l));
            let moved_ang = unnormalize_coords(&tensor_coords(&moved.x_l, topo.n_l));
            for (b, mv) in base_ang.iter().zip(&moved_ang) {
                let expect = m.apply(*b);
                assert!(geom::dist(expect, *mv) < 1e-7, "{expect:?} vs {mv:?}");
            }
        }
    }

    #[test]
    fn initial_embeddings_depend_on_residue_type() {
        let mut r = rng(22);
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, "t", cfg.pocket_layer_config(), 1, false, &mut r);
        let p1 = ProteinGraph::new(vec![("ALA".into(), [0.0; 3])]).unwrap();
        let p2 = ProteinGraph::new(vec![("TRP".into(), [0.0; 3])]).unwrap();
        let e1 = trunk.enc.embed_protein(&p1).to_vec();
        let e2 = trunk.enc.embed_protein(&p2).to_vec();
        assert_ne!(e1, e2);
    }
}
