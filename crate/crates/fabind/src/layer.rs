//! The equivariant message-passing layer: pair embeddings via an outer
//! product module, independent (intra-component) message passing,
//! cross-attention over all pairs, and interfacial attention over contact
//! edges.
//!
//! Embedding updates read only squared distances, so they are invariant
//! under rigid motions; coordinate updates are sums of scaled difference
//! vectors, so they transform with the motion. Protein coordinates are
//! frozen throughout (rigid receptor).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::geom::Vec3;
use crate::nn::{Activation, Linear, Mlp, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct LayerConfig {
    /// Node embedding dimension d.
    pub hidden: usize,
    /// Pair embedding dimension.
    pub pair_dim: usize,
    /// Inner projection width of the outer product module.
    pub opm_dim: usize,
    /// Cross-attention head count; per-head dim is `hidden / heads`.
    pub heads: usize,
    /// Hidden width of the small MLPs.
    pub mlp_hidden: usize,
    /// Coordinate-update scalars are clamped to `[-coord_clamp, coord_clamp]`.
    pub coord_clamp: f64,
    pub update_protein_coords: bool,
}

impl LayerConfig {
    pub fn head_dim(&self) -> usize {
        assert_eq!(self.hidden % self.heads, 0, "hidden must divide by heads");
        self.hidden / self.heads
    }
}

/// Node topology for one complex, in model index space. Real nodes come
/// first; when global nodes are enabled each component gets one extra node
/// at the end of its block.
#[derive(Clone, Debug)]
pub struct GraphTopo {
    pub n_l: usize,
    pub n_p: usize,
    pub has_global: bool,
    /// Directed (target, source) edges over the ligand block.
    pub lig_edges: Vec<(usize, usize)>,
    /// Directed (target, source) edges over the protein block.
    pub prot_edges: Vec<(usize, usize)>,
}

impl GraphTopo {
    pub fn build(
        n_l: usize,
        n_p: usize,
        lig_bonds: &[(usize, usize)],
        prot_edges: &[(usize, usize)],
        has_global: bool,
    ) -> GraphTopo {
        let mut lig = Vec::new();
        for &(a, b) in lig_bonds {
            lig.push((a, b));
            lig.push((b, a));
        }
        let mut prot = Vec::new();
        for &(a, b) in prot_edges {
            prot.push((a, b));
            prot.push((b, a));
        }
        if has_global {
            let gl = n_l;
            for i in 0..n_l {
                lig.push((gl, i));
                lig.push((i, gl));
            }
            let gp = n_p;
            for j in 0..n_p {
                prot.push((gp, j));
                prot.push((j, gp));
            }
        }
        GraphTopo {
            n_l,
            n_p,
            has_global,
            lig_edges: lig,
            prot_edges: prot,
        }
    }

    pub fn lig_nodes(&self) -> usize {
        self.n_l + usize::from(self.has_global)
    }

    pub fn prot_nodes(&self) -> usize {
        self.n_p + usize::from(self.has_global)
    }
}

/// Dense interfacial contact mask over real (atom, residue) pairs,
/// row-major `i * n_p + j`, true iff distance <= cutoff (in the same units
/// as the coordinates).
pub fn interfacial_mask(x_l: &[Vec3], x_p: &[Vec3], cutoff: f64) -> Vec<bool> {
    let mut mask = vec![false; x_l.len() * x_p.len()];
    for (i, a) in x_l.iter().enumerate() {
        for (j, b) in x_p.iter().enumerate() {
            mask[i * x_p.len() + j] = crate::geom::dist(*a, *b) <= cutoff;
        }
    }
    mask
}

/// Per-layer tensor state. `h_*` and `x_*` include the optional global row;
/// `z` covers real pairs only.
#[derive(Clone)]
pub struct LayerState {
    pub h_l: Tensor,
    pub h_p: Tensor,
    pub x_l: Tensor,
    pub x_p: Tensor,
    pub z: Tensor,
}

impl LayerState {
    pub fn lig_coords(&self, n_l: usize) -> Vec<Vec3> {
        tensor_coords(&self.x_l, n_l)
    }

    pub fn prot_coords(&self, n_p: usize) -> Vec<Vec3> {
        tensor_coords(&self.x_p, n_p)
    }
}

pub fn tensor_coords(x: &Tensor, n: usize) -> Vec<Vec3> {
    let v = x.to_vec();
    (0..n).map(|i| [v[i * 3], v[i * 3 + 1], v[i * 3 + 2]]).collect()
}

pub fn coords_tensor(coords: &[Vec3]) -> Tensor {
    let mut v = Vec::with_capacity(coords.len() * 3);
    for c in coords {
        v.extend_from_slice(c);
    }
    Tensor::constant(coords.len(), 3, v)
}

/// Outer product module: `z = Linear(vec(Linear(h_i) (x) Linear(h_j)))`.
pub struct OpmParams {
    pub proj_a: Linear,
    pub proj_b: Linear,
    pub out: Linear,
}

impl OpmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = cfg.opm_dim;
        OpmParams {
            proj_a: Linear::new_no_bias(store, &format!("{prefix}.proj_a"), cfg.hidden, p, rng),
            proj_b: Linear::new_no_bias(store, &format!("{prefix}.proj_b"), cfg.hidden, p, rng),
            out: Linear::new(store, &format!("{prefix}.out"), p * p, cfg.pair_dim, rng),
        }
    }

    /// `(n_l, d) x (n_p, d) -> (n_l * n_p, pair_dim)` row-major pairs.
    pub fn forward(&self, h_l: &Tensor, h_p: &Tensor) -> Tensor {
        let a = self.proj_a.forward(h_l);
        let b = self.proj_b.forward(h_p);
        self.out.forward(&a.pair_outer(&b))
    }
}

/// EGNN-style intra-component update.
pub struct IndependentParams {
    pub phi_e: Mlp,
    pub phi_h: Mlp,
    pub phi_x: Mlp,
}

impl IndependentParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let mh = cfg.mlp_hidden;
        IndependentParams {
            phi_e: Mlp::new(store, &format!("{prefix}.phi_e"), 2 * d + 1, mh, d, Activation::Relu, rng),
            phi_h: Mlp::new(store, &format!("{prefix}.phi_h"), 2 * d, mh, d, Activation::Relu, rng),
            phi_x: Mlp::new(store, &format!("{prefix}.phi_x"), d, mh, 1, Activation::Softplus, rng),
        }
    }
}

/// One independent message-passing step over directed `edges`.
///
/// `m_ts = phi_e(h_t, h_s, |x_t - x_s|^2)`; embeddings get a residual
/// `phi_h(h, sum m)`; coordinates get the neighbor-mean of
/// `(x_t - x_s) * phi_x(m)`. Nodes without neighbors keep their coordinate.
pub fn independent_mp(
    params: &IndependentParams,
    cfg: &LayerConfig,
    h: &Tensor,
    x: &Tensor,
    edges: &[(usize, usize)],
    update_coords: bool,
) -> (Tensor, Tensor) {
    let n = h.rows();
    let d = h.cols();
    let (msum, coord_delta) = if edges.is_empty() {
        (Tensor::zeros(n, d), None)
    } else {
        let tgt: Vec<usize> = edges.iter().map(|&(t, _)| t).collect();
        let src: Vec<usize> = edges.iter().map(|&(_, s)| s).collect();
        let h_t = h.gather_rows(&tgt);
        let h_s = h.gather_rows(&src);
        let diff = x.gather_rows(&tgt).sub(&x.gather_rows(&src));
        let d2 = diff.square().sum_cols();
        let m = params.phi_e.forward(&Tensor::concat_cols(&[&h_t, &h_s, &d2]));
        let msum = m.scatter_add_rows(&tgt, n);
        let coord_delta = if update_coords {
            let w = params.phi_x.forward(&m).clamp(-cfg.coord_clamp, cfg.coord_clamp);
            let contrib = diff.mul_col(&w).scatter_add_rows(&tgt, n);
            let mut deg = vec![0.0; n];
            for &t in &tgt {
                deg[t] += 1.0;
            }
            let inv_deg: Vec<f64> = deg.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
            Some(contrib.mul_col(&Tensor::constant(n, 1, inv_deg)))
        } else {
            None
        };
        (msum, coord_delta)
    };
    let h_new = h.add(&params.phi_h.forward(&Tensor::concat_cols(&[h, &msum])));
    let x_new = match coord_delta {
        Some(delta) => x.add(&delta),
        None => x.clone(),
    };
    (h_new, x_new)
}

/// Multi-head cross-attention over all pairs, both directions, plus the
/// pair-embedding residual update.
pub struct CrossAttnParams {
    pub lig_q: Linear,
    pub lig_k: Linear,
    pub lig_v: Linear,
    pub lig_bias: Linear,
    pub lig_out: Linear,
    pub prot_q: Linear,
    pub prot_k: Linear,
    pub prot_v: Linear,
    pub prot_bias: Linear,
    pub prot_out: Linear,
    pub pair_update: OpmParams,
}

impl CrossAttnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let dz = cfg.pair_dim;
        let h = cfg.heads;
        CrossAttnParams {
            lig_q: Linear::new(store, &format!("{prefix}.lig_q"), d, d, rng),
            lig_k: Linear::new(store, &format!("{prefix}.lig_k"), d, d, rng),
            lig_v: Linear::new(store, &format!("{prefix}.lig_v"), d, d, rng),
            lig_bias: Linear::new(store, &format!("{prefix}.lig_bias"), dz, h, rng),
            lig_out: Linear::new(store, &format!("{prefix}.lig_out"), d, d, rng),
            prot_q: Linear::new(store, &format!("{prefix}.prot_q"), d, d, rng),
            prot_k: Linear::new(store, &format!("{prefix}.prot_k"), d, d, rng),
            prot_v: Linear::new(store, &format!("{prefix}.prot_v"), d, d, rng),
            prot_bias: Linear::new(store, &format!("{prefix}.prot_bias"), dz, h, rng),
            prot_out: Linear::new(store, &format!("{prefix}.prot_out"), d, d, rng),
            pair_update: OpmParams::new(store, &format!("{prefix}.pair_update"), cfg, rng),
        }
    }
}

fn attention_side(
    q_all: &Tensor,
    k_all: &Tensor,
    v_all: &Tensor,
    bias_all: &Tensor, // (n_q * n_k, heads) in query-major pair order
    out: &Linear,
    heads: usize,
    head_dim: usize,
) -> Tensor {
    let n_q = q_all.rows();
    let n_k = k_all.rows();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = q_all.narrow_cols(h * head_dim, head_dim);
        let k = k_all.narrow_cols(h * head_dim, head_dim);
        let v = v_all.narrow_cols(h * head_dim, head_dim);
        let bias = bias_all.narrow_cols(h, 1).reshape(n_q, n_k);
        let logits = q
            .matmul(&k.transpose())
            .scale(1.0 / (head_dim as f64).sqrt())
            .add(&bias);
        head_outs.push(logits.row_softmax().matmul(&v));
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    out.forward(&Tensor::concat_cols(&refs))
}

/// Returns updated `(h_l, h_p, z)` over real nodes only.
pub fn cross_attention_update(
    params: &CrossAttnParams,
    cfg: &LayerConfig,
    h_l: &Tensor,
    h_p: &Tensor,
    z: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n_l, n_p) = (h_l.rows(), h_p.rows());
    let c = cfg.head_dim();
    // ligand attends over protein
    let lig_bias = params.lig_bias.forward(z); // (n_l*n_p, H), pair rows are ligand-major
    let lig_delta = attention_side(
        &params.lig_q.forward(h_l),
        &params.lig_k.forward(h_p),
        &params.lig_v.forward(h_p),
        &lig_bias,
        &params.lig_out,
        cfg.heads,
        c,
    );
    let h_l_new = h_l.add(&lig_delta);
    // protein attends over ligand; bias grid transposed to protein-major
    let prot_bias_grid = params.prot_bias.forward(z);
    let mut prot_head_cols = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        prot_head_cols.push(
            prot_bias_grid
                .narrow_cols(h, 1)
                .reshape(n_l, n_p)
                .transpose()
                .reshape(n_p * n_l, 1),
        );
    }
    let refs: Vec<&Tensor> = prot_head_cols.iter().collect();
    let prot_bias = Tensor::concat_cols(&refs);
    let prot_delta = attention_side(
        &params.prot_q.forward(h_p),
        &params.prot_k.forward(h_l),
        &params.prot_v.forward(h_l),
        &prot_bias,
        &params.prot_out,
        cfg.heads,
        c,
    );
    let h_p_new = h_p.add(&prot_delta);
    let z_new = z.add(&params.pair_update.forward(&h_l_new, &h_p_new));
    (h_l_new, h_p_new, z_new)
}

/// One attention direction of the interfacial block.
pub struct InterfacialSideParams {
    pub phi_q: Mlp,
    pub phi_k: Mlp,
    pub phi_v: Mlp,
    pub phi_b: Mlp,
    /// Coordinate scaling head; present on the side whose coordinates move.
    pub phi_xv: Option<Mlp>,
}

impl InterfacialSideParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &LayerConfig,
        with_coord_head: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.hidden;
        let mh = cfg.mlp_hidden;
        InterfacialSideParams {
            phi_q: Mlp::new(store, &format!("{prefix}.phi_q"), d, mh, d, Activation::Relu, rng),
            phi_k: Mlp::new(store, &format!("{prefix}.phi_k"), d + 1, mh, d, Activation::Relu, rng),
            phi_v: Mlp::new(store, &format!("{prefix}.phi_v"), d + 1, mh, d, Activation::Relu, rng),
            phi_b: Mlp::new(store, &format!("{prefix}.phi_b"), cfg.pair_dim, mh, 1, Activation::Relu, rng),
            phi_xv: with_coord_head
                .then(|| Mlp::new(store, &format!("{prefix}.phi_xv"), d, mh, 1, Activation::Softplus, rng)),
        }
    }
}

pub struct InterfacialParams {
    pub lig: InterfacialSideParams,
    pub prot: InterfacialSideParams,
}

impl InterfacialParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Self {
        InterfacialParams {
            lig: InterfacialSideParams::new(store, &format!("{prefix}.lig"), cfg, true, rng),
            prot: InterfacialSideParams::new(store, &format!("{prefix}.prot"), cfg, false, rng),
        }
    }
}

/// Attentive update over interfacial contact pairs. Embeddings update on
/// both sides; coordinates update on the ligand side only. Returns
/// `(h_l, h_p, x_l)` over real nodes.
pub fn interfacial_mp(
    params: &InterfacialParams,
    cfg: &LayerConfig,
    h_l: &Tensor,
    h_p: &Tensor,
    x_l: &Tensor,
    x_p: &Tensor,
    z: &Tensor,
    mask: &[bool],
) -> (Tensor, Tensor, Tensor) {
    let (n_l, n_p) = (h_l.rows(), h_p.rows());
    assert_eq!(mask.len(), n_l * n_p);
    let n_pairs = n_l * n_p;
    let idx_i: Vec<usize> = (0..n_l).flat_map(|i| std::iter::repeat(i).take(n_p)).collect();
    let idx_j: Vec<usize> = (0..n_l).flat_map(|_| 0..n_p).collect();

    let diff = x_l.gather_rows(&idx_i).sub(&x_p.gather_rows(&idx_j)); // (P, 3)
    let d2 = diff.square().sum_cols(); // (P, 1)
    let h_p_pairs = h_p.gather_rows(&idx_j);
    let h_l_pairs = h_l.gather_rows(&idx_i);

    // ligand side: attend over interfacial residues
    let q = params.lig.phi_q.forward(h_l).gather_rows(&idx_i);
    let k = params.lig.phi_k.forward(&Tensor::concat_cols(&[&d2, &h_p_pairs]));
    let v = params.lig.phi_v.forward(&Tensor::concat_cols(&[&d2, &h_p_pairs]));
    let b = params.lig.phi_b.forward(z);
    let logits = q.mul(&k).sum_cols().add(&b).reshape(n_l, n_p);
    let alpha = logits.masked_row_softmax(mask).reshape(n_pairs, 1);
    let h_l_new = h_l.add(&v.mul_col(&alpha).scatter_add_rows(&idx_i, n_l));
    let xv = params
        .lig
        .phi_xv
        .as_ref()
        .expect("ligand side carries the coordinate head")
        .forward(&v)
        .clamp(-cfg.coord_clamp, cfg.coord_clamp);
    let x_delta = diff.mul_col(&alpha.mul(&xv)).scatter_add_rows(&idx_i, n_l);
    let x_l_new = x_l.add(&x_delta);

    // protein side: attend over interfacial atoms
    let mut mask_t = vec![false; n_pairs];
    for i in 0..n_l {
        for j in 0..n_p {
            mask_t[j * n_l + i] = mask[i * n_p + j];
        }
    }
    let qp = params.prot.phi_q.forward(h_p).gather_rows(&idx_j);
    let kp = params.prot.phi_k.forward(&Tensor::concat_cols(&[&d2, &h_l_pairs]));
    let vp = params.prot.phi_v.forward(&Tensor::concat_cols(&[&d2, &h_l_pairs]));
    let bp = params.prot.phi_b.forward(z);
    let logits_p = qp
        .mul(&kp)
        .sum_cols()
        .add(&bp)
        .reshape(n_l, n_p)
        .transpose(); // (n_p, n_l)
    let alpha_p = logits_p
        .masked_row_softmax(&mask_t)
        .transpose()
        .reshape(n_pairs, 1);
    let h_p_new = h_p.add(&vp.mul_col(&alpha_p).scatter_add_rows(&idx_j, n_p));

    (h_l_new, h_p_new, x_l_new)
}

pub struct FabindLayerParams {
    pub lig_ind: IndependentParams,
    pub prot_ind: IndependentParams,
    pub cross: CrossAttnParams,
    pub interfacial: InterfacialParams,
}

impl FabindLayerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Self {
        FabindLayerParams {
            lig_ind: IndependentParams::new(store, &format!("{prefix}.lig_ind"), cfg, rng),
            prot_ind: IndependentParams::new(store, &format!("{prefix}.prot_ind"), cfg, rng),
            cross: CrossAttnParams::new(store, &format!("{prefix}.cross"), cfg, rng),
            interfacial: InterfacialParams::new(store, &format!("{prefix}.interfacial"), cfg, rng),
        }
    }
}

fn split_real_global(t: &Tensor, n_real: usize, has_global: bool) -> (Tensor, Option<Tensor>) {
    if has_global {
        let real: Vec<usize> = (0..n_real).collect();
        (t.gather_rows(&real), Some(t.gather_rows(&[n_real])))
    } else {
        (t.clone(), None)
    }
}

fn rejoin(real: &Tensor, global: &Option<Tensor>) -> Tensor {
    match global {
        Some(g) => Tensor::concat_rows(&[real, g]),
        None => real.clone(),
    }
}

/// Full three-step layer: independent passes, cross-attention, interfacial
/// attention. Global nodes take part in the independent step only.
pub fn fabind_layer_forward(
    params: &FabindLayerParams,
    cfg: &LayerConfig,
    state: &LayerState,
    topo: &GraphTopo,
    mask: &[bool],
) -> LayerState {
    // 1. independent message passing within each component
    let (h_l, x_l) = independent_mp(&params.lig_ind, cfg, &state.h_l, &state.x_l, &topo.lig_edges, true);
    let (h_p, x_p) = independent_mp(
        &params.prot_ind,
        cfg,
        &state.h_p,
        &state.x_p,
        &topo.prot_edges,
        cfg.update_protein_coords,
    );

    let (h_l_real, h_l_g) = split_real_global(&h_l, topo.n_l, topo.has_global);
    let (h_p_real, h_p_g) = split_real_global(&h_p, topo.n_p, topo.has_global);
    let (x_l_real, x_l_g) = split_real_global(&x_l, topo.n_l, topo.has_global);
    let (x_p_real, _) = split_real_global(&x_p, topo.n_p, topo.has_global);

    // 2. cross-attention over all real pairs (coordinate independent)
    let (h_l_real, h_p_real, z) =
        cross_attention_update(&params.cross, cfg, &h_l_real, &h_p_real, &state.z);

    // 3. interfacial attention over contact pairs
    let (h_l_real, h_p_real, x_l_real) = interfacial_mp(
        &params.interfacial,
        cfg,
        &h_l_real,
        &h_p_real,
        &x_l_real,
        &x_p_real,
        &z,
        mask,
    );

    LayerState {
        h_l: rejoin(&h_l_real, &h_l_g),
        h_p: rejoin(&h_p_real, &h_p_g),
        x_l: rejoin(&x_l_real, &x_l_g),
        x_p,
        z,
    }
}
