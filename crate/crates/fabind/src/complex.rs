//! Protein-ligand complex data model: feature encodings, edge construction,
//! pocket extraction, and the on-disk complex format.
//!
//! All graph values are immutable after construction and safe to share
//! across workers.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geom::{self, Vec3};

/// Internal (protein residue-residue) edge cutoff, in angstrom.
pub const C_IN: f64 = 8.0;
/// Interfacial (ligand atom - residue) edge cutoff, in angstrom.
pub const C_EX: f64 = 10.0;
/// Pocket sphere radius, in angstrom.
pub const POCKET_RADIUS: f64 = 20.0;

/// Ligand atom feature dimension.
pub const LIGAND_FEATURE_DIM: usize = 56;
/// Learned residue embedding dimension (stand-in for language-model features).
pub const RESIDUE_FEATURE_DIM: usize = 32;

/// Elements the ligand feature encoder accepts, in table order.
pub const ELEMENTS: [&str; 31] = [
    "H", "B", "C", "N", "O", "F", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "K", "Ca", "Cr", "Mn",
    "Fe", "Co", "Ni", "Cu", "Zn", "As", "Se", "Br", "Mo", "Ag", "Sn", "I", "Pt", "Hg",
];

/// Three-letter amino-acid codes, alphabetical; index is the residue type id.
/// Unknown codes map to the dedicated final row `AA_UNKNOWN`.
pub const AA_CODES: [&str; 20] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
];
pub const AA_UNKNOWN: usize = 20;
pub const AA_TYPE_COUNT: usize = 21;

#[derive(Debug, Error)]
pub enum ComplexError {
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error("no residue within {radius} A of pocket center")]
    EmptyPocket { radius: f64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid complex: {0}")]
    Invalid(String),
}

pub fn residue_type_id(code: &str) -> usize {
    AA_CODES.iter().position(|&c| c == code).unwrap_or(AA_UNKNOWN)
}

/// Raw per-atom chemistry descriptor, the input to the 56-dim encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomDescriptor {
    pub element: String,
    pub degree: u32,
    pub h_count: u32,
    pub valence: u32,
    pub charge: i32,
    pub aromatic: bool,
}

/// Fixed 56-dim one-hot layout:
///
/// | block    | dims | encoding                          |
/// |----------|------|-----------------------------------|
/// | element  | 31   | one-hot over [`ELEMENTS`]         |
/// | degree   | 8    | one-hot, clamped to 0..=7         |
/// | h_count  | 6    | one-hot, clamped to 0..=5         |
/// | valence  | 6    | one-hot, clamped to 0..=5 (5 = 5+)|
/// | charge   | 3    | one-hot over {-1, 0, +1}, clamped |
/// | aromatic | 2    | one-hot {false, true}             |
pub fn encode_ligand_features(d: &AtomDescriptor) -> Result<Vec<f64>, ComplexError> {
    let elem = ELEMENTS
        .iter()
        .position(|&e| e == d.element)
        .ok_or_else(|| ComplexError::UnknownElement(d.element.clone()))?;
    let mut f = vec![0.0; LIGAND_FEATURE_DIM];
    let mut off = 0;
    f[off + elem] = 1.0;
    off += 31;
    f[off + (d.degree.min(7) as usize)] = 1.0;
    off += 8;
    f[off + (d.h_count.min(5) as usize)] = 1.0;
    off += 6;
    f[off + (d.valence.min(5) as usize)] = 1.0;
    off += 6;
    f[off + ((d.charge.clamp(-1, 1) + 1) as usize)] = 1.0;
    off += 3;
    f[off + usize::from(d.aromatic)] = 1.0;
    Ok(f)
}

/// Boundaries of the feature blocks above, for block-wise checks.
pub const FEATURE_BLOCKS: [(usize, usize); 6] =
    [(0, 31), (31, 39), (39, 45), (45, 51), (51, 54), (54, 56)];

#[derive(Clone, Debug, PartialEq)]
pub struct LigandAtom {
    pub descriptor: AtomDescriptor,
    pub feature: Vec<f64>,
    pub coord: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LigandGraph {
    pub atoms: Vec<LigandAtom>,
    /// Unordered bond pairs stored with `i < j`.
    pub bonds: Vec<(usize, usize)>,
    /// Rings found in the bond graph (shortest cycle basis).
    pub rings: Vec<Vec<usize>>,
    /// Per-atom set of ring ids.
    pub ring_membership: Vec<Vec<usize>>,
}

impl LigandGraph {
    pub fn new(
        descriptors: Vec<(AtomDescriptor, Vec3)>,
        bonds: Vec<(usize, usize)>,
    ) -> Result<LigandGraph, ComplexError> {
        let n = descriptors.len();
        if n < 2 {
            return Err(ComplexError::Invalid(format!(
                "ligand needs at least 2 atoms, got {n}"
            )));
        }
        let mut norm_bonds = Vec::with_capacity(bonds.len());
        for (a, b) in bonds {
            if a >= n || b >= n || a == b {
                return Err(ComplexError::Invalid(format!("bad bond ({a}, {b})")));
            }
            let pair = (a.min(b), a.max(b));
            if !norm_bonds.contains(&pair) {
                norm_bonds.push(pair);
            }
        }
        let atoms = descriptors
            .into_iter()
            .map(|(d, coord)| {
                Ok(LigandAtom {
                    feature: encode_ligand_features(&d)?,
                    descriptor: d,
                    coord,
                })
            })
            .collect::<Result<Vec<_>, ComplexError>>()?;
        let rings = find_rings(n, &norm_bonds);
        let mut ring_membership = vec![Vec::new(); n];
        for (rid, ring) in rings.iter().enumerate() {
            for &a in ring {
                ring_membership[a].push(rid);
            }
        }
        Ok(LigandGraph {
            atoms,
            bonds: norm_bonds,
            rings,
            ring_membership,
        })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn coords(&self) -> Vec<Vec3> {
        self.atoms.iter().map(|a| a.coord).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        geom::centroid(&self.coords())
    }

    pub fn with_coords(&self, coords: &[Vec3]) -> LigandGraph {
        assert_eq!(coords.len(), self.len());
        let mut out = self.clone();
        for (a, &c) in out.atoms.iter_mut().zip(coords) {
            a.coord = c;
        }
        out
    }
}

/// Rigid translation putting the ligand centroid at `target`.
pub fn place_ligand_at(ligand: &LigandGraph, target: Vec3) -> LigandGraph {
    let shift = geom::sub(target, ligand.centroid());
    let coords: Vec<Vec3> = ligand.coords().iter().map(|&c| geom::add(c, shift)).collect();
    ligand.with_coords(&coords)
}

/// Shortest cycle basis of the bond graph. For each independent cycle we take
/// the shortest cycle through one of its chord edges; results are sorted by
/// length and kept greedily while linearly independent over GF(2).
fn find_rings(n: usize, bonds: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in bonds {
        adj[a].push(b);
        adj[b].push(a);
    }
    // candidate cycles: shortest path between endpoints of each edge with
    // that edge removed
    let mut candidates: Vec<Vec<usize>> = Vec::new();
    for &(a, b) in bonds {
        if let Some(path) = shortest_path(&adj, a, b, (a, b)) {
            if path.len() >= 3 {
                candidates.push(path);
            }
        }
    }
    candidates.sort_by_key(|c| c.len());
    // greedy GF(2) independence over edge incidence vectors
    let edge_index = |a: usize, b: usize| -> usize {
        bonds
            .iter()
            .position(|&(x, y)| (x, y) == (a.min(b), a.max(b)))
            .expect("cycle uses unknown edge")
    };
    let words = bonds.len().div_ceil(64);
    let highest_bit = |v: &[u64]| -> Option<usize> {
        v.iter()
            .rposition(|&w| w != 0)
            .map(|i| i * 64 + 63 - v[i].leading_zeros() as usize)
    };
    // pivot-per-leading-bit Gaussian elimination over GF(2)
    let mut pivots: Vec<Option<Vec<u64>>> = vec![None; bonds.len()];
    let mut rings = Vec::new();
    for cyc in candidates {
        let mut vec = vec![0u64; words];
        for w in 0..cyc.len() {
            let e = edge_index(cyc[w], cyc[(w + 1) % cyc.len()]);
            vec[e / 64] ^= 1 << (e % 64);
        }
        let mut independent = false;
        while let Some(h) = highest_bit(&vec) {
            match &pivots[h] {
                Some(p) => {
                    for (v, pw) in vec.iter_mut().zip(p) {
                        *v ^= pw;
                    }
                }
                None => {
                    pivots[h] = Some(vec);
                    independent = true;
                    break;
                }
            }
        }
        if independent {
            let mut ring = cyc;
            ring.sort_unstable();
            if !rings.contains(&ring) {
                rings.push(ring);
            }
        }
    }
    rings
}

/// BFS shortest path from `a` to `b` avoiding the direct edge `skip`.
/// Returns the cycle node sequence `a .. b` (so closing edge is `b-a`).
fn shortest_path(adj: &[Vec<usize>], a: usize, b: usize, skip: (usize, usize)) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut prev = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(a);
    prev[a] = a;
    while let Some(u) = queue.pop_front() {
        if u == b {
            break;
        }
        for &v in &adj[u] {
            let pair = (u.min(v), u.max(v));
            if pair == skip || prev[v] != usize::MAX {
                continue;
            }
            prev[v] = u;
            queue.push_back(v);
        }
    }
    if prev[b] == usize::MAX {
        return None;
    }
    let mut path = vec![b];
    let mut cur = b;
    while cur != a {
        cur = prev[cur];
        path.push(cur);
    }
    path.reverse();
    Some(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residue {
    pub aa_code: String,
    pub type_id: usize,
    pub coord: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProteinGraph {
    pub residues: Vec<Residue>,
    /// Unordered residue pairs within `C_IN`, stored with `i < j`.
    pub edges: Vec<(usize, usize)>,
}

impl ProteinGraph {
    pub fn new(residues: Vec<(String, Vec3)>) -> Result<ProteinGraph, ComplexError> {
        if residues.is_empty() {
            return Err(ComplexError::Invalid("protein needs at least 1 residue".into()));
        }
        let residues: Vec<Residue> = residues
            .into_iter()
            .map(|(aa_code, coord)| Residue {
                type_id: residue_type_id(&aa_code),
                aa_code,
                coord,
            })
            .collect();
        let coords: Vec<Vec3> = residues.iter().map(|r| r.coord).collect();
        let edges = build_edges_internal(&coords, C_IN);
        Ok(ProteinGraph { residues, edges })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn coords(&self) -> Vec<Vec3> {
        self.residues.iter().map(|r| r.coord).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        geom::centroid(&self.coords())
    }
}

/// Unordered within-set edges: `i < j`, distance `<= cutoff` (inclusive).
pub fn build_edges_internal(coords: &[Vec3], cutoff: f64) -> Vec<(usize, usize)> {
    assert!(cutoff > 0.0, "cutoff must be positive");
    let mut edges = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            if geom::dist(coords[i], coords[j]) <= cutoff {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Cross edges `(a_index, b_index)` with distance `<= cutoff` (inclusive).
pub fn build_edges_interfacial(coords_a: &[Vec3], coords_b: &[Vec3], cutoff: f64) -> Vec<(usize, usize)> {
    assert!(cutoff > 0.0, "cutoff must be positive");
    let mut edges = Vec::new();
    for (i, &a) in coords_a.iter().enumerate() {
        for (j, &b) in coords_b.iter().enumerate() {
            if geom::dist(a, b) <= cutoff {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// The full complex fed to the pocket or docking module.
#[derive(Clone, Debug)]
pub struct ComplexGraph {
    pub ligand: LigandGraph,
    pub protein: ProteinGraph,
    pub interfacial_edges: Vec<(usize, usize)>,
    pub has_global_nodes: bool,
}

impl ComplexGraph {
    pub fn assemble(ligand: LigandGraph, protein: ProteinGraph, has_global_nodes: bool) -> ComplexGraph {
        let interfacial_edges =
            build_edges_interfacial(&ligand.coords(), &protein.coords(), C_EX);
        ComplexGraph {
            ligand,
            protein,
            interfacial_edges,
            has_global_nodes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PocketSubgraph {
    /// Residue indices into the source protein, ascending.
    pub parent_indices: Vec<usize>,
    pub center: Vec3,
    pub radius: f64,
    /// Cropped protein with internal edges rebuilt at `C_IN`.
    pub protein: ProteinGraph,
}

/// Residues within `radius` of `center`, with internal edges rebuilt.
pub fn extract_pocket(
    protein: &ProteinGraph,
    center: Vec3,
    radius: f64,
) -> Result<PocketSubgraph, ComplexError> {
    assert!(radius > 0.0, "radius must be positive");
    let parent_indices: Vec<usize> = protein
        .residues
        .iter()
        .enumerate()
        .filter(|(_, r)| geom::dist(r.coord, center) <= radius)
        .map(|(i, _)| i)
        .collect();
    if parent_indices.is_empty() {
        return Err(ComplexError::EmptyPocket { radius });
    }
    let residues: Vec<(String, Vec3)> = parent_indices
        .iter()
        .map(|&i| {
            let r = &protein.residues[i];
            (r.aa_code.clone(), r.coord)
        })
        .collect();
    Ok(PocketSubgraph {
        parent_indices,
        center,
        radius,
        protein: ProteinGraph::new(residues)?,
    })
}

/// One training/eval sample: initial ligand conformer, protein, ground-truth
/// pocket labels, and the bound ligand pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexRecord {
    pub ligand: LigandGraph,
    pub protein: ProteinGraph,
    pub pocket_labels: Vec<bool>,
    pub truth: Vec<Vec3>,
}

impl ComplexRecord {
    pub fn validate(&self) -> Result<(), ComplexError> {
        if self.pocket_labels.len() != self.protein.len() {
            return Err(ComplexError::Invalid(format!(
                "{} pocket labels for {} residues",
                self.pocket_labels.len(),
                self.protein.len()
            )));
        }
        if self.truth.len() != self.ligand.len() {
            return Err(ComplexError::Invalid(format!(
                "{} truth coordinates for {} atoms",
                self.truth.len(),
                self.ligand.len()
            )));
        }
        Ok(())
    }

    pub fn native_center(&self) -> Vec3 {
        geom::centroid(&self.truth)
    }
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.6}")
}

/// Render the on-disk text format. Coordinates carry 6 decimal places;
/// fields are comma-separated; `#` starts a comment line.
pub fn render_complex(c: &ComplexRecord) -> String {
    let mut s = String::new();
    s.push_str("# fabind complex\n");
    s.push_str("LIGAND_ATOMS\n");
    for (i, a) in c.ligand.atoms.iter().enumerate() {
        let d = &a.descriptor;
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{},{},{},{}",
            d.element,
            d.degree,
            d.h_count,
            d.valence,
            d.charge,
            u8::from(d.aromatic),
            fmt_coord(a.coord[0]),
            fmt_coord(a.coord[1]),
            fmt_coord(a.coord[2]),
        );
    }
    s.push_str("LIGAND_BONDS\n");
    for &(i, j) in &c.ligand.bonds {
        let _ = writeln!(s, "{i},{j}");
    }
    s.push_str("RESIDUES\n");
    for (i, r) in c.protein.residues.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{}",
            r.aa_code,
            fmt_coord(r.coord[0]),
            fmt_coord(r.coord[1]),
            fmt_coord(r.coord[2]),
        );
    }
    s.push_str("POCKET_LABELS\n");
    for &l in &c.pocket_labels {
        let _ = writeln!(s, "{}", u8::from(l));
    }
    s.push_str("LIGAND_TRUTH\n");
    for (i, t) in c.truth.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", fmt_coord(t[0]), fmt_coord(t[1]), fmt_coord(t[2]));
    }
    s
}

pub fn parse_complex(text: &str) -> Result<ComplexRecord, ComplexError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Atoms,
        Bonds,
        Residues,
        Labels,
        Truth,
    }
    let mut section = Section::None;
    let mut atoms: Vec<(AtomDescriptor, Vec3)> = Vec::new();
    let mut bonds: Vec<(usize, usize)> = Vec::new();
    let mut residues: Vec<(String, Vec3)> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut truth: Vec<Vec3> = Vec::new();

    let err = |line: usize, msg: &str| ComplexError::Parse {
        line,
        msg: msg.to_string(),
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let n = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "LIGAND_ATOMS" => {
                section = Section::Atoms;
                continue;
            }
            "LIGAND_BONDS" => {
                section = Section::Bonds;
                continue;
            }
            "RESIDUES" => {
                section = Section::Residues;
                continue;
            }
            "POCKET_LABELS" => {
                section = Section::Labels;
                continue;
            }
            "LIGAND_TRUTH" => {
                section = Section::Truth;
                continue;
            }
            _ => {}
        }
        let fields: Vec<&str> = line.split(',').collect();
        match section {
            Section::None => return Err(err(n, "data before any section header")),
            Section::Atoms => {
                if fields.len() != 10 {
                    return Err(err(n, "LIGAND_ATOMS row needs 10 fields"));
                }
                let idx: usize = fields[0].parse().map_err(|_| err(n, "bad index"))?;
                if idx != atoms.len() {
                    return Err(err(n, "atom indices must be sequential"));
                }
                let d = AtomDescriptor {
                    element: fields[1].to_string(),
                    degree: fields[2].parse().map_err(|_| err(n, "bad degree"))?,
                    h_count: fields[3].parse().map_err(|_| err(n, "bad h_count"))?,
                    valence: fields[4].parse().map_err(|_| err(n, "bad valence"))?,
                    charge: fields[5].parse().map_err(|_| err(n, "bad charge"))?,
                    aromatic: match fields[6] {
                        "0" => false,
                        "1" => true,
                        _ => return Err(err(n, "aromatic must be 0 or 1")),
                    },
                };
                let coord = parse_xyz(&fields[7..10], n)?;
                atoms.push((d, coord));
            }
            Section::Bonds => {
                if fields.len() != 2 {
                    return Err(err(n, "LIGAND_BONDS row needs 2 fields"));
                }
                let i: usize = fields[0].parse().map_err(|_| err(n, "bad bond index"))?;
                let j: usize = fields[1].parse().map_err(|_| err(n, "bad bond index"))?;
                bonds.push((i, j));
            }
            Section::Residues => {
                if fields.len() != 5 {
                    return Err(err(n, "RESIDUES row needs 5 fields"));
                }
                let idx: usize = fields[0].parse().map_err(|_| err(n, "bad index"))?;
                if idx != residues.len() {
                    return Err(err(n, "residue indices must be sequential"));
                }
                let coord = parse_xyz(&fields[2..5], n)?;
                residues.push((fields[1].to_string(), coord));
            }
            Section::Labels => {
                if fields.len() != 1 {
                    return Err(err(n, "POCKET_LABELS row needs 1 field"));
                }
                labels.push(match fields[0] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(err(n, "pocket label must be 0 or 1")),
                });
            }
            Section::Truth => {
                if fields.len() != 4 {
                    return Err(err(n, "LIGAND_TRUTH row needs 4 fields"));
                }
                let idx: usize = fields[0].parse().map_err(|_| err(n, "bad index"))?;
                if idx != truth.len() {
                    return Err(err(n, "truth indices must be sequential"));
                }
                truth.push(parse_xyz(&fields[1..4], n)?);
            }
        }
    }

    let record = ComplexRecord {
        ligand: LigandGraph::new(atoms, bonds)?,
        protein: ProteinGraph::new(residues)?,
        pocket_labels: labels,
        truth,
    };
    record.validate()?;
    Ok(record)
}

fn parse_xyz(fields: &[&str], line: usize) -> Result<Vec3, ComplexError> {
    let mut out = [0.0; 3];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.parse().map_err(|_| ComplexError::Parse {
            line,
            msg: format!("bad coordinate `{f}`"),
        })?;
    }
    Ok(out)
}

/// Snap a coordinate to 6 decimal places so the text format round-trips
/// bit-exactly.
pub fn quantize6(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn carbon() -> AtomDescriptor {
        AtomDescriptor {
            element: "C".into(),
            degree: 4,
            h_count: 0,
            valence: 4,
            charge: 0,
            aromatic: false,
        }
    }

    #[test]
    fn features_are_56_dim_and_deterministic() {
        let f = encode_ligand_features(&carbon()).unwrap();
        assert_eq!(f.len(), 56);
        assert_eq!(f, encode_ligand_features(&carbon()).unwrap());
    }

    #[test]
    fn features_one_hot_per_block() {
        let f = encode_ligand_features(&carbon()).unwrap();
        for (lo, hi) in FEATURE_BLOCKS {
            let nonzero = f[lo..hi].iter().filter(|&&v| v != 0.0).count();
            assert_eq!(nonzero, 1, "block {lo}..{hi}");
        }
        let total: f64 = f.iter().sum();
        assert_eq!(total, 6.0);
    }

    #[test]
    fn unknown_element_names_the_element() {
        let mut d = carbon();
        d.element = "Xx".into();
        match encode_ligand_features(&d) {
            Err(ComplexError::UnknownElement(e)) => assert_eq!(e, "Xx"),
            other => panic!("expected UnknownElement, got {other:?}"),
        }
    }

    #[test]
    fn residue_type_lookup() {
        assert_eq!(residue_type_id("ALA"), 0);
        assert_eq!(residue_type_id("VAL"), 19);
        assert_eq!(residue_type_id("XYZ"), AA_UNKNOWN);
    }

    #[test]
    fn edge_cutoff_is_inclusive() {
        let close = [[0.0, 0.0, 0.0], [7.9, 0.0, 0.0]];
        assert_eq!(build_edges_internal(&close, 8.0), vec![(0, 1)]);
        let far = [[0.0, 0.0, 0.0], [8.1, 0.0, 0.0]];
        assert!(build_edges_internal(&far, 8.0).is_empty());
        let exact = [[0.0, 0.0, 0.0], [8.0, 0.0, 0.0]];
        assert_eq!(build_edges_internal(&exact, 8.0), vec![(0, 1)]);
    }

    #[test]
    fn empty_coordinates_give_empty_edges() {
        assert!(build_edges_internal(&[], 5.0).is_empty());
        assert!(build_edges_interfacial(&[], &[[0.0; 3]], 5.0).is_empty());
    }

    fn toy_ligand(coords: &[Vec3], bonds: &[(usize, usize)]) -> LigandGraph {
        let descriptors = coords.iter().map(|&c| (carbon(), c)).collect();
        LigandGraph::new(descriptors, bonds.to_vec()).unwrap()
    }

    #[test]
    fn ligand_needs_two_atoms() {
        assert!(LigandGraph::new(vec![(carbon(), [0.0; 3])], vec![]).is_err());
    }

    #[test]
    fn place_ligand_translates_rigidly() {
        let lig = toy_ligand(&[[1.0, 1.0, 1.0], [1.0, 1.0, 3.0]], &[(0, 1)]);
        assert_eq!(lig.centroid(), [1.0, 1.0, 2.0]);
        let moved = place_ligand_at(&lig, [0.0, 0.0, 0.0]);
        assert_eq!(moved.atoms[0].coord, [0.0, 0.0, -1.0]);
        assert_eq!(moved.atoms[1].coord, [0.0, 0.0, 1.0]);
        // identity when target is the current centroid
        let same = place_ligand_at(&lig, lig.centroid());
        assert_eq!(same.coords(), lig.coords());
    }

    #[test]
    fn benzene_has_one_six_ring() {
        let coords: Vec<Vec3> = (0..6)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 6.0;
                [a.cos(), a.sin(), 0.0]
            })
            .collect();
        let bonds: Vec<(usize, usize)> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        let lig = toy_ligand(&coords, &bonds);
        assert_eq!(lig.rings.len(), 1);
        assert_eq!(lig.rings[0].len(), 6);
        for m in &lig.ring_membership {
            assert_eq!(m, &vec![0]);
        }
    }

    #[test]
    fn fused_bicyclic_has_two_rings() {
        // two triangles sharing edge (0,1)
        let coords: Vec<Vec3> = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, 1.0, 0.0],
            [0.5, -1.0, 0.0],
        ];
        let bonds = [(0, 1), (1, 2), (2, 0), (1, 3), (3, 0)];
        let lig = toy_ligand(&coords, &bonds);
        assert_eq!(lig.rings.len(), 2);
        assert!(lig.rings.iter().all(|r| r.len() == 3));
        assert_eq!(lig.ring_membership[0].len(), 2);
    }

    fn toy_protein(coords: &[Vec3]) -> ProteinGraph {
        ProteinGraph::new(coords.iter().map(|&c| ("GLY".to_string(), c)).collect()).unwrap()
    }

    #[test]
    fn pocket_radius_is_inclusive_and_exact() {
        let prot = toy_protein(&[[19.9, 0.0, 0.0], [20.1, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let p = extract_pocket(&prot, [0.0; 3], 20.0).unwrap();
        assert_eq!(p.parent_indices, vec![0, 2]);
    }

    #[test]
    fn degenerate_sphere_keeps_only_centered_residue() {
        let prot = toy_protein(&[[0.0; 3], [5.0, 0.0, 0.0]]);
        let p = extract_pocket(&prot, [0.0; 3], 0.1).unwrap();
        assert_eq!(p.parent_indices, vec![0]);
    }

    #[test]
    fn empty_pocket_is_an_error() {
        let prot = toy_protein(&[[100.0, 0.0, 0.0]]);
        assert!(matches!(
            extract_pocket(&prot, [0.0; 3], 20.0),
            Err(ComplexError::EmptyPocket { .. })
        ));
    }

    #[test]
    fn pocket_extraction_is_idempotent() {
        let coords: Vec<Vec3> = (0..10).map(|i| [i as f64 * 3.0, 0.0, 0.0]).collect();
        let prot = toy_protein(&coords);
        let p1 = extract_pocket(&prot, [5.0, 0.0, 0.0], 12.0).unwrap();
        let p2 = extract_pocket(&p1.protein, [5.0, 0.0, 0.0], 12.0).unwrap();
        assert_eq!(p2.parent_indices.len(), p1.parent_indices.len());
        assert_eq!(p2.protein.coords(), p1.protein.coords());
    }

    fn toy_record() -> ComplexRecord {
        let lig = toy_ligand(
            &[[0.125, -1.5, 2.0], [1.0, 0.0, 0.5], [2.25, 0.75, -0.5]],
            &[(0, 1), (1, 2)],
        );
        let prot = toy_protein(&[[0.0; 3], [3.5, 0.0, 0.0], [0.0, 4.0, 0.0]]);
        ComplexRecord {
            ligand: lig,
            protein: prot,
            pocket_labels: vec![true, false, true],
            truth: vec![[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [2.5, 0.5, 0.5]],
        }
    }

    #[test]
    fn complex_format_round_trips_bit_exactly() {
        let rec = toy_record();
        let text = render_complex(&rec);
        let parsed = parse_complex(&text).unwrap();
        assert_eq!(parsed, rec);
        // text-level fixed point too
        assert_eq!(render_complex(&parsed), text);
    }

    #[test]
    fn parse_rejects_malformed_rows() {
        assert!(parse_complex("LIGAND_ATOMS\n0,C,4\n").is_err());
        assert!(parse_complex("garbage before header\n").is_err());
    }
}
