//! Synthetic complex generation: a self-avoiding-walk protein blob, a
//! small tree-plus-ring ligand nestled against a pocket residue, and an
//! initial conformer made by jittering and rigidly moving the true pose.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::complex::{
    quantize6, AtomDescriptor, ComplexRecord, LigandGraph, ProteinGraph, AA_CODES, POCKET_RADIUS,
};
use crate::geom::{self, random_rigid_motion, random_rotation, RigidMotion, Vec3};

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub residue_range: (usize, usize),
    pub atom_range: (usize, usize),
    /// Per-atom jitter (angstroms) applied to the truth pose to make the
    /// initial conformer.
    pub conformer_noise: f64,
    pub ring_probability: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            residue_range: (10, 16),
            atom_range: (5, 9),
            conformer_noise: 0.3,
            ring_probability: 0.5,
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = geom::norm(v);
        if n > 0.1 && n <= 1.0 {
            return geom::scale(v, 1.0 / n);
        }
    }
}

/// Residue positions: ~3.8-angstrom steps, at least 3 angstroms apart.
fn protein_walk(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut coords: Vec<Vec3> = vec![[0.0; 3]];
    while coords.len() < n {
        let last = *coords.last().unwrap();
        let mut placed = false;
        for _ in 0..100 {
            let cand = geom::add(last, geom::scale(random_unit(rng), 3.8));
            if coords.iter().all(|c| geom::dist(*c, cand) >= 3.0) {
                coords.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            // walk boxed itself in; restart from scratch (rare at this size)
            coords = vec![[0.0; 3]];
        }
    }
    coords
}

fn chain_element(rng: &mut ChaCha8Rng) -> &'static str {
    ["C", "C", "C", "N", "O", "S"][rng.gen_range(0..6)]
}

/// Truth-pose ligand: optional planar ring plus a self-avoiding bonded
/// chain of extra atoms, centered at the origin.
fn build_ligand(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<(AtomDescriptor, Vec3)>, Vec<(usize, usize)>) {
    let n = rng.gen_range(spec.atom_range.0..=spec.atom_range.1);
    let mut coords: Vec<Vec3> = Vec::new();
    let mut bonds: Vec<(usize, usize)> = Vec::new();
    let mut aromatic: Vec<bool> = Vec::new();
    let mut elements: Vec<&'static str> = Vec::new();

    let with_ring = n >= 6 && rng.gen_bool(spec.ring_probability);
    if with_ring {
        let k = 6;
        let r = 1.5 / (2.0 * (std::f64::consts::PI / k as f64).sin());
        for i in 0..k {
            let a = std::f64::consts::TAU * i as f64 / k as f64;
            coords.push([r * a.cos(), r * a.sin(), 0.0]);
            aromatic.push(true);
            elements.push("C");
            bonds.push((i, (i + 1) % k));
        }
    } else {
        coords.push([0.0; 3]);
        aromatic.push(false);
        elements.push(chain_element(rng));
    }
    while coords.len() < n {
        let parent = rng.gen_range(0..coords.len());
        let mut placed = false;
        for _ in 0..100 {
            let cand = geom::add(coords[parent], geom::scale(random_unit(rng), 1.5));
            if coords.iter().all(|c| geom::dist(*c, cand) >= 1.2) {
                bonds.push((parent, coords.len()));
                coords.push(cand);
                aromatic.push(false);
                elements.push(chain_element(rng));
                placed = true;
                break;
            }
        }
        if !placed {
            break; // accept a smaller ligand rather than loop forever
        }
    }

    let mut degree = vec![0u32; coords.len()];
    for &(a, b) in &bonds {
        degree[a] += 1;
        degree[b] += 1;
    }
    let descriptors = coords
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let h = rng.gen_range(0..=2u32);
            (
                AtomDescriptor {
                    element: elements[i].to_string(),
                    degree: degree[i],
                    h_count: h,
                    valence: degree[i] + h,
                    charge: if rng.gen_bool(0.05) { 1 } else { 0 },
                    aromatic: aromatic[i],
                },
                c,
            )
        })
        .collect();
    (descriptors, bonds)
}

fn q3(v: Vec3) -> Vec3 {
    [quantize6(v[0]), quantize6(v[1]), quantize6(v[2])]
}

/// Generate one complex: protein blob, ligand truth pose beside a randomly
/// chosen pocket residue, pocket labels from the 20-angstrom sphere around
/// the truth centroid, and a jittered rigidly-moved initial conformer.
pub fn generate_synthetic_complex(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ComplexRecord {
    let n_res = rng.gen_range(spec.residue_range.0..=spec.residue_range.1);
    let res_coords = protein_walk(n_res, rng);
    let residues: Vec<(String, Vec3)> = res_coords
        .iter()
        .map(|&c| (AA_CODES[rng.gen_range(0..AA_CODES.len())].to_string(), q3(c)))
        .collect();
    let protein = ProteinGraph::new(residues).expect("walk produced valid residues");

    let (descriptors, bonds) = build_ligand(spec, rng);
    // drop the truth pose next to a random residue
    let anchor = protein.residues[rng.gen_range(0..protein.len())].coord;
    let site = geom::add(anchor, geom::scale(random_unit(rng), rng.gen_range(2.0..4.0)));
    let rot = RigidMotion {
        rot: random_rotation(rng),
        trans: [0.0; 3],
    };
    let local: Vec<Vec3> = descriptors.iter().map(|(_, c)| *c).collect();
    let centroid = geom::centroid(&local);
    let truth: Vec<Vec3> = local
        .iter()
        .map(|&c| q3(geom::add(rot.apply(geom::sub(c, centroid)), site)))
        .collect();

    // initial conformer: jitter each atom, then a random rigid motion
    let m = random_rigid_motion(rng, 8.0);
    let noisy: Vec<Vec3> = truth
        .iter()
        .map(|&c| {
            let jitter = [
                rng.gen_range(-spec.conformer_noise..=spec.conformer_noise),
                rng.gen_range(-spec.conformer_noise..=spec.conformer_noise),
                rng.gen_range(-spec.conformer_noise..=spec.conformer_noise),
            ];
            q3(m.apply(geom::add(c, jitter)))
        })
        .collect();

    let descriptors: Vec<(AtomDescriptor, Vec3)> = descriptors
        .into_iter()
        .zip(&noisy)
        .map(|((d, _), &c)| (d, c))
        .collect();
    let ligand = LigandGraph::new(descriptors, bonds).expect("generated ligand is valid");

    let truth_center = geom::centroid(&truth);
    let pocket_labels: Vec<bool> = protein
        .coords()
        .iter()
        .map(|&c| geom::dist(c, truth_center) <= POCKET_RADIUS)
        .collect();
    let record = ComplexRecord {
        ligand,
        protein,
        pocket_labels,
        truth,
    };
    record.validate().expect("generated record is self-consistent");
    record
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::{parse_complex, render_complex};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn generated_record_round_trips_bit_exactly() {
        let spec = SyntheticSpec::default();
        for seed in 0..10 {
            let rec = generate_synthetic_complex(&spec, &mut rng(seed));
            let text = render_complex(&rec);
            let back = parse_complex(&text).unwrap();
            assert_eq!(rec, back);
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let spec = SyntheticSpec::default();
        let a = render_complex(&generate_synthetic_complex(&spec, &mut rng(7)));
        let b = render_complex(&generate_synthetic_complex(&spec, &mut rng(7)));
        assert_eq!(a, b);
    }

    #[test]
    fn truth_pose_sits_inside_a_labeled_pocket() {
        let spec = SyntheticSpec::default();
        for seed in 0..20 {
            let rec = generate_synthetic_complex(&spec, &mut rng(seed));
            let center = rec.native_center();
            assert!(rec.pocket_labels.iter().any(|&b| b), "at least one pocket residue");
            for (i, &labeled) in rec.pocket_labels.iter().enumerate() {
                let d = geom::dist(rec.protein.residues[i].coord, center);
                assert_eq!(labeled, d <= POCKET_RADIUS, "label {i} disagrees with sphere");
            }
        }
    }

    #[test]
    fn conformer_differs_from_truth_but_preserves_bond_lengths_approximately() {
        let spec = SyntheticSpec {
            conformer_noise: 0.0,
            ..SyntheticSpec::default()
        };
        let rec = generate_synthetic_complex(&spec, &mut rng(3));
        let init = rec.ligand.coords();
        assert_ne!(init, rec.truth, "initial conformer is moved away from the pose");
        // with zero jitter the conformer is a rigid motion of the truth,
        // so every bond length matches (up to coordinate quantization)
        for &(a, b) in &rec.ligand.bonds {
            let d0 = geom::dist(rec.truth[a], rec.truth[b]);
            let d1 = geom::dist(init[a], init[b]);
            assert!((d0 - d1).abs() < 1e-4, "bond ({a},{b}): {d0} vs {d1}");
        }
    }

    #[test]
    fn residues_are_well_separated() {
        let rec = generate_synthetic_complex(&SyntheticSpec::default(), &mut rng(9));
        let coords = rec.protein.coords();
        for i in 0..coords.len() {
            for j in i + 1..coords.len() {
                assert!(geom::dist(coords[i], coords[j]) >= 2.9);
            }
        }
    }
}
