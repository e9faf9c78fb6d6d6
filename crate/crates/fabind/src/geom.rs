//! Small 3-D vector helpers and random rigid motions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    assert!(!points.is_empty(), "centroid of empty point set");
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    scale(c, 1.0 / points.len() as f64)
}

/// 3x3 orthogonal matrix plus translation.
#[derive(Clone, Copy, Debug)]
pub struct RigidMotion {
    pub rot: [[f64; 3]; 3],
    pub trans: Vec3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion {
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            trans: [0.0; 3],
        }
    }

    pub fn translation(t: Vec3) -> Self {
        RigidMotion {
            rot: RigidMotion::identity().rot,
            trans: t,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.trans[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.trans[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.trans[2],
        ]
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|&p| self.apply(p)).collect()
    }

    /// Rotation part only (no translation); maps difference vectors.
    pub fn apply_linear(&self, p: Vec3) -> Vec3 {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let r = &self.rot;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }
}

/// Uniform random rotation from a quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Shoemake's method
    let u1: f64 = rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let u3: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Random element of E(3): rotation or rotoreflection plus translation.
/// Reflections appear with probability 1/2.
pub fn random_rigid_motion(rng: &mut ChaCha8Rng, trans_range: f64) -> RigidMotion {
    let mut rot = random_rotation(rng);
    if rng.gen_bool(0.5) {
        for row in rot.iter_mut() {
            row[0] = -row[0];
        }
    }
    let trans = [
        rng.gen_range(-trans_range..trans_range),
        rng.gen_range(-trans_range..trans_range),
        rng.gen_range(-trans_range..trans_range),
    ];
    RigidMotion { rot, trans }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_motion_is_orthogonal_and_preserves_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = random_rigid_motion(&mut rng, 10.0);
            let d = m.det();
            assert!((d.abs() - 1.0).abs() < 1e-10, "det {d}");
            let a = [1.0, -2.0, 0.5];
            let b = [-0.3, 4.0, 2.0];
            let before = dist(a, b);
            let after = dist(m.apply(a), m.apply(b));
            assert!((before - after).abs() < 1e-10);
        }
    }

    #[test]
    fn reflections_occur() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dets: Vec<f64> = (0..40).map(|_| random_rigid_motion(&mut rng, 1.0).det()).collect();
        assert!(dets.iter().any(|&d| d < 0.0));
        assert!(dets.iter().any(|&d| d > 0.0));
    }
}
