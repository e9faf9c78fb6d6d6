//! Parameter management, linear layers, MLPs, the decoupled-weight-decay
//! optimizer, Gumbel noise, and the central finite-difference checker.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGrad(String),
}

/// Ordered registry of named trainable tensors. Registration order is the
/// checkpoint and optimizer-state order, so it must be deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create a parameter with fan-in-scaled uniform init and register it.
    pub fn create(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, Tensor::leaf(rows, cols, values, true))
    }

    pub fn create_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        self.register(name, Tensor::leaf(rows, cols, vec![0.0; rows * cols], true))
    }

    fn register(&mut self, name: &str, t: Tensor) -> Tensor {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "parameter `{name}` registered twice"
        );
        self.entries.push((name.to_string(), t.clone()));
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Zero-fill gradients of parameters the current graph never reached.
    pub fn ensure_grads(&self) {
        for (_, t) in &self.entries {
            t.ensure_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Piecewise-linear ramp.
    Relu,
    /// Smooth ramp; used inside coordinate-scaling MLPs.
    Softplus,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Softplus => x.softplus(),
        }
    }
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.create(&format!("{prefix}.w"), in_dim, out_dim, in_dim, rng);
        let b = store.create_zeros(&format!("{prefix}.b"), 1, out_dim);
        Linear { w, b }
    }

    /// Bias-free variant (OPM inner projections).
    pub fn new_no_bias(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.create(&format!("{prefix}.w"), in_dim, out_dim, in_dim, rng);
        let b = Tensor::zeros(1, out_dim);
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_row(&self.b)
    }
}

/// Two-linear-layer perceptron with one hidden activation.
pub struct Mlp {
    pub l0: Linear,
    pub l1: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            l0: Linear::new(store, &format!("{prefix}.l0"), in_dim, hidden, rng),
            l1: Linear::new(store, &format!("{prefix}.l1"), hidden, out_dim, rng),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.l1.forward(&self.act.apply(&self.l0.forward(x)))
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &ParamStore) -> Result<(), OptimError> {
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (idx, (name, p)) in store.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| OptimError::MissingGrad(name.to_string()))?;
            let mut vals = p.to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..vals.len() {
                // decoupled decay acts on the parameter, not the gradient
                vals[i] -= self.lr * self.weight_decay * vals[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                vals[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_values(vals);
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step_count: u64) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

/// One standard-Gumbel draw: `-ln(-ln u)`, `u ~ U(0,1)` clamped away from
/// the endpoints.
pub fn sample_gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(0.0..1.0);
    let u = u.clamp(1e-7, 1.0 - 1e-7);
    -(-u.ln()).ln()
}

/// Central finite-difference gradient of a scalar function at `x`.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error between analytic and finite-difference gradients.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let mut store = ParamStore::new();
        let p = store.create("p", 1, 3, 3, &mut rng(0));
        let before = p.to_vec();
        let loss = Tensor::scalar(0.0).add(&p.scale(0.0).sum());
        loss.backward().unwrap();
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&store).unwrap();
        let after = p.to_vec();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_about_lr() {
        let mut store = ParamStore::new();
        let p = store.register_for_test("p", Tensor::leaf(1, 1, vec![1.0], true));
        let loss = p.scale(3.0).sum(); // constant grad 3
        loss.backward().unwrap();
        let mut opt = AdamW::new(&store, 0.01, 0.0);
        opt.step(&store).unwrap();
        // bias-corrected update at t=1 is lr * g / (|g| + eps) ~= lr
        let moved = 1.0 - p.to_vec()[0];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adamw_decay_shrinks_params_with_zero_grad() {
        let mut store = ParamStore::new();
        let p = store.register_for_test("p", Tensor::leaf(1, 1, vec![2.0], true));
        let loss = p.scale(0.0).sum();
        loss.backward().unwrap();
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        opt.step(&store).unwrap();
        // only the decoupled decay term fires: p *= (1 - lr * wd)
        assert!((p.to_vec()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn adamw_missing_grad_is_an_error() {
        let mut store = ParamStore::new();
        store.register_for_test("p", Tensor::leaf(1, 1, vec![1.0], true));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        assert!(matches!(opt.step(&store), Err(OptimError::MissingGrad(_))));
    }

    #[test]
    fn gumbel_fixed_point_and_determinism() {
        // u = 1/e gives g = -ln(-ln(1/e)) = -ln(1) = 0
        let g = -(-(1.0f64 / std::f64::consts::E).ln()).ln();
        assert!(g.abs() < 1e-15);
        let a: Vec<f64> = {
            let mut r = rng(7);
            (0..10).map(|_| sample_gumbel(&mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = rng(7);
            (0..10).map(|_| sample_gumbel(&mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut r = rng(123);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| sample_gumbel(&mut r)).sum::<f64>() / n as f64;
        assert!((mean - 0.5772156649).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut r = rng(42);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", 3, 8, 2, Activation::Softplus, &mut r);
        let x_vals: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();

        for (name, p) in store.iter() {
            let x = Tensor::constant(2, 3, x_vals.clone());
            store.zero_grad();
            let loss = mlp.forward(&x).square().sum();
            loss.backward().unwrap();
            let analytic = p.grad().unwrap();
            let base = p.to_vec();
            let mut f = |vals: &[f64]| {
                p.set_values(vals.to_vec());
                let x = Tensor::constant(2, 3, x_vals.clone());
                let v = mlp.forward(&x).square().sum().value();
                v
            };
            let numeric = fd_grad(&mut f, &base, 1e-5);
            p.set_values(base);
            let err = grad_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "param {name}: rel err {err}");
        }
    }

    impl ParamStore {
        fn register_for_test(&mut self, name: &str, t: Tensor) -> Tensor {
            self.entries.push((name.to_string(), t.clone()));
            t
        }
    }
}
