//! Adam optimizer over a `ParamStore`.
//!
//! Per-parameter first/second moment estimates with bias correction. State
//! slots are allocated from the store's registration order, so a given
//! (model, optimizer config, data order) triple always produces the same
//! update sequence.

use crate::error::{GesrError, Result};
use crate::numerics::matrix::DenseMatrix;
use crate::numerics::graph::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(GesrError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GesrError::Config(format!("{name} {b} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(GesrError::Config(format!("eps {} must be > 0", self.eps)));
        }
        Ok(())
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    steps: u64,
}

impl Adam {
    /// Allocates zeroed moment buffers shaped like every tensor currently
    /// registered in `store`.
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Adam> {
        cfg.validate()?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in store.ids() {
            let (r, c) = store.get(id).value.dims();
            m.push(DenseMatrix::zeros(r, c));
            v.push(DenseMatrix::zeros(r, c));
        }
        Ok(Adam {
            cfg,
            m,
            v,
            steps: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently accumulated in `store`.
    /// Gradients are left untouched; the caller decides when to zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(GesrError::Contract(format!(
                "optimizer built for {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.steps += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.steps as i32);
        let bias2 = 1.0 - b2.powi(self.steps as i32);
        for (slot, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if !store.get(id).grad.is_finite() {
                return Err(GesrError::NonFinite(format!(
                    "gradient for parameter {}",
                    store.name(id)
                )));
            }
            let tensor = store.get_mut(id);
            let grad = &tensor.grad;
            let value = tensor.value.data_mut();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for i in 0..grad.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use rand::SeedableRng as _;

    fn store_with(name: &str, m: DenseMatrix) -> (ParamStore, crate::numerics::graph::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register(name, m).unwrap();
        (store, id)
    }

    #[test]
    fn minimizes_a_quadratic() {
        // loss = sum((p - 3)^2), gradient 2(p - 3).
        let (mut store, id) = store_with("p", DenseMatrix::from_vec(1, 2, vec![0.0, 10.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &store).unwrap();
        for _ in 0..500 {
            store.zero_grads();
            let value = store.get(id).value.clone();
            let grad = store.get_mut(id);
            for i in 0..2 {
                grad.grad.data_mut()[i] = 2.0 * (value.data()[i] - 3.0);
            }
            opt.step(&mut store).unwrap();
        }
        for &p in store.get(id).value.data() {
            assert!((p - 3.0).abs() < 1e-3, "did not converge: {p}");
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With constant gradient g, the bias-corrected first step is
        // lr * g / (|g| + eps) = lr * sign(g) up to eps.
        let (mut store, id) =
            store_with("p", DenseMatrix::from_vec(1, 3, vec![1.0, -2.0, 5.0]).unwrap());
        store.get_mut(id).grad =
            DenseMatrix::from_vec(1, 3, vec![0.4, -0.003, 7.0]).unwrap();
        let lr = 1e-3;
        let mut opt = Adam::new(AdamConfig::with_lr(lr), &store).unwrap();
        opt.step(&mut store).unwrap();
        let got = store.get(id).value.data();
        let expect = [1.0 - lr, -2.0 + lr, 5.0 - lr];
        for i in 0..3 {
            assert!(
                (got[i] - expect[i]).abs() < 1e-6,
                "coordinate {i}: {} vs {}",
                got[i],
                expect[i]
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_bitwise_unchanged() {
        let before = DenseMatrix::from_vec(2, 2, vec![0.3, -1.7, 2.2, 0.0]).unwrap();
        let (mut store, id) = store_with("p", before.clone());
        let mut opt = Adam::new(AdamConfig::default(), &store).unwrap();
        for _ in 0..3 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.get(id).value.data(), before.data());
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let before = DenseMatrix::from_vec(1, 4, vec![0.5, -0.5, 1.5, -9.0]).unwrap();
        let (mut store, id) = store_with("p", before.clone());
        store.get_mut(id).grad = DenseMatrix::filled(1, 4, 3.14);
        let mut opt = Adam::new(AdamConfig::with_lr(0.0), &store).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).value.data(), before.data());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut store, id) = store_with("p", DenseMatrix::zeros(1, 2));
        store.get_mut(id).grad.data_mut()[1] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::default(), &store).unwrap();
        let err = opt.step(&mut store).unwrap_err();
        assert!(matches!(err, GesrError::NonFinite(_)), "{err}");
    }

    #[test]
    fn drives_a_logistic_loss_down_through_the_graph() {
        let mut store = ParamStore::new();
        let w = store.register_glorot(
            "w",
            3,
            1,
            &mut rand_chacha::ChaCha20Rng::seed_from_u64(7),
        ).unwrap();
        let x = DenseMatrix::from_vec(4, 3, vec![
            1.0, 0.2, -0.3,
            -0.5, 1.0, 0.8,
            0.0, -1.2, 0.4,
            0.9, 0.1, -1.0,
        ]).unwrap();
        let y = DenseMatrix::from_vec(4, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &store).unwrap();
        let mut losses = Vec::new();
        for _ in 0..40 {
            store.zero_grads();
            let mut g = Graph::recording();
            let xv = g.input(x.clone());
            let wv = g.param(&store, w);
            let logits = g.matmul(xv, wv).unwrap();
            let loss = g.bce_mean(logits, &y).unwrap();
            losses.push(g.scalar(loss).unwrap());
            g.backward(loss, &mut store).unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!(
            losses.last().unwrap() < &(losses[0] * 0.5),
            "loss did not halve: {} -> {}",
            losses[0],
            losses.last().unwrap()
        );
    }
}
