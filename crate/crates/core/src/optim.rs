//! Adam with bias correction, shared by autoencoder training and the
//! decomposition solvers.

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
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

/// First and second moment estimates for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Float> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// Advances the step counter and returns the bias-corrected step sizes
    /// `(lr / (1 - beta1^t), 1 / (1 - beta2^t))`.
    pub fn advance(&mut self, cfg: &AdamConfig) -> (T, T) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        (T::from(cfg.lr / c1).unwrap(), T::from(1.0 / c2).unwrap())
    }
}

/// Computes the Adam displacement for one coordinate, updating its moments.
#[inline]
pub fn adam_delta<T: Float>(m: &mut T, v: &mut T, g: T, cfg: &AdamConfig, lr_t: T, inv_c2: T) -> T {
    let b1 = T::from(cfg.beta1).unwrap();
    let b2 = T::from(cfg.beta2).unwrap();
    let one = T::one();
    *m = b1 * *m + (one - b1) * g;
    *v = b2 * *v + (one - b2) * g * g;
    let v_hat = *v * inv_c2;
    lr_t * *m / (v_hat.sqrt() + T::from(cfg.eps).unwrap())
}

/// One Adam update of `params` given `grads`.
pub fn adam_step<T: Float>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "adam: parameter/gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "adam: state length mismatch");
    let (lr_t, inv_c2) = state.advance(cfg);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *p = *p - adam_delta(m, v, g, cfg, lr_t, inv_c2);
    }
}
