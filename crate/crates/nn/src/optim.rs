// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::{ParamStore, Scalar};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One update of every parameter using its populated gradient.
    ///
    /// An empty store is a no-op.
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>) {
        self.step_with_lr(params, self.lr);
    }

    /// As [`AdamW::step`], overriding the learning rate (for schedules).
    pub fn step_with_lr<T: Scalar>(&self, params: &mut ParamStore<T>, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        let (b1, b2) = (self.beta1, self.beta2);
        for p in params.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let step_size = T::from_f64(lr / bc1);
            let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
            let decay = if p.decay { T::from_f64(1.0 - lr * self.weight_decay) } else { T::one() };
            let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
            let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
            let eps = T::from_f64(self.eps);
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1t * *mi + ob1 * gi;
            }
            let v = p.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2t * *vi + ob2 * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                *w = *w * decay - step_size * mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w), false);
        s
    }

    #[test]
    fn zero_gradient_no_decay_leaves_value() {
        let mut s = scalar_store(2.5);
        AdamW::new(1e-3).step(&mut s);
        assert_eq!(s.value(crate::ParamId(0)).data()[0], 2.5);
        assert_eq!(s.get(crate::ParamId(0)).step, 1);
    }

    #[test]
    fn single_unit_gradient_step() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut s = scalar_store(0.0);
        s.get_mut(crate::ParamId(0)).grad.data_mut()[0] = 1.0;
        AdamW::new(1e-3).step(&mut s);
        let w = s.value(crate::ParamId(0)).data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "w = {w}");
    }

    fn run_quadratic(opt: AdamW, steps: usize) -> f64 {
        let mut s = scalar_store(0.0);
        for _ in 0..steps {
            let w = s.value(crate::ParamId(0)).data()[0];
            s.get_mut(crate::ParamId(0)).grad.data_mut()[0] = 2.0 * (w - 5.0);
            opt.step(&mut s);
        }
        s.value(crate::ParamId(0)).data()[0]
    }

    #[test]
    fn converges_on_quadratic() {
        let opt = AdamW { beta2: 0.99, ..AdamW::new(1e-2) };
        let w = run_quadratic(opt, 1000);
        assert!((w - 5.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn matches_reference_trajectory_with_default_betas() {
        // torch.optim.AdamW(lr=1e-2, weight_decay=0) on (w-5)^2, 1000 steps from 0
        let w = run_quadratic(AdamW::new(1e-2), 1000);
        assert!((w - 4.864_669_895_395_838).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn empty_store_is_noop() {
        let mut s = ParamStore::<f32>::new();
        AdamW::default().step(&mut s);
        assert!(s.is_empty());
    }
}
