//! Bias-corrected Adam over parameters addressed by [`ParamId`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, ParamId, Tensor};
use crate::math;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment accumulators plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    params: AdamParams,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamState {
    pub fn new(params: AdamParams) -> Self {
        Self { params, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.moments.get(&id).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.moments.get(&id).map(|m| m.v.as_slice())
    }

    /// One update of every parameter present in `grads`.
    ///
    /// Fails without touching any parameter if a gradient is non-finite or
    /// does not match its parameter's shape.
    pub fn step<S: ParamStore + ?Sized>(&mut self, grads: &Gradients, lr: f64, store: &mut S) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {} contains NaN/Inf", id.0)));
            }
            let p = store
                .param_mut(*id)
                .ok_or_else(|| Error::invalid(format!("no trainable parameter with id {}", id.0)))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} vs parameter {:?} for id {}",
                    g.shape(),
                    p.shape(),
                    id.0
                )));
            }
        }

        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powi(beta1, t);
        let bc2 = 1.0 - math::powi(beta2, t);
        for (id, g) in grads.iter() {
            let p = store.param_mut(*id).expect("validated above");
            let mo = self
                .moments
                .entry(*id)
                .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            for (((w, &gi), m), v) in
                p.data_mut().iter_mut().zip(g.data()).zip(mo.m.iter_mut()).zip(mo.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (math::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Anything holding parameters an optimizer may update.
pub trait ParamStore {
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor>;
}

impl ParamStore for BTreeMap<ParamId, Tensor> {
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.get_mut(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> BTreeMap<ParamId, Tensor> {
        let mut s = BTreeMap::new();
        s.insert(ParamId(0), Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert(ParamId(0), Tensor::scalar(v));
        g
    }

    fn value(s: &BTreeMap<ParamId, Tensor>) -> f64 {
        s[&ParamId(0)].data()[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.5);
        let mut st = AdamState::new(AdamParams::default());
        st.step(&grad(1.0), 1e-3, &mut p).unwrap();
        // m_hat = 1, v_hat = 1  ->  delta = -lr / (1 + eps)
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((value(&p) - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = store(2.0);
        let mut st = AdamState::new(AdamParams::default());
        st.step(&grad(0.0), 0.1, &mut p).unwrap();
        assert_eq!(value(&p), 2.0);

        st.step(&grad(1.0), 0.1, &mut p).unwrap();
        let m1 = st.first_moment(ParamId(0)).unwrap()[0];
        let v1 = st.second_moment(ParamId(0)).unwrap()[0];
        st.step(&grad(0.0), 0.1, &mut p).unwrap();
        assert!(st.first_moment(ParamId(0)).unwrap()[0] < m1);
        assert!(st.second_moment(ParamId(0)).unwrap()[0] < v1);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = store(1.0);
        let mut st = AdamState::new(AdamParams::default());
        assert!(matches!(st.step(&grad(f64::NAN), 0.1, &mut p), Err(Error::NonFinite(_))));
        assert_eq!(value(&p), 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let mut p = store(1.0);
        let mut g = Gradients::new();
        g.insert(ParamId(3), Tensor::scalar(1.0));
        let mut st = AdamState::new(AdamParams::default());
        assert!(st.step(&g, 0.1, &mut p).is_err());
    }

    #[test]
    fn step_counter_increases() {
        let mut p = store(1.0);
        let mut st = AdamState::new(AdamParams::default());
        for k in 1..=3 {
            st.step(&grad(0.3), 0.01, &mut p).unwrap();
            assert_eq!(st.step_count(), k);
        }
    }
}
