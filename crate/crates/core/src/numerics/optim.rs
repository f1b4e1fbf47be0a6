use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction. Moments are kept per parameter and each
/// parameter counts its own steps, so groups updated on alternating
/// sub-steps get correct bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: Vec<Option<AdamState>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            states: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(id.index()).and_then(|s| s.as_ref())
    }

    pub fn set_state(&mut self, id: ParamId, state: AdamState) {
        if self.states.len() <= id.index() {
            self.states.resize(id.index() + 1, None);
        }
        self.states[id.index()] = Some(state);
    }

    /// Applies one update to every unfrozen parameter holding a gradient,
    /// then clears all gradients. Frozen parameters are never written.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let Some(grad) = store.grad(id).map(Tensor::data).map(<[f64]>::to_vec) else {
                continue;
            };
            let n = grad.len();
            let st = self.states[id.index()].get_or_insert_with(|| AdamState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let value = store.value_mut(id).data_mut();
            for k in 0..n {
                let g = grad[k];
                st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * g;
                st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[k] / bc1;
                let v_hat = st.v[k] / bc2;
                value[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("adam update of {}", store.get(id).name)));
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// `base · (1 − step/total)^power`, clamped at zero past the horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolynomialDecay {
    pub base: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl PolynomialDecay {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.base * (1.0 - frac).powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", "g", Tensor::new(vec![1], vec![v]).unwrap());
        s.accumulate_grad(id, &[g]).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(0.0, 1.0);
        Adam::new().step(&mut s, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction -> update lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let (mut s, id) = store_with(0.7, 0.0);
        Adam::new().step(&mut s, 1e-3).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn frozen_param_is_bitwise_unchanged() {
        let (mut s, id) = store_with(0.3, 2.0);
        s.set_frozen("g", true);
        let mut adam = Adam::new();
        for _ in 0..10 {
            s.accumulate_grad(id, &[1.0]).unwrap();
            adam.step(&mut s, 1e-2).unwrap();
        }
        assert_eq!(s.value(id).data()[0].to_bits(), 0.3f64.to_bits());
        assert!(adam.state(id).is_none());
    }

    #[test]
    fn decay_schedule() {
        let d = PolynomialDecay {
            base: 0.001,
            total_steps: 100,
            power: 0.9,
        };
        assert_eq!(d.lr_at(0), 0.001);
        assert!((d.lr_at(50) - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert_eq!(d.lr_at(100), 0.0);
    }
}
