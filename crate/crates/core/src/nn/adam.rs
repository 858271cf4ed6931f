use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self {
            m: store.grads.iter().map(|g| vec![T::zero(); g.len()]).collect(),
            v: store.grads.iter().map(|g| vec![T::zero(); g.len()]).collect(),
            step: 0,
        }
    }

    pub fn flatten(&self) -> (Vec<T>, Vec<T>) {
        (self.m.concat(), self.v.concat())
    }

    /// Rebuilds the state for `store` from flat moment buffers.
    pub fn from_flat(store: &ParamStore<T>, m: &[T], v: &[T], step: u64) -> Option<Self> {
        let total = store.num_scalars();
        if m.len() != total || v.len() != total {
            return None;
        }
        let mut out = Self::for_store(store);
        let mut off = 0;
        for (mm, vv) in out.m.iter_mut().zip(out.v.iter_mut()) {
            let n = mm.len();
            mm.copy_from_slice(&m[off..off + n]);
            vv.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        out.step = step;
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update from the gradients currently in `store`.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, state: &mut AdamState<T>) {
        state.step += 1;
        let t = state.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step = T::from_f64(self.lr / c1);
        let c2s = T::from_f64(c2.sqrt());
        let eps = T::from_f64(self.eps);
        for (i, value) in store.values.iter_mut().enumerate() {
            let g = &store.grads[i];
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for k in 0..g.len() {
                m[k] = b1 * m[k] + ob1 * g[k];
                v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                value.data[k] = value.data[k] - step * m[k] / (v[k].sqrt() / c2s + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        store.grads[0] = vec![0.3, -5.0];
        let mut st = AdamState::for_store(&store);
        let adam = Adam { lr: 0.01, ..Adam::default() };
        adam.step(&mut store, &mut st);
        assert!((store.values[0].data[0] - 0.99).abs() < 1e-6);
        assert!((store.values[0].data[1] + 0.99).abs() < 1e-6);
        let (m, v) = st.flatten();
        let back = AdamState::from_flat(&store, &m, &v, st.step).unwrap();
        assert_eq!(back, st);
    }
}
