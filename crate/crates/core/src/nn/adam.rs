use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter moment estimates and step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Array2::zeros(store.value(id).dim()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads.iter() {
            self.update_one(store, id, g, lr, beta1, beta2, eps);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn update_one(
        &mut self,
        store: &mut ParamStore,
        id: ParamId,
        g: &Array2<f64>,
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
    ) {
        let i = id.index();
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        Zip::from(store.value_mut(id))
            .and(&mut self.first[i])
            .and(&mut self.second[i])
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use crate::nn::tape::Tape;

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", (1, 3), Init::Constant(2.0));
        store.init_default(&mut rand::rng());
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let mut t = Tape::new();
            let x = t.param(&store, id);
            let x = t.add_scalar(x, -0.5);
            let sq = t.square(x);
            let l = t.mean(sq);
            let g = t.backward(l);
            adam.step(&mut store, &g, 1e-2);
        }
        assert!(store.value(id).iter().all(|v| (v - 0.5).abs() < 1e-3));
        assert_eq!(adam.steps[0], 2000);
    }
}
