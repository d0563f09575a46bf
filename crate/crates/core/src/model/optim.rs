//! Adaptive-moment optimizer with decoupled weight decay.

use crate::networks::tape::{Grads, ParamStore};
use ndarray::{Array2, Zip};

pub(crate) struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Array2<f64>> = store.iter().map(|(_, a)| Array2::zeros(a.dim())).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// One update. Weight decay is decoupled: it scales the parameter
    /// directly rather than entering the moment estimates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        for ((p, g), (m, v)) in params
            .arrays_mut()
            .iter_mut()
            .zip(grads.arrays())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Array2<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", values);
        s
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut params = store_with(Array2::from_elem((1, 2), 2.0));
        let mut grads = Grads::zeros_like(&params);
        grads.arrays_mut()[0].fill(1.0);
        let mut opt = AdamW::new(&params, 0.1, 0.01);
        opt.step(&mut params, &grads);
        // mhat = vhat = 1 after bias correction, so the update is
        // lr * (1 / (1 + eps) + wd * p).
        let expect = 2.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01 * 2.0);
        for v in params.arrays_mut()[0].iter() {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut params = store_with(Array2::from_elem((1, 1), 0.0));
        let mut opt = AdamW::new(&params, 0.05, 0.0);
        for _ in 0..2000 {
            let p = params.arrays_mut()[0][[0, 0]];
            let mut grads = Grads::zeros_like(&params);
            grads.arrays_mut()[0][[0, 0]] = 2.0 * (p - 3.0);
            opt.step(&mut params, &grads);
        }
        let p = params.arrays_mut()[0][[0, 0]];
        assert!((p - 3.0).abs() < 1e-3, "ended at {p}");
    }

    #[test]
    fn zero_gradient_still_decays_weights() {
        let mut params = store_with(Array2::from_elem((1, 1), 4.0));
        let grads = Grads::zeros_like(&params);
        let mut opt = AdamW::new(&params, 0.1, 0.5);
        opt.step(&mut params, &grads);
        let p = params.arrays_mut()[0][[0, 0]];
        assert!((p - (4.0 - 0.1 * 0.5 * 4.0)).abs() < 1e-12);
    }
}
