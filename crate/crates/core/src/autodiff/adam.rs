use crate::autodiff::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
///
/// Moments are kept in `f64` regardless of the parameter precision and
/// persist across calls to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "adam step without a gradient for {}",
                p.name
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                if update != 0.0 {
                    *w = T::from_f64_lossy(w.as_f64() - update);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(1.25);
        s.zero_grad();
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.get(0).value, before.get(0).value);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the first update is lr·g/(|g|+eps) ≈ lr.
        let mut s = scalar_store(0.0);
        s.zero_grad();
        s.get_mut(0).grad = Some(Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut s).unwrap();
        let x = s.get(0).value.item();
        assert!((x + 0.1).abs() < 1e-8, "{x}");
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x, y) = (x - 3)² + 2 (y + 1)², argmin (3, -1)
        let mut s = ParamStore::<f64>::new();
        s.push("xy", Tensor::column(vec![0.0, 0.0]));
        let target = Tensor::column(vec![3.0, -1.0]);
        let weights = Tensor::column(vec![1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        let mut steps = 0;
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let vars = s.bind(&mut tape);
            let t = tape.constant(target.clone());
            let w = tape.constant(weights.clone());
            let d = tape.sub(vars[0], t).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let wsq = tape.mul(sq, w).unwrap();
            let loss = tape.sum(wsq);
            tape.backward(loss).unwrap();
            s.clear_grad();
            s.accumulate_grads(&tape, &vars, 1.0).unwrap();
            adam.step(&mut s).unwrap();
            steps += 1;
        }
        let xy = s.get(0).value.data();
        assert!(steps <= 2000);
        assert!((xy[0] - 3.0).abs() < 1e-4 && (xy[1] + 1.0).abs() < 1e-4, "{xy:?}");
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::<f32>::new();
        s.push("a", Tensor::column(vec![0.0, 0.0]));
        s.get_mut(0).grad = Some(Tensor::column(vec![30.0, 40.0]));
        assert_eq!(s.clip_grad_norm(5.0), Some(50.0));
        assert!((s.grad_norm() - 5.0).abs() < 1e-5);
        assert_eq!(s.clip_grad_norm(5.0), None);
    }
}
