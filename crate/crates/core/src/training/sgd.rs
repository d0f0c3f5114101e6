use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// Stochastic gradient descent with heavy-ball momentum. The velocity is
/// seeded with the first gradient: `v = m * v + g; p -= lr * v`.
#[derive(Debug)]
pub struct Sgd {
    params: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<Var>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; params.len()];
        Sgd {
            params,
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Applies one update. Parameters absent from `grads` are left alone and
    /// keep their velocity.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (p, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + p.as_tensor().detach().affine(self.weight_decay, 0.0)?)?;
            }
            let next = match v.take() {
                Some(prev) if self.momentum != 0.0 => (prev.affine(self.momentum, 0.0)? + g)?,
                _ => g,
            };
            p.set(&(p.as_tensor().detach() - next.affine(lr, 0.0)?)?)?;
            *v = Some(next);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn scalar(v: &Var) -> f64 {
        v.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        // loss = 0.5 * p^2, gradient p
        let p = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.9, 0.0);
        let (mut x, mut v, lr) = (1.0f64, 0.0f64, 0.1);
        for k in 0..5 {
            let loss = (p.as_tensor().sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), lr).unwrap();
            v = if k == 0 { x } else { 0.9 * v + x };
            x -= lr * v;
            assert!((scalar(&p) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let p = Var::from_tensor(&Tensor::new(&[2.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.0, 0.5);
        let loss = p.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        // grad 1 + 0.5 * 2
        assert!((scalar(&p) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn untouched_params_stay() {
        let a = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Sgd::new(vec![a.clone(), b.clone()], 0.9, 0.0);
        let loss = a.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 1.0).unwrap();
        assert_eq!(scalar(&a), 0.0);
        assert_eq!(scalar(&b), 3.0);
    }
}
