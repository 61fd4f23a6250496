//! Adam with constant learning rate.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { learning_rate, step: 0, m: zeros(), v: zeros() }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(learning_rate: f64, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self { learning_rate, step, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. Parameters whose gradient is `None` are left untouched,
    /// moments included.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Structure(format!(
                "optimizer tracks {} tensors, store has {}, gradients {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::Structure(format!("gradient shape {:?} for parameter of shape {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.learning_rate * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new();
        let id = p.register("w", Tensor::row_vector(vec![1.0, -2.0]));
        let mut opt = Adam::new(&p, 0.01);
        opt.step(&mut p, &[Some(Tensor::row_vector(vec![3.0, -0.5]))]).unwrap();
        // bias-corrected m/sqrt(v) is sign(g) on the first step
        let w = p.get(id).data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_leaves_parameter_alone() {
        let mut p = ParamStore::new();
        let a = p.register("a", Tensor::scalar(1.0));
        let b = p.register("b", Tensor::scalar(1.0));
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..5 {
            opt.step(&mut p, &[Some(Tensor::scalar(1.0)), None]).unwrap();
        }
        assert!(p.get(a).item() < 1.0);
        assert_eq!(p.get(b).item(), 1.0);
        assert_eq!(opt.moments().0[1].item(), 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        let id = p.register("x", Tensor::row_vector(vec![3.0, -4.0]));
        let mut opt = Adam::new(&p, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.get(id).data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &[Some(Tensor::row_vector(g))]).unwrap();
        }
        assert!(p.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }
}
