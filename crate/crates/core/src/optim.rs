//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to `params[i]`; a missing gradient
    /// counts as zero.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("adamw", "parameter set changed between steps"));
        }
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if let Some(g) = &grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adamw", p.shape(), g.shape()));
                }
            }
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                data[j] = data[j] * decay - (self.lr as f64 * mh / (vh.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::vector(vec![0.3, -4.0, 0.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.update(vec![&mut p], &[Some(g)]).unwrap();
        let d = p.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 1.9).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Tensor::vector(vec![2.0]);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.update(vec![&mut p], &[None]).unwrap();
        assert!((p.item() - 2.0 * 0.95).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -1.0]);
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            opt.update(vec![&mut p], &[Some(g)]).unwrap();
        }
        assert!(p.data().iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }
}
