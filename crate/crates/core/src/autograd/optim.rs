use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        let step_size = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(i);
            if g.len() != p.len() {
                return Err(Error::Shape(format!(
                    "gradient {} for parameter {:?}",
                    g.len(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= step_size * m[k] / (v[k].sqrt() / bc2_sqrt + self.eps);
            }
        }
        Ok(())
    }
}

/// Sums gradients over several backward passes.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: Vec<Option<Tensor>>) {
        if self.sums.is_empty() {
            self.sums = grads;
        } else {
            for (acc, g) in self.sums.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient over the accumulated passes; resets the accumulator.
    pub fn take_mean(&mut self) -> Vec<Option<Tensor>> {
        let k = self.count.max(1) as f32;
        self.count = 0;
        std::mem::take(&mut self.sums)
            .into_iter()
            .map(|g| g.map(|t| t.map(|x| x / k)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::from_vec(vec![2], vec![1.0, -1.0]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &[Some(Tensor::from_vec(vec![2], vec![3.0, -0.5]))])
            .unwrap();
        let d = p.get(0).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let x = p.get(0).item();
            opt.step(&mut p, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
        }
        assert!(p.get(0).item().abs() < 1e-2);
    }

    #[test]
    fn accumulator_means() {
        let mut acc = GradAccumulator::new();
        acc.add(vec![Some(Tensor::scalar(1.0)), None]);
        acc.add(vec![Some(Tensor::scalar(3.0)), Some(Tensor::scalar(4.0))]);
        let m = acc.take_mean();
        assert_eq!(m[0].as_ref().unwrap().item(), 2.0);
        assert_eq!(m[1].as_ref().unwrap().item(), 2.0);
        assert_eq!(acc.count(), 0);
    }
}
