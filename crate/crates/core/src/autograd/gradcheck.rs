//! Central finite-difference check of reverse-mode gradients.
//!
//! Compares the analytic directional derivative `<grad, d>` with
//! `(f(x + h d) - f(x - h d)) / 2h`. The direction has random Gaussian
//! magnitudes and the signs of the analytic gradient (positive where it is zero).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Checks `f` at `inputs`, perturbing all of them at once.
pub fn check_gradient<F>(inputs: &[Tensor], h: f32, seed: u64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let mut analytic = 0.0f64;
    let mut dirs = Vec::with_capacity(inputs.len());
    for (v, t) in vars.iter().zip(inputs) {
        let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape()));
        let d: Vec<f32> = g
            .data()
            .iter()
            .map(|&gk| {
                let m: f32 = StandardNormal.sample(&mut rng);
                if gk < 0.0 {
                    -m.abs()
                } else {
                    m.abs()
                }
            })
            .collect();
        analytic += g
            .data()
            .iter()
            .zip(&d)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>();
        dirs.push(d);
    }

    let eval = |sign: f32| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let shifted = t
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&x, &dx)| x + sign * h * dx)
                    .collect();
                tape.constant(Tensor::from_vec(t.shape().to_vec(), shifted))
            })
            .collect();
        Ok(f(&tape, &vars)?.item() as f64)
    };
    let numeric = (eval(1.0)? - eval(-1.0)?) / (2.0 * h as f64);
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error: (analytic - numeric).abs() / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -0.2, 0.7, 1.1]);
        let ok = check_gradient(&[x.clone()], 1e-3, 1, |_, v| Ok(v[0].exp().sum())).unwrap();
        assert!(ok.passes(1e-3), "{ok:?}");
        // the wrong rule (derivative of exp reported as 0.5 exp) must be caught
        let bad = check_gradient(&[x], 1e-3, 1, |tape, v| {
            let y = v[0].exp();
            let half = tape.constant(Tensor::from_vec(
                vec![4],
                y.value().data().iter().map(|a| 0.5 * a).collect(),
            ));
            let detached_half = v[0].exp().scale(0.5);
            Ok(y.sub(detached_half)?.add(half)?.sum())
        })
        .unwrap();
        assert!(!bad.passes(1e-3));
    }
}
