use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Adam with bias correction. Moments are created lazily to match the
/// parameter shapes on the first step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts the step before any
    /// parameter or moment is touched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != grads.len() {
            return Err(NumericsError::Shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.same_shape(g)?;
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(NumericsError::NonFinite {
                step: self.step + 1,
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(NumericsError::Shape("parameter count changed".into()));
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(0.1);
        let mut p = vec![Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap()];
        let g = vec![Tensor::zeros(1, 2)];
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut adam = Adam::new(0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0)];
        adam.step(&mut p, &g).unwrap();
        assert!(p[0].data()[0] < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = (w0 - 3)^2 + 2 (w1 + 1)^2, minimizer (3, -1)
        let mut adam = Adam::new(0.05);
        let mut p = vec![Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()];
        for _ in 0..500 {
            let mut t = Tape::new();
            let w = t.leaf(p[0].clone());
            let target = t.constant(Tensor::from_rows(&[vec![-3.0, 1.0]]).unwrap());
            let d = t.add(w, target).unwrap();
            let sq = t.square(d);
            let weights = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
            let wsq = t.mul_row(sq, weights).unwrap();
            let f = t.sum(wsq);
            let g = t.backward(f).unwrap().get(w);
            adam.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 1e-3, "{:?}", p[0]);
        assert!((p[0].data()[1] + 1.0).abs() < 1e-3, "{:?}", p[0]);
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut adam = Adam::new(0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let err = adam.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { step: 2 }));
        assert_eq!(adam.steps(), 1);
    }
}
