//! Adam optimizer with conventional defaults (beta1 0.9, beta2 0.999,
//! eps 1e-8) and a constant learning rate.

use ndarray::ArrayD;

use super::{fl, ParamMut, Scalar};

pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One optimizer step over the parameter list. The list must be
    /// presented in the same order on every call; first-/second-moment
    /// buffers are allocated lazily on the first step.
    pub fn step(&mut self, params: Vec<ParamMut<'_, F>>) {
        if self.m.is_empty() {
            for p in &params {
                self.m.push(ArrayD::zeros(p.value.raw_dim()));
                self.v.push(ArrayD::zeros(p.value.raw_dim()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed size");
        self.step += 1;
        let t = self.step as i32;
        let b1 = fl::<F>(self.beta1);
        let b2 = fl::<F>(self.beta2);
        let one = F::one();
        let corr1 = fl::<F>(1.0 - self.beta1.powi(t));
        let corr2 = fl::<F>(1.0 - self.beta2.powi(t));
        let lr = fl::<F>(self.lr);
        let eps = fl::<F>(self.eps);
        for (i, mut p) in params.into_iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            assert_eq!(m.shape(), p.value.shape(), "parameter shape changed");
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / corr1;
                    let vhat = *v / corr2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    /// Two steps on a single scalar parameter, checked against hand-rolled
    /// Adam recurrences.
    #[test]
    fn matches_scalar_reference() {
        let mut w = ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0f64);
        let mut g = ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.0f64);
        let mut opt = Adam::<f64>::new(0.1);

        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut w_ref = 1.0f64;
        for t in 1..=2 {
            let grad = 2.0 * w_ref; // derivative of w^2 at the reference point
            g[[0]] = 2.0 * w[[0]];
            opt.step(vec![ParamMut {
                name: "w".into(),
                value: w.view_mut(),
                grad: g.view_mut(),
            }]);

            m = 0.9 * m + 0.1 * grad;
            v = 0.999 * v + 0.001 * grad * grad;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            assert!((w[[0]] - w_ref).abs() < 1e-12, "step {t}");
        }
    }
}
