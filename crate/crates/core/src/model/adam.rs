use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Adam with bias correction, one moment pair per parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(lr: f64, blocks: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let m: Vec<Matrix<T>> = blocks.into_iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, v: m.clone(), m }
    }

    pub fn num_blocks(&self) -> usize {
        self.m.len()
    }

    /// Clears both moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for b in self.m.iter_mut().chain(self.v.iter_mut()) {
            b.as_mut_slice().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Matrix<T>>, grads: &[Matrix<T>]) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let one = T::one();
        let mut n = 0;
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            assert_eq!(p.shape(), g.shape(), "gradient shape for block {i}");
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, (x, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
            n += 1;
        }
        assert_eq!(n, self.m.len(), "parameter block count");
    }
}
