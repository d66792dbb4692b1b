use crate::nn::tensor::Matrix;

/// Adaptive-moment gradient descent with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = shapes
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update; `params` and `grads` are aligned with the shapes given at
    /// construction.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        assert_eq!(params.len(), self.m.len(), "adam state alignment");
        assert_eq!(grads.len(), self.m.len(), "adam gradient alignment");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // minimize (p − 3)² from p = 0
        let mut p = Matrix::column(&[0.0]);
        let mut adam = Adam::new(0.1, &[&p]);
        for _ in 0..500 {
            let g = Matrix::column(&[2.0 * (p.get(0, 0) - 3.0)]);
            adam.step(&mut [&mut p], &[&g]);
        }
        assert!((p.get(0, 0) - 3.0).abs() < 1e-3);
    }
}
