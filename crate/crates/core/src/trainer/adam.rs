//! Adam with cosine learning-rate decay and global-norm clipping.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `lr` at step 0 to `floor_fraction * lr` at `total_steps`.
pub fn cosine_lr(lr: f64, floor_fraction: f64, step: usize, total_steps: usize) -> f64 {
    let floor = floor_fraction * lr;
    if total_steps == 0 {
        return lr;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` so their joint norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let g = Tensor::row(vec![0.5, -3.0]);
        let mut adam = Adam::new(&[2]);
        adam.step(&mut [&mut p], &[g], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::row(vec![0.0, 0.0]);
        let mut adam = Adam::new(&[2]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::row(vec![0.0, 0.0])], 0.1);
        }
        assert_eq!(p.data(), &[0.0, 0.0]);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0.01, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 0.01, 100, 100) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(1.0, 0.0, 50, 100) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn clipping_hits_threshold_exactly() {
        let mut g = vec![Tensor::row(vec![3.0, 0.0]), Tensor::row(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n = g.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::row(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }
}
