use crate::numerics::{Matrix, Scalar};

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    /// Zero moments shaped like `params`; `decay[i]` enables weight decay.
    pub fn new(params: &[&Matrix<T>], decay: Vec<bool>, weight_decay: f64) -> Self {
        assert_eq!(params.len(), decay.len());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Option<&Matrix<T>>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr_t, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if self.decay[i] {
                T::lit(lr * self.weight_decay)
            } else {
                T::zero()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                let mj = b1 * m.data()[j] + (one - b1) * gj;
                let vj = b2 * v.data()[j] + (one - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let pj = p.data()[j];
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + eps);
                p.data_mut()[j] = pj - lr_t * upd - wd * pj;
            }
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to `min_lr`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, base: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + (base - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Linear ramp from `start` to `end` over `warmup` steps.
pub fn teacher_temperature(step: usize, warmup: usize, start: f64, end: f64) -> f64 {
    if step >= warmup {
        end
    } else {
        start + (end - start) * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Matrix::from_rows(&[vec![1.0f64, -2.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![0.5, -3.0]]).unwrap();
        let mut opt = AdamW::new(&[&p], vec![false], 0.0);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_and_masked() {
        let mut a = Matrix::from_rows(&[vec![2.0f64]]).unwrap();
        let mut b = Matrix::from_rows(&[vec![2.0f64]]).unwrap();
        let mut opt = AdamW::new(&[&a, &b], vec![true, false], 0.5);
        opt.step(&mut [&mut a, &mut b], &[None, None], 0.1);
        assert!((a.get(0, 0) - 1.9).abs() < 1e-12);
        assert_eq!(b.get(0, 0), 2.0);
    }

    #[test]
    fn schedules() {
        assert!((lr_schedule(0, 100, 10, 1e-3, 1e-5) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(9, 100, 10, 1e-3, 1e-5), 1e-3);
        assert_eq!(lr_schedule(10, 100, 10, 1e-3, 1e-5), 1e-3);
        assert!((lr_schedule(100, 100, 10, 1e-3, 1e-5) - 1e-5).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = lr_schedule(s, 100, 10, 1e-3, 1e-5);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(teacher_temperature(0, 10, 0.04, 0.07), 0.04);
        assert_eq!(teacher_temperature(10, 10, 0.04, 0.07), 0.07);
        assert_eq!(teacher_temperature(0, 0, 0.04, 0.07), 0.07);
    }
}
