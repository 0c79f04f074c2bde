//! AdamW with decoupled weight decay, and the one-cycle learning-rate
//! schedule (linear warmup to a peak, then cosine decay).

use super::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
        }
    }

    /// One update: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    pub fn update(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].as_f64();
            let m = b1 * self.m[i].as_f64() + (1.0 - b1) * g;
            let v = b2 * self.v[i].as_f64() + (1.0 - b2) * g * g;
            self.m[i] = F::from_f64(m);
            self.v[i] = F::from_f64(v);
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let p = params[i].as_f64();
            params[i] =
                F::from_f64(p - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p));
        }
    }
}

/// One-cycle schedule: 0 at the cycle start, linear to `peak` after
/// `warmup` steps, cosine back toward 0 after `total`. `start` offsets
/// the cycle so a fine-tuning run beginning at a resumed step still
/// warms up from zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub start: u64,
}

impl OneCycle {
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.saturating_sub(self.start);
        if self.warmup > 0 && step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = (step - self.warmup).min(span) as f64 / span as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_endpoints() {
        let s = OneCycle { peak: 5e-4, warmup: 100, total: 1000, start: 0 };
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(100) - 5e-4).abs() < 1e-12);
        assert!(s.lr(50) > 0.0 && s.lr(50) < 5e-4);
        assert!(s.lr(999) < 1e-5);
        assert!(s.lr(1000) < 1e-12);
    }

    #[test]
    fn one_cycle_offset_restarts_the_ramp() {
        let s = OneCycle { peak: 1e-3, warmup: 10, total: 100, start: 500 };
        assert_eq!(s.lr(500), 0.0);
        assert!((s.lr(510) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn adamw_decays_weights_without_gradient() {
        let mut p = vec![1.0f64; 4];
        let g = vec![0.0f64; 4];
        let mut opt = AdamW::new(4, 0.9, 0.98, 1e-6, 0.1);
        opt.update(&mut p, &g, 0.01);
        assert!(p.iter().all(|&x| x < 1.0 && x > 0.99));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = vec![0.0f64; 2];
        let g = vec![1.0f64, -1.0];
        let mut opt = AdamW::new(2, 0.9, 0.98, 1e-6, 0.0);
        opt.update(&mut p, &g, 0.1);
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }
}
