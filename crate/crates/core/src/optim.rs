use crate::scalar::Scalar;

/// Hyperparameters of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub weight_decay: T,
}

/// Adam with decoupled weight decay and bias-corrected moments.
///
/// Each step first shrinks the parameters by `lr * weight_decay`, then
/// applies the Adam update computed from the raw gradient.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    config: AdamWConfig<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(dim: usize, config: AdamWConfig<T>) -> Self {
        AdamW {
            config,
            first_moment: vec![T::zero(); dim],
            second_moment: vec![T::zero(); dim],
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.dim(), "parameter length");
        assert_eq!(grad.len(), self.dim(), "gradient length");
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.step += 1;
        let one = T::one();
        let bias1 = one - beta1.powi(self.step);
        let bias2 = one - beta2.powi(self.step);
        let decay = one - lr * weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *p = *p * decay;
            *m = beta1 * *m + (one - beta1) * g;
            *v = beta2 * *v + (one - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config<T: Scalar>(lr: f64, wd: f64) -> AdamWConfig<T> {
        AdamWConfig {
            learning_rate: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            weight_decay: T::of(wd),
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // after bias correction the first update is lr * g / (|g| + eps)
        let mut opt = AdamW::new(2, config::<f64>(0.1, 0.0));
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut opt = AdamW::new(1, config::<f64>(0.1, 0.5));
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]);
        // zero gradient leaves only the multiplicative shrink
        assert_eq!(p[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn minimises_quadratic_in_both_precisions() {
        fn run<T: Scalar>() -> T {
            let mut opt = AdamW::new(1, config::<T>(0.05, 0.0));
            let mut p = vec![T::of(3.0)];
            for _ in 0..2000 {
                let g = vec![T::of(2.0) * (p[0] - T::one())];
                opt.step(&mut p, &g);
            }
            p[0]
        }
        assert!((run::<f64>() - 1.0).abs() < 1e-3);
        assert!((run::<f32>() - 1.0).abs() < 1e-3);
    }
}
