use ndarray::{Array2, Zip};

use super::{Param, Scalar};

/// Adam with coupled L2 weight decay (`g ← g + λ·w` before the moment updates).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: AdamState<F>,
}

/// Moment estimates and step counter, one moment pair per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, state: AdamState { step: 0, m: vec![], v: vec![] } }
    }

    pub fn state(&self) -> &AdamState<F> {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState<F>) {
        self.state = state;
    }

    /// One update with learning rate `lr`. Non-trainable parameters are
    /// skipped, but keep their moment slots so the layout never shifts.
    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: f64) {
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
            self.state.v = params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        }
        assert_eq!(self.state.m.len(), params.len(), "optimizer bound to a different parameter list");
        self.state.step += 1;
        let t = self.state.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let wd = F::of(self.weight_decay);
        let step_size = F::of(lr / bc1);
        let inv_bc2_sqrt = F::of(1.0 / bc2.sqrt());
        let eps = F::of(self.eps);

        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Param { value, grad, .. } = &mut **p;
            Zip::from(value).and(&*grad).and(&mut self.state.m[i]).and(&mut self.state.v[i]).for_each(|w, &g0, m, v| {
                let g = g0 + wd * *w;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::<f64>::new(Array2::from_elem((1, 3), 1.0));
        p.grad = Array2::from_shape_vec((1, 3), vec![2.0, -0.5, 0.0]).unwrap();
        let mut adam = Adam::new(0.0);
        adam.step(&mut [&mut p], 0.1);
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(p.value[[0, 2]], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::<f64>::new(Array2::from_elem((1, 2), 5.0));
        let mut adam = Adam::new(0.0);
        for _ in 0..2000 {
            p.grad = p.value.mapv(|w| 2.0 * (w - 1.0));
            adam.step(&mut [&mut p], 0.05);
        }
        assert!(p.value.iter().all(|&w| (w - 1.0).abs() < 1e-3));
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut p = Param::<f64>::new(Array2::from_elem((1, 1), 1.0));
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p], 0.01);
        assert!(p.value[[0, 0]] < 1.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = Param::<f32>::new(Array2::from_elem((2, 2), 1.0));
        p.grad.fill(1.0);
        p.trainable = false;
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], 0.1);
        assert!(p.value.iter().all(|&w| w == 1.0));
    }
}
