//! Adaptive-moment gradient optimizer.

use super::ParamArena;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, total_len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; total_len],
            v: vec![0.0; total_len],
        }
    }

    /// One update over every trainable parameter; gradients are left intact
    /// (callers zero them before the next backward pass).
    pub fn step(&mut self, params: &mut ParamArena) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut off = 0;
        for id in params.ids().collect::<Vec<_>>() {
            let len = params.value(id).len();
            if params.is_trainable(id) {
                let grad = params.grad(id).to_vec();
                let value = params.value_mut(id);
                for i in 0..len {
                    let g = grad[i];
                    let m = &mut self.m[off + i];
                    let v = &mut self.v[off + i];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
            off += len;
        }
        debug_assert_eq!(off, self.m.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamArena;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut arena = ParamArena::new();
        let id = arena.alloc("w", &[2], vec![1.0, -2.0]);
        arena.grad_mut(id)[0] = 0.3;
        arena.grad_mut(id)[1] = -4.0;
        let mut opt = Adam::new(0.01, arena.total_len());
        opt.step(&mut arena);
        // with bias correction, the first step is lr * g/(|g| + ~0)
        assert!((arena.value(id)[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((arena.value(id)[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut arena = ParamArena::new();
        let id = arena.alloc("w", &[3], vec![5.0, -3.0, 2.0]);
        let mut opt = Adam::new(0.05, arena.total_len());
        for _ in 0..2000 {
            arena.zero_grads();
            let v = arena.value(id).to_vec();
            let g = arena.grad_mut(id);
            for i in 0..3 {
                g[i] = 2.0 * v[i]; // d/dx of sum(x^2)
            }
            opt.step(&mut arena);
        }
        assert!(arena.value(id).iter().all(|&v| v.abs() < 1e-3));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut arena = ParamArena::new();
        let a = arena.alloc("a", &[1], vec![1.0]);
        let b = arena.alloc("b", &[1], vec![1.0]);
        arena.set_trainable(a, false);
        arena.grad_mut(a)[0] = 1.0;
        arena.grad_mut(b)[0] = 1.0;
        let mut opt = Adam::new(0.1, arena.total_len());
        opt.step(&mut arena);
        assert_eq!(arena.value(a)[0], 1.0);
        assert!(arena.value(b)[0] < 1.0);
    }
}
