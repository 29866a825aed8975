//! Adam over a fixed, ordered list of parameter tensors.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// One moment slot per parameter; sizes follow `sizes` in order.
    pub fn new(sizes: &[usize], beta1: f32, beta2: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advance the shared step counter; call once before the updates of one step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, lr: f32) {
        assert!(self.step > 0, "tick before update");
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(m.len(), param.numel(), "optimizer slot {slot} size");
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g)
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let g = Tensor::new(vec![3], vec![0.3, -7.0, 1e-3]);
        let mut opt = Adam::new(&[3], 0.5, 0.999);
        opt.tick();
        opt.update(0, &mut p, &g, 0.01);
        let want = [0.99, -1.99, 0.49];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::new(vec![2], vec![3.0, -4.0]);
        let mut opt = Adam::new(&[2], 0.9, 0.999);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.tick();
            opt.update(0, &mut p, &g, 0.05);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }
}
