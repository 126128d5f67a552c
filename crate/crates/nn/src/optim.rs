use crate::layer::{Layer, Param};

/// Adam with bias correction. Moment buffers are matched to parameters by
/// visiting order, which every layer keeps fixed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-7, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, model: &mut dyn Layer) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params(&mut |p: &mut Param| {
            if first.len() <= idx {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            assert_eq!(m.len(), p.len(), "parameter order changed between steps");
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
            idx += 1;
        });
    }
}

/// Zero every parameter gradient of a layer.
pub fn zero_grad(model: &mut dyn Layer) {
    model.visit_params(&mut |p| p.zero_grad());
}
