use crate::layer::{Layer, Tensor, TrainContext};

/// `max(x, alpha * x)`; `alpha = 0` gives a plain ReLU.
pub struct LeakyRelu {
    alpha: f32,
    input: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(alpha: f32) -> Self {
        Self { alpha, input: None }
    }

    pub fn relu() -> Self {
        Self::new(0.0)
    }
}

impl Layer for LeakyRelu {
    fn infer(&self, x: &Tensor) -> Tensor {
        let a = self.alpha;
        x.mapv(|v| if v > 0.0 { v } else { a * v })
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        self.input = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("backward without forward");
        let a = self.alpha;
        let mut g = grad.clone();
        g.zip_mut_with(&x, |g, &v| {
            if v <= 0.0 {
                *g *= a;
            }
        });
        g
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

pub struct Sigmoid {
    output: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Layer for Sigmoid {
    fn infer(&self, x: &Tensor) -> Tensor {
        x.mapv(sigmoid)
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        let y = self.infer(x);
        self.output = Some(y.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = self.output.take().expect("backward without forward");
        let mut g = grad.clone();
        g.zip_mut_with(&y, |g, &s| *g *= s * (1.0 - s));
        g
    }

    fn clear_cache(&mut self) {
        self.output = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn leaky_slope_applies_to_negatives_only() {
        let act = LeakyRelu::new(0.05);
        let x = Array4::from_shape_vec((1, 1, 1, 3), vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(act.infer(&x).into_raw_vec_and_offset().0, vec![-0.1, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-7);
    }
}
