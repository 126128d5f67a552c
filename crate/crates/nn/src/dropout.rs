use ndarray::Array4;
use rand::Rng;

use crate::layer::{dims, Layer, Tensor, TrainContext};

/// Inverted dropout. In spatial mode whole feature channels are dropped.
pub struct Dropout {
    p: f32,
    spatial: bool,
    mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(p: f32) -> Self {
        assert!((0.0..1.0).contains(&p));
        Self { p, spatial: false, mask: None }
    }

    pub fn spatial(p: f32) -> Self {
        Self { spatial: true, ..Self::new(p) }
    }
}

impl Layer for Dropout {
    fn infer(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainContext) -> Tensor {
        if !ctx.stochastic || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let (n, c, h, w) = dims(x);
        let mask = if self.spatial {
            let per_channel: Vec<f32> = (0..n * c)
                .map(|_| if ctx.rng.random::<f32>() < keep { scale } else { 0.0 })
                .collect();
            Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| per_channel[b * c + ch])
        } else {
            Array4::from_shape_simple_fn((n, c, h, w), || {
                if ctx.rng.random::<f32>() < keep {
                    scale
                } else {
                    0.0
                }
            })
        };
        let out = x * &mask;
        self.mask = Some(mask);
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self.mask.take() {
            Some(mask) => grad * &mask,
            None => grad.clone(),
        }
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}
