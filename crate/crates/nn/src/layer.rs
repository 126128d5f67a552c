use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Activations are always `(batch, channels, height, width)`; 1D signals use width 1.
pub type Tensor = Array4<f32>;

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn new(value: Vec<f32>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; value.len()];
        Self { value, grad, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// State threaded through a training-mode forward pass.
pub struct TrainContext {
    pub rng: ChaCha8Rng,
    /// When false, dropout layers pass activations through untouched.
    pub stochastic: bool,
}

impl TrainContext {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), stochastic: true }
    }

    /// Training-mode caching and batch statistics, but no random masks.
    pub fn deterministic() -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(0), stochastic: false }
    }
}

/// A differentiable building block.
///
/// `infer` is the evaluation-mode forward pass and never mutates the layer, so
/// a single model can serve concurrent predictions. `forward` caches whatever
/// `backward` needs; `backward` accumulates parameter gradients and returns the
/// gradient with respect to the input of the most recent `forward`.
pub trait Layer: Send + Sync {
    fn infer(&self, x: &Tensor) -> Tensor;
    fn forward(&mut self, x: &Tensor, ctx: &mut TrainContext) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    /// Non-trainable state persisted in checkpoints (e.g. running statistics).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Vec<f32>)) {}

    /// Drop cached activations.
    fn clear_cache(&mut self) {}
}

/// Count of trainable scalars in a layer.
pub fn parameter_count(layer: &mut dyn Layer) -> usize {
    let mut n = 0;
    layer.visit_params(&mut |p| n += p.len());
    n
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn with(mut self, layer: impl Layer + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for layer in &self.layers {
            out = layer.infer(&out);
        }
        out
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainContext) -> Tensor {
        let mut out = x.clone();
        for layer in &mut self.layers {
            out = layer.forward(&out, ctx);
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        for layer in &mut self.layers {
            layer.visit_buffers(f);
        }
    }

    fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }
}

/// Standard-layout slice of a tensor (all tensors built here are standard layout).
pub(crate) fn as_slice(t: &Tensor) -> &[f32] {
    t.as_slice().expect("tensor must be in standard layout")
}

pub(crate) fn as_slice_mut(t: &mut Tensor) -> &mut [f32] {
    t.as_slice_mut().expect("tensor must be in standard layout")
}

pub(crate) fn dims(t: &Tensor) -> (usize, usize, usize, usize) {
    t.dim()
}
