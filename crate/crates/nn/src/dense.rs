use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::gemm::{gemm, MatRef};
use crate::layer::{as_slice, as_slice_mut, dims, Layer, Param, Tensor, TrainContext};

/// Fully connected layer on `(n, features, 1, 1)` tensors.
pub struct Dense {
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, (2.0 / inputs as f32).sqrt()).expect("valid std");
        let weight = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Param::new(weight, vec![outputs, inputs]),
            bias: Param::zeros(vec![outputs]),
            input: None,
        }
    }

    fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    fn outputs(&self) -> usize {
        self.weight.shape[0]
    }
}

impl Layer for Dense {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, f, h, w) = dims(x);
        assert_eq!(f * h * w, self.inputs(), "dense input features");
        let (fi, fo) = (self.inputs(), self.outputs());
        let mut out = Array4::<f32>::zeros((n, fo, 1, 1));
        let os = as_slice_mut(&mut out);
        for row in os.chunks_mut(fo) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            MatRef::new(as_slice(x), n, fi),
            MatRef::new(&self.weight.value, fo, fi).t(),
            1.0,
            os,
            fo,
        );
        out
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        let out = self.infer(x);
        self.input = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("backward without forward");
        let (n, c, h, w) = dims(&x);
        let (fi, fo) = (self.inputs(), self.outputs());
        let g = MatRef::new(as_slice(grad), n, fo);
        gemm(g.t(), MatRef::new(as_slice(&x), n, fi), 1.0, &mut self.weight.grad, fi);
        for row in as_slice(grad).chunks(fo) {
            for (b, v) in self.bias.grad.iter_mut().zip(row) {
                *b += *v;
            }
        }
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        gemm(g, MatRef::new(&self.weight.value, fo, fi), 0.0, as_slice_mut(&mut dx), fi);
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// `(n, c, h, w)` to `(n, c*h*w, 1, 1)`.
pub struct Flatten {
    shape: Option<(usize, usize, usize, usize)>,
}

impl Flatten {
    pub fn new() -> Self {
        Self { shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims(x);
        x.to_shape((n, c * h * w, 1, 1)).expect("contiguous").to_owned()
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        self.shape = Some(dims(x));
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.shape.take().expect("backward without forward");
        grad.to_shape(shape).expect("contiguous").to_owned()
    }
}
