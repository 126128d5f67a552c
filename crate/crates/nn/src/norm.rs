use ndarray::Array4;

use crate::layer::{as_slice, as_slice_mut, dims, Layer, Param, Tensor, TrainContext};

/// Per-channel batch normalisation over `(batch, height, width)`.
pub struct BatchNorm {
    gamma: Param,
    beta: Param,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
    momentum: f32,
    eps: f32,
    cache: Option<NormCache>,
}

struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels], vec![channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.01,
            eps: 1e-3,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Layer for BatchNorm {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims(x);
        assert_eq!(c, self.channels());
        let hw = h * w;
        let mut out = x.clone();
        let os = as_slice_mut(&mut out);
        for b in 0..n {
            for ch in 0..c {
                let scale = self.gamma.value[ch] / (self.running_var[ch] + self.eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                let start = (b * c + ch) * hw;
                os[start..start + hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        let (n, c, h, w) = dims(x);
        assert_eq!(c, self.channels());
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = as_slice(x);
        let mut xhat = Array4::<f32>::zeros((n, c, h, w));
        let mut out = Array4::<f32>::zeros((n, c, h, w));
        let mut inv_std = vec![0.0f32; c];
        {
            let xh = as_slice_mut(&mut xhat);
            let os = as_slice_mut(&mut out);
            for ch in 0..c {
                let planes = || (0..n).map(move |b| (b * c + ch) * hw);
                let mean = planes()
                    .map(|s| xs[s..s + hw].iter().map(|&v| v as f64).sum::<f64>())
                    .sum::<f64>()
                    / m;
                let var = planes()
                    .map(|s| xs[s..s + hw].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / m;
                let istd = 1.0 / (var + self.eps as f64).sqrt();
                inv_std[ch] = istd as f32;
                let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                for s in planes() {
                    for i in s..s + hw {
                        let v = ((xs[i] as f64 - mean) * istd) as f32;
                        xh[i] = v;
                        os[i] = g * v + bt;
                    }
                }
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let mo = self.momentum;
                self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * mean as f32;
                self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * unbiased as f32;
            }
        }
        self.cache = Some(NormCache { xhat, inv_std });
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let NormCache { xhat, inv_std } = self.cache.take().expect("backward without forward");
        let (n, c, h, w) = dims(grad);
        let hw = h * w;
        let m = (n * hw) as f32;
        let gs = as_slice(grad);
        let xh = as_slice(&xhat);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dxs = as_slice_mut(&mut dx);
        for ch in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for b in 0..n {
                let s = (b * c + ch) * hw;
                for i in s..s + hw {
                    sum_g += gs[i] as f64;
                    sum_gx += (gs[i] * xh[i]) as f64;
                }
            }
            self.beta.grad[ch] += sum_g as f32;
            self.gamma.grad[ch] += sum_gx as f32;
            let g = self.gamma.value[ch];
            let k = g * inv_std[ch] / m;
            let (sg, sgx) = (sum_g as f32, sum_gx as f32);
            for b in 0..n {
                let s = (b * c + ch) * hw;
                for i in s..s + hw {
                    dxs[i] = k * (m * gs[i] - sg - xh[i] * sgx);
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardised_per_channel() {
        let x = Array4::from_shape_fn((3, 2, 2, 2), |(b, c, i, j)| {
            (b * 7 + c * 3 + i * 2 + j) as f32 * if c == 0 { 1.0 } else { -4.0 }
        });
        let mut bn = BatchNorm::new(2);
        let y = bn.forward(&x, &mut TrainContext::deterministic());
        for ch in 0..2 {
            let vals: Vec<f32> = y.index_axis(ndarray::Axis(1), ch).iter().copied().collect();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn fresh_layer_in_eval_mode_is_near_identity() {
        let bn = BatchNorm::new(1);
        let x = Array4::from_elem((1, 1, 2, 2), 3.0f32);
        let y = bn.infer(&x);
        assert!(y.iter().all(|v| (v - 3.0 / (1.0f32 + 1e-3).sqrt()).abs() < 1e-6));
    }
}
