//! Stride-1 "same" convolution via chunked im2col + GEMM.
//!
//! A 1D convolution over the height axis is the `kw == 1` case applied to
//! width-1 tensors.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::gemm::{gemm, MatRef};
use crate::layer::{as_slice, as_slice_mut, dims, Layer, Param, Tensor, TrainContext};

/// Upper bound on the number of floats in one im2col chunk.
const COL_CHUNK: usize = 1 << 21;

pub struct Conv2d {
    weight: Param,
    bias: Param,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    /// He-normal initialised weights, zero bias.
    pub fn new(cin: usize, cout: usize, kh: usize, kw: usize, rng: &mut impl Rng) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "only odd kernels keep 'same' padding symmetric");
        let fan_in = (cin * kh * kw) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight: Vec<f32> = (0..cout * cin * kh * kw).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Param::new(weight, vec![cout, cin, kh, kw]),
            bias: Param::zeros(vec![cout]),
            cin,
            cout,
            kh,
            kw,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Param {
        &mut self.bias
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn rows_per_chunk(&self, w: usize) -> usize {
        (COL_CHUNK / (self.k() * w).max(1)).max(1)
    }

    /// Fill `cols` (`k x (r1-r0)*w`) with the receptive fields of output rows `r0..r1`.
    fn im2col(&self, x: &[f32], h: usize, w: usize, r0: usize, r1: usize, cols: &mut [f32]) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let len = (r1 - r0) * w;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * len..(row + 1) * len];
                    let dx = kj as isize - pw;
                    let (lo, hi) = valid_span(w, dx);
                    for r in r0..r1 {
                        let sr = r as isize + ki as isize - ph;
                        let d = &mut dst[(r - r0) * w..(r - r0 + 1) * w];
                        if sr < 0 || sr >= h as isize || lo >= hi {
                            d.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                        d[..lo].iter_mut().for_each(|v| *v = 0.0);
                        d[hi..].iter_mut().for_each(|v| *v = 0.0);
                        let s0 = (lo as isize + dx) as usize;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back into the input gradient.
    fn col2im(&self, cols: &[f32], h: usize, w: usize, r0: usize, r1: usize, dx_img: &mut [f32]) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let len = (r1 - r0) * w;
        for c in 0..self.cin {
            let plane = &mut dx_img[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * len..(row + 1) * len];
                    let dx = kj as isize - pw;
                    let (lo, hi) = valid_span(w, dx);
                    if lo >= hi {
                        continue;
                    }
                    for r in r0..r1 {
                        let sr = r as isize + ki as isize - ph;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        let s = &src[(r - r0) * w..(r - r0 + 1) * w];
                        let s0 = (lo as isize + dx) as usize;
                        let d = &mut plane[sr as usize * w + s0..sr as usize * w + s0 + (hi - lo)];
                        for (a, b) in d.iter_mut().zip(&s[lo..hi]) {
                            *a += *b;
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims(x);
        assert_eq!(c, self.cin, "conv input channels");
        let hw = h * w;
        let k = self.k();
        let mut out = Array4::<f32>::zeros((n, self.cout, h, w));
        let xs = as_slice(x);
        let os = as_slice_mut(&mut out);
        let wmat = MatRef::new(&self.weight.value, self.cout, k);
        let chunk = self.rows_per_chunk(w);
        let mut cols = Vec::new();
        for b in 0..n {
            let xb = &xs[b * c * hw..(b + 1) * c * hw];
            let ob = &mut os[b * self.cout * hw..(b + 1) * self.cout * hw];
            if self.is_pointwise() {
                gemm(wmat, MatRef::new(xb, c, hw), 0.0, ob, hw);
            } else {
                let mut r0 = 0;
                while r0 < h {
                    let r1 = (r0 + chunk).min(h);
                    let len = (r1 - r0) * w;
                    cols.resize(k * len, 0.0);
                    self.im2col(xb, h, w, r0, r1, &mut cols);
                    gemm(wmat, MatRef::new(&cols, k, len), 0.0, &mut ob[r0 * w..], hw);
                    r0 = r1;
                }
            }
            for (o, plane) in ob.chunks_mut(hw).enumerate() {
                let bias = self.bias.value[o];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        out
    }
}

/// Output columns `lo..hi` whose source column `col + dx` lies inside `0..w`.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(w), hi)
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        let out = self.run(x);
        self.input = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("backward without forward");
        let (n, c, h, w) = dims(&x);
        let hw = h * w;
        let k = self.k();
        let xs = as_slice(&x);
        let gs = as_slice(grad);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dxs = as_slice_mut(&mut dx);
        let chunk = self.rows_per_chunk(w);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for b in 0..n {
            let xb = &xs[b * c * hw..(b + 1) * c * hw];
            let gb = &gs[b * self.cout * hw..(b + 1) * self.cout * hw];
            let dxb = &mut dxs[b * c * hw..(b + 1) * c * hw];
            for (o, plane) in gb.chunks(hw).enumerate() {
                self.bias.grad[o] += plane.iter().sum::<f32>();
            }
            let wmat = MatRef::new(&self.weight.value, self.cout, k);
            if self.is_pointwise() {
                let g = MatRef { data: gb, rows: self.cout, cols: hw, rs: hw, cs: 1 };
                gemm(g, MatRef::new(xb, c, hw).t(), 1.0, &mut self.weight.grad, k);
                gemm(wmat.t(), g, 1.0, dxb, hw);
                continue;
            }
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + chunk).min(h);
                let len = (r1 - r0) * w;
                cols.resize(k * len, 0.0);
                self.im2col(xb, h, w, r0, r1, &mut cols);
                let g = MatRef { data: &gb[r0 * w..], rows: self.cout, cols: len, rs: hw, cs: 1 };
                gemm(g, MatRef::new(&cols, k, len).t(), 1.0, &mut self.weight.grad, k);
                dcols.resize(k * len, 0.0);
                let wmat = MatRef::new(&self.weight.value, self.cout, k);
                gemm(wmat.t(), g, 0.0, &mut dcols, len);
                self.col2im(&dcols, h, w, r0, r1, dxb);
                r0 = r1;
            }
        }
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
