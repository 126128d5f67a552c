//! Max-pooling, global horizontal max-pooling and nearest-neighbour upsampling.

use ndarray::Array4;

use crate::layer::{as_slice, as_slice_mut, dims, Layer, Tensor, TrainContext};

/// Flat input index of each output's maximum, and the input shape.
type Argmax = (Vec<u32>, (usize, usize, usize, usize));

/// Non-overlapping `kh x kw` max-pooling. Trailing rows/columns that do not
/// fill a window are dropped.
pub struct MaxPool {
    kh: usize,
    kw: usize,
    argmax: Option<Argmax>,
}

impl MaxPool {
    pub fn new(kh: usize, kw: usize) -> Self {
        assert!(kh >= 1 && kw >= 1);
        Self { kh, kw, argmax: None }
    }

    fn run(&self, x: &Tensor, mut record: Option<&mut Vec<u32>>) -> Tensor {
        let (n, c, h, w) = dims(x);
        let (oh, ow) = (h / self.kh, w / self.kw);
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        let xs = as_slice(x);
        let os = as_slice_mut(&mut out);
        for p in 0..n * c {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0usize;
                    for di in 0..self.kh {
                        let row = (i * self.kh + di) * w;
                        for dj in 0..self.kw {
                            let idx = row + j * self.kw + dj;
                            if plane[idx] > best {
                                best = plane[idx];
                                at = idx;
                            }
                        }
                    }
                    os[(p * oh + i) * ow + j] = best;
                    if let Some(rec) = record.as_deref_mut() {
                        rec.push(at as u32);
                    }
                }
            }
        }
        out
    }
}

impl Layer for MaxPool {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        let mut rec = Vec::new();
        let out = self.run(x, Some(&mut rec));
        self.argmax = Some((rec, dims(x)));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (rec, (n, c, h, w)) = self.argmax.take().expect("backward without forward");
        scatter_planes(grad, &rec, (n, c, h, w))
    }

    fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

/// Route each pooled gradient back to the input position that won the max.
fn scatter_planes(grad: &Tensor, rec: &[u32], shape: (usize, usize, usize, usize)) -> Tensor {
    let (n, c, h, w) = shape;
    let (_, _, oh, ow) = dims(grad);
    let mut dx = Array4::<f32>::zeros(shape);
    let gs = as_slice(grad);
    let dxs = as_slice_mut(&mut dx);
    let per_plane = oh * ow;
    for p in 0..n * c {
        for q in 0..per_plane {
            let at = rec[p * per_plane + q] as usize;
            dxs[p * h * w + at] += gs[p * per_plane + q];
        }
    }
    dx
}

/// Reduces `(n, c, h, w)` to `(n, c, h, 1)` by taking the maximum over width.
pub struct GlobalHorizontalMaxPool {
    argmax: Option<Argmax>,
}

impl GlobalHorizontalMaxPool {
    pub fn new() -> Self {
        Self { argmax: None }
    }

    fn run(x: &Tensor, mut record: Option<&mut Vec<u32>>) -> Tensor {
        let (n, c, h, w) = dims(x);
        let mut out = Array4::<f32>::zeros((n, c, h, 1));
        let xs = as_slice(x);
        let os = as_slice_mut(&mut out);
        for p in 0..n * c {
            for i in 0..h {
                let row = &xs[(p * h + i) * w..(p * h + i + 1) * w];
                let (mut at, mut best) = (0usize, f32::NEG_INFINITY);
                for (j, &v) in row.iter().enumerate() {
                    if v > best {
                        best = v;
                        at = j;
                    }
                }
                os[p * h + i] = best;
                if let Some(rec) = record.as_deref_mut() {
                    rec.push((i * w + at) as u32);
                }
            }
        }
        out
    }
}

impl Default for GlobalHorizontalMaxPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalHorizontalMaxPool {
    fn infer(&self, x: &Tensor) -> Tensor {
        Self::run(x, None)
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        let mut rec = Vec::new();
        let out = Self::run(x, Some(&mut rec));
        self.argmax = Some((rec, dims(x)));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (rec, shape) = self.argmax.take().expect("backward without forward");
        scatter_planes(grad, &rec, shape)
    }

    fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

/// Nearest-neighbour upsampling by integer factors.
pub struct Upsample {
    fh: usize,
    fw: usize,
}

impl Upsample {
    pub fn new(fh: usize, fw: usize) -> Self {
        assert!(fh >= 1 && fw >= 1);
        Self { fh, fw }
    }
}

impl Layer for Upsample {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims(x);
        let (oh, ow) = (h * self.fh, w * self.fw);
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        let xs = as_slice(x);
        let os = as_slice_mut(&mut out);
        for p in 0..n * c {
            for i in 0..oh {
                let src = &xs[(p * h + i / self.fh) * w..(p * h + i / self.fh + 1) * w];
                let dst = &mut os[(p * oh + i) * ow..(p * oh + i + 1) * ow];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[j / self.fw];
                }
            }
        }
        out
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut TrainContext) -> Tensor {
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c, oh, ow) = dims(grad);
        let (h, w) = (oh / self.fh, ow / self.fw);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let gs = as_slice(grad);
        let dxs = as_slice_mut(&mut dx);
        for p in 0..n * c {
            for i in 0..oh {
                let g = &gs[(p * oh + i) * ow..(p * oh + i + 1) * ow];
                let d = &mut dxs[(p * h + i / self.fh) * w..(p * h + i / self.fh + 1) * w];
                for (j, v) in g.iter().enumerate() {
                    d[j / self.fw] += *v;
                }
            }
        }
        dx
    }
}
