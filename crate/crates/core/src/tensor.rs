//! Dense `f64` tensors in row-major layout.
//!
//! Everything numeric in this crate runs on plain contiguous buffers: image
//! planes are `[C, H, W]`, batches are `[N, C, H, W]`, matrices are
//! `[rows, cols]`. Double precision is used throughout so that the
//! finite-difference gradient checks are meaningful.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Standard-normal tensor drawn element by element from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape: shape.to_vec(), data }
    }

    /// Normal with standard deviation `std`.
    pub fn randn_std<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::randn(shape, rng);
        for v in &mut t.data {
            *v *= std;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.data.len(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Tensor) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean squared difference against `other`.
    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in mse");
        if self.data.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack single-sample tensors along a new leading batch axis.
    pub fn stack(items: &[&Tensor]) -> Self {
        assert!(!items.is_empty());
        let inner = items[0].shape.clone();
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.shape, inner, "stack requires equal shapes");
            data.extend_from_slice(&t.data);
        }
        Self { shape, data }
    }

    /// Extract sample `i` from a batched `[N, ...]` tensor.
    pub fn unstack(&self, i: usize) -> Self {
        assert!(!self.shape.is_empty() && i < self.shape[0]);
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let n: usize = inner.iter().product();
        Self { shape: inner, data: self.data[i * n..(i + 1) * n].to_vec() }
    }
}

/// Nearest-neighbor 2x upsample of a `[C, H, W]` plane stack.
pub fn upsample_nearest_chw(t: &Tensor) -> Tensor {
    let (c, h, w) = chw(t);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let src = t.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[ci * 4 * h * w + y * 2 * w + x] = src[ci * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Bilinear resize of a `[C, H, W]` tensor to `[C, out_h, out_w]` with
/// half-pixel centers.
pub fn resize_bilinear_chw(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = chw(t);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let src = t.data();
    let dst = out.data_mut();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ci in 0..c {
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let base = ci * h * w;
                let v00 = src[base + y0 * w + x0];
                let v01 = src[base + y0 * w + x1];
                let v10 = src[base + y1 * w + x0];
                let v11 = src[base + y1 * w + x1];
                let v0 = v00 + (v01 - v00) * wx;
                let v1 = v10 + (v11 - v10) * wx;
                dst[ci * out_h * out_w + oy * out_w + ox] = v0 + (v1 - v0) * wy;
            }
        }
    }
    out
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected [C, H, W], got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_unstack_roundtrip() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::stack(&[&a, &b]);
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.unstack(0), a);
        assert_eq!(s.unstack(1), b);
    }

    #[test]
    fn upsample_nearest_doubles() {
        let t = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let u = upsample_nearest_chw(&t);
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert_eq!(u.data()[0], 1.0);
        assert_eq!(u.data()[3], 2.0);
        assert_eq!(u.data()[15], 4.0);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let t = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = resize_bilinear_chw(&t, 2, 3);
        for (a, b) in t.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
