//! Dense `(N, C, H, W)` arrays in double precision.

use rand::Rng;

use crate::error::{Error, Result};

pub type Shape = [usize; 4];

pub(crate) fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// A row-major `(N, C, H, W)` tensor.
///
/// Tensors are plain values. Differentiation happens on a [`crate::graph::Graph`],
/// which owns copies of the tensors it records and writes accumulated
/// gradients back into `grad` of the leaves marked `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; numel(shape)], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(shape));
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    for i3 in 0..w {
                        data.push(f([i0, i1, i2, i3]));
                    }
                }
            }
        }
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Only valid on tensors outside a live graph;
    /// the graph holds its own copies.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, [n, c, h, w]: [usize; 4]) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.index(idx)]
    }

    /// Contiguous `H*W` plane for `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let [_, _, _, w] = self.shape;
        let mut data = self.data.clone();
        for row in data.chunks_mut(w.max(1)) {
            row.reverse();
        }
        Tensor { shape: self.shape, data, requires_grad: false, grad: None }
    }

    /// Copy of batch element `n` as a batch of one.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = numel(self.shape) / self.shape[0].max(1);
        let data = self.data[n * per..(n + 1) * per].to_vec();
        Tensor { shape: [1, self.shape[1], self.shape[2], self.shape[3]], data, requires_grad: false, grad: None }
    }

    /// Stack single-item tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::EmptyInput("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([n, c, h, w], data)
    }
}
