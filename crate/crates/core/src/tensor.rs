//! Dense 4-D tensors in `(n, c, h, w)` row-major layout.

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::gemm::MatRef;

/// Floating-point element type. Training runs in `f32`; the gradient
/// auditor runs the same graph in `f64`.
pub trait Element:
    Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[allow(clippy::too_many_arguments)]
    #[doc(hidden)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    );
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: MatRef<'_, f32>,
        b: MatRef<'_, f32>,
        beta: f32,
        c: &mut [f32],
    ) {
        // SAFETY: MatRef constructors and `gemm` check that every buffer
        // covers the strided extent that is read or written.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: MatRef<'_, f64>,
        b: MatRef<'_, f64>,
        beta: f64,
        c: &mut [f64],
    ) {
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

/// Tensor shape `(n, c, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// Shape of a 1-D parameter vector of length `len`, stored along the channel axis.
    pub fn vector(len: usize) -> Self {
        Shape([1, len, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per image plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn is_scalar(&self) -> bool {
        *self == Self::SCALAR
    }

    pub(crate) fn expect_eq(&self, other: &Shape, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::shape(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(v: [usize; 4]) -> Self {
        Shape(v)
    }
}

/// Dense tensor with an optional gradient slot.
///
/// The data buffer is reference counted: the autodiff tape holds cheap
/// clones of parameter buffers while a forward pass is alive, and the
/// optimizer updates in place once the tape has been dropped.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor { shape, data: Arc::new(vec![value; shape.numel()]), requires_grad: false, grad: None }
    }

    pub fn from_buffer(shape: impl Into<Shape>, values: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if values.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot have shape {shape:?} ({} elements)",
                values.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(values), requires_grad: false, grad: None })
    }

    pub(crate) fn from_shared(shape: Shape, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the values. Copies the buffer if it is still
    /// shared with a live tape.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.shape.numel() {
            return Err(Error::shape(format!(
                "gradient of {} elements for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Tensor { shape, data: self.shared(), requires_grad: self.requires_grad, grad: None })
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + h) * ws + w
    }

    /// Converts element precision. Gradients are dropped.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Sample `i` of the batch as a `(1, c, h, w)` tensor.
    pub fn sample(&self, i: usize) -> Result<Self> {
        if i >= self.shape.n() {
            return Err(Error::shape(format!("sample {i} out of range for {:?}", self.shape)));
        }
        let per = self.shape.numel() / self.shape.n().max(1);
        let s = Shape::new(1, self.shape.c(), self.shape.h(), self.shape.w());
        Tensor::from_buffer(s, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Concatenates `(1, c, h, w)`-compatible tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(format!("stack: {:?} vs {:?}", t.shape, first.shape)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_buffer(Shape::new(n, c, h, w), data)
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors() {
        let z = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert_eq!(z.data(), &[0.0; 4]);
        let f = Tensor::<f32>::full([1, 2, 1, 1], 3.5);
        assert_eq!(f.data(), &[3.5, 3.5]);
        let b = Tensor::<f32>::from_buffer([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.shape(), Shape::new(1, 1, 1, 3));
        assert_eq!(b.data(), &[1.0, 2.0, 3.0]);
        assert!(!b.requires_grad());
    }

    #[test]
    fn from_buffer_rejects_length_mismatch() {
        let err = Tensor::<f32>::from_buffer([1, 1, 2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn empty_shape_is_allowed() {
        let t = Tensor::<f64>::zeros([0, 3, 4, 4]);
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn data_mut_detaches_shared_buffer() {
        let a = Tensor::<f32>::full([1, 1, 1, 2], 1.0);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0, 1.0]);
        assert_eq!(b.data(), &[5.0, 1.0]);
    }

    #[test]
    fn stack_and_sample() {
        let a = Tensor::<f32>::full([1, 2, 1, 1], 1.0);
        let b = Tensor::<f32>::full([1, 2, 1, 1], 2.0);
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 1, 1));
        assert_eq!(s.sample(0).unwrap(), a);
    }
}
