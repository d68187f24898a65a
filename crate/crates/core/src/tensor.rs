//! Dense row-major f64 tensors.
//!
//! `Tensor` is the value type used everywhere: parameters, activations,
//! dataset samples, file payloads. Everything is 64-bit; the crate exists to
//! verify numerics, and f32 would blur the finite-difference checks that back
//! most of the test suite. Gradient buffers live on the tensor itself and are
//! populated by [`crate::tape::Tape::backward`].

/// Dense n-dimensional array of f64, row-major, with an optional gradient
/// buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether this tensor should receive a gradient from backward passes.
    pub requires_grad: bool,
    /// Accumulated gradient; same shape as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from shape and data. Panics if the element count does
    /// not match the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "dimension error: shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![value])
    }

    /// Mark this tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "dimension error: cannot reshape {:?} to {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    /// Add `delta` into the gradient buffer, allocating zeros first if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "dimension error: gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "dimension error")]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(vec![3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }
}
