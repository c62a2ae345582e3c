use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::catalog::TensorShape;

/// Element type of the runtime: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    /// `c = a * b + (accumulate ? c : 0)` on row-major operands, where
    /// `a` is `m x k` (or stored as its `k x m` transpose when `a_t`) and
    /// `b` is `k x n` (or stored as `n x k` when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every access made with these strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Batch of feature maps in `(batch, rows, cols, channels)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(batch: usize, rows: usize, cols: usize, channels: usize) -> Self {
        Tensor4 {
            batch,
            rows,
            cols,
            channels,
            data: vec![T::zero(); batch * rows * cols * channels],
        }
    }

    pub fn from_vec(batch: usize, rows: usize, cols: usize, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), batch * rows * cols * channels, "tensor data length");
        Tensor4 {
            batch,
            rows,
            cols,
            channels,
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.batch, self.rows, self.cols, self.channels)
    }

    pub fn shape(&self) -> TensorShape {
        TensorShape::new(self.rows, self.cols, self.channels)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.rows, self.cols, self.channels]
    }

    pub fn sample_len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn index(&self, b: usize, r: usize, c: usize, ch: usize) -> usize {
        ((b * self.rows + r) * self.cols + c) * self.channels + ch
    }

    pub fn at(&self, b: usize, r: usize, c: usize, ch: usize) -> T {
        self.data[self.index(b, r, c, ch)]
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Copies the listed samples into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4::from_vec(indices.len(), self.rows, self.cols, self.channels, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4::from_vec(
            self.batch,
            self.rows,
            self.cols,
            self.channels,
            self.data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }
}
