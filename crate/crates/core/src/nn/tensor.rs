use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of the network. Training runs in `f32`; gradient checks run
/// the same code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + fmt::Debug + 'static
{
    /// `c <- alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides are not supported");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "{what} buffer too small for its shape and strides");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides, "lhs");
                check_extent(b.len(), k, n, b_strides, "rhs");
                check_extent(c.len(), m, n, c_strides, "output");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the extents of all three operands were checked above and
                // the output does not alias the inputs (distinct borrows).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::c(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// `c = a(m x k) * b(k x n)`, all row-major and contiguous; `trans_*` reads the
/// operand transposed.
pub fn matmul<S: Scalar>(
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm_raw(m, k, n, S::one(), a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        matmul(&a, false, &b, false, &mut c, 2, 3, 2, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T (3x2) * a (2x3) diagonal entries
        let mut d = [0.0f64; 9];
        matmul(&a, true, &a, false, &mut d, 3, 2, 3, false);
        assert_eq!([d[0], d[4], d[8]], [17.0, 29.0, 45.0]);
        let mut e = [1.0f64; 4];
        matmul(&a, false, &b, false, &mut e, 2, 3, 2, true);
        assert_eq!(e, [5.0, 6.0, 11.0, 12.0]);
        // b^T read via trans flag: (2x3) * (3x2)
        let mut f = [0.0f64; 4];
        matmul(&b, true, &b, false, &mut f, 2, 3, 2, false);
        assert_eq!(f, [2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn shapes_are_checked() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4]).is_err());
    }
}
