use rayon::prelude::*;

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Dense tensor: a shape and a flat row-major buffer. All model math in this
/// crate runs on these; there is no stride trickery, views copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single element of a [1]-shaped tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.data[0]
    }

    /// Number of rows when viewed as a matrix: rank-1 tensors count as one row.
    pub fn view_rows(&self) -> usize {
        if self.rank() <= 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Row width under the same matrix view.
    pub fn view_cols(&self) -> usize {
        if self.rank() <= 1 {
            self.numel()
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.view_cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.view_cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign_scaled(&mut self, other: &Self, c: T) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * c;
        }
    }

    pub fn scale_in_place(&mut self, c: T) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::ZERO, |acc, &x| acc.max_s(x.abs()))
    }

    /// Lossy element cast between scalar types, used to promote f32 fixtures
    /// into f64 verification runs.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// x / ||x||_2 for a flat buffer. Errors when the norm is at or below the
/// scalar type's zero tolerance: normalizing noise would amplify it without
/// bound, so callers must handle degenerate inputs explicitly.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let norm = x.norm();
    if norm <= T::ZERO_NORM_TOL {
        return Err(Error::ZeroNorm {
            norm: norm.to_f64(),
            tol: T::ZERO_NORM_TOL.to_f64(),
        });
    }
    Ok(x.map(|v| v / norm))
}

/// Normalize a slice in place; same zero-norm contract as `l2_normalize`.
pub fn l2_normalize_slice<T: Scalar>(x: &mut [T]) -> Result<()> {
    let norm = dot(x, x).sqrt();
    if norm <= T::ZERO_NORM_TOL {
        return Err(Error::ZeroNorm {
            norm: norm.to_f64(),
            tol: T::ZERO_NORM_TOL.to_f64(),
        });
    }
    for v in x {
        *v /= norm;
    }
    Ok(())
}

/// Softmax with the max subtracted before exponentiation. exp never sees a
/// positive argument, so no input, however large, can overflow.
pub fn stable_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    debug_assert!(!x.is_empty());
    let m = x.iter().fold(x[0], |acc, &v| acc.max_s(v));
    let mut out: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// log(sum(exp(x))) through the same max-shift.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    debug_assert!(!x.is_empty());
    let m = x.iter().fold(x[0], |acc, &v| acc.max_s(v));
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Work threshold below which matmul stays on the calling thread. Each output
/// row is always filled by exactly one thread in a fixed order, so results are
/// bit-identical for any thread count.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// C = A @ B for row-major [m,k] x [k,n].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = (a.view_rows(), a.view_cols());
    let (kb, n) = (b.view_rows(), b.view_cols());
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}: inner dims {} vs {}",
            a.shape(),
            b.shape(),
            ka,
            kb
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a.data(), b.data(), out.data_mut(), m, ka, n);
    Ok(out)
}

/// Row-parallel i-k-j kernel. The inner j loop runs over contiguous memory in
/// both B and C, which is what lets the compiler vectorize it.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, crow: &mut [T]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

/// B^T as a fresh tensor, for [m,n] inputs.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.view_rows(), a.view_cols());
    let mut out = Tensor::zeros(&[n, m]);
    let src = a.data();
    let dst = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn normalize_unit_output() {
        let x = Tensor::vector(vec![3.0_f64, 4.0]);
        let y = l2_normalize(&x).unwrap();
        assert_relative_eq!(y.data()[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(y.data()[1], 0.8, epsilon = 1e-12);
        assert_relative_eq!(y.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_rejects_zero() {
        let x = Tensor::vector(vec![0.0_f32, 0.0]);
        assert!(matches!(
            l2_normalize(&x),
            Err(crate::error::Error::ZeroNorm { .. })
        ));
        // Just above tolerance still normalizes.
        let x = Tensor::vector(vec![1e-7_f32, 0.0]);
        assert!(l2_normalize(&x).is_ok());
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let p = stable_softmax(&[1000.0_f32, 1000.0, 1000.0]);
        for v in &p {
            assert!(v.is_finite());
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-6);
        }
        let p = stable_softmax(&[-1000.0_f64, 0.0, 1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_relative_eq!(p[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = stable_softmax(&[0.3_f64, -1.2, 2.2, 0.0]);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0_f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_parallel_matches_serial() {
        // Big enough to cross the parallel threshold; compare against the
        // trivially serial j-loop.
        let m = 64;
        let k = 48;
        let n = 80;
        let a = Tensor::from_vec(
            vec![m, k],
            (0..m * k).map(|i| ((i * 37 + 11) % 97) as f64 * 0.017 - 0.8).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(
            vec![k, n],
            (0..k * n).map(|i| ((i * 53 + 29) % 89) as f64 * 0.013 - 0.6).collect(),
        )
        .unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                assert_relative_eq!(c.data()[i * n + j], s, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0_f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = transpose(&a);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(transpose(&t).data(), a.data());
    }
}

