//! Plain row-major matrices generic over the float type, for inference and
//! benchmark kernels that do not need the tape.

use num_traits::Float;

use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| T::from(v).expect("finite cast")).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|v| v.to_f64().expect("finite cast")).collect();
        Tensor::matrix(self.rows, self.cols, data)
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, b.rows, "matmul inner dimensions");
        let mut out = Mat::zeros(self.rows, b.cols);
        let n = b.cols;
        for i in 0..self.rows {
            let o = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &bv) in o.iter_mut().zip(b.row(k)) {
                    *o = *o + a * bv;
                }
            }
        }
        out
    }

    /// `self · bᵀ` for `b: [n×k]`.
    pub fn matmul_nt(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, b.cols, "matmul_nt inner dimensions");
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = dot(a, b.row(j));
            }
        }
        out
    }

    pub fn add_row(&mut self, row: &[T]) {
        for r in 0..self.rows {
            for (v, &b) in self.row_mut(r).iter_mut().zip(row) {
                *v = *v + b;
            }
        }
    }

    pub fn add(&mut self, other: &Mat<T>) {
        for (v, &o) in self.data.iter_mut().zip(&other.data) {
            *v = *v + o;
        }
    }

    pub fn scale(&mut self, c: T) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    pub fn map(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn concat_rows(parts: &[&Mat<T>]) -> Mat<T> {
        let cols = parts[0].cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows widths");
            data.extend_from_slice(&p.data);
        }
        Mat {
            rows: data.len() / cols,
            cols,
            data,
        }
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Max-subtracted softmax of each row over the columns where `allowed`
    /// returns true; other columns get zero.
    pub fn softmax_rows_where(&mut self, allowed: impl Fn(usize, usize) -> bool) {
        let cols = self.cols;
        for r in 0..self.rows {
            let row = &mut self.data[r * cols..(r + 1) * cols];
            let mut max = T::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if allowed(r, c) && v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for (c, v) in row.iter_mut().enumerate() {
                *v = if allowed(r, c) { (*v - max).exp() } else { T::zero() };
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
    }
}

/// Dot product with sixteen independent partial sums so it vectorises.
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn swish<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_agrees_with_tensor() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let b = Tensor::matrix(3, 2, vec![0.5, 1.0, -2.0, 0.0, 1.0, 3.0]);
        let want = a.matmul(&b).unwrap();
        let got = Mat::<f64>::from_tensor(&a).matmul(&Mat::from_tensor(&b));
        assert_eq!(got.to_tensor(), want);
        let nt = Mat::<f64>::from_tensor(&a).matmul_nt(&Mat::from_tensor(&b.transpose()));
        assert_eq!(nt.to_tensor(), want);
    }

    #[test]
    fn masked_softmax_rows() {
        let mut m = Mat::<f32>::zeros(2, 3);
        m.softmax_rows_where(|r, c| c <= r + 1);
        assert_eq!(m.row(0), &[0.5, 0.5, 0.0]);
        let s: f32 = m.row(1).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
