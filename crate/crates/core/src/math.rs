//! Dense row-major matrices, stable nonlinearities and the central-difference
//! gradient oracle used to check every hand-written backward pass.

use crate::error::{Error, Result};

/// Row-major dense `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v` for a vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, v))
            .collect()
    }

    /// `out += self * v`.
    pub fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), v);
        }
    }

    /// `out += selfᵀ * v` for `v` of length `rows`.
    pub fn t_matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
    }

    /// `self += a bᵀ` (rank-one update).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Logistic function, stable for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input at index {i}")));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax on an already-validated finite row.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of `f` at `theta`:
/// `(f(θ + ε e_j) − f(θ − ε e_j)) / 2ε` for every coordinate `j`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = work[j];
        work[j] = orig + eps;
        let plus = f(&work);
        work[j] = orig - eps;
        let minus = f(&work);
        work[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {j} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Mean and population variance in one pass (Welford).
pub fn mean_var(xs: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in xs {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    let var = if n > 0 { m2 / n as f64 } else { f64::NAN };
    (mean, var, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn softmax_uniform_and_shift() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in &s {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax(&[5.0, 5.0]).unwrap();
        let b = softmax(&[1005.0, 1005.0]).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
        assert_eq!(b, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // exp(1), exp(2), exp(3) / their sum evaluated without max-shift
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
        // 0.09003057317038046, 0.24472847105479767, 0.6652409557748219
        let frozen = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for i in 0..3 {
            assert!((s[i] - e[i] / z).abs() < 1e-15);
            assert!((s[i] - frozen[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn nonlinearities() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        let s = sigmoid(-1000.0);
        assert!(s.is_finite() && (0.0..=1e-300).contains(&s));
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(tanh(1000.0) <= 1.0 && tanh(-1000.0) >= -1.0);
        let mut prev = sigmoid(-50.0);
        for i in -49..50 {
            let cur = sigmoid(i as f64);
            assert!(cur >= prev);
            prev = cur;
        }
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let g = finite_diff_grad(|t| dot(t, t), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_diff_reports_coordinate() {
        let err = finite_diff_grad(
            |t| if t[1] > 0.5 { f64::NAN } else { t[0] },
            &[0.0, 0.5],
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
        assert!(finite_diff_grad(|t| t[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let a = Matrix::from_vec(7, 5, (0..35).map(|_| rng.normal()).collect()).unwrap();
            let b = Matrix::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
            let c = a.matmul(&b).unwrap();
            for i in 0..7 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for k in 0..5 {
                        s += a.get(i, k) * b.get(k, j);
                    }
                    assert!((c.get(i, j) - s).abs() < 1e-12);
                }
            }
        }
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn matvec_variants_agree_with_matmul() {
        let mut rng = Rng::new(3);
        let a = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let v = [0.3, -1.2, 2.0];
        let mv = a.matvec(&v);
        let mm = a.matmul(&Matrix::column(&v)).unwrap();
        for i in 0..4 {
            assert!((mv[i] - mm.get(i, 0)).abs() < 1e-14);
        }
        let w = [1.0, 2.0, -1.0, 0.5];
        let mut out = vec![0.0; 3];
        a.t_matvec_acc(&w, &mut out);
        let expect = a.transpose().matvec(&w);
        for j in 0..3 {
            assert!((out[j] - expect[j]).abs() < 1e-14);
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in proptest::collection::vec(-700.0f64..700.0, 1..200),
            c in -300.0f64..300.0,
        ) {
            let s = softmax(&v).unwrap();
            let total: f64 = s.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(s.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let t = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&t) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_long_vector() {
        let mut rng = Rng::new(99);
        let v: Vec<f64> = (0..10_000).map(|_| 20.0 * rng.normal()).collect();
        let s = softmax(&v).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
