use std::cmp::Ordering;

use super::kernel::{gemm, View};
use super::{Matrix, NumericsError, Scalar};

/// Norm floor below which a row is treated as zero.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Probability floor applied before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Scales every row to unit L2 norm.
pub fn rowwise_l2_normalize<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    let mut out = m.clone();
    normalize_rows_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn normalize_rows_in_place<T: Scalar>(m: &mut Matrix<T>) -> Result<(), NumericsError> {
    let floor = T::lit(MIN_ROW_NORM);
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm >= floor) {
            return Err(NumericsError::ZeroRow { row: r });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(())
}

/// Softmax of `v / tau`, computed with max subtraction.
pub fn softmax_temp<T: Scalar>(v: &[T], tau: T) -> Result<Vec<T>, NumericsError> {
    if !(tau > T::zero()) {
        return Err(NumericsError::NonPositiveTemperature(tau.as_f64()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out, tau);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], tau: T) {
    let inv = T::one() / tau;
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    for v in row.iter_mut() {
        *v = ((*v - max) * inv).exp_fast();
    }
    let total: T = row.iter().copied().sum();
    let inv_total = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv_total;
    }
}

/// Row-wise [`softmax_temp`] over a matrix.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>, tau: T) -> Result<Matrix<T>, NumericsError> {
    if !(tau > T::zero()) {
        return Err(NumericsError::NonPositiveTemperature(tau.as_f64()));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), tau);
    }
    Ok(out)
}

/// `-Σ p_i ln max(q_i, 1e-12)`.
pub fn cross_entropy<T: Scalar>(p: &[T], q: &[T]) -> Result<T, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let eps = T::lit(LOG_EPS);
    Ok(-p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * qi.max(eps).ln())
        .sum::<T>())
}

/// Entropy `-Σ p ln p` with the same clamp as [`cross_entropy`].
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    let eps = T::lit(LOG_EPS);
    -p.iter().map(|&v| v * v.max(eps).ln()).sum::<T>()
}

/// Per-row top-k result: `values` is `rows×k`, `indices` row-major `rows×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK<T> {
    pub values: Matrix<T>,
    pub indices: Vec<usize>,
    pub k: usize,
}

impl<T: Scalar> TopK<T> {
    pub fn row_indices(&self, r: usize) -> &[usize] {
        &self.indices[r * self.k..(r + 1) * self.k]
    }
}

/// Descending by value, ascending by index on ties.
#[inline]
pub(crate) fn rank_order<T: Scalar>(a: (usize, T), b: (usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest entries of `row`, best first.
pub(crate) fn topk_row<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| rank_order((*a, row[*a]), (*b, row[*b]));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// The `k` largest entries of each row in descending order.
pub fn topk_rowwise<T: Scalar>(s: &Matrix<T>, k: usize) -> Result<TopK<T>, NumericsError> {
    if k > s.cols() {
        return Err(NumericsError::KTooLarge { k, cols: s.cols() });
    }
    let mut values = Matrix::zeros(s.rows(), k);
    let mut indices = Vec::with_capacity(s.rows() * k);
    for r in 0..s.rows() {
        let row = s.row(r);
        let best = topk_row(row, k);
        for (j, &c) in best.iter().enumerate() {
            values.set(r, j, row[c]);
        }
        indices.extend(best);
    }
    Ok(TopK { values, indices, k })
}

/// Matrix product `A B`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.cols() != b.rows() {
        return Err(NumericsError::ShapeMismatch {
            expected: (a.cols(), b.cols()),
            found: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    gemm(
        T::one(),
        View::new(a.data(), a.rows(), a.cols(), false),
        View::new(b.data(), b.rows(), b.cols(), false),
        T::zero(),
        out.data_mut(),
    );
    Ok(out)
}

/// Matrix product `A Bᵀ`, the cosine-similarity table for unit rows.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::ShapeMismatch {
            expected: (b.rows(), a.cols()),
            found: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    gemm(
        T::one(),
        View::new(a.data(), a.rows(), a.cols(), false),
        View::new(b.data(), b.rows(), b.cols(), true),
        T::zero(),
        out.data_mut(),
    );
    Ok(out)
}

// libm's tanh is several times slower than exp
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp_fast() + T::one())
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = fast_tanh(u);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn normalize_345() {
        let m = Matrix::from_rows(&[vec![3.0f64, 4.0]]).unwrap();
        let n = rowwise_l2_normalize(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_axes() {
        let m = Matrix::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 2.0]]).unwrap();
        let n = rowwise_l2_normalize(&m).unwrap();
        assert_eq!(n, Matrix::identity(2));
    }

    #[test]
    fn normalize_matches_scalar_loop() {
        let m = random_matrix(5, 3, 7);
        let n = rowwise_l2_normalize(&m).unwrap();
        for r in 0..5 {
            let mut sq = 0.0;
            for c in 0..3 {
                sq += m.get(r, c) * m.get(r, c);
            }
            let norm = sq.sqrt();
            for c in 0..3 {
                assert!((n.get(r, c) - m.get(r, c) / norm).abs() < 1e-12);
            }
            assert!((n.row_norms()[r] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = Matrix::from_rows(&[vec![1.0f32, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            rowwise_l2_normalize(&m),
            Err(NumericsError::ZeroRow { row: 1 })
        );
    }

    #[test]
    fn softmax_symmetric_and_analytic() {
        let p = softmax_temp(&[0.0f64, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let q = softmax_temp(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((q[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let p = softmax_temp(&[1.0f32, 2.0, 3.0], 0.5).unwrap();
        // exp(2k) / Σ exp(2j) evaluated directly in f64
        let e: Vec<f64> = [2.0f64, 4.0, 6.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            assert!((*a as f64 - b / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(
            softmax_temp(&[1.0f32], 0.0),
            Err(NumericsError::NonPositiveTemperature(_))
        ));
        assert!(softmax_temp(&[1.0f32], -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = 2f64.ln();
        let h = cross_entropy(&[0.5f64, 0.5], &[0.5, 0.5]).unwrap();
        assert!((h - ln2).abs() < 1e-12);
        let h = cross_entropy(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
        assert!((h - ln2).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[1.0f64], &[0.5, 0.5]),
            Err(NumericsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = || {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = draw();
        let q = draw();
        let mut oracle = 0.0;
        for i in 0..8 {
            oracle -= p[i] * q[i].ln();
        }
        assert!((cross_entropy(&p, &q).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn topk_examples() {
        let s = Matrix::from_rows(&[vec![0.9f32, 0.1, 0.5]]).unwrap();
        let t = topk_rowwise(&s, 2).unwrap();
        assert_eq!(t.values.data(), &[0.9, 0.5]);
        assert_eq!(t.indices, vec![0, 2]);

        let s = Matrix::from_rows(&[vec![0.5f32, 0.5]]).unwrap();
        assert_eq!(topk_rowwise(&s, 1).unwrap().indices, vec![0]);
        assert_eq!(
            topk_rowwise(&s, 3),
            Err(NumericsError::KTooLarge { k: 3, cols: 2 })
        );
    }

    #[test]
    fn topk_matches_full_sort() {
        let s = random_matrix(10, 100, 11);
        let t = topk_rowwise(&s, 8).unwrap();
        for r in 0..10 {
            let mut all: Vec<(usize, f64)> = s.row(r).iter().copied().enumerate().collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = all.iter().take(8).map(|x| x.0).collect();
            assert_eq!(t.row_indices(r), &want[..]);
        }
    }

    #[test]
    fn matmul_identity_and_self_similarity() {
        let m = random_matrix(3, 4, 1);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let u = Matrix::from_rows(&[vec![1.0f32, 0.0]]).unwrap();
        assert_eq!(matmul_nt(&u, &u).unwrap().data(), &[1.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random_matrix(4, 3, 5);
        let b = random_matrix(3, 5, 6);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-5);
            }
        }
        assert!(matches!(
            matmul(&a, &a),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
