//! Dense f64 matrix substrate: row-major storage, deterministic accumulation.
//!
//! Everything downstream (attention, routing, training, benchmarks) runs on
//! this type. All reductions accumulate sequentially in index order so a run
//! is bit-reproducible for a fixed seed.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};

thread_local! {
    /// Running count of f64 slots allocated through `Matrix`, for the
    /// allocation-soundness check in the bench module.
    static ALLOC_FLOATS: Cell<u64> = const { Cell::new(0) };
}

/// Reset the thread-local allocation counter to zero.
pub fn reset_alloc_counter() {
    ALLOC_FLOATS.with(|c| c.set(0));
}

/// Number of f64 slots allocated through `Matrix` since the last reset.
pub fn floats_allocated() -> u64 {
    ALLOC_FLOATS.with(|c| c.get())
}

fn count_alloc(n: usize) {
    ALLOC_FLOATS.with(|c| c.set(c.get() + n as u64));
}

/// Dense 2-D matrix of f64 in row-major order.
#[derive(Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Clone for Matrix {
    fn clone(&self) -> Matrix {
        count_alloc(self.data.len());
        Matrix { rows: self.rows, cols: self.cols, data: self.data.clone() }
    }
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        count_alloc(rows * cols);
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a row-major vector. Rejects length mismatch and non-finite
    /// entries; this is the boundary for externally supplied data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument {
                op: "from_vec",
                msg: format!("data length {} != {}x{}", data.len(), rows, cols),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "from_vec",
                msg: format!("non-finite entry {} at flat index {}", data[pos], pos),
            });
        }
        count_alloc(data.len());
        Ok(Matrix { rows, cols, data })
    }

    /// Build from a generator over (row, col). Internal use; does not
    /// re-validate finiteness.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Uniform random entries in (-scale, scale), drawn row-major.
    pub fn random_uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Borrow row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Matrix product. Accumulation order is fixed (k ascending per output
    /// row) so results are reproducible.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lrows: self.rows,
                lcols: self.cols,
                rrows: other.rows,
                rcols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// self^T * other without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lrows: self.rows,
                lcols: self.cols,
                rrows: other.rows,
                rcols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (k, &aik) in a_row.iter().enumerate() {
                let out_row = &mut out.data[k * n..(k + 1) * n];
                for (o, &bij) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bij;
                }
            }
        }
        Ok(out)
    }

    /// self * other^T without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lrows: self.rows,
                lcols: self.cols,
                rrows: other.rows,
                rcols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * other.rows..(i + 1) * other.rows];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut sum = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    sum += a * b;
                }
                *o = sum;
            }
        }
        Ok(out)
    }

    /// Transpose (copies).
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "add",
                lrows: self.rows,
                lcols: self.cols,
                rrows: other.rows,
                rcols: other.cols,
            });
        }
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        Ok(out)
    }

    /// Accumulate `other` into self; shapes must match.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lrows: self.rows,
                lcols: self.cols,
                rrows: other.rows,
                rcols: other.cols,
            });
        }
        for (o, &b) in self.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        Ok(())
    }

    /// Scale every entry by `s`.
    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            *o *= s;
        }
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for o in self.data.iter_mut() {
            *o *= s;
        }
    }

    /// Row-wise softmax with max-shift: exp(x - rowmax) normalized to sum 1.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        out.softmax_rows_in_place();
        out
    }

    /// [`Matrix::softmax_rows`] without the copy — for large score matrices.
    pub fn softmax_rows_in_place(&mut self) {
        for i in 0..self.rows {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }

    /// Elementwise max(x, 0).
    pub fn relu(&self) -> Matrix {
        let mut out = self.clone();
        for x in out.data.iter_mut() {
            *x = x.max(0.0);
        }
        out
    }

    /// Elementwise x+1 for x > 0, exp(x) otherwise. Strictly positive.
    pub fn elu_plus_one(&self) -> Matrix {
        let mut out = self.clone();
        for x in out.data.iter_mut() {
            *x = if *x > 0.0 { *x + 1.0 } else { x.exp() };
        }
        out
    }

    /// Compress rows into `landmarks` contiguous segment means.
    ///
    /// Segment s covers rows [floor(s*n/landmarks), floor((s+1)*n/landmarks));
    /// every segment is nonempty for 1 <= landmarks <= rows. With
    /// landmarks == rows this is an exact copy (each segment sums one row and
    /// divides by 1).
    pub fn segment_mean(&self, landmarks: usize) -> Result<Matrix> {
        let n = self.rows;
        if landmarks == 0 || landmarks > n {
            return Err(Error::InvalidArgument {
                op: "segment_mean",
                msg: format!("landmarks {} out of range 1..={}", landmarks, n),
            });
        }
        let mut out = Matrix::zeros(landmarks, self.cols);
        for s in 0..landmarks {
            let (start, end) = segment_bounds(n, landmarks, s);
            let out_row = &mut out.data[s * self.cols..(s + 1) * self.cols];
            for r in start..end {
                let src = &self.data[r * self.cols..(r + 1) * self.cols];
                for (o, &x) in out_row.iter_mut().zip(src) {
                    *o += x;
                }
            }
            let inv = 1.0 / (end - start) as f64;
            for o in out_row.iter_mut() {
                *o *= inv;
            }
        }
        Ok(out)
    }

    /// New matrix whose rows are `self`'s rows at `idx`, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }
}

/// Row range `[start, end)` of segment `s` when `rows` rows are split into
/// `landmarks` contiguous segments. This is the partition `segment_mean`
/// averages over; anything undoing that averaging must use the same bounds.
pub fn segment_bounds(rows: usize, landmarks: usize, s: usize) -> (usize, usize) {
    (s * rows / landmarks, (s + 1) * rows / landmarks)
}

/// Greatest absolute difference between two equally-shaped matrices, scaled
/// by the larger max-abs entry (floored at 1e-12).
pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.rows, b.rows, "rel_diff: row mismatch");
    assert_eq!(a.cols, b.cols, "rel_diff: col mismatch");
    let mut max_diff = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        max_diff = max_diff.max((x - y).abs());
    }
    max_diff / a.max_abs().max(b.max_abs()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar triple-loop product, independent of Matrix::matmul's loop order.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut sum = 0.0;
                for k in 0..a.cols() {
                    sum += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, sum);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::random_uniform(3, 3, 1.0, &mut rng);
        let out = Matrix::identity(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_checked_2x2() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::random_uniform(5, 7, 1.0, &mut rng);
        let b = Matrix::random_uniform(7, 3, 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(rel_diff(&got, &want) < 1e-12, "rel diff {}", rel_diff(&got, &want));
    }

    #[test]
    fn matmul_random_8x8_agrees_with_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random_uniform(8, 8, 2.0, &mut rng);
            let b = Matrix::random_uniform(8, 8, 2.0, &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = matmul_oracle(&a, &b);
            assert!(rel_diff(&got, &want) < 1e-12, "seed {}: {}", seed, rel_diff(&got, &want));
        }
    }

    #[test]
    fn fused_transpose_matmuls_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::random_uniform(5, 3, 1.0, &mut rng);
        let b = Matrix::random_uniform(5, 4, 1.0, &mut rng);
        let tn = a.matmul_tn(&b).unwrap();
        assert!(rel_diff(&tn, &a.transpose().matmul(&b).unwrap()) < 1e-15);
        assert!(a.matmul_tn(&Matrix::zeros(4, 2)).is_err());

        let c = Matrix::random_uniform(4, 6, 1.0, &mut rng);
        let d = Matrix::random_uniform(3, 6, 1.0, &mut rng);
        let nt = c.matmul_nt(&d).unwrap();
        assert!(rel_diff(&nt, &c.matmul(&d.transpose()).unwrap()) < 1e-15);
        assert!(c.matmul_nt(&Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "error should report both shapes: {}", err);
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::zeros(1, 3).softmax_rows();
        for &x in m.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_entries_do_not_overflow() {
        let m = Matrix::from_vec(1, 2, vec![1000.0, 1000.0]).unwrap().softmax_rows();
        assert!(m.all_finite());
        assert!((m.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let m = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap().softmax_rows();
        // direct exp/sum, no max shift
        let exps = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let sum: f64 = exps.iter().sum();
        for j in 0..3 {
            assert!((m.get(0, j) - exps[j] / sum).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::random_uniform(6, 9, 30.0, &mut rng).softmax_rows();
        for i in 0..6 {
            let sum: f64 = m.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", i, sum);
            assert!(m.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn relu_and_elu_plus_one_basics() {
        let m = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(m.relu().data(), &[0.0, 0.0, 2.0]);

        let e = Matrix::from_vec(1, 1, vec![0.0]).unwrap().elu_plus_one();
        assert_eq!(e.get(0, 0), 1.0);

        let tiny = Matrix::from_vec(1, 1, vec![-50.0]).unwrap().elu_plus_one();
        assert_eq!(tiny.get(0, 0), (-50.0f64).exp());
        assert!(tiny.get(0, 0) > 0.0);
    }

    #[test]
    fn nonlinearity_sign_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Matrix::random_uniform(4, 5, 10.0, &mut rng);
        assert!(m.relu().data().iter().all(|&x| x >= 0.0));
        assert!(m.elu_plus_one().data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn segment_mean_identity_when_landmarks_equal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::random_uniform(7, 4, 3.0, &mut rng);
        let out = m.segment_mean(7).unwrap();
        assert_eq!(out, m, "landmarks == rows must be an exact copy");
    }

    #[test]
    fn segment_mean_of_constant_matrix_is_constant() {
        let m = Matrix::from_fn(6, 3, |_, _| 2.5);
        let out = m.segment_mean(4).unwrap();
        assert_eq!(out.rows(), 4);
        assert!(out.data().iter().all(|&x| (x - 2.5).abs() < 1e-15));
    }

    #[test]
    fn segment_mean_preserves_global_mean_for_equal_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Matrix::random_uniform(6, 5, 1.0, &mut rng);
        let out = m.segment_mean(3).unwrap();
        for j in 0..5 {
            // direct summation on both sides
            let mut mean_in = 0.0;
            for i in 0..6 {
                mean_in += m.get(i, j);
            }
            mean_in /= 6.0;
            let mut mean_out = 0.0;
            for i in 0..3 {
                mean_out += out.get(i, j);
            }
            mean_out /= 3.0;
            assert!((mean_in - mean_out).abs() < 1e-12, "col {}: {} vs {}", j, mean_in, mean_out);
        }
    }

    #[test]
    fn segment_mean_rejects_out_of_range() {
        let m = Matrix::zeros(4, 2);
        assert!(m.segment_mean(0).is_err());
        assert!(m.segment_mean(5).is_err());
    }

    #[test]
    fn segment_bounds_cover_all_rows_nonempty() {
        // every row lands in exactly one nonempty segment for all (n, m) pairs
        for n in 1..=24usize {
            for m in 1..=n {
                let mut covered = 0usize;
                for s in 0..m {
                    let start = s * n / m;
                    let end = (s + 1) * n / m;
                    assert!(end > start, "empty segment {} for n={} m={}", s, n, m);
                    covered += end - start;
                }
                assert_eq!(covered, n);
            }
        }
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Matrix::from_vec(1, 3, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn alloc_counter_tracks_matrix_allocations() {
        reset_alloc_counter();
        let _a = Matrix::zeros(10, 10);
        let _b = Matrix::zeros(3, 4);
        assert_eq!(floats_allocated(), 112);
    }
}
