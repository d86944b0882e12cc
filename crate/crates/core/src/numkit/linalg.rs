//! Small dense linear algebra: LU with partial pivoting, log-determinants and
//! solves for the per-patch matrices used by the attention layers and the
//! 1x1 convolution.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor};

/// Pivots smaller than this are treated as exact zeros.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Packed LU factorization `P·A = L·U` with unit-diagonal `L`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    packed: Vec<f64>,
    /// `perm[i]` is the original row that ended up in row `i`.
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factorize(n: usize, entries: &[f64]) -> Result<Lu> {
        debug_assert_eq!(entries.len(), n * n);
        let mut a = entries.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, mag) = (k..n)
                .map(|r| (r, a[r * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(mag >= PIVOT_TOLERANCE) {
                return Err(Error::SingularMatrix {
                    matrix: 0,
                    pivot: k,
                    magnitude: mag.max(0.0),
                });
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = a[k * n + k];
            for r in k + 1..n {
                let f = a[r * n + k] / pivot;
                a[r * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        a[r * n + c] -= f * a[k * n + c];
                    }
                }
            }
        }
        Ok(Lu {
            n,
            packed: a,
            perm,
            sign,
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn lower(&self) -> Matrix {
        let n = self.n;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                l.data[i * n + j] = self.packed[i * n + j];
            }
            l.data[i * n + i] = 1.0;
        }
        l
    }

    pub fn upper(&self) -> Matrix {
        let n = self.n;
        let mut u = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                u.data[i * n + j] = self.packed[i * n + j];
            }
        }
        u
    }

    /// The permutation as a matrix `P` with `A = P·L·U`.
    pub fn permutation_matrix(&self) -> Matrix {
        let n = self.n;
        let mut p = Matrix::zeros(n, n);
        for (i, &orig) in self.perm.iter().enumerate() {
            p.data[orig * n + i] = 1.0;
        }
        p
    }

    pub fn sign_logabsdet(&self) -> (f64, f64) {
        let n = self.n;
        let mut sign = self.sign;
        let mut logabs = 0.0;
        for i in 0..n {
            let d = self.packed[i * n + i];
            if d < 0.0 {
                sign = -sign;
            }
            logabs += d.abs().ln();
        }
        (sign, logabs)
    }

    /// Solve `A·X = B` for a column block `B` (n rows, k columns, row-major).
    pub fn solve(&self, rhs: &Matrix) -> Matrix {
        let n = self.n;
        assert_eq!(rhs.rows, n);
        let k = rhs.cols;
        let mut x = Matrix::zeros(n, k);
        for i in 0..n {
            let src = self.perm[i];
            x.data[i * k..(i + 1) * k].copy_from_slice(&rhs.data[src * k..(src + 1) * k]);
        }
        for i in 0..n {
            for j in 0..i {
                let f = self.packed[i * n + j];
                if f != 0.0 {
                    for c in 0..k {
                        x.data[i * k + c] -= f * x.data[j * k + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let f = self.packed[i * n + j];
                if f != 0.0 {
                    for c in 0..k {
                        x.data[i * k + c] -= f * x.data[j * k + c];
                    }
                }
            }
            let d = self.packed[i * n + i];
            for c in 0..k {
                x.data[i * k + c] /= d;
            }
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.n;
        let mut eye = Matrix::zeros(n, n);
        for i in 0..n {
            eye.data[i * n + i] = 1.0;
        }
        self.solve(&eye)
    }
}

/// A square matrix with a lazily cached LU factorization.
#[derive(Debug)]
pub struct SquareMatrix {
    n: usize,
    entries: Vec<f64>,
    lu: OnceLock<Lu>,
}

impl Clone for SquareMatrix {
    fn clone(&self) -> Self {
        SquareMatrix {
            n: self.n,
            entries: self.entries.clone(),
            lu: self.lu.clone(),
        }
    }
}

/// Result of [`SquareMatrix::lu_logdet_solve`].
#[derive(Clone, Debug)]
pub struct LogDetSolve {
    pub sign: f64,
    pub logabsdet: f64,
    pub solution: Option<Matrix>,
}

impl SquareMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Format(format!(
                "square matrix of order {n} needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        Ok(SquareMatrix {
            n,
            entries,
            lu: OnceLock::new(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            e[i * n + i] = 1.0;
        }
        SquareMatrix::new(n, e).expect("identity is well formed")
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_rows(self.n, self.n, self.entries.clone())
    }

    pub fn lu(&self) -> Result<&Lu> {
        if let Some(lu) = self.lu.get() {
            return Ok(lu);
        }
        if let Some(k) = self.entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "lu",
                index: k,
            });
        }
        let lu = Lu::factorize(self.n, &self.entries)?;
        Ok(self.lu.get_or_init(|| lu))
    }

    pub fn lu_logdet_solve(&self, rhs: Option<&Matrix>) -> Result<LogDetSolve> {
        if let Some(r) = rhs {
            if r.rows != self.n {
                return Err(Error::ShapeMismatch {
                    op: "lu_solve",
                    left: Shape::matrix(self.n, self.n),
                    right: Shape::matrix(r.rows, r.cols),
                });
            }
        }
        let lu = self.lu()?;
        let (sign, logabsdet) = lu.sign_logabsdet();
        Ok(LogDetSolve {
            sign,
            logabsdet,
            solution: rhs.map(|r| lu.solve(r)),
        })
    }
}

fn batched_square(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.h() != s.w() {
        return Err(Error::domain(op, format!("matrices must be square, got {s}")));
    }
    Ok((s.b() * s.c(), s.h()))
}

/// Log |det| of every (n×n) matrix in a (B, G, n, n) tensor; returns (B, G, 1, 1)
/// and the transposed inverses (same shape as the input).
pub fn batched_logabsdet(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let (count, n) = batched_square(t, "logabsdet")?;
    let s = t.shape();
    let mut out = Vec::with_capacity(count);
    let mut inv_t = vec![0.0; t.data().len()];
    for m in 0..count {
        let block = &t.data()[m * n * n..(m + 1) * n * n];
        let lu = Lu::factorize(n, block).map_err(|e| with_matrix_index(e, m))?;
        out.push(lu.sign_logabsdet().1);
        let inv = lu.inverse();
        let dst = &mut inv_t[m * n * n..(m + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = inv.at(j, i);
            }
        }
    }
    Ok((
        Tensor::new(Shape::new(s.b(), s.c(), 1, 1), out)?,
        Tensor::new(s, inv_t)?,
    ))
}

/// Solve `A_m · X_m = R_m` for every matrix of a (B, G, n, n) batch against a
/// (B, G, n, k) right-hand side.
pub fn batched_solve(a: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let (count, n) = batched_square(a, "solve")?;
    let rs = rhs.shape();
    if rs.b() != a.shape().b() || rs.c() != a.shape().c() || rs.h() != n {
        return Err(Error::ShapeMismatch {
            op: "solve",
            left: a.shape(),
            right: rs,
        });
    }
    let k = rs.w();
    let mut out = Vec::with_capacity(rhs.data().len());
    for m in 0..count {
        let lu = Lu::factorize(n, &a.data()[m * n * n..(m + 1) * n * n])
            .map_err(|e| with_matrix_index(e, m))?;
        let r = Matrix::from_rows(n, k, rhs.data()[m * n * k..(m + 1) * n * k].to_vec());
        out.extend(lu.solve(&r).data);
    }
    Tensor::new(rs, out)
}

fn with_matrix_index(e: Error, m: usize) -> Error {
    match e {
        Error::SingularMatrix {
            pivot, magnitude, ..
        } => Error::SingularMatrix {
            matrix: m,
            pivot,
            magnitude,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Determinant by Laplace expansion along the first row.
    fn cofactor_det(n: usize, a: &[f64]) -> f64 {
        if n == 1 {
            return a[0];
        }
        let mut det = 0.0;
        for col in 0..n {
            let minor: Vec<f64> = (1..n)
                .flat_map(|r| (0..n).filter(move |&c| c != col).map(move |c| (r, c)))
                .map(|(r, c)| a[r * n + c])
                .collect();
            let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * a[col] * cofactor_det(n - 1, &minor);
        }
        det
    }

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..n {
            a[i * n + i] += 2.0 * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        a
    }

    #[test]
    fn identity_logdet_and_solve() {
        let m = SquareMatrix::identity(3);
        let rhs = Matrix::from_rows(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = m.lu_logdet_solve(Some(&rhs)).unwrap();
        assert_eq!(r.sign, 1.0);
        assert_eq!(r.logabsdet, 0.0);
        assert_eq!(r.solution.unwrap(), rhs);
    }

    #[test]
    fn diagonal_logdet() {
        let m = SquareMatrix::new(2, vec![2.0, 0.0, 0.0, 0.5]).unwrap();
        let r = m.lu_logdet_solve(None).unwrap();
        assert_eq!(r.sign, 1.0);
        assert!(r.logabsdet.abs() < 1e-15);
    }

    #[test]
    fn matches_cofactor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=4 {
            for _ in 0..50 {
                let a = random_matrix(n, &mut rng);
                let det = cofactor_det(n, &a);
                let r = SquareMatrix::new(n, a).unwrap().lu_logdet_solve(None).unwrap();
                let val = r.sign * r.logabsdet.exp();
                assert!((val - det).abs() <= 1e-9 * det.abs(), "n={n}: {val} vs {det}");
            }
        }
    }

    #[test]
    fn reconstruction_and_residual_over_many_seeds() {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (seed as usize % 8);
            let a = random_matrix(n, &mut rng);
            let m = SquareMatrix::new(n, a.clone()).unwrap();
            let lu = m.lu().unwrap();
            let plu = lu.permutation_matrix().matmul(&lu.lower()).matmul(&lu.upper());
            let err = plu
                .data
                .iter()
                .zip(&a)
                .fold(0.0f64, |e, (x, y)| e.max((x - y).abs()));
            assert!(err < 1e-10, "seed {seed}: reconstruction {err}");

            let rhs = Matrix::from_rows(n, 3, (0..3 * n).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let sol = m.lu_logdet_solve(Some(&rhs)).unwrap().solution.unwrap();
            let back = m.as_matrix().matmul(&sol);
            let res = back
                .data
                .iter()
                .zip(&rhs.data)
                .fold(0.0f64, |e, (x, y)| e.max((x - y).abs()));
            assert!(res < 1e-9 * (1.0 + rhs.max_abs()), "seed {seed}: residual {res}");
        }
    }

    #[test]
    fn singular_reports_pivot() {
        let m = SquareMatrix::new(2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        match m.lu_logdet_solve(None) {
            Err(Error::SingularMatrix { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn batched_ops_agree_with_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let a = Tensor::new(
            Shape::new(2, 2, n, n),
            (0..4).flat_map(|_| random_matrix(n, &mut rng)).collect(),
        )
        .unwrap();
        let (ld, _) = batched_logabsdet(&a).unwrap();
        for m in 0..4 {
            let sq = SquareMatrix::new(n, a.data()[m * 9..(m + 1) * 9].to_vec()).unwrap();
            let r = sq.lu_logdet_solve(None).unwrap();
            assert_eq!(ld.data()[m], r.logabsdet);
        }
        let rhs = Tensor::randn(Shape::new(2, 2, n, 2), 1.0, &mut rng);
        let x = batched_solve(&a, &rhs).unwrap();
        for m in 0..4 {
            let am = Matrix::from_rows(n, n, a.data()[m * 9..(m + 1) * 9].to_vec());
            let xm = Matrix::from_rows(n, 2, x.data()[m * 6..(m + 1) * 6].to_vec());
            let back = am.matmul(&xm);
            for (p, q) in back.data.iter().zip(&rhs.data()[m * 6..(m + 1) * 6]) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
