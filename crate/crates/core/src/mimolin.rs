//! Complex linear algebra for the MIMO channel: matrices, SVD, clamped
//! pseudo-inverse of the singular spectrum, and Rayleigh channel sampling.

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::rng::gaussian;

/// Singular values below this fraction of the largest are treated as zero
/// when forming left singular vectors.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MimolinError {
    #[error("svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("{op}: dimension mismatch ({lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols})")]
    Dimension {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("non-finite entry in {context}")]
    NonFinite { context: &'static str },
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c));
        CMatrix { rows: r, cols: c, data: rows.iter().flatten().cloned().collect() }
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Matrix product.
    pub fn mul(&self, other: &CMatrix) -> Result<CMatrix, MimolinError> {
        if self.cols != other.rows {
            return Err(MimolinError::Dimension {
                op: "mul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> CMatrix {
        let mut out = CMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    /// Left-multiplies by a real diagonal: diag(d) · self.
    pub fn scale_rows(&self, d: &[f64]) -> CMatrix {
        assert_eq!(d.len(), self.rows);
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] *= d[i];
            }
        }
        out
    }

    pub fn add(&self, other: &CMatrix) -> Result<CMatrix, MimolinError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MimolinError::Dimension {
                op: "add",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let mut out = self.clone();
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &CMatrix) -> Result<CMatrix, MimolinError> {
        let mut out = self.clone();
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MimolinError::Dimension {
                op: "sub",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o -= v;
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn col_dot(&self, p: usize, q: usize) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for i in 0..self.rows {
            s += self[(i, p)].conj() * self[(i, q)];
        }
        s
    }

    fn col_norm_sq(&self, p: usize) -> f64 {
        (0..self.rows).map(|i| self[(i, p)].norm_sqr()).sum()
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// H = U · diag(singular) · V^H with descending singular values and a fixed
/// phase convention (first non-negligible component of each V column is real
/// and positive).
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: CMatrix,
    pub singular: Vec<f64>,
    pub v: CMatrix,
}

/// One-sided Jacobi SVD of a square complex matrix.
///
/// Column pairs are rotated (with a phase absorbed into the right factor)
/// until mutually orthogonal; singular values are the resulting column
/// norms. Quadratic convergence makes the sweep cap generous for the small M
/// used here.
pub fn svd(h: &CMatrix) -> Result<SvdFactors, MimolinError> {
    assert_eq!(h.rows, h.cols, "svd expects a square matrix");
    if !h.is_finite() {
        return Err(MimolinError::NonFinite { context: "svd input" });
    }
    let m = h.rows;
    let mut a = h.clone();
    let mut v = CMatrix::identity(m);

    let max_sweeps = 60;
    let tol = 1e-14;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..m {
            for q in (p + 1)..m {
                let app = a.col_norm_sq(p);
                let aqq = a.col_norm_sq(q);
                let apq = a.col_dot(p, q);
                let mag = apq.norm();
                if mag <= tol * (app * aqq).sqrt() {
                    continue;
                }
                off = off.max(mag / (app * aqq).sqrt().max(f64::MIN_POSITIVE));
                // Absorb the phase of the inner product into column q so the
                // remaining 2x2 problem is real symmetric.
                let w = apq.conj() / mag;
                for i in 0..m {
                    a[(i, q)] *= w;
                    v[(i, q)] *= w;
                }
                let tau = (aqq - app) / (2.0 * mag);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let ap = a[(i, p)];
                    let aq = a[(i, q)];
                    a[(i, p)] = c * ap - s * aq;
                    a[(i, q)] = s * ap + c * aq;
                }
                for i in 0..m {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if off == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MimolinError::NoConvergence { sweeps: max_sweeps });
    }

    // Sort columns by norm, descending; selection order is deterministic.
    let mut order: Vec<usize> = (0..m).collect();
    let norms: Vec<f64> = (0..m).map(|j| a.col_norm_sq(j).sqrt()).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));
    let mut a2 = a.clone();
    let mut v2 = v.clone();
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..m {
            a2[(i, dst)] = a[(i, src)];
            v2[(i, dst)] = v[(i, src)];
        }
    }
    let mut singular: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    // Left factor: normalized columns; rank-deficient directions completed
    // to an orthonormal basis from canonical vectors.
    let s_max = singular[0];
    let mut u = CMatrix::zeros(m, m);
    for j in 0..m {
        if singular[j] > RANK_TOL * s_max.max(1e-300) && singular[j] > 0.0 {
            for i in 0..m {
                u[(i, j)] = a2[(i, j)] / singular[j];
            }
        } else {
            singular[j] = 0.0;
            let mut filled = false;
            for basis in 0..m {
                let mut col: Vec<Complex64> = (0..m)
                    .map(|i| if i == basis { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) })
                    .collect();
                // Two rounds of Gram-Schmidt against the accepted columns.
                for _ in 0..2 {
                    for prev in 0..j {
                        let proj: Complex64 = (0..m).map(|i| u[(i, prev)].conj() * col[i]).sum();
                        for i in 0..m {
                            col[i] -= proj * u[(i, prev)];
                        }
                    }
                }
                let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                if norm > 0.5 {
                    for i in 0..m {
                        u[(i, j)] = col[i] / norm;
                    }
                    filled = true;
                    break;
                }
            }
            assert!(filled, "orthonormal completion failed");
        }
    }

    // Phase convention: first non-negligible component of each V column made
    // real positive; the compensating phase goes into the matching U column.
    for j in 0..m {
        let mut pivot = None;
        for i in 0..m {
            if v2[(i, j)].norm() > 1e-9 {
                pivot = Some(v2[(i, j)]);
                break;
            }
        }
        if let Some(pv) = pivot {
            let alpha = pv.conj() / pv.norm();
            for i in 0..m {
                v2[(i, j)] *= alpha;
                u[(i, j)] *= alpha;
            }
        }
    }

    Ok(SvdFactors { u, singular, v: v2 })
}

impl SvdFactors {
    /// U · diag(s) · V^H.
    pub fn reconstruct(&self) -> CMatrix {
        let m = self.singular.len();
        let mut usd = self.u.clone();
        for j in 0..m {
            for i in 0..m {
                usd[(i, j)] *= self.singular[j];
            }
        }
        usd.mul(&self.v.hermitian()).expect("square factors")
    }

    /// Max of the two unitarity defects ‖U^H U − I‖_F, ‖V^H V − I‖_F.
    pub fn unitarity_defect(&self) -> f64 {
        let m = self.singular.len();
        let eye = CMatrix::identity(m);
        let du = self.u.hermitian().mul(&self.u).unwrap().sub(&eye).unwrap().frobenius_norm();
        let dv = self.v.hermitian().mul(&self.v).unwrap().sub(&eye).unwrap().frobenius_norm();
        du.max(dv)
    }
}

/// Clamped Moore-Penrose inverse of a singular spectrum: 1/s_i where
/// s_i >= floor, else 0.
pub fn pinv_diag(singular: &[f64], floor: f64) -> Vec<f64> {
    assert!(floor > 0.0, "pinv floor must be positive");
    singular.iter().map(|&s| if s >= floor { 1.0 / s } else { 0.0 }).collect()
}

/// M×M matrix with i.i.d. complex Gaussian entries of variance `sigma_h2`
/// (sigma_h2/2 per real component).
pub fn sample_channel<R: Rng>(rng: &mut R, m: usize, sigma_h2: f64) -> CMatrix {
    assert!(sigma_h2 > 0.0);
    let comp_std = (sigma_h2 / 2.0).sqrt();
    let mut h = CMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let re = gaussian(rng) * comp_std;
            let im = gaussian(rng) * comp_std;
            h[(i, j)] = Complex64::new(re, im);
        }
    }
    h
}
