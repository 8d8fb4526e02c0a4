//! Dense complex linear and multilinear algebra kernels.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>` and therefore column-major, so
//! [`vec`] is plain column stacking. Third-order tensors use the mode-q
//! unfolding in which the remaining indices are laid out along the columns
//! with the lowest remaining mode varying fastest (reverse cyclical order).
//! Under that convention
//!
//! ```text
//! [A x1 B1 x2 B2 x3 B3]_(q) = Bq [A]_(q) (B_{Q} ⊗ ... ⊗ B_{q+1} ⊗ B_{q-1} ⊗ ... ⊗ B_1)^T
//! ```
//!
//! and every reshaping elsewhere in the crate goes through this module.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, dim_err, Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const J: C64 = C64::new(0.0, 1.0);

/// Relative singular-value cutoff used by [`pinv`], scaled by `max(rows, cols)`.
pub const PINV_RTOL: f64 = 1e-12;

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    let rows = a.nrows().checked_mul(b.nrows());
    let cols = a.ncols().checked_mul(b.ncols());
    let (Some(rows), Some(cols)) = (rows, cols) else {
        return dim_err("kronecker product dimensions overflow usize");
    };
    if rows.checked_mul(cols).is_none() {
        return dim_err("kronecker product entry count overflows usize");
    }
    let (br, bc) = (b.nrows(), b.ncols());
    let mut out = CMatrix::zeros(rows, cols);
    for ja in 0..a.ncols() {
        for ia in 0..a.nrows() {
            let s = a[(ia, ja)];
            if s == ZERO {
                continue;
            }
            for jb in 0..bc {
                for ib in 0..br {
                    out[(ia * br + ib, ja * bc + jb)] = s * b[(ib, jb)];
                }
            }
        }
    }
    Ok(out)
}

/// Column-wise Kronecker (Khatri-Rao) product.
pub fn khatri_rao(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.ncols() != b.ncols() {
        return dim_err(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        ));
    }
    let (ar, br) = (a.nrows(), b.nrows());
    let mut out = CMatrix::zeros(ar * br, a.ncols());
    for j in 0..a.ncols() {
        for ia in 0..ar {
            let s = a[(ia, j)];
            for ib in 0..br {
                out[(ia * br + ib, j)] = s * b[(ib, j)];
            }
        }
    }
    Ok(out)
}

/// Column-major vectorization into an `(rows*cols) x 1` matrix.
pub fn vec(a: &CMatrix) -> CMatrix {
    CMatrix::from_column_slice(a.len(), 1, a.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[C64], rows: usize, cols: usize) -> Result<CMatrix> {
    if v.len() != rows * cols {
        return dim_err(format!(
            "cannot reshape {} entries into {rows}x{cols}",
            v.len()
        ));
    }
    Ok(CMatrix::from_column_slice(rows, cols, v))
}

/// Checks `vec(a b c) == (c^T ⊗ a) vec(b)` and returns the relative error.
pub fn vec_identity_error(a: &CMatrix, b: &CMatrix, c: &CMatrix) -> Result<f64> {
    if a.ncols() != b.nrows() || b.ncols() != c.nrows() {
        return dim_err("vec identity operands are not conformable");
    }
    let lhs = vec(&(a * b * c));
    let rhs = kron(&c.transpose(), a)? * vec(b);
    Ok(rel_diff(&lhs, &rhs))
}

/// Dense third-order tensor stored with the first index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor3 {
    dims: [usize; 3],
    data: Vec<C64>,
}

fn check_mode(mode: usize) -> Result<usize> {
    if (1..=3).contains(&mode) {
        Ok(mode - 1)
    } else {
        arg_err(format!("tensor mode must be 1, 2 or 3, got {mode}"))
    }
}

impl CTensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![ZERO; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> C64) -> Self {
        let mut t = Self::zeros(dims);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let idx = t.index(i, j, k);
                    t.data[idx] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<C64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return dim_err(format!(
                "tensor {:?} needs {} entries, got {}",
                dims,
                dims[0] * dims[1] * dims[2],
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor whose k-th frontal slice is `slices[k]`.
    pub fn from_frontal_slices(slices: &[CMatrix]) -> Result<Self> {
        let Some(first) = slices.first() else {
            return dim_err("at least one frontal slice is required");
        };
        let (r, c) = first.shape();
        let mut data = Vec::with_capacity(r * c * slices.len());
        for s in slices {
            if s.shape() != (r, c) {
                return dim_err("frontal slices must share a shape");
            }
            data.extend_from_slice(s.as_slice());
        }
        Self::from_vec([r, c, slices.len()], data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> C64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: C64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn frontal_slice(&self, k: usize) -> CMatrix {
        let n = self.dims[0] * self.dims[1];
        CMatrix::from_column_slice(self.dims[0], self.dims[1], &self.data[k * n..(k + 1) * n])
    }

    /// Sub-tensor made of frontal slices `start..start+len`.
    pub fn frontal_range(&self, start: usize, len: usize) -> CTensor3 {
        let n = self.dims[0] * self.dims[1];
        CTensor3 {
            dims: [self.dims[0], self.dims[1], len],
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Mode-q unfolding, `mode` in 1..=3.
    pub fn unfold(&self, mode: usize) -> Result<CMatrix> {
        let q = check_mode(mode)?;
        let [d1, d2, d3] = self.dims;
        Ok(match q {
            0 => {
                // column index j + d2*k; data layout already matches
                CMatrix::from_column_slice(d1, d2 * d3, &self.data)
            }
            1 => CMatrix::from_fn(d2, d1 * d3, |j, col| {
                let (i, k) = (col % d1, col / d1);
                self.get(i, j, k)
            }),
            _ => CMatrix::from_fn(d3, d1 * d2, |k, col| self.data[col + d1 * d2 * k]),
        })
    }

    /// Inverse of [`CTensor3::unfold`].
    pub fn refold(m: &CMatrix, mode: usize, dims: [usize; 3]) -> Result<Self> {
        let q = check_mode(mode)?;
        let [d1, d2, d3] = dims;
        let expected = match q {
            0 => (d1, d2 * d3),
            1 => (d2, d1 * d3),
            _ => (d3, d1 * d2),
        };
        if m.shape() != expected {
            return dim_err(format!(
                "mode-{mode} unfolding of {dims:?} must be {expected:?}, got {:?}",
                m.shape()
            ));
        }
        Ok(match q {
            0 => Self {
                dims,
                data: m.as_slice().to_vec(),
            },
            1 => Self::from_fn(dims, |i, j, k| m[(j, i + d1 * k)]),
            _ => Self::from_fn(dims, |i, j, k| m[(k, i + d1 * j)]),
        })
    }

    /// `self ×_mode m`, defined by `[t ×q m]_(q) = m [t]_(q)`.
    pub fn mode_product(&self, m: &CMatrix, mode: usize) -> Result<Self> {
        let q = check_mode(mode)?;
        if m.ncols() != self.dims[q] {
            return dim_err(format!(
                "mode-{mode} product needs {} matrix columns, got {}",
                self.dims[q],
                m.ncols()
            ));
        }
        let mut dims = self.dims;
        dims[q] = m.nrows();
        let unfolded = m * self.unfold(mode)?;
        Self::refold(&unfolded, mode, dims)
    }
}

/// Thin SVD `a = u diag(s) v_t` with `s` in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    pub s: Vec<f64>,
    pub v_t: CMatrix,
}

/// Thin SVD computed by `faer`. nalgebra's complex SVD returns wrong
/// factors for a sizable fraction of rank-deficient inputs, so every
/// decomposition in the crate goes through here.
pub fn svd(a: &CMatrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd {
            u: CMatrix::zeros(m, 0),
            s: Vec::new(),
            v_t: CMatrix::zeros(0, n),
        });
    }
    let f = faer::Mat::<C64>::from_fn(m, n, |i, j| a[(i, j)]);
    let d = f
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, sv, v) = (d.U(), d.S().column_vector(), d.V());
    let vals: Vec<f64> = (0..k).map(|i| sv[i].re).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| vals[y].total_cmp(&vals[x]).then(x.cmp(&y)));
    Ok(Svd {
        u: CMatrix::from_fn(m, k, |i, j| u[(i, order[j])]),
        s: order.iter().map(|&i| vals[i]).collect(),
        v_t: CMatrix::from_fn(k, n, |i, j| v[(j, order[i])].conj()),
    })
}

/// Singular values in descending order.
pub fn singular_values(a: &CMatrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

/// Moore-Penrose pseudo-inverse with the default truncation rule
/// `sigma < PINV_RTOL * max(rows, cols) * sigma_max`.
pub fn pinv(a: &CMatrix) -> CMatrix {
    pinv_with_tol(a, PINV_RTOL * a.nrows().max(a.ncols()).max(1) as f64)
}

/// Pseudo-inverse discarding singular values below `rtol * sigma_max`.
pub fn pinv_with_tol(a: &CMatrix, rtol: f64) -> CMatrix {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return CMatrix::zeros(n, m);
    }
    let Svd { u, s, v_t } = match svd(a) {
        Ok(d) => d,
        Err(e) => {
            log::error!("{e}; falling back to nalgebra");
            let d = a.clone().svd(true, true);
            Svd {
                u: d.u.expect("u requested"),
                s: d.singular_values.iter().copied().collect(),
                v_t: d.v_t.expect("v_t requested"),
            }
        }
    };
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return CMatrix::zeros(n, m);
    }
    let cutoff = rtol * smax;
    let mut out = CMatrix::zeros(n, m);
    for (idx, &sv) in s.iter().enumerate() {
        if sv <= cutoff {
            continue;
        }
        let inv = 1.0 / sv;
        let vcol = v_t.row(idx).adjoint();
        let ucol = u.column(idx);
        for c in 0..m {
            let w = ucol[c].conj() * inv;
            if w == ZERO {
                continue;
            }
            for r in 0..n {
                out[(r, c)] += vcol[r] * w;
            }
        }
    }
    out
}

/// Numerical rank under the same truncation rule as [`pinv`].
pub fn rank(a: &CMatrix) -> usize {
    if a.is_empty() {
        return 0;
    }
    let s: Vec<f64> = match singular_values(a) {
        Ok(s) => s,
        Err(_) => a.clone().singular_values().iter().copied().collect(),
    };
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = PINV_RTOL * a.nrows().max(a.ncols()) as f64 * smax;
    s.iter().filter(|&&v| v > cutoff && v > 0.0).count()
}

/// Scales row r by `max(0, 1 - kappa/||r||)`; the prox of `kappa * ||.||_{2,1}`.
pub fn row_block_soft_threshold(h: &CMatrix, kappa: f64) -> Result<CMatrix> {
    if !(kappa >= 0.0) {
        return arg_err(format!("threshold must be nonnegative, got {kappa}"));
    }
    let mut out = h.clone();
    for (r, norm) in row_norms(h).into_iter().enumerate() {
        let scale = if norm > kappa { 1.0 - kappa / norm } else { 0.0 };
        if scale != 1.0 {
            out.row_mut(r).scale_mut(scale);
        }
    }
    Ok(out)
}

pub fn row_norms(h: &CMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; h.nrows()];
    for j in 0..h.ncols() {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += h[(i, j)].norm_sqr();
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

/// Sum of row l2 norms.
pub fn l21_norm(h: &CMatrix) -> f64 {
    row_norms(h).into_iter().sum()
}

pub fn fro_sqr(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// `||a - b||_F / max(||b||_F, tiny)`.
pub fn rel_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    let diff = fro_sqr(&(a - b)).sqrt();
    diff / fro_sqr(b).sqrt().max(f64::MIN_POSITIVE)
}

/// Normalizes every nonzero column to unit l2 norm, returning the removed norms.
pub fn normalize_columns(a: &mut CMatrix) -> Vec<f64> {
    let mut norms = Vec::with_capacity(a.ncols());
    for mut col in a.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col.unscale_mut(n);
        }
        norms.push(n);
    }
    norms
}

/// Largest absolute inner product between distinct unit-normalized columns.
pub fn mutual_coherence(a: &CMatrix) -> f64 {
    let mut d = a.clone();
    normalize_columns(&mut d);
    let gram = d.adjoint() * &d;
    let mut worst: f64 = 0.0;
    for j in 0..gram.ncols() {
        for i in 0..j {
            worst = worst.max(gram[(i, j)].norm());
        }
    }
    worst
}

/// Matrix with i.i.d. CN(0, 1) entries.
pub fn random_cn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| sample_cn(rng, 1.0))
}

/// One CN(0, var) draw.
pub fn sample_cn<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

pub fn diag(entries: &[C64]) -> CMatrix {
    CMatrix::from_diagonal(&DVector::from_column_slice(entries))
}

/// Hermitian inverse square root `(a)^{-1/2}` of a PSD matrix. Eigenvalues
/// below `rtol * lambda_max` are dropped; the flag reports whether that
/// happened.
pub fn hermitian_inv_sqrt(a: &CMatrix, rtol: f64) -> Result<(CMatrix, bool)> {
    if !a.is_square() {
        return dim_err("inverse square root needs a square matrix");
    }
    let n = a.nrows();
    let herm = (a + a.adjoint()).unscale(2.0);
    let eig = herm.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lmax > 0.0) {
        return Err(Error::Numerical("matrix has no positive eigenvalue".into()));
    }
    let mut truncated = false;
    let mut out = CMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= rtol * lmax {
            truncated = true;
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out += (v * v.adjoint()).scale(1.0 / lam.sqrt());
    }
    Ok((out, truncated))
}

/// Solves `a x = b` for Hermitian positive definite `a`, falling back to the
/// pseudo-inverse when Cholesky fails.
pub fn solve_hpd(a: &CMatrix, b: &CMatrix) -> CMatrix {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => pinv(a) * b,
    }
}

/// Conjugate (not transposed).
pub fn conj(a: &CMatrix) -> CMatrix {
    a.map(|z| z.conj())
}
