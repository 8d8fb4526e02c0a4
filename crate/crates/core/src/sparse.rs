//! Joint-sparse recovery: OMP, SW-OMP and ADMM for the l2/l1 problem
//! `min ||X - A H||_F^2 + w1 ||H||_{2,1}`.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::measurement::MeasurementDataset;
use crate::tensor::{fro_sqr, l21_norm, row_block_soft_threshold, row_norms, solve_hpd, CMatrix, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCodeResult {
    #[serde(with = "crate::io::cmatrix_serde")]
    pub coefficients: CMatrix,
    /// Sorted row indices with nonzero coefficients.
    pub support: Vec<usize>,
    pub residual_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl SparseCodeResult {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            coefficients: CMatrix::zeros(rows, cols),
            support: Vec::new(),
            residual_trace: Vec::new(),
            objective_trace: Vec::new(),
            iterations: 0,
            converged: true,
        }
    }
}

/// Rows whose norm exceeds `1e-8` of the largest row norm.
pub fn support_of(h: &CMatrix) -> Vec<usize> {
    let norms = row_norms(h);
    let max = norms.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Vec::new();
    }
    (0..norms.len()).filter(|&i| norms[i] > 1e-8 * max).collect()
}

fn restrict(a: &CMatrix, support: &[usize]) -> CMatrix {
    CMatrix::from_fn(a.nrows(), support.len(), |i, j| a[(i, support[j])])
}

fn least_squares(a_s: &CMatrix, y: &CMatrix) -> CMatrix {
    let ah = a_s.adjoint();
    solve_hpd(&(&ah * a_s), &(ah * y))
}

fn greedy(y: &CMatrix, a: &CMatrix, k_max: usize, tol: f64) -> Result<SparseCodeResult> {
    if y.nrows() != a.nrows() {
        return dim_err(format!("data has {} rows, operator has {}", y.nrows(), a.nrows()));
    }
    if a.nrows() == 0 {
        return arg_err("operator has no rows");
    }
    if k_max > a.nrows() {
        return arg_err(format!("k_max {k_max} exceeds the {} measurements", a.nrows()));
    }
    let ah = a.adjoint();
    let mut support: Vec<usize> = Vec::new();
    let mut coef = CMatrix::zeros(0, y.ncols());
    let mut residual = y.clone();
    let mut trace = vec![residual.norm()];
    while support.len() < k_max && residual.norm() > tol {
        let corr = &ah * &residual;
        let mut best = None;
        let mut best_score = -1.0;
        for k in 0..a.ncols() {
            if support.contains(&k) {
                continue;
            }
            let score: f64 = corr.row(k).iter().map(|z| z.norm()).sum();
            if score > best_score {
                best_score = score;
                best = Some(k);
            }
        }
        let Some(k) = best else { break };
        if best_score <= 0.0 {
            break;
        }
        support.push(k);
        let a_s = restrict(a, &support);
        coef = least_squares(&a_s, y);
        residual = y - a_s * &coef;
        trace.push(residual.norm());
    }
    let mut full = CMatrix::zeros(a.ncols(), y.ncols());
    for (j, &k) in support.iter().enumerate() {
        full.row_mut(k).copy_from(&coef.row(j));
    }
    let iterations = support.len();
    let mut sorted = support;
    sorted.sort_unstable();
    Ok(SparseCodeResult {
        coefficients: full,
        support: sorted,
        objective_trace: trace.iter().map(|r| r * r).collect(),
        residual_trace: trace,
        iterations,
        converged: true,
    })
}

/// Orthogonal matching pursuit on a single measurement vector.
pub fn omp(y: &CMatrix, a: &CMatrix, k_max: usize, tol: f64) -> Result<SparseCodeResult> {
    if y.ncols() != 1 {
        return dim_err("omp takes a single column; use omp_columns");
    }
    greedy(y, a, k_max, tol)
}

/// OMP run independently on every column; `tol` applies per column.
pub fn omp_columns(y: &CMatrix, a: &CMatrix, k_max: usize, tol: f64) -> Result<SparseCodeResult> {
    let mut out = SparseCodeResult::zeros(a.ncols(), y.ncols());
    let mut iterations = 0;
    for c in 0..y.ncols() {
        let r = greedy(&y.columns(c, 1).into_owned(), a, k_max, tol)?;
        out.coefficients.set_column(c, &r.coefficients.column(0));
        iterations += r.iterations;
    }
    out.support = support_of(&out.coefficients);
    let res = y - a * &out.coefficients;
    out.residual_trace = vec![res.norm()];
    out.objective_trace = vec![fro_sqr(&res)];
    out.iterations = iterations;
    Ok(out)
}

/// Simultaneous OMP: atoms are scored by `sum_c |a_k^* r_c|` and all
/// columns share one support. `tol` bounds the Frobenius norm of the residual.
pub fn swomp(y: &CMatrix, a: &CMatrix, k_max: usize, tol: f64) -> Result<SparseCodeResult> {
    greedy(y, a, k_max, tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmParams {
    pub w1: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_rho() -> f64 {
    1.0
}
fn default_max_iter() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-6
}

impl AdmmParams {
    pub fn new(w1: f64) -> Self {
        Self {
            w1,
            rho: default_rho(),
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0) || !self.w1.is_finite() {
            return arg_err(format!("w1 = {} must be finite and non-negative", self.w1));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return arg_err(format!("rho = {} must be positive", self.rho));
        }
        if !(self.tol > 0.0) {
            return arg_err("tolerance must be positive");
        }
        Ok(())
    }
}

/// Row-block soft threshold applied separately to every `group` consecutive columns.
pub fn grouped_soft_threshold(h: &CMatrix, kappa: f64, group: usize) -> Result<CMatrix> {
    if group == h.ncols() {
        return row_block_soft_threshold(h, kappa);
    }
    if group == 0 || h.ncols() % group != 0 {
        return dim_err(format!("{} columns do not split into groups of {group}", h.ncols()));
    }
    let mut out = h.clone();
    for g in 0..h.ncols() / group {
        let block = row_block_soft_threshold(&h.columns(g * group, group).into_owned(), kappa)?;
        out.columns_mut(g * group, group).copy_from(&block);
    }
    Ok(out)
}

/// Sum over column groups of the l2/l1 norm of each group.
pub fn grouped_l21(h: &CMatrix, group: usize) -> f64 {
    if group == 0 || group >= h.ncols() {
        return l21_norm(h);
    }
    (0..h.ncols() / group)
        .map(|g| l21_norm(&h.columns(g * group, group).into_owned()))
        .sum()
}

/// `||X - A H||_F^2 + w1 ||H||_{2,1}`.
pub fn l21_objective(x: &CMatrix, a: &CMatrix, h: &CMatrix, w1: f64) -> f64 {
    fro_sqr(&(x - a * h)) + w1 * l21_norm(h)
}

/// ADMM solver with the operator factorization cached, for repeated solves
/// against one operator.
pub struct AdmmSolver {
    a: CMatrix,
    ah: CMatrix,
    chol: Option<Cholesky<C64, nalgebra::Dyn>>,
    system: CMatrix,
    rho: f64,
}

/// Full ADMM state, exposed for warm starts and inspection.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub h: CMatrix,
    pub z: CMatrix,
    pub u: CMatrix,
}

impl AdmmSolver {
    pub fn new(a: &CMatrix, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return arg_err(format!("rho = {rho} must be positive"));
        }
        let ah = a.adjoint();
        let n = a.ncols();
        let system = (&ah * a) * C64::new(2.0, 0.0) + CMatrix::identity(n, n) * C64::new(rho, 0.0);
        let chol = Cholesky::new(system.clone());
        Ok(Self {
            a: a.clone(),
            ah,
            chol,
            system,
            rho,
        })
    }

    pub fn operator(&self) -> &CMatrix {
        &self.a
    }

    fn solve_system(&self, rhs: &CMatrix) -> CMatrix {
        match &self.chol {
            Some(c) => c.solve(rhs),
            None => solve_hpd(&self.system, rhs),
        }
    }

    /// Augmented Lagrangian (scaled form) at a state.
    pub fn augmented_lagrangian(&self, x: &CMatrix, s: &AdmmState, w1: f64) -> f64 {
        let r = &s.h - &s.z;
        fro_sqr(&(x - &self.a * &s.h)) + w1 * l21_norm(&s.z) + self.rho / 2.0 * (fro_sqr(&(&r + &s.u)) - fro_sqr(&s.u))
    }

    pub fn step(&self, ahx2: &CMatrix, s: &mut AdmmState, w1: f64, group: usize) -> Result<f64> {
        let rhs = ahx2 + (&s.z - &s.u) * C64::new(self.rho, 0.0);
        s.h = self.solve_system(&rhs);
        let z_new = grouped_soft_threshold(&(&s.h + &s.u), w1 / self.rho, group)?;
        let dz = (&z_new - &s.z).norm();
        s.z = z_new;
        s.u += &s.h - &s.z;
        Ok(dz)
    }

    pub fn solve(&self, x: &CMatrix, params: &AdmmParams, warm: Option<&CMatrix>) -> Result<SparseCodeResult> {
        self.solve_traced(x, params, warm, x.ncols(), |_, _| {})
    }

    /// Solves independent problems side by side: every `group` consecutive
    /// columns of `x` share one row-sparsity pattern. Residual tolerances
    /// scale with the square root of the group count.
    pub fn solve_grouped(
        &self,
        x: &CMatrix,
        params: &AdmmParams,
        warm: Option<&CMatrix>,
        group: usize,
    ) -> Result<SparseCodeResult> {
        self.solve_traced(x, params, warm, group, |_, _| {})
    }

    /// As [`solve_grouped`](Self::solve_grouped), calling
    /// `observe(iteration, state)` after each step.
    pub fn solve_traced(
        &self,
        x: &CMatrix,
        params: &AdmmParams,
        warm: Option<&CMatrix>,
        group: usize,
        mut observe: impl FnMut(usize, &AdmmState),
    ) -> Result<SparseCodeResult> {
        params.validate()?;
        if group == 0 || x.ncols() % group != 0 {
            return dim_err(format!("{} columns do not split into groups of {group}", x.ncols()));
        }
        let tol = params.tol * ((x.ncols() / group) as f64).sqrt();
        if (params.rho - self.rho).abs() > 0.0 {
            return arg_err("solver was factored for a different rho");
        }
        if x.nrows() != self.a.nrows() {
            return dim_err(format!("data has {} rows, operator has {}", x.nrows(), self.a.nrows()));
        }
        let n = self.a.ncols();
        let init = match warm {
            Some(w) if w.shape() == (n, x.ncols()) => w.clone(),
            Some(w) => return dim_err(format!("warm start has shape {:?}", w.shape())),
            None => CMatrix::zeros(n, x.ncols()),
        };
        let ahx2 = (&self.ah * x) * C64::new(2.0, 0.0);
        let mut s = AdmmState {
            h: init.clone(),
            z: init,
            u: CMatrix::zeros(n, x.ncols()),
        };
        let mut residual_trace = Vec::new();
        let mut objective_trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..params.max_iter {
            let dz = self.step(&ahx2, &mut s, params.w1, group)?;
            iterations = it + 1;
            observe(it, &s);
            let primal = (&s.h - &s.z).norm();
            let dual = self.rho * dz;
            residual_trace.push(primal.max(dual));
            objective_trace.push(fro_sqr(&(x - &self.a * &s.z)) + params.w1 * grouped_l21(&s.z, group));
            if primal <= tol && dual <= tol {
                converged = true;
                break;
            }
        }
        if !converged {
            log::debug!("ADMM stopped at max_iter={} without meeting tol={}", params.max_iter, params.tol);
        }
        Ok(SparseCodeResult {
            support: support_of(&s.z),
            coefficients: s.z,
            residual_trace,
            objective_trace,
            iterations,
            converged,
        })
    }
}

/// One-shot ADMM solve of the l2/l1 problem.
pub fn admm_l21(x: &CMatrix, a: &CMatrix, params: &AdmmParams) -> Result<SparseCodeResult> {
    params.validate()?;
    AdmmSolver::new(a, params.rho)?.solve(x, params, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solver {
    Omp {
        k_max: usize,
        /// Residual-norm stop; `None` uses the expected noise norm.
        #[serde(default)]
        tol: Option<f64>,
    },
    Swomp {
        k_max: usize,
        #[serde(default)]
        tol: Option<f64>,
    },
    Admm(AdmmParams),
}

#[derive(Debug, Clone)]
pub struct ChannelEstimate {
    /// Per location, per subcarrier `Nr x Nt` estimates.
    pub channels: Vec<Vec<CMatrix>>,
    pub codes: Vec<SparseCodeResult>,
}

/// Sparse-codes every location of `dataset` in dictionary `psi`
/// (`Nr*Nt x K`) and maps the codes back to channel matrices.
pub fn estimate_channel(dataset: &MeasurementDataset, psi: &CMatrix, solver: &Solver) -> Result<ChannelEstimate> {
    if dataset.phi.nrows() == 0 {
        return arg_err("dataset has no measurements");
    }
    if psi.nrows() != dataset.nr * dataset.nt {
        return dim_err(format!(
            "dictionary has {} rows, channel has {} entries",
            psi.nrows(),
            dataset.nr * dataset.nt
        ));
    }
    let white = dataset.whitened()?;
    let a = &white.phi * psi;
    let noise_var = dataset.effective_noise_var();
    let admm = match solver {
        Solver::Admm(p) => {
            p.validate()?;
            Some(AdmmSolver::new(&a, p.rho)?)
        }
        _ => None,
    };
    let mut channels = Vec::with_capacity(white.y.len());
    let mut codes = Vec::with_capacity(white.y.len());
    for y in &white.y {
        let auto_tol = (noise_var * y.len() as f64).sqrt();
        let code = match solver {
            Solver::Omp { k_max, tol } => {
                let per_col = tol.unwrap_or((noise_var * y.nrows() as f64).sqrt());
                omp_columns(y, &a, *k_max, per_col)
            }
            Solver::Swomp { k_max, tol } => swomp(y, &a, *k_max, tol.unwrap_or(auto_tol)),
            Solver::Admm(p) => admm.as_ref().expect("factored above").solve(y, p, None),
        }
        .map_err(|e| Error::Numerical(format!("sparse coding failed: {e}")))?;
        let h = psi * &code.coefficients;
        channels.push(
            (0..h.ncols())
                .map(|c| CMatrix::from_column_slice(dataset.nr, dataset.nt, h.column(c).as_slice()))
                .collect(),
        );
        codes.push(code);
    }
    Ok(ChannelEstimate { channels, codes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{pinv, random_cn, rel_diff, ONE, ZERO};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_cols(rows: usize, cols: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = random_cn(rows, cols, &mut rng);
        crate::tensor::normalize_columns(&mut a);
        a
    }

    /// Best LS fit over all supports of size `k`; ties go to the first subset found.
    fn exhaustive(y: &CMatrix, a: &CMatrix, k: usize) -> Vec<usize> {
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                rec(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        let mut subsets = Vec::new();
        rec(0, a.ncols(), k, &mut Vec::new(), &mut subsets);
        let mut best = (f64::INFINITY, Vec::new());
        for s in subsets {
            let a_s = restrict(a, &s);
            let r = (y - &a_s * (pinv(&a_s) * y)).norm();
            if r < best.0 {
                best = (r, s);
            }
        }
        best.1
    }

    #[test]
    fn omp_one_sparse() {
        let a = CMatrix::identity(4, 4);
        let mut y = CMatrix::zeros(4, 1);
        y[2] = C64::new(3.0, 0.0);
        let r = omp(&y, &a, 4, 1e-12).unwrap();
        assert_eq!(r.support, vec![2]);
        assert!((r.coefficients[(2, 0)] - C64::new(3.0, 0.0)).norm() < 1e-14);
        assert_eq!(r.iterations, 1);

        let a = unit_cols(8, 16, 1);
        let y = a.columns(5, 1) * C64::new(3.0, 0.0);
        let r = omp(&y, &a, 8, 1e-10).unwrap();
        assert_eq!(r.support, vec![5]);
        assert!((r.coefficients[(5, 0)] - C64::new(3.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn omp_two_sparse_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..10 {
            let a = unit_cols(8, 16, 100 + seed);
            let mut h = CMatrix::zeros(16, 1);
            h[3] = crate::tensor::sample_cn(&mut rng, 1.0) + ONE;
            h[11] = crate::tensor::sample_cn(&mut rng, 1.0) - ONE;
            let y = &a * &h;
            let r = omp(&y, &a, 2, 0.0).unwrap();
            assert_eq!(r.support, exhaustive(&y, &a, 2));
        }
    }

    #[test]
    fn zero_data_and_argument_errors() {
        let a = unit_cols(6, 10, 3);
        let y = CMatrix::zeros(6, 1);
        assert!(omp(&y, &a, 3, 0.0).unwrap().support.is_empty());
        assert!(swomp(&CMatrix::zeros(6, 4), &a, 3, 0.0).unwrap().support.is_empty());
        assert!(omp(&y, &a, 7, 0.0).is_err());
        assert!(omp(&CMatrix::zeros(5, 1), &a, 3, 0.0).is_err());
    }

    #[test]
    fn swomp_single_column_is_omp() {
        let a = unit_cols(10, 20, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_cn(10, 1, &mut rng);
        assert_eq!(swomp(&y, &a, 5, 1e-9).unwrap(), omp(&y, &a, 5, 1e-9).unwrap());
    }

    #[test]
    fn swomp_joint_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = unit_cols(6, 12, 5);
        let mut h = CMatrix::zeros(12, 6);
        for c in 0..6 {
            h[(2, c)] = crate::tensor::sample_cn(&mut rng, 1.0);
            h[(9, c)] = crate::tensor::sample_cn(&mut rng, 1.0);
        }
        let y = &a * &h;
        let r = swomp(&y, &a, 2, 0.0).unwrap();
        assert_eq!(r.support, vec![2, 9]);
        assert_eq!(r.support, exhaustive(&y, &a, 2));
        assert!(rel_diff(&r.coefficients, &h) < 1e-10);
        for c in 0..6 {
            for k in 0..12 {
                if k != 2 && k != 9 {
                    assert_eq!(r.coefficients[(k, c)], ZERO);
                }
            }
        }
    }

    #[test]
    fn admm_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_cn(10, 4, &mut rng);
        let x = random_cn(10, 3, &mut rng);
        let p = AdmmParams { tol: 1e-10, max_iter: 5000, ..AdmmParams::new(0.0) };
        let r = admm_l21(&x, &a, &p).unwrap();
        assert!(r.converged);
        assert!(rel_diff(&r.coefficients, &(pinv(&a) * &x)) < 1e-8);

        let x1 = random_cn(5, 1, &mut rng);
        let id = CMatrix::identity(5, 5);
        let p = AdmmParams { tol: 1e-12, max_iter: 5000, ..AdmmParams::new(0.8) };
        let r = admm_l21(&x1, &id, &p).unwrap();
        let prox = row_block_soft_threshold(&x1, 0.4).unwrap();
        assert!(rel_diff(&r.coefficients, &prox) < 1e-9);

        let big = AdmmParams::new(1e6);
        let r = admm_l21(&x, &a, &big).unwrap();
        assert!(r.coefficients.norm() < 1e-12);
        assert!(r.support.is_empty());

        assert!(admm_l21(&x, &a, &AdmmParams::new(-1.0)).is_err());
        assert!(admm_l21(&x, &a, &AdmmParams { rho: 0.0, ..AdmmParams::new(1.0) }).is_err());
    }

    #[test]
    fn admm_flags_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_cn(10, 20, &mut rng);
        let x = random_cn(10, 2, &mut rng);
        let p = AdmmParams { max_iter: 2, ..AdmmParams::new(0.5) };
        let r = admm_l21(&x, &a, &p).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
    }

    #[test]
    fn admm_exit_residuals_and_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_cn(12, 20, &mut rng);
        let x = random_cn(12, 3, &mut rng);
        let p = AdmmParams { tol: 1e-8, max_iter: 20000, ..AdmmParams::new(2.0) };
        let r = admm_l21(&x, &a, &p).unwrap();
        assert!(r.converged);
        assert!(*r.residual_trace.last().unwrap() <= 1e-8);

        // proximal-gradient reference
        let l = 2.0 * (a.adjoint() * &a).norm();
        let step = 1.0 / l;
        let mut h = CMatrix::zeros(20, 3);
        for _ in 0..200_000 {
            let grad = a.adjoint() * (&a * &h - &x) * C64::new(2.0, 0.0);
            h = row_block_soft_threshold(&(&h - grad * C64::new(step, 0.0)), p.w1 * step).unwrap();
        }
        let f_ref = l21_objective(&x, &a, &h, p.w1);
        let f = l21_objective(&x, &a, &r.coefficients, p.w1);
        assert!((f - f_ref).abs() < 1e-6 * f_ref.max(1.0), "{f} vs {f_ref}");
    }

    #[test]
    fn grouped_matches_per_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_cn(10, 14, &mut rng);
        let x = random_cn(10, 12, &mut rng);
        let p = AdmmParams { tol: 1e-10, max_iter: 50_000, ..AdmmParams::new(1.5) };
        let solver = AdmmSolver::new(&a, p.rho).unwrap();
        let joint = solver.solve_grouped(&x, &p, None, 4).unwrap();
        assert!(joint.converged);
        for g in 0..3 {
            let part = solver.solve(&x.columns(4 * g, 4).into_owned(), &p, None).unwrap();
            let mine = joint.coefficients.columns(4 * g, 4).into_owned();
            assert!(rel_diff(&mine, &part.coefficients) < 1e-6);
        }
        assert!(solver.solve_grouped(&x, &p, None, 5).is_err());
        let t = grouped_soft_threshold(&x, 0.0, 3).unwrap();
        assert_eq!(t, x);
        let sum: f64 = (0..4).map(|g| l21_norm(&x.columns(3 * g, 3).into_owned())).sum();
        assert!((grouped_l21(&x, 3) - sum).abs() < 1e-12);
    }

    #[test]
    fn estimate_rejects_bad_dictionary() {
        use crate::measurement::{TrainingConfig, TrainingSetup};
        let cfg = TrainingConfig {
            frames: 4,
            n_rep: 1,
            lt: 1,
            lr: 1,
            phase_bits: 2,
            snr_db: 10.0,
            power: 1.0,
            seed: 1,
        };
        let setup = TrainingSetup::new(&cfg, 2, 2).unwrap();
        let ds = MeasurementDataset {
            config: cfg,
            nr: 2,
            nt: 2,
            phi: setup.phi.clone(),
            grams: setup.noise_grams(),
            y: vec![CMatrix::zeros(4, 2)],
            truth: Vec::new(),
        };
        let solver = Solver::Swomp { k_max: 1, tol: None };
        assert!(estimate_channel(&ds, &CMatrix::identity(3, 3), &solver).is_err());
        let ok = estimate_channel(&ds, &CMatrix::identity(4, 4), &solver).unwrap();
        assert_eq!(ok.channels[0].len(), 2);
        let mut empty = ds.clone();
        empty.phi = CMatrix::zeros(0, 4);
        assert!(estimate_channel(&empty, &CMatrix::identity(4, 4), &solver).is_err());
    }
}
