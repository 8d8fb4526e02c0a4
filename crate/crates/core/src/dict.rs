//! Combined (CoDL) and separable (SeDL) dictionary learning.
//!
//! Both learners minimize
//! `||X - Phi Psi H||_F^2 + w1 * pen(H) + w2 * ||Y - X||_F^2`
//! by alternating sparse coding, a dictionary update and a closed-form
//! denoising step. SeDL works on the channel-domain data `Phi^+ Y` with
//! `Psi = conj(D_T) kron D_R`. `pen` is the per-location l2/l1 norm for the
//! ADMM coder and the number of nonzero coefficients for SW-OMP.
//!
//! Every sub-step is accepted only if it does not increase the objective, so
//! objective traces are monotone by construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::io;
use crate::measurement::{stack_locations, MeasurementDataset};
use crate::sparse::{grouped_l21, swomp, AdmmParams, AdmmSolver};
use crate::tensor::{conj, fro_sqr, kron, normalize_columns, pinv, random_cn, rank, svd, CMatrix, CTensor3, C64, ONE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Dictionary {
    Combined {
        #[serde(with = "io::cmatrix_serde")]
        psi: CMatrix,
    },
    Separable {
        #[serde(with = "io::cmatrix_serde")]
        dr: CMatrix,
        #[serde(with = "io::cmatrix_serde")]
        dt: CMatrix,
    },
}

impl Dictionary {
    /// Combined `Nr*Nt x K` matrix; `conj(D_T) kron D_R` when separable.
    pub fn psi(&self) -> Result<CMatrix> {
        match self {
            Dictionary::Combined { psi } => Ok(psi.clone()),
            Dictionary::Separable { dr, dt } => kron(&conj(dt), dr),
        }
    }

    pub fn n_atoms(&self) -> usize {
        match self {
            Dictionary::Combined { psi } => psi.ncols(),
            Dictionary::Separable { dr, dt } => dr.ncols() * dt.ncols(),
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, Dictionary::Separable { .. })
    }

    /// Largest deviation of an atom norm from one.
    pub fn atom_norm_error(&self) -> f64 {
        let err = |m: &CMatrix| m.column_iter().map(|c| (c.norm() - 1.0).abs()).fold(0.0, f64::max);
        match self {
            Dictionary::Combined { psi } => err(psi),
            Dictionary::Separable { dr, dt } => err(dr).max(err(dt)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (kind, files): (&str, Vec<(&str, &CMatrix)>) = match self {
            Dictionary::Combined { psi } => ("combined", vec![("psi.csv", psi)]),
            Dictionary::Separable { dr, dt } => ("separable", vec![("dr.csv", dr), ("dt.csv", dt)]),
        };
        for (name, m) in &files {
            io::save_cmatrix(&dir.join(name), m)?;
        }
        let manifest = DictionaryManifest {
            kind: kind.to_string(),
            files: files.iter().map(|(n, _)| n.to_string()).collect(),
        };
        io::save_json(&dir.join("dictionary.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: DictionaryManifest = io::load_json(&dir.join("dictionary.json"))?;
        match m.kind.as_str() {
            "combined" => Ok(Dictionary::Combined {
                psi: io::load_cmatrix(&dir.join("psi.csv"))?,
            }),
            "separable" => Ok(Dictionary::Separable {
                dr: io::load_cmatrix(&dir.join("dr.csv"))?,
                dt: io::load_cmatrix(&dir.join("dt.csv"))?,
            }),
            other => Err(Error::Parse(format!("unknown dictionary kind `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DictionaryManifest {
    kind: String,
    files: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Coder {
    Admm {
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_admm_iter")]
        max_iter: usize,
        #[serde(default = "default_admm_tol")]
        tol: f64,
    },
    Swomp {
        k_max: usize,
    },
}

fn default_rho() -> f64 {
    1.0
}
fn default_admm_iter() -> usize {
    500
}
fn default_admm_tol() -> f64 {
    1e-6
}

impl Default for Coder {
    fn default() -> Self {
        Coder::Admm {
            rho: default_rho(),
            max_iter: default_admm_iter(),
            tol: default_admm_tol(),
        }
    }
}

/// Dictionary update rule; `Ksvd` means K-HOSVD for separable dictionaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Updater {
    Mod,
    #[default]
    Ksvd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    #[default]
    Dia,
    /// Randomly chosen normalized data columns.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    /// Receive atoms (`K_r`); a combined dictionary has `kr * kt` atoms.
    pub kr: usize,
    pub kt: usize,
    #[serde(default = "default_w1")]
    pub w1: f64,
    #[serde(default = "default_w2")]
    pub w2: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub coder: Coder,
    #[serde(default)]
    pub updater: Updater,
    #[serde(default)]
    pub init: InitKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_w1() -> f64 {
    0.1
}
fn default_w2() -> f64 {
    0.001
}
fn default_max_iter() -> usize {
    50
}
fn default_rel_tol() -> f64 {
    1e-4
}

impl LearnConfig {
    pub fn new(kr: usize, kt: usize) -> Self {
        Self {
            kr,
            kt,
            w1: default_w1(),
            w2: default_w2(),
            max_iter: default_max_iter(),
            rel_tol: default_rel_tol(),
            coder: Coder::default(),
            updater: Updater::default(),
            init: InitKind::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kr == 0 || self.kt == 0 {
            return arg_err("atom counts must be positive");
        }
        for (name, w) in [("w1", self.w1), ("w2", self.w2)] {
            if !(w >= 0.0) || !w.is_finite() {
                return arg_err(format!("{name} = {w} must be finite and non-negative"));
            }
        }
        if !(self.rel_tol >= 0.0) {
            return arg_err("rel_tol must be non-negative");
        }
        match self.coder {
            Coder::Admm { rho, tol, .. } => AdmmParams { w1: self.w1, rho, max_iter: 1, tol }.validate(),
            Coder::Swomp { k_max } if k_max == 0 => arg_err("k_max must be positive"),
            Coder::Swomp { .. } => Ok(()),
        }
    }
}

/// Training data laid out location by location, `n_subcarriers` columns each.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Sensing operator; `None` means the data is already channel-domain.
    pub phi: Option<CMatrix>,
    pub y: CMatrix,
    pub n_subcarriers: usize,
    pub nr: usize,
    pub nt: usize,
}

impl TrainingSet {
    /// Whitened, stacked measurements of every location in `ds`.
    pub fn from_dataset(ds: &MeasurementDataset) -> Result<Self> {
        let w = ds.whitened()?;
        let s = stack_locations(&[&w])?;
        Ok(Self {
            phi: Some(s.phi),
            y: s.y,
            n_subcarriers: s.n_subcarriers,
            nr: s.nr,
            nt: s.nt,
        })
    }

    /// Channel-domain data, one vectorized `nr x nt` matrix per column.
    pub fn channel_domain(y: CMatrix, nr: usize, nt: usize, n_subcarriers: usize) -> Result<Self> {
        if y.nrows() != nr * nt {
            return dim_err(format!("{} rows do not match a {nr}x{nt} channel", y.nrows()));
        }
        Ok(Self {
            phi: None,
            y,
            n_subcarriers,
            nr,
            nt,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers == 0 || self.y.ncols() == 0 || self.y.ncols() % self.n_subcarriers != 0 {
            return dim_err(format!(
                "{} columns do not split into locations of {} subcarriers",
                self.y.ncols(),
                self.n_subcarriers
            ));
        }
        let expected = self.phi.as_ref().map_or(self.nr * self.nt, |p| p.nrows());
        if self.y.nrows() != expected {
            return dim_err("data rows do not match the sensing operator");
        }
        if let Some(p) = &self.phi {
            if p.ncols() != self.nr * self.nt {
                return dim_err("sensing operator does not match the array sizes");
            }
        }
        Ok(())
    }

    pub fn n_locations(&self) -> usize {
        self.y.ncols() / self.n_subcarriers
    }

    /// `Phi^+ Y`, or the data itself when already channel-domain.
    pub fn projected(&self) -> CMatrix {
        match &self.phi {
            Some(p) => pinv(p) * &self.y,
            None => self.y.clone(),
        }
    }

    fn to_channel_domain(&self) -> Self {
        Self {
            phi: None,
            y: self.projected(),
            ..self.clone()
        }
    }

    fn apply(&self, m: &CMatrix) -> CMatrix {
        match &self.phi {
            Some(p) => p * m,
            None => m.clone(),
        }
    }
}

/// Penalty of the codes: grouped l2/l1 norm, or nonzero count for SW-OMP.
fn penalty_of(coder: &Coder, h: &CMatrix, group: usize) -> f64 {
    match coder {
        Coder::Admm { .. } => grouped_l21(h, group),
        Coder::Swomp { .. } => h.iter().filter(|z| **z != C64::new(0.0, 0.0)).count() as f64,
    }
}

/// Full learning objective.
pub fn objective(y: &CMatrix, x: &CMatrix, model: &CMatrix, h: &CMatrix, cfg: &LearnConfig, group: usize) -> f64 {
    fro_sqr(&(x - model)) + cfg.w1 * penalty_of(&cfg.coder, h, group) + cfg.w2 * fro_sqr(&(y - x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnState {
    pub dictionary: Dictionary,
    #[serde(with = "io::cmatrix_serde")]
    pub codes: CMatrix,
    #[serde(with = "io::cmatrix_serde")]
    pub denoised: CMatrix,
    pub objective_trace: Vec<f64>,
    pub iteration: usize,
    pub converged: bool,
    /// Updates declined because they would have raised the objective.
    pub rejected_updates: usize,
    /// Atoms re-seeded from the data because no code used them.
    pub replaced_atoms: usize,
}

impl LearnState {
    /// Starting point `H = 0`, `X = Y` for a given dictionary.
    pub fn initial(data: &TrainingSet, cfg: &LearnConfig, dictionary: Dictionary) -> Result<Self> {
        data.validate()?;
        let data = if dictionary.is_separable() { data.to_channel_domain() } else { data.clone() };
        let k = dictionary.n_atoms();
        let codes = CMatrix::zeros(k, data.y.ncols());
        let psi = dictionary.psi()?;
        if psi.nrows() != data.nr * data.nt {
            return dim_err("dictionary does not match the channel size");
        }
        let model = CMatrix::zeros(data.y.nrows(), data.y.ncols());
        let obj = objective(&data.y, &data.y, &model, &codes, cfg, data.n_subcarriers);
        Ok(Self {
            dictionary,
            codes,
            denoised: data.y.clone(),
            objective_trace: vec![obj],
            iteration: 0,
            converged: false,
            rejected_updates: 0,
            replaced_atoms: 0,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::save_json(&dir.join("state.json"), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        io::load_json(&dir.join("state.json"))
    }
}

fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

fn random_unit_atoms(n: usize, k: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    let mut a = random_cn(n, k, rng);
    normalize_columns(&mut a);
    a
}

fn nonzero_normalized(data: &CMatrix) -> (Vec<usize>, CMatrix) {
    let norms: Vec<f64> = data.column_iter().map(|c| c.norm()).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..norms.len()).filter(|&j| max > 0.0 && norms[j] > 1e-10 * max).collect();
    let mut c = CMatrix::from_fn(data.nrows(), keep.len(), |i, j| data[(i, keep[j])]);
    normalize_columns(&mut c);
    (keep, c)
}

/// `k` normalized data columns picked at random.
pub fn data_atoms(data: &CMatrix, k: usize, seed: u64) -> CMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, cands) = nonzero_normalized(data);
    if cands.ncols() < k {
        log::warn!("only {} usable data columns for {k} atoms; padding with random atoms", cands.ncols());
        let mut out = random_unit_atoms(data.nrows(), k, &mut rng);
        out.columns_mut(0, cands.ncols()).copy_from(&cands);
        return out;
    }
    let idx = sample_indices(cands.ncols(), k, &mut rng);
    CMatrix::from_fn(data.nrows(), k, |i, j| cands[(i, idx[j])])
}

const DIA_POOL: usize = 4096;
const DIA_ROUNDS: usize = 3;

/// Incoherent initialization from data columns.
///
/// Atoms are picked greedily as the normalized data column least coherent
/// with those already chosen, starting from the most energetic column.
/// A few rounds then prune rarely used atoms and replace them with the worst
/// represented data columns, provided that does not raise the coherence.
pub fn dia_atoms(data: &CMatrix, k: usize, seed: u64) -> CMatrix {
    let n = data.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let energy: Vec<f64> = data.column_iter().map(|c| c.norm_squared()).collect();
    let (keep, all) = nonzero_normalized(data);
    if all.ncols() < k {
        log::warn!("only {} usable data columns for {k} atoms; padding with random atoms", all.ncols());
        let mut out = random_unit_atoms(n, k, &mut rng);
        out.columns_mut(0, all.ncols()).copy_from(&all);
        return out;
    }
    let mut pool_idx: Vec<usize> = (0..all.ncols()).collect();
    if pool_idx.len() > DIA_POOL.max(k) {
        pool_idx.shuffle(&mut rng);
        pool_idx.truncate(DIA_POOL.max(k));
        pool_idx.sort_unstable();
    }
    let pool = CMatrix::from_fn(n, pool_idx.len(), |i, j| all[(i, pool_idx[j])]);
    let m = pool.ncols();

    let first = (0..m)
        .max_by(|&a, &b| energy[keep[pool_idx[a]]].total_cmp(&energy[keep[pool_idx[b]]]).then(b.cmp(&a)))
        .unwrap_or(0);
    let mut chosen = vec![first];
    let mut taken = vec![false; m];
    taken[first] = true;
    let mut maxcoh = vec![0.0f64; m];
    while chosen.len() < k {
        let last = pool.column(*chosen.last().expect("nonempty"));
        let corr = pool.adjoint() * last;
        for j in 0..m {
            maxcoh[j] = maxcoh[j].max(corr[j].norm());
        }
        let next = (0..m)
            .filter(|&j| !taken[j])
            .min_by(|&a, &b| maxcoh[a].total_cmp(&maxcoh[b]).then(a.cmp(&b)))
            .expect("pool larger than k");
        taken[next] = true;
        chosen.push(next);
    }
    let mut dict = CMatrix::from_fn(n, k, |i, j| pool[(i, chosen[j])]);

    for _ in 0..DIA_ROUNDS {
        let corr = dict.adjoint() * &pool;
        let mut usage = vec![0usize; k];
        let mut fit = vec![0.0f64; m];
        for j in 0..m {
            let (best, val) = (0..k)
                .map(|a| (a, corr[(a, j)].norm()))
                .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            usage[best] += 1;
            fit[j] = val;
        }
        let threshold = m / (4 * k);
        let mut rare: Vec<usize> = (0..k).filter(|&a| usage[a] <= threshold).collect();
        if rare.is_empty() {
            break;
        }
        rare.sort_by_key(|&a| usage[a]);
        let mut order: Vec<usize> = (0..m).filter(|&j| !taken[j]).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
        let mut coh = crate::tensor::mutual_coherence(&dict);
        let mut changed = false;
        for a in rare {
            for (pos, &j) in order.iter().enumerate() {
                let cand = pool.column(j);
                let worst = (0..k)
                    .filter(|&b| b != a)
                    .map(|b| dict.column(b).dotc(&cand).norm())
                    .fold(0.0, f64::max);
                if worst <= coh {
                    taken[chosen[a]] = false;
                    taken[j] = true;
                    chosen[a] = j;
                    dict.set_column(a, &cand);
                    coh = crate::tensor::mutual_coherence(&dict);
                    order.remove(pos);
                    changed = true;
                    break;
                }
            }
        }
        if !changed {
            break;
        }
    }
    dict
}

fn mode1_fibers(x: &CMatrix, nr: usize, nt: usize) -> Result<CMatrix> {
    CTensor3::from_vec([nr, nt, x.ncols()], x.as_slice().to_vec())?.unfold(1)
}

fn mode2_fibers(x: &CMatrix, nr: usize, nt: usize) -> Result<CMatrix> {
    CTensor3::from_vec([nr, nt, x.ncols()], x.as_slice().to_vec())?.unfold(2)
}

/// Initial dictionary of the requested structure from the training data.
pub fn init_dictionary(data: &TrainingSet, cfg: &LearnConfig, separable: bool) -> Result<Dictionary> {
    data.validate()?;
    let proj = data.projected();
    let pick = |m: &CMatrix, k: usize, seed: u64| match cfg.init {
        InitKind::Dia => dia_atoms(m, k, seed),
        InitKind::Data => data_atoms(m, k, seed),
    };
    if separable {
        let dr = pick(&mode1_fibers(&proj, data.nr, data.nt)?, cfg.kr, cfg.seed);
        let dt_bar = pick(&mode2_fibers(&proj, data.nr, data.nt)?, cfg.kt, cfg.seed.wrapping_add(1));
        Ok(Dictionary::Separable { dr, dt: conj(&dt_bar) })
    } else {
        Ok(Dictionary::Combined {
            psi: pick(&proj, cfg.kr * cfg.kt, cfg.seed),
        })
    }
}

/// `(w2 Y + model) / (1 + w2)` with `model = Phi Psi H`.
pub fn denoise_update(y: &CMatrix, phi: Option<&CMatrix>, psi: &CMatrix, h: &CMatrix, w2: f64) -> Result<CMatrix> {
    if !(w2 >= 0.0) {
        return arg_err(format!("w2 = {w2} must be non-negative"));
    }
    let model = match phi {
        Some(p) => p * (psi * h),
        None => psi * h,
    };
    if model.shape() != y.shape() {
        return dim_err("model and data shapes differ");
    }
    Ok((y * C64::new(w2, 0.0) + model).unscale(1.0 + w2))
}

#[derive(Debug, Clone)]
pub struct ModUpdate {
    pub psi: CMatrix,
    /// Codes with rows rescaled by the removed column norms.
    pub codes: CMatrix,
    pub rank_deficient: bool,
    /// Atoms re-seeded because their code row was zero.
    pub replaced: Vec<usize>,
}

/// Normalized column of `phi^+ r` for the largest unused residual columns.
fn reseed_atoms(residual: &CMatrix, phi_pinv: Option<&CMatrix>, atoms: &[usize], psi: &mut CMatrix) {
    let mut order: Vec<usize> = (0..residual.ncols()).collect();
    let norms: Vec<f64> = residual.column_iter().map(|c| c.norm_squared()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    for (slot, &k) in atoms.iter().enumerate() {
        let col = residual.columns(order[slot % order.len().max(1)], 1).into_owned();
        let mut v = match phi_pinv {
            Some(p) => p * col,
            None => col,
        };
        let nrm = v.norm();
        if nrm > 1e-300 {
            v.unscale_mut(nrm);
        } else {
            v = CMatrix::zeros(psi.nrows(), 1);
            v[k % psi.nrows()] = ONE;
        }
        psi.set_column(k, &v.column(0));
    }
}

/// Like `reseed_atoms`, but each atom becomes the dominant direction of one
/// location's residual block, worst location first.
fn reseed_from_locations(residual: &CMatrix, group: usize, phi_pinv: Option<&CMatrix>, atoms: &[usize], psi: &mut CMatrix) {
    let n_loc = residual.ncols() / group;
    let energy: Vec<f64> = (0..n_loc).map(|g| residual.columns(g * group, group).norm_squared()).collect();
    let mut order: Vec<usize> = (0..n_loc).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
    for (slot, &k) in atoms.iter().enumerate() {
        let block = residual.columns(order[slot % n_loc.max(1)] * group, group).into_owned();
        let block = match phi_pinv {
            Some(p) => p * block,
            None => block,
        };
        let u = svd(&block).ok().filter(|d| d.u.ncols() > 0).map(|d| d.u.columns(0, 1).into_owned());
        match u {
            Some(v) if v.norm() > 1e-300 => psi.set_column(k, &v.column(0)),
            _ => reseed_atoms(residual, phi_pinv, &[k], psi),
        }
    }
}

/// `Psi = Phi^+ X H^+`, then unit-norm columns with the code rows scaled to
/// keep `Phi Psi H` unchanged. Atoms without any code are re-seeded from the
/// largest residual columns.
pub fn codl_mod_update(x: &CMatrix, phi: Option<&CMatrix>, h: &CMatrix) -> Result<ModUpdate> {
    let phi_pinv = phi.map(pinv);
    codl_mod_update_with(x, phi, phi_pinv.as_ref(), h)
}

fn codl_mod_update_with(x: &CMatrix, phi: Option<&CMatrix>, phi_pinv: Option<&CMatrix>, h: &CMatrix) -> Result<ModUpdate> {
    if x.ncols() != h.ncols() {
        return dim_err("data and codes differ in column count");
    }
    let gram = h * h.adjoint();
    let rank_deficient = rank(&gram) < h.nrows();
    let xh = x * h.adjoint();
    let lifted = match phi_pinv {
        Some(p) => p * xh,
        None => xh,
    };
    let mut psi = lifted * pinv(&gram);
    let norms = normalize_columns(&mut psi);
    let mut codes = h.clone();
    let mut replaced = Vec::new();
    for (k, &n) in norms.iter().enumerate() {
        if n > 1e-12 {
            codes.row_mut(k).scale_mut(n);
        } else {
            codes.row_mut(k).fill(C64::new(0.0, 0.0));
            replaced.push(k);
        }
    }
    if !replaced.is_empty() {
        let model = match phi {
            Some(p) => p * (&psi * &codes),
            None => &psi * &codes,
        };
        reseed_atoms(&(x - model), phi_pinv, &replaced, &mut psi);
    }
    if rank_deficient {
        log::debug!("MOD update with rank-deficient code Gram matrix");
    }
    Ok(ModUpdate {
        psi,
        codes,
        rank_deficient,
        replaced,
    })
}

/// One approximate K-SVD refinement of atom `k`: returns the new atom and
/// the new values of code row `k` on its support, or `None` if the atom is
/// unused.
pub fn codl_ksvd_update(
    x: &CMatrix,
    phi: Option<&CMatrix>,
    psi: &CMatrix,
    h: &CMatrix,
    k: usize,
) -> Result<Option<(CMatrix, CMatrix)>> {
    if k >= psi.ncols() {
        return arg_err(format!("atom {k} out of range"));
    }
    let apply = |m: &CMatrix| match phi {
        Some(p) => p * m,
        None => m.clone(),
    };
    let support: Vec<usize> = (0..h.ncols()).filter(|&j| h[(k, j)] != C64::new(0.0, 0.0)).collect();
    if support.is_empty() {
        return Ok(None);
    }
    let residual = x - apply(&(psi * h));
    let hk = CMatrix::from_fn(1, support.len(), |_, j| h[(k, support[j])]);
    let e = CMatrix::from_fn(x.nrows(), support.len(), |i, j| residual[(i, support[j])])
        + apply(&psi.columns(k, 1).into_owned()) * &hk;
    let phi_pinv = phi.map(pinv);
    Ok(ksvd_pair(&e, &hk, phi, phi_pinv.as_ref()))
}

fn ksvd_pair(e: &CMatrix, hk: &CMatrix, phi: Option<&CMatrix>, phi_pinv: Option<&CMatrix>) -> Option<(CMatrix, CMatrix)> {
    let hn = fro_sqr(hk);
    if hn == 0.0 {
        return None;
    }
    if phi.is_none() {
        // channel-domain data: exact rank-one fit
        let d = svd(e).ok()?;
        let atom = d.u.columns(0, 1).into_owned();
        let row = d.v_t.rows(0, 1) * C64::new(d.s[0], 0.0);
        return Some((atom, row));
    }
    let v = (e * hk.adjoint()).unscale(hn);
    let mut atom = match phi_pinv {
        Some(p) => p * v,
        None => v,
    };
    let nrm = atom.norm();
    if !(nrm > 1e-300) {
        return None;
    }
    atom.unscale_mut(nrm);
    let a = match phi {
        Some(p) => p * &atom,
        None => atom.clone(),
    };
    let an = fro_sqr(&a);
    if !(an > 0.0) {
        return None;
    }
    let row = (a.adjoint() * e).unscale(an);
    Some((atom, row))
}

/// Per-location penalty of a single code row.
fn row_penalty(coder: &Coder, h: &CMatrix, k: usize, group: usize) -> f64 {
    match coder {
        Coder::Admm { .. } => (0..h.ncols() / group)
            .map(|g| {
                (0..group)
                    .map(|c| h[(k, g * group + c)].norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
            .sum(),
        Coder::Swomp { .. } => h.row(k).iter().filter(|z| **z != C64::new(0.0, 0.0)).count() as f64,
    }
}

struct Outcome {
    rejected: usize,
    replaced: usize,
}

/// K-SVD sweep over all atoms of a combined dictionary.
fn ksvd_sweep(
    data: &TrainingSet,
    phi_pinv: Option<&CMatrix>,
    x: &CMatrix,
    psi: &mut CMatrix,
    h: &mut CMatrix,
    cfg: &LearnConfig,
) -> Outcome {
    let group = data.n_subcarriers;
    let phi = data.phi.as_ref();
    let mut residual = x - data.apply(&(&*psi * &*h));
    let mut out = Outcome { rejected: 0, replaced: 0 };
    let mut unused = Vec::new();
    for k in 0..psi.ncols() {
        let support: Vec<usize> = (0..h.ncols()).filter(|&j| h[(k, j)] != C64::new(0.0, 0.0)).collect();
        if support.is_empty() {
            unused.push(k);
            continue;
        }
        let hk = CMatrix::from_fn(1, support.len(), |_, j| h[(k, support[j])]);
        let a_old = data.apply(&psi.columns(k, 1).into_owned());
        let r_s = CMatrix::from_fn(x.nrows(), support.len(), |i, j| residual[(i, support[j])]);
        let e = &r_s + &a_old * &hk;
        let Some((atom, row)) = ksvd_pair(&e, &hk, phi, phi_pinv) else {
            out.rejected += 1;
            continue;
        };
        let a_new = data.apply(&atom);
        let r_new = &e - &a_new * &row;
        let pen_old = row_penalty(&cfg.coder, h, k, group);
        let mut h_try = h.row(k).into_owned();
        for (j, &col) in support.iter().enumerate() {
            h_try[col] = row[j];
        }
        let mut probe = CMatrix::zeros(1, h.ncols());
        probe.row_mut(0).copy_from(&h_try);
        let pen_new = row_penalty(&cfg.coder, &probe, 0, group);
        let before = fro_sqr(&r_s) + cfg.w1 * pen_old;
        let after = fro_sqr(&r_new) + cfg.w1 * pen_new;
        if after <= before {
            psi.set_column(k, &atom.column(0));
            h.row_mut(k).copy_from(&h_try);
            for (j, &col) in support.iter().enumerate() {
                residual.set_column(col, &r_new.column(j));
            }
        } else {
            out.rejected += 1;
        }
    }
    if !unused.is_empty() {
        reseed_atoms(&residual, phi_pinv, &unused, psi);
        out.replaced = unused.len();
    }
    out
}

fn as_tensor(m: &CMatrix, d1: usize, d2: usize) -> Result<CTensor3> {
    CTensor3::from_vec([d1, d2, m.ncols()], m.as_slice().to_vec())
}

fn as_matrix(t: &CTensor3) -> CMatrix {
    let [d1, d2, d3] = t.dims();
    CMatrix::from_column_slice(d1 * d2, d3, t.as_slice())
}

/// Least-squares `D_R` for fixed `D_T`, normalized, with the codes rescaled.
/// Returns `(D_R, H, rank_deficient)`.
pub fn sedl_mod_update_r(x: &CTensor3, h: &CTensor3, dt: &CMatrix) -> Result<(CMatrix, CTensor3, bool)> {
    let b = h.mode_product(&conj(dt), 2)?.unfold(1)?;
    let x1 = x.unfold(1)?;
    let gram = &b * b.adjoint();
    let deficient = rank(&gram) < gram.nrows();
    let mut dr = x1 * b.adjoint() * pinv(&gram);
    let norms = normalize_columns(&mut dr);
    let (scale, dead) = rescale_factors(&norms);
    let mut h_new = h.mode_product(&crate::tensor::diag(&scale), 1)?;
    if !dead.is_empty() {
        let model = h_new.mode_product(&dr, 1)?.mode_product(&conj(dt), 2)?;
        let resid = as_tensor(&(as_matrix(x) - as_matrix(&model)), x.dims()[0], x.dims()[1])?;
        reseed_atoms(&resid.unfold(1)?, None, &dead, &mut dr);
        h_new = zero_slabs(&h_new, &dead, 1);
    }
    Ok((dr, h_new, deficient))
}

/// Least-squares `D_T` for fixed `D_R`, normalized, with the codes rescaled.
pub fn sedl_mod_update_t(x: &CTensor3, h: &CTensor3, dr: &CMatrix) -> Result<(CMatrix, CTensor3, bool)> {
    let c = h.mode_product(dr, 1)?.unfold(2)?;
    let x2 = x.unfold(2)?;
    let gram = &c * c.adjoint();
    let deficient = rank(&gram) < gram.nrows();
    let mut dt_bar = x2 * c.adjoint() * pinv(&gram);
    let norms = normalize_columns(&mut dt_bar);
    let (scale, dead) = rescale_factors(&norms);
    let mut h_new = h.mode_product(&crate::tensor::diag(&scale), 2)?;
    if !dead.is_empty() {
        let model = h_new.mode_product(dr, 1)?.mode_product(&dt_bar, 2)?;
        let resid = as_tensor(&(as_matrix(x) - as_matrix(&model)), x.dims()[0], x.dims()[1])?;
        reseed_atoms(&resid.unfold(2)?, None, &dead, &mut dt_bar);
        h_new = zero_slabs(&h_new, &dead, 2);
    }
    Ok((conj(&dt_bar), h_new, deficient))
}

fn rescale_factors(norms: &[f64]) -> (Vec<C64>, Vec<usize>) {
    let mut dead = Vec::new();
    let scale = norms
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            if n > 1e-12 {
                C64::new(n, 0.0)
            } else {
                dead.push(k);
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    (scale, dead)
}

fn zero_slabs(h: &CTensor3, idx: &[usize], mode: usize) -> CTensor3 {
    let mut out = h.clone();
    let [d1, d2, d3] = h.dims();
    for k in 0..d3 {
        for j in 0..d2 {
            for i in 0..d1 {
                let hit = if mode == 1 { idx.contains(&i) } else { idx.contains(&j) };
                if hit {
                    out.set(i, j, k, C64::new(0.0, 0.0));
                }
            }
        }
    }
    out
}

/// Codes `H^(u)` of one location as the mode-3 unfolded l2/l1 problem with
/// the operator `conj(D_T) kron D_R`.
pub fn sedl_sparse_code(
    x_u: &CTensor3,
    dr: &CMatrix,
    dt: &CMatrix,
    params: &AdmmParams,
) -> Result<(CTensor3, crate::sparse::SparseCodeResult)> {
    let [nr, nt, nc] = x_u.dims();
    if dr.nrows() != nr || dt.nrows() != nt {
        return dim_err("factor sizes do not match the data tensor");
    }
    let a = kron(&conj(dt), dr)?;
    let x3 = x_u.unfold(3)?.transpose();
    let res = crate::sparse::admm_l21(&x3, &a, params)?;
    let t = CTensor3::refold(&res.coefficients.transpose(), 3, [dr.ncols(), dt.ncols(), nc])?;
    Ok((t, res))
}

/// Factor-wise K-HOSVD sweep: every atom of `D_R` then of `D_T` gets a rank-one
/// refinement on its unfolding, with its code slab scaled by a complex factor.
fn khosvd_sweep(x: &CTensor3, dr: &mut CMatrix, dt: &mut CMatrix, h: &mut CMatrix, cfg: &LearnConfig, group: usize) -> Result<Outcome> {
    let (kr, kt) = (dr.ncols(), dt.ncols());
    let mut out = Outcome { rejected: 0, replaced: 0 };
    for mode in [1usize, 2] {
        let ht = as_tensor(h, kr, kt)?;
        let (xm, mut b, mut factor) = if mode == 1 {
            (x.unfold(1)?, ht.mode_product(&conj(dt), 2)?.unfold(1)?, dr.clone())
        } else {
            (x.unfold(2)?, ht.mode_product(dr, 1)?.unfold(2)?, conj(dt))
        };
        let mut residual = &xm - &factor * &b;
        let mut dead = Vec::new();
        for a in 0..factor.ncols() {
            let brow = b.rows(a, 1).into_owned();
            let bn = fro_sqr(&brow);
            if bn == 0.0 {
                dead.push(a);
                continue;
            }
            let d_old = factor.columns(a, 1).into_owned();
            let e = &residual + &d_old * &brow;
            let mut d_new = &e * brow.adjoint();
            let nrm = d_new.norm();
            if !(nrm > 1e-300) {
                out.rejected += 1;
                continue;
            }
            d_new.unscale_mut(nrm);
            let alpha = (d_new.adjoint() * &e * brow.adjoint())[(0, 0)] / bn;
            let r_new = &e - &d_new * &brow * alpha;
            let rows: Vec<usize> = (0..h.nrows())
                .filter(|&k| if mode == 1 { k % kr == a } else { k / kr == a })
                .collect();
            let pen_old: f64 = rows.iter().map(|&k| row_penalty(&cfg.coder, h, k, group)).sum();
            let pen_new = match cfg.coder {
                Coder::Admm { .. } => pen_old * alpha.norm(),
                Coder::Swomp { .. } if alpha.norm() == 0.0 => 0.0,
                Coder::Swomp { .. } => pen_old,
            };
            if fro_sqr(&r_new) + cfg.w1 * pen_new <= fro_sqr(&residual) + cfg.w1 * pen_old {
                factor.set_column(a, &d_new.column(0));
                for &k in &rows {
                    h.row_mut(k).scale_mut(1.0);
                    let scaled = h.row(k) * alpha;
                    h.row_mut(k).copy_from(&scaled);
                }
                let scaled_b = &brow * alpha;
                b.rows_mut(a, 1).copy_from(&scaled_b);
                residual = r_new;
            } else {
                out.rejected += 1;
            }
        }
        if !dead.is_empty() {
            reseed_atoms(&residual, None, &dead, &mut factor);
            out.replaced += dead.len();
        }
        if mode == 1 {
            *dr = factor;
        } else {
            *dt = conj(&factor);
        }
    }
    Ok(out)
}

fn sparse_code(a: &CMatrix, x: &CMatrix, warm: &CMatrix, cfg: &LearnConfig, group: usize) -> Result<CMatrix> {
    match cfg.coder {
        Coder::Admm { rho, max_iter, tol } => {
            let params = AdmmParams { w1: cfg.w1, rho, max_iter, tol };
            let solver = AdmmSolver::new(a, rho)?;
            Ok(solver.solve_grouped(x, &params, Some(warm), group)?.coefficients)
        }
        Coder::Swomp { k_max } => {
            let k_max = k_max.min(a.nrows());
            let mut h = CMatrix::zeros(a.ncols(), x.ncols());
            for g in 0..x.ncols() / group {
                let r = swomp(&x.columns(g * group, group).into_owned(), a, k_max, 0.0)?;
                h.columns_mut(g * group, group).copy_from(&r.coefficients);
            }
            Ok(h)
        }
    }
}

fn location_costs(x: &CMatrix, model: &CMatrix, h: &CMatrix, cfg: &LearnConfig, group: usize) -> Vec<f64> {
    (0..x.ncols() / group)
        .map(|g| {
            let xs = x.columns(g * group, group);
            let ms = model.columns(g * group, group);
            let hs = h.columns(g * group, group).into_owned();
            fro_sqr(&(xs - ms)) + cfg.w1 * penalty_of(&cfg.coder, &hs, group)
        })
        .collect()
}

/// Atoms whose coherence with an earlier atom exceeds this are re-seeded.
const DUPLICATE_COHERENCE: f64 = 0.99;

/// Near-duplicate atoms of `d` plus one more atom: the `turn`-th weakest by
/// code energy, cycling so successive iterations try different atoms.
fn refresh_candidates(d: &CMatrix, energy: &[f64], turn: usize) -> Vec<usize> {
    let g = d.adjoint() * d;
    let mut out: Vec<usize> = (0..d.ncols())
        .filter(|&j| (0..j).any(|i| g[(i, j)].norm() > DUPLICATE_COHERENCE))
        .collect();
    let mut rest: Vec<usize> = (0..d.ncols()).filter(|j| !out.contains(j)).collect();
    rest.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]).then(a.cmp(&b)));
    if !rest.is_empty() {
        out.push(rest[turn % rest.len()]);
    }
    out
}

/// Re-seeds near-duplicate atoms and one weak atom from the worst
/// represented residuals and re-codes; the proposal is kept only if the
/// objective does not rise.
/// Returns the number of atoms replaced.
fn clear_duplicates(
    data: &TrainingSet,
    phi_pinv: Option<&CMatrix>,
    x: &CMatrix,
    cfg: &LearnConfig,
    group: usize,
    state: &mut LearnState,
) -> Result<usize> {
    let psi = state.dictionary.psi()?;
    let residual = x - data.apply(&(&psi * &state.codes));
    let (proposal, n) = match &state.dictionary {
        Dictionary::Combined { psi } => {
            let energy: Vec<f64> = state.codes.row_iter().map(|r| r.norm_squared()).collect();
            let dup = refresh_candidates(psi, &energy, state.iteration);
            let mut p = psi.clone();
            reseed_from_locations(&residual, group, phi_pinv, &dup, &mut p);
            (Dictionary::Combined { psi: p }, dup.len())
        }
        Dictionary::Separable { dr, dt } => {
            let kr = dr.ncols();
            let mut e_r = vec![0.0; kr];
            let mut e_t = vec![0.0; dt.ncols()];
            for (k, row) in state.codes.row_iter().enumerate() {
                let e = row.norm_squared();
                e_r[k % kr] += e;
                e_t[k / kr] += e;
            }
            // one factor per iteration gets the extra candidate
            let turn = state.iteration / 2;
            let (mut dup_r, mut dup_t) = (refresh_candidates(dr, &e_r, turn), refresh_candidates(dt, &e_t, turn));
            if state.iteration % 2 == 0 {
                dup_t.pop();
            } else {
                dup_r.pop();
            }
            let rt = as_tensor(&residual, data.nr, data.nt)?;
            let mut new_dr = dr.clone();
            reseed_atoms(&rt.unfold(1)?, None, &dup_r, &mut new_dr);
            let mut dt_bar = conj(dt);
            reseed_atoms(&rt.unfold(2)?, None, &dup_t, &mut dt_bar);
            (
                Dictionary::Separable {
                    dr: new_dr,
                    dt: conj(&dt_bar),
                },
                dup_r.len() + dup_t.len(),
            )
        }
    };
    let cost = |a: &CMatrix, h: &CMatrix| fro_sqr(&(x - a * h)) + cfg.w1 * penalty_of(&cfg.coder, h, group);
    let a_new = data.apply(&proposal.psi()?);
    let h_new = sparse_code(&a_new, x, &state.codes, cfg, group)?;
    if cost(&a_new, &h_new) <= cost(&data.apply(&psi), &state.codes) {
        state.dictionary = proposal;
        state.codes = h_new;
        Ok(n)
    } else {
        state.rejected_updates += 1;
        Ok(0)
    }
}

/// One full alternation: coding, dictionary update, denoising.
fn iterate(data: &TrainingSet, phi_pinv: Option<&CMatrix>, cfg: &LearnConfig, state: &mut LearnState) -> Result<()> {
    let group = data.n_subcarriers;
    let x = state.denoised.clone();

    // sparse coding, kept per location only where it helps
    let psi = state.dictionary.psi()?;
    let a = data.apply(&psi);
    let fresh = sparse_code(&a, &x, &state.codes, cfg, group)?;
    let old_cost = location_costs(&x, &(&a * &state.codes), &state.codes, cfg, group);
    let new_cost = location_costs(&x, &(&a * &fresh), &fresh, cfg, group);
    for g in 0..old_cost.len() {
        if new_cost[g] <= old_cost[g] {
            state.codes.columns_mut(g * group, group).copy_from(&fresh.columns(g * group, group));
        } else {
            state.rejected_updates += 1;
        }
    }

    // dictionary update
    let cost = |psi: &CMatrix, h: &CMatrix| {
        fro_sqr(&(&x - data.apply(&(psi * h)))) + cfg.w1 * penalty_of(&cfg.coder, h, group)
    };
    match (&mut state.dictionary, cfg.updater) {
        (Dictionary::Combined { psi }, Updater::Mod) => {
            let up = codl_mod_update_with(&x, data.phi.as_ref(), phi_pinv, &state.codes)?;
            if cost(&up.psi, &up.codes) <= cost(psi, &state.codes) {
                *psi = up.psi;
                state.codes = up.codes;
                state.replaced_atoms += up.replaced.len();
            } else {
                state.rejected_updates += 1;
            }
        }
        (Dictionary::Combined { psi }, Updater::Ksvd) => {
            let o = ksvd_sweep(data, phi_pinv, &x, psi, &mut state.codes, cfg);
            state.rejected_updates += o.rejected;
            state.replaced_atoms += o.replaced;
        }
        (Dictionary::Separable { dr, dt }, Updater::Mod) => {
            let (kr, kt) = (dr.ncols(), dt.ncols());
            let xt = as_tensor(&x, data.nr, data.nt)?;
            let (new_dr, h1, _) = sedl_mod_update_r(&xt, &as_tensor(&state.codes, kr, kt)?, dt)?;
            let h1 = as_matrix(&h1);
            let now = kron(&conj(dt), dr)?;
            if cost(&kron(&conj(dt), &new_dr)?, &h1) <= cost(&now, &state.codes) {
                *dr = new_dr;
                state.codes = h1;
            } else {
                state.rejected_updates += 1;
            }
            let (new_dt, h2, _) = sedl_mod_update_t(&xt, &as_tensor(&state.codes, kr, kt)?, dr)?;
            let h2 = as_matrix(&h2);
            let now = kron(&conj(dt), dr)?;
            if cost(&kron(&conj(&new_dt), dr)?, &h2) <= cost(&now, &state.codes) {
                *dt = new_dt;
                state.codes = h2;
            } else {
                state.rejected_updates += 1;
            }
        }
        (Dictionary::Separable { dr, dt }, Updater::Ksvd) => {
            let xt = as_tensor(&x, data.nr, data.nt)?;
            let o = khosvd_sweep(&xt, dr, dt, &mut state.codes, cfg, group)?;
            state.rejected_updates += o.rejected;
            state.replaced_atoms += o.replaced;
        }
    }

    state.replaced_atoms += clear_duplicates(data, phi_pinv, &x, cfg, group, state)?;

    // denoising
    let psi = state.dictionary.psi()?;
    let model = data.apply(&(&psi * &state.codes));
    state.denoised = (&data.y * C64::new(cfg.w2, 0.0) + &model).unscale(1.0 + cfg.w2);
    let obj = objective(&data.y, &state.denoised, &model, &state.codes, cfg, group);
    state.objective_trace.push(obj);
    state.iteration += 1;
    Ok(())
}

/// Runs the alternation from `state` until the relative objective change
/// drops below `rel_tol` or `max_iter` iterations have been done in total.
pub fn learn(data: &TrainingSet, cfg: &LearnConfig, mut state: LearnState) -> Result<LearnState> {
    cfg.validate()?;
    data.validate()?;
    let data = if state.dictionary.is_separable() { data.to_channel_domain() } else { data.clone() };
    let k = state.dictionary.n_atoms();
    if state.codes.shape() != (k, data.y.ncols()) || state.denoised.shape() != data.y.shape() {
        return dim_err("learning state does not match the training data");
    }
    let phi_pinv = data.phi.as_ref().map(pinv);
    while state.iteration < cfg.max_iter && !state.converged {
        iterate(&data, phi_pinv.as_ref(), cfg, &mut state)?;
        let n = state.objective_trace.len();
        let (prev, cur) = (state.objective_trace[n - 2], state.objective_trace[n - 1]);
        log::debug!("iteration {}: objective {cur:.6e}", state.iteration);
        if (prev - cur).abs() <= cfg.rel_tol * cur.abs().max(f64::MIN_POSITIVE) {
            state.converged = true;
        }
    }
    if !state.converged {
        log::info!("learning stopped at max_iter={} before reaching rel_tol", cfg.max_iter);
    }
    Ok(state)
}

/// Combined dictionary learning from the configured initialization.
pub fn codl(data: &TrainingSet, cfg: &LearnConfig) -> Result<(Dictionary, LearnState)> {
    cfg.validate()?;
    let init = init_dictionary(data, cfg, false)?;
    let state = learn(data, cfg, LearnState::initial(data, cfg, init)?)?;
    Ok((state.dictionary.clone(), state))
}

/// Separable dictionary learning from the configured initialization.
pub fn sedl(data: &TrainingSet, cfg: &LearnConfig) -> Result<(Dictionary, LearnState)> {
    cfg.validate()?;
    let init = init_dictionary(data, cfg, true)?;
    let state = learn(data, cfg, LearnState::initial(data, cfg, init)?)?;
    Ok((state.dictionary.clone(), state))
}

/// Problem sizes for operation counts: `N = Nr Nt`, `K = Kr Kt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySizes {
    pub n: usize,
    pub k: usize,
    pub s0: usize,
    pub n_sa: usize,
    pub n_c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEntry {
    pub method: String,
    pub stage: String,
    pub expression: String,
    pub count: f64,
}

/// Complex multiplications per iteration of each method and stage.
pub fn complexity_report(s: &ComplexitySizes) -> Vec<ComplexityEntry> {
    let (n, k, s0, nsa, nc) = (s.n as f64, s.k as f64, s.s0 as f64, s.n_sa as f64, s.n_c as f64);
    let codl_coding = nsa * (n * k * k + k.powi(3)) + nsa * nc * (n * k + k * k);
    let rows: Vec<(&str, &str, &str, f64)> = vec![
        ("SW-OMP", "sparse coding", "O(N_sa N_c N K)", nsa * nc * n * k),
        ("CoDL", "sparse coding", "O(N_sa (N K^2 + K^3) + N_sa N_c (N K + K^2))", codl_coding),
        (
            "CoDL",
            "MOD",
            "O(N_sa N_c N K + N K^2 + N_sa N_c K^2 + K^3)",
            nsa * nc * n * k + n * k * k + nsa * nc * k * k + k.powi(3),
        ),
        ("CoDL", "K-SVD", "O(N^2 (S_0 N_sa N_c + N K))", n * n * (s0 * nsa * nc + n * k)),
        ("SeDL", "sparse coding (reducing to CoDL)", "O(N_sa (N K^2 + K^3) + N_sa N_c (N K + K^2))", codl_coding),
        ("SeDL", "sparse coding (ADMM for SeDL)", "O(4 N_sa N_c K sqrt(K))", 4.0 * nsa * nc * k * k.sqrt()),
        (
            "SeDL",
            "MOD",
            "O(2 N_sa N_c (N sqrt(K) + K sqrt(N)) + 6 N_sa N_c K sqrt(K) + 2 K sqrt(K))",
            2.0 * nsa * nc * (n * k.sqrt() + k * n.sqrt()) + 6.0 * nsa * nc * k * k.sqrt() + 2.0 * k * k.sqrt(),
        ),
        (
            "SeDL",
            "K-HOSVD",
            "O(N^2 (S_0 N_sa N_c + N K) + 2 N_sa N_c N^3 S_0)",
            n * n * (s0 * nsa * nc + n * k) + 2.0 * nsa * nc * n.powi(3) * s0,
        ),
    ];
    rows.into_iter()
        .map(|(m, st, e, c)| ComplexityEntry {
            method: m.into(),
            stage: st.into(),
            expression: e.into(),
            count: c,
        })
        .collect()
}

/// Online sparse-coding cost of SeDL's own ADMM against CoDL's.
pub fn sedl_coding_cheaper(s: &ComplexitySizes) -> bool {
    let r = complexity_report(s);
    let find = |m: &str, st: &str| r.iter().find(|e| e.method == m && e.stage == st).map(|e| e.count);
    match (find("SeDL", "sparse coding (ADMM for SeDL)"), find("CoDL", "sparse coding")) {
        (Some(a), Some(b)) => a < b,
        _ => false,
    }
}

/// Greedy one-to-one matching of learned to reference atoms; returns the
/// fraction of reference atoms matched with `|<a, b>| > threshold`.
pub fn atom_recovery(learned: &CMatrix, reference: &CMatrix, threshold: f64) -> f64 {
    let mut l = learned.clone();
    let mut r = reference.clone();
    normalize_columns(&mut l);
    normalize_columns(&mut r);
    let g = r.adjoint() * &l;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(g.len());
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            pairs.push((g[(i, j)].norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used_r = vec![false; r.ncols()];
    let mut used_l = vec![false; l.ncols()];
    let mut hits = 0;
    for (v, i, j) in pairs {
        if used_r[i] || used_l[j] {
            continue;
        }
        used_r[i] = true;
        used_l[j] = true;
        if v > threshold {
            hits += 1;
        }
    }
    hits as f64 / r.ncols().max(1) as f64
}

/// Synthetic jointly-sparse data `Psi H`: every location draws `s0` atoms
/// shared by its `nc` columns, with CN(0,1) coefficients.
pub fn planted_codes<R: Rng + ?Sized>(k: usize, s0: usize, nc: usize, n_sa: usize, rng: &mut R) -> CMatrix {
    let mut h = CMatrix::zeros(k, nc * n_sa);
    let mut idx: Vec<usize> = (0..k).collect();
    for u in 0..n_sa {
        idx.shuffle(rng);
        for &a in idx.iter().take(s0) {
            for c in 0..nc {
                h[(a, u * nc + c)] = crate::tensor::sample_cn(rng, 1.0);
            }
        }
    }
    h
}
