//! Estimation metrics and the Monte-Carlo driver comparing dictionaries and
//! solvers on simulated links.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{sample_impairments, ArraySpec, Geometry, ImpairmentProfile, ImpairmentRealization};
use crate::channel::{virtual_dictionary, AngleGrid, ChannelConfig, ChannelRealization};
use crate::crlb::{total_crlb, CrlbConfig};
use crate::dict::{init_dictionary, learn, Coder, Dictionary, InitKind, LearnConfig, LearnState, TrainingSet, Updater};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::measurement::{simulate_dataset, MeasurementDataset, TrainingConfig, TrainingSetup};
use crate::sparse::{estimate_channel, AdmmParams, Solver};
use crate::tensor::{conj, fro_sqr, kron, l21_norm, singular_values, svd, CMatrix};

/// `(1/Nc) sum_c ||Hhat[c] - H[c]||_F^2 / ||H[c]||_F^2`.
pub fn nmse(truth: &[CMatrix], est: &[CMatrix]) -> Result<f64> {
    if truth.is_empty() || truth.len() != est.len() {
        return dim_err(format!("{} true and {} estimated subcarriers", truth.len(), est.len()));
    }
    let mut acc = 0.0;
    for (h, e) in truth.iter().zip(est) {
        if h.shape() != e.shape() {
            return dim_err("estimate and truth differ in shape");
        }
        let den = fro_sqr(h);
        if den == 0.0 {
            return arg_err("true channel has zero norm");
        }
        acc += fro_sqr(&(e - h)) / den;
    }
    Ok(acc / truth.len() as f64)
}

/// Rate of `ns` streams over the true channel when precoder and combiner are
/// the dominant singular vectors of the estimate, in bit/s/Hz.
pub fn spectral_efficiency(truth: &[CMatrix], est: &[CMatrix], ns: usize, snr: f64) -> Result<f64> {
    if truth.is_empty() || truth.len() != est.len() {
        return dim_err(format!("{} true and {} estimated subcarriers", truth.len(), est.len()));
    }
    let mut acc = 0.0;
    for (h, e) in truth.iter().zip(est) {
        if h.shape() != e.shape() {
            return dim_err("estimate and truth differ in shape");
        }
        if ns == 0 || ns > h.nrows().min(h.ncols()) {
            return arg_err(format!("{ns} streams on a {}x{} channel", h.nrows(), h.ncols()));
        }
        let d = svd(e)?;
        let u1 = d.u.columns(0, ns);
        let v1 = d.v_t.rows(0, ns).adjoint();
        let eff = u1.adjoint() * h * v1;
        let sv = singular_values(&eff)?;
        acc += sv.iter().map(|l| (1.0 + snr / ns as f64 * l * l).log2()).sum::<f64>();
    }
    Ok(acc / truth.len() as f64)
}

/// Empirical CDF as `(value, P[X <= value])` at each distinct value.
pub fn l21_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.len() < 2 {
        return arg_err("an empirical CDF needs at least two samples");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return arg_err("non-finite sample");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let p = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = p,
            _ => out.push((*x, p)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Omp,
    Swomp,
    Admm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictKind {
    Iarm,
    Codl,
    Sedl,
    /// Array response on the same grid built with the true impairments.
    Aware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Case {
    pub solver: SolverKind,
    pub dictionary: DictKind,
}

impl Case {
    pub const fn new(solver: SolverKind, dictionary: DictKind) -> Self {
        Self { solver, dictionary }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.solver {
            SolverKind::Omp => "omp",
            SolverKind::Swomp => "swomp",
            SolverKind::Admm => "admm",
        };
        let d = match self.dictionary {
            DictKind::Iarm => "iarm",
            DictKind::Codl => "codl",
            DictKind::Sedl => "sedl",
            DictKind::Aware => "aware",
        };
        write!(f, "{s}+{d}")
    }
}

/// Dictionary-learning knobs shared by CoDL and SeDL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnSettings {
    /// Sparsity weight relative to the noise-level threshold.
    pub w1_scale: f64,
    pub w2: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub updater: Updater,
    pub init: LearnInit,
    pub coder: Coder,
    /// Coder for CoDL when it should differ from `coder`.
    pub codl_coder: Option<Coder>,
    /// Start CoDL from the learned separable dictionary instead of `init`.
    pub codl_from_sedl: bool,
    /// Training frames and SNR of the learning phase.
    pub frames: usize,
    pub snr_db: f64,
}

/// Starting dictionary of a learning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnInit {
    /// The ideal array response dictionary, in the structure being learned.
    Iarm,
    Dia,
    Data,
}

impl Default for LearnSettings {
    fn default() -> Self {
        Self {
            w1_scale: 1.0,
            w2: 1.0,
            max_iter: 20,
            rel_tol: 1e-4,
            updater: Updater::Ksvd,
            init: LearnInit::Iarm,
            coder: Coder::Swomp { k_max: 4 },
            codl_coder: None,
            codl_from_sedl: false,
            frames: 60,
            snr_db: 0.0,
        }
    }
}

/// Sparse-recovery knobs for the estimation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationSettings {
    /// ADMM weight relative to the noise-level threshold.
    pub admm_w1_scale: f64,
    pub admm_rho: f64,
    pub admm_max_iter: usize,
    pub admm_tol: f64,
    /// Greedy iteration cap; the residual test usually stops earlier.
    pub k_max: usize,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            admm_w1_scale: 1.0,
            admm_rho: 1.0,
            admm_max_iter: 500,
            admm_tol: 1e-6,
            k_max: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub geometry: Geometry,
    pub nt: usize,
    pub nr: usize,
    pub lt: usize,
    pub lr: usize,
    pub ns: usize,
    pub kt: usize,
    pub kr: usize,
    pub n_subcarriers: usize,
    pub n_taps: usize,
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    /// Training frame counts `M`.
    pub frames: Vec<usize>,
    pub n_rep: usize,
    pub snr_db: Vec<f64>,
    pub impairments: ImpairmentProfile,
    pub grid: AngleGrid,
    /// Training locations per learning run (`N_sa`).
    pub n_train: usize,
    /// Independent hardware realizations; trial `t` uses realization `t % realizations`.
    pub realizations: usize,
    /// Test locations per grid point.
    pub trials: usize,
    pub cases: Vec<Case>,
    pub learn: LearnSettings,
    pub estimation: EstimationSettings,
    /// Also evaluate the channel CRLB of every test point.
    pub crlb: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        use DictKind::*;
        use SolverKind::*;
        Self {
            geometry: Geometry::Ula,
            nt: 8,
            nr: 4,
            lt: 2,
            lr: 2,
            ns: 2,
            kt: 16,
            kr: 8,
            n_subcarriers: 16,
            n_taps: 4,
            n_clusters: 2,
            rays_per_cluster: 1,
            frames: vec![10, 20, 40, 60],
            n_rep: 10,
            snr_db: vec![0.0],
            impairments: ImpairmentProfile::default(),
            grid: AngleGrid::Angle,
            n_train: 20,
            realizations: 10,
            trials: 50,
            cases: vec![
                Case::new(Omp, Iarm),
                Case::new(Swomp, Iarm),
                Case::new(Admm, Iarm),
                Case::new(Swomp, Codl),
                Case::new(Admm, Codl),
                Case::new(Swomp, Sedl),
                Case::new(Admm, Sedl),
            ],
            learn: LearnSettings::default(),
            estimation: EstimationSettings::default(),
            crlb: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Small configuration that runs in well under a minute.
    pub fn smoke() -> Self {
        Self {
            n_train: 10,
            frames: vec![20],
            realizations: 1,
            trials: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("nt", self.nt),
            ("nr", self.nr),
            ("lt", self.lt),
            ("lr", self.lr),
            ("ns", self.ns),
            ("kt", self.kt),
            ("kr", self.kr),
            ("n_subcarriers", self.n_subcarriers),
            ("n_taps", self.n_taps),
            ("n_clusters", self.n_clusters),
            ("rays_per_cluster", self.rays_per_cluster),
            ("n_rep", self.n_rep),
            ("n_train", self.n_train),
            ("realizations", self.realizations),
            ("trials", self.trials),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return arg_err(format!("{name} must be positive"));
            }
        }
        if self.frames.is_empty() || self.snr_db.is_empty() || self.cases.is_empty() {
            return arg_err("frame grid, SNR grid and case list must be nonempty");
        }
        if self.frames.contains(&0) || self.learn.frames == 0 {
            return arg_err("frame counts must be positive");
        }
        if self.snr_db.iter().chain([&self.learn.snr_db]).any(|s| !s.is_finite()) {
            return arg_err("SNR values must be finite");
        }
        if self.ns > self.nt.min(self.nr) {
            return arg_err(format!("ns = {} exceeds min(nt, nr)", self.ns));
        }
        if self.kt < self.nt || self.kr < self.nr {
            return arg_err("atom counts must be at least the array sizes");
        }
        if self.lt > self.nt || self.lr > self.nr {
            return arg_err("more RF chains than antennas");
        }
        if self.estimation.k_max == 0 {
            return arg_err("k_max must be positive");
        }
        AdmmParams {
            w1: self.estimation.admm_w1_scale,
            rho: self.estimation.admm_rho,
            max_iter: self.estimation.admm_max_iter,
            tol: self.estimation.admm_tol,
        }
        .validate()?;
        self.channel_config().validate()
    }

    pub fn array(&self, n: usize) -> ArraySpec {
        match self.geometry {
            Geometry::Ula => ArraySpec::ula(n),
            Geometry::Uca => ArraySpec::uca(n),
        }
    }

    pub fn channel_config(&self) -> ChannelConfig {
        let mut c = ChannelConfig::new(
            self.array(self.nt),
            self.array(self.nr),
            self.n_clusters,
            self.n_taps,
            self.n_subcarriers,
        );
        c.rays_per_cluster = self.rays_per_cluster;
        c
    }

    pub fn training_config(&self, frames: usize, snr_db: f64, seed: u64) -> TrainingConfig {
        TrainingConfig {
            frames,
            n_rep: self.n_rep,
            lt: self.lt,
            lr: self.lr,
            phase_bits: 2,
            snr_db,
            power: 1.0,
            seed,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.cases.len() * self.frames.len() * self.snr_db.len() * self.trials
    }
}

/// Independent seed for the stream labelled by `path`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |s, &p| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rng.set_stream(p);
        rng.next_u64()
    })
}

const TAG_HW: u64 = 1;
const TAG_SETUP: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_TRAIN_NOISE: u64 = 4;
const TAG_TEST: u64 = 5;
const TAG_TEST_NOISE: u64 = 6;
const TAG_LEARN: u64 = 7;
const TAG_SETUP_DL: u64 = 8;

/// `2 sqrt(sigma2 * Nc)` times the mean column norm of `a`: the level at
/// which pure noise stops activating a row of the codes.
pub fn noise_threshold(a: &CMatrix, sigma2: f64, nc: usize) -> f64 {
    let mean_norm = a.column_iter().map(|c| c.norm()).sum::<f64>() / a.ncols().max(1) as f64;
    2.0 * (sigma2 * nc as f64).sqrt() * mean_norm
}

/// Ideal array response dictionary `conj(A_T) kron A_R` on uniform angle grids.
pub fn iarm_dictionary(cfg: &ExperimentConfig) -> Result<CMatrix> {
    let at = virtual_dictionary(&cfg.array(cfg.nt), cfg.kt, None, cfg.grid)?;
    let ar = virtual_dictionary(&cfg.array(cfg.nr), cfg.kr, None, cfg.grid)?;
    kron(&conj(&at), &ar)
}

/// The IARM grid pushed through known hardware impairments.
pub fn aware_dictionary(cfg: &ExperimentConfig, rx: &ImpairmentRealization, tx: &ImpairmentRealization) -> Result<CMatrix> {
    let at = virtual_dictionary(&cfg.array(cfg.nt), cfg.kt, Some(tx), cfg.grid)?;
    let ar = virtual_dictionary(&cfg.array(cfg.nr), cfg.kr, Some(rx), cfg.grid)?;
    kron(&conj(&at), &ar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub case: String,
    pub frames: usize,
    pub snr_db: f64,
    pub trial: usize,
    pub realization: usize,
    pub nmse: Option<f64>,
    pub se: Option<f64>,
    pub se_perfect: Option<f64>,
    /// l2/l1 norm of the codes in the case's dictionary.
    pub l21: Option<f64>,
    pub crlb: Option<f64>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

impl ResultRow {
    /// Equality ignoring timing.
    pub fn same_result(&self, other: &Self) -> bool {
        Self { wall_ms: 0.0, ..self.clone() } == Self { wall_ms: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnRecord {
    pub method: String,
    pub realization: usize,
    pub frames: usize,
    pub snr_db: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: Option<f64>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Half-width of the normal-approximation 95 % interval.
    pub ci95: f64,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            std,
            ci95: 1.96 * std / (n as f64).sqrt(),
        })
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.ci95
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub case: String,
    pub frames: usize,
    pub snr_db: f64,
    pub failures: usize,
    pub nmse: Option<MeanCi>,
    pub se: Option<MeanCi>,
    pub se_perfect: Option<MeanCi>,
    pub l21: Option<MeanCi>,
    pub crlb: Option<MeanCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub learning: Vec<LearnRecord>,
}

impl ResultTable {
    pub fn rows_for<'a>(&'a self, case: &'a str, frames: usize, snr_db: f64) -> impl Iterator<Item = &'a ResultRow> {
        self.rows
            .iter()
            .filter(move |r| r.case == case && r.frames == frames && r.snr_db == snr_db)
    }

    /// Successful values of `metric` at one grid point, in trial order.
    pub fn values(&self, case: Case, frames: usize, snr_db: f64, metric: fn(&ResultRow) -> Option<f64>) -> Vec<f64> {
        let label = case.to_string();
        self.rows_for(&label, frames, snr_db).filter_map(metric).collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for &frames in &self.config.frames {
            for &snr_db in &self.config.snr_db {
                for case in &self.config.cases {
                    let label = case.to_string();
                    let rows: Vec<&ResultRow> = self.rows_for(&label, frames, snr_db).collect();
                    let stat = |f: fn(&ResultRow) -> Option<f64>| {
                        MeanCi::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                    };
                    out.push(SummaryRow {
                        case: label.clone(),
                        frames,
                        snr_db,
                        failures: rows.iter().filter(|r| r.error.is_some()).count(),
                        nmse: stat(|r| r.nmse),
                        se: stat(|r| r.se),
                        se_perfect: stat(|r| r.se_perfect),
                        l21: stat(|r| r.l21),
                        crlb: stat(|r| r.crlb),
                    });
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    /// `results.csv`, `summary.json` and `learning.json` in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(&dir.join("results.csv"))?;
        crate::io::save_json(&dir.join("summary.json"), &self.summary())?;
        crate::io::save_json(&dir.join("learning.json"), &self.learning)?;
        crate::io::save_json(&dir.join("config.json"), &self.config)
    }
}

struct Hardware {
    rx: ImpairmentRealization,
    tx: ImpairmentRealization,
}

struct Learned {
    codl: std::result::Result<CMatrix, String>,
    sedl: std::result::Result<CMatrix, String>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn learn_one(
    method: DictKind,
    data: &TrainingSet,
    cfg: &ExperimentConfig,
    seed: u64,
    sigma2: f64,
    iarm: &CMatrix,
    start: Option<&CMatrix>,
) -> (std::result::Result<CMatrix, String>, LearnRecord) {
    let t0 = Instant::now();
    let a = data.phi.as_ref().map_or_else(|| iarm.clone(), |p| p * iarm);
    let mut lc = LearnConfig::new(cfg.kr, cfg.kt);
    // the denoising stage leaves an effective data weight of w2 / (1 + w2)
    let fidelity = cfg.learn.w2 / (1.0 + cfg.learn.w2);
    lc.w1 = cfg.learn.w1_scale * fidelity * noise_threshold(&a, sigma2, cfg.n_subcarriers);
    lc.w2 = cfg.learn.w2;
    lc.max_iter = cfg.learn.max_iter;
    lc.rel_tol = cfg.learn.rel_tol;
    lc.updater = cfg.learn.updater;
    lc.coder = match (method, cfg.learn.codl_coder) {
        (DictKind::Codl, Some(c)) => c,
        _ => cfg.learn.coder,
    };
    lc.seed = seed;
    let separable = method == DictKind::Sedl;
    let run = (|| -> Result<(Dictionary, LearnState)> {
        let init = match cfg.learn.init {
            _ if start.is_some() && !separable => Dictionary::Combined {
                psi: start.expect("checked").clone(),
            },
            LearnInit::Iarm if separable => Dictionary::Separable {
                dr: virtual_dictionary(&cfg.array(cfg.nr), cfg.kr, None, cfg.grid)?,
                dt: virtual_dictionary(&cfg.array(cfg.nt), cfg.kt, None, cfg.grid)?,
            },
            LearnInit::Iarm => Dictionary::Combined { psi: iarm.clone() },
            LearnInit::Dia | LearnInit::Data => {
                lc.init = if cfg.learn.init == LearnInit::Dia { InitKind::Dia } else { InitKind::Data };
                init_dictionary(data, &lc, separable)?
            }
        };
        let st = learn(data, &lc, LearnState::initial(data, &lc, init)?)?;
        Ok((st.dictionary.clone(), st))
    })();
    let name = if method == DictKind::Codl { "codl" } else { "sedl" };
    let mut rec = LearnRecord {
        method: name.into(),
        realization: 0,
        frames: 0,
        snr_db: 0.0,
        iterations: 0,
        converged: false,
        final_objective: None,
        wall_ms: 0.0,
        error: None,
    };
    let out = match run.and_then(|(d, st)| Ok((d.psi()?, st))) {
        Ok((psi, st)) => {
            rec.iterations = st.iteration;
            rec.converged = st.converged;
            rec.final_objective = st.objective_trace.last().copied();
            Ok(psi)
        }
        Err(e) => {
            log::warn!("{name} learning failed: {e}");
            rec.error = Some(e.to_string());
            Err(e.to_string())
        }
    };
    rec.wall_ms = ms(t0);
    (out, rec)
}

fn solver_for(kind: SolverKind, est: &EstimationSettings, a: &CMatrix, sigma2: f64, nc: usize) -> Solver {
    match kind {
        SolverKind::Omp => Solver::Omp { k_max: est.k_max, tol: None },
        SolverKind::Swomp => Solver::Swomp { k_max: est.k_max, tol: None },
        SolverKind::Admm => Solver::Admm(AdmmParams {
            w1: est.admm_w1_scale * noise_threshold(a, sigma2, nc),
            rho: est.admm_rho,
            max_iter: est.admm_max_iter,
            tol: est.admm_tol,
        }),
    }
}

struct Point<'a> {
    cfg: &'a ExperimentConfig,
    realization: usize,
    frames: usize,
    snr_db: f64,
    setup: &'a TrainingSetup,
    hw: &'a Hardware,
    iarm: &'a CMatrix,
    aware: &'a CMatrix,
    learned: &'a Learned,
}

fn evaluate_trial(p: &Point, trial: usize) -> Vec<ResultRow> {
    let cfg = p.cfg;
    let row = |case: &Case| ResultRow {
        case: case.to_string(),
        frames: p.frames,
        snr_db: p.snr_db,
        trial,
        realization: p.realization,
        nmse: None,
        se: None,
        se_perfect: None,
        l21: None,
        crlb: None,
        wall_ms: 0.0,
        error: None,
    };
    let test = (|| -> Result<(ChannelRealization, MeasurementDataset)> {
        let ch = ChannelRealization::generate(
            &cfg.channel_config(),
            &p.hw.rx,
            &p.hw.tx,
            derive_seed(cfg.seed, &[TAG_TEST, trial as u64]),
        )?;
        let noise = derive_seed(cfg.seed, &[TAG_TEST_NOISE, trial as u64, p.frames as u64, p.snr_db.to_bits()]);
        let ds = simulate_dataset(std::slice::from_ref(&ch), p.setup, noise)?;
        Ok((ch, ds))
    })();
    let (ch, ds) = match test {
        Ok(v) => v,
        Err(e) => {
            return cfg
                .cases
                .iter()
                .map(|c| ResultRow {
                    error: Some(e.to_string()),
                    ..row(c)
                })
                .collect()
        }
    };
    let snr = 10f64.powf(p.snr_db / 10.0);
    let se_perfect = spectral_efficiency(&ch.freq, &ch.freq, cfg.ns, snr).ok();
    let crlb = if cfg.crlb {
        total_crlb(&ds, &ch, &CrlbConfig::default())
            .map_err(|e| log::warn!("CRLB failed on trial {trial}: {e}"))
            .ok()
            .map(|r| r.crlb)
    } else {
        None
    };
    let sigma2 = ds.effective_noise_var();
    let phi_w = match ds.whitened() {
        Ok(w) => w.phi,
        Err(e) => {
            return cfg
                .cases
                .iter()
                .map(|c| ResultRow {
                    error: Some(e.to_string()),
                    ..row(c)
                })
                .collect()
        }
    };
    cfg.cases
        .iter()
        .map(|case| {
            let t0 = Instant::now();
            let mut r = row(case);
            r.se_perfect = se_perfect;
            r.crlb = crlb;
            let psi = match case.dictionary {
                DictKind::Iarm => Ok(p.iarm),
                DictKind::Aware => Ok(p.aware),
                DictKind::Codl => p.learned.codl.as_ref(),
                DictKind::Sedl => p.learned.sedl.as_ref(),
            };
            let outcome = psi.map_err(|e| format!("dictionary unavailable: {e}")).and_then(|psi| {
                let solver = solver_for(case.solver, &cfg.estimation, &(&phi_w * psi), sigma2, cfg.n_subcarriers);
                let est = estimate_channel(&ds, psi, &solver).map_err(|e| e.to_string())?;
                let h = &est.channels[0];
                let nm = nmse(&ch.freq, h).map_err(|e| e.to_string())?;
                let se = spectral_efficiency(&ch.freq, h, cfg.ns, snr).map_err(|e| e.to_string())?;
                Ok((nm, se, l21_norm(&est.codes[0].coefficients)))
            });
            match outcome {
                Ok((nm, se, l21)) => {
                    r.nmse = Some(nm);
                    r.se = Some(se);
                    r.l21 = Some(l21);
                }
                Err(e) => {
                    log::warn!("case {case} failed on trial {trial}: {e}");
                    r.error = Some(e);
                }
            }
            r.wall_ms = ms(t0);
            r
        })
        .collect()
}

/// Runs every case over the frame and SNR grids. Dictionaries are learned
/// once per hardware realization from `n_train` locations measured with the
/// learning-phase budget, then reused for every test trial on that hardware.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let iarm = iarm_dictionary(cfg)?;
    let per_realization: Vec<(Vec<ResultRow>, Vec<LearnRecord>)> = (0..cfg.realizations)
        .into_par_iter()
        .map(|r| run_realization(cfg, &iarm, r))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cfg.n_rows());
    let mut learning = Vec::new();
    for (rr, lr) in per_realization {
        rows.extend(rr);
        learning.extend(lr);
    }
    let pos = |v: &[f64], x: f64| v.iter().position(|&y| y == x).unwrap_or(usize::MAX);
    let frames: Vec<f64> = cfg.frames.iter().map(|&m| m as f64).collect();
    // stable, so the case order inside a trial survives
    rows.sort_by_key(|row| (pos(&frames, row.frames as f64), pos(&cfg.snr_db, row.snr_db), row.trial));
    Ok(ResultTable {
        config: cfg.clone(),
        rows,
        learning,
    })
}

fn learn_dictionaries(cfg: &ExperimentConfig, iarm: &CMatrix, hw: &Hardware, r: usize) -> Result<(Learned, Vec<LearnRecord>)> {
    let needs = |d: DictKind| cfg.cases.iter().any(|c| c.dictionary == d);
    let (need_codl, need_sedl) = (needs(DictKind::Codl), needs(DictKind::Sedl));
    let mut learned = Learned {
        codl: Err("not requested".into()),
        sedl: Err("not requested".into()),
    };
    let mut records = Vec::new();
    if !need_codl && !need_sedl {
        return Ok((learned, records));
    }
    let ri = r as u64;
    let ch_cfg = cfg.channel_config();
    let tc = cfg.training_config(cfg.learn.frames, cfg.learn.snr_db, derive_seed(cfg.seed, &[TAG_SETUP_DL, ri]));
    let setup = TrainingSetup::new(&tc, cfg.nt, cfg.nr)?;
    let train = (0..cfg.n_train)
        .map(|j| ChannelRealization::generate(&ch_cfg, &hw.rx, &hw.tx, derive_seed(cfg.seed, &[TAG_TRAIN, ri, j as u64])))
        .collect::<Result<Vec<_>>>()?;
    let ds = simulate_dataset(&train, &setup, derive_seed(cfg.seed, &[TAG_TRAIN_NOISE, ri]))?;
    let data = TrainingSet::from_dataset(&ds)?;
    let sigma2 = ds.effective_noise_var();
    let lseed = derive_seed(cfg.seed, &[TAG_LEARN, ri]);
    let chain = need_codl && cfg.learn.codl_from_sedl;
    for (want, kind) in [(need_sedl || chain, DictKind::Sedl), (need_codl, DictKind::Codl)] {
        if !want {
            continue;
        }
        let start = if kind == DictKind::Codl && chain { learned.sedl.as_ref().ok() } else { None };
        let (psi, mut rec) = learn_one(kind, &data, cfg, lseed, sigma2, iarm, start);
        rec.realization = r;
        rec.frames = cfg.learn.frames;
        rec.snr_db = cfg.learn.snr_db;
        records.push(rec);
        match kind {
            DictKind::Codl => learned.codl = psi,
            _ => learned.sedl = psi,
        }
    }
    Ok((learned, records))
}

fn run_realization(cfg: &ExperimentConfig, iarm: &CMatrix, r: usize) -> Result<(Vec<ResultRow>, Vec<LearnRecord>)> {
    let ch_cfg = cfg.channel_config();
    let ri = r as u64;
    let hw = Hardware {
        rx: sample_impairments(&ch_cfg.rx, derive_seed(cfg.seed, &[TAG_HW, ri, 0]), &cfg.impairments),
        tx: sample_impairments(&ch_cfg.tx, derive_seed(cfg.seed, &[TAG_HW, ri, 1]), &cfg.impairments),
    };
    let aware = aware_dictionary(cfg, &hw.rx, &hw.tx)?;
    let (learned, records) = learn_dictionaries(cfg, iarm, &hw, r)?;
    let trials: Vec<usize> = (r..cfg.trials).step_by(cfg.realizations).collect();
    let mut rows = Vec::new();
    for (fi, &frames) in cfg.frames.iter().enumerate() {
        for (si, &snr_db) in cfg.snr_db.iter().enumerate() {
            let tc = cfg.training_config(frames, snr_db, derive_seed(cfg.seed, &[TAG_SETUP, ri, fi as u64, si as u64]));
            let setup = TrainingSetup::new(&tc, cfg.nt, cfg.nr)?;
            let point = Point {
                cfg,
                realization: r,
                frames,
                snr_db,
                setup: &setup,
                hw: &hw,
                iarm,
                aware: &aware,
                learned: &learned,
            };
            let out: Vec<ResultRow> = trials.par_iter().flat_map_iter(|&t| evaluate_trial(&point, t)).collect();
            rows.extend(out);
        }
    }
    Ok((rows, records))
}

/// Runs `run_experiment` on a pool of at most `threads` workers.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ResultTable> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_cn, C64};
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn channels(n: usize, nr: usize, nt: usize, seed: u64) -> Vec<CMatrix> {
        let mut g = rng(seed);
        (0..n).map(|_| random_cn(nr, nt, &mut g)).collect()
    }

    #[test]
    fn nmse_examples() {
        let h = channels(4, 3, 5, 1);
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        let zero: Vec<CMatrix> = h.iter().map(|m| m * C64::new(0.0, 0.0)).collect();
        assert_relative_eq!(nmse(&h, &zero).unwrap(), 1.0, epsilon = 1e-15);
        let mut g = rng(2);
        let delta = 0.3;
        let est: Vec<CMatrix> = h
            .iter()
            .map(|m| {
                let e = random_cn(3, 5, &mut g);
                let e = &e * C64::new(m.norm() / e.norm(), 0.0);
                m + e * C64::new(delta, 0.0)
            })
            .collect();
        assert_relative_eq!(nmse(&h, &est).unwrap(), delta * delta, max_relative = 1e-12);
        assert!(nmse(&zero, &h).is_err());
        assert!(nmse(&h, &h[..2]).is_err());
    }

    #[test]
    fn perfect_csi_matches_singular_values() {
        let h = channels(3, 4, 6, 3);
        let (ns, snr) = (2, 5.0);
        let expected: f64 = h
            .iter()
            .map(|m| {
                let mut ev: Vec<f64> = (m * m.adjoint()).symmetric_eigen().eigenvalues.iter().copied().collect();
                ev.sort_by(|a, b| b.total_cmp(a));
                ev[..ns].iter().map(|l| (1.0 + snr / ns as f64 * l).log2()).sum::<f64>()
            })
            .sum::<f64>()
            / 3.0;
        assert_relative_eq!(spectral_efficiency(&h, &h, ns, snr).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn se_limits() {
        let h = channels(2, 4, 4, 4);
        assert!(spectral_efficiency(&h, &h, 2, 1e-14).unwrap() < 1e-12);
        // rank-2 truth living on the first two coordinates, estimate on the last two
        let mut g = rng(5);
        let mut truth = CMatrix::zeros(4, 4);
        truth.view_mut((0, 0), (2, 2)).copy_from(&random_cn(2, 2, &mut g));
        let mut wrong = CMatrix::zeros(4, 4);
        wrong.view_mut((2, 2), (2, 2)).copy_from(&random_cn(2, 2, &mut g));
        let se = spectral_efficiency(&[truth.clone()], &[wrong], 2, 100.0).unwrap();
        assert!(se < 1e-12, "{se}");
        assert!(spectral_efficiency(&[truth.clone()], &[truth], 5, 1.0).is_err());
    }

    #[test]
    fn perfect_csi_bounds_any_estimate() {
        let h = channels(3, 4, 6, 6);
        let best = spectral_efficiency(&h, &h, 2, 10.0).unwrap();
        for s in 0..20 {
            let e = channels(3, 4, 6, 100 + s);
            assert!(spectral_efficiency(&h, &e, 2, 10.0).unwrap() <= best + 1e-12);
        }
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(l21_cdf(&[2.0, 2.0, 2.0]).unwrap(), vec![(2.0, 1.0)]);
        let c = l21_cdf(&[3.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(c, vec![(1.0, 0.5), (2.0, 0.75), (3.0, 1.0)]);
        assert!(l21_cdf(&[1.0]).is_err());
    }

    #[test]
    fn mean_ci() {
        let s = MeanCi::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_relative_eq!(s.ci95, 1.96 / 3f64.sqrt());
        assert!(MeanCi::of(&[]).is_none());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, &[1, 2]);
        assert_eq!(a, derive_seed(7, &[1, 2]));
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig {
            frames: vec![],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            kt: 4,
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&ExperimentConfig::default()).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ExperimentConfig::default());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"nt": 4, "kt": 8}"#).unwrap();
        assert_eq!((partial.nt, partial.kt, partial.nr), (4, 8, 4));
    }

    #[test]
    fn iarm_noiseless_on_grid_is_exact() {
        // ideal hardware, every path on a dictionary angle, negligible noise
        let cfg = ExperimentConfig {
            impairments: ImpairmentProfile::ideal(),
            n_clusters: 2,
            ..ExperimentConfig::default()
        };
        let ch_cfg = cfg.channel_config();
        let mut paths = crate::channel::sample_paths(&ch_cfg, 11);
        let gt = crate::channel::grid_angles(&ch_cfg.tx, cfg.kt, cfg.grid);
        let gr = crate::channel::grid_angles(&ch_cfg.rx, cfg.kr, cfg.grid);
        paths.aod = vec![gt[3], gt[11]];
        paths.aoa = vec![gr[2], gr[6]];
        let ideal = ImpairmentRealization::ideal(cfg.nt);
        let ch = ChannelRealization::from_paths(ch_cfg, paths, ImpairmentRealization::ideal(cfg.nr), ideal).unwrap();
        let setup = TrainingSetup::new(&cfg.training_config(60, 200.0, 3), cfg.nt, cfg.nr).unwrap();
        let ds = simulate_dataset(std::slice::from_ref(&ch), &setup, 4).unwrap();
        let iarm = iarm_dictionary(&cfg).unwrap();
        let est = estimate_channel(&ds, &iarm, &Solver::Swomp { k_max: 2, tol: None }).unwrap();
        assert!(nmse(&ch.freq, &est.channels[0]).unwrap() < 1e-12);
    }

    #[test]
    fn smoke_run_is_complete_and_reproducible() {
        let cfg = ExperimentConfig {
            learn: LearnSettings {
                max_iter: 3,
                ..LearnSettings::default()
            },
            ..ExperimentConfig::smoke()
        };
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows.len(), cfg.n_rows());
        assert!(a.rows.iter().all(|r| r.error.is_none()));
        for r in &a.rows {
            assert!(r.nmse.unwrap() >= 0.0);
            assert!(r.se.unwrap() >= 0.0);
            assert!(r.se.unwrap() <= r.se_perfect.unwrap() + 1e-9);
        }
        let b = run_experiment_with_threads(&cfg, 1).unwrap();
        assert!(a.rows.iter().zip(&b.rows).all(|(x, y)| x.same_result(y)));
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = ResultTable::read_csv(&dir.path().join("results.csv")).unwrap();
        assert!(a.rows.iter().zip(&back).all(|(x, y)| x.same_result(y)));
        assert_eq!(a.summary().len(), cfg.cases.len());
    }
}
