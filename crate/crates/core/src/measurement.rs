//! Hybrid compressive training: precoders, combiners, sensing matrix,
//! repeated pilots with averaging, and noise whitening.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::io;
use crate::tensor::{hermitian_inv_sqrt, kron, pinv, rel_diff, sample_cn, vec, CMatrix, CTensor3, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Number of averaged frames `M`.
    pub frames: usize,
    #[serde(default = "one")]
    pub n_rep: usize,
    pub lt: usize,
    pub lr: usize,
    #[serde(default = "default_bits")]
    pub phase_bits: u32,
    pub snr_db: f64,
    /// Total transmit power.
    #[serde(default = "unit")]
    pub power: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_bits() -> u32 {
    2
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.n_rep == 0 || self.lt == 0 || self.lr == 0 {
            return arg_err("frame, repetition and RF chain counts must be positive");
        }
        if self.phase_bits == 0 || self.phase_bits > 16 {
            return arg_err(format!("phase bits {} outside 1..=16", self.phase_bits));
        }
        if !(self.power > 0.0) || !self.snr_db.is_finite() {
            return arg_err("power must be positive and SNR finite");
        }
        Ok(())
    }

    /// Per-antenna noise variance for the configured SNR.
    pub fn noise_var(&self) -> f64 {
        self.power / 10f64.powf(self.snr_db / 10.0)
    }

    /// Noise variance per measurement after averaging and whitening.
    pub fn effective_noise_var(&self) -> f64 {
        self.noise_var() / self.n_rep as f64
    }

    pub fn rows(&self) -> usize {
        self.frames * self.lr
    }
}

fn random_phase<R: Rng + ?Sized>(rng: &mut R, bits: u32) -> C64 {
    let levels = 1u32 << bits;
    let k = rng.random_range(0..levels);
    C64::from_polar(1.0, 2.0 * PI * k as f64 / levels as f64)
}

/// `n x l` matrix with entries `exp(j phase) / sqrt(n)`, phases on the
/// `bits`-bit grid.
pub fn random_hybrid_matrix<R: Rng + ?Sized>(n: usize, l: usize, bits: u32, rng: &mut R) -> CMatrix {
    let s = 1.0 / (n as f64).sqrt();
    CMatrix::from_fn(n, l, |_, _| random_phase(rng, bits) * s)
}

/// `(q^T F^T) kron W^*`, mapping `vec(H)` to `vec(W^* H F q)`.
pub fn sensing_row_block(f: &CMatrix, q: &CMatrix, w: &CMatrix) -> Result<CMatrix> {
    if f.ncols() != q.nrows() || q.ncols() != 1 {
        return dim_err(format!("precoder {:?} and vector {:?} do not conform", f.shape(), q.shape()));
    }
    kron(&(f * q).transpose(), &w.adjoint())
}

/// Precoders, combiners and the stacked sensing matrix shared by all locations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetup {
    pub config: TrainingConfig,
    pub precoders: Vec<CMatrix>,
    pub combiners: Vec<CMatrix>,
    pub vectors: Vec<CMatrix>,
    pub phi: CMatrix,
}

impl TrainingSetup {
    pub fn new(config: &TrainingConfig, nt: usize, nr: usize) -> Result<Self> {
        config.validate()?;
        if nt == 0 || nr == 0 {
            return arg_err("antenna counts must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let qs = (config.power / config.lt as f64).sqrt();
        let mut precoders = Vec::with_capacity(config.frames);
        let mut combiners = Vec::with_capacity(config.frames);
        let mut vectors = Vec::with_capacity(config.frames);
        let mut phi = CMatrix::zeros(config.rows(), nr * nt);
        for i in 0..config.frames {
            let f = random_hybrid_matrix(nt, config.lt, config.phase_bits, &mut rng);
            let w = random_hybrid_matrix(nr, config.lr, config.phase_bits, &mut rng);
            let q = CMatrix::from_fn(config.lt, 1, |_, _| random_phase(&mut rng, config.phase_bits) * qs);
            let block = sensing_row_block(&f, &q, &w)?;
            phi.rows_mut(i * config.lr, config.lr).copy_from(&block);
            precoders.push(f);
            combiners.push(w);
            vectors.push(q);
        }
        Ok(Self {
            config: config.clone(),
            precoders,
            combiners,
            vectors,
            phi,
        })
    }

    pub fn noise_grams(&self) -> Vec<CMatrix> {
        self.combiners.iter().map(|w| w.adjoint() * w).collect()
    }
}

fn qpsk<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let k = rng.random_range(0..4u32);
    C64::from_polar(1.0, PI / 4.0 + PI / 2.0 * k as f64)
}

/// Averaged, pilot-compensated measurements `M*Lr x Nc` for one channel.
///
/// Every frame is sent `n_rep` times with the same precoder, combiner and
/// pilot, each copy with fresh noise.
pub fn simulate_training<R: Rng + ?Sized>(freq: &[CMatrix], setup: &TrainingSetup, rng: &mut R) -> Result<CMatrix> {
    let cfg = &setup.config;
    let nc = freq.len();
    let (nr, nt) = match freq.first() {
        Some(h) => h.shape(),
        None => return dim_err("channel has no subcarriers"),
    };
    if setup.phi.ncols() != nr * nt {
        return dim_err(format!("sensing matrix expects {} channel entries, got {}", setup.phi.ncols(), nr * nt));
    }
    let sigma = cfg.noise_var().sqrt();
    let lr = cfg.lr;
    let mut y = CMatrix::zeros(cfg.rows(), nc);
    let mut z = CMatrix::zeros(nr, 1);
    for i in 0..cfg.frames {
        let w_h = setup.combiners[i].adjoint();
        let fq = &setup.precoders[i] * &setup.vectors[i];
        for c in 0..nc {
            let clean = &w_h * (&freq[c] * &fq);
            let t = qpsk(rng);
            let mut acc = CMatrix::zeros(lr, 1);
            for _ in 0..cfg.n_rep {
                for v in z.iter_mut() {
                    *v = sample_cn(rng, 1.0) * sigma;
                }
                let received = &clean * t + &w_h * &z;
                acc += received / t;
            }
            y.view_mut((i * lr, c), (lr, 1)).copy_from(&acc.unscale(cfg.n_rep as f64));
        }
    }
    Ok(y)
}

/// Block-diagonal `blkdiag{W_i^* W_i}^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningOperator {
    pub blocks: Vec<CMatrix>,
    /// True if some block was singular and pseudo-inverted.
    pub truncated: bool,
}

impl WhiteningOperator {
    pub fn from_grams(grams: &[CMatrix]) -> Result<Self> {
        let mut truncated = false;
        let mut blocks = Vec::with_capacity(grams.len());
        for g in grams {
            let (r, t) = hermitian_inv_sqrt(g, 1e-10)?;
            truncated |= t;
            blocks.push(r);
        }
        if truncated {
            log::info!("singular combiner Gram block; whitening uses a truncated root");
        }
        Ok(Self { blocks, truncated })
    }

    pub fn rows(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn apply(&self, m: &CMatrix) -> Result<CMatrix> {
        if m.nrows() != self.rows() {
            return dim_err(format!("whitening expects {} rows, got {}", self.rows(), m.nrows()));
        }
        let mut out = CMatrix::zeros(m.nrows(), m.ncols());
        let mut r0 = 0;
        for b in &self.blocks {
            let n = b.nrows();
            out.rows_mut(r0, n).copy_from(&(b * m.rows(r0, n)));
            r0 += n;
        }
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| rel_diff(b, &CMatrix::identity(b.nrows(), b.ncols())) < 1e-12)
    }
}

/// Measurements of several locations taken with one training setup.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementDataset {
    pub config: TrainingConfig,
    pub nr: usize,
    pub nt: usize,
    pub phi: CMatrix,
    /// `W_i^* W_i` per frame; identity once whitened.
    pub grams: Vec<CMatrix>,
    /// One `M*Lr x Nc` matrix per location.
    pub y: Vec<CMatrix>,
    /// True frequency responses per location, when known.
    pub truth: Vec<Vec<CMatrix>>,
}

pub fn simulate_dataset(channels: &[ChannelRealization], setup: &TrainingSetup, noise_seed: u64) -> Result<MeasurementDataset> {
    let Some(first) = channels.first() else {
        return arg_err("no channels to measure");
    };
    let (nr, nt) = (first.config.rx.n_antennas, first.config.tx.n_antennas);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut y = Vec::with_capacity(channels.len());
    for ch in channels {
        if (ch.config.rx.n_antennas, ch.config.tx.n_antennas) != (nr, nt) {
            return dim_err("locations differ in array size");
        }
        y.push(simulate_training(&ch.freq, setup, &mut rng)?);
    }
    Ok(MeasurementDataset {
        config: setup.config.clone(),
        nr,
        nt,
        phi: setup.phi.clone(),
        grams: setup.noise_grams(),
        y,
        truth: channels.iter().map(|c| c.freq.clone()).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainingConfig,
    nr: usize,
    nt: usize,
    n_locations: usize,
    n_subcarriers: usize,
    has_truth: bool,
}

impl MeasurementDataset {
    pub fn n_locations(&self) -> usize {
        self.y.len()
    }

    pub fn n_subcarriers(&self) -> usize {
        self.y.first().map_or(0, |m| m.ncols())
    }

    /// Variance of each whitened measurement entry.
    pub fn effective_noise_var(&self) -> f64 {
        self.config.effective_noise_var()
    }

    pub fn whitening_operator(&self) -> Result<WhiteningOperator> {
        WhiteningOperator::from_grams(&self.grams)
    }

    /// Dataset with whitened `Phi` and measurements and identity noise blocks.
    pub fn whitened(&self) -> Result<Self> {
        let op = self.whitening_operator()?;
        Ok(Self {
            phi: op.apply(&self.phi)?,
            grams: self.grams.iter().map(|g| CMatrix::identity(g.nrows(), g.ncols())).collect(),
            y: self.y.iter().map(|m| op.apply(m)).collect::<Result<_>>()?,
            ..self.clone()
        })
    }

    /// Subset of locations `range`.
    pub fn select(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            y: self.y[range.clone()].to_vec(),
            truth: if self.truth.is_empty() { Vec::new() } else { self.truth[range].to_vec() },
            ..self.clone()
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            config: self.config.clone(),
            nr: self.nr,
            nt: self.nt,
            n_locations: self.n_locations(),
            n_subcarriers: self.n_subcarriers(),
            has_truth: !self.truth.is_empty(),
        };
        io::save_json(&dir.join("dataset.json"), &manifest)?;
        io::save_cmatrix(&dir.join("phi.csv"), &self.phi)?;
        io::save_vec_rows(&dir.join("grams.csv"), &self.grams)?;
        io::save_vec_rows(&dir.join("y.csv"), &self.y)?;
        if manifest.has_truth {
            let flat: Vec<CMatrix> = self.truth.iter().flatten().cloned().collect();
            io::save_vec_rows(&dir.join("truth.csv"), &flat)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = io::load_json(&dir.join("dataset.json"))?;
        m.config.validate()?;
        let rows = m.config.rows();
        let phi = io::load_cmatrix(&dir.join("phi.csv"))?;
        if phi.shape() != (rows, m.nr * m.nt) {
            return Err(Error::Parse(format!("phi.csv has shape {:?}", phi.shape())));
        }
        let grams = io::load_vec_rows(&dir.join("grams.csv"), m.config.lr, m.config.lr)?;
        let y = io::load_vec_rows(&dir.join("y.csv"), rows, m.n_subcarriers)?;
        if grams.len() != m.config.frames || y.len() != m.n_locations {
            return Err(Error::Parse("dataset files disagree with the manifest".into()));
        }
        let truth = if m.has_truth {
            let flat = io::load_vec_rows(&dir.join("truth.csv"), m.nr, m.nt)?;
            if flat.len() != m.n_locations * m.n_subcarriers {
                return Err(Error::Parse("truth.csv has the wrong number of records".into()));
            }
            flat.chunks(m.n_subcarriers.max(1)).map(|c| c.to_vec()).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            config: m.config,
            nr: m.nr,
            nt: m.nt,
            phi,
            grams,
            y,
            truth,
        })
    }
}

/// Locations side by side: column `u * Nc + c` is subcarrier `c` of location `u`.
#[derive(Debug, Clone)]
pub struct StackedMeasurements {
    pub phi: CMatrix,
    pub y: CMatrix,
    pub n_subcarriers: usize,
    pub nr: usize,
    pub nt: usize,
}

impl StackedMeasurements {
    /// `Phi^+ Y` arranged as an `Nr x Nt x (Nc Nsa)` tensor whose frontal
    /// slices are channel-domain observations.
    pub fn tensor(&self) -> Result<CTensor3> {
        let proj = pinv(&self.phi) * &self.y;
        CTensor3::refold(&proj.transpose(), 3, [self.nr, self.nt, proj.ncols()])
    }
}

pub fn stack_locations(datasets: &[&MeasurementDataset]) -> Result<StackedMeasurements> {
    let Some(first) = datasets.first() else {
        return arg_err("nothing to stack");
    };
    let nc = first.n_subcarriers();
    for d in datasets {
        if d.phi.shape() != first.phi.shape() || rel_diff(&d.phi, &first.phi) > 1e-12 {
            return dim_err("datasets were measured with different sensing matrices");
        }
        if d.n_subcarriers() != nc {
            return dim_err("datasets differ in subcarrier count");
        }
    }
    let blocks: Vec<&CMatrix> = datasets.iter().flat_map(|d| d.y.iter()).collect();
    let mut y = CMatrix::zeros(first.phi.nrows(), blocks.len() * nc);
    for (u, b) in blocks.iter().enumerate() {
        y.columns_mut(u * nc, nc).copy_from(*b);
    }
    Ok(StackedMeasurements {
        phi: first.phi.clone(),
        y,
        n_subcarriers: nc,
        nr: first.nr,
        nt: first.nt,
    })
}

/// Noiseless measurements `Phi [vec H[0] ... vec H[Nc-1]]`.
pub fn noiseless(phi: &CMatrix, freq: &[CMatrix]) -> CMatrix {
    let mut hs = CMatrix::zeros(phi.ncols(), freq.len());
    for (c, h) in freq.iter().enumerate() {
        hs.set_column(c, &vec(h).column(0));
    }
    phi * hs
}
