//! Geometric frequency-selective channels seen through impaired arrays.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{effective_response, steering_vector, ArraySpec, ImpairmentRealization};
use crate::error::{arg_err, dim_err, Result};
use crate::io;
use crate::tensor::{diag, normalize_columns, sample_cn, CMatrix, C64, J, ZERO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub tx: ArraySpec,
    pub rx: ArraySpec,
    pub n_clusters: usize,
    #[serde(default = "one")]
    pub rays_per_cluster: usize,
    pub n_taps: usize,
    pub n_subcarriers: usize,
    #[serde(default = "default_rolloff")]
    pub rolloff: f64,
    /// Sampling period in seconds.
    #[serde(default = "default_ts")]
    pub ts: f64,
}

fn one() -> usize {
    1
}
fn default_rolloff() -> f64 {
    0.8
}
fn default_ts() -> f64 {
    1.0 / 1.76e9
}

impl ChannelConfig {
    pub fn new(tx: ArraySpec, rx: ArraySpec, n_clusters: usize, n_taps: usize, n_subcarriers: usize) -> Self {
        Self {
            tx,
            rx,
            n_clusters,
            rays_per_cluster: 1,
            n_taps,
            n_subcarriers,
            rolloff: default_rolloff(),
            ts: default_ts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tx.validate()?;
        self.rx.validate()?;
        if self.n_clusters == 0 || self.rays_per_cluster == 0 {
            return arg_err("need at least one path");
        }
        if self.n_taps == 0 || self.n_subcarriers == 0 {
            return arg_err("tap and subcarrier counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.rolloff) {
            return arg_err(format!("roll-off {} outside [0, 1]", self.rolloff));
        }
        if !(self.ts > 0.0) {
            return arg_err("sampling period must be positive");
        }
        Ok(())
    }

    pub fn n_paths(&self) -> usize {
        self.n_clusters * self.rays_per_cluster
    }

    /// `sqrt(Nt Nr / (Np Nray))`.
    pub fn gain_scale(&self) -> f64 {
        ((self.tx.n_antennas * self.rx.n_antennas) as f64 / self.n_paths() as f64).sqrt()
    }
}

/// Rays are stored cluster-major: ray `k` of cluster `l` sits at `l * rays + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub aoa: Vec<f64>,
    pub aod: Vec<f64>,
    pub gains: Vec<C64>,
    /// One delay per cluster, seconds.
    pub delays: Vec<f64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.aoa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aoa.is_empty()
    }

    pub fn delay_of(&self, ray: usize) -> f64 {
        self.delays[ray / self.rays_per_cluster]
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Raised-cosine pulse with roll-off `beta` at time `tau`.
pub fn raised_cosine(tau: f64, ts: f64, beta: f64) -> f64 {
    let x = tau / ts;
    let den = 1.0 - (2.0 * beta * x).powi(2);
    if beta > 0.0 && den.abs() < 1e-10 {
        PI / 4.0 * sinc(1.0 / (2.0 * beta))
    } else {
        sinc(x) * (PI * beta * x).cos() / den
    }
}

pub fn sample_paths(cfg: &ChannelConfig, seed: u64) -> PathSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_paths_with(cfg, &mut rng)
}

pub fn sample_paths_with<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> PathSet {
    let n = cfg.n_paths();
    let draw = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let (rlo, rhi) = (cfg.rx.sector.lo(), cfg.rx.sector.hi());
    let (tlo, thi) = (cfg.tx.sector.lo(), cfg.tx.sector.hi());
    let aoa = (0..n).map(|_| draw(rng, rlo, rhi)).collect();
    let aod = (0..n).map(|_| draw(rng, tlo, thi)).collect();
    let gains = (0..n).map(|_| sample_cn(rng, 1.0)).collect();
    let tmax = (cfg.n_taps - 1) as f64 * cfg.ts;
    let delays = (0..cfg.n_clusters)
        .map(|_| if tmax > 0.0 { rng.random_range(0.0..=tmax) } else { 0.0 })
        .collect();
    PathSet {
        n_clusters: cfg.n_clusters,
        rays_per_cluster: cfg.rays_per_cluster,
        aoa,
        aod,
        gains,
        delays,
    }
}

/// Diagonal of the per-tap gain matrix.
pub fn tap_gains(cfg: &ChannelConfig, paths: &PathSet, d: usize) -> Vec<C64> {
    let scale = cfg.gain_scale();
    (0..paths.len())
        .map(|r| {
            let p = raised_cosine(d as f64 * cfg.ts - paths.delay_of(r), cfg.ts, cfg.rolloff);
            paths.gains[r] * (scale * p)
        })
        .collect()
}

/// Diagonal of the per-subcarrier gain matrix, the DFT of [`tap_gains`] over taps.
pub fn subcarrier_gains(cfg: &ChannelConfig, paths: &PathSet, c: usize) -> Vec<C64> {
    let mut g = vec![ZERO; paths.len()];
    for d in 0..cfg.n_taps {
        let w = (-J * (2.0 * PI * (c * d) as f64 / cfg.n_subcarriers as f64)).exp();
        for (acc, t) in g.iter_mut().zip(tap_gains(cfg, paths, d)) {
            *acc += t * w;
        }
    }
    g
}

/// Effective receive and transmit array matrices `C Gamma A`.
pub fn array_matrices(
    cfg: &ChannelConfig,
    paths: &PathSet,
    rx_imp: &ImpairmentRealization,
    tx_imp: &ImpairmentRealization,
) -> (CMatrix, CMatrix) {
    (
        effective_response(&cfg.rx, rx_imp, &paths.aoa),
        effective_response(&cfg.tx, tx_imp, &paths.aod),
    )
}

/// Tap `d` as a product of array and gain matrices.
pub fn delay_tap(
    cfg: &ChannelConfig,
    d: usize,
    paths: &PathSet,
    rx_imp: &ImpairmentRealization,
    tx_imp: &ImpairmentRealization,
) -> Result<CMatrix> {
    if d >= cfg.n_taps {
        return arg_err(format!("tap {d} outside 0..{}", cfg.n_taps));
    }
    let (ar, at) = array_matrices(cfg, paths, rx_imp, tx_imp);
    Ok(&ar * diag(&tap_gains(cfg, paths, d)) * at.adjoint())
}

/// Tap `d` summed ray by ray.
pub fn delay_tap_ray_sum(
    cfg: &ChannelConfig,
    d: usize,
    paths: &PathSet,
    rx_imp: &ImpairmentRealization,
    tx_imp: &ImpairmentRealization,
) -> Result<CMatrix> {
    if d >= cfg.n_taps {
        return arg_err(format!("tap {d} outside 0..{}", cfg.n_taps));
    }
    let cr = rx_imp.coupling_matrix() * crate::array::gain_phase_matrix(rx_imp);
    let ct = tx_imp.coupling_matrix() * crate::array::gain_phase_matrix(tx_imp);
    let scale = cfg.gain_scale();
    let mut h = CMatrix::zeros(cfg.rx.n_antennas, cfg.tx.n_antennas);
    for r in 0..paths.len() {
        let p = raised_cosine(d as f64 * cfg.ts - paths.delay_of(r), cfg.ts, cfg.rolloff);
        let ar = &cr * steering_vector(&cfg.rx, rx_imp, paths.aoa[r]);
        let at = &ct * steering_vector(&cfg.tx, tx_imp, paths.aod[r]);
        h += ar * at.adjoint() * (paths.gains[r] * scale * p);
    }
    Ok(h)
}

/// `sum_d H_d exp(-j 2 pi c d / n_subcarriers)`.
pub fn freq_channel(taps: &[CMatrix], c: usize, n_subcarriers: usize) -> Result<CMatrix> {
    if c >= n_subcarriers {
        return arg_err(format!("subcarrier {c} outside 0..{n_subcarriers}"));
    }
    let Some(first) = taps.first() else {
        return dim_err("no taps");
    };
    let mut h = CMatrix::zeros(first.nrows(), first.ncols());
    for (d, t) in taps.iter().enumerate() {
        if t.shape() != first.shape() {
            return dim_err("taps differ in shape");
        }
        let w = (-J * (2.0 * PI * ((c * d) % n_subcarriers) as f64 / n_subcarriers as f64)).exp();
        h += t * w;
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub config: ChannelConfig,
    pub paths: PathSet,
    pub rx_impairments: ImpairmentRealization,
    pub tx_impairments: ImpairmentRealization,
    #[serde(skip)]
    pub taps: Vec<CMatrix>,
    #[serde(skip)]
    pub freq: Vec<CMatrix>,
}

impl ChannelRealization {
    pub fn from_paths(
        config: ChannelConfig,
        paths: PathSet,
        rx_impairments: ImpairmentRealization,
        tx_impairments: ImpairmentRealization,
    ) -> Result<Self> {
        config.validate()?;
        if rx_impairments.n() != config.rx.n_antennas || tx_impairments.n() != config.tx.n_antennas {
            return dim_err("impairment size does not match the array");
        }
        let taps = (0..config.n_taps)
            .map(|d| delay_tap(&config, d, &paths, &rx_impairments, &tx_impairments))
            .collect::<Result<Vec<_>>>()?;
        let freq = (0..config.n_subcarriers)
            .map(|c| freq_channel(&taps, c, config.n_subcarriers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            paths,
            rx_impairments,
            tx_impairments,
            taps,
            freq,
        })
    }

    /// Fresh paths drawn from `seed` behind the given hardware.
    pub fn generate(
        config: &ChannelConfig,
        rx_impairments: &ImpairmentRealization,
        tx_impairments: &ImpairmentRealization,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let paths = sample_paths(config, seed);
        Self::from_paths(config.clone(), paths, rx_impairments.clone(), tx_impairments.clone())
    }

    /// Writes `channel.json`, `taps.csv` and `freq.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::save_json(&dir.join("channel.json"), self)?;
        io::save_vec_rows(&dir.join("taps.csv"), &self.taps)?;
        io::save_vec_rows(&dir.join("freq.csv"), &self.freq)
    }

    /// Reads metadata and recomputes the matrices, checking them against the CSV files.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ChannelRealization = io::load_json(&dir.join("channel.json"))?;
        let ch = Self::from_paths(meta.config, meta.paths, meta.rx_impairments, meta.tx_impairments)?;
        let (nr, nt) = (ch.config.rx.n_antennas, ch.config.tx.n_antennas);
        let freq = io::load_vec_rows(&dir.join("freq.csv"), nr, nt)?;
        if freq.len() != ch.freq.len()
            || freq.iter().zip(&ch.freq).any(|(a, b)| crate::tensor::rel_diff(a, b) > 1e-9)
        {
            return Err(crate::Error::Parse("freq.csv disagrees with channel.json".into()));
        }
        Ok(ch)
    }
}

/// Spacing of the quantized angles of a virtual dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleGrid {
    /// Uniform in the angle itself.
    #[default]
    Angle,
    /// Uniform in the sine of the angle.
    Sine,
}

pub fn grid_angles(spec: &ArraySpec, g: usize, grid: AngleGrid) -> Vec<f64> {
    let (lo, hi) = (spec.sector.lo(), spec.sector.hi());
    match grid {
        AngleGrid::Angle => (0..g).map(|k| lo + (hi - lo) * k as f64 / g as f64).collect(),
        AngleGrid::Sine => {
            let (slo, shi) = (lo.sin(), hi.sin());
            (0..g)
                .map(|k| (slo + (shi - slo) * k as f64 / g as f64).clamp(-1.0, 1.0).asin())
                .collect()
        }
    }
}

/// `n x g` dictionary on quantized angles with unit-norm columns. With
/// `imp = None` this is the ideal array response matrix.
pub fn virtual_dictionary(
    spec: &ArraySpec,
    g: usize,
    imp: Option<&ImpairmentRealization>,
    grid: AngleGrid,
) -> Result<CMatrix> {
    if g < spec.n_antennas {
        return arg_err(format!("grid size {g} smaller than array size {}", spec.n_antennas));
    }
    let ideal;
    let imp = match imp {
        Some(i) => i,
        None => {
            ideal = ImpairmentRealization::ideal(spec.n_antennas);
            &ideal
        }
    };
    let mut a = effective_response(spec, imp, &grid_angles(spec, g, grid));
    normalize_columns(&mut a);
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{sample_impairments, ImpairmentProfile, Sector};
    use crate::tensor::{conj, khatri_rao, kron, mutual_coherence, rank, rel_diff, vec};

    fn cfg(nt: usize, nr: usize, np: usize) -> ChannelConfig {
        ChannelConfig::new(ArraySpec::ula(nt), ArraySpec::ula(nr), np, 8, 16)
    }

    fn impaired(c: &ChannelConfig, seed: u64) -> (ImpairmentRealization, ImpairmentRealization) {
        let p = ImpairmentProfile::default();
        (sample_impairments(&c.rx, seed, &p), sample_impairments(&c.tx, seed + 1, &p))
    }

    #[test]
    fn raised_cosine_values() {
        let ts = 1e-9;
        assert_eq!(raised_cosine(0.0, ts, 0.8), 1.0);
        for k in 1..6 {
            assert!(raised_cosine(k as f64 * ts, ts, 0.8).abs() < 1e-15);
            assert!(raised_cosine(-(k as f64) * ts, ts, 0.3).abs() < 1e-15);
        }
        for beta in [0.25, 0.5, 0.8, 1.0] {
            let t0 = ts / (2.0 * beta);
            let limit = PI / 4.0 * sinc(1.0 / (2.0 * beta));
            assert!((raised_cosine(t0, ts, beta) - limit).abs() < 1e-12);
            assert!((raised_cosine(-t0, ts, beta) - limit).abs() < 1e-12);
            let eps = 1e-9 * ts;
            let side = 0.5 * (raised_cosine(t0 + eps, ts, beta) + raised_cosine(t0 - eps, ts, beta));
            assert!((side - limit).abs() < 1e-6, "beta {beta}");
        }
        // beta = 0 is a plain sinc
        assert!((raised_cosine(0.5 * ts, ts, 0.0) - 2.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn sampled_paths() {
        let c = ChannelConfig::new(ArraySpec::ula(8), ArraySpec::ula(4), 6, 8, 16);
        let p = sample_paths(&c, 5);
        assert_eq!(p.len(), 6);
        assert_eq!(p.delays.len(), 6);
        for k in 0..6 {
            assert!(p.aoa[k].abs() <= PI / 3.0 && p.aod[k].abs() <= PI / 3.0);
            assert!(p.delays[k] >= 0.0 && p.delays[k] <= 7.0 * c.ts);
        }
        assert_eq!(p, sample_paths(&c, 5));
        assert_ne!(p, sample_paths(&c, 6));

        let mut c2 = c.clone();
        c2.rays_per_cluster = 3;
        c2.rx.sector = Sector { center: 0.5, width: 0.2 };
        let p2 = sample_paths(&c2, 1);
        assert_eq!(p2.len(), 18);
        assert_eq!(p2.delays.len(), 6);
        assert!(p2.aoa.iter().all(|&a| c2.rx.sector.contains(a)));
    }

    #[test]
    fn single_path_tap_is_rank_one() {
        let c = cfg(6, 4, 1);
        let paths = PathSet {
            n_clusters: 1,
            rays_per_cluster: 1,
            aoa: vec![0.3],
            aod: vec![-0.2],
            gains: vec![C64::new(1.0, 0.0)],
            delays: vec![0.0],
        };
        let (ir, it) = (ImpairmentRealization::ideal(4), ImpairmentRealization::ideal(6));
        let h0 = delay_tap(&c, 0, &paths, &ir, &it).unwrap();
        let ar = steering_vector(&c.rx, &ir, 0.3);
        let at = steering_vector(&c.tx, &it, -0.2);
        let expected = ar * at.adjoint() * C64::new(24f64.sqrt(), 0.0);
        assert!(rel_diff(&h0, &expected) < 1e-14);
        assert_eq!(rank(&h0), 1);
        assert!(delay_tap(&c, 8, &paths, &ir, &it).is_err());
    }

    #[test]
    fn matrix_and_ray_sum_forms_agree() {
        for seed in 0..5 {
            let mut c = cfg(6, 5, 5);
            if seed % 2 == 1 {
                c.rx = ArraySpec::uca(5);
            }
            let (ir, it) = impaired(&c, seed);
            let p = sample_paths(&c, seed + 10);
            for d in 0..c.n_taps {
                let a = delay_tap(&c, d, &p, &ir, &it).unwrap();
                let b = delay_tap_ray_sum(&c, d, &p, &ir, &it).unwrap();
                assert!(rel_diff(&a, &b) < 1e-12);
            }
        }
    }

    #[test]
    fn distant_taps_obey_filter_tail() {
        let mut c = cfg(4, 4, 3);
        c.n_taps = 60;
        let mut p = sample_paths(&c, 3);
        for t in p.delays.iter_mut() {
            *t = t.min(2.0 * c.ts);
        }
        let (ir, it) = (ImpairmentRealization::ideal(4), ImpairmentRealization::ideal(4));
        let d = 50;
        let h = delay_tap(&c, d, &p, &ir, &it).unwrap();
        let bound: f64 = (0..p.len())
            .map(|r| {
                let x = (d as f64 * c.ts - p.delays[r]) / c.ts;
                let tail = 1.0 / (PI * x * ((2.0 * c.rolloff * x).powi(2) - 1.0));
                c.gain_scale() * p.gains[r].norm() * tail
            })
            .sum();
        assert!(h.norm() <= bound, "{} > {}", h.norm(), bound);
        assert!(bound < 1e-3);
    }

    #[test]
    fn frequency_channel_cases() {
        let h0 = CMatrix::from_fn(2, 3, |i, j| C64::new(i as f64, j as f64));
        let h1 = CMatrix::from_fn(2, 3, |i, j| C64::new(1.0 + j as f64, -(i as f64)));
        for c in 0..4 {
            assert_eq!(freq_channel(&[h0.clone()], c, 4).unwrap(), h0);
        }
        let taps = [h0.clone(), h1.clone()];
        let got = freq_channel(&taps, 1, 4).unwrap();
        assert!(rel_diff(&got, &(&h0 - &h1 * J)) < 1e-15);
        assert!(freq_channel(&taps, 4, 4).is_err());

        let c = cfg(5, 3, 4);
        let (ir, it) = impaired(&c, 2);
        let ch = ChannelRealization::generate(&c, &ir, &it, 7).unwrap();
        let e_t: f64 = ch.taps.iter().map(|t| t.norm_squared()).sum();
        let e_f: f64 = ch.freq.iter().map(|t| t.norm_squared()).sum();
        assert!((e_f - c.n_subcarriers as f64 * e_t).abs() < 1e-10 * e_f);
    }

    #[test]
    fn frequency_channel_via_gain_matrices() {
        let c = cfg(5, 4, 4);
        let (ir, it) = impaired(&c, 4);
        let ch = ChannelRealization::generate(&c, &ir, &it, 9).unwrap();
        let (ar, at) = array_matrices(&c, &ch.paths, &ir, &it);
        let kr = khatri_rao(&conj(&at), &ar).unwrap();
        for k in 0..c.n_subcarriers {
            let g = subcarrier_gains(&c, &ch.paths, k);
            let direct = &ar * diag(&g) * at.adjoint();
            assert!(rel_diff(&direct, &ch.freq[k]) < 1e-11);
            let gv = CMatrix::from_column_slice(g.len(), 1, &g);
            assert!(rel_diff(&(&kr * gv), &vec(&ch.freq[k])) < 1e-11);
        }
    }

    #[test]
    fn on_grid_ideal_channel_is_sparse() {
        let c = cfg(8, 4, 3);
        let (gt, gr) = (16, 8);
        let dt = virtual_dictionary(&c.tx, gt, None, AngleGrid::Angle).unwrap();
        let dr = virtual_dictionary(&c.rx, gr, None, AngleGrid::Angle).unwrap();
        let at = grid_angles(&c.tx, gt, AngleGrid::Angle);
        let ar = grid_angles(&c.rx, gr, AngleGrid::Angle);
        let mut p = sample_paths(&c, 1);
        p.aod = vec![at[1], at[7], at[12]];
        p.aoa = vec![ar[0], ar[3], ar[6]];
        let (ir, it) = (ImpairmentRealization::ideal(4), ImpairmentRealization::ideal(8));
        let ch = ChannelRealization::from_paths(c.clone(), p, ir, it).unwrap();
        let psi = kron(&conj(&dt), &dr).unwrap();
        let support = [1 * gr + 0, 7 * gr + 3, 12 * gr + 6];
        let sub = CMatrix::from_fn(psi.nrows(), 3, |i, j| psi[(i, support[j])]);
        for h in &ch.freq {
            let coef = crate::tensor::pinv(&sub) * vec(h);
            assert!(rel_diff(&(&sub * coef), &vec(h)) < 1e-11);
        }
    }

    #[test]
    fn virtual_dictionaries() {
        let mut spec = ArraySpec::ula(8);
        spec.sector = Sector { center: 0.0, width: PI };
        let a = virtual_dictionary(&spec, 8, None, AngleGrid::Sine).unwrap();
        let gram = a.adjoint() * &a;
        assert!(rel_diff(&gram, &CMatrix::identity(8, 8)) < 1e-12);
        assert!(mutual_coherence(&a) < 1e-12);

        let spec = ArraySpec::ula(32);
        let imp = sample_impairments(&spec, 1, &ImpairmentProfile::default());
        for d in [
            virtual_dictionary(&spec, 64, None, AngleGrid::Angle).unwrap(),
            virtual_dictionary(&spec, 64, Some(&imp), AngleGrid::Sine).unwrap(),
        ] {
            assert_eq!(d.shape(), (32, 64));
            for col in d.column_iter() {
                assert!((col.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert!(virtual_dictionary(&spec, 16, None, AngleGrid::Angle).is_err());
    }

    #[test]
    fn save_and_load() {
        let c = cfg(4, 3, 2);
        let (ir, it) = impaired(&c, 1);
        let ch = ChannelRealization::generate(&c, &ir, &it, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ch.save(dir.path()).unwrap();
        let back = ChannelRealization::load(dir.path()).unwrap();
        assert_eq!(back, ch);
        let text = std::fs::read_to_string(dir.path().join("freq.csv")).unwrap();
        assert!(text.starts_with("re_0,im_0"));
        assert_eq!(text.lines().count(), 1 + c.n_subcarriers);
    }
}
