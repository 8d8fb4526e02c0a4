//! Fisher information and Cramér–Rao bound for the physical channel
//! parameters: angles, per-subcarrier path gains and the array impairments.
//!
//! All parameters are real. Complex coupling coefficients enter as separate
//! real and imaginary parts.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::array::{
    coupling_param_derivative, coupling_params, gain_phase_matrix, steering_derivative_angle,
    steering_derivative_spacing, steering_vector, ArraySpec, CouplingConvention, CouplingParam,
    ImpairmentRealization,
};
use crate::channel::{subcarrier_gains, ChannelRealization};
use crate::error::{arg_err, dim_err, Result};
use crate::measurement::MeasurementDataset;
use crate::tensor::{conj, diag, khatri_rao, kron, CMatrix, C64, J, ZERO};

pub type RMatrix = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Aod,
    Aoa,
    PathGain,
    TxGain,
    RxGain,
    TxPhase,
    RxPhase,
    TxSpacing,
    RxSpacing,
    TxCoupling,
    RxCoupling,
}

impl Block {
    pub const ALL: [Block; 11] = [
        Block::Aod,
        Block::Aoa,
        Block::PathGain,
        Block::TxGain,
        Block::RxGain,
        Block::TxPhase,
        Block::RxPhase,
        Block::TxSpacing,
        Block::RxSpacing,
        Block::TxCoupling,
        Block::RxCoupling,
    ];

    pub fn is_impairment(self) -> bool {
        !matches!(self, Block::Aod | Block::Aoa | Block::PathGain)
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Aod => "aod",
            Block::Aoa => "aoa",
            Block::PathGain => "path_gain",
            Block::TxGain => "tx_gain",
            Block::RxGain => "rx_gain",
            Block::TxPhase => "tx_phase",
            Block::RxPhase => "rx_phase",
            Block::TxSpacing => "tx_spacing",
            Block::RxSpacing => "rx_spacing",
            Block::TxCoupling => "tx_coupling",
            Block::RxCoupling => "rx_coupling",
        }
    }
}

/// One real parameter. Indices are 0-based except spacing gaps (`1..n`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Aod(usize),
    Aoa(usize),
    GainRe { c: usize, path: usize },
    GainIm { c: usize, path: usize },
    TxGain(usize),
    RxGain(usize),
    TxPhase(usize),
    RxPhase(usize),
    TxSpacing(usize),
    RxSpacing(usize),
    TxCoupling { p: CouplingParam, imag: bool },
    RxCoupling { p: CouplingParam, imag: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlbConfig {
    /// Impairment blocks treated as known.
    #[serde(default)]
    pub exclude: Vec<Block>,
    #[serde(default = "default_convention")]
    pub coupling: CouplingConvention,
    /// Eigenvalues below `pinv_rtol * lambda_max` are dropped when inverting.
    #[serde(default = "default_rtol")]
    pub pinv_rtol: f64,
}

fn default_convention() -> CouplingConvention {
    CouplingConvention::FullSymmetric
}
fn default_rtol() -> f64 {
    1e-10
}

impl Default for CrlbConfig {
    fn default() -> Self {
        Self {
            exclude: Vec::new(),
            coupling: default_convention(),
            pinv_rtol: default_rtol(),
        }
    }
}

impl CrlbConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.exclude.iter().find(|b| !b.is_impairment()) {
            return arg_err(format!("block `{}` cannot be excluded", b.name()));
        }
        if !(self.pinv_rtol >= 0.0) {
            return arg_err("pinv_rtol must be non-negative");
        }
        Ok(())
    }
}

/// Ordered real parameter vector with block offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub params: Vec<Param>,
    pub blocks: Vec<(Block, Range<usize>)>,
}

impl ParamLayout {
    pub fn new(n_paths: usize, n_subcarriers: usize, nt: usize, nr: usize, cfg: &CrlbConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        let mut blocks = Vec::new();
        for b in Block::ALL {
            if cfg.exclude.contains(&b) {
                continue;
            }
            let start = params.len();
            match b {
                Block::Aod => params.extend((0..n_paths).map(Param::Aod)),
                Block::Aoa => params.extend((0..n_paths).map(Param::Aoa)),
                Block::PathGain => {
                    for c in 0..n_subcarriers {
                        params.extend((0..n_paths).map(|path| Param::GainRe { c, path }));
                        params.extend((0..n_paths).map(|path| Param::GainIm { c, path }));
                    }
                }
                Block::TxGain => params.extend((0..nt).map(Param::TxGain)),
                Block::RxGain => params.extend((0..nr).map(Param::RxGain)),
                Block::TxPhase => params.extend((0..nt).map(Param::TxPhase)),
                Block::RxPhase => params.extend((0..nr).map(Param::RxPhase)),
                Block::TxSpacing => params.extend((1..nt).map(Param::TxSpacing)),
                Block::RxSpacing => params.extend((1..nr).map(Param::RxSpacing)),
                Block::TxCoupling => {
                    for p in coupling_params(nt, cfg.coupling) {
                        params.push(Param::TxCoupling { p, imag: false });
                        params.push(Param::TxCoupling { p, imag: true });
                    }
                }
                Block::RxCoupling => {
                    for p in coupling_params(nr, cfg.coupling) {
                        params.push(Param::RxCoupling { p, imag: false });
                        params.push(Param::RxCoupling { p, imag: true });
                    }
                }
            }
            blocks.push((b, start..params.len()));
        }
        Ok(Self { params, blocks })
    }

    pub fn for_channel(ch: &ChannelRealization, cfg: &CrlbConfig) -> Result<Self> {
        let c = &ch.config;
        Self::new(c.n_paths(), c.n_subcarriers, c.tx.n_antennas, c.rx.n_antennas, cfg)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn range(&self, b: Block) -> Option<Range<usize>> {
        self.blocks.iter().find(|(x, _)| *x == b).map(|(_, r)| r.clone())
    }
}

/// Parameter values of one channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub tx: ArraySpec,
    pub rx: ArraySpec,
    pub aod: Vec<f64>,
    pub aoa: Vec<f64>,
    /// `n_paths x n_subcarriers`.
    pub gains: CMatrix,
    pub tx_imp: ImpairmentRealization,
    pub rx_imp: ImpairmentRealization,
}

impl ChannelModel {
    pub fn from_channel(ch: &ChannelRealization) -> Self {
        let cfg = &ch.config;
        let np = ch.paths.len();
        let mut gains = CMatrix::zeros(np, cfg.n_subcarriers);
        for c in 0..cfg.n_subcarriers {
            for (l, g) in subcarrier_gains(cfg, &ch.paths, c).into_iter().enumerate() {
                gains[(l, c)] = g;
            }
        }
        Self {
            tx: cfg.tx.clone(),
            rx: cfg.rx.clone(),
            aod: ch.paths.aod.clone(),
            aoa: ch.paths.aoa.clone(),
            gains,
            tx_imp: ch.tx_impairments.clone(),
            rx_imp: ch.rx_impairments.clone(),
        }
    }

    pub fn n_paths(&self) -> usize {
        self.aod.len()
    }

    pub fn n_subcarriers(&self) -> usize {
        self.gains.ncols()
    }

    fn steering(spec: &ArraySpec, imp: &ImpairmentRealization, angles: &[f64]) -> CMatrix {
        let mut a = CMatrix::zeros(spec.n_antennas, angles.len());
        for (l, &ang) in angles.iter().enumerate() {
            a.set_column(l, &steering_vector(spec, imp, ang).column(0));
        }
        a
    }

    pub fn tx_steering(&self) -> CMatrix {
        Self::steering(&self.tx, &self.tx_imp, &self.aod)
    }

    pub fn rx_steering(&self) -> CMatrix {
        Self::steering(&self.rx, &self.rx_imp, &self.aoa)
    }

    /// `(C_T Gamma_T A_T, C_R Gamma_R A_R)`.
    pub fn effective(&self) -> (CMatrix, CMatrix) {
        let bt = self.tx_imp.coupling_matrix() * gain_phase_matrix(&self.tx_imp) * self.tx_steering();
        let br = self.rx_imp.coupling_matrix() * gain_phase_matrix(&self.rx_imp) * self.rx_steering();
        (bt, br)
    }

    /// `vec(H[c])` for every subcarrier, one column each.
    pub fn vec_channels(&self) -> CMatrix {
        let (bt, br) = self.effective();
        khatri_rao(&conj(&bt), &br).expect("equal path counts") * &self.gains
    }

    /// Copy with parameter `p` moved by `h`.
    pub fn perturbed(&self, p: Param, h: f64) -> Result<Self> {
        let mut m = self.clone();
        let bump = |imp: &mut ImpairmentRealization, q: CouplingParam, imag: bool| -> Result<()> {
            let d = coupling_param_derivative(imp.n(), q)?;
            let s = if imag { J * h } else { C64::new(h, 0.0) };
            let c = imp.coupling_matrix() + d * s;
            imp.set_coupling_matrix(&c);
            Ok(())
        };
        match p {
            Param::Aod(l) => m.aod[l] += h,
            Param::Aoa(l) => m.aoa[l] += h,
            Param::GainRe { c, path } => m.gains[(path, c)] += C64::new(h, 0.0),
            Param::GainIm { c, path } => m.gains[(path, c)] += C64::new(0.0, h),
            Param::TxGain(i) => m.tx_imp.gains[i] += h,
            Param::RxGain(i) => m.rx_imp.gains[i] += h,
            Param::TxPhase(i) => m.tx_imp.phases[i] += h,
            Param::RxPhase(i) => m.rx_imp.phases[i] += h,
            Param::TxSpacing(k) => m.tx_imp.spacing_errors[k - 1] += h,
            Param::RxSpacing(k) => m.rx_imp.spacing_errors[k - 1] += h,
            Param::TxCoupling { p, imag } => bump(&mut m.tx_imp, p, imag)?,
            Param::RxCoupling { p, imag } => bump(&mut m.rx_imp, p, imag)?,
        }
        Ok(m)
    }
}

fn unit_diag(n: usize, i: usize, v: C64) -> CMatrix {
    let mut d = CMatrix::zeros(n, n);
    d[(i, i)] = v;
    d
}

/// Derivative of `Gamma` with respect to the gain (`phase = false`) or phase
/// of element `i`.
fn gamma_derivative(imp: &ImpairmentRealization, i: usize, phase: bool) -> CMatrix {
    let e = C64::from_polar(1.0, imp.phases[i]);
    let v = if phase { J * imp.gains[i] * e } else { e };
    unit_diag(imp.n(), i, v)
}

fn coupling_partial(n: usize, p: CouplingParam, imag: bool) -> Result<CMatrix> {
    let d = coupling_param_derivative(n, p)?;
    Ok(if imag { d * J } else { d })
}

fn spacing_partial(spec: &ArraySpec, imp: &ImpairmentRealization, angles: &[f64], gap: usize) -> Result<CMatrix> {
    let mut a = CMatrix::zeros(spec.n_antennas, angles.len());
    for (l, &ang) in angles.iter().enumerate() {
        a.set_column(l, &steering_derivative_spacing(spec, imp, ang, gap)?.column(0));
    }
    Ok(a)
}

/// `d vec(H[c]) / d p` for all subcarriers, one column each.
pub fn channel_partials(model: &ChannelModel, p: Param) -> Result<CMatrix> {
    let (bt, br) = model.effective();
    let g = &model.gains;
    let (nr, nt, nc) = (model.rx.n_antennas, model.tx.n_antennas, model.n_subcarriers());
    let tx_side = |dbt: CMatrix| -> Result<CMatrix> { Ok(khatri_rao(&conj(&dbt), &br)? * g) };
    let rx_side = |dbr: CMatrix| -> Result<CMatrix> { Ok(khatri_rao(&conj(&bt), &dbr)? * g) };
    let (ct, gt) = (model.tx_imp.coupling_matrix(), gain_phase_matrix(&model.tx_imp));
    let (cr, gr) = (model.rx_imp.coupling_matrix(), gain_phase_matrix(&model.rx_imp));
    let check = |i: usize, n: usize| if i < n { Ok(()) } else { arg_err(format!("index {i} out of range for {n}")) };
    match p {
        Param::Aod(l) => {
            check(l, model.n_paths())?;
            let da = &ct * &gt * steering_derivative_angle(&model.tx, &model.tx_imp, model.aod[l]);
            let col = kron(&conj(&da), &br.columns(l, 1).into_owned())?;
            Ok(col * g.rows(l, 1))
        }
        Param::Aoa(l) => {
            check(l, model.n_paths())?;
            let da = &cr * &gr * steering_derivative_angle(&model.rx, &model.rx_imp, model.aoa[l]);
            let col = kron(&conj(&bt.columns(l, 1).into_owned()), &da)?;
            Ok(col * g.rows(l, 1))
        }
        Param::GainRe { c, path } | Param::GainIm { c, path } => {
            check(c, nc)?;
            check(path, model.n_paths())?;
            let mut out = CMatrix::zeros(nr * nt, nc);
            let mut col = kron(&conj(&bt.columns(path, 1).into_owned()), &br.columns(path, 1).into_owned())?;
            if matches!(p, Param::GainIm { .. }) {
                col *= J;
            }
            out.set_column(c, &col.column(0));
            Ok(out)
        }
        Param::TxGain(i) | Param::TxPhase(i) => {
            check(i, nt)?;
            let dg = gamma_derivative(&model.tx_imp, i, matches!(p, Param::TxPhase(_)));
            tx_side(&ct * dg * model.tx_steering())
        }
        Param::RxGain(i) | Param::RxPhase(i) => {
            check(i, nr)?;
            let dg = gamma_derivative(&model.rx_imp, i, matches!(p, Param::RxPhase(_)));
            rx_side(&cr * dg * model.rx_steering())
        }
        Param::TxSpacing(k) => tx_side(&ct * &gt * spacing_partial(&model.tx, &model.tx_imp, &model.aod, k)?),
        Param::RxSpacing(k) => rx_side(&cr * &gr * spacing_partial(&model.rx, &model.rx_imp, &model.aoa, k)?),
        Param::TxCoupling { p, imag } => tx_side(coupling_partial(nt, p, imag)? * &gt * model.tx_steering()),
        Param::RxCoupling { p, imag } => rx_side(coupling_partial(nr, p, imag)? * &gr * model.rx_steering()),
    }
}

/// `J(c) = d vec(H[c]) / d xi^T`, `Nr Nt x len(xi)`.
pub fn channel_jacobian(model: &ChannelModel, layout: &ParamLayout, c: usize) -> Result<CMatrix> {
    if c >= model.n_subcarriers() {
        return arg_err(format!("subcarrier {c} out of range"));
    }
    let n = model.rx.n_antennas * model.tx.n_antennas;
    let mut out = CMatrix::zeros(n, layout.len());
    for (k, &p) in layout.params.iter().enumerate() {
        out.set_column(k, &channel_partials(model, p)?.column(c));
    }
    Ok(out)
}

/// Whitened sensing operator and per-entry noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub phi_w: CMatrix,
    pub sigma2: f64,
}

impl Observation {
    pub fn from_dataset(ds: &MeasurementDataset) -> Result<Self> {
        let phi_w = ds.whitening_operator()?.apply(&ds.phi)?;
        Ok(Self {
            phi_w,
            sigma2: ds.effective_noise_var(),
        })
    }

    /// Whitened mean `mu_w`, subcarrier segments stacked.
    pub fn mean(&self, model: &ChannelModel) -> Result<CMatrix> {
        let h = model.vec_channels();
        if h.nrows() != self.phi_w.ncols() {
            return dim_err("sensing operator does not match the channel size");
        }
        Ok(crate::tensor::vec(&(&self.phi_w * h)))
    }
}

/// `d mu_w / d p`, length `rows(Phi) * N_c`.
pub fn mean_derivative(obs: &Observation, model: &ChannelModel, p: Param) -> Result<CMatrix> {
    let d = channel_partials(model, p)?;
    if d.nrows() != obs.phi_w.ncols() {
        return dim_err("sensing operator does not match the channel size");
    }
    Ok(crate::tensor::vec(&(&obs.phi_w * d)))
}

/// Column stack of [`mean_derivative`] over the layout.
pub fn mean_jacobian(obs: &Observation, model: &ChannelModel, layout: &ParamLayout) -> Result<CMatrix> {
    let rows = obs.phi_w.nrows() * model.n_subcarriers();
    let mut d = CMatrix::zeros(rows, layout.len());
    for (k, &p) in layout.params.iter().enumerate() {
        d.set_column(k, &mean_derivative(obs, model, p)?.column(0));
    }
    Ok(d)
}

/// `(2 / sigma2) Re{A^* B}`.
pub fn real_gram(a: &CMatrix, b: &CMatrix, sigma2: f64) -> RMatrix {
    let g = a.adjoint() * b;
    RMatrix::from_fn(g.nrows(), g.ncols(), |i, j| 2.0 * g[(i, j)].re / sigma2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: RMatrix,
    pub sigma2: f64,
    pub eigenvalues: Vec<f64>,
    /// `lambda_max / lambda_min`; infinite when singular.
    pub condition_number: f64,
}

impl FisherInfo {
    pub fn from_matrix(matrix: RMatrix, sigma2: f64) -> Self {
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let mut eigenvalues: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        let max = eigenvalues.last().copied().unwrap_or(0.0);
        let min = eigenvalues.first().copied().unwrap_or(0.0);
        let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
        Self {
            matrix,
            sigma2,
            eigenvalues,
            condition_number,
        }
    }

    pub fn is_psd(&self, rtol: f64) -> bool {
        let max = self.eigenvalues.last().copied().unwrap_or(0.0).abs();
        self.eigenvalues.iter().all(|&l| l >= -rtol * max)
    }

    /// Symmetric pseudo-inverse dropping eigenvalues below `rtol * lambda_max`.
    /// Returns the inverse and the retained rank.
    pub fn pinv(&self, rtol: f64) -> (RMatrix, usize) {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        let n = sym.nrows();
        let eig = sym.symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let mut inv = RMatrix::zeros(n, n);
        let mut rank = 0;
        for (k, &l) in eig.eigenvalues.iter().enumerate() {
            if l > rtol * max && l > 0.0 {
                rank += 1;
                let v = eig.eigenvectors.column(k);
                inv += (v * v.transpose()) / l;
            }
        }
        (inv, rank)
    }
}

/// FIM over the layout, `(2 / sigma2) Re{D^* D}`.
pub fn fim(obs: &Observation, model: &ChannelModel, layout: &ParamLayout) -> Result<FisherInfo> {
    if !(obs.sigma2 > 0.0) {
        return arg_err("noise variance must be positive");
    }
    let d = mean_jacobian(obs, model, layout)?;
    Ok(FisherInfo::from_matrix(real_gram(&d, &d, obs.sigma2), obs.sigma2))
}

/// FIM from the unwhitened mean and the full noise covariance
/// `sigma2 * I (x) blkdiag{W_i^* W_i}`.
pub fn fim_unwhitened(ds: &MeasurementDataset, model: &ChannelModel, layout: &ParamLayout) -> Result<FisherInfo> {
    let sigma2 = ds.effective_noise_var();
    let obs = Observation {
        phi_w: ds.phi.clone(),
        sigma2,
    };
    let d = mean_jacobian(&obs, model, layout)?;
    let rows = ds.phi.nrows();
    let mut cinv = CMatrix::zeros(rows, rows);
    let mut r0 = 0;
    for g in &ds.grams {
        let n = g.nrows();
        let inv = g.clone().try_inverse().unwrap_or_else(|| crate::tensor::pinv(g));
        cinv.view_mut((r0, r0), (n, n)).copy_from(&inv);
        r0 += n;
    }
    let mut weighted = d.clone();
    for c in 0..model.n_subcarriers() {
        let seg = cinv.clone() * d.rows(c * rows, rows);
        weighted.rows_mut(c * rows, rows).copy_from(&seg);
    }
    Ok(FisherInfo::from_matrix(real_gram(&d, &weighted, sigma2), sigma2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: Block,
    pub len: usize,
    pub mean_fim_diagonal: f64,
    pub mean_bound_diagonal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlbReport {
    pub crlb: f64,
    pub condition_number: f64,
    pub rank: usize,
    pub n_params: usize,
    pub sigma2: f64,
    pub blocks: Vec<BlockSummary>,
}

/// `sum_c tr{J(c) I^+ J(c)^*}` from a precomputed FIM.
pub fn crlb_from_fim(model: &ChannelModel, layout: &ParamLayout, info: &FisherInfo, rtol: f64) -> Result<CrlbReport> {
    let (inv, rank) = info.pinv(rtol);
    if rank < layout.len() {
        log::warn!(
            "FIM is rank deficient ({rank} of {}), condition number {:.3e}; using a pseudo-inverse",
            layout.len(),
            info.condition_number
        );
    }
    let inv_c = inv.map(|x| C64::new(x, 0.0));
    let mut total = 0.0;
    for c in 0..model.n_subcarriers() {
        let jc = channel_jacobian(model, layout, c)?;
        let m = &jc * &inv_c;
        total += m.zip_fold(&jc, 0.0, |acc, a, b| acc + (a * b.conj()).re);
    }
    let blocks = layout
        .blocks
        .iter()
        .map(|(b, r)| {
            let n = r.len().max(1) as f64;
            BlockSummary {
                block: *b,
                len: r.len(),
                mean_fim_diagonal: r.clone().map(|i| info.matrix[(i, i)]).sum::<f64>() / n,
                mean_bound_diagonal: r.clone().map(|i| inv[(i, i)]).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(CrlbReport {
        crlb: total.max(0.0),
        condition_number: info.condition_number,
        rank,
        n_params: layout.len(),
        sigma2: info.sigma2,
        blocks,
    })
}

/// Total CRLB for the channel matrices of `ch` observed through `ds`.
pub fn total_crlb(ds: &MeasurementDataset, ch: &ChannelRealization, cfg: &CrlbConfig) -> Result<CrlbReport> {
    let obs = Observation::from_dataset(ds)?;
    total_crlb_with(&obs, &ChannelModel::from_channel(ch), cfg)
}

pub fn total_crlb_with(obs: &Observation, model: &ChannelModel, cfg: &CrlbConfig) -> Result<CrlbReport> {
    let layout = ParamLayout::new(
        model.n_paths(),
        model.n_subcarriers(),
        model.tx.n_antennas,
        model.rx.n_antennas,
        cfg,
    )?;
    let info = fim(obs, model, &layout)?;
    crlb_from_fim(model, &layout, &info, cfg.pinv_rtol)
}


/// Closed-form FIM blocks written with Kronecker products and traces,
/// independent of the column-by-column derivative path.
pub mod closed_form {
    use super::*;

    /// Groups of block pairs sharing one expression.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Family {
        AngleSelf,
        AngleCross,
        PathGain,
        GainErrorSelf,
        GainErrorCross,
        PhaseErrorSelf,
        PhaseErrorCross,
        SpacingSelf,
        SpacingCross,
        CouplingSelf,
        CouplingCross,
    }

    impl Family {
        pub const ALL: [Family; 11] = [
            Family::AngleSelf,
            Family::AngleCross,
            Family::PathGain,
            Family::GainErrorSelf,
            Family::GainErrorCross,
            Family::PhaseErrorSelf,
            Family::PhaseErrorCross,
            Family::SpacingSelf,
            Family::SpacingCross,
            Family::CouplingSelf,
            Family::CouplingCross,
        ];

        /// Block pairs `(row, col)` covered by the family.
        pub fn pairs(self) -> Vec<(Block, Block)> {
            use Block::*;
            let sided = |t: Block, r: Block, cross: bool| {
                if cross {
                    vec![(t, r), (r, t)]
                } else {
                    vec![(t, t), (r, r)]
                }
            };
            match self {
                Family::AngleSelf => vec![(Aod, Aod), (Aoa, Aoa)],
                Family::AngleCross => vec![(Aod, Aoa), (Aoa, Aod)],
                Family::PathGain => vec![(PathGain, PathGain)],
                Family::GainErrorSelf => sided(TxGain, RxGain, false),
                Family::GainErrorCross => sided(TxGain, RxGain, true),
                Family::PhaseErrorSelf => sided(TxPhase, RxPhase, false),
                Family::PhaseErrorCross => sided(TxPhase, RxPhase, true),
                Family::SpacingSelf => sided(TxSpacing, RxSpacing, false),
                Family::SpacingCross => sided(TxSpacing, RxSpacing, true),
                Family::CouplingSelf => sided(TxCoupling, RxCoupling, false),
                Family::CouplingCross => sided(TxCoupling, RxCoupling, true),
            }
        }
    }

    struct Parts {
        kc: CMatrix,
        kg: CMatrix,
        q: CMatrix,
        at: CMatrix,
        ar: CMatrix,
        dat: CMatrix,
        dar: CMatrix,
    }

    fn parts(obs: &Observation, m: &ChannelModel) -> Result<Parts> {
        let mut dat = CMatrix::zeros(m.tx.n_antennas, m.n_paths());
        let mut dar = CMatrix::zeros(m.rx.n_antennas, m.n_paths());
        for l in 0..m.n_paths() {
            dat.set_column(l, &steering_derivative_angle(&m.tx, &m.tx_imp, m.aod[l]).column(0));
            dar.set_column(l, &steering_derivative_angle(&m.rx, &m.rx_imp, m.aoa[l]).column(0));
        }
        Ok(Parts {
            kc: kron(&conj(&m.tx_imp.coupling_matrix()), &m.rx_imp.coupling_matrix())?,
            kg: kron(&conj(&gain_phase_matrix(&m.tx_imp)), &gain_phase_matrix(&m.rx_imp))?,
            q: obs.phi_w.adjoint() * &obs.phi_w,
            at: m.tx_steering(),
            ar: m.rx_steering(),
            dat,
            dar,
        })
    }

    fn col(a: &CMatrix, l: usize) -> CMatrix {
        a.columns(l, 1).into_owned()
    }

    fn trace(a: &CMatrix) -> C64 {
        a.diagonal().iter().fold(ZERO, |s, z| s + z)
    }

    /// Kernel `(K_g)^* (K_c)^* Phi_w^* Phi_w K_c K_g`.
    fn kernel(p: &Parts) -> CMatrix {
        let k = &p.kc * &p.kg;
        k.adjoint() * &p.q * k
    }

    /// `tr{G (conj(t_j) t_i^T (x) r_j r_i^*)}`, with `t`, `r` the transmit and
    /// receive steering vectors or their angle derivatives.
    fn angle_trace(g: &CMatrix, ti: &CMatrix, tj: &CMatrix, ri: &CMatrix, rj: &CMatrix) -> Result<C64> {
        let xt = conj(tj) * ti.transpose();
        let xr = rj * ri.adjoint();
        Ok(trace(&(g * kron(&xt, &xr)?)))
    }

    fn angle_block(obs: &Observation, m: &ChannelModel, row: Block, column: Block) -> Result<RMatrix> {
        let p = parts(obs, m)?;
        let g = kernel(&p);
        let np = m.n_paths();
        let pick = |b: Block, l: usize| -> (CMatrix, CMatrix) {
            match b {
                Block::Aod => (col(&p.dat, l), col(&p.ar, l)),
                _ => (col(&p.at, l), col(&p.dar, l)),
            }
        };
        let mut out = RMatrix::zeros(np, np);
        for i in 0..np {
            let (ti, ri) = pick(row, i);
            for j in 0..np {
                let (tj, rj) = pick(column, j);
                let gsum = (0..m.n_subcarriers()).fold(ZERO, |s, c| s + m.gains[(i, c)].conj() * m.gains[(j, c)]);
                out[(i, j)] = 2.0 / obs.sigma2 * (gsum * angle_trace(&g, &ti, &tj, &ri, &rj)?).re;
            }
        }
        Ok(out)
    }

    /// Per subcarrier `[R, I]` sub-blocks; zero across subcarriers.
    fn path_gain_block(obs: &Observation, m: &ChannelModel) -> Result<RMatrix> {
        let p = parts(obs, m)?;
        let g = kernel(&p);
        let (np, nc) = (m.n_paths(), m.n_subcarriers());
        let mut base = CMatrix::zeros(np, np);
        for i in 0..np {
            for j in 0..np {
                base[(i, j)] = angle_trace(&g, &col(&p.at, i), &col(&p.at, j), &col(&p.ar, i), &col(&p.ar, j))?;
            }
        }
        let s = 2.0 / obs.sigma2;
        let mut out = RMatrix::zeros(2 * np * nc, 2 * np * nc);
        for c in 0..nc {
            let o = 2 * np * c;
            for i in 0..np {
                for j in 0..np {
                    let t = base[(i, j)];
                    out[(o + i, o + j)] = s * t.re;
                    out[(o + np + i, o + np + j)] = s * t.re;
                    out[(o + i, o + np + j)] = s * (J * t).re;
                    out[(o + np + i, o + j)] = s * (-J * t).re;
                }
            }
        }
        Ok(out)
    }

    /// `X_p` with `d mu_w / d p = (I (x) Phi_w) vec(X_p G)`.
    fn impairment_factor(m: &ChannelModel, p: &Parts, param: Param) -> Result<CMatrix> {
        let gt = gain_phase_matrix(&m.tx_imp);
        let gr = gain_phase_matrix(&m.rx_imp);
        let kr = khatri_rao(&conj(&p.at), &p.ar)?;
        let dgamma = |imp: &ImpairmentRealization, i: usize, phase: bool| {
            let e = C64::from_polar(1.0, imp.phases[i]);
            let mut v = vec![ZERO; imp.n()];
            v[i] = if phase { J * imp.gains[i] * e } else { e };
            diag(&v)
        };
        match param {
            Param::TxGain(i) | Param::TxPhase(i) => {
                let d = dgamma(&m.tx_imp, i, matches!(param, Param::TxPhase(_)));
                Ok(&p.kc * kron(&conj(&d), &gr)? * kr)
            }
            Param::RxGain(i) | Param::RxPhase(i) => {
                let d = dgamma(&m.rx_imp, i, matches!(param, Param::RxPhase(_)));
                Ok(&p.kc * kron(&conj(&gt), &d)? * kr)
            }
            Param::TxSpacing(k) => {
                let d = spacing_partial(&m.tx, &m.tx_imp, &m.aod, k)?;
                Ok(&p.kc * &p.kg * khatri_rao(&conj(&d), &p.ar)?)
            }
            Param::RxSpacing(k) => {
                let d = spacing_partial(&m.rx, &m.rx_imp, &m.aoa, k)?;
                Ok(&p.kc * &p.kg * khatri_rao(&conj(&p.at), &d)?)
            }
            Param::TxCoupling { p: q, imag } => {
                let mut d = coupling_param_derivative(m.tx.n_antennas, q)?;
                if imag {
                    d *= J;
                }
                Ok(kron(&conj(&d), &m.rx_imp.coupling_matrix())? * &p.kg * kr)
            }
            Param::RxCoupling { p: q, imag } => {
                let mut d = coupling_param_derivative(m.rx.n_antennas, q)?;
                if imag {
                    d *= J;
                }
                Ok(kron(&conj(&m.tx_imp.coupling_matrix()), &d)? * &p.kg * kr)
            }
            _ => arg_err("not an impairment parameter"),
        }
    }

    /// `(2/sigma2) sum_c Re{g[c]^* X_i^* Phi_w^* Phi_w X_j g[c]}`.
    fn impairment_block(obs: &Observation, m: &ChannelModel, rows: &[Param], cols: &[Param]) -> Result<RMatrix> {
        let p = parts(obs, m)?;
        let gg = &m.gains * m.gains.adjoint();
        let xr: Vec<CMatrix> = rows.iter().map(|&q| impairment_factor(m, &p, q)).collect::<Result<_>>()?;
        let xc: Vec<CMatrix> = cols.iter().map(|&q| impairment_factor(m, &p, q)).collect::<Result<_>>()?;
        let mut out = RMatrix::zeros(rows.len(), cols.len());
        for (i, xi) in xr.iter().enumerate() {
            let left = xi.adjoint() * &p.q;
            for (j, xj) in xc.iter().enumerate() {
                out[(i, j)] = 2.0 / obs.sigma2 * trace(&(&left * xj * &gg)).re;
            }
        }
        Ok(out)
    }

    /// Closed-form block `[I]_{row, col}` for a pair covered by one of the
    /// [`Family`] expressions.
    pub fn block(obs: &Observation, m: &ChannelModel, cfg: &CrlbConfig, row: Block, column: Block) -> Result<RMatrix> {
        if !Family::ALL.iter().any(|f| f.pairs().contains(&(row, column))) {
            return arg_err(format!("no closed form for ({}, {})", row.name(), column.name()));
        }
        match (row, column) {
            (Block::Aod | Block::Aoa, _) => angle_block(obs, m, row, column),
            (Block::PathGain, _) => path_gain_block(obs, m),
            _ => {
                let full = CrlbConfig {
                    exclude: Vec::new(),
                    ..cfg.clone()
                };
                let layout = ParamLayout::new(m.n_paths(), m.n_subcarriers(), m.tx.n_antennas, m.rx.n_antennas, &full)?;
                let params = |b: Block| layout.params[layout.range(b).expect("full layout")].to_vec();
                impairment_block(obs, m, &params(row), &params(column))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{sample_impairments, ImpairmentProfile};
    use crate::channel::ChannelConfig;
    use crate::measurement::{simulate_dataset, TrainingConfig, TrainingSetup};

    pub(crate) fn desk_case(nt: usize, nr: usize, np: usize, nc: usize, frames: usize, seed: u64) -> (MeasurementDataset, ChannelRealization) {
        let cfg = ChannelConfig::new(ArraySpec::ula(nt), ArraySpec::ula(nr), np, 3, nc);
        let prof = ImpairmentProfile::default();
        let rx = sample_impairments(&cfg.rx, seed, &prof);
        let tx = sample_impairments(&cfg.tx, seed + 1, &prof);
        let ch = ChannelRealization::generate(&cfg, &rx, &tx, seed + 2).unwrap();
        let tc = TrainingConfig {
            frames,
            n_rep: 1,
            lt: 2,
            lr: 2,
            phase_bits: 2,
            snr_db: 10.0,
            power: 1.0,
            seed: seed + 3,
        };
        let setup = TrainingSetup::new(&tc, nt, nr).unwrap();
        let ds = simulate_dataset(std::slice::from_ref(&ch), &setup, seed + 4).unwrap();
        (ds, ch)
    }

    fn rel(a: &RMatrix, b: &RMatrix) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn layout_counts() {
        let l = ParamLayout::new(2, 4, 4, 3, &CrlbConfig::default()).unwrap();
        let (np, nc, nt, nr) = (2, 4, 4, 3);
        let expected = 2 * np + 2 * np * nc + 2 * nr + 2 * nt + (nt - 1) + (nr - 1) + 2 * (nr * (nr - 1) / 2 + nt * (nt - 1) / 2);
        assert_eq!(l.len(), expected);
        let mut next = 0;
        for (_, r) in &l.blocks {
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, l.len());
        let toe = CrlbConfig {
            coupling: CouplingConvention::Toeplitz,
            ..CrlbConfig::default()
        };
        assert_eq!(ParamLayout::new(2, 4, 4, 3, &toe).unwrap().len(), expected - 2 * (3 + 6) + 2 * (2 + 3));
        let bad = CrlbConfig {
            exclude: vec![Block::Aod],
            ..CrlbConfig::default()
        };
        assert!(ParamLayout::new(2, 4, 4, 3, &bad).is_err());
    }

    #[test]
    fn model_reproduces_channel() {
        let (_, ch) = desk_case(4, 3, 2, 4, 8, 1);
        let m = ChannelModel::from_channel(&ch);
        let h = m.vec_channels();
        for c in 0..4 {
            let v = crate::tensor::vec(&ch.freq[c]);
            assert!(crate::tensor::rel_diff(&h.columns(c, 1).into_owned(), &v) < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (ds, ch) = desk_case(4, 3, 2, 4, 8, 2);
        let obs = Observation::from_dataset(&ds).unwrap();
        let m = ChannelModel::from_channel(&ch);
        let layout = ParamLayout::for_channel(&ch, &CrlbConfig::default()).unwrap();
        let h = 1e-6;
        for &p in &layout.params {
            let an = mean_derivative(&obs, &m, p).unwrap();
            let fd = (obs.mean(&m.perturbed(p, h).unwrap()).unwrap() - obs.mean(&m.perturbed(p, -h).unwrap()).unwrap())
                .unscale(2.0 * h);
            let err = (&an - &fd).norm() / an.norm().max(fd.norm()).max(1e-12);
            assert!(err < 1e-5, "{p:?}: {err}");
        }
    }

    #[test]
    fn derivative_locality() {
        let (ds, ch) = desk_case(4, 3, 2, 4, 8, 3);
        let obs = Observation::from_dataset(&ds).unwrap();
        let m = ChannelModel::from_channel(&ch);
        let rows = obs.phi_w.nrows();
        let d = mean_derivative(&obs, &m, Param::GainRe { c: 2, path: 1 }).unwrap();
        for c in 0..4 {
            let seg = d.rows(c * rows, rows).norm();
            assert_eq!(seg > 0.0, c == 2);
        }
        let mut ideal = m.clone();
        ideal.rx_imp = ImpairmentRealization::ideal(3);
        ideal.aoa[0] = std::f64::consts::FRAC_PI_2;
        assert!(channel_partials(&ideal, Param::Aoa(0)).unwrap().norm() < 1e-12);
        assert!(channel_partials(&m, Param::TxGain(9)).is_err());
    }

    #[test]
    fn ideal_gain_jacobian_is_kron_of_steering() {
        let (_, ch) = desk_case(4, 3, 2, 4, 8, 4);
        let mut m = ChannelModel::from_channel(&ch);
        m.tx_imp = ImpairmentRealization::ideal(4);
        m.rx_imp = ImpairmentRealization::ideal(3);
        let layout = ParamLayout::new(2, 4, 4, 3, &CrlbConfig::default()).unwrap();
        let j = channel_jacobian(&m, &layout, 1).unwrap();
        for (k, p) in layout.params.iter().enumerate() {
            if let Param::GainRe { c, path } = *p {
                let col = j.columns(k, 1).into_owned();
                if c == 1 {
                    let at = steering_vector(&m.tx, &m.tx_imp, m.aod[path]);
                    let ar = steering_vector(&m.rx, &m.rx_imp, m.aoa[path]);
                    assert!(crate::tensor::rel_diff(&col, &kron(&conj(&at), &ar).unwrap()) < 1e-14);
                } else {
                    assert_eq!(col.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn closed_forms_match_generic() {
        let (ds, ch) = desk_case(4, 3, 2, 4, 8, 5);
        let obs = Observation::from_dataset(&ds).unwrap();
        let m = ChannelModel::from_channel(&ch);
        let cfg = CrlbConfig::default();
        let layout = ParamLayout::for_channel(&ch, &cfg).unwrap();
        let info = fim(&obs, &m, &layout).unwrap();
        for f in closed_form::Family::ALL {
            for (a, b) in f.pairs() {
                let cf = closed_form::block(&obs, &m, &cfg, a, b).unwrap();
                let (ra, rb) = (layout.range(a).unwrap(), layout.range(b).unwrap());
                let gen = info.matrix.view((ra.start, rb.start), (ra.len(), rb.len())).into_owned();
                assert!(rel(&cf, &gen) < 1e-8, "{f:?} {a:?} {b:?}: {}", rel(&cf, &gen));
            }
        }
        assert!(closed_form::block(&obs, &m, &cfg, Block::Aod, Block::TxGain).is_err());
    }

    #[test]
    fn fim_symmetric_psd_and_scaling() {
        let (ds, ch) = desk_case(4, 3, 2, 4, 8, 6);
        let mut obs = Observation::from_dataset(&ds).unwrap();
        let m = ChannelModel::from_channel(&ch);
        let layout = ParamLayout::for_channel(&ch, &CrlbConfig::default()).unwrap();
        let a = fim(&obs, &m, &layout).unwrap();
        assert!(rel(&a.matrix, &a.matrix.transpose()) < 1e-12);
        assert!(a.is_psd(1e-8));
        obs.sigma2 *= 2.0;
        let b = fim(&obs, &m, &layout).unwrap();
        assert!(rel(&(&a.matrix * 0.5), &b.matrix) < 1e-14);
        obs.sigma2 = 0.0;
        assert!(fim(&obs, &m, &layout).is_err());
    }

    #[test]
    fn whitened_equals_full_covariance() {
        let (ds, ch) = desk_case(4, 3, 2, 4, 8, 7);
        let obs = Observation::from_dataset(&ds).unwrap();
        let m = ChannelModel::from_channel(&ch);
        let layout = ParamLayout::for_channel(&ch, &CrlbConfig::default()).unwrap();
        let w = fim(&obs, &m, &layout).unwrap();
        let u = fim_unwhitened(&ds, &m, &layout).unwrap();
        assert!(rel(&w.matrix, &u.matrix) < 1e-9);
    }

    #[test]
    fn crlb_below_least_squares_mse() {
        let (nt, nr, seed) = (4, 3, 9);
        let cfg = ChannelConfig::new(ArraySpec::ula(nt), ArraySpec::ula(nr), 2, 3, 4);
        let prof = ImpairmentProfile::default();
        let rx = sample_impairments(&cfg.rx, seed, &prof);
        let tx = sample_impairments(&cfg.tx, seed + 1, &prof);
        let ch = ChannelRealization::generate(&cfg, &rx, &tx, seed + 2).unwrap();
        let tc = TrainingConfig {
            frames: 8,
            n_rep: 1,
            lt: 2,
            lr: 2,
            phase_bits: 2,
            snr_db: 5.0,
            power: 1.0,
            seed: seed + 3,
        };
        let setup = TrainingSetup::new(&tc, nt, nr).unwrap();
        let mut err = 0.0;
        let trials = 300;
        let mut bound = 0.0;
        for t in 0..trials {
            let ds = simulate_dataset(std::slice::from_ref(&ch), &setup, 1000 + t).unwrap();
            if t == 0 {
                bound = total_crlb(&ds, &ch, &CrlbConfig::default()).unwrap().crlb;
            }
            let op = ds.whitening_operator().unwrap();
            let est = crate::tensor::pinv(&op.apply(&ds.phi).unwrap()) * op.apply(&ds.y[0]).unwrap();
            for c in 0..4 {
                let truth = crate::tensor::vec(&ch.freq[c]);
                err += crate::tensor::fro_sqr(&(est.columns(c, 1) - truth));
            }
        }
        let mse = err / trials as f64;
        assert!(bound > 0.0 && bound <= mse, "{bound} vs {mse}");
    }

    #[test]
    fn crlb_scaling_and_nesting() {
        let (ds, ch) = desk_case(4, 3, 2, 4, 8, 8);
        let mut obs = Observation::from_dataset(&ds).unwrap();
        let m = ChannelModel::from_channel(&ch);
        let cfg = CrlbConfig::default();
        let a = total_crlb_with(&obs, &m, &cfg).unwrap();
        assert!(a.crlb > 0.0);
        obs.sigma2 *= 2.0;
        let b = total_crlb_with(&obs, &m, &cfg).unwrap();
        assert!((b.crlb / a.crlb - 2.0).abs() < 1e-9 * 2.0, "{} {}", a.crlb, b.crlb);
        let imp: Vec<Block> = Block::ALL.iter().copied().filter(|b| b.is_impairment()).collect();
        let none = CrlbConfig {
            exclude: imp,
            ..cfg.clone()
        };
        let c = total_crlb_with(&obs, &m, &none).unwrap();
        assert!(c.crlb <= b.crlb * (1.0 + 1e-9));
        assert_eq!(a.blocks.len(), 11);
    }
}
