//! Array manifolds with hardware impairments.
//!
//! Distances are in carrier wavelengths. A realization bundles the spacing
//! errors, per-element gain/phase errors and the mutual-coupling matrix of
//! one side of the link.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::tensor::{CMatrix, C64, J, ONE, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Ula,
    Uca,
}

/// Angular sector, `[center - width/2, center + width/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub center: f64,
    pub width: f64,
}

impl Sector {
    pub fn lo(&self) -> f64 {
        self.center - self.width / 2.0
    }

    pub fn hi(&self) -> f64 {
        self.center + self.width / 2.0
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.lo() - 1e-12 && angle <= self.hi() + 1e-12
    }
}

impl Default for Sector {
    /// 120 degrees around broadside.
    fn default() -> Self {
        Self {
            center: 0.0,
            width: 2.0 * PI / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub geometry: Geometry,
    pub n_antennas: usize,
    #[serde(default = "default_spacing")]
    pub nominal_spacing: f64,
    #[serde(default)]
    pub sector: Sector,
}

fn default_spacing() -> f64 {
    0.5
}

impl ArraySpec {
    pub fn ula(n: usize) -> Self {
        Self {
            geometry: Geometry::Ula,
            n_antennas: n,
            nominal_spacing: 0.5,
            sector: Sector::default(),
        }
    }

    pub fn uca(n: usize) -> Self {
        Self {
            geometry: Geometry::Uca,
            ..Self::ula(n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_antennas == 0 {
            return arg_err("array needs at least one antenna");
        }
        if !(self.nominal_spacing > 0.0) {
            return arg_err("nominal spacing must be positive");
        }
        if self.sector.lo() < -PI - 1e-12 || self.sector.hi() > PI + 1e-12 {
            return arg_err("sector must lie within [-pi, pi)");
        }
        Ok(())
    }

    /// UCA radius for which the arc between adjacent elements equals the
    /// nominal spacing.
    pub fn uca_radius(&self) -> f64 {
        self.n_antennas as f64 * self.nominal_spacing / (2.0 * PI)
    }
}

/// Which entries of the coupling matrix are tied to one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingConvention {
    /// One coefficient per unordered pair `(i, j)`, `C[i][j] = C[j][i]`.
    FullSymmetric,
    /// One coefficient per lag `k`, on both the k-th super- and sub-diagonal.
    Toeplitz,
}

/// Statistics of the hardware impairments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentProfile {
    /// Half-width of the uniform jitter on each inter-element gap (wavelengths).
    pub spacing_jitter: f64,
    /// Standard deviation of the relative gain error.
    pub gain_std: f64,
    /// Standard deviation of the phase error (radians).
    pub phase_std: f64,
    /// Coupling magnitude range; magnitudes are log-uniform inside it.
    pub coupling_min: f64,
    pub coupling_max: f64,
}

impl ImpairmentProfile {
    pub fn ideal() -> Self {
        Self {
            spacing_jitter: 0.0,
            gain_std: 0.0,
            phase_std: 0.0,
            coupling_min: 0.0,
            coupling_max: 0.0,
        }
    }

    pub fn is_ideal(&self) -> bool {
        *self == Self::ideal()
    }
}

impl Default for ImpairmentProfile {
    /// Gaps uniform in [0.4, 0.6] wavelengths, 5 % gain error, 20 degree phase
    /// error and coupling magnitudes between 0.01 and 0.4.
    fn default() -> Self {
        Self {
            spacing_jitter: 0.1,
            gain_std: 0.05,
            phase_std: 20.0 * PI / 180.0,
            coupling_min: 0.01,
            coupling_max: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentRealization {
    /// `eps_1 .. eps_{n-1}`; element 0 is the reference with zero error.
    pub spacing_errors: Vec<f64>,
    pub gains: Vec<f64>,
    pub phases: Vec<f64>,
    /// Row-major `n x n` coupling matrix.
    pub coupling: Vec<C64>,
}

impl ImpairmentRealization {
    pub fn ideal(n: usize) -> Self {
        let mut coupling = vec![ZERO; n * n];
        for i in 0..n {
            coupling[i * n + i] = ONE;
        }
        Self {
            spacing_errors: vec![0.0; n.saturating_sub(1)],
            gains: vec![1.0; n],
            phases: vec![0.0; n],
            coupling,
        }
    }

    pub fn n(&self) -> usize {
        self.gains.len()
    }

    /// Offset of element `m` from its nominal position (zero for `m = 0`).
    pub fn offset(&self, m: usize) -> f64 {
        if m == 0 {
            0.0
        } else {
            self.spacing_errors[m - 1]
        }
    }

    pub fn coupling_matrix(&self) -> CMatrix {
        let n = self.n();
        CMatrix::from_row_slice(n, n, &self.coupling)
    }

    pub fn set_coupling_matrix(&mut self, c: &CMatrix) {
        let n = self.n();
        self.coupling = (0..n * n).map(|idx| c[(idx / n, idx % n)]).collect();
    }
}

/// Draws a realization; identical seeds give identical realizations.
pub fn sample_impairments(
    spec: &ArraySpec,
    seed: u64,
    profile: &ImpairmentProfile,
) -> ImpairmentRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_impairments_with(spec, profile, &mut rng)
}

pub fn sample_impairments_with<R: Rng + ?Sized>(
    spec: &ArraySpec,
    profile: &ImpairmentProfile,
    rng: &mut R,
) -> ImpairmentRealization {
    let n = spec.n_antennas;
    let mut imp = ImpairmentRealization::ideal(n);

    let mut offset = 0.0;
    for e in imp.spacing_errors.iter_mut() {
        let jitter = if profile.spacing_jitter > 0.0 {
            rng.random_range(-profile.spacing_jitter..=profile.spacing_jitter)
        } else {
            0.0
        };
        offset += jitter;
        *e = offset;
    }
    for g in imp.gains.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        // clamp keeps the gain positive for pathological profiles
        *g = (1.0 + profile.gain_std * z).max(1e-3);
    }
    for p in imp.phases.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *p = profile.phase_std * z;
    }

    let lags = match spec.geometry {
        Geometry::Ula => n.saturating_sub(1),
        Geometry::Uca => n / 2,
    };
    let coeffs = sample_coupling_coefficients(lags, profile, rng);
    let mut c = CMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = i.abs_diff(j);
            let lag = match spec.geometry {
                Geometry::Ula => d,
                Geometry::Uca => d.min(n - d),
            };
            c[(i, j)] = coeffs[lag - 1];
        }
    }
    imp.set_coupling_matrix(&c);
    imp
}

fn sample_coupling_coefficients<R: Rng + ?Sized>(
    count: usize,
    profile: &ImpairmentProfile,
    rng: &mut R,
) -> Vec<C64> {
    if profile.coupling_max <= 0.0 {
        return vec![ZERO; count];
    }
    let lo = profile.coupling_min.max(1e-12).min(profile.coupling_max);
    let (llo, lhi) = (lo.ln(), profile.coupling_max.ln());
    let mut mags: Vec<f64> = (0..count)
        .map(|_| {
            if lhi > llo {
                rng.random_range(llo..=lhi).exp()
            } else {
                lo
            }
        })
        .collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    mags.into_iter()
        .map(|m| C64::from_polar(m, rng.random_range(0.0..2.0 * PI)))
        .collect()
}

/// Phase argument (radians) of element `m` at `angle`, and its derivatives
/// with respect to the angle and to the element's own position error.
fn element_phase(spec: &ArraySpec, imp: &ImpairmentRealization, m: usize, angle: f64) -> (f64, f64, f64) {
    let eps = imp.offset(m);
    match spec.geometry {
        Geometry::Ula => {
            let pos = m as f64 * spec.nominal_spacing + eps;
            let k = -2.0 * PI;
            (k * pos * angle.sin(), k * pos * angle.cos(), k * angle.sin())
        }
        Geometry::Uca => {
            let n = spec.n_antennas as f64;
            let r = spec.uca_radius();
            // arc-length error moves the element along the circle
            let psi = 2.0 * PI * m as f64 / n + eps / r;
            let arg = angle - psi;
            let k = 2.0 * PI * r;
            (k * arg.cos(), -k * arg.sin(), 2.0 * PI * arg.sin())
        }
    }
}

/// Unit-norm array response at `angle`.
pub fn steering_vector(spec: &ArraySpec, imp: &ImpairmentRealization, angle: f64) -> CMatrix {
    let n = spec.n_antennas;
    let s = 1.0 / (n as f64).sqrt();
    CMatrix::from_fn(n, 1, |m, _| {
        let (ph, _, _) = element_phase(spec, imp, m, angle);
        C64::from_polar(s, ph)
    })
}

/// Derivative of [`steering_vector`] with respect to the angle.
pub fn steering_derivative_angle(spec: &ArraySpec, imp: &ImpairmentRealization, angle: f64) -> CMatrix {
    let n = spec.n_antennas;
    let s = 1.0 / (n as f64).sqrt();
    CMatrix::from_fn(n, 1, |m, _| {
        let (ph, dph, _) = element_phase(spec, imp, m, angle);
        J * dph * C64::from_polar(s, ph)
    })
}

/// Derivative of [`steering_vector`] with respect to the spacing error of
/// element `gap` (1-based, `1 <= gap <= n-1`).
pub fn steering_derivative_spacing(
    spec: &ArraySpec,
    imp: &ImpairmentRealization,
    angle: f64,
    gap: usize,
) -> Result<CMatrix> {
    let n = spec.n_antennas;
    if gap == 0 || gap >= n {
        return arg_err(format!("spacing index {gap} outside 1..={}", n.saturating_sub(1)));
    }
    let s = 1.0 / (n as f64).sqrt();
    let mut out = CMatrix::zeros(n, 1);
    let (ph, _, deps) = element_phase(spec, imp, gap, angle);
    out[gap] = J * deps * C64::from_polar(s, ph);
    Ok(out)
}

/// `diag(g_i exp(j nu_i))`.
pub fn gain_phase_matrix(imp: &ImpairmentRealization) -> CMatrix {
    let entries: Vec<C64> = imp
        .gains
        .iter()
        .zip(&imp.phases)
        .map(|(&g, &p)| C64::from_polar(g, p))
        .collect();
    crate::tensor::diag(&entries)
}

/// Independent coupling parameter, 1-based as in `c_{i,j}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingParam {
    Pair(usize, usize),
    Lag(usize),
}

/// Parameters of an `n`-element coupling matrix under `convention`.
pub fn coupling_params(n: usize, convention: CouplingConvention) -> Vec<CouplingParam> {
    match convention {
        CouplingConvention::FullSymmetric => (1..=n)
            .flat_map(|i| ((i + 1)..=n).map(move |j| CouplingParam::Pair(i, j)))
            .collect(),
        CouplingConvention::Toeplitz => (1..n).map(CouplingParam::Lag).collect(),
    }
}

/// Current value of a coupling parameter.
pub fn coupling_value(imp: &ImpairmentRealization, p: CouplingParam) -> C64 {
    let c = imp.coupling_matrix();
    match p {
        CouplingParam::Pair(i, j) => c[(i - 1, j - 1)],
        CouplingParam::Lag(k) => c[(0, k)],
    }
}

/// Indicator matrix of the entries tied to coefficient `c_{i,j}` (1-based,
/// `i < j`) under the symmetric convention.
pub fn coupling_derivative(n: usize, i: usize, j: usize) -> Result<CMatrix> {
    coupling_param_derivative(n, CouplingParam::Pair(i, j))
}

pub fn coupling_param_derivative(n: usize, p: CouplingParam) -> Result<CMatrix> {
    let mut d = CMatrix::zeros(n, n);
    match p {
        CouplingParam::Pair(i, j) => {
            if !(1 <= i && i < j && j <= n) {
                return arg_err(format!("coupling index ({i},{j}) invalid for n={n}"));
            }
            d[(i - 1, j - 1)] = ONE;
            d[(j - 1, i - 1)] = ONE;
        }
        CouplingParam::Lag(k) => {
            if k == 0 || k >= n {
                return arg_err(format!("coupling lag {k} invalid for n={n}"));
            }
            for r in 0..n - k {
                d[(r, r + k)] = ONE;
                d[(r + k, r)] = ONE;
            }
        }
    }
    Ok(d)
}

/// Effective array matrix `C Gamma [a(angle_0) ...]`.
pub fn effective_response(spec: &ArraySpec, imp: &ImpairmentRealization, angles: &[f64]) -> CMatrix {
    let mut a = CMatrix::zeros(spec.n_antennas, angles.len());
    for (k, &ang) in angles.iter().enumerate() {
        a.set_column(k, &steering_vector(spec, imp, ang).column(0));
    }
    imp.coupling_matrix() * gain_phase_matrix(imp) * a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_diff;

    fn fd<F: Fn(f64) -> CMatrix>(f: F, x: f64, h: f64) -> CMatrix {
        (f(x + h) - f(x - h)).unscale(2.0 * h)
    }

    fn impaired(spec: &ArraySpec, seed: u64) -> ImpairmentRealization {
        sample_impairments(spec, seed, &ImpairmentProfile::default())
    }

    #[test]
    fn zero_profile_is_ideal() {
        let spec = ArraySpec::ula(6);
        let imp = sample_impairments(&spec, 3, &ImpairmentProfile::ideal());
        assert_eq!(imp, ImpairmentRealization::ideal(6));
        assert_eq!(imp.coupling_matrix(), CMatrix::identity(6, 6));
    }

    #[test]
    fn default_profile_gaps_and_coupling() {
        let spec = ArraySpec::ula(8);
        for seed in 0..50 {
            let imp = impaired(&spec, seed);
            for m in 1..8 {
                let gap = 0.5 + imp.offset(m) - imp.offset(m - 1);
                assert!((0.4 - 1e-12..=0.6 + 1e-12).contains(&gap), "gap {gap}");
            }
            let c = imp.coupling_matrix();
            for i in 0..8 {
                assert_eq!(c[(i, i)], ONE);
                for j in 0..8 {
                    if i != j {
                        let mag = c[(i, j)].norm();
                        assert!((0.01 - 1e-12..=0.4 + 1e-12).contains(&mag));
                        // symmetric Toeplitz
                        assert_eq!(c[(i, j)], c[(j, i)]);
                        if i > 0 && j > 0 {
                            assert_eq!(c[(i, j)], c[(i - 1, j - 1)]);
                        }
                    }
                }
            }
            for k in 2..8 {
                assert!(c[(0, k)].norm() <= c[(0, k - 1)].norm());
            }
            assert!(imp.gains.iter().all(|&g| g > 0.0));
        }
        assert_eq!(impaired(&spec, 9), impaired(&spec, 9));
    }

    #[test]
    fn uca_coupling_is_circulant() {
        let spec = ArraySpec::uca(6);
        let c = impaired(&spec, 4).coupling_matrix();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(c[(i, j)], c[((i + 1) % 6, (j + 1) % 6)]);
            }
        }
    }

    #[test]
    fn broadside_ula_is_flat() {
        let spec = ArraySpec::ula(5);
        let a = steering_vector(&spec, &ImpairmentRealization::ideal(5), 0.0);
        let v = 1.0 / 5f64.sqrt();
        assert!(a.iter().all(|z| (*z - C64::new(v, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn ula_vandermonde_at_thirty_degrees() {
        let spec = ArraySpec::ula(8);
        let a = steering_vector(&spec, &ImpairmentRealization::ideal(8), PI / 6.0);
        for m in 0..8 {
            let expected = C64::from_polar(1.0 / 8f64.sqrt(), -PI * m as f64 / 2.0);
            assert!((a[m] - expected).norm() < 1e-14);
        }
    }

    #[test]
    fn steering_vectors_are_unit_norm() {
        for spec in [ArraySpec::ula(7), ArraySpec::uca(7)] {
            let imp = impaired(&spec, 1);
            for k in 0..100 {
                let ang = -PI + 2.0 * PI * k as f64 / 100.0;
                assert!((steering_vector(&spec, &imp, ang).norm() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn angle_derivative() {
        let spec = ArraySpec::ula(4);
        let ideal = ImpairmentRealization::ideal(4);
        let d = steering_derivative_angle(&spec, &ideal, 0.3);
        assert_eq!(d[0], ZERO);
        let d = steering_derivative_angle(&spec, &ideal, PI / 2.0);
        assert!(d.norm() < 1e-14);
        for spec in [ArraySpec::ula(4), ArraySpec::uca(5)] {
            let imp = impaired(&spec, 2);
            let ang = 0.41;
            let an = steering_derivative_angle(&spec, &imp, ang);
            let num = fd(|x| steering_vector(&spec, &imp, x), ang, 1e-6);
            assert!(rel_diff(&an, &num) < 1e-6, "{}", rel_diff(&an, &num));
        }
    }

    #[test]
    fn spacing_derivative() {
        let spec = ArraySpec::ula(5);
        let imp = impaired(&spec, 3);
        assert!(steering_derivative_spacing(&spec, &imp, 0.0, 2).unwrap().norm() < 1e-15);
        assert!(steering_derivative_spacing(&spec, &imp, 0.2, 0).is_err());
        assert!(steering_derivative_spacing(&spec, &imp, 0.2, 5).is_err());
        for spec in [ArraySpec::ula(5), ArraySpec::uca(5)] {
            let imp = impaired(&spec, 3);
            for gap in 1..5 {
                let an = steering_derivative_spacing(&spec, &imp, -0.7, gap).unwrap();
                for m in 0..5 {
                    if m != gap {
                        assert_eq!(an[m], ZERO);
                    }
                }
                let num = fd(
                    |x| {
                        let mut p = imp.clone();
                        p.spacing_errors[gap - 1] = x;
                        steering_vector(&spec, &p, -0.7)
                    },
                    imp.spacing_errors[gap - 1],
                    1e-6,
                );
                assert!(rel_diff(&an, &num) < 1e-6);
            }
        }
    }

    #[test]
    fn gain_phase_cases() {
        assert_eq!(gain_phase_matrix(&ImpairmentRealization::ideal(3)), CMatrix::identity(3, 3));
        let mut one = ImpairmentRealization::ideal(1);
        one.gains[0] = 2.0;
        one.phases[0] = PI;
        assert!((gain_phase_matrix(&one)[(0, 0)] - C64::new(-2.0, 0.0)).norm() < 1e-15);
        let imp = impaired(&ArraySpec::ula(6), 5);
        let g = gain_phase_matrix(&imp);
        for i in 0..6 {
            assert!((g[(i, i)].norm() - imp.gains[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn coupling_derivative_cases() {
        let d = coupling_derivative(2, 1, 2).unwrap();
        assert_eq!(d, CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]));
        // finite difference of the symmetric construction w.r.t. c_12
        let build = |x: f64| {
            let mut c = CMatrix::identity(2, 2);
            c[(0, 1)] = C64::new(x, 0.0);
            c[(1, 0)] = C64::new(x, 0.0);
            c
        };
        assert!(rel_diff(&fd(build, 0.2, 1e-6), &d) < 1e-8);
        // entries tied to another coefficient are untouched
        let d13 = coupling_derivative(4, 1, 3).unwrap();
        assert_eq!(d13[(0, 1)], ZERO);
        assert_eq!(d13[(1, 3)], ZERO);
        assert!(coupling_derivative(3, 2, 2).is_err());
        assert!(coupling_derivative(3, 1, 4).is_err());

        let spec = ArraySpec::ula(5);
        let imp = impaired(&spec, 6);
        for conv in [CouplingConvention::FullSymmetric, CouplingConvention::Toeplitz] {
            let mut rebuilt = CMatrix::identity(5, 5);
            for p in coupling_params(5, conv) {
                rebuilt += coupling_param_derivative(5, p).unwrap() * coupling_value(&imp, p);
            }
            assert!(rel_diff(&rebuilt, &imp.coupling_matrix()) < 1e-15);
        }
        assert_eq!(coupling_params(5, CouplingConvention::FullSymmetric).len(), 10);
        assert_eq!(coupling_params(5, CouplingConvention::Toeplitz).len(), 4);
    }

    #[test]
    fn realization_json_round_trip() {
        let imp = impaired(&ArraySpec::ula(3), 8);
        let s = serde_json::to_string(&imp).unwrap();
        assert!(s.contains("\"coupling\":[[1.0,0.0]"));
        let back: ImpairmentRealization = serde_json::from_str(&s).unwrap();
        assert_eq!(back, imp);
    }
}
