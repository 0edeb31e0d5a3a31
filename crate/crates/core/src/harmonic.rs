//! Frequency-domain model of a phase-shifted-carrier string.
//!
//! Each module's switching function is a pulse train of duty `m_k` whose
//! carrier is shifted by `phi_k`. Its n-th Fourier coefficient is
//! `(2 / (n pi)) sin(n pi m_k)`, and the string voltage harmonic of order `n`
//! is the phasor sum
//!
//! ```text
//! V_n = sum_k (2 V_oc / (n pi)) sin(n pi m_k) e^{j n phi_k}
//! ```
//!
//! The pulsating part of the string voltage drops across the filter
//! inductor, so the current ripple harmonic is `V_n / (n omega L)` and the
//! ripple waveform is the (truncated) sum of those harmonics with zero mean.
//!
//! Everything here is a pure function of its inputs. [`CostModel`] caches
//! the per-module coefficient table and the zero-shift normalisers so that an
//! optimiser can evaluate many phase vectors for a fixed modulation vector.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs, and
    // keeps the sign of -0.0; both would break ordering of canonical vectors.
    if wrapped >= TAU {
        0.0
    } else {
        wrapped + 0.0
    }
}

/// Physical description of one string of cascaded modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of cascaded modules `N`.
    pub module_count: usize,
    /// Carrier frequency in hertz.
    pub switching_frequency: f64,
    /// Filter inductance in henry.
    pub inductance: f64,
    /// Average module voltage in volt.
    pub module_voltage: f64,
    /// DC bus voltage used to normalise WTHD. `None` means `N * module_voltage`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dc_bus_voltage: Option<f64>,
    /// Number of carrier harmonic orders retained in every sum.
    pub harmonic_truncation: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::new(4)
    }
}

impl SystemConfig {
    pub const DEFAULT_HARMONICS: usize = 200;

    /// A string of `module_count` 22.2 V modules switched at 10 kHz into 100 uH.
    pub fn new(module_count: usize) -> Self {
        SystemConfig {
            module_count,
            switching_frequency: 10e3,
            inductance: 100e-6,
            module_voltage: 22.2,
            dc_bus_voltage: None,
            harmonic_truncation: Self::DEFAULT_HARMONICS,
        }
    }

    pub fn with_module_count(&self, module_count: usize) -> Self {
        SystemConfig {
            module_count,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.module_count < 2 {
            return Err(Error::domain(format!(
                "module_count must be at least 2, got {}",
                self.module_count
            )));
        }
        let positive = [
            ("switching_frequency", self.switching_frequency),
            ("inductance", self.inductance),
            ("module_voltage", self.module_voltage),
            ("dc_bus_voltage", self.bus_voltage()),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::domain(format!("{name} must be positive, got {value}")));
            }
        }
        if self.harmonic_truncation < 1 {
            return Err(Error::domain("harmonic_truncation must be at least 1"));
        }
        Ok(())
    }

    /// Switching period `T_s`.
    pub fn period(&self) -> f64 {
        1.0 / self.switching_frequency
    }

    /// Angular switching frequency `2 pi / T_s`.
    pub fn omega(&self) -> f64 {
        TAU * self.switching_frequency
    }

    pub fn bus_voltage(&self) -> f64 {
        self.dc_bus_voltage
            .unwrap_or(self.module_count as f64 * self.module_voltage)
    }
}

/// Per-module modulation indices, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ModulationVector(Vec<f64>);

impl ModulationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("modulation vector is empty"));
        }
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::domain(format!(
                "modulation index m[{k}] = {v} outside [0, 1]"
            )));
        }
        Ok(ModulationVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Full-vector complement `1 - m`.
    pub fn complement(&self) -> Self {
        ModulationVector(self.0.iter().map(|m| 1.0 - m).collect())
    }

    /// `max(m) - min(m)`.
    pub fn spread(&self) -> f64 {
        let (lo, hi) = self
            .0
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| {
                (lo.min(m), hi.max(m))
            });
        hi - lo
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ModulationVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ModulationVector::new(values)
    }
}

impl From<ModulationVector> for Vec<f64> {
    fn from(m: ModulationVector) -> Self {
        m.0
    }
}

/// Carrier phase shifts in radians, each in `[0, 2pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PhaseShiftVector(Vec<f64>);

impl PhaseShiftVector {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::domain("phase-shift vector is empty"));
        }
        if let Some((k, a)) = angles
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && (0.0..TAU).contains(*a)))
        {
            return Err(Error::domain(format!(
                "phase shift phi[{k}] = {a} outside [0, 2pi)"
            )));
        }
        Ok(PhaseShiftVector(angles))
    }

    /// Builds a vector from arbitrary finite angles by wrapping each into `[0, 2pi)`.
    pub fn wrapped(angles: impl IntoIterator<Item = f64>) -> Result<Self> {
        let angles: Vec<f64> = angles.into_iter().map(wrap_angle).collect();
        PhaseShiftVector::new(angles)
    }

    pub fn zeros(len: usize) -> Self {
        PhaseShiftVector(vec![0.0; len])
    }

    /// `[0, free...]`: anchors the first module at zero.
    pub fn anchored(free: &[f64]) -> Result<Self> {
        PhaseShiftVector::wrapped(std::iter::once(0.0).chain(free.iter().copied()))
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.0.iter().map(|a| a.to_degrees()).collect()
    }

    /// Angles of modules `1..N`, i.e. everything after the anchor.
    pub fn free_angles(&self) -> &[f64] {
        &self.0[1..]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for PhaseShiftVector {
    type Error = Error;

    fn try_from(angles: Vec<f64>) -> Result<Self> {
        PhaseShiftVector::new(angles)
    }
}

impl From<PhaseShiftVector> for Vec<f64> {
    fn from(phi: PhaseShiftVector) -> Self {
        phi.0
    }
}

/// Harmonic magnitudes of the string voltage and the inductor current ripple
/// for orders `1..=N_h`; index 0 holds order 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSpectrum {
    pub voltage_magnitudes: Vec<f64>,
    pub current_amplitudes: Vec<f64>,
}

impl HarmonicSpectrum {
    pub fn from_voltage(cfg: &SystemConfig, voltage_magnitudes: Vec<f64>) -> Self {
        let omega_l = cfg.omega() * cfg.inductance;
        let current_amplitudes = voltage_magnitudes
            .iter()
            .enumerate()
            .map(|(i, v)| v / ((i + 1) as f64 * omega_l))
            .collect();
        HarmonicSpectrum {
            voltage_magnitudes,
            current_amplitudes,
        }
    }

    pub fn orders(&self) -> usize {
        self.voltage_magnitudes.len()
    }

    /// CSV with columns `n, voltage_magnitude, current_amplitude`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,voltage_magnitude,current_amplitude\n");
        for (i, (v, a)) in self
            .voltage_magnitudes
            .iter()
            .zip(&self.current_amplitudes)
            .enumerate()
        {
            out.push_str(&format!("{},{v:e},{a:e}\n", i + 1));
        }
        out
    }
}

/// One switching period of the mean-free current ripple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RippleWaveform {
    /// `(time [s], current [A])` pairs on a uniform grid over one period.
    pub samples: Vec<(f64, f64)>,
    /// Integration constant of the ripple; always zero.
    pub dc_offset: f64,
}

impl RippleWaveform {
    pub fn peak_to_peak(&self) -> f64 {
        let (lo, hi) = self
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, i)| {
                (lo.min(i), hi.max(i))
            });
        hi - lo
    }
}

/// Per-order weight `w_n` inside the WTHD sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonicWeighting {
    /// `w_n = 1 / n^2`.
    InverseSquare,
    /// `w_n = 1` (plain THD).
    Uniform,
    /// `w_n = n^-p`.
    InversePower(f64),
}

impl HarmonicWeighting {
    pub fn weight(&self, order: usize) -> f64 {
        let n = order as f64;
        match *self {
            HarmonicWeighting::InverseSquare => 1.0 / (n * n),
            HarmonicWeighting::Uniform => 1.0,
            HarmonicWeighting::InversePower(p) => n.powf(-p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub ripple_weight: f64,
    pub wthd_weight: f64,
    pub wthd_harmonic_weights: HarmonicWeighting,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            ripple_weight: 1.0,
            wthd_weight: 1.0,
            wthd_harmonic_weights: HarmonicWeighting::InverseSquare,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ripple_weight >= 0.0 && self.wthd_weight >= 0.0) {
            return Err(Error::domain("cost weights must be non-negative"));
        }
        if self.ripple_weight == 0.0 && self.wthd_weight == 0.0 {
            return Err(Error::domain("ripple and WTHD weights cannot both be zero"));
        }
        Ok(())
    }
}

/// Normalised cost of one phase vector; both components are ratios against
/// the all-zero phase vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostValue {
    pub total: f64,
    pub ripple_component: f64,
    pub wthd_component: f64,
    /// Peak-to-peak ripple at zero phase shift, amperes.
    pub baseline_ripple: f64,
    /// WTHD at zero phase shift.
    pub baseline_wthd: f64,
}

/// `a_n = (2 / (n pi)) sin(n pi m)`.
pub fn fourier_coefficient(m: f64, n: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::domain(format!("modulation index {m} outside [0, 1]")));
    }
    if n < 1 {
        return Err(Error::domain("harmonic order must be at least 1"));
    }
    Ok(coefficient(m, n))
}

/// DC term `a_0 = 2m` of the switching function.
pub fn dc_coefficient(m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::domain(format!("modulation index {m} outside [0, 1]")));
    }
    Ok(2.0 * m)
}

// A module held at 0 or 1 never switches; return an exact zero rather than
// sin(n pi) rounding noise.
fn coefficient(m: f64, n: usize) -> f64 {
    if m == 0.0 || m == 1.0 {
        return 0.0;
    }
    let n = n as f64;
    2.0 / (n * PI) * (n * PI * m).sin()
}

fn check_inputs(cfg: &SystemConfig, m: &ModulationVector, phi: &PhaseShiftVector) -> Result<()> {
    cfg.validate()?;
    if m.len() != cfg.module_count || phi.len() != cfg.module_count {
        return Err(Error::contract(format!(
            "expected {} modules, got m of length {} and phi of length {}",
            cfg.module_count,
            m.len(),
            phi.len()
        )));
    }
    Ok(())
}

/// Complex string-voltage harmonic of order `n` in volts.
pub fn voltage_harmonic_phasor(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
    n: usize,
) -> Result<Complex64> {
    check_inputs(cfg, m, phi)?;
    if n < 1 {
        return Err(Error::domain("harmonic order must be at least 1"));
    }
    let order = n as f64;
    Ok(m.values()
        .iter()
        .zip(phi.angles())
        .map(|(&mk, &pk)| {
            Complex64::from_polar(cfg.module_voltage * coefficient(mk, n), order * pk)
        })
        .sum())
}

/// Per-module voltage coefficients `2 V_oc/(n pi) sin(n pi m_k)`, stored
/// order-major: `table[(n - 1) * N + k]`.
#[derive(Debug, Clone)]
struct CoefficientTable {
    modules: usize,
    orders: usize,
    values: Vec<f64>,
}

impl CoefficientTable {
    fn new(cfg: &SystemConfig, m: &[f64]) -> Self {
        let modules = m.len();
        let orders = cfg.harmonic_truncation;
        let mut values = Vec::with_capacity(modules * orders);
        for n in 1..=orders {
            values.extend(m.iter().map(|&mk| cfg.module_voltage * coefficient(mk, n)));
        }
        CoefficientTable {
            modules,
            orders,
            values,
        }
    }

    /// Voltage phasors `V_1..V_Nh` for the given shifts.
    fn phasors(&self, phi: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.orders];
        for (k, &angle) in phi.iter().enumerate() {
            let step = Complex64::from_polar(1.0, angle);
            let mut rot = step;
            for (n, slot) in out.iter_mut().enumerate() {
                let c = self.values[n * self.modules + k];
                *slot += rot * c;
                rot *= step;
                // Renormalise now and then so |rot| stays at 1 over long sums.
                if n % 64 == 63 {
                    rot = Complex64::from_polar(1.0, (n + 2) as f64 * angle);
                }
            }
        }
        out
    }
}

/// Voltage phasors for orders `1..=N_h`; index 0 holds order 1.
pub fn voltage_phasors(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
) -> Result<Vec<Complex64>> {
    check_inputs(cfg, m, phi)?;
    Ok(CoefficientTable::new(cfg, m.values()).phasors(phi.angles()))
}

pub fn harmonic_spectrum(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
) -> Result<HarmonicSpectrum> {
    let phasors = voltage_phasors(cfg, m, phi)?;
    Ok(HarmonicSpectrum::from_voltage(
        cfg,
        phasors.iter().map(|p| p.norm()).collect(),
    ))
}

/// Current phasors `Q_n = V_n / (n omega L)` such that the ripple is
/// `Im(sum_n Q_n e^{j n theta})` with `theta = omega t`.
fn current_phasors(cfg: &SystemConfig, voltage: &[Complex64]) -> Vec<Complex64> {
    let omega_l = cfg.omega() * cfg.inductance;
    voltage
        .iter()
        .enumerate()
        .map(|(i, v)| v / ((i + 1) as f64 * omega_l))
        .collect()
}

/// Samples `Im(sum_n Q_n e^{j 2 pi n s / S})` for `s = 0..S` with one inverse FFT.
/// Orders above `S` fold onto their alias, which is exactly what the direct
/// sum would produce at those instants.
fn sample_series(fft: &dyn Fft<f64>, current: &[Complex64]) -> Vec<f64> {
    let size = fft.len();
    let mut buffer = vec![Complex64::new(0.0, 0.0); size];
    for (i, q) in current.iter().enumerate() {
        buffer[(i + 1) % size] += q;
    }
    fft.process(&mut buffer);
    buffer.into_iter().map(|z| z.im).collect()
}

fn inverse_fft(size: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(size)
}

pub const MIN_SAMPLES_PER_PERIOD: usize = 1024;

/// Truncated ripple series on `samples_per_period` uniform instants over one period.
pub fn ripple_waveform(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
    samples_per_period: usize,
) -> Result<RippleWaveform> {
    if samples_per_period < MIN_SAMPLES_PER_PERIOD {
        return Err(Error::domain(format!(
            "samples_per_period must be at least {MIN_SAMPLES_PER_PERIOD}, got {samples_per_period}"
        )));
    }
    let voltage = voltage_phasors(cfg, m, phi)?;
    let current = current_phasors(cfg, &voltage);
    let values = sample_series(inverse_fft(samples_per_period).as_ref(), &current);
    let dt = cfg.period() / samples_per_period as f64;
    Ok(RippleWaveform {
        samples: values
            .into_iter()
            .enumerate()
            .map(|(s, i)| (s as f64 * dt, i))
            .collect(),
        dc_offset: 0.0,
    })
}

/// Value, first and second derivative of `f(theta) = Im(sum_n Q_n e^{j n theta})`.
fn series_derivatives(current: &[Complex64], theta: f64) -> (f64, f64, f64) {
    let step = Complex64::from_polar(1.0, theta);
    let mut rot = step;
    let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for (i, q) in current.iter().enumerate() {
        let n = (i + 1) as f64;
        let z = q * rot;
        f += z.im;
        d1 += n * z.re;
        d2 -= n * n * z.im;
        rot *= step;
    }
    (f, d1, d2)
}

/// Refines a local maximum of `sign * f` found at grid index `s`.
///
/// A parabola through the three grid values gives the starting point and a
/// few Newton steps on the derivative, kept inside the neighbouring grid
/// points, finish the job. Returns the best value seen.
fn refine_extremum(current: &[Complex64], samples: &[f64], s: usize, sign: f64) -> f64 {
    let size = samples.len();
    let h = TAU / size as f64;
    let prev = sign * samples[(s + size - 1) % size];
    let mid = sign * samples[s];
    let next = sign * samples[(s + 1) % size];
    let centre = s as f64 * h;
    let curvature = prev - 2.0 * mid + next;
    let offset = if curvature < 0.0 {
        (0.5 * (prev - next) / curvature).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let (lo, hi) = (centre - h, centre + h);
    let mut t = centre + offset * h;
    let mut best = mid;
    for _ in 0..8 {
        let (f, d1, d2) = series_derivatives(current, t);
        best = best.max(sign * f);
        if !(sign * d2 < 0.0) {
            break;
        }
        let next_t = (t - d1 / d2).clamp(lo, hi);
        let moved = (next_t - t).abs();
        t = next_t;
        if moved < 1e-13 {
            break;
        }
    }
    best
}

/// Largest value of `sign * f` over one period: grid search over `samples`
/// followed by Newton refinement of the few best local maxima.
fn continuous_max(samples: &[f64], current: &[Complex64], sign: f64) -> f64 {
    const CANDIDATES: usize = 3;
    let size = samples.len();
    // best local maxima as (value, index), descending; ties keep the lower index
    let mut top: [(f64, usize); CANDIDATES] = [(f64::NEG_INFINITY, usize::MAX); CANDIDATES];
    let mut consider = |s: usize, prev: f64, v: f64, next: f64| {
        if v >= prev && v >= next && v > top[CANDIDATES - 1].0 {
            let mut slot = CANDIDATES - 1;
            while slot > 0 && v > top[slot - 1].0 {
                top[slot] = top[slot - 1];
                slot -= 1;
            }
            top[slot] = (v, s);
        }
    };
    let at = |s: usize| sign * samples[s];
    consider(0, at(size - 1), at(0), at(1));
    for s in 1..size - 1 {
        consider(s, at(s - 1), at(s), at(s + 1));
    }
    consider(size - 1, at(size - 2), at(size - 1), at(0));
    top.iter()
        .filter(|&&(_, s)| s != usize::MAX)
        .map(|&(_, s)| refine_extremum(current, samples, s, sign))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn grid_size(cfg: &SystemConfig) -> usize {
    (4 * cfg.harmonic_truncation)
        .max(MIN_SAMPLES_PER_PERIOD)
        .next_power_of_two()
}

fn ripple_from_phasors(cfg: &SystemConfig, fft: &dyn Fft<f64>, voltage: &[Complex64]) -> f64 {
    if voltage.iter().all(|v| v.norm_sqr() == 0.0) {
        return 0.0;
    }
    let current = current_phasors(cfg, voltage);
    let samples = sample_series(fft, &current);
    let hi = continuous_max(&samples, &current, 1.0);
    let lo = -continuous_max(&samples, &current, -1.0);
    (hi - lo).max(0.0)
}

/// Peak-to-peak value of the truncated ripple series.
///
/// The extremes are located on a uniform grid and then refined in continuous
/// time, so the value does not depend on where the grid falls relative to the
/// carriers (it is invariant to a common shift of all angles).
pub fn peak_to_peak_ripple(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
) -> Result<f64> {
    let voltage = voltage_phasors(cfg, m, phi)?;
    let fft = inverse_fft(grid_size(cfg));
    Ok(ripple_from_phasors(cfg, fft.as_ref(), &voltage))
}

fn wthd_from_phasors(cfg: &SystemConfig, weights: &[f64], voltage: &[Complex64]) -> f64 {
    let sum: f64 = voltage
        .iter()
        .zip(weights)
        .map(|(v, w)| w * v.norm_sqr())
        .sum();
    sum.sqrt() / cfg.bus_voltage()
}

fn order_weights(cfg: &SystemConfig, weights: &CostWeights) -> Vec<f64> {
    (1..=cfg.harmonic_truncation)
        .map(|n| weights.wthd_harmonic_weights.weight(n))
        .collect()
}

/// `sqrt(sum_n w_n |V_n|^2) / V_dc` over the voltage harmonics.
pub fn wthd(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
    weights: &CostWeights,
) -> Result<f64> {
    let voltage = voltage_phasors(cfg, m, phi)?;
    Ok(wthd_from_phasors(cfg, &order_weights(cfg, weights), &voltage))
}

pub fn cost(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
    weights: &CostWeights,
) -> Result<CostValue> {
    check_inputs(cfg, m, phi)?;
    Ok(CostModel::new(cfg, m, weights)?.evaluate(phi.angles()))
}

/// Evenly spaced carriers `[0, 2pi/N, ..., 2pi(N-1)/N]`.
pub fn conventional_shifts(module_count: usize) -> Result<PhaseShiftVector> {
    if module_count < 2 {
        return Err(Error::domain(format!(
            "conventional shifts need at least 2 modules, got {module_count}"
        )));
    }
    PhaseShiftVector::new(
        (0..module_count)
            .map(|k| TAU * k as f64 / module_count as f64)
            .collect(),
    )
}

/// Cost function for one fixed modulation vector.
///
/// Construction computes the coefficient table and the zero-shift normalisers
/// once; [`CostModel::evaluate`] is then cheap enough to sit in an optimiser loop.
#[derive(Clone)]
pub struct CostModel {
    cfg: SystemConfig,
    weights: CostWeights,
    table: CoefficientTable,
    order_weights: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    baseline_ripple: f64,
    baseline_wthd: f64,
}

impl std::fmt::Debug for CostModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostModel")
            .field("cfg", &self.cfg)
            .field("weights", &self.weights)
            .field("baseline_ripple", &self.baseline_ripple)
            .field("baseline_wthd", &self.baseline_wthd)
            .finish_non_exhaustive()
    }
}

impl CostModel {
    /// Fails with [`Error::Degenerate`] when the zero-shift ripple or WTHD is
    /// zero, which happens exactly when no module switches (every `m_k` is 0 or 1).
    pub fn new(cfg: &SystemConfig, m: &ModulationVector, weights: &CostWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if m.len() != cfg.module_count {
            return Err(Error::contract(format!(
                "expected {} modules, got m of length {}",
                cfg.module_count,
                m.len()
            )));
        }
        let table = CoefficientTable::new(cfg, m.values());
        let order_weights = order_weights(cfg, weights);
        let fft = inverse_fft(grid_size(cfg));
        let zero = table.phasors(&vec![0.0; cfg.module_count]);
        let baseline_ripple = ripple_from_phasors(cfg, fft.as_ref(), &zero);
        let baseline_wthd = wthd_from_phasors(cfg, &order_weights, &zero);
        if baseline_ripple <= 0.0 {
            return Err(Error::Degenerate(format!(
                "baseline ripple at zero phase shift is zero for m = {:?}",
                m.values()
            )));
        }
        if baseline_wthd <= 0.0 {
            return Err(Error::Degenerate(format!(
                "baseline WTHD at zero phase shift is zero for m = {:?}",
                m.values()
            )));
        }
        Ok(CostModel {
            cfg: cfg.clone(),
            weights: weights.clone(),
            table,
            order_weights,
            fft,
            baseline_ripple,
            baseline_wthd,
        })
    }

    pub fn module_count(&self) -> usize {
        self.cfg.module_count
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn baseline_ripple(&self) -> f64 {
        self.baseline_ripple
    }

    pub fn baseline_wthd(&self) -> f64 {
        self.baseline_wthd
    }

    /// Cost of a full phase vector (length `N`, any real angles).
    pub fn evaluate(&self, phi: &[f64]) -> CostValue {
        debug_assert_eq!(phi.len(), self.cfg.module_count);
        let voltage = self.table.phasors(phi);
        let ripple = ripple_from_phasors(&self.cfg, self.fft.as_ref(), &voltage);
        let wthd = wthd_from_phasors(&self.cfg, &self.order_weights, &voltage);
        let ripple_component = ripple / self.baseline_ripple;
        let wthd_component = wthd / self.baseline_wthd;
        CostValue {
            total: self.weights.ripple_weight * ripple_component
                + self.weights.wthd_weight * wthd_component,
            ripple_component,
            wthd_component,
            baseline_ripple: self.baseline_ripple,
            baseline_wthd: self.baseline_wthd,
        }
    }

    /// Cost with module 0 anchored at zero and `free` giving modules `1..N`.
    pub fn evaluate_free(&self, free: &[f64]) -> CostValue {
        let mut phi = Vec::with_capacity(free.len() + 1);
        phi.push(0.0);
        phi.extend_from_slice(free);
        self.evaluate(&phi)
    }
}
