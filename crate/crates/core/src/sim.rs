//! Sampled time-domain simulation of the string.
//!
//! Carriers are compared against the modulation indices sample by sample,
//! the inserted module voltages are summed into the pack voltage and the
//! pulsating part is integrated across the filter inductor. Nothing here
//! uses the Fourier model, which is what makes it useful as a cross-check.
//!
//! Conventions: a carrier with phase `phi` is delayed by `phi / omega`. The
//! triangular carrier has its valley at the phase instant, so a module's
//! pulse is centred on `phi`; the rising sawtooth starts its ramp at `phi`,
//! so the pulse occupies `[phi, phi + 2 pi m)`.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonic::{
    wrap_angle, HarmonicSpectrum, ModulationVector, PhaseShiftVector, SystemConfig,
    MIN_SAMPLES_PER_PERIOD,
};

/// Resolution used by the oracle comparisons.
pub const ORACLE_SAMPLES_PER_PERIOD: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierShape {
    /// Center-aligned: 0 at the phase instant, 1 half a period later.
    Triangular,
    /// Edge-aligned: ramps 0 to 1 starting at the phase instant.
    SawtoothRising,
}

impl std::str::FromStr for CarrierShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangular" | "triangle" | "tri" => Ok(CarrierShape::Triangular),
            "sawtooth" | "sawtooth_rising" | "saw" => Ok(CarrierShape::SawtoothRising),
            other => Err(Error::domain(format!("unknown carrier shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarrierSpec {
    pub shape: CarrierShape,
    pub phase: f64,
    pub frequency: f64,
}

impl CarrierSpec {
    pub fn new(shape: CarrierShape, phase: f64, frequency: f64) -> Result<Self> {
        if !(0.0..TAU).contains(&phase) {
            return Err(Error::domain(format!("carrier phase {phase} outside [0, 2pi)")));
        }
        if !(frequency > 0.0) {
            return Err(Error::domain("carrier frequency must be positive"));
        }
        Ok(CarrierSpec {
            shape,
            phase,
            frequency,
        })
    }

    /// Carrier value at fractional period position `cycles` (time in periods).
    fn at_cycles(&self, cycles: f64) -> f64 {
        let u = (cycles - self.phase / TAU).rem_euclid(1.0);
        match self.shape {
            CarrierShape::Triangular => {
                if u < 0.5 {
                    2.0 * u
                } else {
                    2.0 - 2.0 * u
                }
            }
            CarrierShape::SawtoothRising => u,
        }
    }
}

pub fn carrier_value(spec: &CarrierSpec, t: f64) -> f64 {
    spec.at_cycles(t * spec.frequency)
}

fn compare(m: f64, carrier: f64) -> u8 {
    // m == carrier resolves to 0; the extremes never switch.
    if m >= 1.0 {
        1
    } else if m <= 0.0 {
        0
    } else {
        u8::from(m > carrier)
    }
}

/// Module state `s_k(t)`: 1 while the reference exceeds the carrier.
pub fn switching_signal(m: f64, spec: &CarrierSpec, t: f64) -> u8 {
    compare(m, carrier_value(spec, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchTrace {
    pub config: SystemConfig,
    pub samples_per_period: usize,
    /// `states[k][s]` is module `k` at sample `s`.
    pub states: Vec<Vec<u8>>,
    pub pack_voltage: Vec<f64>,
    pub ripple_current: Vec<f64>,
}

impl SwitchTrace {
    pub fn sample_time(&self, s: usize) -> f64 {
        s as f64 * self.config.period() / self.samples_per_period as f64
    }

    pub fn peak_to_peak(&self) -> f64 {
        let hi = self.ripple_current.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.ripple_current.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn mean_pack_voltage(&self) -> f64 {
        self.pack_voltage.iter().sum::<f64>() / self.pack_voltage.len() as f64
    }

    /// Distinct pack-voltage levels, in units of the module voltage.
    pub fn voltage_levels(&self) -> Vec<usize> {
        let mut levels: Vec<usize> = self
            .states
            .first()
            .map(|first| {
                (0..first.len())
                    .map(|s| self.states.iter().map(|m| m[s] as usize).sum())
                    .collect()
            })
            .unwrap_or_default();
        levels.sort_unstable();
        levels.dedup();
        levels
    }

    /// Fraction of the period module `k` is inserted.
    pub fn duty(&self, module: usize) -> f64 {
        let st = &self.states[module];
        st.iter().map(|&s| s as f64).sum::<f64>() / st.len() as f64
    }

    /// CSV with columns `t, s_1..s_N, v_p, delta_i_p`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for k in 1..=self.states.len() {
            let _ = write!(out, ",s_{k}");
        }
        out.push_str(",v_p,delta_i_p\n");
        for s in 0..self.samples_per_period {
            let _ = write!(out, "{:e}", self.sample_time(s));
            for module in &self.states {
                let _ = write!(out, ",{}", module[s]);
            }
            let _ = writeln!(out, ",{},{:e}", self.pack_voltage[s], self.ripple_current[s]);
        }
        out
    }
}

pub fn simulate(
    cfg: &SystemConfig,
    m: &ModulationVector,
    phi: &PhaseShiftVector,
    shape: CarrierShape,
    samples_per_period: usize,
) -> Result<SwitchTrace> {
    cfg.validate()?;
    if m.len() != cfg.module_count || phi.len() != cfg.module_count {
        return Err(Error::contract(format!(
            "expected {} modules, got m of length {} and phi of length {}",
            cfg.module_count,
            m.len(),
            phi.len()
        )));
    }
    if samples_per_period < MIN_SAMPLES_PER_PERIOD {
        return Err(Error::domain(format!(
            "samples_per_period must be at least {MIN_SAMPLES_PER_PERIOD}, got {samples_per_period}"
        )));
    }
    let size = samples_per_period;
    let states: Vec<Vec<u8>> = m
        .values()
        .iter()
        .zip(phi.angles())
        .map(|(&mk, &pk)| {
            let carrier = CarrierSpec::new(shape, pk, cfg.switching_frequency)?;
            Ok((0..size)
                .map(|s| compare(mk, carrier.at_cycles(s as f64 / size as f64)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let pack_voltage: Vec<f64> = (0..size)
        .map(|s| {
            let inserted: u32 = states.iter().map(|st| st[s] as u32).sum();
            cfg.module_voltage * inserted as f64
        })
        .collect();
    let mean = pack_voltage.iter().sum::<f64>() / size as f64;
    let dt = cfg.period() / size as f64;
    let mut ripple = Vec::with_capacity(size);
    let mut current = 0.0;
    ripple.push(current);
    for s in 1..size {
        let a = pack_voltage[s - 1] - mean;
        let b = pack_voltage[s] - mean;
        current += 0.5 * (a + b) * dt / cfg.inductance;
        ripple.push(current);
    }
    let offset = ripple.iter().sum::<f64>() / size as f64;
    ripple.iter_mut().for_each(|i| *i -= offset);
    Ok(SwitchTrace {
        config: cfg.clone(),
        samples_per_period: size,
        states,
        pack_voltage,
        ripple_current: ripple,
    })
}

fn dft(signal: &[f64]) -> Vec<Complex64> {
    let mut buffer: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(buffer.len())
        .process(&mut buffer);
    buffer
}

/// Harmonic magnitudes of the sampled pack voltage at orders `1..=N_h`.
pub fn measured_spectrum(trace: &SwitchTrace) -> Result<HarmonicSpectrum> {
    let size = trace.samples_per_period;
    if trace.pack_voltage.len() != size || trace.states.iter().any(|s| s.len() != size) {
        return Err(Error::contract(format!(
            "trace holds {} samples but claims {size} per period",
            trace.pack_voltage.len()
        )));
    }
    let orders = trace.config.harmonic_truncation;
    if 2 * orders >= size {
        return Err(Error::contract(format!(
            "{orders} harmonic orders need more than {} samples per period",
            2 * orders
        )));
    }
    let bins = dft(&trace.pack_voltage);
    let scale = 2.0 / size as f64;
    Ok(HarmonicSpectrum::from_voltage(
        &trace.config,
        (1..=orders).map(|n| bins[n].norm() * scale).collect(),
    ))
}

/// Delay angle of the fundamental of module `k`'s switching function: the
/// centre of its pulse, in `[0, 2pi)`.
pub fn fundamental_phase(trace: &SwitchTrace, module: usize) -> Result<f64> {
    let states = trace
        .states
        .get(module)
        .ok_or_else(|| Error::contract(format!("trace has no module {module}")))?;
    let signal: Vec<f64> = states.iter().map(|&s| s as f64).collect();
    let first = dft(&signal)[1];
    if first.norm() == 0.0 {
        return Err(Error::domain(format!(
            "module {module} does not switch; its fundamental phase is undefined"
        )));
    }
    Ok(wrap_angle(-first.arg()))
}
