//! Run-time shift selection with a trained network.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::dataset::canonicalize_sample;
use crate::error::{Error, Result};
use crate::harmonic::{conventional_shifts, wrap_angle, ModulationVector, PhaseShiftVector, SystemConfig};
use crate::mlp::MlpModel;

pub const DEFAULT_EQUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct InferenceContext {
    pub model: MlpModel,
    /// Module count the network was trained for.
    pub base_module_count: usize,
    pub cfg: SystemConfig,
    /// Spreads `max(m) - min(m)` up to this value use conventional shifts.
    pub equal_tolerance: f64,
}

impl InferenceContext {
    /// `cfg.module_count` must equal the network's module count or be a
    /// multiple of it.
    pub fn new(model: MlpModel, cfg: SystemConfig) -> Result<Self> {
        cfg.validate()?;
        let base = model.input_width();
        model.check_module_count(base)?;
        if base < 2 || cfg.module_count % base != 0 {
            return Err(Error::contract(format!(
                "a {base}-module network cannot serve a {}-module string",
                cfg.module_count
            )));
        }
        Ok(InferenceContext {
            model,
            base_module_count: base,
            cfg,
            equal_tolerance: DEFAULT_EQUAL_TOLERANCE,
        })
    }

    /// Shifts for one group of `N_b` modules.
    ///
    /// Near-equal indices get conventional shifts. Otherwise the vector is
    /// canonicalised, the network predicts the free angles of the canonical
    /// order, and each physical module receives the angle of its canonical
    /// slot. Taking the complement needs no correction.
    pub fn select_phase_shifts(&self, m: &ModulationVector) -> Result<PhaseShiftVector> {
        let n = self.base_module_count;
        if m.len() != n {
            return Err(Error::contract(format!(
                "the network handles {n} modules, got m of length {}",
                m.len()
            )));
        }
        if m.spread() <= self.equal_tolerance {
            return conventional_shifts(n);
        }
        let canonical = canonicalize_sample(m);
        let free = self.model.forward(canonical.m_canonical.values())?;
        let mut angles = vec![0.0; n];
        for (slot, &module) in canonical.permutation.iter().enumerate().skip(1) {
            angles[module] = wrap_angle(free[slot - 1]);
        }
        PhaseShiftVector::new(angles)
    }

    /// Shifts for `N_s = z N_b` modules: each consecutive group of `N_b` is
    /// solved on its own and group `g` (from 0) is rotated by `2 pi g / N_s`.
    pub fn partitioned_predict(&self, m: &ModulationVector) -> Result<PhaseShiftVector> {
        let base = self.base_module_count;
        let total = m.len();
        if total == 0 || total % base != 0 {
            return Err(Error::domain(format!(
                "{total} modules cannot be split into groups of {base}"
            )));
        }
        let mut angles = Vec::with_capacity(total);
        for (g, chunk) in m.values().chunks(base).enumerate() {
            let offset = TAU * g as f64 / total as f64;
            let group = self.select_phase_shifts(&ModulationVector::new(chunk.to_vec())?)?;
            angles.extend(group.angles().iter().map(|a| wrap_angle(a + offset)));
        }
        PhaseShiftVector::new(angles)
    }
}

/// `1 - m`. The shifts selected for `m` serve the mirrored half-cycle
/// unchanged, since the cost is invariant under the complement.
pub fn mirror_for_negative_polarity(m: &ModulationVector) -> ModulationVector {
    m.complement()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSign {
    Plus,
    Minus,
}

impl std::str::FromStr for MapSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plus" | "+" => Ok(MapSign::Plus),
            "minus" | "-" => Ok(MapSign::Minus),
            other => Err(Error::domain(format!("unknown sign {other:?}, use plus or minus"))),
        }
    }
}

/// Offset per unit modulation index that moves a rising-sawtooth pulse
/// onto the centre of the triangular-carrier pulse: the sawtooth pulse
/// starts at its phase and lasts `2 pi m`, the triangular one is centred on
/// its phase.
pub const CARRIER_MAP_GAIN: f64 = PI;

/// Per-module `wrap(phi_tri +/- gain * m)`.
pub fn carrier_map_with_gain(
    phi_tri: &PhaseShiftVector,
    m: &ModulationVector,
    sign: MapSign,
    gain: f64,
) -> Result<PhaseShiftVector> {
    if phi_tri.len() != m.len() {
        return Err(Error::contract(format!(
            "{} shifts for {} modulation indices",
            phi_tri.len(),
            m.len()
        )));
    }
    let s = match sign {
        MapSign::Plus => 1.0,
        MapSign::Minus => -1.0,
    };
    PhaseShiftVector::wrapped(
        phi_tri
            .angles()
            .iter()
            .zip(m.values())
            .map(|(p, mk)| p + s * gain * mk),
    )
}

/// Converts triangular-carrier shifts to rising-sawtooth shifts that put
/// every pulse in the same place. [`MapSign::Minus`] is the sign that does so.
pub fn carrier_map(
    phi_tri: &PhaseShiftVector,
    m: &ModulationVector,
    sign: MapSign,
) -> Result<PhaseShiftVector> {
    carrier_map_with_gain(phi_tri, m, sign, CARRIER_MAP_GAIN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{init_model, LayerSpec};
    use crate::sim::{fundamental_phase, simulate, CarrierShape};
    use std::f64::consts::FRAC_PI_2;

    fn mv(v: &[f64]) -> ModulationVector {
        ModulationVector::new(v.to_vec()).unwrap()
    }

    fn context(n: usize, total: usize) -> InferenceContext {
        let model = init_model(&LayerSpec::for_modules(n, vec![8, 4]), 3).unwrap();
        InferenceContext::new(model, SystemConfig::new(total)).unwrap()
    }

    #[test]
    fn equal_indices_use_conventional_shifts() {
        let ctx = context(4, 4);
        let phi = ctx.select_phase_shifts(&mv(&[0.3; 4])).unwrap();
        assert_eq!(phi.angles(), &[0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2]);
        let nearly = ctx.select_phase_shifts(&mv(&[0.3, 0.3 + 5e-7, 0.3, 0.3])).unwrap();
        assert_eq!(nearly, phi);
    }

    #[test]
    fn selection_follows_canonical_slots() {
        let ctx = context(4, 4);
        let m = mv(&[0.45, 0.15, 0.4, 0.3]);
        let phi = ctx.select_phase_shifts(&m).unwrap();
        let raw = ctx.model.forward(&[0.15, 0.3, 0.4, 0.45]).unwrap();
        assert_eq!(phi.angles()[1], 0.0);
        assert_eq!(phi.angles()[3], wrap_angle(raw[0]));
        assert_eq!(phi.angles()[2], wrap_angle(raw[1]));
        assert_eq!(phi.angles()[0], wrap_angle(raw[2]));
        assert_eq!(ctx.select_phase_shifts(&m.complement()).unwrap(), phi);
        assert_eq!(ctx.select_phase_shifts(&mirror_for_negative_polarity(&m)).unwrap(), phi);
        assert!(ctx.select_phase_shifts(&mv(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn partitioning_offsets_groups() {
        let ctx = context(4, 8);
        let m = mv(&[0.1, 0.5, 0.2, 0.7, 0.3, 0.3, 0.3, 0.3]);
        let phi = ctx.partitioned_predict(&m).unwrap();
        let first = ctx.select_phase_shifts(&mv(&[0.1, 0.5, 0.2, 0.7])).unwrap();
        assert_eq!(&phi.angles()[..4], first.angles());
        let expected: Vec<f64> = [0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2]
            .iter()
            .map(|a| wrap_angle(a + PI / 4.0))
            .collect();
        assert_eq!(&phi.angles()[4..], expected.as_slice());
        assert!(ctx.partitioned_predict(&mv(&[0.1; 6])).is_err());

        let single = context(4, 4);
        let m = mv(&[0.1, 0.5, 0.2, 0.7]);
        assert_eq!(single.partitioned_predict(&m).unwrap(), single.select_phase_shifts(&m).unwrap());
    }

    #[test]
    fn context_rejects_mismatched_strings() {
        let model = init_model(&LayerSpec::for_modules(4, vec![4]), 0).unwrap();
        assert!(InferenceContext::new(model.clone(), SystemConfig::new(6)).is_err());
        assert!(InferenceContext::new(model, SystemConfig::new(12)).is_ok());
    }

    #[test]
    fn mirror_is_an_involution() {
        let m = mv(&[0.2, 0.8]);
        let mirrored = mirror_for_negative_polarity(&m);
        assert!((mirrored.values()[0] - 0.8).abs() < 1e-15);
        assert!((mirrored.values()[1] - 0.2).abs() < 1e-15);
        let twice = mirror_for_negative_polarity(&mirrored);
        for (a, b) in twice.values().iter().zip(m.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn carrier_map_arithmetic() {
        let zero = PhaseShiftVector::zeros(1);
        let phi = PhaseShiftVector::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(carrier_map(&phi, &mv(&[0.0, 0.0]), MapSign::Plus).unwrap(), phi);
        let quarter = carrier_map_with_gain(&zero, &mv(&[0.5]), MapSign::Plus, FRAC_PI_2).unwrap();
        assert!((quarter.angles()[0] - PI / 4.0).abs() < 1e-15);
        let back = carrier_map(&zero, &mv(&[0.5]), MapSign::Minus).unwrap();
        assert!((back.angles()[0] - 1.5 * PI).abs() < 1e-15);
        assert!(carrier_map(&zero, &mv(&[0.5, 0.5]), MapSign::Plus).is_err());
    }

    fn phase_error(gain: f64, sign: MapSign) -> f64 {
        let cfg = SystemConfig::new(3);
        let m = mv(&[0.2, 0.55, 0.8]);
        let tri = PhaseShiftVector::new(vec![0.0, 2.0, 4.5]).unwrap();
        let saw = carrier_map_with_gain(&tri, &m, sign, gain).unwrap();
        let a = simulate(&cfg, &m, &tri, CarrierShape::Triangular, 4096).unwrap();
        let b = simulate(&cfg, &m, &saw, CarrierShape::SawtoothRising, 4096).unwrap();
        (0..3)
            .map(|k| {
                let d = fundamental_phase(&a, k).unwrap() - fundamental_phase(&b, k).unwrap();
                wrap_angle(d + PI) - PI
            })
            .fold(0.0, |acc: f64, d| acc.max(d.abs()))
    }

    #[test]
    fn only_the_full_gain_minus_map_aligns_pulses() {
        let step = TAU / 4096.0;
        assert!(phase_error(CARRIER_MAP_GAIN, MapSign::Minus) <= step);
        assert!(phase_error(CARRIER_MAP_GAIN, MapSign::Plus) > 0.1);
        assert!(phase_error(FRAC_PI_2, MapSign::Minus) > 0.1);
        assert!(phase_error(FRAC_PI_2, MapSign::Plus) > 0.1);
    }
}
