//! Seeded synthetic LTE KPI traffic with diurnal and weekly load cycles and
//! bursty load spikes.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kpi::{residual_ratio, KpiRecord, KpiSeries, MAX_CARRIERS};
use crate::time::{Timestamp, STEPS_PER_DAY};

/// Mean burst length in 15-minute steps.
pub const MEAN_BURST_STEPS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("carrier {carrier}: invalid profile ({reason})")]
    InvalidProfile { carrier: usize, reason: &'static str },
    #[error("carrier count {0} outside 1..=21")]
    CarrierCount(usize),
    #[error("at least one day must be generated")]
    NoDays,
    #[error("start {0} is not on the 15-minute grid")]
    Unaligned(Timestamp),
}

/// Load model of one carrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrierProfile {
    pub carrier_id: usize,
    pub n_prb_total: u32,
    /// Mean load in `[0, 1]`.
    pub base_load: f64,
    /// Diurnal amplitude in `[0, 0.5]`.
    pub diurnal_amplitude: f64,
    /// Phase of the daily sinusoid in hours.
    pub phase_hours: f64,
    /// Factor applied to the diurnal swing on Saturdays and Sundays.
    pub weekend_attenuation: f64,
    pub burst_probability: f64,
    pub burst_depth: f64,
    pub noise_sigma: f64,
}

impl CarrierProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |reason| Err(SynthError::InvalidProfile { carrier: self.carrier_id, reason });
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.carrier_id >= MAX_CARRIERS {
            return fail("carrier id outside 0..=20");
        }
        if self.n_prb_total == 0 {
            return fail("n_prb_total must be positive");
        }
        if !unit(self.base_load) {
            return fail("base_load outside [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.diurnal_amplitude) {
            return fail("diurnal_amplitude outside [0, 0.5]");
        }
        if self.base_load + self.diurnal_amplitude > 1.0 {
            return fail("base_load + diurnal_amplitude exceeds 1");
        }
        if !unit(self.weekend_attenuation) || !unit(self.burst_probability) || !unit(self.burst_depth) {
            return fail("attenuation, burst probability and depth must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) || !self.phase_hours.is_finite() {
            return fail("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// Noise-free, burst-free load at `ts`.
    pub fn expected_load(&self, ts: Timestamp) -> f64 {
        let factor = if ts.weekday() >= 5 { self.weekend_attenuation } else { 1.0 };
        let swing = libm::sin(2.0 * PI * (ts.hour_of_day() - self.phase_hours) / 24.0);
        (self.base_load + self.diurnal_amplitude * swing * factor).clamp(0.0, 1.0)
    }
}

/// Reproducible profiles spanning the 50/75/100-PRB bandwidth classes with
/// staggered daily peaks.
pub fn default_profiles(n_carriers: usize, seed: u64) -> Result<Vec<CarrierProfile>, SynthError> {
    if !(1..=MAX_CARRIERS).contains(&n_carriers) {
        return Err(SynthError::CarrierCount(n_carriers));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [50, 75, 100];
    Ok((0..n_carriers)
        .map(|c| {
            let base_load = rng.random_range(0.25..0.45);
            let amp: f64 = rng.random_range(0.25..0.40);
            CarrierProfile {
                carrier_id: c,
                n_prb_total: classes[c % 3],
                base_load,
                diurnal_amplitude: amp.min(1.0 - base_load),
                phase_hours: 9.0 + (c % 7) as f64 * 0.5 + rng.random_range(-0.25..0.25),
                weekend_attenuation: rng.random_range(0.5..0.8),
                burst_probability: rng.random_range(0.005..0.015),
                burst_depth: rng.random_range(0.1..0.3),
                noise_sigma: rng.random_range(0.02..0.04),
            }
        })
        .collect())
}

/// Generates `n_days` of 15-minute KPI records for every profile.
///
/// Each carrier draws from its own stream seeded with `seed ^ carrier_id`.
pub fn generate(
    profiles: &[CarrierProfile],
    start: Timestamp,
    n_days: usize,
    seed: u64,
) -> Result<Vec<KpiSeries>, SynthError> {
    if n_days == 0 {
        return Err(SynthError::NoDays);
    }
    if !start.is_aligned() {
        return Err(SynthError::Unaligned(start));
    }
    for p in profiles {
        p.validate()?;
    }
    let mut out: Vec<KpiSeries> = profiles
        .iter()
        .map(|p| generate_carrier(p, start, n_days * STEPS_PER_DAY, seed))
        .collect();
    out.sort_by_key(|s| s.carrier_id);
    Ok(out)
}

fn generate_carrier(p: &CarrierProfile, start: Timestamp, steps: usize, seed: u64) -> KpiSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ p.carrier_id as u64);
    let burst_len = Geometric::new(1.0 / MEAN_BURST_STEPS).expect("valid probability");
    let total = f64::from(p.n_prb_total);
    let mut burst_left = 0u64;
    let mut records = Vec::with_capacity(steps);

    for t in 0..steps {
        let ts = start.add_steps(t as i64);
        let factor = if ts.weekday() >= 5 { p.weekend_attenuation } else { 1.0 };
        let swing = libm::sin(2.0 * PI * (ts.hour_of_day() - p.phase_hours) / 24.0);
        let eps = p.noise_sigma * standard_normal(&mut rng);
        let mut load = (p.base_load + p.diurnal_amplitude * swing * factor + eps).clamp(0.0, 1.0);

        if burst_left == 0 && rng.random::<f64>() < p.burst_probability {
            burst_left = burst_len.sample(&mut rng) + 1;
        }
        if burst_left > 0 {
            burst_left -= 1;
            load = (load + p.burst_depth).min(1.0);
        }

        let used = libm::round(load * total);
        let residual = residual_ratio(total, used).expect("used PRBs bounded by total");
        let jitter = |scale: f64, rng: &mut ChaCha8Rng| (1.0 + scale * standard_normal(rng)).max(0.0);
        let ue_avg = (40.0 * load * jitter(0.1, &mut rng)).max(0.0);
        let utilisation = used / total;
        records.push(KpiRecord {
            timestamp: ts,
            carrier_id: p.carrier_id,
            prb_mean: 0.92 * used * jitter(0.02, &mut rng),
            prb_total: total,
            active_tti: 9000.0 * utilisation * jitter(0.02, &mut rng),
            prb_pdsch: 0.85 * used * jitter(0.02, &mut rng),
            prb_pucch: 0.06 * used * jitter(0.05, &mut rng),
            ue_max: libm::ceil(1.5 * ue_avg),
            ue_avg,
            dl_tput: 0.3 * used,
            residual_prb: residual,
        });
    }
    KpiSeries { carrier_id: p.carrier_id, records }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(b: f64) -> CarrierProfile {
        CarrierProfile {
            carrier_id: 0,
            n_prb_total: 100,
            base_load: b,
            diurnal_amplitude: 0.0,
            phase_hours: 0.0,
            weekend_attenuation: 1.0,
            burst_probability: 0.0,
            burst_depth: 0.0,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn degenerate_profile_is_constant() {
        let start = Timestamp::from_civil(2024, 1, 1, 0, 0, 0);
        let s = generate(&[flat(0.37)], start, 2, 1).unwrap();
        for r in &s[0].records {
            assert!((r.residual_prb - 0.63).abs() <= 0.005 + 1e-12);
        }
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = flat(0.8);
        p.diurnal_amplitude = 0.3;
        let start = Timestamp::from_civil(2024, 1, 1, 0, 0, 0);
        assert!(matches!(generate(&[p], start, 1, 0), Err(SynthError::InvalidProfile { .. })));
        assert_eq!(generate(&[flat(0.3)], start, 0, 0), Err(SynthError::NoDays));
        assert_eq!(default_profiles(22, 0), Err(SynthError::CarrierCount(22)));
        assert_eq!(default_profiles(0, 0), Err(SynthError::CarrierCount(0)));
    }

    #[test]
    fn default_profiles_are_valid_and_reproducible() {
        let a = default_profiles(21, 7).unwrap();
        assert_eq!(a, default_profiles(21, 7).unwrap());
        let ids: Vec<_> = a.iter().map(|p| p.carrier_id).collect();
        assert_eq!(ids, (0..21).collect::<Vec<_>>());
        for p in &a {
            p.validate().unwrap();
            assert!(p.base_load + p.diurnal_amplitude <= 1.0);
        }
    }
}
