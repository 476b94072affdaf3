//! Nominal physical telemetry: a periodic base load with linear
//! energy-temperature coupling, regulated voltage and derived current.

use ndarray::Array2;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::rng::{substream, StreamKind};

/// Settings for the synthetic physical channels. The default five channels
/// are, in order: voltage, current, temperature, humidity, power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicalConfig {
    pub n_features: usize,
    /// Diurnal cycle length in steps.
    pub base_period: f64,
    /// Regulated supply range in volts.
    pub voltage_band: (f64, f64),
    /// Temperature = temp_alpha * power + temp_beta + noise.
    pub temp_alpha: f64,
    pub temp_beta: f64,
    pub noise_scale: f64,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        Self {
            n_features: 5,
            base_period: 288.0,
            voltage_band: (218.0, 223.0),
            temp_alpha: 0.1,
            temp_beta: 20.0,
            noise_scale: 0.3,
        }
    }
}

impl PhysicalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_features < 1 {
            return Err(format!("n_features must be >= 1, got {}", self.n_features));
        }
        if !(self.base_period > 0.0) {
            return Err(format!("base_period must be > 0, got {}", self.base_period));
        }
        let (lo, hi) = self.voltage_band;
        if !(lo < hi) {
            return Err(format!("voltage band low must be below high, got ({lo}, {hi})"));
        }
        for (name, v) in [
            ("base_period", self.base_period),
            ("voltage_band.low", lo),
            ("voltage_band.high", hi),
            ("temp_alpha", self.temp_alpha),
            ("temp_beta", self.temp_beta),
            ("noise_scale", self.noise_scale),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} must be finite, got {v}"));
            }
        }
        if self.noise_scale < 0.0 {
            return Err(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        Ok(())
    }
}

/// Linear energy-temperature coupling used by the generator.
pub fn temperature_coupling(energy: f64, config: &PhysicalConfig) -> f64 {
    config.temp_alpha * energy + config.temp_beta
}

/// Synthesize `length` steps of nominal telemetry for one device.
/// Deterministic for a fixed (seed, device) pair; independent of clock
/// distortion, which only touches the reporting layer.
pub fn synth_physical(
    config: &PhysicalConfig,
    length: usize,
    seed: u64,
    device: u64,
) -> Result<Array2<f64>, DatagenError> {
    config.validate().map_err(DatagenError::InvalidConfig)?;
    if length == 0 {
        return Err(DatagenError::InvalidConfig(
            "trace length must be > 0".into(),
        ));
    }
    let mut rng = substream(seed, device, StreamKind::Physical);
    let normal = rand_distr::StandardNormal;

    let (v_lo, v_hi) = config.voltage_band;
    let v_mid = (v_lo + v_hi) / 2.0;
    let v_amp = 0.35 * (v_hi - v_lo);
    // Device-specific phase keeps devices correlated but not identical.
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let mut draw = |scale: f64| -> f64 {
        let e: f64 = normal.sample(&mut rng);
        scale * e
    };

    let two_pi = std::f64::consts::TAU;
    let mut x = Array2::zeros((length, config.n_features));
    for t in 0..length {
        let cycle = two_pi * t as f64 / config.base_period;
        let power = 50.0 + 10.0 * (cycle + phase).sin() + draw(2.0 * config.noise_scale);
        let voltage = (v_mid + v_amp * (cycle * 0.5 + phase).sin() + draw(config.noise_scale))
            .clamp(v_lo, v_hi);
        let temperature = temperature_coupling(power, config) + draw(config.noise_scale);
        let humidity = 50.0 + 8.0 * (cycle * 0.6 + 1.3 + phase).sin() + draw(config.noise_scale);
        let current = power / voltage + draw(0.05 * config.noise_scale);

        let canonical = [voltage, current, temperature, humidity, power];
        for f in 0..config.n_features {
            x[(t, f)] = if f < canonical.len() {
                canonical[f]
            } else {
                // Auxiliary periodic channels beyond the canonical five.
                let k = (f - canonical.len() + 1) as f64;
                (cycle * (1.0 + k / 3.0) + k).sin() + draw(config.noise_scale)
            };
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_exact_linear_coupling() {
        let config = PhysicalConfig {
            noise_scale: 0.0,
            ..Default::default()
        };
        assert_eq!(temperature_coupling(50.0, &config), 25.0);
        let x = synth_physical(&config, 400, 3, 0).unwrap();
        for t in 0..400 {
            let power = x[(t, 4)];
            let temp = x[(t, 2)];
            assert!((temp - temperature_coupling(power, &config)).abs() < 1e-12);
        }
    }

    #[test]
    fn voltage_stays_in_band_under_nominal_conditions() {
        let config = PhysicalConfig::default();
        let x = synth_physical(&config, 5000, 11, 2).unwrap();
        for t in 0..5000 {
            let v = x[(t, 0)];
            assert!((218.0..=223.0).contains(&v), "voltage {v} at step {t}");
        }
    }

    #[test]
    fn energy_temperature_correlation_is_strong() {
        let config = PhysicalConfig {
            noise_scale: 0.3,
            ..Default::default()
        };
        let x = synth_physical(&config, 10_000, 5, 1).unwrap();
        let energy: Vec<f64> = (0..10_000).map(|t| x[(t, 4)]).collect();
        let temp: Vec<f64> = (0..10_000).map(|t| x[(t, 2)]).collect();
        let r = pearson(&energy, &temp);
        assert!(r > 0.85, "correlation {r}");
    }

    #[test]
    fn deterministic_per_seed_and_device() {
        let config = PhysicalConfig::default();
        let a = synth_physical(&config, 100, 9, 4).unwrap();
        let b = synth_physical(&config, 100, 9, 4).unwrap();
        let c = synth_physical(&config, 100, 9, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let config = PhysicalConfig::default();
        assert!(synth_physical(&config, 0, 1, 0).is_err());
        let bad = PhysicalConfig {
            base_period: f64::NAN,
            ..Default::default()
        };
        assert!(synth_physical(&bad, 10, 1, 0).is_err());
        let bad_band = PhysicalConfig {
            voltage_band: (223.0, 218.0),
            ..Default::default()
        };
        assert!(synth_physical(&bad_band, 10, 1, 0).is_err());
    }

    #[test]
    fn extra_feature_channels_are_generated() {
        let config = PhysicalConfig {
            n_features: 7,
            ..Default::default()
        };
        let x = synth_physical(&config, 50, 1, 0).unwrap();
        assert_eq!(x.ncols(), 7);
        assert!(x.column(6).iter().any(|&v| v != 0.0));
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }
}
