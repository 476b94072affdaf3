//! Clock-dynamics operators: drift evolution, offset shocks, 32-bit epoch
//! overflow and timestamp composition.
//!
//! All operations are pure functions of their inputs. Stochastic steps take
//! explicit draws so callers control the random stream and traces replay
//! bit-for-bit.

use serde::{Deserialize, Serialize};

/// Seconds at which a 32-bit signed Unix counter rolls over (2^31).
pub const T0: i64 = 2_147_483_648;

/// Fixed time constants shared by every clock in a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeConstants {
    /// Rollover threshold in seconds. Always 2^31 for 32-bit signed Unix time.
    pub t0: i64,
    /// Nominal sampling interval in seconds.
    pub dt: f64,
}

impl Default for TimeConstants {
    fn default() -> Self {
        Self { t0: T0, dt: 1.0 }
    }
}

impl TimeConstants {
    pub fn validate(&self) -> Result<(), String> {
        if self.t0 != T0 {
            return Err(format!("t0 must be 2^31 = {T0}, got {}", self.t0));
        }
        if !(self.dt > 0.0) {
            return Err(format!("dt must be > 0, got {}", self.dt));
        }
        Ok(())
    }
}

/// Stochastic parameters of one device clock.
///
/// `alpha` and `sigma` drive the mean-reverting drift recursion; the shock
/// and jitter scales govern the two-regime offset increment: rare large
/// synchronization shocks plus small per-step jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockParams {
    /// Drift mean-reversion coefficient, in (0, 1].
    pub alpha: f64,
    /// Drift diffusion scale in seconds per sqrt-second.
    pub sigma: f64,
    /// Per-step probability of a synchronization shock.
    pub shock_prob: f64,
    /// Standard deviation of a shock magnitude in seconds.
    pub shock_scale: f64,
    /// Standard deviation of small per-step offset noise in seconds.
    pub jitter_scale: f64,
}

impl Default for ClockParams {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            sigma: 0.005,
            shock_prob: 0.001,
            shock_scale: 0.02,
            jitter_scale: 0.002,
        }
    }
}

impl ClockParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("shock_scale", self.shock_scale),
            ("jitter_scale", self.jitter_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.shock_prob) {
            return Err(format!("shock_prob must be in [0, 1], got {}", self.shock_prob));
        }
        Ok(())
    }

    /// Stationary variance of the drift recursion, sigma^2 * dt / (1 - alpha^2).
    /// Unbounded at alpha = 1 (pure random walk).
    pub fn stationary_drift_variance(&self, dt: f64) -> f64 {
        self.sigma * self.sigma * dt / (1.0 - self.alpha * self.alpha)
    }
}

/// Evolving state of one device clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockState {
    /// Accumulated drift in seconds.
    pub drift: f64,
    /// Accumulated synchronization offset in seconds.
    pub offset: f64,
    /// Rollover latch: once set it stays set for the rest of the trace.
    pub overflow: bool,
    /// Previously composed timestamp in seconds.
    pub tau_prev: f64,
}

impl ClockState {
    /// State at the trace start: zero drift and offset, no rollover, with the
    /// first composed timestamp anchored at `tau0`.
    pub fn initial(tau0: f64) -> Self {
        Self {
            drift: 0.0,
            offset: 0.0,
            overflow: false,
            tau_prev: tau0,
        }
    }
}

/// One step of the mean-reverting drift recursion:
/// `drift = alpha * drift_prev + sigma * sqrt(dt) * noise`.
pub fn ou_drift_step(delta_prev: f64, params: &ClockParams, dt: f64, noise: f64) -> f64 {
    params.alpha * delta_prev + params.sigma * dt.sqrt() * noise
}

/// One step of the offset recursion. The increment is a rare large shock
/// (when `uniform_draw < shock_prob`) or small jitter otherwise.
pub fn offset_step(
    eta_prev: f64,
    params: &ClockParams,
    uniform_draw: f64,
    normal_draw: f64,
) -> f64 {
    let scale = if uniform_draw < params.shock_prob {
        params.shock_scale
    } else {
        params.jitter_scale
    };
    eta_prev + scale * normal_draw
}

/// Rollover indicator: 1 iff the previous timestamp reached the threshold.
pub fn overflow_indicator(tau_prev: f64, t0: i64) -> u8 {
    u8::from(tau_prev >= t0 as f64)
}

/// Device-reported timestamp: true time plus drift, offset and the rollover
/// discontinuity of magnitude `t0`.
pub fn compose_timestamp(t: f64, state: &ClockState, t0: i64) -> f64 {
    t + state.drift + state.offset + if state.overflow { t0 as f64 } else { 0.0 }
}

/// Distortion between reported and true time.
pub fn distortion(tau: f64, t: f64) -> f64 {
    tau - t
}

/// Per-step distortion increment.
pub fn incremental_distortion(psi_next: f64, psi: f64) -> f64 {
    psi_next - psi
}

/// Reduce a 64-bit second count modulo 2^32 into the signed 32-bit range.
/// This is the two's-complement truncation a 32-bit counter performs on the
/// wire; in-range values pass through unchanged.
pub fn wrap32(seconds: i64) -> i32 {
    seconds as i32
}
