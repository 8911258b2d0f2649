//! Stochastic MTJ device models.
//!
//! Switching follows a thermal-activation law
//! `p = 1 − exp(−(t/τ₀)·exp(Δ·(I/I_c − 1)))`. The law sits behind
//! [`SwitchingModel`] so a measured lookup table can replace it.

use crate::error::{Error, Result};
use crate::rng::Sampler;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtjParams {
    /// Critical current (arbitrary units).
    pub i_c: f64,
    /// Attempt time, same unit as pulse widths.
    pub tau0: f64,
    /// Thermal stability factor.
    pub delta: f64,
}

impl Default for MtjParams {
    fn default() -> Self {
        Self {
            i_c: 1.0,
            tau0: 1.0,
            delta: 40.0,
        }
    }
}

impl MtjParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("i_c", self.i_c), ("tau0", self.tau0), ("delta", self.delta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub trait SwitchingModel {
    fn probability(&self, current: f64, pulse: f64) -> Result<f64>;
    /// Current that switches with `p_target` for the given pulse width.
    fn current_for(&self, p_target: f64, pulse: f64) -> Result<f64>;
}

/// Thermal-activation switching law.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThermalActivation(pub MtjParams);

impl SwitchingModel for ThermalActivation {
    fn probability(&self, current: f64, pulse: f64) -> Result<f64> {
        switching_probability(current, pulse, &self.0)
    }

    fn current_for(&self, p_target: f64, pulse: f64) -> Result<f64> {
        calibrate_current(p_target, pulse, &self.0)
    }
}

pub fn switching_probability(current: f64, pulse: f64, params: &MtjParams) -> Result<f64> {
    if !(pulse > 0.0) {
        return Err(Error::domain(format!("pulse width {pulse} must be positive")));
    }
    let rate = (pulse / params.tau0) * (params.delta * (current / params.i_c - 1.0)).exp();
    // 1 − e^{−x} without cancellation for small x.
    Ok(-(-rate).exp_m1())
}

pub fn calibrate_current(p_target: f64, pulse: f64, params: &MtjParams) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::domain(format!("target probability {p_target} outside (0, 1)")));
    }
    if !(pulse > 0.0) {
        return Err(Error::domain(format!("pulse width {pulse} must be positive")));
    }
    let rate = -(-p_target).ln_1p();
    Ok(params.i_c * (1.0 + (rate * params.tau0 / pulse).ln() / params.delta))
}

/// Nominal and realized probability of one physical dropout module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutModuleState {
    pub nominal_p: f64,
    pub realized_p: f64,
    pub sigma_p: f64,
}

/// Draws a module's realized probability from `N(nominal, sigma²)`, clamped
/// to `[0, 1]`. Called once per physical module.
pub fn sample_module_probability(nominal_p: f64, sigma_p: f64, sampler: &mut Sampler) -> Result<f64> {
    if !(sigma_p >= 0.0) {
        return Err(Error::domain(format!("sigma_p {sigma_p} must be nonnegative")));
    }
    if sigma_p == 0.0 {
        return Ok(nominal_p);
    }
    Ok((nominal_p + sigma_p * sampler.gaussian()).clamp(0.0, 1.0))
}

impl DropoutModuleState {
    pub fn instantiate(nominal_p: f64, sigma_p: f64, sampler: &mut Sampler) -> Result<Self> {
        Ok(Self {
            nominal_p,
            realized_p: sample_module_probability(nominal_p, sigma_p, sampler)?,
            sigma_p,
        })
    }
}

/// Operations issued while generating bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CycleLedger {
    pub set_attempts: u64,
    pub reads: u64,
    pub resets: u64,
}

/// `n` Bernoulli(`realized_p`) bits from repeated SET-read-RESET cycles.
pub fn generate_bitstream(
    module: &DropoutModuleState,
    n: usize,
    sampler: &mut Sampler,
    ledger: &mut CycleLedger,
) -> Result<Vec<bool>> {
    if n == 0 {
        return Err(Error::domain("bitstream length must be at least 1"));
    }
    let bits = (0..n).map(|_| sampler.bernoulli(module.realized_p)).collect();
    ledger.set_attempts += n as u64;
    ledger.reads += n as u64;
    // RESET returns the junction to the parallel state deterministically.
    ledger.resets += n as u64;
    Ok(bits)
}

/// Parallel composition of `mtjs` junctions, `on` of them switched ON.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiLevelCell {
    pub mtjs: usize,
    pub g_on: f64,
    pub g_off: f64,
    pub on: usize,
}

impl MultiLevelCell {
    pub fn new(mtjs: usize, g_on: f64, g_off: f64, on: usize) -> Result<Self> {
        if !(g_on > g_off && g_off > 0.0) {
            return Err(Error::domain("need g_on > g_off > 0"));
        }
        if on > mtjs {
            return Err(Error::domain(format!("{on} ON devices in a {mtjs}-MTJ cell")));
        }
        Ok(Self {
            mtjs,
            g_on,
            g_off,
            on,
        })
    }
}

pub fn multilevel_conductance(cell: &MultiLevelCell) -> f64 {
    cell.on as f64 * cell.g_on + (cell.mtjs - cell.on) as f64 * cell.g_off
}

/// Nearest of `levels + 1` uniform levels over `[lo, hi]`, ties to even.
pub fn quantize_to_level(v: f64, range: (f64, f64), levels: usize) -> Result<usize> {
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::domain(format!("empty range [{lo}, {hi}]")));
    }
    let x = (v - lo) / (hi - lo) * levels as f64;
    Ok(x.round_ties_even().clamp(0.0, levels as f64) as usize)
}

pub fn dequantize_level(index: usize, range: (f64, f64), levels: usize) -> f64 {
    let (lo, hi) = range;
    lo + (hi - lo) * index as f64 / levels as f64
}
