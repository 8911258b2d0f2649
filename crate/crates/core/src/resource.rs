//! Hardware event accounting and the calibrated energy model.
//!
//! Counts are per inference (one input, `T` passes). Static quantities,
//! dropout modules and stored parameter bits, do not scale with `T`.

use serde::Serialize;

use crate::crossbar::{MappingPlan, MappingStrategy};
use crate::error::{Error, Result};
use crate::model::{Instrument, Method, ModelSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    pub rng_bits: u64,
    pub crossbar_reads: u64,
    pub wordline_activations: u64,
    pub scale_memory_reads: u64,
    pub adc_conversions: u64,
    pub dropout_modules: u64,
    pub parameter_bits: u64,
}

impl EventCounts {
    pub fn dynamic(&self) -> [u64; 5] {
        [
            self.rng_bits,
            self.crossbar_reads,
            self.wordline_activations,
            self.scale_memory_reads,
            self.adc_conversions,
        ]
    }
}

impl From<&Instrument> for EventCounts {
    /// Dynamic counts observed by an instrumented run.
    fn from(inst: &Instrument) -> Self {
        Self {
            rng_bits: inst.draws.total(),
            crossbar_reads: inst.reads.crossbar_reads,
            wordline_activations: inst.reads.wordline_activations,
            scale_memory_reads: inst.scale_memory_reads,
            adc_conversions: inst.reads.adc_conversions,
            dropout_modules: 0,
            parameter_bits: 0,
        }
    }
}

/// Energy per event in picojoules. Calibrated, not physical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostTable {
    pub rng_bit: f64,
    pub crossbar_read: f64,
    pub wordline_activation: f64,
    pub scale_memory_read: f64,
    pub adc_conversion: f64,
}

/// Per-image energies of the five reference configurations, μJ.
pub const REFERENCE_ENERGY_UJ: [(Method, f64); 5] = [
    (Method::SpinDrop, 2.00),
    (Method::Spatial, 0.68),
    (Method::ScaleDrop, 0.18),
    (Method::ViSubset, 0.30),
    (Method::SpinBayes, 0.26),
];

/// MC passes of the reference configurations.
pub const REFERENCE_PASSES: u64 = 20;

impl CostTable {
    pub const KINDS: [&'static str; 5] = [
        "rng_bit",
        "crossbar_read",
        "wordline_activation",
        "scale_memory_read",
        "adc_conversion",
    ];

    /// Nonnegative least-squares fit to [`REFERENCE_ENERGY_UJ`] with
    /// relative residuals, regenerated by `scripts/fit_cost_table.py`.
    pub fn calibrated() -> Self {
        Self {
            rng_bit: 5.906489,
            crossbar_read: 20.61240,
            wordline_activation: 0.9943375,
            scale_memory_read: 0.1237538,
            adc_conversion: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.rng_bit,
            self.crossbar_read,
            self.wordline_activation,
            self.scale_memory_read,
            self.adc_conversion,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::domain("event costs must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub total_uj: f64,
    /// `(kind, μJ)` per event kind.
    pub breakdown: Vec<(String, f64)>,
}

pub fn energy_estimate(counts: &EventCounts, costs: &CostTable) -> EnergyReport {
    let breakdown: Vec<(String, f64)> = CostTable::KINDS
        .iter()
        .zip(counts.dynamic())
        .zip(costs.as_array())
        .map(|((k, n), c)| (k.to_string(), n as f64 * c * 1e-6))
        .collect();
    EnergyReport {
        total_uj: breakdown.iter().map(|(_, e)| e).sum(),
        breakdown,
    }
}

pub fn efficiency_ratio(e_a: f64, e_b: f64) -> Result<f64> {
    if !(e_b > 0.0) {
        return Err(Error::domain(format!("energy {e_b} cannot be a ratio denominator")));
    }
    Ok(e_a / e_b)
}

pub fn count_dropout_modules(spec: &ModelSpec) -> u64 {
    (0..spec.layers.len()).map(|l| spec.layer_modules(l) as u64).sum()
}

/// Dropout modules an element-wise mask over every weight would need.
pub fn dropconnect_modules(spec: &ModelSpec) -> u64 {
    spec.layers.iter().map(|l| l.weight_count() as u64).sum()
}

/// Crossbar plans of the eligible layers.
pub fn plan_model(spec: &ModelSpec, strategy: MappingStrategy, max_rows: usize, max_cols: usize) -> Result<Vec<Option<MappingPlan>>> {
    (0..spec.layers.len())
        .map(|l| {
            if spec.crossbar_eligible(l) {
                spec.plan(l, strategy, max_rows, max_cols).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn parameter_bits(spec: &ModelSpec, banked: bool) -> u64 {
    let level_bits = (usize::BITS - spec.bank_levels.leading_zeros()) as u64;
    spec.layers
        .iter()
        .map(|l| {
            let c = l.channels() as u64;
            let w = l.weight_count() as u64 * if l.binary_weights { 1 } else { 32 };
            let element = if !l.bayes {
                0
            } else {
                match spec.method {
                    Method::SpinDrop | Method::Spatial => 0,
                    Method::ScaleDrop => 32 * c,
                    Method::Affine | Method::ViSubset => 64 * c,
                    Method::SpinBayes if banked => spec.bank_instances as u64 * c * level_bits,
                    Method::SpinBayes => 64 * c,
                }
            };
            w + 32 * c + element
        })
        .sum()
}

/// Closed-form event counts of one inference with `passes` MC passes.
/// SpinBayes models are assumed to sample from their crossbar banks.
pub fn count_events(spec: &ModelSpec, passes: u64, plans: &[Option<MappingPlan>]) -> Result<EventCounts> {
    if plans.len() != spec.layers.len() {
        return Err(Error::dim("layer plans", spec.layers.len(), plans.len()));
    }
    let mut e = EventCounts::default();
    for (l, (ly, plan)) in spec.layers.iter().zip(plans).enumerate() {
        let (c, pos) = (ly.channels() as u64, ly.positions() as u64);
        if let Some(plan) = plan {
            let tiles = plan.tiles.len() as u64;
            e.crossbar_reads += tiles * pos;
            e.adc_conversions += plan.tiles.iter().map(|t| (t.col_end - t.col_start) as u64).sum::<u64>() * pos;
            e.wordline_activations += if spec.input_gated(l) {
                plan.tiles.iter().map(|t| t.rows.len() as u64).sum::<u64>() * pos
            } else {
                tiles * pos
            };
        }
        if !ly.bayes {
            continue;
        }
        let modules = spec.layer_modules(l) as u64;
        match spec.method {
            Method::SpinDrop | Method::Spatial => e.rng_bits += modules,
            Method::ScaleDrop => {
                e.rng_bits += modules;
                e.scale_memory_reads += c * pos;
            }
            Method::Affine => {
                e.rng_bits += modules;
                e.scale_memory_reads += 2 * c * pos;
            }
            Method::ViSubset | Method::SpinBayes => {
                if spec.method == Method::ViSubset {
                    e.rng_bits += c;
                    e.scale_memory_reads += 2 * c;
                } else {
                    e.rng_bits += 1;
                }
                if plan.is_some() {
                    e.crossbar_reads += pos;
                    e.wordline_activations += pos;
                    e.adc_conversions += c * pos;
                }
            }
        }
    }
    e.rng_bits *= passes;
    e.crossbar_reads *= passes;
    e.wordline_activations *= passes;
    e.scale_memory_reads *= passes;
    e.adc_conversions *= passes;
    e.dropout_modules = count_dropout_modules(spec);
    e.parameter_bits = parameter_bits(spec, spec.method == Method::SpinBayes);
    Ok(e)
}

/// Event counts of the reference CNN under `method` with the unfold-column strategy on
/// 256×256 arrays and [`REFERENCE_PASSES`] passes.
pub fn reference_events(method: Method) -> Result<EventCounts> {
    let spec = ModelSpec::reference_cnn(method, 0.2)?;
    let plans = plan_model(&spec, MappingStrategy::UnfoldColumn, 256, 256)?;
    count_events(&spec, REFERENCE_PASSES, &plans)
}

/// Energies of all methods and the `a / b` ratio matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodComparison {
    pub methods: Vec<String>,
    pub energy_uj: Vec<f64>,
    pub ratios: Vec<Vec<f64>>,
}

pub fn compare_methods(entries: &[(Method, EventCounts)], costs: &CostTable) -> Result<MethodComparison> {
    let energy_uj: Vec<f64> = entries.iter().map(|(_, c)| energy_estimate(c, costs).total_uj).collect();
    let ratios = energy_uj
        .iter()
        .map(|a| energy_uj.iter().map(|b| efficiency_ratio(*a, *b)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(MethodComparison {
        methods: entries.iter().map(|(m, _)| m.name().to_string()).collect(),
        energy_uj,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_counts() {
        let mlp = ModelSpec::mlp(&[784, 256, 10], Method::SpinDrop, 0.2, false).unwrap();
        assert_eq!(count_dropout_modules(&mlp), 256);
        let cnn = ModelSpec::reference_cnn(Method::Spatial, 0.2).unwrap();
        assert_eq!(count_dropout_modules(&cnn), 32 + 64 + 128);
        let five = ModelSpec::mlp(&[8, 8, 8, 8, 8, 2], Method::ScaleDrop, 0.2, false).unwrap();
        assert_eq!(count_dropout_modules(&five), 5);
    }

    #[test]
    fn scale_rng_bits_and_linearity() {
        let five = ModelSpec::mlp(&[8, 8, 8, 8, 8, 2], Method::ScaleDrop, 0.2, true).unwrap();
        let plans = plan_model(&five, MappingStrategy::UnfoldColumn, 64, 64).unwrap();
        let e20 = count_events(&five, 20, &plans).unwrap();
        assert_eq!(e20.rng_bits, 100);
        let e40 = count_events(&five, 40, &plans).unwrap();
        assert!(e20.dynamic().iter().zip(e40.dynamic()).all(|(a, b)| 2 * a == b));
        assert_eq!(e20.dropout_modules, e40.dropout_modules);
        let costs = CostTable::calibrated();
        let (a, b) = (energy_estimate(&e20, &costs), energy_estimate(&e40, &costs));
        assert!((2.0 * a.total_uj - b.total_uj).abs() <= 1e-12 * b.total_uj);
    }

    #[test]
    fn deterministic_model_draws_nothing() {
        let mut spec = ModelSpec::mlp(&[8, 8, 2], Method::ScaleDrop, 0.0, true).unwrap();
        spec.layers.iter_mut().for_each(|l| l.bayes = false);
        let plans = plan_model(&spec, MappingStrategy::UnfoldColumn, 64, 64).unwrap();
        assert_eq!(count_events(&spec, 1, &plans).unwrap().rng_bits, 0);
    }

    #[test]
    fn energy_basics() {
        let costs = CostTable::calibrated();
        costs.validate().unwrap();
        assert_eq!(energy_estimate(&EventCounts::default(), &costs).total_uj, 0.0);
        assert_eq!(efficiency_ratio(0.5, 0.5).unwrap(), 1.0);
        assert!(efficiency_ratio(1.0, 0.0).is_err());
        assert!((efficiency_ratio(2.00, 0.68).unwrap() - 2.94).abs() <= 0.01);
        assert!((efficiency_ratio(2.00, 0.18).unwrap() - 11.1).abs() <= 0.05);
    }

    #[test]
    fn calibrated_table_reproduces_reference_energies() {
        let costs = CostTable::calibrated();
        for (m, target) in REFERENCE_ENERGY_UJ {
            let e = energy_estimate(&reference_events(m).unwrap(), &costs).total_uj;
            assert!((e / target - 1.0).abs() <= 0.05, "{m:?}: {e} vs {target}");
        }
    }

    #[test]
    fn energy_monotone_in_counts() {
        let costs = CostTable::calibrated();
        let base = reference_events(Method::Spatial).unwrap();
        let e0 = energy_estimate(&base, &costs).total_uj;
        for k in 0..5 {
            let mut c = base;
            match k {
                0 => c.rng_bits += 1000,
                1 => c.crossbar_reads += 1000,
                2 => c.wordline_activations += 1000,
                3 => c.scale_memory_reads += 1000,
                _ => c.adc_conversions += 1000,
            }
            assert!(energy_estimate(&c, &costs).total_uj >= e0);
        }
    }
}
