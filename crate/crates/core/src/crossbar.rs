//! Crossbar arrays storing binary weights as differential MTJ cell pairs.
//!
//! Currents are reported in units of `V·(G_on − G_off)` with `V = 1`, so an
//! ideal array returns the exact integer dot product. Bipolar inputs are
//! applied in two read phases: rows with `x = +1`, then rows with `x = −1`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{ConvGeometry, Tensor};
use crate::rng::Sampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellFault {
    None,
    StuckOn,
    StuckOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    StuckOn,
    StuckOff,
    /// Stuck-on or stuck-off with equal odds.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultConfig {
    /// Per-cell fault probability.
    pub rate: f64,
    pub kind: FaultKind,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            rate: 0.0,
            kind: FaultKind::StuckOff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossbarConfig {
    pub g_on: f64,
    pub g_off: f64,
    /// Relative Gaussian spread of programmed conductances.
    pub sigma_g_rel: f64,
    pub adc_bits: Option<u32>,
    pub faults: FaultConfig,
    pub max_rows: usize,
    pub max_cols: usize,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            g_on: 1.0,
            g_off: 0.1,
            sigma_g_rel: 0.0,
            adc_bits: None,
            faults: FaultConfig::default(),
            max_rows: 256,
            max_cols: 256,
        }
    }
}

impl CrossbarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_on > self.g_off && self.g_off > 0.0) {
            return Err(Error::domain("need g_on > g_off > 0"));
        }
        if !(self.sigma_g_rel >= 0.0) {
            return Err(Error::domain("sigma_g_rel must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.faults.rate) {
            return Err(Error::domain("fault rate outside [0, 1]"));
        }
        if self.max_rows == 0 || self.max_cols == 0 {
            return Err(Error::domain("crossbar limits must be positive"));
        }
        if let Some(b) = self.adc_bits {
            if !(1..=24).contains(&b) {
                return Err(Error::domain(format!("adc_bits {b} outside 1..=24")));
            }
        }
        Ok(())
    }

    /// No variation, no faults, no ADC.
    pub fn is_ideal(&self) -> bool {
        self.sigma_g_rel == 0.0 && self.faults.rate == 0.0 && self.adc_bits.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crossbar {
    pub rows: usize,
    pub cols: usize,
    pub g_plus: Vec<f64>,
    pub g_minus: Vec<f64>,
    /// Faults of the `(plus, minus)` cells of every weight.
    pub fault_map: Vec<(CellFault, CellFault)>,
    g_on: f64,
    g_off: f64,
    adc_bits: Option<u32>,
    /// `(G⁺ − G⁻)/(G_on − G_off)` per weight.
    diff: Vec<f64>,
}

/// Read-side event counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReadLedger {
    pub crossbar_reads: u64,
    pub wordline_activations: u64,
    pub adc_conversions: u64,
}

impl std::ops::AddAssign for ReadLedger {
    fn add_assign(&mut self, o: Self) {
        self.crossbar_reads += o.crossbar_reads;
        self.wordline_activations += o.wordline_activations;
        self.adc_conversions += o.adc_conversions;
    }
}

fn draw_fault(cfg: &FaultConfig, sampler: &mut Sampler) -> CellFault {
    if cfg.rate == 0.0 || sampler.uniform() >= cfg.rate {
        return CellFault::None;
    }
    match cfg.kind {
        FaultKind::StuckOn => CellFault::StuckOn,
        FaultKind::StuckOff => CellFault::StuckOff,
        FaultKind::Mixed => {
            if sampler.uniform() < 0.5 {
                CellFault::StuckOn
            } else {
                CellFault::StuckOff
            }
        }
    }
}

/// Programs a `rows × cols` matrix of ±1 weights: `+1 → (G_on, G_off)`,
/// `−1 → (G_off, G_on)`, then conductance variation, then faults.
pub fn program_binary(w: &Tensor, cfg: &CrossbarConfig, sampler: &mut Sampler) -> Result<Crossbar> {
    cfg.validate()?;
    if w.shape().len() != 2 {
        return Err(Error::dim("weight rank", 2, w.shape().len()));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if let Some(bad) = w.data().iter().find(|v| **v != 1.0 && **v != -1.0) {
        return Err(Error::domain(format!("non-binary weight {bad}")));
    }
    let floor = cfg.g_off * 1e-3;
    let vary = |g: f64, s: &mut Sampler| {
        if cfg.sigma_g_rel == 0.0 {
            g
        } else {
            (g * (1.0 + cfg.sigma_g_rel * s.gaussian())).max(floor)
        }
    };
    let n = rows * cols;
    let mut g_plus = Vec::with_capacity(n);
    let mut g_minus = Vec::with_capacity(n);
    for &v in w.data() {
        let (p, m) = if v > 0.0 {
            (cfg.g_on, cfg.g_off)
        } else {
            (cfg.g_off, cfg.g_on)
        };
        g_plus.push(vary(p, sampler));
        g_minus.push(vary(m, sampler));
    }
    let mut fault_map = Vec::with_capacity(n);
    for i in 0..n {
        let fp = draw_fault(&cfg.faults, sampler);
        let fm = draw_fault(&cfg.faults, sampler);
        for (f, g) in [(fp, &mut g_plus[i]), (fm, &mut g_minus[i])] {
            match f {
                CellFault::StuckOn => *g = cfg.g_on,
                CellFault::StuckOff => *g = cfg.g_off,
                CellFault::None => {}
            }
        }
        fault_map.push((fp, fm));
    }
    let unit = cfg.g_on - cfg.g_off;
    let diff = g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| (p - m) / unit)
        .collect();
    Ok(Crossbar {
        rows,
        cols,
        g_plus,
        g_minus,
        fault_map,
        g_on: cfg.g_on,
        g_off: cfg.g_off,
        adc_bits: cfg.adc_bits,
        diff,
    })
}

/// Uniform quantization of `v` to `bits` over `[−full_scale, full_scale]`.
pub fn adc_quantize(v: f64, full_scale: f64, bits: u32) -> f64 {
    let steps = ((1u64 << bits) - 1) as f64;
    let lsb = 2.0 * full_scale / steps;
    let k = ((v + full_scale) / lsb).round().clamp(0.0, steps);
    k * lsb - full_scale
}

impl Crossbar {
    pub fn conductance_unit(&self) -> f64 {
        self.g_on - self.g_off
    }

    /// Differential column outputs for inputs in `{−1, 0, +1}`. Rows with
    /// `active[i] == false` are not driven.
    pub fn analog_mac(&self, x: &[f64], active: Option<&[bool]>, ledger: &mut ReadLedger) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::dim("crossbar input length", self.rows, x.len()));
        }
        if let Some(a) = active {
            if a.len() != self.rows {
                return Err(Error::dim("active row mask length", self.rows, a.len()));
            }
        }
        let mut pos = vec![0.0; self.cols];
        let mut neg = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let phase = if xi == 1.0 {
                &mut pos
            } else if xi == -1.0 {
                &mut neg
            } else if xi == 0.0 {
                continue;
            } else {
                return Err(Error::domain(format!("crossbar input {xi} not in {{-1, 0, 1}}")));
            };
            let row = &self.diff[i * self.cols..(i + 1) * self.cols];
            phase.iter_mut().zip(row).for_each(|(acc, d)| *acc += d);
        }
        ledger.crossbar_reads += 1;
        // Gated rows are enabled one by one; an ungated read enables the
        // whole consecutive row range at once.
        ledger.wordline_activations += if active.is_some() { self.rows as u64 } else { 1 };
        ledger.adc_conversions += self.cols as u64;
        let full_scale = self.rows as f64;
        Ok(pos
            .iter()
            .zip(&neg)
            .map(|(p, n)| {
                let v = p - n;
                match self.adc_bits {
                    Some(b) => adc_quantize(v, full_scale, b),
                    None => v,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStrategy {
    /// Each `K×K×C_in` kernel becomes one crossbar column.
    UnfoldColumn,
    /// One `C_in × C_out` crossbar per kernel offset.
    KxkGrid,
}

/// How dropout modules attach to a mapped array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleAttachment {
    None,
    /// One module per word-line pair.
    PerRow,
    /// One module per input feature map.
    PerChannel,
    /// One module for the whole layer.
    PerLayer,
    /// Separate modules for the γ and β masks.
    PerLayerAffine,
}

/// One physical array: logical rows it holds and the column range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Tile {
    pub rows: Vec<usize>,
    pub col_start: usize,
    pub col_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MappingPlan {
    pub strategy: MappingStrategy,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Unfolded logical array before tiling.
    pub logical_rows: usize,
    pub logical_cols: usize,
    pub crossbar_dims: Vec<(usize, usize)>,
    pub crossbar_count: usize,
    pub dropout_module_count: usize,
    pub wordline_groups: usize,
    #[serde(skip)]
    pub tiles: Vec<Tile>,
}

fn chunks(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(size)).map(|i| (i * size, ((i + 1) * size).min(n))).collect()
}

/// Plans the crossbar arrays for a `K×K` convolution (`K = 1` for dense
/// layers) and attaches dropout modules.
pub fn plan_conv_mapping(
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    strategy: MappingStrategy,
    max_rows: usize,
    max_cols: usize,
    attachment: ModuleAttachment,
) -> Result<MappingPlan> {
    if kernel == 0 || in_channels == 0 || out_channels == 0 {
        return Err(Error::domain("mapping needs K, C_in, C_out >= 1"));
    }
    if max_rows == 0 || max_cols == 0 {
        return Err(Error::domain("crossbar limits must be positive"));
    }
    let kk = kernel * kernel;
    let logical_rows = kk * in_channels;
    let row_groups: Vec<Vec<usize>> = match strategy {
        MappingStrategy::UnfoldColumn => chunks(logical_rows, max_rows)
            .into_iter()
            .map(|(a, b)| (a..b).collect())
            .collect(),
        MappingStrategy::KxkGrid => (0..kk)
            .flat_map(|off| {
                chunks(in_channels, max_rows)
                    .into_iter()
                    .map(move |(a, b)| (a..b).map(|c| c * kk + off).collect())
            })
            .collect(),
    };
    let mut tiles = Vec::new();
    for rows in &row_groups {
        for (a, b) in chunks(out_channels, max_cols) {
            tiles.push(Tile {
                rows: rows.clone(),
                col_start: a,
                col_end: b,
            });
        }
    }
    let crossbar_dims: Vec<(usize, usize)> = tiles
        .iter()
        .map(|t| (t.rows.len(), t.col_end - t.col_start))
        .collect();
    let arrays_per_offset = match strategy {
        MappingStrategy::UnfoldColumn => 1,
        MappingStrategy::KxkGrid => kk,
    };
    let (modules, groups) = match attachment {
        ModuleAttachment::None => (0, 1),
        // Modules are wired to the word lines of each array and cannot be
        // shared across the per-offset arrays.
        ModuleAttachment::PerRow => (logical_rows, logical_rows),
        ModuleAttachment::PerChannel => (in_channels, in_channels),
        ModuleAttachment::PerLayer => (1, 1),
        ModuleAttachment::PerLayerAffine => (2, 1),
    };
    let _ = arrays_per_offset;
    Ok(MappingPlan {
        strategy,
        kernel,
        in_channels,
        out_channels,
        logical_rows,
        logical_cols: out_channels,
        crossbar_count: tiles.len(),
        crossbar_dims,
        dropout_module_count: modules,
        wordline_groups: groups,
        tiles,
    })
}

impl MappingPlan {
    /// Word-line group of each logical row.
    pub fn row_group(&self, row: usize) -> usize {
        if self.wordline_groups == self.logical_rows {
            row
        } else if self.wordline_groups == self.in_channels {
            row / (self.kernel * self.kernel)
        } else {
            0
        }
    }

    /// Logical rows left enabled by a per-group keep mask.
    pub fn wordline_group_enable(&self, keep: &[bool]) -> Result<Vec<bool>> {
        if keep.len() != self.wordline_groups {
            return Err(Error::dim("word-line group mask", self.wordline_groups, keep.len()));
        }
        Ok((0..self.logical_rows).map(|r| keep[self.row_group(r)]).collect())
    }

    pub fn utilization(&self, max_rows: usize, max_cols: usize) -> Vec<f64> {
        self.crossbar_dims
            .iter()
            .map(|(r, c)| (r * c) as f64 / (max_rows * max_cols) as f64)
            .collect()
    }
}

/// One structured record per physical array of a plan.
#[derive(Debug, Clone, Serialize)]
pub struct MappingRecord {
    pub layer: usize,
    pub index: usize,
    pub strategy: MappingStrategy,
    pub rows: usize,
    pub cols: usize,
    pub utilization: f64,
    pub dropout_modules: usize,
}

pub fn mapping_records(layer: usize, plan: &MappingPlan, max_rows: usize, max_cols: usize) -> Vec<MappingRecord> {
    let util = plan.utilization(max_rows, max_cols);
    plan.crossbar_dims
        .iter()
        .zip(util)
        .enumerate()
        .map(|(i, ((r, c), u))| MappingRecord {
            layer,
            index: i,
            strategy: plan.strategy,
            rows: *r,
            cols: *c,
            utilization: u,
            // Modules are reported against the first array of the layer.
            dropout_modules: if i == 0 { plan.dropout_module_count } else { 0 },
        })
        .collect()
}

/// A layer's weights programmed onto the arrays of a [`MappingPlan`].
#[derive(Debug, Clone)]
pub struct MappedLayer {
    pub plan: MappingPlan,
    pub arrays: Vec<Crossbar>,
}

impl MappedLayer {
    /// `weights` is the logical `patch_len × C_out` ±1 matrix.
    pub fn program(plan: MappingPlan, weights: &Tensor, cfg: &CrossbarConfig, sampler: &mut Sampler) -> Result<Self> {
        if weights.shape() != [plan.logical_rows, plan.logical_cols] {
            return Err(Error::dim("mapped weight rows", plan.logical_rows, weights.shape()[0]));
        }
        let cols = plan.logical_cols;
        let arrays = plan
            .tiles
            .iter()
            .map(|t| {
                let w = t.col_end - t.col_start;
                let mut d = Vec::with_capacity(t.rows.len() * w);
                for &r in &t.rows {
                    d.extend_from_slice(&weights.data()[r * cols + t.col_start..r * cols + t.col_end]);
                }
                program_binary(&Tensor::new(&[t.rows.len(), w], d)?, cfg, sampler)
            })
            .collect::<Result<_>>()?;
        Ok(Self { plan, arrays })
    }

    /// MAC of one logical input vector, partial sums accumulated digitally.
    pub fn mac(&self, x: &[f64], active: Option<&[bool]>, ledger: &mut ReadLedger) -> Result<Vec<f64>> {
        if x.len() != self.plan.logical_rows {
            return Err(Error::dim("logical input length", self.plan.logical_rows, x.len()));
        }
        let mut out = vec![0.0; self.plan.logical_cols];
        let mut xs = Vec::new();
        let mut act = Vec::new();
        for (tile, xb) in self.plan.tiles.iter().zip(&self.arrays) {
            xs.clear();
            xs.extend(tile.rows.iter().map(|&r| x[r]));
            let a = active.map(|a| {
                act.clear();
                act.extend(tile.rows.iter().map(|&r| a[r]));
                act.as_slice()
            });
            let part = xb.analog_mac(&xs, a, ledger)?;
            out[tile.col_start..tile.col_end]
                .iter_mut()
                .zip(part)
                .for_each(|(o, p)| *o += p);
        }
        Ok(out)
    }

    /// Convolution through the arrays: one MAC per output position.
    /// `active_inputs` marks input elements whose word lines stay enabled.
    pub fn conv(
        &self,
        geom: &ConvGeometry,
        image: &[f64],
        active_inputs: Option<&[bool]>,
        ledger: &mut ReadLedger,
    ) -> Result<Vec<f64>> {
        let (p, l, co) = (geom.positions(), geom.patch_len(), geom.out_channels);
        let mut out = vec![0.0; co * p];
        let mut patch = vec![0.0; l];
        let mut act = vec![true; l];
        for pos in 0..p {
            for col in 0..l {
                let src = geom.source_index(pos, col);
                patch[col] = src.map_or(0.0, |i| image[i]);
                if let Some(a) = active_inputs {
                    act[col] = src.is_some_and(|i| a[i]);
                }
            }
            let y = self.mac(&patch, active_inputs.map(|_| act.as_slice()), ledger)?;
            for (o, v) in y.into_iter().enumerate() {
                out[o * p + pos] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ideal() -> CrossbarConfig {
        CrossbarConfig::default()
    }

    fn sampler() -> Sampler {
        Sampler::from_path(1, &[])
    }

    #[test]
    fn encoding_rule() {
        let w = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let xb = program_binary(&w, &ideal(), &mut sampler()).unwrap();
        assert_eq!((xb.g_plus[0], xb.g_minus[0]), (1.0, 0.1));
        let w = Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let xb = program_binary(&w, &ideal(), &mut sampler()).unwrap();
        assert_eq!(xb.g_plus, vec![0.1, 1.0]);
        assert_eq!(xb.g_minus, vec![1.0, 0.1]);
        assert!(xb.fault_map.iter().all(|f| *f == (CellFault::None, CellFault::None)));
    }

    #[test]
    fn rejects_non_binary_weights() {
        let w = Tensor::from_rows(&[vec![0.5]]).unwrap();
        assert!(program_binary(&w, &ideal(), &mut sampler()).is_err());
    }

    #[test]
    fn full_stuck_off_saturates() {
        let mut cfg = ideal();
        cfg.faults = FaultConfig {
            rate: 1.0,
            kind: FaultKind::StuckOff,
        };
        let w = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let xb = program_binary(&w, &cfg, &mut sampler()).unwrap();
        assert!(xb.g_plus.iter().chain(&xb.g_minus).all(|&g| g == cfg.g_off));
    }

    fn int_dot(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        (0..cols)
            .map(|j| (0..rows).map(|i| w[i * cols + j] * x[i]).sum())
            .collect()
    }

    #[test]
    fn ideal_mac_exhaustive_4x3() {
        // Every ±1 weight matrix and every ±1 input of a 4×3 array.
        for wbits in 0u32..(1 << 12) {
            let w: Vec<f64> = (0..12).map(|i| if wbits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let xb = program_binary(&Tensor::new(&[4, 3], w.clone()).unwrap(), &ideal(), &mut sampler()).unwrap();
            for xbits in 0u32..16 {
                let x: Vec<f64> = (0..4).map(|i| if xbits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
                let y = xb.analog_mac(&x, None, &mut ReadLedger::default()).unwrap();
                assert_eq!(y, int_dot(&w, &x, 4, 3));
            }
        }
    }

    #[test]
    fn zero_input_gives_zero() {
        let w = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        let xb = program_binary(&w, &ideal(), &mut sampler()).unwrap();
        assert_eq!(xb.analog_mac(&[0.0, 0.0], None, &mut ReadLedger::default()).unwrap(), vec![0.0, 0.0]);
        assert!(xb.analog_mac(&[0.0], None, &mut ReadLedger::default()).is_err());
        assert!(xb.analog_mac(&[0.5, 0.0], None, &mut ReadLedger::default()).is_err());
    }

    #[test]
    fn single_stuck_off_fault_drops_one_unit() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let mut xb = program_binary(&w, &ideal(), &mut sampler()).unwrap();
        let x = [1.0, 1.0, -1.0];
        let clean = xb.analog_mac(&x, None, &mut ReadLedger::default()).unwrap();
        // Fault the G⁺ cell of w[0][1] = +1, then re-derive the differential.
        let cfg = ideal();
        xb.g_plus[1] = cfg.g_off;
        xb.fault_map[1].0 = CellFault::StuckOff;
        xb.diff[1] = (xb.g_plus[1] - xb.g_minus[1]) / xb.conductance_unit();
        let faulty = xb.analog_mac(&x, None, &mut ReadLedger::default()).unwrap();
        assert_eq!(faulty[0], clean[0]);
        assert_eq!(faulty[1], clean[1] - 1.0);
    }

    #[test]
    fn adc_error_within_half_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [2u32, 4, 6, 8] {
            let fs = 37.0;
            let lsb = 2.0 * fs / ((1u64 << bits) - 1) as f64;
            for _ in 0..1000 {
                let v: f64 = rng.random_range(-fs..fs);
                assert!((adc_quantize(v, fs, bits) - v).abs() <= lsb / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn plan_examples() {
        let p1 = plan_conv_mapping(3, 64, 128, MappingStrategy::UnfoldColumn, 1024, 1024, ModuleAttachment::None).unwrap();
        assert_eq!((p1.logical_rows, p1.logical_cols, p1.crossbar_count), (576, 128, 1));
        assert_eq!(p1.crossbar_dims, vec![(576, 128)]);
        let p2 = plan_conv_mapping(3, 64, 128, MappingStrategy::KxkGrid, 1024, 1024, ModuleAttachment::None).unwrap();
        assert_eq!(p2.crossbar_count, 9);
        assert!(p2.crossbar_dims.iter().all(|d| *d == (64, 128)));
        for s in [MappingStrategy::UnfoldColumn, MappingStrategy::KxkGrid] {
            let p = plan_conv_mapping(1, 16, 8, s, 1024, 1024, ModuleAttachment::None).unwrap();
            assert_eq!(p.crossbar_dims, vec![(16, 8)]);
        }
        assert!(plan_conv_mapping(0, 1, 1, MappingStrategy::KxkGrid, 8, 8, ModuleAttachment::None).is_err());
    }

    #[test]
    fn tiling_covers_every_weight_once() {
        for s in [MappingStrategy::UnfoldColumn, MappingStrategy::KxkGrid] {
            let p = plan_conv_mapping(3, 40, 70, s, 64, 32, ModuleAttachment::None).unwrap();
            let mut seen = vec![0u8; p.logical_rows * p.logical_cols];
            for t in &p.tiles {
                assert!(t.rows.len() <= 64 && t.col_end - t.col_start <= 32);
                for &r in &t.rows {
                    for c in t.col_start..t.col_end {
                        seen[r * p.logical_cols + c] += 1;
                    }
                }
            }
            assert!(seen.iter().all(|&v| v == 1));
            let total: usize = p.crossbar_dims.iter().map(|(r, c)| r * c).sum();
            assert_eq!(total, 9 * 40 * 70);
        }
    }

    #[test]
    fn wordline_masks() {
        let p = plan_conv_mapping(1, 4, 3, MappingStrategy::UnfoldColumn, 64, 64, ModuleAttachment::PerRow).unwrap();
        let w: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let wt = Tensor::new(&[4, 3], w.clone()).unwrap();
        let layer = MappedLayer::program(p.clone(), &wt, &ideal(), &mut sampler()).unwrap();
        let x = [1.0, -1.0, 1.0, 1.0];
        let mut l = ReadLedger::default();

        let all = p.wordline_group_enable(&[true; 4]).unwrap();
        assert!(all.iter().all(|&a| a));
        assert_eq!(layer.mac(&x, Some(&all), &mut l).unwrap(), int_dot(&w, &x, 4, 3));

        let keep = [true, false, true, true];
        let act = p.wordline_group_enable(&keep).unwrap();
        let masked: Vec<f64> = x.iter().zip(keep).map(|(v, k)| if k { *v } else { 0.0 }).collect();
        assert_eq!(layer.mac(&x, Some(&act), &mut l).unwrap(), int_dot(&w, &masked, 4, 3));

        let none = p.wordline_group_enable(&[false; 4]).unwrap();
        assert_eq!(layer.mac(&x, Some(&none), &mut l).unwrap(), vec![0.0; 3]);
        assert!(p.wordline_group_enable(&[true; 3]).is_err());
    }

    #[test]
    fn spatial_groups_cover_kernel_rows() {
        let p = plan_conv_mapping(3, 2, 1, MappingStrategy::UnfoldColumn, 64, 64, ModuleAttachment::PerChannel).unwrap();
        let act = p.wordline_group_enable(&[false, true]).unwrap();
        assert_eq!(act, [vec![false; 9], vec![true; 9]].concat());
    }

    #[test]
    fn read_ledger_counts_tiles() {
        let p = plan_conv_mapping(3, 10, 5, MappingStrategy::KxkGrid, 64, 64, ModuleAttachment::None).unwrap();
        let w = Tensor::new(&[90, 5], vec![1.0; 450]).unwrap();
        let layer = MappedLayer::program(p, &w, &ideal(), &mut sampler()).unwrap();
        let mut l = ReadLedger::default();
        layer.mac(&[1.0; 90], None, &mut l).unwrap();
        layer.mac(&[1.0; 90], Some(&[true; 90]), &mut l).unwrap();
        assert_eq!(l.wordline_activations, 9 + 90);
        l.wordline_activations = 9;
        assert_eq!(
            l,
            ReadLedger {
                crossbar_reads: 9 * 2,
                wordline_activations: 9,
                adc_conversions: 45 * 2
            }
        );
    }
}
