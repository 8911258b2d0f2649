//! Dropout-based Bayesian approximations: per-neuron masks, per-feature-map
//! masks, per-layer scale modulation and inverted normalization with affine
//! dropout.
//!
//! Mask bits are *keep* bits: `true` keeps the element, `false` drops it. A
//! dropout probability `p` is the probability of dropping.

use crate::error::{Error, Result};
use crate::nn::graph::{softplus_inverse, softplus_value};
use crate::nn::{Graph, Tensor, Var};
use crate::rng::Sampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropoutKind {
    Neuron,
    Spatial,
    Scale,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub kind: DropoutKind,
    pub p: f64,
    /// `(p_min, p_max)` for layer-dependent probabilities.
    pub adaptive: Option<(f64, f64)>,
}

impl DropoutSpec {
    pub fn new(kind: DropoutKind, p: f64) -> Result<Self> {
        let s = Self {
            kind,
            p,
            adaptive: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability(self.p)?;
        if let Some((lo, hi)) = self.adaptive {
            check_probability(lo)?;
            check_probability(hi)?;
            if lo > hi {
                return Err(Error::domain(format!("p_min {lo} > p_max {hi}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `n` independent keep bits, each kept with probability `1 − p`.
pub fn sample_neuron_mask(n: usize, p: f64, sampler: &mut Sampler) -> Vec<bool> {
    (0..n).map(|_| !sampler.bernoulli(p)).collect()
}

/// Keep bits with a per-module drop probability (device instances).
pub fn sample_mask_with(probs: &[f64], sampler: &mut Sampler) -> Vec<bool> {
    probs.iter().map(|&p| !sampler.bernoulli(p)).collect()
}

/// One keep bit per feature map.
pub fn sample_spatial_mask(channels: usize, p: f64, sampler: &mut Sampler) -> Vec<bool> {
    sample_neuron_mask(channels, p, sampler)
}

/// Zeroes every dropped channel of `N × (C·P)` activations.
pub fn apply_spatial_mask(x: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let c = keep.len();
    if c == 0 || x.cols() % c != 0 {
        return Err(Error::dim("channel count", c, x.cols()));
    }
    let positions = x.cols() / c;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c * positions) {
        for (seg, &k) in row.chunks_mut(positions).zip(keep) {
            if !k {
                seg.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(out)
}

/// Learnable per-channel scale stored as `u` with `s = softplus(u) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    pub raw: Tensor,
}

impl ScaleVector {
    /// All-ones scale.
    pub fn identity(c: usize) -> Self {
        Self {
            raw: Tensor::full(&[c], softplus_inverse(1.0)),
        }
    }

    pub fn from_values(s: &[f64]) -> Result<Self> {
        if let Some(bad) = s.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!("scale {bad} is not positive")));
        }
        Ok(Self {
            raw: Tensor::new(&[s.len()], s.iter().map(|&v| softplus_inverse(v)).collect())?,
        })
    }

    pub fn values(&self) -> Vec<f64> {
        self.raw.data().iter().map(|&u| softplus_value(u)).collect()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Scale modulation with a single layer bit: `s' = m·s + (1 − m)·1`,
/// `out = x ⊙ s'` broadcast over rows. A dropped layer passes `x` through.
pub fn scale_dropout_forward(x: &Tensor, s: &[f64], keep: bool) -> Result<Tensor> {
    if x.cols() != s.len() {
        return Err(Error::dim("scale length", x.cols(), s.len()));
    }
    if !keep {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(s.len()) {
        row.iter_mut().zip(s).for_each(|(v, k)| *v *= k);
    }
    Ok(out)
}

/// Log-linear interpolation of the drop probability in the layer's
/// parameter count between `bounds`.
pub fn adaptive_p(layer_params: usize, schedule: (f64, f64), bounds: (usize, usize)) -> Result<f64> {
    let (n_min, n_max) = bounds;
    let (p_min, p_max) = schedule;
    if n_min == 0 || n_min >= n_max {
        return Err(Error::domain(format!("bad bounds {bounds:?}")));
    }
    if layer_params < n_min || layer_params > n_max {
        return Err(Error::domain(format!(
            "layer size {layer_params} outside [{n_min}, {n_max}]"
        )));
    }
    check_probability(p_min)?;
    check_probability(p_max)?;
    if p_min > p_max {
        return Err(Error::domain("p_min > p_max"));
    }
    let t = ((layer_params as f64).ln() - (n_min as f64).ln())
        / ((n_max as f64).ln() - (n_min as f64).ln());
    Ok((p_min + (p_max - p_min) * t).clamp(p_min, p_max))
}

/// `λ·Σ(s_i − 1)²`.
pub fn scale_regularizer(s: &ScaleVector, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::domain("negative regularizer weight"));
    }
    Ok(lambda * s.values().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>())
}

/// Graph form of [`scale_regularizer`] on an already-positive scale node.
pub fn scale_regularizer_node(g: &mut Graph, s: Var, lambda: f64) -> Var {
    let d = g.add_const(s, -1.0);
    let sq = g.square(d);
    let sum = g.sum(sq);
    g.mul_const(sum, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Parameters and running statistics of an inverted normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl InvertedNormState {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential update with biased batch statistics.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Builds the inverted normalization on a graph: per-row affine
/// `γ'⊙x + β'` with `γ' = γ` kept or `1` dropped and `β' = β` kept or `0`
/// dropped, followed by per-channel normalization (batch statistics in
/// training, running statistics in inference).
#[allow(clippy::too_many_arguments)]
pub fn inverted_norm_node(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    keep_gamma: Vec<bool>,
    keep_beta: Vec<bool>,
    positions: usize,
    st: &InvertedNormState,
    mode: NormMode,
) -> Result<Var> {
    let c = st.channels();
    let gr = g.select_rows(gamma, keep_gamma, 1.0)?;
    let br = g.select_rows(beta, keep_beta, 0.0)?;
    let z = g.mul_row_channel(x, gr, positions)?;
    let z = g.add_row_channel(z, br, positions)?;
    match mode {
        NormMode::Train => g.batch_norm(z, c, positions, st.eps),
        NormMode::Infer => {
            let shift = g.constant(Tensor::new(
                &[c],
                st.running_mean.data().iter().map(|m| -m).collect(),
            )?);
            let inv = g.constant(Tensor::new(
                &[c],
                st.running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + st.eps).sqrt())
                    .collect(),
            )?);
            let z = g.add_channel(z, shift, positions)?;
            g.mul_channel(z, inv, positions)
        }
    }
}

/// Inverted normalization on `N × C` input with one scalar mask bit each
/// for `γ` and `β`. Training mode updates the running statistics.
pub fn inverted_norm_forward(
    x: &Tensor,
    st: &mut InvertedNormState,
    keep_gamma: bool,
    keep_beta: bool,
    mode: NormMode,
) -> Result<Tensor> {
    let n = x.rows();
    if mode == NormMode::Train && n < 2 {
        return Err(Error::BatchStatistics(n));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(st.gamma.clone());
    let bv = g.constant(st.beta.clone());
    let out = inverted_norm_node(
        &mut g,
        xv,
        gv,
        bv,
        vec![keep_gamma; n],
        vec![keep_beta; n],
        1,
        st,
        mode,
    )?;
    if mode == NormMode::Train {
        let stats = g.batch_stats().next().expect("train mode records stats").clone();
        st.update_running(&stats.mean, &stats.var);
    }
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binomial_ok(hits: usize, n: usize, p: f64) -> bool {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (hits as f64 - n as f64 * p).abs() <= 3.0 * sd
    }

    #[test]
    fn neuron_mask_extremes() {
        let mut s = Sampler::from_path(1, &[]);
        assert!(sample_neuron_mask(100, 0.0, &mut s).iter().all(|&k| k));
        assert!(sample_neuron_mask(100, 1.0, &mut s).iter().all(|&k| !k));
    }

    #[test]
    fn neuron_mask_keep_rate() {
        let mut s = Sampler::from_path(2, &[]);
        let m = sample_neuron_mask(100_000, 0.5, &mut s);
        assert!(binomial_ok(m.iter().filter(|&&k| k).count(), 100_000, 0.5));
        assert_eq!(s.counts().bernoulli, 100_000);
    }

    #[test]
    fn spatial_mask_zeroes_whole_maps() {
        let x = Tensor::new(&[1, 6], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(apply_spatial_mask(&x, &[true; 3]).unwrap(), x);
        let y = apply_spatial_mask(&x, &[true, false, true]).unwrap();
        assert_eq!(y.data(), &[1., 2., 0., 0., 5., 6.]);
    }

    #[test]
    fn spatial_drop_frequency_per_channel() {
        let (c, trials, p) = (64, 10_000, 0.3);
        let mut drops = vec![0usize; c];
        let mut s = Sampler::from_path(3, &[]);
        for _ in 0..trials {
            for (d, k) in drops.iter_mut().zip(sample_spatial_mask(c, p, &mut s)) {
                *d += usize::from(!k);
            }
        }
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for d in drops {
            assert!((d as f64 - trials as f64 * p).abs() <= 3.0 * sd, "{d}");
        }
        assert_eq!(s.counts().bernoulli, (c * trials) as u64);
    }

    #[test]
    fn scale_dropout_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(scale_dropout_forward(&x, &[2.0, 0.5], false).unwrap(), x);
        assert_eq!(scale_dropout_forward(&x, &[1.0, 1.0], true).unwrap(), x);
        assert_eq!(
            scale_dropout_forward(&x, &[2.0, 0.5], true).unwrap().data(),
            &[2.0, 0.5]
        );
    }

    #[test]
    fn adaptive_p_anchors() {
        let sched = (0.05, 0.25);
        assert_eq!(adaptive_p(100, sched, (100, 10_000)).unwrap(), 0.05);
        assert_eq!(adaptive_p(10_000, sched, (100, 10_000)).unwrap(), 0.25);
        let mid = adaptive_p(1_000, sched, (100, 10_000)).unwrap();
        assert!((mid - 0.15).abs() < 1e-12);
        assert!(adaptive_p(50, sched, (100, 10_000)).is_err());
        assert!(adaptive_p(100, sched, (100, 100)).is_err());
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(scale_regularizer(&ScaleVector::identity(5), 1.0).unwrap(), 0.0);
        // s = [2, 0] sits outside the positive parameterization; evaluate the
        // penalty formula directly through the graph form.
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(&[2], vec![2.0, 0.0]).unwrap());
        let r = scale_regularizer_node(&mut g, s, 1.0);
        assert_eq!(g.value(r).item(), 2.0);
        let sv = ScaleVector::from_values(&[2.0, 0.5]).unwrap();
        let a = scale_regularizer(&sv, 1.0).unwrap();
        let b = scale_regularizer(&sv, 2.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!(ScaleVector::from_values(&[0.0]).is_err());
    }

    #[test]
    fn scale_vector_is_positive() {
        let s = ScaleVector {
            raw: Tensor::new(&[3], vec![-50.0, 0.0, 40.0]).unwrap(),
        };
        assert!(s.values().iter().all(|&v| v > 0.0));
        let back = ScaleVector::from_values(&[0.3, 1.0, 7.0]).unwrap().values();
        for (a, b) in back.iter().zip([0.3, 1.0, 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_norm_identity_when_dropped() {
        let mut st = InvertedNormState::new(3);
        st.gamma = Tensor::new(&[3], vec![2.0, -1.0, 0.5]).unwrap();
        st.beta = Tensor::new(&[3], vec![0.3, 0.1, -4.0]).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -2.0, 3.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let out = inverted_norm_forward(&x, &mut st, false, false, NormMode::Infer).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn inverted_norm_centers_constant_channels() {
        let mut st = InvertedNormState::new(2);
        st.gamma = Tensor::full(&[2], 2.0);
        let x = Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap();
        let out = inverted_norm_forward(&x, &mut st, true, true, NormMode::Train).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    fn moments(out: &Tensor, c: usize) -> Vec<(f64, f64)> {
        let n = out.rows() as f64;
        (0..c)
            .map(|j| {
                let col: Vec<f64> = (0..out.rows()).map(|i| out.get2(i, j)).collect();
                let m = col.iter().sum::<f64>() / n;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn inverted_norm_train_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (kg, kb) in [(true, true), (true, false), (false, true), (false, false)] {
            let mut st = InvertedNormState::new(4);
            st.eps = 1e-12;
            st.gamma = Tensor::new(&[4], (0..4).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap();
            st.beta = Tensor::new(&[4], (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let x = Tensor::new(&[8, 4], (0..32).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let out = inverted_norm_forward(&x, &mut st, kg, kb, NormMode::Train).unwrap();
            for (m, v) in moments(&out, 4) {
                assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6, "{m} {v}");
            }
        }
    }

    #[test]
    fn inverted_norm_reduces_to_plain_normalization() {
        let x = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 0.0], vec![-2.0, 5.0]]).unwrap();
        let mut st = InvertedNormState::new(2);
        let out = inverted_norm_forward(&x, &mut st, true, true, NormMode::Train).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| x.get2(i, j)).collect();
            let m = col.iter().sum::<f64>() / 3.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 3.0;
            for i in 0..3 {
                let e = (col[i] - m) / (v + 1e-5).sqrt();
                assert!((out.get2(i, j) - e).abs() < 1e-12);
            }
        }
        // Running statistics moved toward the batch.
        assert!(st.running_mean.data()[0] > 0.0);
    }

    #[test]
    fn inverted_norm_needs_two_rows_in_training() {
        let mut st = InvertedNormState::new(2);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            inverted_norm_forward(&x, &mut st, true, true, NormMode::Train),
            Err(Error::BatchStatistics(1))
        ));
        assert!(inverted_norm_forward(&x, &mut st, true, true, NormMode::Infer).is_ok());
    }
}
