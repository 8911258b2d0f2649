//! Variational inference restricted to per-layer scale vectors, and the
//! quantized crossbar-bank approximation of the learned posterior.
//!
//! Weights stay deterministic (binary); only the scale group carries a
//! diagonal Gaussian posterior `q(s) = N(mu, diag(sigma²))`.

use crate::device::{dequantize_level, quantize_to_level};
use crate::error::{Error, Result};
use crate::nn::graph::{softplus_inverse, softplus_value};
use crate::nn::{Graph, Tensor, Var};
use crate::rng::Sampler;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalePosterior {
    pub mu: Tensor,
    /// Unconstrained parameter; `sigma = softplus(rho)`.
    pub rho: Tensor,
}

impl ScalePosterior {
    pub fn new(mu: &[f64], sigma: &[f64]) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::dim("posterior sigma length", mu.len(), sigma.len()));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::domain(format!("posterior sigma {s} must be positive")));
        }
        Ok(Self {
            mu: Tensor::new(&[mu.len()], mu.to_vec())?,
            rho: Tensor::new(&[mu.len()], sigma.iter().map(|&s| softplus_inverse(s)).collect())?,
        })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| softplus_value(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub mu0: f64,
    pub sigma0: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            sigma0: 0.1,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) {
            return Err(Error::domain("prior sigma must be positive"));
        }
        Ok(())
    }
}

/// Draws the standard-normal noise for one scale sample.
pub fn sample_noise(c: usize, sampler: &mut Sampler) -> Vec<f64> {
    (0..c).map(|_| sampler.gaussian()).collect()
}

/// `s = mu + sigma ⊙ eps`, `eps ~ N(0, I)`.
pub fn sample_scale(post: &ScalePosterior, sampler: &mut Sampler) -> Vec<f64> {
    let eps = sample_noise(post.channels(), sampler);
    post.mu
        .data()
        .iter()
        .zip(post.sigma())
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// `Σ_i ln(σp/σq) + (σq² + (μq − μp)²)/(2σp²) − ½`.
pub fn kl_gauss(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    for (name, len) in [("sigma_q", sigma_q.len()), ("mu_p", mu_p.len()), ("sigma_p", sigma_p.len())] {
        if len != n {
            return Err(Error::dim(name, n, len));
        }
    }
    if sigma_q.iter().chain(sigma_p).any(|s| !(*s > 0.0)) {
        return Err(Error::domain("KL needs positive standard deviations"));
    }
    Ok((0..n)
        .map(|i| {
            (sigma_p[i] / sigma_q[i]).ln()
                + (sigma_q[i].powi(2) + (mu_q[i] - mu_p[i]).powi(2)) / (2.0 * sigma_p[i].powi(2))
                - 0.5
        })
        .sum())
}

/// KL of a scale posterior against a scalar prior, built on the graph.
pub fn kl_node(g: &mut Graph, mu: Var, sigma: Var, prior: PriorSpec) -> Var {
    let inv2 = 1.0 / (2.0 * prior.sigma0 * prior.sigma0);
    let n = g.value(mu).len() as f64;
    let ln_sq = g.ln(sigma);
    let sum_ln = g.sum(ln_sq);
    let sq = g.square(sigma);
    let d = g.add_const(mu, -prior.mu0);
    let dsq = g.square(d);
    let both = g.add(sq, dsq).expect("same shape");
    let quad = g.sum(both);
    let quad = g.mul_const(quad, inv2);
    let neg_ln = g.mul_const(sum_ln, -1.0);
    let total = g.add(quad, neg_ln).expect("scalars");
    g.add_const(total, n * (prior.sigma0.ln() - 0.5))
}

/// `ce + λ·kl / n_batches`.
pub fn elbo_loss(ce: f64, kl: f64, kl_weight: f64, n_batches: usize) -> Result<f64> {
    if kl_weight < 0.0 {
        return Err(Error::domain("negative KL weight"));
    }
    if n_batches == 0 {
        return Err(Error::domain("n_batches must be positive"));
    }
    Ok(ce + kl_weight * kl / n_batches as f64)
}

/// KL weight for `epoch` under linear annealing over the first `fraction`
/// of `epochs`.
pub fn kl_anneal(epoch: usize, epochs: usize, fraction: f64, max_weight: f64) -> f64 {
    let ramp = (fraction * epochs as f64).max(1.0);
    max_weight * ((epoch + 1) as f64 / ramp).min(1.0)
}

/// `M` quantized posterior samples of one layer's scale vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarBank {
    /// `instances[k][c]` is the level index of channel `c` in instance `k`.
    pub instances: Vec<Vec<u16>>,
    pub levels: usize,
    pub range: (f64, f64),
}

impl CrossbarBank {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.instances.first().map_or(0, Vec::len)
    }

    pub fn step(&self) -> f64 {
        (self.range.1 - self.range.0) / self.levels as f64
    }

    /// Dequantized scale values of instance `k`.
    pub fn instance_values(&self, k: usize) -> Vec<f64> {
        self.instances[k]
            .iter()
            .map(|&i| dequantize_level(i as usize, self.range, self.levels))
            .collect()
    }
}

/// Default grid: `[min(mu − 4σ), max(mu + 4σ)]` over all channels.
pub fn default_bank_range(post: &ScalePosterior) -> (f64, f64) {
    let sig = post.sigma();
    let lo = post
        .mu
        .data()
        .iter()
        .zip(&sig)
        .map(|(m, s)| m - 4.0 * s)
        .fold(f64::INFINITY, f64::min);
    let hi = post
        .mu
        .data()
        .iter()
        .zip(&sig)
        .map(|(m, s)| m + 4.0 * s)
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn build_bank(
    post: &ScalePosterior,
    m: usize,
    levels: usize,
    range: (f64, f64),
    sampler: &mut Sampler,
) -> Result<CrossbarBank> {
    if m == 0 || levels == 0 {
        return Err(Error::domain("bank needs M >= 1 and L >= 1"));
    }
    if levels > u16::MAX as usize {
        return Err(Error::domain(format!("{levels} levels exceed storage")));
    }
    if !(range.0 < range.1) {
        return Err(Error::domain(format!("empty quantization range {range:?}")));
    }
    let instances = (0..m)
        .map(|_| {
            sample_scale(post, sampler)
                .into_iter()
                .map(|v| quantize_to_level(v, range, levels).map(|i| i as u16))
                .collect::<Result<Vec<u16>>>()
        })
        .collect::<Result<_>>()?;
    Ok(CrossbarBank {
        instances,
        levels,
        range,
    })
}

/// One-hot selection vector with a uniformly chosen set bit.
pub fn arbiter_select(m: usize, sampler: &mut Sampler) -> Result<Vec<bool>> {
    if m == 0 {
        return Err(Error::domain("arbiter over zero instances"));
    }
    let k = sampler.categorical(m);
    Ok((0..m).map(|i| i == k).collect())
}

pub(crate) fn one_hot_index(sel: &[bool], m: usize) -> Result<usize> {
    if sel.len() != m {
        return Err(Error::domain(format!("selection length {} for {m} instances", sel.len())));
    }
    let mut set = sel.iter().enumerate().filter(|(_, b)| **b);
    match (set.next(), set.next()) {
        (Some((k, _)), None) => Ok(k),
        _ => Err(Error::domain("selection is not one-hot")),
    }
}

/// Applies the selected bank instance as a scale modulation of `x`
/// (`N × C·P`).
pub fn bank_forward(x: &Tensor, bank: &CrossbarBank, sel: &[bool]) -> Result<Tensor> {
    let k = one_hot_index(sel, bank.len())?;
    let s = bank.instance_values(k);
    let c = s.len();
    if c == 0 || x.cols() % c != 0 {
        return Err(Error::dim("bank channel count", x.cols(), c));
    }
    let positions = x.cols() / c;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c * positions) {
        for (seg, k) in row.chunks_mut(positions).zip(&s) {
            seg.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_posterior_returns_mean() {
        let post = ScalePosterior::new(&[0.7, 1.3], &[1e-300, 1e-300]).unwrap();
        let mut s = Sampler::from_path(1, &[]);
        assert_eq!(sample_scale(&post, &mut s), vec![0.7, 1.3]);
    }

    #[test]
    fn standard_normal_moments() {
        let post = ScalePosterior::new(&[0.0], &[1.0]).unwrap();
        let mut s = Sampler::from_path(2, &[]);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_scale(&post, &mut s)[0]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() <= 0.01, "{m}");
        assert!((v - 1.0).abs() <= 0.02, "{v}");
    }

    #[test]
    fn reproducible_draws() {
        let post = ScalePosterior::new(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]).unwrap();
        let a = sample_scale(&post, &mut Sampler::from_path(3, &[4]));
        let b = sample_scale(&post, &mut Sampler::from_path(3, &[4]));
        assert_eq!(a, b);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_gauss(&[0.3], &[0.2], &[0.3], &[0.2]).unwrap(), 0.0);
        let v = kl_gauss(&[1.5], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((v - 0.125).abs() < 1e-15);
        assert!(kl_gauss(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let mq: f64 = rng.random_range(-3.0..3.0);
            let sq: f64 = rng.random_range(0.01..3.0);
            let mp: f64 = rng.random_range(-3.0..3.0);
            let sp: f64 = rng.random_range(0.01..3.0);
            assert!(kl_gauss(&[mq], &[sq], &[mp], &[sp]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let prior = PriorSpec::default();
        let mu = [0.9, 1.2, 1.0];
        let sig = [0.05, 0.3, 0.1];
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(&[3], mu.to_vec()).unwrap());
        let s = g.constant(Tensor::new(&[3], sig.to_vec()).unwrap());
        let k = kl_node(&mut g, m, s, prior);
        let expect = kl_gauss(&mu, &sig, &[1.0; 3], &[0.1; 3]).unwrap();
        assert!((g.value(k).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn elbo_examples() {
        assert_eq!(elbo_loss(1.0, 5.0, 0.0, 3).unwrap(), 1.0);
        assert_eq!(elbo_loss(1.0, 0.0, 2.0, 3).unwrap(), 1.0);
        assert_eq!(elbo_loss(1.0, 2.0, 0.5, 4).unwrap(), 1.25);
        assert!(elbo_loss(1.0, 2.0, -0.5, 4).is_err());
    }

    #[test]
    fn kl_anneal_ramps_then_holds() {
        assert!((kl_anneal(0, 100, 0.3, 1.0) - 1.0 / 30.0).abs() < 1e-12);
        assert_eq!(kl_anneal(29, 100, 0.3, 1.0), 1.0);
        assert_eq!(kl_anneal(80, 100, 0.3, 1.0), 1.0);
    }

    #[test]
    fn bank_degenerate_and_saturated() {
        // mu exactly on grid point 6 of 15 over [0, 1.5].
        let post = ScalePosterior::new(&[0.6], &[1e-300]).unwrap();
        let mut s = Sampler::from_path(6, &[]);
        let bank = build_bank(&post, 1, 15, (0.0, 1.5), &mut s).unwrap();
        assert_eq!(bank.instances, vec![vec![6]]);
        assert!((bank.instance_values(0)[0] - 0.6).abs() < 1e-12);

        let low = ScalePosterior::new(&[-5.0, -7.0], &[0.01, 0.01]).unwrap();
        let bank = build_bank(&low, 20, 15, (0.0, 1.5), &mut s).unwrap();
        assert!(bank.instances.iter().flatten().all(|&i| i == 0));
        assert!(build_bank(&low, 2, 15, (1.0, 1.0), &mut s).is_err());
        assert!(build_bank(&low, 0, 15, (0.0, 1.0), &mut s).is_err());
    }

    #[test]
    fn bank_mean_tracks_posterior() {
        let post = ScalePosterior::new(&[0.8, 1.0, 1.25], &[0.1, 0.05, 0.2]).unwrap();
        let range = default_bank_range(&post);
        let mut s = Sampler::from_path(7, &[]);
        let bank = build_bank(&post, 10_000, 15, range, &mut s).unwrap();
        for c in 0..3 {
            let mean = (0..bank.len()).map(|k| bank.instance_values(k)[c]).sum::<f64>()
                / bank.len() as f64;
            assert!((mean - post.mu.data()[c]).abs() <= bank.step(), "{c} {mean}");
        }
    }

    #[test]
    fn arbiter_is_one_hot() {
        let mut s = Sampler::from_path(8, &[]);
        assert_eq!(arbiter_select(1, &mut s).unwrap(), vec![true]);
        for _ in 0..1000 {
            let v = arbiter_select(5, &mut s).unwrap();
            assert_eq!(v.iter().filter(|b| **b).count(), 1);
        }
        assert!(arbiter_select(0, &mut s).is_err());
    }

    #[test]
    fn bank_forward_applies_selected_instance() {
        let post = ScalePosterior::new(&[1.0, 0.5], &[0.3, 0.3]).unwrap();
        let mut s = Sampler::from_path(9, &[]);
        let bank = build_bank(&post, 4, 15, default_bank_range(&post), &mut s).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        for k in 0..4 {
            let sel: Vec<bool> = (0..4).map(|i| i == k).collect();
            let out = bank_forward(&x, &bank, &sel).unwrap();
            let v = bank.instance_values(k);
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(out.get2(i, j), x.get2(i, j) * v[j]);
                }
            }
        }
        assert!(bank_forward(&x, &bank, &[true, true, false, false]).is_err());
        assert!(bank_forward(&x, &bank, &[false; 4]).is_err());
        assert!(bank_forward(&x, &bank, &[true]).is_err());
    }

    #[test]
    fn zero_sigma_bank_ignores_selection() {
        let post = ScalePosterior::new(&[1.1, 0.9], &[1e-300, 1e-300]).unwrap();
        let mut s = Sampler::from_path(10, &[]);
        let bank = build_bank(&post, 3, 15, (0.5, 1.5), &mut s).unwrap();
        let x = Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let a = bank_forward(&x, &bank, &[true, false, false]).unwrap();
        for k in 1..3 {
            let sel: Vec<bool> = (0..3).map(|i| i == k).collect();
            assert_eq!(bank_forward(&x, &bank, &sel).unwrap(), a);
        }
    }

    #[test]
    fn fine_quantization_approaches_unquantized() {
        let post = ScalePosterior::new(&[1.0, 0.7, 1.4], &[0.2, 0.1, 0.05]).unwrap();
        let range = default_bank_range(&post);
        let x = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        for levels in [15, 255, 4095] {
            let mut sa = Sampler::from_path(11, &[]);
            let raw = sample_scale(&post, &mut sa);
            let mut sb = Sampler::from_path(11, &[]);
            let bank = build_bank(&post, 1, levels, range, &mut sb).unwrap();
            let out = bank_forward(&x, &bank, &[true]).unwrap();
            let step = bank.step();
            for (o, r) in out.data().iter().zip(&raw) {
                assert!((o - r).abs() <= step / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn two_crossbar_decomposition_matches_monolithic() {
        // (x·W_bin) ⊙ s == x·(W_bin ⊙ s) with s applied per output column.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (n, d, c) = (3, 17, 5);
            let x: Vec<f64> = (0..n * d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let w: Vec<f64> = (0..d * c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let s: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
            let mac = matmul(&x, &w, n, d, c);
            let two = scale_rows(&mac, &s);
            let ws: Vec<f64> = w.iter().enumerate().map(|(i, v)| v * s[i % c]).collect();
            let mono = matmul(&x, &ws, n, d, c);
            for (a, b) in two.iter().zip(&mono) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    fn scale_rows(m: &[f64], s: &[f64]) -> Vec<f64> {
        m.iter().enumerate().map(|(i, v)| v * s[i % s.len()]).collect()
    }
}
