//! Monte Carlo prediction, uncertainty metrics, OOD detection and input
//! corruptions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Backend, Instrument, Model};
use crate::nn::Tensor;
use crate::rng::Sampler;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub mean_probs: Tensor,
    /// `T × N × C`.
    pub per_pass_probs: Tensor,
    pub entropy: Vec<f64>,
    pub nll: f64,
    pub accuracy: f64,
}

/// One line of the per-sample report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub id: u64,
    pub label: usize,
    pub prediction: usize,
    pub entropy: f64,
    /// Fraction of passes whose argmax equals the prediction.
    pub agreement: f64,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// `−Σ p ln p` with `0·ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::domain(format!("probability {p} is negative")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("probabilities sum to {total}")));
    }
    Ok(probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Mean of `−ln max(p[label], 1e-12)`.
pub fn nll(mean_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != mean_probs.rows() {
        return Err(Error::dim("label count", mean_probs.rows(), labels.len()));
    }
    let c = mean_probs.cols();
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Index {
                what: "class label".into(),
                index: l,
                bound: c,
            });
        }
        total -= mean_probs.get2(r, l).max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Averages `T` pass outputs into a report.
pub fn summarize(passes: &[Tensor], labels: &[usize]) -> Result<UncertaintyReport> {
    let t = passes.len();
    if t == 0 {
        return Err(Error::domain("no passes to summarize"));
    }
    let (n, c) = (passes[0].rows(), passes[0].cols());
    let mut mean = vec![0.0; n * c];
    let mut all = Vec::with_capacity(t * n * c);
    for p in passes {
        mean.iter_mut().zip(p.data()).for_each(|(m, v)| *m += v);
        all.extend_from_slice(p.data());
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mean_probs = Tensor::new(&[n, c], mean)?;
    let entropy = (0..n)
        .map(|r| predictive_entropy(mean_probs.row(r)))
        .collect::<Result<Vec<_>>>()?;
    let correct = (0..n).filter(|&r| argmax(mean_probs.row(r)) == labels[r]).count();
    Ok(UncertaintyReport {
        nll: nll(&mean_probs, labels)?,
        accuracy: correct as f64 / n.max(1) as f64,
        per_pass_probs: Tensor::new(&[t, n, c], all)?,
        mean_probs,
        entropy,
    })
}

/// Runs `T` MC passes over `x` in chunks of `chunk` rows and summarizes.
#[allow(clippy::too_many_arguments)]
pub fn predict_bayes(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    passes: usize,
    seed: u64,
    backend: Backend<'_>,
    chunk: usize,
    inst: &mut Instrument,
) -> Result<UncertaintyReport> {
    if passes == 0 {
        return Err(Error::domain("MC pass count must be at least 1"));
    }
    let n = x.rows();
    let c = model.spec.classes();
    let mut per_pass: Vec<Vec<f64>> = vec![Vec::with_capacity(n * c); passes];
    let chunk = chunk.max(1);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let out = model.mc_forward(&x.select_rows(&idx), &ids, passes, seed, backend, inst)?;
        for (acc, p) in per_pass.iter_mut().zip(out) {
            acc.extend(p.into_data());
        }
    }
    let passes: Vec<Tensor> = per_pass
        .into_iter()
        .map(|d| Tensor::new(&[n, c], d))
        .collect::<Result<_>>()?;
    summarize(&passes, labels)
}

impl UncertaintyReport {
    pub fn passes(&self) -> usize {
        self.per_pass_probs.shape()[0]
    }

    pub fn records(&self, labels: &[usize]) -> Vec<SampleRecord> {
        let (t, n, c) = (self.passes(), self.mean_probs.rows(), self.mean_probs.cols());
        let pp = self.per_pass_probs.data();
        (0..n)
            .map(|r| {
                let pred = argmax(self.mean_probs.row(r));
                let agree = (0..t)
                    .filter(|&k| argmax(&pp[(k * n + r) * c..(k * n + r + 1) * c]) == pred)
                    .count();
                SampleRecord {
                    id: r as u64,
                    label: labels[r],
                    prediction: pred,
                    entropy: self.entropy[r],
                    agreement: agree as f64 / t as f64,
                }
            })
            .collect()
    }

    /// `1 − max_c p̄[c]` per sample.
    pub fn max_prob_scores(&self) -> Vec<f64> {
        (0..self.mean_probs.rows())
            .map(|r| 1.0 - self.mean_probs.row(r).iter().cloned().fold(0.0, f64::max))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Entropy,
    /// One minus the top mean probability.
    MaxProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OodResult {
    pub threshold: f64,
    pub detection_rate: f64,
    pub score_kind: ScoreKind,
}

/// Smallest score with at least a `q` fraction of the set at or below it.
pub fn empirical_quantile(scores: &[f64], q: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[k - 1]
}

/// Threshold at the `quantile` of the in-distribution scores; OOD samples
/// strictly above it count as detected.
pub fn ood_rate(scores_id: &[f64], scores_ood: &[f64], quantile: f64, score_kind: ScoreKind) -> Result<OodResult> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::domain("OOD scoring needs nonempty score sets"));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::domain(format!("quantile {quantile} outside (0, 1)")));
    }
    let threshold = empirical_quantile(scores_id, quantile);
    let hits = scores_ood.iter().filter(|&&s| s > threshold).count();
    Ok(OodResult {
        threshold,
        detection_rate: hits as f64 / scores_ood.len() as f64,
        score_kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    GaussianNoise,
    UniformNoise,
    Rotation,
}

impl Corruption {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "uniform_noise" => Ok(Self::UniformNoise),
            "rotation" => Ok(Self::Rotation),
            other => Err(Error::domain(format!("unknown corruption `{other}`"))),
        }
    }
}

/// Bilinear rotation of one `h × w` plane about its centre, zero outside.
fn rotate_plane(src: &[f64], h: usize, w: usize, degrees: f64) -> Vec<f64> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // Inverse map: the output pixel samples the source rotated back.
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Corrupts every row of `x`, whose samples have shape `(C, H, W)`.
pub fn corrupt(
    x: &Tensor,
    kind: Corruption,
    severity: f64,
    shape: (usize, usize, usize),
    sampler: &mut Sampler,
) -> Result<Tensor> {
    if !(severity >= 0.0) {
        return Err(Error::domain(format!("severity {severity} must be nonnegative")));
    }
    let (c, h, w) = shape;
    if x.cols() != c * h * w {
        return Err(Error::dim("corruption sample length", c * h * w, x.cols()));
    }
    if severity == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    match kind {
        Corruption::GaussianNoise => out.data_mut().iter_mut().for_each(|v| *v += severity * sampler.gaussian()),
        Corruption::UniformNoise => {
            let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in out.data_mut() {
                if sampler.uniform() < severity {
                    *v = lo + (hi - lo) * sampler.uniform();
                }
            }
        }
        Corruption::Rotation => {
            for row in out.data_mut().chunks_mut(c * h * w) {
                for plane in row.chunks_mut(h * w) {
                    let r = rotate_plane(plane, h, w, severity);
                    plane.copy_from_slice(&r);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_values() {
        assert!((predictive_entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(predictive_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = predictive_entropy(&[0.7, 0.3]).unwrap();
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        assert!((h - oracle).abs() < 1e-15 && (h - 0.610864).abs() < 1e-6);
        assert!(predictive_entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn nll_values() {
        let one_hot = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(nll(&one_hot, &[1]).unwrap(), 0.0);
        assert!((nll(&one_hot, &[0]).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-12);
        let uni = Tensor::full(&[3, 10], 0.1);
        assert!((nll(&uni, &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let a = Tensor::from_rows(&[vec![0.4, 0.6]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap();
        assert!(nll(&b, &[1]).unwrap() < nll(&a, &[1]).unwrap());
    }

    #[test]
    fn ood_examples() {
        let id: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(ood_rate(&id, &[5.0, 6.0], 0.95, ScoreKind::Entropy).unwrap().detection_rate, 1.0);
        assert_eq!(ood_rate(&id, &[0.1], 0.95, ScoreKind::Entropy).unwrap().detection_rate, 0.0);
        assert!(ood_rate(&[], &[1.0], 0.95, ScoreKind::Entropy).is_err());
        assert!(ood_rate(&id, &[1.0], 1.0, ScoreKind::Entropy).is_err());
    }

    #[test]
    fn exchangeable_scores_hit_one_minus_quantile() {
        let mut s = Sampler::from_path(4, &[]);
        let id: Vec<f64> = (0..20_000).map(|_| s.uniform()).collect();
        let ood: Vec<f64> = (0..20_000).map(|_| s.uniform()).collect();
        let r = ood_rate(&id, &ood, 0.95, ScoreKind::Entropy).unwrap().detection_rate;
        let sd = (0.05 * 0.95 / 20_000f64).sqrt();
        // Threshold noise from the finite reference set adds its own spread.
        assert!((r - 0.05).abs() <= 3.0 * sd * 2f64.sqrt(), "{r}");
    }

    #[test]
    fn corruption_identity_and_rotation() {
        let mut s = Sampler::from_path(1, &[]);
        let x = Tensor::new(&[2, 2 * 5 * 5], (0..100).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for k in [Corruption::GaussianNoise, Corruption::UniformNoise, Corruption::Rotation] {
            assert_eq!(corrupt(&x, k, 0.0, (2, 5, 5), &mut s).unwrap(), x);
        }
        let r = corrupt(&x, Corruption::Rotation, 360.0, (2, 5, 5), &mut s).unwrap();
        assert!(r.max_abs_diff(&x) <= 1e-6);
        let q = corrupt(&x, Corruption::Rotation, 90.0, (2, 5, 5), &mut s).unwrap();
        // Quarter turn of a square grid permutes pixels exactly.
        let mut a: Vec<f64> = q.data()[..25].to_vec();
        let mut b: Vec<f64> = x.data()[..25].to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-9));
        assert!(Corruption::from_name("blur").is_err());
    }

    #[test]
    fn uniform_noise_at_full_rate_forgets_input() {
        let mut s = Sampler::from_path(2, &[]);
        let n = 10_000;
        let x = Tensor::new(&[1, n], (0..n).map(|_| s.uniform()).collect()).unwrap();
        let y = corrupt(&x, Corruption::UniformNoise, 1.0, (1, 100, 100), &mut s).unwrap();
        let (a, b) = (x.data(), y.data());
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum();
        let va: f64 = a.iter().map(|u| (u - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
        assert!((cov / (va * vb).sqrt()).abs() <= 0.02);
    }

    #[test]
    fn summary_rows_are_distributions() {
        let p1 = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        let p2 = Tensor::from_rows(&[vec![0.6, 0.4], vec![1.0, 0.0]]).unwrap();
        let r = summarize(&[p1, p2], &[1, 0]).unwrap();
        for i in 0..2 {
            assert!((r.mean_probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.entropy[i] >= 0.0 && r.entropy[i] <= 2f64.ln() + 1e-12);
        }
        assert_eq!(r.per_pass_probs.shape(), &[2, 2, 2]);
        let recs = r.records(&[1, 0]);
        assert_eq!(recs[1].prediction, 0);
        assert_eq!(recs[0].agreement, 0.5);
    }
}
