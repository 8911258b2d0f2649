//! Dense tensor math, reverse-mode differentiation and optimizers.

pub mod conv;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use conv::ConvGeometry;
pub use graph::{softmax_rows, BatchStats, Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// What a parameter is used for. The role picks the update rule and the
/// positivity map applied before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
    Scale,
    AffineGamma,
    AffineBeta,
    PosteriorMu,
    PosteriorSigma,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
            Role::Scale => 2,
            Role::AffineGamma => 3,
            Role::AffineBeta => 4,
            Role::PosteriorMu => 5,
            Role::PosteriorSigma => 6,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => Role::Weight,
            1 => Role::Bias,
            2 => Role::Scale,
            3 => Role::AffineGamma,
            4 => Role::AffineBeta,
            5 => Role::PosteriorMu,
            6 => Role::PosteriorSigma,
            _ => return None,
        })
    }

    /// Stored in an unconstrained space and mapped through softplus.
    pub fn is_reparameterized(self) -> bool {
        matches!(self, Role::Scale | Role::PosteriorSigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub requires_grad: bool,
    pub role: Role,
}

impl Parameter {
    pub fn new(value: Tensor, role: Role) -> Self {
        Self {
            value,
            requires_grad: true,
            role,
        }
    }
}

/// `out[n,c] = Σ_d x[n,d]·W[d,c] + b[c]` without recording a graph.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone()),
        g.constant(w.clone()),
        g.constant(b.clone()),
    );
    let out = g.affine(xv, wv, bv)?;
    Ok(g.value(out).clone())
}

/// Mean cross-entropy of `softmax(logits)` against `labels`.
pub fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.softmax_ce(l, labels)?;
    Ok(g.value(loss).item())
}

fn eval<F>(f: &mut F, ps: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Magnitude below which gradient components are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the worst floored relative error
/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
///
/// `f` builds the scalar on a fresh graph from one leaf per parameter.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::domain(format!("eps {eps} outside (0, 1e-2]")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).all_finite() {
            return Err(Error::Numeric("grad_check objective".into()));
        }
        let grads = g.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect()
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let fp = eval(&mut f, &work)?;
            work[pi].data_mut()[i] = orig - eps;
            let fm = eval(&mut f, &work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!("gradient component {pi}[{i}]")));
            }
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, d, c) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut s = b.data()[j];
                for k in 0..d {
                    s += x.data()[i * d + k] * w.data()[k * c + j];
                }
                out[i * c + j] = s;
            }
        }
        out
    }

    #[test]
    fn affine_identity() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = affine_forward(&i2, &i2, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out, i2);
    }

    #[test]
    fn affine_hand_sum() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let out = affine_forward(&x, &w, &Tensor::ones(&[1])).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[3, 4]);
            let w = rand_tensor(&mut rng, &[4, 2]);
            let b = rand_tensor(&mut rng, &[2]);
            let out = affine_forward(&x, &w, &b).unwrap();
            for (a, e) in out.data().iter().zip(triple_loop(&x, &w, &b)) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn affine_shape_errors_name_axis() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let err = affine_forward(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("inner axis"), "{err}");
        let w = Tensor::zeros(&[3, 2]);
        let err = affine_forward(&x, &w, &Tensor::zeros(&[5])).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn softmax_ce_examples() {
        let uniform = Tensor::zeros(&[1, 10]);
        assert!((softmax_ce(&uniform, &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);

        let peaked = Tensor::from_rows(&[vec![0.0, 1e3]]).unwrap();
        assert!(softmax_ce(&peaked, &[1]).unwrap() < 1e-12);

        // -log(e^3 / (e + e^2 + e^3)) by hand
        let l = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let hand = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let got = softmax_ce(&l, &[2]).unwrap();
        assert!((got - hand).abs() < 1e-12);
        assert!((got - 0.40760596).abs() < 1e-8);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let l = Tensor::zeros(&[1, 3]);
        assert!(matches!(softmax_ce(&l, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn grad_check_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_tensor(&mut rng, &[7]);
        let err = grad_check(
            |g, v| {
                let sq = g.square(v[0]);
                let s = g.sum(sq);
                Ok(g.mul_const(s, 0.5))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn grad_check_affine_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let labels = [0usize, 2, 1, 2];
        let err = grad_check(
            |g, v| {
                let z = g.affine(v[0], v[1], v[2])?;
                g.softmax_ce(z, &labels)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_constant() {
        let w = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10);
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_nan() {
        let w = Tensor::ones(&[1]);
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&w), 0.1).is_err());
        let r = grad_check(|g, v| Ok(g.mul_const(v[0], f64::NAN)), &[w], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[16, 33]);
        let w = rand_tensor(&mut rng, &[33, 9]);
        let b = rand_tensor(&mut rng, &[9]);
        let a = affine_forward(&x, &w, &b).unwrap();
        for _ in 0..5 {
            assert_eq!(affine_forward(&x, &w, &b).unwrap().data(), a.data());
        }
    }
}
