//! Training and evaluation orchestration.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{EvalMode, OptimizerKind, RunConfig};
use crate::data::Dataset;
use crate::dropout::scale_regularizer_node;
use crate::error::{Error, Result};
use crate::eval::{predict_bayes, UncertaintyReport};
use crate::model::{Backend, DeviceModel, Instrument, Method, Model};
use crate::nn::{Adam, Graph, Optimizer, Sgd};
use crate::resource::{count_events, plan_model, EventCounts};
use crate::rng::{domain, Sampler};
use crate::vi::kl_anneal;

/// Rows per MC-forward chunk during evaluation.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the stochastic training forward passes.
    pub accuracy: f64,
    pub kl_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Final model, or the last finite one after a divergence.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    /// `(epoch, loss)` of the first non-finite loss.
    pub divergence: Option<(usize, f64)>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<Checkpoint> {
        match self.divergence {
            Some((epoch, loss)) => Err(Error::Divergence { epoch, loss }),
            None => Ok(self.checkpoint),
        }
    }
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    if data.x.cols() != model.spec.input_len() {
        return Err(Error::dim("input features", model.spec.input_len(), data.x.cols()));
    }
    let c = model.spec.classes();
    if let Some(&l) = data.labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index {
            what: "class label".into(),
            index: l,
            bound: c,
        });
    }
    Ok(())
}

/// Trains a model from `cfg` on `data`. The objective is cross-entropy plus
/// the scale regularizer for the dropout methods and the annealed ELBO for
/// the variational ones. SpinBayes banks are built after the last epoch.
pub fn run_training(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let spec = cfg.model_spec()?;
    let seed = cfg.seed;
    let mut model = Model::init(spec, seed)?;
    check_data(&model, data)?;
    let t = &cfg.train;
    let mut opt: Box<dyn Optimizer> = match t.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(t.lr)),
        OptimizerKind::Sgd => Box::new(Sgd::new(t.lr, t.momentum)),
    };
    let n = data.len();
    if n == 0 {
        return Err(Error::domain("training set is empty"));
    }
    let batch = t.batch.min(n);
    let n_batches = n.div_ceil(batch);
    let probs = model.nominal_module_probs()?;
    let variational = model.spec.method.is_variational();
    let mut history = Vec::with_capacity(t.epochs);
    let mut divergence = None;

    'epochs: for epoch in 0..t.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(Sampler::from_path(seed, &[domain::SHUFFLE, epoch as u64]).rng());
        let kl_w = if variational {
            kl_anneal(epoch, t.epochs, cfg.method.kl_anneal, cfg.method.kl_weight)
        } else {
            0.0
        };
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(batch).enumerate() {
            let xb = data.x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut inst = Instrument::default();
            let noise = model.draw_noise(
                idx.len(),
                &probs,
                false,
                |r, l| Sampler::from_path(seed, &[domain::TRAIN, epoch as u64, b as u64, r as u64, l as u64]),
                &mut inst.draws,
            );
            let mut g = Graph::new();
            let f = model.forward(&mut g, &xb, &noise, true, Backend::Ideal, &mut inst)?;
            let c = model.spec.classes();
            correct += g
                .value(f.logits)
                .data()
                .chunks(c)
                .zip(&yb)
                .filter(|(row, &y)| crate::eval::argmax(row) == y)
                .count();
            let mut loss = g.softmax_ce(f.logits, &yb)?;
            if cfg.method.lambda > 0.0 {
                for &s in &f.scales {
                    let r = scale_regularizer_node(&mut g, s, cfg.method.lambda);
                    loss = g.add(loss, r)?;
                }
            }
            if let Some(kl) = f.kl {
                if kl_w > 0.0 {
                    let k = g.mul_const(kl, kl_w / n_batches as f64);
                    loss = g.add(loss, k)?;
                }
            }
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                divergence = Some((epoch, lv));
                break 'epochs;
            }
            let grads = g.backward(loss)?;
            for (p, v) in model.parameters_mut().into_iter().zip(&f.params) {
                p.value.zero_grad();
                if let Some(gr) = grads.get(*v) {
                    p.value.accumulate_grad(gr)?;
                }
            }
            let before = model.clone();
            opt.step(&mut model.parameters_mut());
            model.clip_latent();
            model.update_norm_stats(&g);
            if !model.parameters().iter().all(|p| p.value.all_finite()) {
                model = before;
                divergence = Some((epoch, f64::NAN));
                break 'epochs;
            }
            loss_sum += lv * idx.len() as f64;
        }
        history.push(EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            kl_weight: kl_w,
        });
    }
    if model.spec.method == Method::SpinBayes && divergence.is_none() {
        model.build_banks(seed)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, seed },
        history,
        divergence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: UncertaintyReport,
    /// Events counted while evaluating the whole set.
    pub measured: EventCounts,
    /// Closed-form events of one inference.
    pub predicted: EventCounts,
}

/// Programs `model` with the crossbar and device settings of `cfg`.
pub fn program_device(cfg: &RunConfig, model: &Model) -> Result<DeviceModel> {
    model.to_device(&cfg.crossbar.array, cfg.crossbar.strategy, cfg.device.sigma_p, cfg.seed)
}

/// Monte Carlo evaluation of `model` on `data` with `passes` passes.
pub fn run_eval(cfg: &RunConfig, model: &Model, data: &Dataset, passes: usize, mode: EvalMode) -> Result<EvalOutcome> {
    check_data(model, data)?;
    let device = match mode {
        EvalMode::Ideal => None,
        EvalMode::Device => Some(program_device(cfg, model)?),
    };
    let backend = device.as_ref().map_or(Backend::Ideal, Backend::Device);
    let mut inst = Instrument::default();
    let report = predict_bayes(model, &data.x, &data.labels, passes, cfg.seed, backend, EVAL_CHUNK, &mut inst)?;
    let mut measured = EventCounts::from(&inst);
    let x = &cfg.crossbar.array;
    let plans = plan_model(&model.spec, cfg.crossbar.strategy, x.max_rows, x.max_cols)?;
    let predicted = count_events(&model.spec, passes as u64, &plans)?;
    measured.dropout_modules = predicted.dropout_modules;
    measured.parameter_bits = predicted.parameter_bits;
    Ok(EvalOutcome {
        report,
        measured,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Synthetic};

    fn small_cfg(method: Method) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.method.method = method;
        cfg.model.arch = crate::config::Arch::Mlp(vec![2, 16, 2]);
        cfg.train.epochs = 3;
        cfg.train.batch = 16;
        cfg
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_synthetic(Synthetic::TwoMoons, 64, 0.1, 1).unwrap();
        for method in Method::ALL {
            let cfg = small_cfg(method);
            let a = run_training(&cfg, &data).unwrap();
            let b = run_training(&cfg, &data).unwrap();
            assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes(), "{method:?}");
            assert_eq!(a.history.len(), 3);
            assert!(a.divergence.is_none());
            assert_eq!(a.checkpoint.model.has_banks(), method == Method::SpinBayes);
        }
    }

    #[test]
    fn divergence_keeps_last_finite_state() {
        let mut data = gen_synthetic(Synthetic::Blobs, 32, 0.1, 1).unwrap();
        let mut cfg = small_cfg(Method::ScaleDrop);
        cfg.train.epochs = 2;
        data.x.data_mut()[7] = f64::NAN;
        let out = run_training(&cfg, &data).unwrap();
        assert_eq!(out.divergence.map(|d| d.0), Some(0));
        assert!(out.checkpoint.model.parameters().iter().all(|p| p.value.all_finite()));
        assert!(matches!(out.into_result(), Err(Error::Divergence { epoch: 0, .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let data = gen_synthetic(Synthetic::Blobs, 8, 0.1, 1).unwrap();
        let mut cfg = small_cfg(Method::SpinDrop);
        cfg.model.arch = crate::config::Arch::Mlp(vec![3, 4, 2]);
        assert!(run_training(&cfg, &data).is_err());
    }
}
