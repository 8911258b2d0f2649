//! Run configuration: INI-style sections `[model]`, `[method]`, `[device]`,
//! `[crossbar]` and `[train]` with `key = value` lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::crossbar::{CrossbarConfig, FaultKind, MappingStrategy};
use crate::data::{gen_synthetic, load_idx_pair, Dataset, Synthetic};
use crate::device::MtjParams;
use crate::error::{Error, Result};
use crate::eval::ScoreKind;
use crate::model::{Method, ModelSpec};
use crate::vi::PriorSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    /// Layer widths including input and output.
    Mlp(Vec<usize>),
    Cnn {
        input: (usize, usize, usize),
        /// `(C_out, K, stride, padding)` per convolution.
        convs: Vec<(usize, usize, usize, usize)>,
        classes: usize,
    },
    ReferenceCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BayesLayers {
    Default,
    All,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Ideal,
    Device,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub binarize_first_last: bool,
    pub binary_input: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub p: f64,
    pub adaptive: Option<(f64, f64)>,
    /// Weight of the scale regularizer.
    pub lambda: f64,
    /// Final KL weight of the ELBO.
    pub kl_weight: f64,
    /// Fraction of epochs over which the KL weight ramps up.
    pub kl_anneal: f64,
    pub prior: PriorSpec,
    pub sigma_init: f64,
    pub bank_instances: usize,
    pub bank_levels: usize,
    pub bayes_layers: BayesLayers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub mtj: MtjParams,
    /// Write pulse width used to calibrate module currents.
    pub pulse: f64,
    /// Device-to-device spread of module probabilities.
    pub sigma_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarSection {
    pub strategy: MappingStrategy,
    pub array: CrossbarConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        kind: Synthetic,
        n_train: usize,
        n_test: usize,
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        limit_train: Option<usize>,
        limit_test: Option<usize>,
        /// Pixels above the threshold become 1, the rest 0.
        binarize: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: DataSource,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// MC passes at evaluation.
    pub passes: usize,
    pub eval_mode: EvalMode,
    pub ood_quantile: f64,
    pub ood_score: ScoreKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub method: MethodConfig,
    pub device: DeviceConfig,
    pub crossbar: CrossbarSection,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                arch: Arch::Mlp(vec![2, 32, 32, 2]),
                binarize_first_last: false,
                binary_input: false,
            },
            method: MethodConfig {
                method: Method::ScaleDrop,
                p: 0.2,
                adaptive: None,
                lambda: 1e-3,
                kl_weight: 1.0,
                kl_anneal: 0.3,
                prior: PriorSpec::default(),
                sigma_init: 0.05,
                bank_instances: 16,
                bank_levels: 15,
                bayes_layers: BayesLayers::Default,
            },
            device: DeviceConfig {
                mtj: MtjParams::default(),
                pulse: 1e3,
                sigma_p: 0.0,
            },
            crossbar: CrossbarSection {
                strategy: MappingStrategy::UnfoldColumn,
                array: CrossbarConfig::default(),
            },
            train: TrainConfig {
                data: DataSource::Synthetic {
                    kind: Synthetic::TwoMoons,
                    n_train: 512,
                    n_test: 512,
                    noise: 0.1,
                },
                epochs: 200,
                batch: 64,
                lr: 0.01,
                optimizer: OptimizerKind::Adam,
                momentum: 0.9,
                passes: 10,
                eval_mode: EvalMode::Ideal,
                ood_quantile: 0.95,
                ood_score: ScoreKind::Entropy,
            },
            seed: 0,
        }
    }
}

/// Keys of one section; every key must be consumed.
struct Section {
    name: &'static str,
    keys: BTreeMap<String, String>,
}

impl Section {
    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.keys.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(key) {
            *target = v
                .parse()
                .map_err(|e: T::Err| Error::config(self.field(key), format!("`{v}`: {e}")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&self, key: &str, v: &str, sep: char) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        v.split(sep)
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e: T::Err| Error::config(self.field(key), format!("`{}`: {e}", s.trim())))
            })
            .collect()
    }

    fn finish(self) -> Result<()> {
        match self.keys.keys().next() {
            Some(k) => Err(Error::config(self.field(k), "unknown key")),
            None => Ok(()),
        }
    }
}

fn choice<T>(field: &str, v: &str, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    options
        .iter()
        .find(|(n, _)| *n == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::config(field, format!("`{v}` is not one of {}", names.join(", ")))
        })
}

impl RunConfig {
    pub fn from_ini(text: &str) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        let mut sections: BTreeMap<&'static str, Section> = BTreeMap::new();
        for name in ["model", "method", "device", "crossbar", "train"] {
            sections.insert(
                name,
                Section {
                    name,
                    keys: BTreeMap::new(),
                },
            );
        }
        for (sec, props) in ini.iter() {
            let Some(sec) = sec else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::config(k, "key outside of any section"));
                }
                continue;
            };
            let s = sections
                .get_mut(sec)
                .ok_or_else(|| Error::config(sec, "unknown section"))?;
            for (k, v) in props.iter() {
                s.keys.insert(k.to_string(), v.to_string());
            }
        }
        let mut cfg = RunConfig::default();
        let mut take = |name: &str| sections.remove(name).expect("known section");
        cfg.read_model(take("model"))?;
        cfg.read_method(take("method"))?;
        cfg.read_device(take("device"))?;
        cfg.read_crossbar(take("crossbar"))?;
        cfg.read_train(take("train"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ini(&std::fs::read_to_string(path)?)
    }

    fn read_model(&mut self, mut s: Section) -> Result<()> {
        let m = &mut self.model;
        let arch = s.raw("arch").unwrap_or_else(|| "mlp".into());
        let layers = s.raw("layers");
        let input = s.raw("input");
        let convs = s.raw("convs");
        let mut classes = 10usize;
        s.parse("classes", &mut classes)?;
        m.arch = match arch.as_str() {
            "mlp" => match layers {
                Some(v) => Arch::Mlp(s.list("layers", &v, ',')?),
                None => m.arch.clone(),
            },
            "cnn" => {
                let input = input.ok_or_else(|| Error::config(s.field("input"), "required for arch = cnn"))?;
                let dims: Vec<usize> = s.list("input", &input, ',')?;
                let [c, h, w] = dims[..] else {
                    return Err(Error::config(s.field("input"), "expected C, H, W"));
                };
                let convs = convs.ok_or_else(|| Error::config(s.field("convs"), "required for arch = cnn"))?;
                let convs = convs
                    .split(',')
                    .map(|c| {
                        let v: Vec<usize> = s.list("convs", c, ':')?;
                        match v[..] {
                            [co, k, st, pad] => Ok((co, k, st, pad)),
                            _ => Err(Error::config(s.field("convs"), format!("`{}` is not C_out:K:stride:pad", c.trim()))),
                        }
                    })
                    .collect::<Result<_>>()?;
                Arch::Cnn {
                    input: (c, h, w),
                    convs,
                    classes,
                }
            }
            "reference_cnn" => Arch::ReferenceCnn,
            other => return Err(Error::config(s.field("arch"), format!("`{other}` is not one of mlp, cnn, reference_cnn"))),
        };
        s.parse("binarize_first_last", &mut m.binarize_first_last)?;
        s.parse("binary_input", &mut m.binary_input)?;
        s.finish()
    }

    fn read_method(&mut self, mut s: Section) -> Result<()> {
        let m = &mut self.method;
        if let Some(v) = s.raw("name") {
            m.method = Method::from_name(&v).ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(s.field("name"), format!("`{v}` is not one of {}", names.join(", ")))
            })?;
        }
        s.parse("p", &mut m.p)?;
        if let Some(v) = s.raw("adaptive") {
            let pair: Vec<f64> = s.list("adaptive", &v, ',')?;
            let [lo, hi] = pair[..] else {
                return Err(Error::config(s.field("adaptive"), "expected p_min, p_max"));
            };
            m.adaptive = Some((lo, hi));
        }
        s.parse("lambda", &mut m.lambda)?;
        s.parse("kl_weight", &mut m.kl_weight)?;
        s.parse("kl_anneal", &mut m.kl_anneal)?;
        s.parse("prior_mu", &mut m.prior.mu0)?;
        s.parse("prior_sigma", &mut m.prior.sigma0)?;
        s.parse("sigma_init", &mut m.sigma_init)?;
        s.parse("bank_instances", &mut m.bank_instances)?;
        s.parse("bank_levels", &mut m.bank_levels)?;
        if let Some(v) = s.raw("bayes_layers") {
            m.bayes_layers = choice(
                &s.field("bayes_layers"),
                &v,
                &[("default", BayesLayers::Default), ("all", BayesLayers::All), ("hidden", BayesLayers::Hidden)],
            )?;
        }
        s.finish()
    }

    fn read_device(&mut self, mut s: Section) -> Result<()> {
        let d = &mut self.device;
        s.parse("i_c", &mut d.mtj.i_c)?;
        s.parse("tau0", &mut d.mtj.tau0)?;
        s.parse("delta", &mut d.mtj.delta)?;
        s.parse("pulse", &mut d.pulse)?;
        s.parse("sigma_p", &mut d.sigma_p)?;
        s.finish()
    }

    fn read_crossbar(&mut self, mut s: Section) -> Result<()> {
        let x = &mut self.crossbar;
        if let Some(v) = s.raw("strategy") {
            x.strategy = choice(
                &s.field("strategy"),
                &v,
                &[("unfold", MappingStrategy::UnfoldColumn), ("kxk", MappingStrategy::KxkGrid)],
            )?;
        }
        let a = &mut x.array;
        s.parse("max_rows", &mut a.max_rows)?;
        s.parse("max_cols", &mut a.max_cols)?;
        s.parse("g_on", &mut a.g_on)?;
        s.parse("g_off", &mut a.g_off)?;
        s.parse("sigma_g", &mut a.sigma_g_rel)?;
        let mut bits = 0u32;
        s.parse("adc_bits", &mut bits)?;
        a.adc_bits = (bits > 0).then_some(bits);
        s.parse("fault_rate", &mut a.faults.rate)?;
        if let Some(v) = s.raw("fault_kind") {
            a.faults.kind = choice(
                &s.field("fault_kind"),
                &v,
                &[("stuck_on", FaultKind::StuckOn), ("stuck_off", FaultKind::StuckOff), ("mixed", FaultKind::Mixed)],
            )?;
        }
        s.finish()
    }

    fn read_train(&mut self, mut s: Section) -> Result<()> {
        let t = &mut self.train;
        let kind = s.raw("dataset").unwrap_or_else(|| "two_moons".into());
        t.data = if kind == "idx" {
            let mut path = |k: &str| {
                s.raw(k)
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::config(s.field(k), "required for dataset = idx"))
            };
            let (train_images, train_labels) = (path("train_images")?, path("train_labels")?);
            let (test_images, test_labels) = (path("test_images")?, path("test_labels")?);
            let opt = |s: &mut Section, k: &str| -> Result<Option<usize>> {
                let mut v = 0usize;
                s.parse(k, &mut v)?;
                Ok((v > 0).then_some(v))
            };
            let limit_train = opt(&mut s, "limit_train")?;
            let limit_test = opt(&mut s, "limit_test")?;
            let mut binarize = f64::NAN;
            s.parse("binarize", &mut binarize)?;
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit_train,
                limit_test,
                binarize: (!binarize.is_nan()).then_some(binarize),
            }
        } else {
            let kind = Synthetic::from_name(&kind)
                .ok_or_else(|| Error::config(s.field("dataset"), format!("`{kind}` is not one of two_moons, blobs, idx")))?;
            let (mut n_train, mut n_test, mut noise) = (512usize, 512usize, 0.1);
            s.parse("n_train", &mut n_train)?;
            s.parse("n_test", &mut n_test)?;
            s.parse("noise", &mut noise)?;
            DataSource::Synthetic {
                kind,
                n_train,
                n_test,
                noise,
            }
        };
        s.parse("epochs", &mut t.epochs)?;
        s.parse("batch", &mut t.batch)?;
        s.parse("lr", &mut t.lr)?;
        if let Some(v) = s.raw("optimizer") {
            t.optimizer = choice(&s.field("optimizer"), &v, &[("adam", OptimizerKind::Adam), ("sgd", OptimizerKind::Sgd)])?;
        }
        s.parse("momentum", &mut t.momentum)?;
        s.parse("passes", &mut t.passes)?;
        if let Some(v) = s.raw("eval_mode") {
            t.eval_mode = choice(&s.field("eval_mode"), &v, &[("ideal", EvalMode::Ideal), ("device", EvalMode::Device)])?;
        }
        s.parse("ood_quantile", &mut t.ood_quantile)?;
        if let Some(v) = s.raw("ood_score") {
            t.ood_score = choice(&s.field("ood_score"), &v, &[("entropy", ScoreKind::Entropy), ("max_prob", ScoreKind::MaxProb)])?;
        }
        s.parse("seed", &mut self.seed)?;
        s.finish()
    }

    /// Range checks with field-qualified messages.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(field, msg)) };
        let t = &self.train;
        check(t.epochs >= 1, "train.epochs", "must be at least 1")?;
        check(t.batch >= 1, "train.batch", "must be at least 1")?;
        check(t.lr > 0.0 && t.lr.is_finite(), "train.lr", "must be positive")?;
        check((0.0..1.0).contains(&t.momentum), "train.momentum", "must lie in [0, 1)")?;
        check(t.passes >= 1, "train.passes", "must be at least 1")?;
        check(t.ood_quantile > 0.0 && t.ood_quantile < 1.0, "train.ood_quantile", "must lie in (0, 1)")?;
        match &t.data {
            DataSource::Synthetic { n_train, n_test, noise, .. } => {
                check(*n_train >= 2, "train.n_train", "must be at least 2")?;
                check(*n_test >= 2, "train.n_test", "must be at least 2")?;
                check(*noise >= 0.0, "train.noise", "must be nonnegative")?;
            }
            DataSource::Idx { binarize, .. } => {
                if let Some(b) = binarize {
                    check((0.0..1.0).contains(b), "train.binarize", "must lie in [0, 1)")?;
                }
            }
        }
        let m = &self.method;
        check(m.lambda >= 0.0, "method.lambda", "must be nonnegative")?;
        check(m.kl_weight >= 0.0, "method.kl_weight", "must be nonnegative")?;
        check((0.0..=1.0).contains(&m.kl_anneal), "method.kl_anneal", "must lie in [0, 1]")?;
        check(m.prior.sigma0 > 0.0, "method.prior_sigma", "must be positive")?;
        let d = &self.device;
        d.mtj.validate().map_err(|e| Error::config("device", e.to_string()))?;
        check(d.pulse > 0.0, "device.pulse", "must be positive")?;
        check(d.sigma_p >= 0.0, "device.sigma_p", "must be nonnegative")?;
        self.crossbar
            .array
            .validate()
            .map_err(|e| Error::config("crossbar", e.to_string()))?;
        if let Arch::Mlp(sizes) = &self.model.arch {
            check(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "model.layers", "need at least two positive widths")?;
        }
        self.model_spec().map(|_| ())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let (m, md) = (&self.model, &self.method);
        let mut spec = match &m.arch {
            Arch::Mlp(sizes) => ModelSpec::mlp(sizes, md.method, md.p, m.binarize_first_last)?,
            Arch::Cnn { input, convs, classes } => {
                ModelSpec::cnn(*input, convs, *classes, md.method, md.p, m.binarize_first_last)?
            }
            Arch::ReferenceCnn => ModelSpec::reference_cnn(md.method, md.p)?,
        };
        spec.binary_input |= m.binary_input;
        spec.adaptive = md.adaptive;
        spec.prior = md.prior;
        spec.sigma_init = md.sigma_init;
        spec.bank_instances = md.bank_instances;
        spec.bank_levels = md.bank_levels;
        let n = spec.layers.len();
        for (i, l) in spec.layers.iter_mut().enumerate() {
            l.bayes = match md.bayes_layers {
                BayesLayers::Default => l.bayes,
                BayesLayers::All => true,
                BayesLayers::Hidden => i + 1 < n,
            };
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Loads or generates the train and test sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.train.data {
            DataSource::Synthetic {
                kind,
                n_train,
                n_test,
                noise,
            } => Ok((
                gen_synthetic(*kind, *n_train, *noise, self.seed)?,
                gen_synthetic(*kind, *n_test, *noise, self.seed ^ 0x5eed_7e57)?,
            )),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit_train,
                limit_test,
                binarize,
            } => {
                let mut tr = load_idx_pair(train_images, train_labels, *limit_train)?;
                let mut te = load_idx_pair(test_images, test_labels, *limit_test)?;
                if let Some(b) = binarize {
                    tr = tr.binarized(*b);
                    te = te.binarized(*b);
                }
                Ok((tr, te))
            }
        }
    }
}
