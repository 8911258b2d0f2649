//! Model description, parameters and the stochastic forward pass.
//!
//! A layer computes `MAC → method element → bias → activation → mask`:
//!
//! * the MAC is a dense product or an im2col convolution, computed either
//!   with the tensor math or through programmed crossbars;
//! * binary layers multiply the MAC by `1/√fan_in`, and by `1/(1 − p)` when
//!   their input carries neuron or spatial dropout;
//! * the method element is scale modulation, inverted normalization, or a
//!   sampled posterior scale;
//! * hidden layers apply `sign` and then the neuron or spatial keep mask.
//!
//! Activations are stored channel-major: a conv output row holds `C` blocks
//! of `H·W` values.

use crate::binarize::{sign, DEFAULT_CLIP};
use crate::crossbar::{plan_conv_mapping, CrossbarConfig, MappedLayer, MappingPlan, MappingStrategy, ModuleAttachment, ReadLedger};
use crate::device::DropoutModuleState;
use crate::dropout::{adaptive_p, inverted_norm_node, InvertedNormState, NormMode};
use crate::error::{Error, Result};
use crate::nn::graph::{softmax_rows, softplus_inverse};
use crate::nn::{ConvGeometry, Graph, Parameter, Role, Tensor, Var};
use crate::rng::{domain, DrawCounts, Sampler};
use crate::vi::{build_bank, default_bank_range, kl_node, CrossbarBank, PriorSpec, ScalePosterior};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    SpinDrop,
    Spatial,
    ScaleDrop,
    Affine,
    ViSubset,
    SpinBayes,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SpinDrop,
        Method::Spatial,
        Method::ScaleDrop,
        Method::Affine,
        Method::ViSubset,
        Method::SpinBayes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SpinDrop => "spindrop",
            Method::Spatial => "spatial",
            Method::ScaleDrop => "scaledrop",
            Method::Affine => "affine",
            Method::ViSubset => "vi_subset",
            Method::SpinBayes => "spinbayes",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|m| *m == self).unwrap() as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Method::ViSubset | Method::SpinBayes)
    }

    /// Masks drawn on layer outputs.
    pub fn masks_outputs(self) -> bool {
        matches!(self, Method::SpinDrop | Method::Spatial)
    }

    /// Layers that carry the method by default.
    pub fn default_enabled(self, layer: usize, n_layers: usize) -> bool {
        match self {
            Method::SpinDrop | Method::Spatial | Method::Affine => layer + 1 < n_layers,
            Method::ScaleDrop | Method::ViSubset | Method::SpinBayes => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvGeometry),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub binary_weights: bool,
    /// Carries the model's Bayesian method.
    pub bayes: bool,
}

impl LayerSpec {
    pub fn in_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv(g) => g.in_len(),
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv(g) => g.out_channels,
        }
    }

    pub fn positions(&self) -> usize {
        match self.kind {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv(g) => g.positions(),
        }
    }

    pub fn out_len(&self) -> usize {
        self.channels() * self.positions()
    }

    /// Rows of the logical weight matrix.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv(g) => g.patch_len(),
        }
    }

    pub fn kernel(&self) -> usize {
        match self.kind {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv(g) => g.kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv(g) => g.in_channels,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.fan_in() * self.channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// `(C, H, W)` of one input; dense inputs use `(D, 1, 1)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub method: Method,
    /// Dropout probability (ignored by the variational methods).
    pub p: f64,
    /// `(p_min, p_max)` for layer-dependent probabilities.
    pub adaptive: Option<(f64, f64)>,
    pub clip: f64,
    /// Inputs take values in `{−1, 0, 1}`, so the first layer can run on a
    /// crossbar when its weights are binary.
    pub binary_input: bool,
    pub prior: PriorSpec,
    /// Initial posterior standard deviation.
    pub sigma_init: f64,
    /// Bank size and level count used for the crossbar bank.
    pub bank_instances: usize,
    pub bank_levels: usize,
}

impl ModelSpec {
    fn with_layers(input: (usize, usize, usize), layers: Vec<LayerSpec>, method: Method, p: f64) -> Self {
        let n = layers.len();
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, mut l)| {
                l.bayes = method.default_enabled(i, n);
                l
            })
            .collect();
        Self {
            input,
            layers,
            method,
            p,
            adaptive: None,
            clip: DEFAULT_CLIP,
            binary_input: false,
            prior: PriorSpec::default(),
            sigma_init: 0.05,
            bank_instances: 16,
            bank_levels: 15,
        }
    }

    /// Fully connected network; first and last layers keep real weights
    /// unless `binarize_first_last` is set.
    pub fn mlp(sizes: &[usize], method: Method, p: f64, binarize_first_last: bool) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config("model.layers", "need at least input and output sizes"));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                kind: LayerKind::Dense {
                    inputs: sizes[i],
                    outputs: sizes[i + 1],
                },
                binary_weights: binarize_first_last || (i > 0 && i + 1 < n),
                bayes: false,
            })
            .collect();
        let s = Self::with_layers((sizes[0], 1, 1), layers, method, p);
        s.validate()?;
        Ok(s)
    }

    /// Convolutions `(C_out, K, stride, padding)` followed by one dense
    /// classifier layer.
    pub fn cnn(
        input: (usize, usize, usize),
        convs: &[(usize, usize, usize, usize)],
        classes: usize,
        method: Method,
        p: f64,
        binarize_first_last: bool,
    ) -> Result<Self> {
        let (mut c, mut h, mut w) = input;
        let mut layers = Vec::new();
        let n = convs.len() + 1;
        for (i, &(co, k, s, pad)) in convs.iter().enumerate() {
            let g = ConvGeometry {
                in_channels: c,
                out_channels: co,
                in_h: h,
                in_w: w,
                kernel: k,
                stride: s,
                padding: pad,
            };
            g.validate()?;
            layers.push(LayerSpec {
                kind: LayerKind::Conv(g),
                binary_weights: binarize_first_last || i > 0,
                bayes: false,
            });
            (c, h, w) = (co, g.out_h(), g.out_w());
        }
        layers.push(LayerSpec {
            kind: LayerKind::Dense {
                inputs: c * h * w,
                outputs: classes,
            },
            binary_weights: binarize_first_last,
            bayes: false,
        });
        debug_assert_eq!(layers.len(), n);
        let s = Self::with_layers(input, layers, method, p);
        s.validate()?;
        Ok(s)
    }

    /// 1×28×28 binary input, three 3×3 stride-2 convolutions with 32, 64
    /// and 128 maps, and a 2048→10 classifier. All layers are binary.
    pub fn reference_cnn(method: Method, p: f64) -> Result<Self> {
        let mut s = Self::cnn((1, 28, 28), &[(32, 3, 2, 1), (64, 3, 2, 1), (128, 3, 2, 1)], 10, method, p, true)?;
        s.binary_input = true;
        Ok(s)
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("model.layers", "model has no layers"));
        }
        if self.layers[0].in_len() != self.input_len() {
            return Err(Error::dim("model input", self.input_len(), self.layers[0].in_len()));
        }
        for w in self.layers.windows(2) {
            if w[0].out_len() != w[1].in_len() {
                return Err(Error::dim("layer chaining", w[0].out_len(), w[1].in_len()));
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("method.p", format!("{} outside [0, 1]", self.p)));
        }
        if let Some((lo, hi)) = self.adaptive {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::config("method.adaptive", "need 0 <= p_min <= p_max <= 1"));
            }
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("method.clip", "must be positive"));
        }
        if !(self.sigma_init > 0.0) {
            return Err(Error::config("method.sigma_init", "must be positive"));
        }
        self.prior.validate()?;
        if self.bank_instances == 0 || self.bank_levels == 0 || self.bank_levels > 255 {
            return Err(Error::config("method.bank", "need M >= 1 and 1 <= L <= 255"));
        }
        Ok(())
    }

    /// Dropout probability of each layer.
    pub fn layer_probabilities(&self) -> Result<Vec<f64>> {
        let Some(sched) = self.adaptive else {
            return Ok(vec![self.p; self.layers.len()]);
        };
        let counts: Vec<usize> = self.layers.iter().map(LayerSpec::weight_count).collect();
        let lo = *counts.iter().min().unwrap();
        let hi = *counts.iter().max().unwrap();
        counts
            .iter()
            .map(|&c| if lo == hi { Ok(sched.0) } else { adaptive_p(c, sched, (lo, hi)) })
            .collect()
    }

    /// Layer `l` receives binary inputs and has binary weights.
    pub fn crossbar_eligible(&self, l: usize) -> bool {
        self.layers[l].binary_weights && (l > 0 || self.binary_input)
    }

    /// The input of layer `l` carries neuron or spatial keep masks.
    pub fn input_gated(&self, l: usize) -> bool {
        l > 0 && self.method.masks_outputs() && self.layers[l - 1].bayes
    }

    /// Physical dropout modules of layer `l`.
    pub fn layer_modules(&self, l: usize) -> usize {
        let ly = &self.layers[l];
        if !ly.bayes {
            return 0;
        }
        match self.method {
            Method::SpinDrop => ly.out_len(),
            Method::Spatial => ly.channels(),
            Method::ScaleDrop => 1,
            Method::Affine => 2,
            Method::ViSubset | Method::SpinBayes => 0,
        }
    }

    /// Crossbar plan of layer `l` (meaningful for eligible layers).
    pub fn plan(&self, l: usize, strategy: MappingStrategy, max_rows: usize, max_cols: usize) -> Result<MappingPlan> {
        let ly = &self.layers[l];
        let attachment = if self.input_gated(l) {
            match self.method {
                Method::SpinDrop => ModuleAttachment::PerRow,
                _ => ModuleAttachment::PerChannel,
            }
        } else if ly.bayes {
            match self.method {
                Method::ScaleDrop => ModuleAttachment::PerLayer,
                Method::Affine => ModuleAttachment::PerLayerAffine,
                _ => ModuleAttachment::None,
            }
        } else {
            ModuleAttachment::None
        };
        plan_conv_mapping(ly.kernel(), ly.fan_in() / (ly.kernel() * ly.kernel()), ly.channels(), strategy, max_rows, max_cols, attachment)
    }
}

/// Method-specific parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    None,
    /// Unconstrained `u` with scale `softplus(u)`.
    Scale(Parameter),
    Affine {
        gamma: Parameter,
        beta: Parameter,
        norm: InvertedNormState,
    },
    Posterior {
        mu: Parameter,
        rho: Parameter,
        bank: Option<CrossbarBank>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_in × C_out`; latent values for binary layers.
    pub weight: Parameter,
    pub bias: Parameter,
    pub element: Element,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
}

/// Random state of one layer for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerNoise {
    None,
    /// Keep mask over `N × out_len` as 0/1 values.
    Mask(Vec<f64>),
    /// Scale keep bit per row.
    Rows(Vec<bool>),
    /// `(γ, β)` keep bits per row.
    Affine(Vec<bool>, Vec<bool>),
    /// Standard-normal noise `N × C`.
    Gauss(Vec<f64>),
    /// Bank instance per row.
    Bank(Vec<usize>),
}

/// Event counters filled during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Instrument {
    pub draws: DrawCounts,
    pub reads: ReadLedger,
    pub scale_memory_reads: u64,
}

/// A model programmed onto crossbars, with realized module probabilities.
#[derive(Debug, Clone)]
pub struct DeviceModel {
    pub mapped: Vec<Option<MappedLayer>>,
    pub modules: Vec<Vec<DropoutModuleState>>,
}

#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    Ideal,
    Device(&'a DeviceModel),
}

pub struct Forward {
    pub logits: Var,
    /// One leaf per parameter, in [`Model::parameters_mut`] order.
    pub params: Vec<Var>,
    /// Positive scales of the scale-dropout layers.
    pub scales: Vec<Var>,
    /// Summed KL of the posterior layers.
    pub kl: Option<Var>,
}

fn uniform_tensor(shape: &[usize], bound: f64, sampler: &mut Sampler) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n).map(|_| sampler.rng().random_range(-bound..bound)).collect();
    Tensor::new(shape, d).expect("shape matches data")
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(l, ly)| {
                let mut s = Sampler::from_path(seed, &[domain::INIT, l as u64]);
                let c = ly.channels();
                let bound = 1.0 / (ly.fan_in() as f64).sqrt();
                let weight = Parameter::new(uniform_tensor(&[ly.fan_in(), c], bound, &mut s), Role::Weight);
                let bias = Parameter::new(Tensor::zeros(&[c]), Role::Bias);
                let element = if !ly.bayes {
                    Element::None
                } else {
                    match spec.method {
                        Method::SpinDrop | Method::Spatial => Element::None,
                        Method::ScaleDrop => Element::Scale(Parameter::new(Tensor::full(&[c], softplus_inverse(1.0)), Role::Scale)),
                        Method::Affine => Element::Affine {
                            gamma: Parameter::new(Tensor::ones(&[c]), Role::AffineGamma),
                            beta: Parameter::new(Tensor::zeros(&[c]), Role::AffineBeta),
                            norm: InvertedNormState::new(c),
                        },
                        Method::ViSubset | Method::SpinBayes => Element::Posterior {
                            mu: Parameter::new(Tensor::ones(&[c]), Role::PosteriorMu),
                            rho: Parameter::new(Tensor::full(&[c], softplus_inverse(spec.sigma_init)), Role::PosteriorSigma),
                            bank: None,
                        },
                    }
                };
                LayerParams { weight, bias, element }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            match &mut l.element {
                Element::None => {}
                Element::Scale(u) => out.push(u),
                Element::Affine { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                Element::Posterior { mu, rho, .. } => {
                    out.push(mu);
                    out.push(rho);
                }
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            match &l.element {
                Element::None => {}
                Element::Scale(u) => out.push(u),
                Element::Affine { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                Element::Posterior { mu, rho, .. } => {
                    out.push(mu);
                    out.push(rho);
                }
            }
        }
        out
    }

    /// Binary weights of layer `l` as a `fan_in × C_out` ±1 matrix.
    pub fn binary_weight(&self, l: usize) -> Tensor {
        self.layers[l].weight.value.map(sign)
    }

    /// Keeps latent binary weights inside the STE window.
    pub fn clip_latent(&mut self) {
        let clip = self.spec.clip;
        for (ly, p) in self.spec.layers.iter().zip(&mut self.layers) {
            if ly.binary_weights {
                p.weight.value.data_mut().iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
            }
        }
    }

    pub fn posterior(&self, l: usize) -> Option<ScalePosterior> {
        match &self.layers[l].element {
            Element::Posterior { mu, rho, .. } => Some(ScalePosterior {
                mu: mu.value.clone(),
                rho: rho.value.clone(),
            }),
            _ => None,
        }
    }

    /// Quantizes every posterior into a crossbar bank.
    pub fn build_banks(&mut self, seed: u64) -> Result<()> {
        let (m, levels) = (self.spec.bank_instances, self.spec.bank_levels);
        for l in 0..self.layers.len() {
            let Some(post) = self.posterior(l) else { continue };
            let mut s = Sampler::from_path(seed, &[domain::BANK, l as u64]);
            let b = build_bank(&post, m, levels, default_bank_range(&post), &mut s)?;
            if let Element::Posterior { bank, .. } = &mut self.layers[l].element {
                *bank = Some(b);
            }
        }
        Ok(())
    }

    pub fn has_banks(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(&l.element, Element::Posterior { bank: Some(_), .. }))
    }

    /// Nominal drop probability of every module of every layer.
    pub fn nominal_module_probs(&self) -> Result<Vec<Vec<f64>>> {
        let p = self.spec.layer_probabilities()?;
        Ok((0..self.layers.len())
            .map(|l| vec![p[l]; self.spec.layer_modules(l)])
            .collect())
    }

    /// Draws the noise of layer `l` for one row.
    fn draw_row(&self, l: usize, probs: &[f64], inference: bool, s: &mut Sampler, out: &mut RowNoise) {
        let ly = &self.spec.layers[l];
        if !ly.bayes {
            return;
        }
        match self.spec.method {
            Method::SpinDrop => {
                out.mask.extend(probs.iter().map(|&p| if s.bernoulli(p) { 0.0 } else { 1.0 }));
            }
            Method::Spatial => {
                let pos = ly.positions();
                for &p in probs {
                    let k = if s.bernoulli(p) { 0.0 } else { 1.0 };
                    out.mask.extend(std::iter::repeat_n(k, pos));
                }
            }
            Method::ScaleDrop => out.rows.push(!s.bernoulli(probs[0])),
            Method::Affine => {
                out.rows.push(!s.bernoulli(probs[0]));
                out.rows2.push(!s.bernoulli(probs[1]));
            }
            Method::ViSubset | Method::SpinBayes => {
                let bank = match &self.layers[l].element {
                    Element::Posterior { bank: Some(b), .. } if inference => Some(b),
                    _ => None,
                };
                match bank {
                    Some(b) => out.bank.push(s.categorical(b.len())),
                    None => out.gauss.extend((0..ly.channels()).map(|_| s.gaussian())),
                }
            }
        }
    }

    /// Noise of a batch, one sampler per `(row, layer)` from `key`.
    pub fn draw_noise(
        &self,
        rows: usize,
        probs: &[Vec<f64>],
        inference: bool,
        mut key: impl FnMut(usize, usize) -> Sampler,
        draws: &mut DrawCounts,
    ) -> Vec<LayerNoise> {
        (0..self.layers.len())
            .map(|l| {
                let mut acc = RowNoise::default();
                for r in 0..rows {
                    let mut s = key(r, l);
                    self.draw_row(l, &probs[l], inference, &mut s, &mut acc);
                    *draws += s.counts();
                }
                acc.finish(self.spec.method, self.spec.layers[l].bayes)
            })
            .collect()
    }

    /// Builds one forward pass. Parameters become gradient leaves when
    /// `train` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor,
        noise: &[LayerNoise],
        train: bool,
        backend: Backend<'_>,
        inst: &mut Instrument,
    ) -> Result<Forward> {
        let spec = &self.spec;
        if x.cols() != spec.input_len() {
            return Err(Error::dim("input features", spec.input_len(), x.cols()));
        }
        if noise.len() != self.layers.len() {
            return Err(Error::dim("noise layers", self.layers.len(), noise.len()));
        }
        let n = x.rows();
        let probs = spec.layer_probabilities()?;
        let mode = if train { NormMode::Train } else { NormMode::Infer };
        let leaf = |g: &mut Graph, t: &Tensor| if train { g.param(t.clone()) } else { g.constant(t.clone()) };
        let mut params = Vec::new();
        let mut scales = Vec::new();
        let mut kl: Option<Var> = None;
        let mut a = g.constant(x.clone());
        let mut gate: Option<Vec<bool>> = None;
        let last = self.layers.len() - 1;

        for (l, (ly, lp)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let c = ly.channels();
            let pos = ly.positions();
            let wv = leaf(g, &lp.weight.value);
            params.push(wv);
            let device = match backend {
                Backend::Device(d) => d.mapped.get(l).and_then(Option::as_ref),
                Backend::Ideal => None,
            };
            let mut z = match device {
                Some(m) => {
                    let xin = g.value(a).clone();
                    let mut out = Vec::with_capacity(n * ly.out_len());
                    for r in 0..n {
                        let act = gate.as_ref().map(|gm| &gm[r * ly.in_len()..(r + 1) * ly.in_len()]);
                        let y = match ly.kind {
                            LayerKind::Dense { .. } => m.mac(xin.row(r), act, &mut inst.reads)?,
                            LayerKind::Conv(geom) => m.conv(&geom, xin.row(r), act, &mut inst.reads)?,
                        };
                        out.extend(y);
                    }
                    g.constant(Tensor::new(&[n, ly.out_len()], out)?)
                }
                None => {
                    let w = if ly.binary_weights { g.sign_ste(wv, spec.clip) } else { wv };
                    match ly.kind {
                        LayerKind::Dense { .. } => g.matmul(a, w)?,
                        LayerKind::Conv(geom) => {
                            let cols = g.im2col(a, geom)?;
                            let y = g.matmul(cols, w)?;
                            g.rows_to_nchw(y, n, pos)?
                        }
                    }
                }
            };
            let mut k = 1.0;
            if ly.binary_weights {
                k /= (ly.fan_in() as f64).sqrt();
            }
            if spec.input_gated(l) && probs[l - 1] < 1.0 {
                k /= 1.0 - probs[l - 1];
            }
            if k != 1.0 {
                z = g.mul_const(z, k);
            }

            match (&lp.element, &noise[l]) {
                (Element::None, _) => {}
                (Element::Scale(u), LayerNoise::Rows(keep)) => {
                    let uv = leaf(g, &u.value);
                    params.push(uv);
                    let s = g.softplus(uv);
                    scales.push(s);
                    let sr = g.select_rows(s, keep.clone(), 1.0)?;
                    z = g.mul_row_channel(z, sr, pos)?;
                    inst.scale_memory_reads += (n * c * pos) as u64;
                }
                (Element::Affine { gamma, beta, norm }, LayerNoise::Affine(kg, kb)) => {
                    let gv = leaf(g, &gamma.value);
                    let bv = leaf(g, &beta.value);
                    params.push(gv);
                    params.push(bv);
                    z = inverted_norm_node(g, z, gv, bv, kg.clone(), kb.clone(), pos, norm, mode)?;
                    inst.scale_memory_reads += (2 * n * c * pos) as u64;
                }
                (Element::Posterior { mu, rho, bank }, nz) => {
                    let mv = leaf(g, &mu.value);
                    let rv = leaf(g, &rho.value);
                    params.push(mv);
                    params.push(rv);
                    let sr = match nz {
                        LayerNoise::Gauss(eps) => {
                            let sigma = g.softplus(rv);
                            if train {
                                let term = kl_node(g, mv, sigma, spec.prior);
                                kl = Some(match kl {
                                    Some(k) => g.add(k, term)?,
                                    None => term,
                                });
                            }
                            inst.scale_memory_reads += (2 * n * c) as u64;
                            g.reparam(mv, sigma, eps.clone())?
                        }
                        LayerNoise::Bank(sel) => {
                            let b = bank.as_ref().ok_or_else(|| Error::domain("bank noise without a bank"))?;
                            let mut d = Vec::with_capacity(n * c);
                            for &k in sel {
                                d.extend(b.instance_values(k));
                            }
                            g.constant(Tensor::new(&[n, c], d)?)
                        }
                        _ => return Err(Error::domain(format!("layer {l}: noise does not match the method"))),
                    };
                    if device.is_some() {
                        // The scale crossbar is read once per output position.
                        inst.reads.crossbar_reads += (n * pos) as u64;
                        inst.reads.wordline_activations += (n * pos) as u64;
                        inst.reads.adc_conversions += (n * pos * c) as u64;
                    }
                    z = g.mul_row_channel(z, sr, pos)?;
                }
                _ => return Err(Error::domain(format!("layer {l}: noise does not match the method"))),
            }

            let bv = leaf(g, &lp.bias.value);
            params.push(bv);
            z = g.add_channel(z, bv, pos)?;

            gate = None;
            if l < last {
                z = g.sign_ste(z, spec.clip);
                if let LayerNoise::Mask(m) = &noise[l] {
                    gate = Some(m.iter().map(|&v| v != 0.0).collect());
                    z = g.mul_mask(z, m.clone())?;
                }
            }
            a = z;
        }
        // Leaf order above is weight, element, bias; reorder to weight,
        // bias, element.
        let mut ordered = Vec::with_capacity(params.len());
        let mut i = 0;
        for lp in &self.layers {
            let extra = match lp.element {
                Element::None => 0,
                Element::Scale(_) => 1,
                Element::Affine { .. } | Element::Posterior { .. } => 2,
            };
            ordered.push(params[i]);
            ordered.push(params[i + 1 + extra]);
            ordered.extend_from_slice(&params[i + 1..i + 1 + extra]);
            i += 2 + extra;
        }
        Ok(Forward {
            logits: a,
            params: ordered,
            scales,
            kl,
        })
    }

    /// Running statistics of the affine layers, updated from a training
    /// graph.
    pub fn update_norm_stats(&mut self, g: &Graph) {
        let mut stats = g.batch_stats();
        for lp in &mut self.layers {
            if let Element::Affine { norm, .. } = &mut lp.element {
                if let Some(s) = stats.next() {
                    norm.update_running(&s.mean, &s.var);
                }
            }
        }
    }

    /// Programs every eligible layer and instantiates the dropout modules.
    pub fn to_device(&self, xcfg: &CrossbarConfig, strategy: MappingStrategy, sigma_p: f64, seed: u64) -> Result<DeviceModel> {
        xcfg.validate()?;
        let probs = self.nominal_module_probs()?;
        let mut mapped = Vec::new();
        let mut modules = Vec::new();
        for l in 0..self.layers.len() {
            let m = if self.spec.crossbar_eligible(l) {
                let plan = self.spec.plan(l, strategy, xcfg.max_rows, xcfg.max_cols)?;
                let mut s = Sampler::from_path(seed, &[domain::DEVICE, 0, l as u64]);
                Some(MappedLayer::program(plan, &self.binary_weight(l), xcfg, &mut s)?)
            } else {
                None
            };
            mapped.push(m);
            let mut s = Sampler::from_path(seed, &[domain::DEVICE, 1, l as u64]);
            modules.push(
                probs[l]
                    .iter()
                    .map(|&p| DropoutModuleState::instantiate(p, sigma_p, &mut s))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(DeviceModel { mapped, modules })
    }

    /// `T` stochastic passes over `x`; the draws of sample `ids[r]` in pass
    /// `t` come from the stream `(seed, EVAL, ids[r], t, layer)`. Returns the
    /// softmax outputs of every pass.
    pub fn mc_forward(
        &self,
        x: &Tensor,
        ids: &[u64],
        passes: usize,
        seed: u64,
        backend: Backend<'_>,
        inst: &mut Instrument,
    ) -> Result<Vec<Tensor>> {
        if passes == 0 {
            return Err(Error::domain("MC pass count must be at least 1"));
        }
        if ids.len() != x.rows() {
            return Err(Error::dim("sample ids", x.rows(), ids.len()));
        }
        let probs = match backend {
            Backend::Ideal => self.nominal_module_probs()?,
            Backend::Device(d) => d
                .modules
                .iter()
                .map(|ms| ms.iter().map(|m| m.realized_p).collect())
                .collect(),
        };
        let c = self.spec.classes();
        (0..passes)
            .map(|t| {
                let noise = self.draw_noise(
                    x.rows(),
                    &probs,
                    true,
                    |r, l| Sampler::from_path(seed, &[domain::EVAL, ids[r], t as u64, l as u64]),
                    &mut inst.draws,
                );
                let mut g = Graph::new();
                let f = self.forward(&mut g, x, &noise, false, backend, inst)?;
                let logits = g.value(f.logits);
                Tensor::new(&[x.rows(), c], softmax_rows(logits.data(), c))
            })
            .collect()
    }
}

#[derive(Default)]
struct RowNoise {
    mask: Vec<f64>,
    rows: Vec<bool>,
    rows2: Vec<bool>,
    gauss: Vec<f64>,
    bank: Vec<usize>,
}

impl RowNoise {
    fn finish(self, method: Method, bayes: bool) -> LayerNoise {
        if !bayes {
            return LayerNoise::None;
        }
        match method {
            Method::SpinDrop | Method::Spatial => LayerNoise::Mask(self.mask),
            Method::ScaleDrop => LayerNoise::Rows(self.rows),
            Method::Affine => LayerNoise::Affine(self.rows, self.rows2),
            Method::ViSubset | Method::SpinBayes => {
                if self.bank.is_empty() {
                    LayerNoise::Gauss(self.gauss)
                } else {
                    LayerNoise::Bank(self.bank)
                }
            }
        }
    }
}
