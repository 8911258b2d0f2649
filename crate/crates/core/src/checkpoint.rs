//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NSPN" | version: u8 | section*
//! section = tag: u8 | length: u64 | payload[length]
//! ```
//!
//! Sections: 1 architecture, 2 parameters, 3 normalization state,
//! 4 crossbar banks, 5 seed. Unknown tags are skipped on load.

use std::path::Path;

use crate::dropout::InvertedNormState;
use crate::error::{Error, Result};
use crate::model::{Element, LayerKind, LayerSpec, Method, Model, ModelSpec};
use crate::nn::{ConvGeometry, Parameter, Role, Tensor};
use crate::vi::{CrossbarBank, PriorSpec};

pub const MAGIC: &[u8; 4] = b"NSPN";
pub const VERSION: u8 = 1;

const SEC_SPEC: u8 = 1;
const SEC_PARAMS: u8 = 2;
const SEC_NORM: u8 = 3;
const SEC_BANK: u8 = 4;
const SEC_SEED: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Seed of the run that produced the model.
    pub seed: u64,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.shape().len() as u8);
        t.shape().iter().for_each(|&d| self.u32(d));
        t.data().iter().for_each(|&v| self.f64(v));
    }
    fn section(&mut self, tag: u8, body: Writer) {
        self.u8(tag);
        self.u64(body.0.len() as u64);
        self.0.extend(body.0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(format!("expected {n} more bytes, {} left", self.bytes.len() - self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.err(format!("bad flag byte {b}"))),
        }
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u8()? as usize;
        let shape: Vec<usize> = (0..nd).map(|_| self.u32()).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(self.err(format!("tensor of {n} values exceeds the section")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        Tensor::new(&shape, data)
    }
}

fn write_spec(s: &ModelSpec) -> Writer {
    let mut w = Writer::default();
    w.u8(s.method.tag());
    w.f64(s.p);
    match s.adaptive {
        Some((lo, hi)) => {
            w.u8(1);
            w.f64(lo);
            w.f64(hi);
        }
        None => w.u8(0),
    }
    w.f64(s.clip);
    w.u8(s.binary_input as u8);
    w.f64(s.prior.mu0);
    w.f64(s.prior.sigma0);
    w.f64(s.sigma_init);
    w.u32(s.bank_instances);
    w.u32(s.bank_levels);
    w.u32(s.input.0);
    w.u32(s.input.1);
    w.u32(s.input.2);
    w.u32(s.layers.len());
    for l in &s.layers {
        match l.kind {
            LayerKind::Dense { inputs, outputs } => {
                w.u8(0);
                w.u32(inputs);
                w.u32(outputs);
            }
            LayerKind::Conv(g) => {
                w.u8(1);
                for v in [g.in_channels, g.out_channels, g.in_h, g.in_w, g.kernel, g.stride, g.padding] {
                    w.u32(v);
                }
            }
        }
        w.u8(l.binary_weights as u8);
        w.u8(l.bayes as u8);
    }
    w
}

fn read_spec(r: &mut Reader) -> Result<ModelSpec> {
    let tag = r.u8()?;
    let method = Method::from_tag(tag).ok_or_else(|| r.err(format!("unknown method tag {tag}")))?;
    let p = r.f64()?;
    let adaptive = if r.bool()? { Some((r.f64()?, r.f64()?)) } else { None };
    let clip = r.f64()?;
    let binary_input = r.bool()?;
    let prior = PriorSpec {
        mu0: r.f64()?,
        sigma0: r.f64()?,
    };
    let sigma_init = r.f64()?;
    let bank_instances = r.u32()?;
    let bank_levels = r.u32()?;
    let input = (r.u32()?, r.u32()?, r.u32()?);
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let kind = match r.u8()? {
            0 => LayerKind::Dense {
                inputs: r.u32()?,
                outputs: r.u32()?,
            },
            1 => LayerKind::Conv(ConvGeometry {
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                in_h: r.u32()?,
                in_w: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                padding: r.u32()?,
            }),
            k => return Err(r.err(format!("unknown layer kind {k}"))),
        };
        layers.push(LayerSpec {
            kind,
            binary_weights: r.bool()?,
            bayes: r.bool()?,
        });
    }
    let spec = ModelSpec {
        input,
        layers,
        method,
        p,
        adaptive,
        clip,
        binary_input,
        prior,
        sigma_init,
        bank_instances,
        bank_levels,
    };
    spec.validate()?;
    Ok(spec)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Writer::default();
        out.0.extend(MAGIC);
        out.u8(VERSION);
        out.section(SEC_SPEC, write_spec(&m.spec));

        let mut w = Writer::default();
        let params: Vec<(usize, &Parameter)> = m
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, lp)| {
                let mut v = vec![(l, &lp.weight), (l, &lp.bias)];
                match &lp.element {
                    Element::None => {}
                    Element::Scale(u) => v.push((l, u)),
                    Element::Affine { gamma, beta, .. } => v.extend([(l, gamma), (l, beta)]),
                    Element::Posterior { mu, rho, .. } => v.extend([(l, mu), (l, rho)]),
                }
                v
            })
            .collect();
        w.u32(params.len());
        for (l, p) in params {
            w.u32(l);
            w.u8(p.role.tag());
            w.tensor(&p.value);
        }
        out.section(SEC_PARAMS, w);

        let mut w = Writer::default();
        for (l, lp) in m.layers.iter().enumerate() {
            if let Element::Affine { norm, .. } = &lp.element {
                w.u32(l);
                for t in [&norm.gamma, &norm.beta, &norm.running_mean, &norm.running_var] {
                    w.tensor(t);
                }
                w.f64(norm.eps);
                w.f64(norm.momentum);
            }
        }
        out.section(SEC_NORM, w);

        let mut w = Writer::default();
        for (l, lp) in m.layers.iter().enumerate() {
            if let Element::Posterior { bank: Some(b), .. } = &lp.element {
                w.u32(l);
                w.u32(b.len());
                w.u32(b.channels());
                w.u32(b.levels);
                w.f64(b.range.0);
                w.f64(b.range.1);
                for inst in &b.instances {
                    inst.iter().for_each(|&k| w.u8(k as u8));
                }
            }
        }
        out.section(SEC_BANK, w);

        let mut w = Writer::default();
        w.u64(self.seed);
        out.section(SEC_SEED, w);
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, expected NSPN".into(),
            });
        }
        let v = r.u8()?;
        if v != VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported version {v}"),
            });
        }
        let mut model: Option<Model> = None;
        let mut seed = None;
        while r.pos < bytes.len() {
            let tag = r.u8()?;
            let len = r.u64()? as usize;
            let start = r.pos;
            let body = r.take(len)?;
            let mut s = Reader { bytes: body, pos: 0 };
            let fail = |e: Error| match e {
                Error::Parse { offset, message } => Error::Parse {
                    offset: start + offset,
                    message,
                },
                e => e,
            };
            let no_model = || Error::Parse {
                offset: start,
                message: "section precedes the architecture".into(),
            };
            match tag {
                SEC_SPEC => {
                    let spec = read_spec(&mut s).map_err(fail)?;
                    model = Some(Model::init(spec, 0)?);
                }
                SEC_PARAMS => {
                    let m = model.as_mut().ok_or_else(no_model)?;
                    read_params(&mut s, m).map_err(fail)?;
                }
                SEC_NORM => {
                    let m = model.as_mut().ok_or_else(no_model)?;
                    read_norm(&mut s, m).map_err(fail)?;
                }
                SEC_BANK => {
                    let m = model.as_mut().ok_or_else(no_model)?;
                    read_banks(&mut s, m).map_err(fail)?;
                }
                SEC_SEED => seed = Some(s.u64().map_err(fail)?),
                _ => {}
            }
        }
        let model = model.ok_or_else(|| r.err("missing architecture section"))?;
        let seed = seed.ok_or_else(|| r.err("missing seed section"))?;
        Ok(Self { model, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_params(r: &mut Reader, m: &mut Model) -> Result<()> {
    let n = r.u32()?;
    let mut slots = m.parameters_mut();
    if n != slots.len() {
        return Err(r.err(format!("expected {} parameters, found {n}", slots.len())));
    }
    for slot in slots.iter_mut() {
        let _layer = r.u32()?;
        let tag = r.u8()?;
        let role = Role::from_tag(tag).ok_or_else(|| r.err(format!("unknown role tag {tag}")))?;
        if role != slot.role {
            return Err(r.err(format!("expected role {:?}, found {role:?}", slot.role)));
        }
        let t = r.tensor()?;
        if t.shape() != slot.value.shape() {
            return Err(r.err(format!("parameter shape {:?} does not match {:?}", t.shape(), slot.value.shape())));
        }
        slot.value = t;
    }
    Ok(())
}

fn layer_index(r: &mut Reader, m: &Model) -> Result<usize> {
    let l = r.u32()?;
    if l >= m.layers.len() {
        return Err(r.err(format!("layer {l} out of range")));
    }
    Ok(l)
}

fn read_norm(r: &mut Reader, m: &mut Model) -> Result<()> {
    while r.pos < r.bytes.len() {
        let l = layer_index(r, m)?;
        let mut st = InvertedNormState {
            gamma: r.tensor()?,
            beta: r.tensor()?,
            running_mean: r.tensor()?,
            running_var: r.tensor()?,
            eps: 0.0,
            momentum: 0.0,
        };
        st.eps = r.f64()?;
        st.momentum = r.f64()?;
        match &mut m.layers[l].element {
            Element::Affine { norm, .. } if norm.channels() == st.running_mean.len() => *norm = st,
            _ => return Err(r.err(format!("layer {l} has no matching normalization"))),
        }
    }
    Ok(())
}

fn read_banks(r: &mut Reader, m: &mut Model) -> Result<()> {
    while r.pos < r.bytes.len() {
        let l = layer_index(r, m)?;
        let (count, c, levels) = (r.u32()?, r.u32()?, r.u32()?);
        let range = (r.f64()?, r.f64()?);
        let raw = r.take(count.saturating_mul(c))?;
        if raw.iter().any(|&k| k as usize >= levels) {
            return Err(r.err("bank level index out of range"));
        }
        let instances = raw.chunks(c.max(1)).map(|ch| ch.iter().map(|&k| k as u16).collect()).collect();
        let b = CrossbarBank { instances, levels, range };
        match &mut m.layers[l].element {
            Element::Posterior { mu, bank, .. } if mu.value.len() == c => *bank = Some(b),
            _ => return Err(r.err(format!("layer {l} has no matching posterior"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_like(method: Method) -> Model {
        let spec = ModelSpec::cnn((1, 6, 6), &[(3, 3, 2, 1)], 2, method, 0.25, false).unwrap();
        let mut m = Model::init(spec, 5).unwrap();
        for p in m.parameters_mut() {
            p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * i as f64);
        }
        if method == Method::SpinBayes {
            m.build_banks(3).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_every_method() {
        for method in Method::ALL {
            let ck = Checkpoint {
                model: trained_like(method),
                seed: 99,
            };
            let bytes = ck.to_bytes();
            assert_eq!(&bytes[..4], MAGIC);
            assert_eq!(bytes[4], VERSION);
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck, "{method:?}");
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = Checkpoint {
            model: trained_like(Method::Affine),
            seed: 1,
        }
        .to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NSPX\x01"), Err(Error::Parse { offset: 0, .. })));
        for cut in [3, 5, 20, bytes.len() - 3] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(Checkpoint::from_bytes(&v).is_err());
    }
}
