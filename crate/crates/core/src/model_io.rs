//! SLIF model container: magic `SLIF`, a little-endian u32 format version,
//! a length-prefixed UTF-8 header of `key=value` lines describing layers
//! and metadata, then every tensor as little-endian f32, row-major, in
//! layer order. Static and spiking networks share the container; a `kind`
//! key and per-layer tags distinguish them.
//!
//! Tensors are stored in f32; models keep their parameters on the f32 grid
//! (initialization snaps to it, loading widens exactly), so a round trip
//! reproduces the file byte for byte. A model carrying mid-training f64
//! values quantizes once on its first save.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use crate::converter::{SpikingNetwork, SpikingStage};
use crate::error::Error;
use crate::network::{ConvConfig, Layer, ModelMeta, NetworkModel, PoolConfig, Shape};
use crate::neuron::{LifParams, SoftLifConfig};
use crate::Result;

const MAGIC: &[u8; 4] = b"SLIF";
const VERSION: u32 = 1;

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_spiking(net: &SpikingNetwork, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_spiking(net)?)?;
    Ok(())
}

pub fn load_spiking(path: impl AsRef<Path>) -> Result<SpikingNetwork> {
    decode_spiking(&std::fs::read(path)?)
}

pub fn encode_model(model: &NetworkModel) -> Result<Vec<u8>> {
    let mut header = String::new();
    push_kv(&mut header, "kind", "static")?;
    push_common(&mut header, &model.input_shape, &model.meta)?;
    push_kv(&mut header, "layers", model.layers.len())?;
    let mut tensors: Vec<&dyn Tensor> = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let key = format!("layer.{i}");
        match layer {
            Layer::Dense { w } => {
                push_kv(&mut header, &key, format_args!("dense {} {}", w.nrows(), w.ncols()))?;
                tensors.push(w);
            }
            Layer::Conv2d { cfg, w } => {
                push_kv(&mut header, &key, format_conv(cfg))?;
                tensors.push(w);
            }
            Layer::AvgPool2d { cfg } => {
                push_kv(
                    &mut header,
                    &key,
                    format_args!("avgpool2d {} {} {}", cfg.ph, cfg.pw, cfg.stride),
                )?;
            }
            Layer::SoftLif { lif, cfg, gain, bias } => {
                push_kv(
                    &mut header,
                    &key,
                    format_args!(
                        "softlif {} {} {} {} {} {}",
                        bias.len(),
                        cfg.gamma,
                        cfg.sigma,
                        lif.tau_rc,
                        lif.tau_ref,
                        lif.v_th
                    ),
                )?;
                tensors.push(gain);
                tensors.push(bias);
            }
            Layer::Softmax { w, b } => {
                push_kv(&mut header, &key, format_args!("softmax {} {}", w.nrows(), w.ncols()))?;
                tensors.push(w);
                tensors.push(b);
            }
        }
    }
    Ok(assemble(&header, &tensors))
}

pub fn decode_model(bytes: &[u8]) -> Result<NetworkModel> {
    let (fields, payload) = split_container(bytes)?;
    require_kind(&fields, "static")?;
    let (input_shape, meta) = parse_common(&fields)?;
    let n_layers: usize = field(&fields, "layers")?;
    let mut reader = TensorReader::new(payload);
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let spec = field_str(&fields, &format!("layer.{i}"))?;
        let mut toks = spec.split_ascii_whitespace();
        let tag = toks.next().unwrap_or("");
        let layer = match tag {
            "dense" => {
                let [out, inp] = take_nums(&mut toks, spec)?;
                Layer::Dense { w: reader.array2(out, inp, i, tag)? }
            }
            "conv2d" => {
                let cfg = parse_conv(&mut toks, spec)?;
                Layer::Conv2d {
                    cfg,
                    w: reader.array2(cfg.out_c, cfg.in_c * cfg.kh * cfg.kw, i, tag)?,
                }
            }
            "avgpool2d" => {
                let [ph, pw, stride] = take_nums(&mut toks, spec)?;
                Layer::AvgPool2d { cfg: PoolConfig { ph, pw, stride } }
            }
            "softlif" => {
                let n: usize = take_num(&mut toks, spec)?;
                let [gamma, sigma, tau_rc, tau_ref, v_th] = take_nums(&mut toks, spec)?;
                Layer::SoftLif {
                    lif: LifParams { tau_rc, tau_ref, v_th },
                    cfg: SoftLifConfig { gamma, sigma },
                    gain: reader.array1(n, i, tag)?,
                    bias: reader.array1(n, i, tag)?,
                }
            }
            "softmax" => {
                let [classes, inp] = take_nums(&mut toks, spec)?;
                Layer::Softmax {
                    w: reader.array2(classes, inp, i, tag)?,
                    b: reader.array1(classes, i, tag)?,
                }
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown layer tag {other:?} in a static model file"
                )))
            }
        };
        if toks.next().is_some() {
            return Err(Error::Format(format!("trailing tokens in layer spec {spec:?}")));
        }
        layers.push(layer);
    }
    reader.finish()?;
    let model = NetworkModel { input_shape, layers, meta };
    let violations = crate::network::validate(&model);
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations.join("; ")));
    }
    Ok(model)
}

pub fn encode_spiking(net: &SpikingNetwork) -> Result<Vec<u8>> {
    let mut header = String::new();
    push_kv(&mut header, "kind", "spiking")?;
    push_common(&mut header, &net.input_shape, &net.meta)?;
    push_kv(&mut header, "tau_s", net.tau_s)?;
    push_kv(&mut header, "layers", net.stages.len())?;
    let mut tensors: Vec<&dyn Tensor> = Vec::new();
    for (i, stage) in net.stages.iter().enumerate() {
        let key = format!("layer.{i}");
        match stage {
            SpikingStage::Dense { w } => {
                push_kv(&mut header, &key, format_args!("dense {} {}", w.nrows(), w.ncols()))?;
                tensors.push(w);
            }
            SpikingStage::Conv2d { cfg, w } => {
                push_kv(&mut header, &key, format_conv(cfg))?;
                tensors.push(w);
            }
            SpikingStage::AvgPool2d { cfg } => {
                push_kv(
                    &mut header,
                    &key,
                    format_args!("avgpool2d {} {} {}", cfg.ph, cfg.pw, cfg.stride),
                )?;
            }
            SpikingStage::Lif { lif, gain, bias } => {
                push_kv(
                    &mut header,
                    &key,
                    format_args!(
                        "lif {} {} {} {}",
                        bias.len(),
                        lif.tau_rc,
                        lif.tau_ref,
                        lif.v_th
                    ),
                )?;
                tensors.push(gain);
                tensors.push(bias);
            }
            SpikingStage::Readout { w, b } => {
                push_kv(&mut header, &key, format_args!("readout {} {}", w.nrows(), w.ncols()))?;
                tensors.push(w);
                tensors.push(b);
            }
        }
    }
    Ok(assemble(&header, &tensors))
}

pub fn decode_spiking(bytes: &[u8]) -> Result<SpikingNetwork> {
    let (fields, payload) = split_container(bytes)?;
    require_kind(&fields, "spiking")?;
    let (input_shape, meta) = parse_common(&fields)?;
    let tau_s: f64 = field(&fields, "tau_s")?;
    let n_layers: usize = field(&fields, "layers")?;
    let mut reader = TensorReader::new(payload);
    let mut stages = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let spec = field_str(&fields, &format!("layer.{i}"))?;
        let mut toks = spec.split_ascii_whitespace();
        let tag = toks.next().unwrap_or("");
        let stage = match tag {
            "dense" => {
                let [out, inp] = take_nums(&mut toks, spec)?;
                SpikingStage::Dense { w: reader.array2(out, inp, i, tag)? }
            }
            "conv2d" => {
                let cfg = parse_conv(&mut toks, spec)?;
                SpikingStage::Conv2d {
                    cfg,
                    w: reader.array2(cfg.out_c, cfg.in_c * cfg.kh * cfg.kw, i, tag)?,
                }
            }
            "avgpool2d" => {
                let [ph, pw, stride] = take_nums(&mut toks, spec)?;
                SpikingStage::AvgPool2d { cfg: PoolConfig { ph, pw, stride } }
            }
            "lif" => {
                let n: usize = take_num(&mut toks, spec)?;
                let [tau_rc, tau_ref, v_th] = take_nums(&mut toks, spec)?;
                SpikingStage::Lif {
                    lif: LifParams { tau_rc, tau_ref, v_th },
                    gain: reader.array1(n, i, tag)?,
                    bias: reader.array1(n, i, tag)?,
                }
            }
            "readout" => {
                let [classes, inp] = take_nums(&mut toks, spec)?;
                SpikingStage::Readout {
                    w: reader.array2(classes, inp, i, tag)?,
                    b: reader.array1(classes, i, tag)?,
                }
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown layer tag {other:?} in a spiking model file"
                )))
            }
        };
        if toks.next().is_some() {
            return Err(Error::Format(format!("trailing tokens in layer spec {spec:?}")));
        }
        stages.push(stage);
    }
    reader.finish()?;
    let net = SpikingNetwork { input_shape, stages, tau_s, meta };
    let violations = net.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations.join("; ")));
    }
    Ok(net)
}

trait Tensor {
    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_>;
    fn len(&self) -> usize;
}

impl Tensor for Array2<f64> {
    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.iter().copied())
    }
    fn len(&self) -> usize {
        Array2::len(self)
    }
}

impl Tensor for Array1<f64> {
    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.iter().copied())
    }
    fn len(&self) -> usize {
        Array1::len(self)
    }
}

fn assemble(header: &str, tensors: &[&dyn Tensor]) -> Vec<u8> {
    let floats: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in tensors {
        for v in t.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn push_kv(header: &mut String, key: &str, value: impl std::fmt::Display) -> Result<()> {
    let rendered = value.to_string();
    if rendered.contains('\n') {
        return Err(Error::Format(format!("header value for {key:?} contains a newline")));
    }
    writeln!(header, "{key}={rendered}").expect("string write");
    Ok(())
}

fn push_common(header: &mut String, shape: &Shape, meta: &ModelMeta) -> Result<()> {
    match shape {
        Shape::Flat(n) => push_kv(header, "input", format_args!("flat {n}"))?,
        Shape::Image { c, h, w } => push_kv(header, "input", format_args!("image {c} {h} {w}"))?,
    }
    push_kv(header, "arch", &meta.arch)?;
    push_kv(header, "dataset", &meta.dataset)?;
    push_kv(header, "gamma", meta.gamma)?;
    push_kv(header, "sigma", meta.sigma)?;
    push_kv(header, "seed", meta.seed)?;
    push_kv(header, "epochs", meta.epochs)?;
    push_kv(header, "input_mean", meta.input_mean)?;
    Ok(())
}

fn format_conv(cfg: &ConvConfig) -> String {
    format!(
        "conv2d {} {} {} {} {} {}",
        cfg.in_c, cfg.out_c, cfg.kh, cfg.kw, cfg.stride, cfg.pad
    )
}

fn parse_conv<'a>(
    toks: &mut impl Iterator<Item = &'a str>,
    spec: &str,
) -> Result<ConvConfig> {
    let [in_c, out_c, kh, kw, stride, pad] = take_nums(toks, spec)?;
    Ok(ConvConfig { in_c, out_c, kh, kw, stride, pad })
}

type Fields = Vec<(String, String)>;

fn split_container(bytes: &[u8]) -> Result<(Fields, &[u8])> {
    if bytes.len() < 12 {
        return Err(Error::Format("file too short for an SLIF container".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: not an SLIF model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (this build reads version {VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let Some(header_bytes) = bytes.get(12..12 + header_len) else {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    };
    let header = std::str::from_utf8(header_bytes)
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let mut fields = Fields::new();
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!("malformed header line {line:?}")));
        };
        fields.push((k.to_string(), v.to_string()));
    }
    Ok((fields, &bytes[12 + header_len..]))
}

fn field_str<'a>(fields: &'a Fields, key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("missing header key {key:?}")))
}

fn field<T: FromStr>(fields: &Fields, key: &str) -> Result<T> {
    let raw = field_str(fields, key)?;
    raw.parse()
        .map_err(|_| Error::Format(format!("header key {key:?} has unparseable value {raw:?}")))
}

fn require_kind(fields: &Fields, expected: &str) -> Result<()> {
    let kind = field_str(fields, "kind")?;
    if kind != expected {
        return Err(Error::Format(format!(
            "file holds a {kind} network, expected {expected}"
        )));
    }
    Ok(())
}

fn parse_common(fields: &Fields) -> Result<(Shape, ModelMeta)> {
    let input = field_str(fields, "input")?;
    let mut toks = input.split_ascii_whitespace();
    let shape = match toks.next() {
        Some("flat") => Shape::Flat(take_num(&mut toks, input)?),
        Some("image") => {
            let [c, h, w] = take_nums(&mut toks, input)?;
            Shape::Image { c, h, w }
        }
        _ => return Err(Error::Format(format!("malformed input shape {input:?}"))),
    };
    if toks.next().is_some() {
        return Err(Error::Format(format!("malformed input shape {input:?}")));
    }
    let meta = ModelMeta {
        arch: field_str(fields, "arch")?.to_string(),
        dataset: field_str(fields, "dataset")?.to_string(),
        gamma: field(fields, "gamma")?,
        sigma: field(fields, "sigma")?,
        seed: field(fields, "seed")?,
        epochs: field(fields, "epochs")?,
        input_mean: field(fields, "input_mean")?,
    };
    Ok((shape, meta))
}

fn take_num<'a, T: FromStr>(toks: &mut impl Iterator<Item = &'a str>, spec: &str) -> Result<T> {
    toks.next()
        .ok_or_else(|| Error::Format(format!("layer spec {spec:?} is missing fields")))?
        .parse()
        .map_err(|_| Error::Format(format!("layer spec {spec:?} has an unparseable field")))
}

fn take_nums<'a, T: FromStr + Copy + Default, const N: usize>(
    toks: &mut impl Iterator<Item = &'a str>,
    spec: &str,
) -> Result<[T; N]> {
    let mut out = [T::default(); N];
    for slot in &mut out {
        *slot = take_num(toks, spec)?;
    }
    Ok(out)
}

struct TensorReader<'a> {
    payload: &'a [u8],
    pos: usize,
}

impl<'a> TensorReader<'a> {
    fn new(payload: &'a [u8]) -> Self {
        Self { payload, pos: 0 }
    }

    fn take(&mut self, n: usize, layer: usize, tag: &str) -> Result<Vec<f64>> {
        let bytes = n * 4;
        let Some(chunk) = self.payload.get(self.pos..self.pos + bytes) else {
            return Err(Error::Format(format!(
                "tensor payload truncated at layer {layer} ({tag}): needs {n} floats, {} bytes left",
                self.payload.len() - self.pos
            )));
        };
        self.pos += bytes;
        Ok(chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    fn array1(&mut self, n: usize, layer: usize, tag: &str) -> Result<Array1<f64>> {
        Ok(Array1::from_vec(self.take(n, layer, tag)?))
    }

    fn array2(&mut self, rows: usize, cols: usize, layer: usize, tag: &str) -> Result<Array2<f64>> {
        let data = self.take(rows.checked_mul(cols).ok_or_else(|| {
            Error::Format(format!("tensor shape {rows}x{cols} overflows at layer {layer} ({tag})"))
        })?, layer, tag)?;
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Format(format!("tensor shape error at layer {layer} ({tag}): {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.payload.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                self.payload.len() - self.pos
            )));
        }
        Ok(())
    }
}
