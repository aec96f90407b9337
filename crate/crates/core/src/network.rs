//! Static feedforward network: layer graph, batched forward pass, and
//! training-noise injection on suprathreshold activations.
//!
//! Batches are `Array2<f64>` with one example per row. Image-shaped data is
//! flattened channel-major: element `(c, y, x)` lives at `(c*h + y)*w + x`.

use ndarray::{Array1, Array2};
use rand::distributions::Uniform;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::neuron::{soft_lif_rate, LifParams, SoftLifConfig, ACTIVATION_SCALE};
use crate::rng::substream;
use crate::Result;

/// Logical shape of the tensor flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { c: usize, h: usize, w: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { c, h, w } => c * h * w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub ph: usize,
    pub pw: usize,
    pub stride: usize,
}

/// One stage of the network. Linear stages own their weights; the
/// activation owns a fixed per-neuron input gain and a trainable bias.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `w` is `[out, in]`; biases live in the following activation.
    Dense { w: Array2<f64> },
    /// `w` is `[out_c, in_c*kh*kw]`, kernel elements row-major.
    Conv2d { cfg: ConvConfig, w: Array2<f64> },
    AvgPool2d { cfg: PoolConfig },
    SoftLif {
        lif: LifParams,
        cfg: SoftLifConfig,
        gain: Array1<f64>,
        bias: Array1<f64>,
    },
    /// Linear classifier head; `w` is `[classes, in]`.
    Softmax { w: Array2<f64>, b: Array1<f64> },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::AvgPool2d { .. } => "avgpool2d",
            Layer::SoftLif { .. } => "softlif",
            Layer::Softmax { .. } => "softmax",
        }
    }

    /// Shape produced from `input`, or an error when they do not compose.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let fail = |detail: String| Error::Shape { layer: self.name().to_string(), detail };
        match self {
            Layer::Dense { w } => {
                if w.ncols() != input.len() {
                    return Err(fail(format!("expects {} inputs, got {}", w.ncols(), input.len())));
                }
                Ok(Shape::Flat(w.nrows()))
            }
            Layer::Conv2d { cfg, w } => {
                let Shape::Image { c, h, w: iw } = *input else {
                    return Err(fail("expects image input".into()));
                };
                if c != cfg.in_c {
                    return Err(fail(format!("expects {} channels, got {c}", cfg.in_c)));
                }
                if w.nrows() != cfg.out_c || w.ncols() != cfg.in_c * cfg.kh * cfg.kw {
                    return Err(fail("weight tensor does not match kernel config".into()));
                }
                let (oh, ow) = conv_output_hw(h, iw, cfg)
                    .ok_or_else(|| fail(format!("kernel does not fit {h}x{iw} input")))?;
                Ok(Shape::Image { c: cfg.out_c, h: oh, w: ow })
            }
            Layer::AvgPool2d { cfg } => {
                let Shape::Image { c, h, w } = *input else {
                    return Err(fail("expects image input".into()));
                };
                let (oh, ow) = pool_output_hw(h, w, cfg)
                    .ok_or_else(|| fail(format!("window does not fit {h}x{w} input")))?;
                Ok(Shape::Image { c, h: oh, w: ow })
            }
            Layer::SoftLif { gain, bias, .. } => {
                if gain.len() != input.len() || bias.len() != input.len() {
                    return Err(fail(format!(
                        "gain/bias sized {}/{} for {} inputs",
                        gain.len(),
                        bias.len(),
                        input.len()
                    )));
                }
                Ok(*input)
            }
            Layer::Softmax { w, b } => {
                if w.ncols() != input.len() {
                    return Err(fail(format!("expects {} inputs, got {}", w.ncols(), input.len())));
                }
                if b.len() != w.nrows() {
                    return Err(fail("bias does not match class count".into()));
                }
                Ok(Shape::Flat(w.nrows()))
            }
        }
    }

    /// Number of trainable parameters (the activation gain is fixed).
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { w } => w.len(),
            Layer::Conv2d { w, .. } => w.len(),
            Layer::AvgPool2d { .. } => 0,
            Layer::SoftLif { bias, .. } => bias.len(),
            Layer::Softmax { w, b } => w.len() + b.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub arch: String,
    pub dataset: String,
    pub gamma: f64,
    pub sigma: f64,
    pub seed: u64,
    pub epochs: u32,
    /// Scalar subtracted from [0,1]-scaled pixels before the first layer.
    pub input_mean: f64,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta {
            arch: String::new(),
            dataset: String::new(),
            gamma: crate::neuron::DEFAULT_GAMMA,
            sigma: 0.0,
            seed: 0,
            epochs: 0,
            input_mean: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub input_shape: Shape,
    pub layers: Vec<Layer>,
    pub meta: ModelMeta,
}

/// Inputs seen by each layer during one forward pass (`inputs[0]` is the
/// network input, `inputs[i]` feeds `layers[i]`), plus the final scores.
#[derive(Debug)]
pub struct ActivationTrace {
    pub inputs: Vec<Array2<f64>>,
    pub probs: Array2<f64>,
}

/// Which condition admits training noise on an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseGate {
    /// Noise where the input current exceeds threshold.
    #[default]
    Current,
    /// Noise where the smoothed rate is positive (sensitivity variant: the
    /// smoothed curve is positive slightly below threshold).
    Rate,
}

/// Per-example noise streams for one batch, derived from named substreams
/// so results do not depend on batch composition or worker count.
pub struct NoiseStreams {
    pub sigma: f64,
    pub gate: NoiseGate,
    pub rngs: Vec<ChaCha8Rng>,
}

impl NoiseStreams {
    pub fn for_examples(
        seed: u64,
        sigma: f64,
        gate: NoiseGate,
        ids: impl IntoIterator<Item = u64>,
    ) -> Self {
        let rngs = ids.into_iter().map(|id| substream(seed, "noise", id)).collect();
        NoiseStreams { sigma, gate, rngs }
    }
}

/// Adds a fresh Gaussian draw of std `sigma` to each gated rate and clips
/// the result at zero (a filtered spike train is nonnegative). One draw is
/// consumed per unit regardless of gating so streams stay aligned across
/// gate choices.
pub fn apply_training_noise(
    rates: &mut Array2<f64>,
    currents: &Array2<f64>,
    sigma: f64,
    v_th: f64,
    gate: NoiseGate,
    rngs: &mut [ChaCha8Rng],
) {
    if sigma == 0.0 {
        return;
    }
    assert_eq!(rates.dim(), currents.dim());
    assert_eq!(rates.nrows(), rngs.len(), "one rng per example");
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for (b, mut row) in rates.outer_iter_mut().enumerate() {
        let rng = &mut rngs[b];
        for (u, r) in row.iter_mut().enumerate() {
            let draw = normal.sample(rng);
            let gated = match gate {
                NoiseGate::Current => currents[[b, u]] > v_th,
                NoiseGate::Rate => *r > 0.0,
            };
            if gated {
                *r = (*r + draw).max(0.0);
            }
        }
    }
}

/// Runs `input` (one example per row) through the network. Noise, when
/// given, must carry one rng per batch row. The model's `input_mean` is
/// subtracted up front, so callers always pass raw `[0,1]`-scaled features;
/// the trace stores the centered input. Each activation layer emits its
/// noisy rate times `ACTIVATION_SCALE`, keeping inter-layer signals near
/// unit scale like the pixels.
pub fn forward_batch(
    model: &NetworkModel,
    input: &Array2<f64>,
    mut noise: Option<&mut NoiseStreams>,
) -> Result<(Array2<f64>, ActivationTrace)> {
    if input.ncols() != model.input_shape.len() {
        return Err(Error::Shape {
            layer: "input".to_string(),
            detail: format!("model expects {} features, got {}", model.input_shape.len(), input.ncols()),
        });
    }
    let mut shape = model.input_shape;
    let mut cur = input.to_owned();
    if model.meta.input_mean != 0.0 {
        cur -= model.meta.input_mean;
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let next_shape = layer.output_shape(&shape)?;
        let out = match layer {
            Layer::Dense { w } => cur.dot(&w.t()),
            Layer::Conv2d { cfg, w } => {
                let Shape::Image { c, h, w: iw } = shape else { unreachable!() };
                conv_forward(&cur, c, h, iw, cfg, w)
            }
            Layer::AvgPool2d { cfg } => {
                let Shape::Image { c, h, w } = shape else { unreachable!() };
                avgpool_forward(&cur, c, h, w, cfg)
            }
            Layer::SoftLif { lif, cfg, gain, bias } => {
                let j = &cur * gain + bias;
                let mut rates = j.mapv(|v| soft_lif_rate(lif, cfg.gamma, v));
                if let Some(ns) = noise.as_deref_mut() {
                    apply_training_noise(&mut rates, &j, ns.sigma, lif.v_th, ns.gate, &mut ns.rngs);
                }
                rates *= ACTIVATION_SCALE;
                rates
            }
            Layer::Softmax { w, b } => {
                let mut logits = cur.dot(&w.t());
                logits += b;
                softmax_rows(&mut logits);
                logits
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("layer {i} ({}) output", layer.name()) });
        }
        inputs.push(std::mem::replace(&mut cur, out));
        shape = next_shape;
    }
    let probs = cur.clone();
    Ok((cur, ActivationTrace { inputs, probs }))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predict(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Noise-free error rate of the model on `[0,1]`-scaled inputs (centering
/// by the model's `input_mean` happens inside the forward pass).
pub fn evaluate_static(
    model: &NetworkModel,
    inputs: &Array2<f64>,
    labels: &[u8],
    batch_size: usize,
) -> Result<f64> {
    assert_eq!(inputs.nrows(), labels.len());
    assert!(batch_size >= 1);
    if labels.is_empty() {
        return Err(Error::InvalidParam("empty evaluation set".to_string()));
    }
    let mut wrong = 0usize;
    let mut at = 0usize;
    while at < labels.len() {
        let end = (at + batch_size).min(labels.len());
        let batch = inputs.slice(ndarray::s![at..end, ..]).to_owned();
        let (probs, _) = forward_batch(model, &batch, None)?;
        for (k, pred) in predict(&probs).into_iter().enumerate() {
            if pred != labels[at + k] as usize {
                wrong += 1;
            }
        }
        at = end;
    }
    Ok(wrong as f64 / labels.len() as f64)
}

pub fn count_params(model: &NetworkModel) -> usize {
    model.layers.iter().map(Layer::param_count).sum()
}

/// Structural checks; returns human-readable violations, empty when clean.
pub fn validate(model: &NetworkModel) -> Vec<String> {
    let mut out = Vec::new();
    if model.layers.is_empty() {
        out.push("model has no layers".to_string());
        return out;
    }
    if model.input_shape.is_empty() {
        out.push("input shape is empty".to_string());
    }
    let mut shape = model.input_shape;
    for (i, layer) in model.layers.iter().enumerate() {
        match layer.output_shape(&shape) {
            Ok(s) => shape = s,
            Err(e) => {
                out.push(format!("layer {i}: {e}"));
                return out;
            }
        }
        let finite = match layer {
            Layer::Dense { w } | Layer::Conv2d { w, .. } => w.iter().all(|v| v.is_finite()),
            Layer::AvgPool2d { .. } => true,
            Layer::SoftLif { gain, bias, .. } => {
                gain.iter().chain(bias.iter()).all(|v| v.is_finite())
            }
            Layer::Softmax { w, b } => w.iter().chain(b.iter()).all(|v| v.is_finite()),
        };
        if !finite {
            out.push(format!("layer {i} ({}) has non-finite parameters", layer.name()));
        }
        if let Layer::SoftLif { lif, cfg, .. } = layer {
            if let Err(e) = lif.validate() {
                out.push(format!("layer {i}: {e}"));
            }
            if let Err(e) = cfg.validate() {
                out.push(format!("layer {i}: {e}"));
            }
            if cfg.gamma != model.meta.gamma {
                out.push(format!("layer {i}: gamma {} disagrees with metadata {}", cfg.gamma, model.meta.gamma));
            }
            if cfg.sigma != model.meta.sigma {
                out.push(format!("layer {i}: sigma {} disagrees with metadata {}", cfg.sigma, model.meta.sigma));
            }
        }
    }
    let classifiers: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Softmax { .. }))
        .map(|(i, _)| i)
        .collect();
    if classifiers.len() != 1 || classifiers[0] != model.layers.len() - 1 {
        out.push("model must end with exactly one softmax classifier".to_string());
    }
    out
}

pub const ARCH_NAMES: [&str; 3] = ["mlp-500-200", "mlp-small", "conv-small"];

/// Builds a named architecture with fresh weights. Linear weights are
/// centered uniform with scale 1/sqrt(fan_in); activation gains are fixed
/// at 1 and biases start at 1 so zero-centered inputs sit near threshold.
/// All tensors are snapped to the f32 grid used by the model file format.
pub fn build_arch(
    arch: &str,
    input_shape: Shape,
    n_classes: usize,
    gamma: f64,
    sigma: f64,
    seed: u64,
) -> Result<NetworkModel> {
    SoftLifConfig { gamma, sigma }.validate()?;
    if n_classes < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 classes, got {n_classes}")));
    }
    let mut b = ArchBuilder { layers: Vec::new(), shape: input_shape, seed, gamma, sigma };
    match arch {
        "mlp-500-200" => {
            for units in [500, 200] {
                b.dense(units);
                b.soft_lif();
            }
        }
        "mlp-small" => {
            b.dense(64);
            b.soft_lif();
        }
        "conv-small" => {
            if !matches!(input_shape, Shape::Image { .. }) {
                return Err(Error::InvalidParam("conv-small requires image-shaped input".to_string()));
            }
            for out_c in [16, 32] {
                b.conv(out_c, 5, 1, 2)?;
                b.soft_lif();
                b.pool(2)?;
            }
            b.dense(128);
            b.soft_lif();
        }
        other => {
            return Err(Error::InvalidParam(format!(
                "unknown architecture {other:?} (expected one of {ARCH_NAMES:?})"
            )));
        }
    }
    b.softmax(n_classes);
    let model = NetworkModel {
        input_shape,
        layers: b.layers,
        meta: ModelMeta { arch: arch.to_string(), gamma, sigma, seed, ..ModelMeta::default() },
    };
    let violations = validate(&model);
    debug_assert!(violations.is_empty(), "builder produced invalid model: {violations:?}");
    Ok(model)
}

struct ArchBuilder {
    layers: Vec<Layer>,
    shape: Shape,
    seed: u64,
    gamma: f64,
    sigma: f64,
}

impl ArchBuilder {
    fn init_weights(&mut self, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
        let mut rng = substream(self.seed, "init", self.layers.len() as u64);
        let scale = (fan_in as f64).sqrt().recip();
        let dist = Uniform::new_inclusive(-scale, scale);
        let mut w = Array2::from_shape_simple_fn((rows, cols), || rng.sample(dist));
        w.mapv_inplace(|v| v as f32 as f64);
        w
    }

    fn dense(&mut self, out: usize) {
        let fan_in = self.shape.len();
        let w = self.init_weights(out, fan_in, fan_in);
        self.layers.push(Layer::Dense { w });
        self.shape = Shape::Flat(out);
    }

    fn conv(&mut self, out_c: usize, k: usize, stride: usize, pad: usize) -> Result<()> {
        let Shape::Image { c, .. } = self.shape else {
            return Err(Error::InvalidParam("conv stage needs image input".to_string()));
        };
        let cfg = ConvConfig { in_c: c, out_c, kh: k, kw: k, stride, pad };
        let fan_in = c * k * k;
        let w = self.init_weights(out_c, fan_in, fan_in);
        let layer = Layer::Conv2d { cfg, w };
        self.shape = layer.output_shape(&self.shape)?;
        self.layers.push(layer);
        Ok(())
    }

    fn pool(&mut self, size: usize) -> Result<()> {
        let layer = Layer::AvgPool2d { cfg: PoolConfig { ph: size, pw: size, stride: size } };
        self.shape = layer.output_shape(&self.shape)?;
        self.layers.push(layer);
        Ok(())
    }

    fn soft_lif(&mut self) {
        let n = self.shape.len();
        self.layers.push(Layer::SoftLif {
            lif: LifParams::default(),
            cfg: SoftLifConfig { gamma: self.gamma, sigma: self.sigma },
            gain: Array1::ones(n),
            bias: Array1::ones(n),
        });
    }

    fn softmax(&mut self, n_classes: usize) {
        let fan_in = self.shape.len();
        let w = self.init_weights(n_classes, fan_in, fan_in);
        self.layers.push(Layer::Softmax { w, b: Array1::zeros(n_classes) });
        self.shape = Shape::Flat(n_classes);
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.outer_iter_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) fn conv_output_hw(h: usize, w: usize, cfg: &ConvConfig) -> Option<(usize, usize)> {
    if cfg.stride == 0 || cfg.kh == 0 || cfg.kw == 0 {
        return None;
    }
    let he = h + 2 * cfg.pad;
    let we = w + 2 * cfg.pad;
    if he < cfg.kh || we < cfg.kw {
        return None;
    }
    Some(((he - cfg.kh) / cfg.stride + 1, (we - cfg.kw) / cfg.stride + 1))
}

pub(crate) fn pool_output_hw(h: usize, w: usize, cfg: &PoolConfig) -> Option<(usize, usize)> {
    if cfg.stride == 0 || cfg.ph == 0 || cfg.pw == 0 || h < cfg.ph || w < cfg.pw {
        return None;
    }
    Some(((h - cfg.ph) / cfg.stride + 1, (w - cfg.pw) / cfg.stride + 1))
}

/// Gathers convolution patches: `[B, c*h*w]` to `[B*oh*ow, c*kh*kw]`,
/// with zeros where the kernel overhangs the padded border.
pub(crate) fn im2col(
    x: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    cfg: &ConvConfig,
) -> (Array2<f64>, usize, usize) {
    let (oh, ow) = conv_output_hw(h, w, cfg).expect("shape validated");
    let b = x.nrows();
    let mut cols = Array2::<f64>::zeros((b * oh * ow, c * cfg.kh * cfg.kw));
    for bi in 0..b {
        let img = x.row(bi);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let y0 = (oy * cfg.stride) as isize - cfg.pad as isize;
                let x0 = (ox * cfg.stride) as isize - cfg.pad as isize;
                let mut col = 0usize;
                for ic in 0..c {
                    for ky in 0..cfg.kh {
                        let yy = y0 + ky as isize;
                        if yy < 0 || yy >= h as isize {
                            col += cfg.kw;
                            continue;
                        }
                        let base = (ic * h + yy as usize) * w;
                        for kx in 0..cfg.kw {
                            let xx = x0 + kx as isize;
                            if xx >= 0 && xx < w as isize {
                                cols[[row, col]] = img[base + xx as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-adds patch gradients back onto the input image layout
/// (adjoint of `im2col`).
pub(crate) fn col2im(
    cols: &Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    cfg: &ConvConfig,
) -> Array2<f64> {
    let (oh, ow) = conv_output_hw(h, w, cfg).expect("shape validated");
    let mut x = Array2::<f64>::zeros((b, c * h * w));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let y0 = (oy * cfg.stride) as isize - cfg.pad as isize;
                let x0 = (ox * cfg.stride) as isize - cfg.pad as isize;
                let mut col = 0usize;
                for ic in 0..c {
                    for ky in 0..cfg.kh {
                        let yy = y0 + ky as isize;
                        if yy < 0 || yy >= h as isize {
                            col += cfg.kw;
                            continue;
                        }
                        let base = (ic * h + yy as usize) * w;
                        for kx in 0..cfg.kw {
                            let xx = x0 + kx as isize;
                            if xx >= 0 && xx < w as isize {
                                x[[bi, base + xx as usize]] += cols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Reorders `[B, ch*oh*ow]` (channel-major) into `[B*oh*ow, ch]` rows so
/// channel maps apply as one matrix product.
pub(crate) fn chw_to_rows(x: &Array2<f64>, ch: usize, oh: usize, ow: usize) -> Array2<f64> {
    let b = x.nrows();
    let mut rows = Array2::<f64>::zeros((b * oh * ow, ch));
    for bi in 0..b {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    rows[[(bi * oh + oy) * ow + ox, c]] = x[[bi, (c * oh + oy) * ow + ox]];
                }
            }
        }
    }
    rows
}

/// Inverse of `chw_to_rows`.
pub(crate) fn rows_to_chw(rows: &Array2<f64>, b: usize, oh: usize, ow: usize) -> Array2<f64> {
    let ch = rows.ncols();
    let mut x = Array2::<f64>::zeros((b, ch * oh * ow));
    for bi in 0..b {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    x[[bi, (c * oh + oy) * ow + ox]] = rows[[(bi * oh + oy) * ow + ox, c]];
                }
            }
        }
    }
    x
}

pub(crate) fn conv_forward(
    x: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    cfg: &ConvConfig,
    wmat: &Array2<f64>,
) -> Array2<f64> {
    let (cols, oh, ow) = im2col(x, c, h, w, cfg);
    let out_rows = cols.dot(&wmat.t());
    rows_to_chw(&out_rows, x.nrows(), oh, ow)
}

pub(crate) fn avgpool_forward(
    x: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    cfg: &PoolConfig,
) -> Array2<f64> {
    let (oh, ow) = pool_output_hw(h, w, cfg).expect("shape validated");
    let inv = 1.0 / (cfg.ph * cfg.pw) as f64;
    let b = x.nrows();
    let mut y = Array2::<f64>::zeros((b, c * oh * ow));
    for bi in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..cfg.ph {
                        let base = (ch * h + oy * cfg.stride + ky) * w + ox * cfg.stride;
                        for kx in 0..cfg.pw {
                            acc += x[[bi, base + kx]];
                        }
                    }
                    y[[bi, (ch * oh + oy) * ow + ox]] = acc * inv;
                }
            }
        }
    }
    y
}

/// Adjoint of `avgpool_forward`: spreads each output gradient uniformly
/// over its window.
pub(crate) fn avgpool_backward(
    grad: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    cfg: &PoolConfig,
) -> Array2<f64> {
    let (oh, ow) = pool_output_hw(h, w, cfg).expect("shape validated");
    let inv = 1.0 / (cfg.ph * cfg.pw) as f64;
    let b = grad.nrows();
    let mut gx = Array2::<f64>::zeros((b, c * h * w));
    for bi in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad[[bi, (ch * oh + oy) * ow + ox]] * inv;
                    for ky in 0..cfg.ph {
                        let base = (ch * h + oy * cfg.stride + ky) * w + ox * cfg.stride;
                        for kx in 0..cfg.pw {
                            gx[[bi, base + kx]] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::DEFAULT_GAMMA;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn softlif_layer(n: usize, gamma: f64, sigma: f64, bias: f64) -> Layer {
        Layer::SoftLif {
            lif: LifParams::default(),
            cfg: SoftLifConfig { gamma, sigma },
            gain: Array1::ones(n),
            bias: Array1::from_elem(n, bias),
        }
    }

    fn toy_model(layers: Vec<Layer>, input: Shape) -> NetworkModel {
        let mut meta = ModelMeta::default();
        for l in &layers {
            if let Layer::SoftLif { cfg, .. } = l {
                meta.gamma = cfg.gamma;
                meta.sigma = cfg.sigma;
            }
        }
        NetworkModel { input_shape: input, layers, meta }
    }

    #[test]
    fn mlp_500_200_has_expected_parameter_count() {
        let m = build_arch("mlp-500-200", Shape::Flat(784), 10, DEFAULT_GAMMA, 10.0, 7).unwrap();
        assert_eq!(count_params(&m), 494_710);
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn builders_are_deterministic_and_snapped_to_f32() {
        let a = build_arch("mlp-small", Shape::Flat(64), 10, DEFAULT_GAMMA, 0.0, 3).unwrap();
        let b = build_arch("mlp-small", Shape::Flat(64), 10, DEFAULT_GAMMA, 0.0, 3).unwrap();
        assert_eq!(a, b);
        let c = build_arch("mlp-small", Shape::Flat(64), 10, DEFAULT_GAMMA, 0.0, 4).unwrap();
        assert_ne!(a, c);
        for layer in &a.layers {
            if let Layer::Dense { w } = layer {
                assert!(w.iter().all(|&v| v == v as f32 as f64));
            }
        }
    }

    #[test]
    fn conv_small_shapes_compose() {
        let m = build_arch(
            "conv-small",
            Shape::Image { c: 3, h: 24, w: 24 },
            10,
            DEFAULT_GAMMA,
            0.0,
            1,
        )
        .unwrap();
        assert!(validate(&m).is_empty());
        // 16@5x5 conv, pool, 32@5x5 conv, pool, dense 128, classifier
        let mut shape = m.input_shape;
        for l in &m.layers {
            shape = l.output_shape(&shape).unwrap();
        }
        assert_eq!(shape, Shape::Flat(10));
        assert!(build_arch("conv-small", Shape::Flat(100), 10, DEFAULT_GAMMA, 0.0, 1).is_err());
        assert!(build_arch("nope", Shape::Flat(4), 10, DEFAULT_GAMMA, 0.0, 1).is_err());
    }

    #[test]
    fn identity_dense_reports_soft_lif_rates() {
        let n = 3;
        let layers = vec![
            Layer::Dense { w: Array2::eye(n) },
            softlif_layer(n, 1.0, 0.0, 0.0),
            Layer::Softmax { w: Array2::zeros((10, n)), b: Array1::zeros(10) },
        ];
        let m = toy_model(layers, Shape::Flat(n));
        let x = Array2::from_elem((2, n), 2.0);
        let (probs, trace) = forward_batch(&m, &x, None).unwrap();
        // the classifier's input is the scaled rate
        for &a in trace.inputs[2].iter() {
            assert!((a / ACTIVATION_SCALE - 65.26).abs() < 0.01);
        }
        for &p in probs.iter() {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_branch_is_silent_below_threshold() {
        let layers = vec![softlif_layer(2, 0.0, 0.0, 0.0)];
        let m = toy_model(layers, Shape::Flat(2));
        let x = Array2::from_elem((1, 2), 0.5);
        let (out, _) = forward_batch(&m, &x, None).unwrap();
        assert!(out.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn rates_stay_inside_physical_band() {
        let m = build_arch("mlp-small", Shape::Flat(20), 4, DEFAULT_GAMMA, 0.0, 11).unwrap();
        let mut rng = substream(11, "test-input", 0);
        let dist = Uniform::new(-3.0, 3.0);
        let x = Array2::from_shape_simple_fn((16, 20), || rng.sample(dist));
        let (_, trace) = forward_batch(&m, &x, None).unwrap();
        let max_rate = LifParams::default().max_rate();
        for &r in trace.inputs[2].iter() {
            assert!((0.0..max_rate).contains(&r));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = build_arch("mlp-small", Shape::Flat(6), 5, DEFAULT_GAMMA, 0.0, 2).unwrap();
        let x = array![[0.1, -0.4, 2.0, 0.0, 1.0, -2.0], [5.0, 5.0, 5.0, 5.0, 5.0, 5.0]];
        let (probs, _) = forward_batch(&m, &x, None).unwrap();
        for row in probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn avgpool_preserves_constants_and_scales_linearly() {
        let cfg = PoolConfig { ph: 2, pw: 2, stride: 2 };
        let x = Array2::from_elem((1, 2 * 4 * 4), 3.25);
        let y = avgpool_forward(&x, 2, 4, 4, &cfg);
        assert_eq!(y.dim(), (1, 2 * 2 * 2));
        assert!(y.iter().all(|&v| v == 3.25));

        let mut rng = substream(5, "test-input", 1);
        let dist = Uniform::new(0.0, 1.0);
        let x = Array2::from_shape_simple_fn((3, 16), || rng.sample(dist));
        let a = avgpool_forward(&(2.0 * &x), 1, 4, 4, &cfg);
        let b = 2.0 * avgpool_forward(&x, 1, 4, 4, &cfg);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_naive_convolution() {
        let (c, h, w) = (2, 5, 6);
        let cfg = ConvConfig { in_c: c, out_c: 3, kh: 3, kw: 3, stride: 2, pad: 1 };
        let mut rng = substream(9, "test-input", 2);
        let dist = Uniform::new(-1.0, 1.0);
        let x = Array2::from_shape_simple_fn((2, c * h * w), || rng.sample(dist));
        let wmat = Array2::from_shape_simple_fn((3, c * 9), || rng.sample(dist));
        let got = conv_forward(&x, c, h, w, &cfg, &wmat);

        let (oh, ow) = conv_output_hw(h, w, &cfg).unwrap();
        for bi in 0..2 {
            for oc in 0..cfg.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..cfg.kh {
                                for kx in 0..cfg.kw {
                                    let yy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
                                    let xx = (ox * cfg.stride + kx) as isize - cfg.pad as isize;
                                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    acc += x[[bi, (ic * h + yy as usize) * w + xx as usize]]
                                        * wmat[[oc, (ic * cfg.kh + ky) * cfg.kw + kx]];
                                }
                            }
                        }
                        let got_v = got[[bi, (oc * oh + oy) * ow + ox]];
                        assert!((got_v - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn one_by_one_conv_equals_dense_per_pixel() {
        let (c, h, w, oc) = (3, 4, 4, 5);
        let cfg = ConvConfig { in_c: c, out_c: oc, kh: 1, kw: 1, stride: 1, pad: 0 };
        let mut rng = substream(13, "test-input", 3);
        let dist = Uniform::new(-1.0, 1.0);
        let x = Array2::from_shape_simple_fn((2, c * h * w), || rng.sample(dist));
        let wmat = Array2::from_shape_simple_fn((oc, c), || rng.sample(dist));
        let conv = conv_forward(&x, c, h, w, &cfg, &wmat);
        for bi in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    let pixel = Array1::from_iter((0..c).map(|ic| x[[bi, (ic * h + y) * w + xx]]));
                    let dense = wmat.dot(&pixel);
                    for o in 0..oc {
                        assert!((conv[[bi, (o * h + y) * w + xx]] - dense[o]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> pins the scatter as the exact
        // transpose of the gather.
        let (c, h, w) = (2, 4, 5);
        let cfg = ConvConfig { in_c: c, out_c: 1, kh: 3, kw: 2, stride: 1, pad: 1 };
        let mut rng = substream(17, "test-input", 4);
        let dist = Uniform::new(-1.0, 1.0);
        let x = Array2::from_shape_simple_fn((2, c * h * w), || rng.sample(dist));
        let (cols, _, _) = im2col(&x, c, h, w, &cfg);
        let y = Array2::from_shape_simple_fn(cols.dim(), || rng.sample(dist));
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, 2, c, h, w, &cfg);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn noise_is_identity_when_disabled_or_subthreshold() {
        let currents = Array2::from_elem((4, 3), 0.5);
        let rates = Array2::from_elem((4, 3), 7.0);
        let mut rngs: Vec<_> = (0..4).map(|i| substream(1, "noise", i)).collect();
        let mut out = rates.clone();
        apply_training_noise(&mut out, &currents, 0.0, 1.0, NoiseGate::Current, &mut rngs);
        assert_eq!(out, rates);
        let mut out = rates.clone();
        apply_training_noise(&mut out, &currents, 10.0, 1.0, NoiseGate::Current, &mut rngs);
        assert_eq!(out, rates);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let (b, n) = (1000, 100);
        let currents = Array2::from_elem((b, n), 5.0);
        let base = Array2::from_elem((b, n), 118.0);
        let mut rates = base.clone();
        let mut rngs: Vec<_> = (0..b as u64).map(|i| substream(2, "noise", i)).collect();
        apply_training_noise(&mut rates, &currents, 10.0, 1.0, NoiseGate::Current, &mut rngs);
        let diff = &rates - &base;
        let mean = diff.sum() / diff.len() as f64;
        let var = diff.mapv(|d| (d - mean).powi(2)).sum() / (diff.len() - 1) as f64;
        let std = var.sqrt();
        assert!((9.5..=10.5).contains(&std), "sample std {std}");
        assert!(rates.iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn rate_gate_admits_noise_below_threshold() {
        // j = 0.9 < v_th but the smoothed rate there is positive
        let currents = Array2::from_elem((8, 16), 0.9);
        let rate = soft_lif_rate(&LifParams::default(), DEFAULT_GAMMA, 0.9);
        assert!(rate > 0.0);
        let base = Array2::from_elem((8, 16), rate);
        let mut current_gated = base.clone();
        let mut rngs: Vec<_> = (0..8).map(|i| substream(3, "noise", i)).collect();
        apply_training_noise(&mut current_gated, &currents, 10.0, 1.0, NoiseGate::Current, &mut rngs);
        assert_eq!(current_gated, base);
        let mut rate_gated = base.clone();
        let mut rngs: Vec<_> = (0..8).map(|i| substream(3, "noise", i)).collect();
        apply_training_noise(&mut rate_gated, &currents, 10.0, 1.0, NoiseGate::Rate, &mut rngs);
        assert_ne!(rate_gated, base);
    }

    #[test]
    fn noisy_forward_is_batch_order_invariant() {
        let m = build_arch("mlp-small", Shape::Flat(10), 3, DEFAULT_GAMMA, 10.0, 21).unwrap();
        let mut rng = substream(21, "test-input", 0);
        let dist = Uniform::new(0.0, 1.0);
        let a = Array1::from_shape_simple_fn(10, || rng.sample(dist));
        let b = Array1::from_shape_simple_fn(10, || rng.sample(dist));

        let fwd = |rows: [&Array1<f64>; 2], ids: [u64; 2]| {
            let mut x = Array2::zeros((2, 10));
            x.row_mut(0).assign(rows[0]);
            x.row_mut(1).assign(rows[1]);
            let mut ns = NoiseStreams::for_examples(99, 10.0, NoiseGate::Current, ids);
            forward_batch(&m, &x, Some(&mut ns)).unwrap().0
        };
        let p1 = fwd([&a, &b], [7, 8]);
        let p2 = fwd([&b, &a], [8, 7]);
        assert_eq!(p1.row(0), p2.row(1));
        assert_eq!(p1.row(1), p2.row(0));
        // and the same ids reproduce exactly
        let p3 = fwd([&a, &b], [7, 8]);
        assert_eq!(p1, p3);
    }

    #[test]
    fn forward_rejects_bad_input_and_nonfinite_values() {
        let m = build_arch("mlp-small", Shape::Flat(8), 3, DEFAULT_GAMMA, 0.0, 1).unwrap();
        let x = Array2::zeros((2, 9));
        assert!(matches!(forward_batch(&m, &x, None), Err(Error::Shape { .. })));

        let mut broken = m.clone();
        if let Layer::Dense { w } = &mut broken.layers[0] {
            w[[0, 0]] = f64::NAN;
        }
        let x = Array2::ones((1, 8));
        let err = forward_batch(&broken, &x, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn validate_reports_structural_violations() {
        let empty = NetworkModel {
            input_shape: Shape::Flat(4),
            layers: vec![],
            meta: ModelMeta::default(),
        };
        assert!(!validate(&empty).is_empty());

        // shape break between layers
        let m = toy_model(
            vec![
                Layer::Dense { w: Array2::zeros((4, 4)) },
                Layer::Dense { w: Array2::zeros((2, 5)) },
            ],
            Shape::Flat(4),
        );
        assert!(validate(&m).iter().any(|v| v.contains("layer 1")));

        // missing classifier
        let m = toy_model(vec![Layer::Dense { w: Array2::zeros((4, 4)) }], Shape::Flat(4));
        assert!(validate(&m).iter().any(|v| v.contains("softmax")));

        // metadata disagreement
        let mut m = toy_model(
            vec![
                softlif_layer(4, 0.2, 0.0, 1.0),
                Layer::Softmax { w: Array2::zeros((3, 4)), b: Array1::zeros(3) },
            ],
            Shape::Flat(4),
        );
        m.meta.gamma = 0.3;
        assert!(validate(&m).iter().any(|v| v.contains("gamma")));
    }

    #[test]
    fn predict_breaks_ties_toward_lowest_index() {
        let scores = array![[0.2, 0.5, 0.5], [1.0, 0.0, 1.0]];
        assert_eq!(predict(&scores), vec![1, 0]);
    }

    #[test]
    fn evaluate_static_counts_mismatches() {
        // classifier that copies input current: class = argmax of input
        let layers = vec![Layer::Softmax { w: Array2::eye(3), b: Array1::zeros(3) }];
        let m = toy_model(layers, Shape::Flat(3));
        let x = array![[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0], [3.0, 0.0, 0.0]];
        let labels = [0u8, 1, 2, 1];
        let err = evaluate_static(&m, &x, &labels, 2).unwrap();
        assert!((err - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pooling_commutes_with_scaling(scale in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = substream(seed, "prop-input", 0);
            let dist = Uniform::new(-1.0, 1.0);
            let x = Array2::from_shape_simple_fn((2, 36), || rng.sample(dist));
            let cfg = PoolConfig { ph: 3, pw: 3, stride: 3 };
            let a = avgpool_forward(&(scale * &x), 1, 6, 6, &cfg);
            let b = scale * avgpool_forward(&x, 1, 6, 6, &cfg);
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_always_normalizes(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut logits = Array2::from_shape_vec((3, 4), vals).unwrap();
            softmax_rows(&mut logits);
            for row in logits.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }
}
