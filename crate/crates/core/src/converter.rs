//! Static-to-spiking conversion. The trained rate network's weights carry
//! over unchanged; soft activations become spiking LIF populations with the
//! same gain and bias; training noise and the smoothing width are dropped;
//! alpha synapses (attached by the simulator using `tau_s`) filter the
//! spike trains between stages.

use ndarray::{Array1, Array2};

use crate::error::Error;
use crate::network::{
    conv_output_hw, pool_output_hw, validate, ConvConfig, Layer, ModelMeta, NetworkModel,
    PoolConfig, Shape,
};
use crate::neuron::LifParams;
use crate::Result;

/// One stage of the spiking pipeline. Linear stages act on filtered spike
/// trains (real-valued signals at every step); `Lif` stages hold spiking
/// neurons; `Readout` is a non-spiking linear map whose output is averaged
/// over the readout window to produce class scores.
#[derive(Clone, Debug, PartialEq)]
pub enum SpikingStage {
    Dense {
        w: Array2<f64>,
    },
    Conv2d {
        cfg: ConvConfig,
        w: Array2<f64>,
    },
    AvgPool2d {
        cfg: PoolConfig,
    },
    Lif {
        lif: LifParams,
        gain: Array1<f64>,
        bias: Array1<f64>,
    },
    Readout {
        w: Array2<f64>,
        b: Array1<f64>,
    },
}

impl SpikingStage {
    pub fn name(&self) -> &'static str {
        match self {
            SpikingStage::Dense { .. } => "dense",
            SpikingStage::Conv2d { .. } => "conv2d",
            SpikingStage::AvgPool2d { .. } => "avgpool2d",
            SpikingStage::Lif { .. } => "lif",
            SpikingStage::Readout { .. } => "readout",
        }
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let fail = |detail: String| Error::Shape {
            layer: self.name().to_string(),
            detail,
        };
        match self {
            SpikingStage::Dense { w } => {
                if w.ncols() != input.len() {
                    return Err(fail(format!(
                        "expects {} inputs, got {}",
                        w.ncols(),
                        input.len()
                    )));
                }
                Ok(Shape::Flat(w.nrows()))
            }
            SpikingStage::Conv2d { cfg, w } => {
                let Shape::Image { c, h, w: iw } = *input else {
                    return Err(fail("expects image input".into()));
                };
                if c != cfg.in_c || w.nrows() != cfg.out_c || w.ncols() != cfg.in_c * cfg.kh * cfg.kw
                {
                    return Err(fail("weight tensor does not match kernel config".into()));
                }
                let (oh, ow) = conv_output_hw(h, iw, cfg)
                    .ok_or_else(|| fail(format!("kernel does not fit {h}x{iw} input")))?;
                Ok(Shape::Image { c: cfg.out_c, h: oh, w: ow })
            }
            SpikingStage::AvgPool2d { cfg } => {
                let Shape::Image { c, h, w } = *input else {
                    return Err(fail("expects image input".into()));
                };
                let (oh, ow) = pool_output_hw(h, w, cfg)
                    .ok_or_else(|| fail(format!("window does not fit {h}x{w} input")))?;
                Ok(Shape::Image { c, h: oh, w: ow })
            }
            SpikingStage::Lif { gain, bias, .. } => {
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
            SpikingStage::Readout { w, b } => {
                if w.ncols() != input.len() {
                    return Err(fail(format!(
                        "expects {} inputs, got {}",
                        w.ncols(),
                        input.len()
                    )));
                }
                if b.len() != w.nrows() {
                    return Err(fail("bias does not match class count".into()));
                }
                Ok(Shape::Flat(w.nrows()))
            }
        }
    }
}

/// A static network re-expressed for spiking execution. Weight tensors are
/// bit-identical to the source model; only the activation semantics change.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingNetwork {
    pub input_shape: Shape,
    pub stages: Vec<SpikingStage>,
    /// Synaptic filter time constant in seconds.
    pub tau_s: f64,
    pub meta: ModelMeta,
}

impl SpikingNetwork {
    /// Input shape of every stage followed by the output shape, or the
    /// first composition error.
    pub fn stage_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.stages.len() + 1);
        shapes.push(self.input_shape);
        for s in &self.stages {
            let next = s.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau_s.is_finite() && self.tau_s > 0.0) {
            v.push(format!("tau_s must be positive, got {}", self.tau_s));
        }
        if self.stages.is_empty() {
            v.push("network has no stages".into());
            return v;
        }
        if let Err(e) = self.stage_shapes() {
            v.push(e.to_string());
        }
        let readouts = self
            .stages
            .iter()
            .filter(|s| matches!(s, SpikingStage::Readout { .. }))
            .count();
        if readouts != 1 || !matches!(self.stages.last(), Some(SpikingStage::Readout { .. })) {
            v.push("exactly one readout stage is required, in last position".into());
        }
        v
    }
}

/// Re-expresses a trained static model as a spiking network with synaptic
/// time constant `tau_s`. Weights, gains, and biases are copied unchanged;
/// the smoothing width and training noise have no spiking counterpart and
/// are dropped (two models differing only in those convert identically).
pub fn convert(model: &NetworkModel, tau_s: f64) -> Result<SpikingNetwork> {
    if !(tau_s.is_finite() && tau_s > 0.0) {
        return Err(Error::InvalidParam(format!(
            "tau_s must be positive, got {tau_s}"
        )));
    }
    let violations = validate(model);
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations.join("; ")));
    }
    let stages = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Dense { w } => SpikingStage::Dense { w: w.clone() },
            Layer::Conv2d { cfg, w } => SpikingStage::Conv2d { cfg: *cfg, w: w.clone() },
            Layer::AvgPool2d { cfg } => SpikingStage::AvgPool2d { cfg: *cfg },
            Layer::SoftLif { lif, gain, bias, .. } => SpikingStage::Lif {
                lif: *lif,
                gain: gain.clone(),
                bias: bias.clone(),
            },
            Layer::Softmax { w, b } => SpikingStage::Readout { w: w.clone(), b: b.clone() },
        })
        .collect();
    let mut meta = model.meta.clone();
    meta.gamma = 0.0;
    meta.sigma = 0.0;
    Ok(SpikingNetwork {
        input_shape: model.input_shape,
        stages,
        tau_s,
        meta,
    })
}

/// Multiplies every average-pool stage into the immediately following dense
/// or convolutional layer, yielding an equivalent model with fewer stages
/// (and more weights). Errors when the model contains no such pair.
pub fn fold_avgpool(model: &NetworkModel) -> Result<NetworkModel> {
    let mut layers: Vec<Layer> = Vec::with_capacity(model.layers.len());
    let mut shape = model.input_shape;
    let mut i = 0;
    let mut folded = 0;
    while i < model.layers.len() {
        if let Layer::AvgPool2d { cfg: pool } = &model.layers[i] {
            match model.layers.get(i + 1) {
                Some(Layer::Dense { w }) => {
                    let w2 = fold_pool_into_dense(pool, &shape, w)?;
                    let layer = Layer::Dense { w: w2 };
                    shape = layer.output_shape(&shape)?;
                    layers.push(layer);
                    i += 2;
                    folded += 1;
                    continue;
                }
                Some(Layer::Conv2d { cfg, w }) => {
                    let (cfg2, w2) = fold_pool_into_conv(pool, &shape, cfg, w)?;
                    let layer = Layer::Conv2d { cfg: cfg2, w: w2 };
                    shape = layer.output_shape(&shape)?;
                    layers.push(layer);
                    i += 2;
                    folded += 1;
                    continue;
                }
                _ => {}
            }
        }
        let layer = model.layers[i].clone();
        shape = layer.output_shape(&shape)?;
        layers.push(layer);
        i += 1;
    }
    if folded == 0 {
        return Err(Error::InvalidModel(
            "no average-pool layer immediately precedes a dense or convolutional layer".into(),
        ));
    }
    Ok(NetworkModel {
        input_shape: model.input_shape,
        layers,
        meta: model.meta.clone(),
    })
}

fn fold_pool_into_dense(
    pool: &PoolConfig,
    input: &Shape,
    w: &Array2<f64>,
) -> Result<Array2<f64>> {
    let fail = |detail: String| Error::Shape { layer: "avgpool2d".into(), detail };
    let Shape::Image { c, h, w: iw } = *input else {
        return Err(fail("expects image input".into()));
    };
    let (oh, ow) = pool_output_hw(h, iw, pool)
        .ok_or_else(|| fail(format!("window does not fit {h}x{iw} input")))?;
    if w.ncols() != c * oh * ow {
        return Err(fail(format!(
            "following dense layer expects {} inputs, pool produces {}",
            w.ncols(),
            c * oh * ow
        )));
    }
    let scale = 1.0 / (pool.ph * pool.pw) as f64;
    let mut w2 = Array2::<f64>::zeros((w.nrows(), c * h * iw));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let oidx = (ch * oh + oy) * ow + ox;
                for dy in 0..pool.ph {
                    for dx in 0..pool.pw {
                        let iidx = (ch * h + oy * pool.stride + dy) * iw + ox * pool.stride + dx;
                        for r in 0..w.nrows() {
                            w2[[r, iidx]] += w[[r, oidx]] * scale;
                        }
                    }
                }
            }
        }
    }
    Ok(w2)
}

fn fold_pool_into_conv(
    pool: &PoolConfig,
    input: &Shape,
    cfg: &ConvConfig,
    w: &Array2<f64>,
) -> Result<(ConvConfig, Array2<f64>)> {
    let fail = |detail: String| Error::Shape { layer: "avgpool2d".into(), detail };
    let Shape::Image { c, .. } = *input else {
        return Err(fail("expects image input".into()));
    };
    if cfg.in_c != c {
        return Err(fail(format!(
            "following conv layer expects {} channels, pool produces {c}",
            cfg.in_c
        )));
    }
    // a padded conv over the pooled grid only maps back onto a padded conv
    // over the original grid when the pool windows tile it exactly
    if cfg.pad > 0 && (pool.ph != pool.stride || pool.pw != pool.stride) {
        return Err(Error::InvalidModel(
            "cannot fold an overlapping average pool into a padded convolution".into(),
        ));
    }
    let s = pool.stride;
    let cfg2 = ConvConfig {
        in_c: cfg.in_c,
        out_c: cfg.out_c,
        kh: (cfg.kh - 1) * s + pool.ph,
        kw: (cfg.kw - 1) * s + pool.pw,
        stride: cfg.stride * s,
        pad: cfg.pad * s,
    };
    let scale = 1.0 / (pool.ph * pool.pw) as f64;
    let mut w2 = Array2::<f64>::zeros((cfg.out_c, cfg.in_c * cfg2.kh * cfg2.kw));
    for ic in 0..cfg.in_c {
        for ky in 0..cfg.kh {
            for kx in 0..cfg.kw {
                let src = (ic * cfg.kh + ky) * cfg.kw + kx;
                for dy in 0..pool.ph {
                    for dx in 0..pool.pw {
                        let dst = (ic * cfg2.kh + ky * s + dy) * cfg2.kw + kx * s + dx;
                        for oc in 0..cfg.out_c {
                            w2[[oc, dst]] += w[[oc, src]] * scale;
                        }
                    }
                }
            }
        }
    }
    Ok((cfg2, w2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_arch, count_params, forward_batch};
    use crate::neuron::SoftLifConfig;
    use crate::rng::substream;
    use ndarray::Array2;
    use rand::Rng;

    fn random_batch(seed: u64, n: usize, dim: usize) -> Array2<f64> {
        let mut rng = substream(seed, "convert-test", 0);
        let dist = rand::distributions::Uniform::new(0.0, 1.0);
        Array2::from_shape_simple_fn((n, dim), || rng.sample(dist))
    }

    fn activation(n: usize, gamma: f64) -> Layer {
        Layer::SoftLif {
            lif: LifParams::default(),
            cfg: SoftLifConfig { gamma, sigma: 0.0 },
            gain: Array1::ones(n),
            bias: Array1::ones(n),
        }
    }

    fn classifier(seed: u64, classes: usize, inputs: usize) -> Layer {
        let mut rng = substream(seed, "convert-test-clf", 0);
        let dist = rand::distributions::Uniform::new(-0.1, 0.1);
        Layer::Softmax {
            w: Array2::from_shape_simple_fn((classes, inputs), || rng.sample(dist)),
            b: Array1::zeros(classes),
        }
    }

    #[test]
    fn convert_preserves_every_parameter_bitwise() {
        let m = build_arch("conv-small", Shape::Image { c: 1, h: 8, w: 8 }, 5, 0.146, 10.0, 7)
            .unwrap();
        let net = convert(&m, 0.005).unwrap();
        assert_eq!(net.stages.len(), m.layers.len());
        for (l, s) in m.layers.iter().zip(&net.stages) {
            match (l, s) {
                (Layer::Dense { w }, SpikingStage::Dense { w: w2 })
                | (Layer::Conv2d { w, .. }, SpikingStage::Conv2d { w: w2, .. })
                | (Layer::Softmax { w, .. }, SpikingStage::Readout { w: w2, .. }) => {
                    assert!(w.iter().zip(w2).all(|(a, b)| a.to_bits() == b.to_bits()));
                }
                (Layer::AvgPool2d { cfg }, SpikingStage::AvgPool2d { cfg: c2 }) => {
                    assert_eq!(cfg, c2);
                }
                (
                    Layer::SoftLif { lif, gain, bias, .. },
                    SpikingStage::Lif { lif: l2, gain: g2, bias: b2 },
                ) => {
                    assert_eq!(lif, l2);
                    assert!(gain.iter().zip(g2).all(|(a, b)| a.to_bits() == b.to_bits()));
                    assert!(bias.iter().zip(b2).all(|(a, b)| a.to_bits() == b.to_bits()));
                }
                other => panic!("stage mismatch: {other:?}"),
            }
        }
        assert_eq!(net.tau_s, 0.005);
        assert!(net.validate().is_empty());
    }

    #[test]
    fn smoothing_and_noise_settings_are_discarded() {
        let a = build_arch("mlp-small", Shape::Flat(64), 10, 1.0, 20.0, 3).unwrap();
        let b = build_arch("mlp-small", Shape::Flat(64), 10, 1e-3, 0.0, 3).unwrap();
        assert_ne!(a, b);
        assert_eq!(convert(&a, 0.005).unwrap(), convert(&b, 0.005).unwrap());
    }

    #[test]
    fn convert_rejects_bad_inputs() {
        let m = build_arch("mlp-small", Shape::Flat(64), 10, 0.146, 0.0, 3).unwrap();
        for tau_s in [0.0, -0.005, f64::NAN, f64::INFINITY] {
            assert!(matches!(convert(&m, tau_s), Err(Error::InvalidParam(_))));
        }
        let empty = NetworkModel {
            input_shape: Shape::Flat(4),
            layers: vec![],
            meta: ModelMeta::default(),
        };
        assert!(matches!(convert(&empty, 0.005), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn folding_pool_before_dense_matches_unfolded() {
        let mut rng = substream(11, "fold-dense", 0);
        let dist = rand::distributions::Uniform::new(-0.5, 0.5);
        let m = NetworkModel {
            input_shape: Shape::Image { c: 2, h: 6, w: 6 },
            layers: vec![
                Layer::AvgPool2d { cfg: PoolConfig { ph: 2, pw: 2, stride: 2 } },
                Layer::Dense {
                    w: Array2::from_shape_simple_fn((5, 2 * 3 * 3), || rng.sample(dist)),
                },
                activation(5, 0.146),
                classifier(11, 3, 5),
            ],
            meta: ModelMeta::default(),
        };
        let folded = fold_avgpool(&m).unwrap();
        assert_eq!(folded.layers.len(), m.layers.len() - 1);
        assert!(count_params(&folded) > count_params(&m));
        let x = random_batch(11, 4, 72);
        let (y0, _) = forward_batch(&m, &x, None).unwrap();
        let (y1, _) = forward_batch(&folded, &x, None).unwrap();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn folding_pool_before_conv_matches_unfolded() {
        let mut rng = substream(12, "fold-conv", 0);
        let dist = rand::distributions::Uniform::new(-0.5, 0.5);
        let cfg = ConvConfig { in_c: 1, out_c: 3, kh: 3, kw: 3, stride: 1, pad: 1 };
        let m = NetworkModel {
            input_shape: Shape::Image { c: 1, h: 8, w: 8 },
            layers: vec![
                Layer::AvgPool2d { cfg: PoolConfig { ph: 2, pw: 2, stride: 2 } },
                Layer::Conv2d {
                    cfg,
                    w: Array2::from_shape_simple_fn((3, 9), || rng.sample(dist)),
                },
                activation(3 * 4 * 4, 0.146),
                classifier(12, 3, 48),
            ],
            meta: ModelMeta::default(),
        };
        let folded = fold_avgpool(&m).unwrap();
        let Layer::Conv2d { cfg: c2, .. } = &folded.layers[0] else {
            panic!("expected folded conv first");
        };
        assert_eq!((c2.kh, c2.kw, c2.stride, c2.pad), (6, 6, 2, 2));
        let x = random_batch(12, 4, 64);
        let (y0, _) = forward_batch(&m, &x, None).unwrap();
        let (y1, _) = forward_batch(&folded, &x, None).unwrap();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_small_folds_both_pools_and_agrees() {
        let m = build_arch("conv-small", Shape::Image { c: 1, h: 8, w: 8 }, 4, 0.146, 0.0, 5)
            .unwrap();
        let folded = fold_avgpool(&m).unwrap();
        assert_eq!(folded.layers.len(), m.layers.len() - 2);
        assert!(!folded.layers.iter().any(|l| matches!(l, Layer::AvgPool2d { .. })));
        let x = random_batch(5, 3, 64);
        let (y0, _) = forward_batch(&m, &x, None).unwrap();
        let (y1, _) = forward_batch(&folded, &x, None).unwrap();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_pool_fold_is_a_noop_on_outputs() {
        let mut rng = substream(13, "fold-identity", 0);
        let dist = rand::distributions::Uniform::new(-0.5, 0.5);
        let w = Array2::from_shape_simple_fn((4, 18), || rng.sample(dist));
        let m = NetworkModel {
            input_shape: Shape::Image { c: 2, h: 3, w: 3 },
            layers: vec![
                Layer::AvgPool2d { cfg: PoolConfig { ph: 1, pw: 1, stride: 1 } },
                Layer::Dense { w: w.clone() },
                activation(4, 0.146),
                classifier(13, 2, 4),
            ],
            meta: ModelMeta::default(),
        };
        let folded = fold_avgpool(&m).unwrap();
        let Layer::Dense { w: w2 } = &folded.layers[0] else {
            panic!("expected dense first");
        };
        assert_eq!(&w, w2);
        let x = random_batch(13, 3, 18);
        let (y0, _) = forward_batch(&m, &x, None).unwrap();
        let (y1, _) = forward_batch(&folded, &x, None).unwrap();
        assert_eq!(y0, y1);
    }

    #[test]
    fn fold_without_foldable_pair_errors() {
        let m = build_arch("mlp-small", Shape::Flat(64), 10, 0.146, 0.0, 3).unwrap();
        assert!(matches!(fold_avgpool(&m), Err(Error::InvalidModel(_))));
    }
}
