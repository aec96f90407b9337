//! Backpropagation through the smoothed-LIF network, minibatch SGD with
//! momentum, and finite-difference gradient verification.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;

use crate::error::Error;
use crate::network::{
    avgpool_backward, chw_to_rows, col2im, conv_output_hw, evaluate_static, forward_batch,
    im2col, ActivationTrace, Layer, NetworkModel, NoiseGate, NoiseStreams, Shape,
};
use crate::neuron::{soft_lif_deriv, LifParams, SoftLifConfig, ACTIVATION_SCALE, DEFAULT_GAMMA};
use crate::rng::substream;
use crate::Result;

/// Smoothing width over the course of training. The default is constant;
/// the annealed variant interpolates geometrically per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaSchedule {
    Constant(f64),
    Anneal { start: f64, end: f64 },
}

impl GammaSchedule {
    pub fn at(&self, epoch: u32, total_epochs: u32) -> f64 {
        match *self {
            GammaSchedule::Constant(g) => g,
            GammaSchedule::Anneal { start, end } => {
                if total_epochs <= 1 {
                    return end;
                }
                let t = epoch as f64 / (total_epochs - 1) as f64;
                start * (end / start).powf(t)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            GammaSchedule::Constant(g) => g >= 0.0 && g.is_finite(),
            GammaSchedule::Anneal { start, end } => {
                start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("invalid gamma schedule {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sigma: f64,
    pub gamma: GammaSchedule,
    pub seed: u64,
    pub gate: NoiseGate,
    /// Reuse one noise draw per example across epochs instead of
    /// resampling per presentation.
    pub freeze_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 100,
            lr: 0.05,
            lr_decay: 0.95,
            momentum: 0.9,
            weight_decay: 1e-4,
            sigma: 0.0,
            gamma: GammaSchedule::Constant(DEFAULT_GAMMA),
            seed: 0,
            gate: NoiseGate::Current,
            freeze_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be at least 1".to_string()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParam(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::InvalidParam(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParam(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        self.gamma.validate()
    }
}

/// Per-layer gradient (or momentum) tensors, mirroring the trainable
/// parameters of each layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    None,
    Dense { dw: Array2<f64> },
    Conv2d { dw: Array2<f64> },
    SoftLif { dbias: Array1<f64> },
    Softmax { dw: Array2<f64>, db: Array1<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<LayerGrads>);

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        let g = model
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { w } => LayerGrads::Dense { dw: Array2::zeros(w.dim()) },
                Layer::Conv2d { w, .. } => LayerGrads::Conv2d { dw: Array2::zeros(w.dim()) },
                Layer::AvgPool2d { .. } => LayerGrads::None,
                Layer::SoftLif { bias, .. } => {
                    LayerGrads::SoftLif { dbias: Array1::zeros(bias.len()) }
                }
                Layer::Softmax { w, b } => LayerGrads::Softmax {
                    dw: Array2::zeros(w.dim()),
                    db: Array1::zeros(b.len()),
                },
            })
            .collect();
        Gradients(g)
    }
}

/// Mean negative log-likelihood of the labels under `probs`.
pub fn cross_entropy_loss(probs: &Array2<f64>, labels: &[u8]) -> f64 {
    assert_eq!(probs.nrows(), labels.len());
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y as usize]].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

fn layer_input_shapes(model: &NetworkModel) -> Result<Vec<Shape>> {
    let mut shapes = Vec::with_capacity(model.layers.len());
    let mut shape = model.input_shape;
    for layer in &model.layers {
        shapes.push(shape);
        shape = layer.output_shape(&shape)?;
    }
    Ok(shapes)
}

/// Gradients of the batch-mean cross-entropy at the trace's inputs. Noise
/// added during the forward pass is treated as a constant, so gradients
/// flow through the smoothed rate at the pre-noise current.
pub fn backward(model: &NetworkModel, trace: &ActivationTrace, labels: &[u8]) -> Result<Gradients> {
    let n = model.layers.len();
    if trace.inputs.len() != n || trace.probs.nrows() != labels.len() {
        return Err(Error::InvalidModel("activation trace does not match model/batch".to_string()));
    }
    if !matches!(model.layers.last(), Some(Layer::Softmax { .. })) {
        return Err(Error::InvalidModel("backward requires a softmax classifier head".to_string()));
    }
    let shapes = layer_input_shapes(model)?;
    for (i, x) in trace.inputs.iter().enumerate() {
        if x.ncols() != shapes[i].len() {
            return Err(Error::InvalidModel(format!("trace width mismatch at layer {i}")));
        }
    }

    let batch = labels.len() as f64;
    // combined softmax + cross-entropy gradient at the logits
    let mut grad = trace.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y as usize]] -= 1.0;
    }
    grad /= batch;

    let mut grads = vec![LayerGrads::None; n];
    for i in (0..n).rev() {
        let x = &trace.inputs[i];
        match &model.layers[i] {
            Layer::Softmax { w, .. } => {
                grads[i] = LayerGrads::Softmax { dw: grad.t().dot(x), db: grad.sum_axis(Axis(0)) };
                grad = grad.dot(w);
            }
            Layer::Dense { w } => {
                grads[i] = LayerGrads::Dense { dw: grad.t().dot(x) };
                grad = if i == 0 { Array2::zeros(x.dim()) } else { grad.dot(w) };
            }
            Layer::SoftLif { lif, cfg, gain, bias } => {
                let j = x * gain + bias;
                let dj = (&grad * &j.mapv(|v| soft_lif_deriv(lif, cfg.gamma, v)))
                    * ACTIVATION_SCALE;
                grads[i] = LayerGrads::SoftLif { dbias: dj.sum_axis(Axis(0)) };
                grad = &dj * gain;
            }
            Layer::Conv2d { cfg, w } => {
                let Shape::Image { c, h, w: iw } = shapes[i] else { unreachable!() };
                let (oh, ow) = conv_output_hw(h, iw, cfg).expect("validated");
                let gy = chw_to_rows(&grad, cfg.out_c, oh, ow);
                let (cols, _, _) = im2col(x, c, h, iw, cfg);
                grads[i] = LayerGrads::Conv2d { dw: gy.t().dot(&cols) };
                grad = if i == 0 {
                    Array2::zeros(x.dim())
                } else {
                    col2im(&gy.dot(w), x.nrows(), c, h, iw, cfg)
                };
            }
            Layer::AvgPool2d { cfg } => {
                let Shape::Image { c, h, w: iw } = shapes[i] else { unreachable!() };
                grad = avgpool_backward(&grad, c, h, iw, cfg);
            }
        }
    }
    Ok(Gradients(grads))
}

fn axpy2(w: &mut Array2<f64>, g: &Array2<f64>, v: &mut Array2<f64>, lr: f64, mu: f64, wd: f64) {
    Zip::from(w).and(g).and(v).for_each(|w, &g, v| {
        *v = mu * *v - lr * (g + wd * *w);
        *w += *v;
    });
}

fn axpy1(w: &mut Array1<f64>, g: &Array1<f64>, v: &mut Array1<f64>, lr: f64, mu: f64, wd: f64) {
    Zip::from(w).and(g).and(v).for_each(|w, &g, v| {
        *v = mu * *v - lr * (g + wd * *w);
        *w += *v;
    });
}

/// One optimizer step: v' = mu*v - lr*(g + wd*w); w' = w + v'. Weight
/// decay applies uniformly to every trainable tensor.
pub fn sgd_momentum_step(
    model: &mut NetworkModel,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(model.layers.len(), grads.0.len());
    assert_eq!(model.layers.len(), velocity.0.len());
    for ((layer, g), v) in model.layers.iter_mut().zip(&grads.0).zip(&mut velocity.0) {
        match (layer, g, v) {
            (Layer::Dense { w }, LayerGrads::Dense { dw }, LayerGrads::Dense { dw: vw }) => {
                axpy2(w, dw, vw, lr, momentum, weight_decay);
            }
            (Layer::Conv2d { w, .. }, LayerGrads::Conv2d { dw }, LayerGrads::Conv2d { dw: vw }) => {
                axpy2(w, dw, vw, lr, momentum, weight_decay);
            }
            (
                Layer::SoftLif { bias, .. },
                LayerGrads::SoftLif { dbias },
                LayerGrads::SoftLif { dbias: vb },
            ) => {
                axpy1(bias, dbias, vb, lr, momentum, weight_decay);
            }
            (
                Layer::Softmax { w, b },
                LayerGrads::Softmax { dw, db },
                LayerGrads::Softmax { dw: vw, db: vb },
            ) => {
                axpy2(w, dw, vw, lr, momentum, weight_decay);
                axpy1(b, db, vb, lr, momentum, weight_decay);
            }
            (Layer::AvgPool2d { .. }, LayerGrads::None, LayerGrads::None) => {}
            _ => panic!("gradient structure does not match model layers"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_error: f64,
    pub wall_time: f64,
}

/// Trains in place over shuffled minibatches with fresh noise per
/// presentation. Metrics carry one row per epoch; everything except
/// `wall_time` is reproducible from the seed.
pub fn train(
    model: &mut NetworkModel,
    train_x: &Array2<f64>,
    train_y: &[u8],
    val_x: &Array2<f64>,
    val_y: &[u8],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    assert_eq!(train_x.nrows(), train_y.len());
    assert_eq!(val_x.nrows(), val_y.len());
    if train_y.is_empty() {
        return Err(Error::InvalidParam("empty training set".to_string()));
    }

    model.meta.sigma = cfg.sigma;
    model.meta.seed = cfg.seed;
    stamp_soft_lif(model, cfg.gamma.at(0, cfg.epochs.max(1)), cfg.sigma);

    let n = train_y.len();
    let mut velocity = Gradients::zeros_like(model);
    let mut metrics = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        stamp_soft_lif(model, cfg.gamma.at(epoch, cfg.epochs), cfg.sigma);
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64));

        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = train_x.select(Axis(0), chunk);
            let yb: Vec<u8> = chunk.iter().map(|&i| train_y[i]).collect();
            let ids = chunk.iter().map(|&i| {
                if cfg.freeze_noise {
                    i as u64
                } else {
                    epoch as u64 * n as u64 + i as u64
                }
            });
            let mut noise = NoiseStreams::for_examples(cfg.seed, cfg.sigma, cfg.gate, ids);
            let (probs, trace) = match forward_batch(model, &xb, Some(&mut noise)) {
                Ok(out) => out,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch: epoch as usize,
                        batch: bi,
                        value: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let loss = cross_entropy_loss(&probs, &yb);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch as usize, batch: bi, value: loss });
            }
            loss_sum += loss * yb.len() as f64;
            let grads = backward(model, &trace, &yb)?;
            sgd_momentum_step(model, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay);
        }

        let val_error = evaluate_static(model, val_x, val_y, cfg.batch_size)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            val_error,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    model.meta.epochs = cfg.epochs;
    Ok(metrics)
}

fn stamp_soft_lif(model: &mut NetworkModel, gamma: f64, sigma: f64) {
    model.meta.gamma = gamma;
    for layer in &mut model.layers {
        if let Layer::SoftLif { cfg, .. } = layer {
            *cfg = SoftLifConfig { gamma, sigma };
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub params_checked: usize,
}

fn tensors_mut(layer: &mut Layer) -> Vec<&mut [f64]> {
    match layer {
        Layer::Dense { w } => vec![w.as_slice_mut().expect("standard layout")],
        Layer::Conv2d { w, .. } => vec![w.as_slice_mut().expect("standard layout")],
        Layer::AvgPool2d { .. } => vec![],
        Layer::SoftLif { bias, .. } => vec![bias.as_slice_mut().expect("standard layout")],
        Layer::Softmax { w, b } => vec![
            w.as_slice_mut().expect("standard layout"),
            b.as_slice_mut().expect("standard layout"),
        ],
    }
}

fn grad_tensors(g: &LayerGrads) -> Vec<&[f64]> {
    match g {
        LayerGrads::None => vec![],
        LayerGrads::Dense { dw } | LayerGrads::Conv2d { dw } => {
            vec![dw.as_slice().expect("standard layout")]
        }
        LayerGrads::SoftLif { dbias } => vec![dbias.as_slice().expect("standard layout")],
        LayerGrads::Softmax { dw, db } => vec![
            dw.as_slice().expect("standard layout"),
            db.as_slice().expect("standard layout"),
        ],
    }
}

/// Compares every analytic gradient against a central finite difference
/// of the noise-free loss. Relative error uses max(|fd|, |analytic|,
/// 1e-8) as denominator. The model is restored exactly on return.
pub fn grad_check(
    model: &mut NetworkModel,
    x: &Array2<f64>,
    labels: &[u8],
    h: f64,
) -> Result<GradCheckReport> {
    assert!(h > 0.0);
    let (_, trace) = forward_batch(model, x, None)?;
    let analytic = backward(model, &trace, labels)?;

    let loss_at = |m: &NetworkModel| -> Result<f64> {
        let (probs, _) = forward_batch(m, x, None)?;
        Ok(cross_entropy_loss(&probs, labels))
    };

    let mut max_rel_err = 0.0f64;
    let mut params_checked = 0usize;
    for li in 0..model.layers.len() {
        let n_tensors = grad_tensors(&analytic.0[li]).len();
        for ti in 0..n_tensors {
            let len = grad_tensors(&analytic.0[li])[ti].len();
            for k in 0..len {
                let orig = tensors_mut(&mut model.layers[li])[ti][k];
                tensors_mut(&mut model.layers[li])[ti][k] = orig + h;
                let lp = loss_at(model)?;
                tensors_mut(&mut model.layers[li])[ti][k] = orig - h;
                let lm = loss_at(model)?;
                tensors_mut(&mut model.layers[li])[ti][k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let g = grad_tensors(&analytic.0[li])[ti][k];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
                if rel > max_rel_err {
                    max_rel_err = rel;
                }
                params_checked += 1;
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, params_checked })
}

/// Small dense/soft-LIF/classifier stack used by the gradient-check
/// harness: 8 inputs, 6 hidden units, 3 classes.
pub fn toy_gradcheck_model(gamma: f64, seed: u64) -> NetworkModel {
    crate::network::build_arch(
        "mlp-small",
        Shape::Flat(8),
        3,
        gamma,
        0.0,
        seed,
    )
    .map(|mut m| {
        // shrink the hidden layer from the stock 64 units to 6
        let mut rng = substream(seed, "toy", 0);
        use rand::Rng;
        let dist = rand::distributions::Uniform::new_inclusive(-0.35, 0.35);
        m.layers[0] = Layer::Dense {
            w: Array2::from_shape_simple_fn((6, 8), || rng.sample(dist) as f32 as f64),
        };
        m.layers[1] = Layer::SoftLif {
            lif: LifParams::default(),
            cfg: SoftLifConfig { gamma, sigma: 0.0 },
            gain: Array1::ones(6),
            bias: Array1::ones(6),
        };
        m.layers[2] = Layer::Softmax {
            w: Array2::from_shape_simple_fn((3, 6), || rng.sample(dist) as f32 as f64),
            b: Array1::zeros(3),
        };
        m
    })
    .expect("static toy construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_arch, predict};
    use ndarray::array;
    use rand::Rng;

    fn toy_batch(seed: u64, n: usize) -> (Array2<f64>, Vec<u8>) {
        let mut rng = substream(seed, "toy-batch", 0);
        let dist = rand::distributions::Uniform::new(0.0, 1.0);
        let x = Array2::from_shape_simple_fn((n, 8), || rng.sample(dist));
        let y = (0..n).map(|_| rng.gen_range(0..3u8)).collect();
        (x, y)
    }

    #[test]
    fn cross_entropy_known_values() {
        let uniform = Array2::from_elem((1, 10), 0.1);
        assert!((cross_entropy_loss(&uniform, &[3]) - 10.0f64.ln()).abs() < 1e-12);
        let mut certain = Array2::zeros((1, 4));
        certain[[0, 2]] = 1.0;
        assert_eq!(cross_entropy_loss(&certain, &[2]), 0.0);
        let half = array![[0.5, 0.5]];
        assert!((cross_entropy_loss(&half, &[0]) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classifier_bias_gradient_is_probs_minus_onehot() {
        let mut m = toy_gradcheck_model(0.2, 5);
        if let Layer::Softmax { w, b } = &mut m.layers[2] {
            w.fill(0.0);
            b.fill(0.0);
        }
        let (x, _) = toy_batch(5, 1);
        let (_, trace) = forward_batch(&m, &x, None).unwrap();
        let grads = backward(&m, &trace, &[1]).unwrap();
        let LayerGrads::Softmax { db, .. } = &grads.0[2] else { panic!() };
        for (k, &g) in db.iter().enumerate() {
            let want = if k == 1 { 1.0 / 3.0 - 1.0 } else { 1.0 / 3.0 };
            assert!((g - want).abs() < 1e-12, "class {k}: {g} vs {want}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_toy_net() {
        for seed in 0..10 {
            let mut m = toy_gradcheck_model(0.2, seed);
            let (x, y) = toy_batch(seed, 5);
            let report = grad_check(&mut m, &x, &y, 1e-4).unwrap();
            assert_eq!(report.params_checked, 6 * 8 + 6 + 3 * 6 + 3);
            assert!(
                report.max_rel_err < 1e-3,
                "seed {seed}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_conv_net() {
        let mut m = build_arch(
            "conv-small",
            Shape::Image { c: 1, h: 8, w: 8 },
            3,
            0.2,
            0.0,
            3,
        )
        .unwrap();
        // keep logits O(1): hidden rates reach hundreds of spikes/s, and a
        // large loss turns the difference quotient on dead-unit weights
        // into pure cancellation noise
        if let Layer::Softmax { w, .. } = m.layers.last_mut().unwrap() {
            w.mapv_inplace(|v| v * 0.05);
        }
        let mut rng = substream(3, "conv-batch", 0);
        let dist = rand::distributions::Uniform::new(0.0, 1.0);
        let x = Array2::from_shape_simple_fn((3, 64), || rng.sample(dist));
        let y: Vec<u8> = vec![0, 2, 1];
        // looser bound than the toy net: the difference quotient here runs
        // through two conv/pool stages and hundreds-of-spikes/s activations,
        // leaving a ~2e-3 floor of truncation plus rounding noise on the
        // smallest gradient components; wiring bugs show up at O(0.1..1)
        let report = grad_check(&mut m, &x, &y, 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-2, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let m = toy_gradcheck_model(0.2, 9);
        let (x, y) = toy_batch(9, 3);
        let single = |i: usize| {
            let xi = x.slice(ndarray::s![i..i + 1, ..]).to_owned();
            let (_, trace) = forward_batch(&m, &xi, None).unwrap();
            backward(&m, &trace, &y[i..i + 1]).unwrap()
        };
        let (_, trace) = forward_batch(&m, &x, None).unwrap();
        let whole = backward(&m, &trace, &y).unwrap();
        let parts: Vec<Gradients> = (0..3).map(single).collect();
        for li in 0..m.layers.len() {
            let got = grad_tensors(&whole.0[li]);
            for (ti, tensor) in got.iter().enumerate() {
                for (k, &g) in tensor.iter().enumerate() {
                    let mean: f64 =
                        parts.iter().map(|p| grad_tensors(&p.0[li])[ti][k]).sum::<f64>() / 3.0;
                    assert!((g - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut m = NetworkModel {
            input_shape: Shape::Flat(1),
            layers: vec![Layer::Dense { w: array![[1.0]] }],
            meta: Default::default(),
        };
        let grads = Gradients(vec![LayerGrads::Dense { dw: array![[1.0]] }]);
        let mut vel = Gradients::zeros_like(&m);
        sgd_momentum_step(&mut m, &grads, &mut vel, 0.1, 0.9, 0.0);
        let Layer::Dense { w } = &m.layers[0] else { panic!() };
        assert!((w[[0, 0]] - 0.9).abs() < 1e-15);
        let LayerGrads::Dense { dw: v } = &vel.0[0] else { panic!() };
        assert!((v[[0, 0]] + 0.1).abs() < 1e-15);

        // second step folds momentum in: v = 0.9*(-0.1) - 0.1*1 = -0.19
        sgd_momentum_step(&mut m, &grads, &mut vel, 0.1, 0.9, 0.0);
        let Layer::Dense { w } = &m.layers[0] else { panic!() };
        assert!((w[[0, 0]] - (0.9 - 0.19)).abs() < 1e-15);

        // lr = 0 leaves the model untouched
        let before = m.clone();
        let mut vel = Gradients::zeros_like(&m);
        sgd_momentum_step(&mut m, &grads, &mut vel, 0.0, 0.9, 1e-4);
        assert_eq!(m, before);
    }

    #[test]
    fn loss_decreases_on_fixed_batch_at_small_lr() {
        let mut m = toy_gradcheck_model(0.2, 4);
        let (x, y) = toy_batch(4, 12);
        let mut vel = Gradients::zeros_like(&m);
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (probs, trace) = forward_batch(&m, &x, None).unwrap();
            let loss = cross_entropy_loss(&probs, &y);
            assert!(loss <= prev + 1e-12, "loss rose: {prev} -> {loss}");
            prev = loss;
            let grads = backward(&m, &trace, &y).unwrap();
            sgd_momentum_step(&mut m, &grads, &mut vel, 1e-3, 0.0, 0.0);
        }
    }

    #[test]
    fn train_is_deterministic_and_lr_zero_is_identity() {
        let (x, y) = toy_batch(8, 40);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.05,
            sigma: 10.0,
            gamma: GammaSchedule::Constant(0.2),
            seed: 42,
            ..TrainConfig::default()
        };
        let mut m1 = toy_gradcheck_model(0.2, 8);
        let mut m2 = m1.clone();
        let r1 = train(&mut m1, &x, &y, &x, &y, &cfg).unwrap();
        let r2 = train(&mut m2, &x, &y, &x, &y, &cfg).unwrap();
        assert_eq!(m1, m2);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.val_error, b.val_error);
        }

        let mut frozen = toy_gradcheck_model(0.2, 8);
        let before = frozen.clone();
        let cfg0 = TrainConfig { lr: 0.0, epochs: 2, sigma: 0.0, ..cfg };
        train(&mut frozen, &x, &y, &x, &y, &cfg0).unwrap();
        assert_eq!(frozen.layers, before.layers);
    }

    #[test]
    fn frozen_noise_repeats_across_epochs() {
        // lr = 0 keeps parameters fixed, so per-epoch loss differences can
        // only come from the noise draws
        let (x, y) = toy_batch(14, 30);
        let base = TrainConfig {
            epochs: 2,
            batch_size: 10,
            lr: 0.0,
            sigma: 10.0,
            gamma: GammaSchedule::Constant(0.2),
            seed: 3,
            ..TrainConfig::default()
        };
        let mut m = toy_gradcheck_model(0.2, 14);
        let frozen = train(
            &mut m.clone(),
            &x,
            &y,
            &x,
            &y,
            &TrainConfig { freeze_noise: true, ..base.clone() },
        )
        .unwrap();
        assert_eq!(frozen[0].train_loss, frozen[1].train_loss);
        let fresh = train(&mut m, &x, &y, &x, &y, &base).unwrap();
        assert_ne!(fresh[0].train_loss, fresh[1].train_loss);
    }

    #[test]
    fn training_fits_a_separable_toy_problem() {
        // three orthogonal input prototypes with small jitter
        let n = 60;
        let mut rng = substream(77, "toy-sep", 0);
        let dist = rand::distributions::Uniform::new(0.0, 0.2);
        let mut x = Array2::zeros((n, 8));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 3) as u8;
            for k in 0..8 {
                x[[i, k]] = rng.sample(dist);
            }
            x[[i, class as usize * 2]] += 1.0;
            y.push(class);
        }
        let mut m = toy_gradcheck_model(DEFAULT_GAMMA, 7);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 10,
            lr: 0.02,
            sigma: 0.0,
            gamma: GammaSchedule::Constant(DEFAULT_GAMMA),
            seed: 7,
            ..TrainConfig::default()
        };
        train(&mut m, &x, &y, &x, &y, &cfg).unwrap();
        let err = evaluate_static(&m, &x, &y, 20).unwrap();
        assert!(err < 0.05, "train error {err}");
        let (probs, _) = forward_batch(&m, &x, None).unwrap();
        assert_eq!(predict(&probs).len(), n);
    }

    #[test]
    fn divergence_is_reported_with_location() {
        // the bounded activation keeps forward values finite under huge
        // gradient steps, but lr*wd >> 1 makes every weight overshoot and
        // grow geometrically until it overflows
        let (x, y) = toy_batch(2, 20);
        let mut m = toy_gradcheck_model(0.2, 2);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 5,
            lr: 1e9,
            momentum: 0.0,
            weight_decay: 1.0,
            gamma: GammaSchedule::Constant(0.2),
            ..TrainConfig::default()
        };
        let err = train(&mut m, &x, &y, &x, &y, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "got {err}");
    }

    #[test]
    fn gamma_schedule_endpoints() {
        let c = GammaSchedule::Constant(0.3);
        assert_eq!(c.at(0, 10), 0.3);
        assert_eq!(c.at(9, 10), 0.3);
        let a = GammaSchedule::Anneal { start: 1.0, end: 0.01 };
        assert!((a.at(0, 5) - 1.0).abs() < 1e-12);
        assert!((a.at(4, 5) - 0.01).abs() < 1e-12);
        let mid = a.at(2, 5);
        assert!(mid < 1.0 && mid > 0.01);
        assert!(GammaSchedule::Anneal { start: 0.0, end: 0.1 }.validate().is_err());
    }

    #[test]
    fn train_rejects_bad_configs() {
        let (x, y) = toy_batch(1, 4);
        let mut m = toy_gradcheck_model(0.2, 1);
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
            TrainConfig { sigma: -1.0, ..TrainConfig::default() },
        ] {
            assert!(train(&mut m, &x, &y, &x, &y, &bad).is_err());
        }
    }
}
