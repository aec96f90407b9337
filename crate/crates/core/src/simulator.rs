//! Clock-driven simulation of spiking networks: constant-current image
//! presentation, synchronous stepping of every population, alpha-filtered
//! spike trains between stages, and a time-averaged linear readout.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rayon::prelude::*;

use crate::converter::{SpikingNetwork, SpikingStage};
use crate::error::Error;
use crate::network::{avgpool_forward, conv_forward, Shape};
use crate::neuron::{lif_step, NeuronState, ACTIVATION_SCALE};
use crate::rng::substream;
use crate::synapse::{AlphaBank, AlphaParams};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Step size in seconds.
    pub dt: f64,
    /// Presentation time per image.
    pub t_present: f64,
    /// Time discarded before readout averaging begins.
    pub t_settle: f64,
    pub seed: u64,
    /// Start membranes at zero instead of a seeded uniform draw in
    /// `[0, v_th)`; uniform starts desynchronize otherwise identical
    /// neurons and avoid artificial spike locking.
    pub zero_init_voltages: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_present: 0.2,
            t_settle: 0.1,
            seed: 0,
            zero_init_voltages: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, tau_s: f64) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0 && self.dt < tau_s) {
            return Err(Error::InvalidParam(format!(
                "dt must lie in (0, tau_s = {tau_s}), got {}",
                self.dt
            )));
        }
        if !(self.t_present.is_finite() && self.t_present >= self.dt) {
            return Err(Error::InvalidParam(format!(
                "t_present must cover at least one step of dt = {}, got {}",
                self.dt, self.t_present
            )));
        }
        if !(self.t_settle.is_finite() && self.t_settle >= 0.0 && self.t_settle < self.t_present) {
            return Err(Error::InvalidParam(format!(
                "t_settle must lie in [0, t_present = {}), got {}",
                self.t_present, self.t_settle
            )));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.t_present / self.dt).round() as usize
    }

    fn settle_steps(&self) -> usize {
        (self.t_settle / self.dt).round() as usize
    }
}

/// Spiking activity of one LIF stage over a presentation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivity {
    /// Index of the stage within the network.
    pub stage: usize,
    pub neurons: usize,
    pub spikes: u64,
    /// Spikes per neuron per second of presentation.
    pub mean_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSpike {
    pub t: f64,
    pub stage: usize,
    pub neuron: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    /// Classifier logits averaged over the readout window.
    pub scores: Vec<f64>,
    /// Argmax of `scores`; ties go to the lowest index.
    pub predicted: usize,
    /// One entry per LIF stage, in network order.
    pub activity: Vec<LayerActivity>,
    /// Per LIF stage, per neuron: readout-window time average of the
    /// alpha-filtered spike train, in spikes/s.
    pub mean_filtered: Vec<Vec<f64>>,
    /// Smallest interspike interval observed on any single neuron, exact
    /// (sub-step spike times), or None with fewer than two spikes anywhere.
    pub min_isi: Option<f64>,
    pub raster: Option<Vec<RasterSpike>>,
    pub steps: usize,
}

struct Population {
    stage: usize,
    lif: crate::neuron::LifParams,
    states: Vec<NeuronState>,
    bank: AlphaBank,
    impulses: Vec<f64>,
    last_spike: Vec<f64>,
    filtered_acc: Vec<f64>,
    spikes: u64,
}

/// Simulates a single image with the default per-image state seed. Use
/// `simulate_image_at` to place the image inside a larger evaluation so its
/// initial voltages are reproducible independently of batch composition.
pub fn simulate_image(
    net: &SpikingNetwork,
    image: ArrayView1<f64>,
    cfg: &SimConfig,
) -> Result<SimRecord> {
    simulate_image_at(net, image, cfg, 0)
}

pub fn simulate_image_at(
    net: &SpikingNetwork,
    image: ArrayView1<f64>,
    cfg: &SimConfig,
    image_index: u64,
) -> Result<SimRecord> {
    run_image(net, image, cfg, image_index, false)
}

fn run_image(
    net: &SpikingNetwork,
    image: ArrayView1<f64>,
    cfg: &SimConfig,
    image_index: u64,
    want_raster: bool,
) -> Result<SimRecord> {
    cfg.validate(net.tau_s)?;
    let violations = net.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations.join("; ")));
    }
    let shapes = net.stage_shapes()?;
    if image.len() != net.input_shape.len() {
        return Err(Error::Shape {
            layer: "input".into(),
            detail: format!(
                "network expects {} features, got {}",
                net.input_shape.len(),
                image.len()
            ),
        });
    }

    let alpha = AlphaParams { tau_s: net.tau_s };
    let mut pops: Vec<Population> = Vec::new();
    for (si, stage) in net.stages.iter().enumerate() {
        if let SpikingStage::Lif { lif, bias, .. } = stage {
            let n = bias.len();
            pops.push(Population {
                stage: si,
                lif: *lif,
                states: vec![NeuronState::default(); n],
                bank: AlphaBank::new(n, &alpha, cfg.dt),
                impulses: vec![0.0; n],
                last_spike: vec![f64::NEG_INFINITY; n],
                filtered_acc: vec![0.0; n],
                spikes: 0,
            });
        }
    }
    if !cfg.zero_init_voltages {
        let mut rng = substream(cfg.seed, "voltages", image_index);
        for pop in &mut pops {
            let v_th = pop.lif.v_th;
            for s in &mut pop.states {
                s.v = rng.gen::<f64>() * v_th;
            }
        }
    }

    let input = image.mapv(|v| v - net.meta.input_mean);
    let n_steps = cfg.n_steps();
    // rounding can push the settle boundary onto the last step; keep at
    // least one readout sample
    let settle = cfg.settle_steps().min(n_steps.saturating_sub(1));
    let window = n_steps.saturating_sub(settle).max(1) as f64;
    let mut readout_acc: Option<Array1<f64>> = None;
    let mut raster = want_raster.then(Vec::new);
    let mut min_isi = f64::INFINITY;

    for k in 0..n_steps {
        let mut signal = input.clone();
        let mut pop_i = 0usize;
        for (si, stage) in net.stages.iter().enumerate() {
            match stage {
                SpikingStage::Dense { w } => signal = w.dot(&signal),
                SpikingStage::Conv2d { cfg: cc, w } => {
                    let Shape::Image { c, h, w: iw } = shapes[si] else { unreachable!() };
                    let x = signal.insert_axis(Axis(0));
                    signal = conv_forward(&x, c, h, iw, cc, w).remove_axis(Axis(0));
                }
                SpikingStage::AvgPool2d { cfg: pc } => {
                    let Shape::Image { c, h, w: iw } = shapes[si] else { unreachable!() };
                    let x = signal.insert_axis(Axis(0));
                    signal = avgpool_forward(&x, c, h, iw, pc).remove_axis(Axis(0));
                }
                SpikingStage::Lif { lif, gain, bias } => {
                    let pop = &mut pops[pop_i];
                    for i in 0..pop.states.len() {
                        let j = gain[i] * signal[i] + bias[i];
                        if !j.is_finite() {
                            return Err(Error::NonFinite {
                                context: format!("stage {si} (lif) input current at step {k}"),
                            });
                        }
                        let (next, spike) = lif_step(lif, pop.states[i], j, cfg.dt);
                        pop.states[i] = next;
                        pop.impulses[i] = match spike {
                            Some(offset) => {
                                let t = k as f64 * cfg.dt + offset;
                                if pop.last_spike[i].is_finite() {
                                    min_isi = min_isi.min(t - pop.last_spike[i]);
                                }
                                pop.last_spike[i] = t;
                                pop.spikes += 1;
                                if let Some(r) = raster.as_mut() {
                                    r.push(RasterSpike { t, stage: si, neuron: i });
                                }
                                1.0 / cfg.dt
                            }
                            None => 0.0,
                        };
                    }
                    pop.bank.step(&pop.impulses);
                    let out = pop.bank.output();
                    if k >= settle {
                        for (acc, &v) in pop.filtered_acc.iter_mut().zip(out) {
                            *acc += v;
                        }
                    }
                    // downstream stages see the filtered rate on the same
                    // scaled footing the static network trained with
                    signal = out.iter().map(|&v| ACTIVATION_SCALE * v).collect();
                    pop_i += 1;
                }
                SpikingStage::Readout { .. } => {
                    if k >= settle {
                        match readout_acc.as_mut() {
                            Some(acc) => *acc += &signal,
                            None => readout_acc = Some(signal.clone()),
                        }
                    }
                }
            }
        }
    }

    let Some(SpikingStage::Readout { w, b }) = net.stages.last() else {
        unreachable!("validated above");
    };
    let mean_in = readout_acc.expect("readout window is nonempty") / window;
    let scores_arr = w.dot(&mean_in) + b;
    if !scores_arr.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "readout scores".into() });
    }
    let scores = scores_arr.to_vec();
    let predicted = argmax(&scores);

    let activity = pops
        .iter()
        .map(|p| LayerActivity {
            stage: p.stage,
            neurons: p.states.len(),
            spikes: p.spikes,
            mean_rate: p.spikes as f64 / (p.states.len() as f64 * cfg.t_present),
        })
        .collect();
    let mean_filtered = pops
        .iter()
        .map(|p| p.filtered_acc.iter().map(|v| v / window).collect())
        .collect();
    if let Some(r) = raster.as_mut() {
        r.sort_by(|a, b| {
            a.t.partial_cmp(&b.t)
                .unwrap()
                .then(a.stage.cmp(&b.stage))
                .then(a.neuron.cmp(&b.neuron))
        });
    }
    Ok(SimRecord {
        scores,
        predicted,
        activity,
        mean_filtered,
        min_isi: min_isi.is_finite().then_some(min_isi),
        raster,
        steps: n_steps,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &x) in v.iter().enumerate() {
        if x > best_v {
            best_v = x;
            best = k;
        }
    }
    best
}

/// Aggregate results of simulating a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingEval {
    pub error_rate: f64,
    /// Mean rate per LIF stage (spikes per neuron per second), network order.
    pub layer_rates: Vec<f64>,
    /// Mean rate over every spiking neuron in the network.
    pub mean_rate: f64,
    /// Smallest interspike interval across all images and neurons.
    pub min_isi: Option<f64>,
    pub records: Vec<SimRecord>,
}

/// Simulates every row of `images` independently (in parallel) and
/// aggregates classification error and firing statistics. Results are
/// byte-identical regardless of worker count: each image's simulation is
/// fully determined by (cfg.seed, its row index).
pub fn evaluate_spiking(
    net: &SpikingNetwork,
    images: &Array2<f64>,
    labels: &[u8],
    cfg: &SimConfig,
) -> Result<SpikingEval> {
    if images.nrows() == 0 {
        return Err(Error::InvalidParam("empty evaluation set".into()));
    }
    if images.nrows() != labels.len() {
        return Err(Error::InvalidParam(format!(
            "{} images but {} labels",
            images.nrows(),
            labels.len()
        )));
    }
    let records: Vec<SimRecord> = (0..images.nrows())
        .into_par_iter()
        .map(|i| run_image(net, images.row(i), cfg, i as u64, false))
        .collect::<Result<_>>()?;

    let wrong = records
        .iter()
        .zip(labels)
        .filter(|(r, &y)| r.predicted != y as usize)
        .count();
    let n_stages = records[0].activity.len();
    let mut layer_rates = vec![0.0; n_stages];
    let mut total_spikes = 0u64;
    let mut total_neurons = 0usize;
    for (s, rate) in layer_rates.iter_mut().enumerate() {
        let spikes: u64 = records.iter().map(|r| r.activity[s].spikes).sum();
        let neurons = records[0].activity[s].neurons;
        *rate = spikes as f64 / (neurons as f64 * cfg.t_present * records.len() as f64);
        total_spikes += spikes;
        total_neurons += neurons;
    }
    let mean_rate =
        total_spikes as f64 / (total_neurons as f64 * cfg.t_present * records.len() as f64);
    let min_isi = records
        .iter()
        .filter_map(|r| r.min_isi)
        .min_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(SpikingEval {
        error_rate: wrong as f64 / labels.len() as f64,
        layer_rates,
        mean_rate,
        min_isi,
        records,
    })
}

/// Simulates one image with full spike recording and writes the raster as
/// text lines `time_s<TAB>stage_index<TAB>neuron_index`, time-sorted.
pub fn record_raster(
    net: &SpikingNetwork,
    image: ArrayView1<f64>,
    cfg: &SimConfig,
    path: impl AsRef<Path>,
) -> Result<SimRecord> {
    let record = run_image(net, image, cfg, 0, true)?;
    let mut out = String::new();
    for s in record.raster.as_ref().expect("raster requested") {
        out.push_str(&format!("{:.9}\t{}\t{}\n", s.t, s.stage, s.neuron));
    }
    std::fs::write(path, out)?;
    Ok(record)
}
