//! Variability of alpha-filtered spike trains as a function of drive
//! current: the statistics that motivate the additive Gaussian training
//! noise, and the estimate of its scale.

use rayon::prelude::*;

use crate::neuron::{lif_step, LifParams, NeuronState};
use crate::synapse::{AlphaParams, AlphaState, alpha_step};

/// Distribution of the filtered spike train of one LIF neuron held at a
/// constant current `j`, sampled every `dt` at steady state. All values are
/// in spikes/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariabilityStats {
    pub j: f64,
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

/// Steady-state filtered signal of a single neuron at constant current,
/// one sample per step over `duration` seconds.
///
/// The neuron starts at v = 0 and the filter at rest, so the run is fully
/// deterministic. Sampling begins only after the first-spike latency plus
/// ten filter time constants: near threshold the latency alone exceeds
/// 10 tau_s, and sampling earlier would mix the silent startup into the
/// statistics.
fn filtered_samples(p: &LifParams, tau_s: f64, j: f64, dt: f64, duration: f64) -> Vec<f64> {
    let alpha = AlphaParams { tau_s };
    let latency = if j > p.v_th {
        p.tau_rc * (j / (j - p.v_th)).ln()
    } else {
        0.0
    };
    let settle = ((latency + 10.0 * tau_s) / dt).ceil() as usize;
    let n_samples = (duration / dt).round() as usize;

    let mut state = NeuronState::default();
    let mut filter = AlphaState::default();
    let mut samples = Vec::with_capacity(n_samples);
    for k in 0..settle + n_samples {
        let (next, spike) = lif_step(p, state, j, dt);
        state = next;
        let u = if spike.is_some() { 1.0 / dt } else { 0.0 };
        filter = alpha_step(filter, &alpha, dt, u);
        if k >= settle {
            samples.push(filter.y2);
        }
    }
    samples
}

/// Computes per-current statistics of the steady-state filtered spike train
/// of a single LIF neuron, one entry per element of `j_grid`.
///
/// Statistics are taken over the continuous filtered signal sampled at every
/// step, not over per-spike values. Requires `duration >= 2` seconds and
/// `0 < dt < tau_s`; grid points are independent, so the work is parallel
/// and the result does not depend on worker count.
pub fn variability_stats(
    j_grid: &[f64],
    p: &LifParams,
    tau_s: f64,
    dt: f64,
    duration: f64,
) -> Vec<VariabilityStats> {
    assert!(tau_s.is_finite() && tau_s > 0.0, "tau_s must be positive");
    assert!(dt.is_finite() && dt > 0.0 && dt < tau_s, "dt must lie in (0, tau_s)");
    assert!(duration >= 2.0, "duration must be at least 2 s for stable statistics");
    j_grid
        .par_iter()
        .map(|&j| {
            let samples = filtered_samples(p, tau_s, j, dt, duration);
            summarize(j, samples)
        })
        .collect()
}

fn summarize(j: f64, mut samples: Vec<f64>) -> VariabilityStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n;
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    VariabilityStats {
        j,
        mean,
        median: percentile(&samples, 0.50),
        p25: percentile(&samples, 0.25),
        p75: percentile(&samples, 0.75),
        min: samples[0],
        max: *samples.last().unwrap(),
        std: var.sqrt(),
    }
}

/// Linear-interpolated percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// 50 currents uniformly spaced over (1.02, 30], the default averaging grid
/// for `estimate_sigma`: all comfortably suprathreshold, capped at the
/// largest drive seen in trained networks of the sizes built here. Uniform
/// spacing weights each current range by its width; spacing that piles
/// points near threshold would overweight the isolated-pulse regime, where
/// the deviation is about 2.5x larger than at high drive, and inflate the
/// average well past the variability a trained network actually meets.
pub fn default_sigma_grid() -> Vec<f64> {
    let (lo, hi, n) = (1.02f64, 30.0f64, 50);
    (1..=n)
        .map(|k| lo + (hi - lo) * k as f64 / n as f64)
        .collect()
}

/// Average steady-state standard deviation of the filtered spike train over
/// a grid of suprathreshold currents, in spikes/s. Five seconds of signal
/// per grid point at dt = 1 ms. This is the scale used for the additive
/// Gaussian noise during training.
pub fn estimate_sigma(p: &LifParams, tau_s: f64, j_grid: &[f64]) -> f64 {
    assert!(!j_grid.is_empty(), "sigma grid must be nonempty");
    let stds: Vec<f64> = j_grid
        .par_iter()
        .map(|&j| summarize(j, filtered_samples(p, tau_s, j, 1e-3, 5.0)).std)
        .collect();
    stds.iter().sum::<f64>() / stds.len() as f64
}

/// Renders statistics as tab-separated rows `j mean median p25 p75 min max`,
/// one row per grid point, no header.
pub fn emit_figure_data(stats: &[VariabilityStats]) -> String {
    let mut out = String::new();
    for s in stats {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.j, s.mean, s.median, s.p25, s.p75, s.min, s.max
        ));
    }
    out
}
