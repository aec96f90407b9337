//! Alpha-function synapse filtering.
//!
//! A spike train enters as impulses of area 1 (one spike contributes `1/dt`
//! for one step) and leaves as a smooth rate-like signal in spikes/s. The
//! continuous kernel is the unit-area alpha function
//! `h(t) = (t / tau_s^2) * exp(-t / tau_s)`, realized in discrete time as two
//! cascaded identical one-pole stages with pole `exp(-dt / tau_s)`. Each
//! stage is normalized to unit DC gain, so the cascade passes steady rates
//! through unchanged and the discrete impulse response sums to exactly one.

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaParams {
    pub tau_s: f64,
}

impl Default for AlphaParams {
    fn default() -> Self {
        Self { tau_s: 0.005 }
    }
}

impl AlphaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s.is_finite() && self.tau_s > 0.0) {
            return Err(Error::InvalidParam(format!(
                "tau_s must be positive, got {}",
                self.tau_s
            )));
        }
        Ok(())
    }
}

/// State of one alpha filter: the two cascaded stage outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlphaState {
    pub y1: f64,
    pub y2: f64,
}

/// Advance the filter one step of size `dt` with input `u` held over the
/// step; returns the new state. The output is `state.y2`. Stage two reads
/// stage one's previous output, so an impulse at step 0 produces zero
/// output at step 0 and peaks near `t = tau_s`, like the continuous kernel.
pub fn alpha_step(state: AlphaState, p: &AlphaParams, dt: f64, u: f64) -> AlphaState {
    let a = (-dt / p.tau_s).exp();
    let b = 1.0 - a;
    AlphaState {
        y2: a * state.y2 + b * state.y1,
        y1: a * state.y1 + b * u,
    }
}

/// A bank of alpha filters over a neuron population, with the decay
/// precomputed for a fixed `dt`.
#[derive(Debug, Clone)]
pub struct AlphaBank {
    a: f64,
    b: f64,
    y1: Vec<f64>,
    y2: Vec<f64>,
}

impl AlphaBank {
    pub fn new(n: usize, p: &AlphaParams, dt: f64) -> Self {
        let a = (-dt / p.tau_s).exp();
        Self {
            a,
            b: 1.0 - a,
            y1: vec![0.0; n],
            y2: vec![0.0; n],
        }
    }

    pub fn reset(&mut self) {
        self.y1.iter_mut().for_each(|v| *v = 0.0);
        self.y2.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Step every filter with its input; `inputs.len()` must equal the bank
    /// size. Outputs are read from `output()`.
    pub fn step(&mut self, inputs: &[f64]) {
        debug_assert_eq!(inputs.len(), self.y1.len());
        for ((y1, y2), &u) in self.y1.iter_mut().zip(&mut self.y2).zip(inputs) {
            *y2 = self.a * *y2 + self.b * *y1;
            *y1 = self.a * *y1 + self.b * u;
        }
    }

    pub fn output(&self) -> &[f64] {
        &self.y2
    }

    pub fn len(&self) -> usize {
        self.y1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y1.is_empty()
    }
}

/// Discrete impulse response: the filter output over `horizon` seconds after
/// a single spike (a `1/dt` impulse) arrives at step 0.
pub fn alpha_impulse_response(p: &AlphaParams, dt: f64, horizon: f64) -> Vec<f64> {
    let steps = (horizon / dt).round() as usize;
    let mut s = AlphaState::default();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let u = if k == 0 { 1.0 / dt } else { 0.0 };
        s = alpha_step(s, p, dt, u);
        out.push(s.y2);
    }
    out
}
