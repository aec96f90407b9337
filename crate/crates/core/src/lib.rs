//! Feedforward image classifiers built on leaky integrate-and-fire (LIF)
//! neurons.
//!
//! The static side trains networks whose hidden units output LIF steady-state
//! firing rates, smoothed near threshold so they are differentiable and
//! perturbed with additive Gaussian noise so the trained weights tolerate the
//! variability of real spike trains. The spiking side converts a trained
//! model into LIF populations joined by alpha-filtered synapses, simulates
//! them with an exact-integration clock-driven stepper, and reads the class
//! out of time-averaged logits. `analysis` quantifies the variability of
//! filtered spike trains, which is what calibrates the training noise.

pub mod analysis;
pub mod converter;
pub mod data;
pub mod error;
pub mod model_io;
pub mod network;
pub mod neuron;
pub mod rng;
pub mod simulator;
pub mod synapse;
pub mod trainer;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
