//! LIF neuron math: the hard steady-state rate curve, a softened
//! differentiable variant, and an exact-integration spiking stepper.

use crate::error::Error;
use crate::Result;

/// Leaky integrate-and-fire membrane parameters.
///
/// The membrane obeys `tau_rc * dv/dt = -v + j`; a spike fires when `v`
/// reaches `v_th`, after which the voltage is held at zero for `tau_ref`
/// seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau_rc: f64,
    pub tau_ref: f64,
    pub v_th: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_rc: 0.02,
            tau_ref: 0.004,
            v_th: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_rc.is_finite() && self.tau_rc > 0.0) {
            return Err(Error::InvalidParam(format!(
                "tau_rc must be positive, got {}",
                self.tau_rc
            )));
        }
        if !(self.tau_ref.is_finite() && self.tau_ref >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "tau_ref must be >= 0, got {}",
                self.tau_ref
            )));
        }
        if !(self.v_th.is_finite() && self.v_th > 0.0) {
            return Err(Error::InvalidParam(format!(
                "v_th must be positive, got {}",
                self.v_th
            )));
        }
        Ok(())
    }

    /// Supremum of the rate curve, `1 / tau_ref` (infinite when `tau_ref` is 0).
    pub fn max_rate(&self) -> f64 {
        1.0 / self.tau_ref
    }
}

/// Fixed scale mapping a firing rate to the activation handed to the next
/// layer: `activation = rate * ACTIVATION_SCALE`. Rates at typical
/// operating points (tens of spikes/s) become order-one signals; without
/// the scale, layer inputs span hundreds of spikes/s, per-layer gradient
/// magnitudes end up orders of magnitude apart, and no single learning rate
/// trains the stack. The spiking simulator applies the same scale to
/// filtered spike trains, so both network forms compute the same function.
pub const ACTIVATION_SCALE: f64 = 1.0 / 30.0;

/// Default smoothing width.
///
/// Mild enough that replacing the soft curve by the hard one after training
/// shifts the response by less than one spike/s everywhere outside a narrow
/// band around threshold (at the defaults, the gap at `v_th + 0.3` is about
/// 0.8 spikes/s). `gamma_for_rate_gap` computes widths for other gap targets.
pub const DEFAULT_GAMMA: f64 = 0.146;

/// Configuration of the softened activation: `gamma` is the smoothing width
/// (0 selects the hard curve) and `sigma` the std of the additive Gaussian
/// training noise in spikes/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLifConfig {
    pub gamma: f64,
    pub sigma: f64,
}

impl Default for SoftLifConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            sigma: 10.0,
        }
    }
}

impl SoftLifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Smoothed rectifier `gamma * ln(1 + exp(x / gamma))`, evaluated in the
/// overflow-safe form `max(x, 0) + gamma * ln_1p(exp(-|x| / gamma))`.
pub fn rho2(x: f64, gamma: f64) -> f64 {
    debug_assert!(gamma > 0.0);
    x.max(0.0) + gamma * (-(x / gamma).abs()).exp().ln_1p()
}

/// Rate for a drive `rho > 0` above threshold; shared by the hard and soft
/// curves, which differ only in how they rectify `j - v_th`.
fn rate_from_drive(p: &LifParams, rho: f64) -> f64 {
    1.0 / (p.tau_ref + p.tau_rc * (p.v_th / rho).ln_1p())
}

/// Steady-state firing rate of the hard LIF neuron under constant current.
/// Zero at and below threshold; approaches `1 / tau_ref` from below.
pub fn lif_rate(p: &LifParams, j: f64) -> f64 {
    if j > p.v_th {
        rate_from_drive(p, j - p.v_th)
    } else {
        0.0
    }
}

/// Softened rate curve: the rectifier inside the hard rate expression is
/// replaced by `rho2`, making the response smooth in `j` and strictly
/// positive for every finite current. `gamma == 0` falls back to the hard
/// curve.
///
/// Deep below threshold the smoothed drive `rho = gamma * ln_1p(e^u)`
/// cannot be evaluated literally: it underflows long before the true
/// (logarithmic) tail reaches zero, and before that `e^u` degrades into a
/// denormal staircase that turns the curve into flat steps, wrecking any
/// finite difference taken across them. Once `e^u` is below one ulp of 1
/// (so `ln_1p(e^u) == e^u` and `ln(e^u) == u` to the last bit) and `rho`
/// is far below `v_th`, the log term `ln_1p(v_th / rho)` equals
/// `ln(v_th) - ln(gamma) - u` to machine precision, so it is evaluated in
/// log space without ever forming `e^u`.
pub fn soft_lif_rate(p: &LifParams, gamma: f64, j: f64) -> f64 {
    if gamma == 0.0 {
        return lif_rate(p, j);
    }
    let x = j - p.v_th;
    let u = x / gamma;
    if u > 0.0 {
        return rate_from_drive(p, rho2(x, gamma));
    }
    let ln_vth = p.v_th.ln();
    let ln_term = if u <= -37.0 && gamma.ln() + u < ln_vth - 40.0 {
        ln_vth - gamma.ln() - u
    } else {
        let t = u.exp().ln_1p();
        let ratio = p.v_th / (gamma * t);
        if ratio.is_finite() {
            ratio.ln_1p()
        } else {
            ln_vth - gamma.ln() - if t > 0.0 { t.ln() } else { u }
        }
    };
    1.0 / (p.tau_ref + p.tau_rc * ln_term)
}

/// Derivative of `soft_lif_rate` with respect to the input current.
///
/// The logistic factor and the smoothed drive share the exponential
/// `exp((j - v_th) / gamma)`; their ratio tends to 1 far below threshold, so
/// the quotient is taken analytically and the result decays to zero there
/// instead of evaluating 0/0. With `gamma == 0` this is the hard-curve
/// derivative, which is unbounded as `j` approaches threshold from above.
pub fn soft_lif_deriv(p: &LifParams, gamma: f64, j: f64) -> f64 {
    if gamma == 0.0 {
        if j <= p.v_th {
            return 0.0;
        }
        let r = lif_rate(p, j);
        return r * r * p.tau_rc * p.v_th / (j * (j - p.v_th));
    }
    let u = (j - p.v_th) / gamma;
    // rho: smoothed drive; sig_over_rho: logistic(u) / rho
    let (rho, sig_over_rho) = if u > 0.0 {
        let rho = (j - p.v_th) + gamma * (-u).exp().ln_1p();
        (rho, 1.0 / ((1.0 + (-u).exp()) * rho))
    } else {
        let s = u.exp();
        let t = s.ln_1p();
        let ratio = if t > 0.0 { s / t } else { 1.0 };
        (gamma * t, ratio / ((1.0 + s) * gamma))
    };
    let r = soft_lif_rate(p, gamma, j);
    r * r * p.tau_rc * p.v_th * sig_over_rho / (rho + p.v_th)
}

/// Smoothing width at which the soft and hard rates differ by `gap` spikes/s
/// at probe current `j_probe`. The gap grows monotonically with `gamma`, so
/// geometric bisection converges; useful for picking a width from an
/// accuracy target instead of hard-coding one.
pub fn gamma_for_rate_gap(p: &LifParams, j_probe: f64, gap: f64) -> f64 {
    let gap_at = |g: f64| soft_lif_rate(p, g, j_probe) - lif_rate(p, j_probe);
    let mut lo = 1e-9;
    let mut hi = 1.0;
    while gap_at(hi) < gap && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if gap_at(mid) < gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Membrane state of one spiking neuron: voltage in `[0, v_th)` plus the
/// refractory time still to serve.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeuronState {
    pub v: f64,
    pub refractory: f64,
}

/// Advance one neuron by `dt` seconds under a current held constant over the
/// step. Returns the new state and, if the neuron fired, the offset of the
/// spike from the start of the step.
///
/// Integration is exact for the zero-order-hold input: any refractory time
/// is served first, the membrane then follows the closed-form exponential,
/// and a threshold crossing inside the step is solved in closed form. The
/// refractory remainder carries across step boundaries, so interspike
/// intervals are exact rather than quantized to `dt`. At most one spike is
/// emitted per step, which loses nothing as long as `dt <= tau_ref`.
pub fn lif_step(p: &LifParams, state: NeuronState, j: f64, dt: f64) -> (NeuronState, Option<f64>) {
    debug_assert!(dt > 0.0);
    let t_int = (dt - state.refractory).clamp(0.0, dt);
    let mut next = NeuronState {
        v: state.v,
        refractory: (state.refractory - dt).max(0.0),
    };
    if t_int == 0.0 {
        return (next, None);
    }
    let v1 = j + (state.v - j) * (-t_int / p.tau_rc).exp();
    if v1 >= p.v_th {
        // crossing time measured from the start of the integration window;
        // j == v_th is only reachable through rounding and crosses at the end
        let t_cross = if j > p.v_th {
            (p.tau_rc * ((j - state.v) / (j - p.v_th)).ln()).clamp(0.0, t_int)
        } else {
            t_int
        };
        next.v = 0.0;
        next.refractory = (p.tau_ref - (t_int - t_cross)).max(0.0);
        (next, Some((dt - t_int) + t_cross))
    } else {
        next.v = v1.max(0.0);
        (next, None)
    }
}
