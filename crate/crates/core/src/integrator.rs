//! Fixed-step explicit integration of layer dynamics, and the software to
//! hardware time/capacitance scaling.
//!
//! With `with_logp`, the log-density change `ℓ` is co-integrated on the
//! same grid as the voltages using `dℓ/dt = −tr(∂f/∂v)`. Integrating in
//! reverse runs the same stepper with a negative step, i.e. it integrates
//! the time-reversed field `−f`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::{LayerDynamics, NodeState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    #[serde(alias = "euler")]
    ForwardEuler,
    Rk4,
}

pub const DEFAULT_STEPS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub method: Method,
    pub steps: usize,
    /// Integration horizon `T` of the layer.
    pub horizon: f64,
}

impl IntegratorConfig {
    pub fn euler(horizon: f64, steps: usize) -> Self {
        IntegratorConfig {
            method: Method::ForwardEuler,
            steps,
            horizon,
        }
    }

    pub fn rk4(horizon: f64, steps: usize) -> Self {
        IntegratorConfig {
            method: Method::Rk4,
            steps,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("integrator needs at least one step"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegrateOptions {
    pub with_logp: bool,
    /// Keep the state at every step boundary (needed by the adjoint).
    pub record: bool,
    /// Integrate the time-reversed field.
    pub reverse: bool,
}

/// Result of one layer integration.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub final_state: NodeState,
    /// Signed step size actually used.
    pub dt: f64,
    pub method: Method,
    /// States at step boundaries `0..=steps` when recording, else empty.
    pub checkpoints: Vec<Vec<f64>>,
    /// Accumulated log-density change at each recorded boundary.
    pub logp: Vec<f64>,
}

impl Trajectory {
    /// Write `t, v_0 … v_{N−1} [, logp_delta]` rows for every checkpoint.
    pub fn to_csv(&self, t0: f64) -> String {
        let n = self.final_state.v.len();
        let with_logp = !self.logp.is_empty();
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",v_{i}"));
        }
        if with_logp {
            out.push_str(",logp_delta");
        }
        out.push('\n');
        for (k, state) in self.checkpoints.iter().enumerate() {
            out.push_str(&format!("{}", t0 + k as f64 * self.dt.abs()));
            for x in state {
                out.push_str(&format!(",{x}"));
            }
            if with_logp {
                out.push_str(&format!(",{}", self.logp[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Integrate over `[0, T]` and return the final state.
pub fn integrate(dynamics: &LayerDynamics, v0: &NodeState, cfg: &IntegratorConfig, with_logp: bool) -> Result<NodeState> {
    let opts = IntegrateOptions {
        with_logp,
        ..Default::default()
    };
    Ok(integrate_with(dynamics, v0, cfg, opts)?.final_state)
}

pub fn integrate_with(
    dynamics: &LayerDynamics,
    v0: &NodeState,
    cfg: &IntegratorConfig,
    opts: IntegrateOptions,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = dynamics.num_nodes();
    if v0.v.len() != n {
        return Err(Error::invalid(format!(
            "initial state has {} entries, layer has {n} nodes",
            v0.v.len()
        )));
    }
    if !v0.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            message: "non-finite initial state".into(),
        });
    }
    let dt = if opts.reverse { -cfg.dt() } else { cfg.dt() };
    let mut v = v0.v.clone();
    let mut logp = v0.logp_delta.unwrap_or(0.0);
    let mut checkpoints = Vec::new();
    let mut logps = Vec::new();
    if opts.record {
        checkpoints.reserve(cfg.steps + 1);
        checkpoints.push(v.clone());
        if opts.with_logp {
            logps.reserve(cfg.steps + 1);
            logps.push(logp);
        }
    }
    let mut stepper = Stepper::new(n);
    for step in 0..cfg.steps {
        let dlogp = match cfg.method {
            Method::ForwardEuler => stepper.euler(dynamics, &mut v, dt, opts.with_logp),
            Method::Rk4 => stepper.rk4(dynamics, &mut v, dt, opts.with_logp),
        };
        logp += dlogp;
        if !logp.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, layer: None });
        }
        if opts.record {
            checkpoints.push(v.clone());
            if opts.with_logp {
                logps.push(logp);
            }
        }
    }
    Ok(Trajectory {
        final_state: NodeState {
            v,
            logp_delta: (opts.with_logp || v0.logp_delta.is_some()).then_some(logp),
        },
        dt,
        method: cfg.method,
        checkpoints,
        logp: logps,
    })
}

/// Scratch buffers for one integration.
struct Stepper {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl Stepper {
    fn new(n: usize) -> Self {
        Stepper {
            k: std::array::from_fn(|_| vec![0.0; n]),
            stage: vec![0.0; n],
        }
    }

    fn field(dynamics: &LayerDynamics, v: &[f64], out: &mut [f64], with_logp: bool) -> f64 {
        if with_logp {
            -dynamics.rhs_trace_into(v, out)
        } else {
            dynamics.rhs_into(v, out);
            0.0
        }
    }

    /// `v ← v + dt f(v)`; returns the log-density increment.
    fn euler(&mut self, dynamics: &LayerDynamics, v: &mut [f64], dt: f64, with_logp: bool) -> f64 {
        let dl = Self::field(dynamics, v, &mut self.k[0], with_logp);
        for (x, k) in v.iter_mut().zip(&self.k[0]) {
            *x += dt * k;
        }
        dt * dl
    }

    fn rk4(&mut self, dynamics: &LayerDynamics, v: &mut [f64], dt: f64, with_logp: bool) -> f64 {
        let [k1, k2, k3, k4] = &mut self.k;
        let stage = &mut self.stage;
        let l1 = Self::field(dynamics, v, k1, with_logp);
        for ((s, x), k) in stage.iter_mut().zip(v.iter()).zip(k1.iter()) {
            *s = x + 0.5 * dt * k;
        }
        let l2 = Self::field(dynamics, stage, k2, with_logp);
        for ((s, x), k) in stage.iter_mut().zip(v.iter()).zip(k2.iter()) {
            *s = x + 0.5 * dt * k;
        }
        let l3 = Self::field(dynamics, stage, k3, with_logp);
        for ((s, x), k) in stage.iter_mut().zip(v.iter()).zip(k3.iter()) {
            *s = x + dt * k;
        }
        let l4 = Self::field(dynamics, stage, k4, with_logp);
        for (i, x) in v.iter_mut().enumerate() {
            *x += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        dt / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
    }
}

/// Physical realization of a unit-less network scaled by `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalePlan {
    pub a: f64,
    /// Total unit-less horizon `D·T`.
    pub sw_horizon: f64,
    /// Hardware inference time in seconds, `D·T·a`.
    pub hw_time_s: f64,
    /// Hardware node-to-ground capacitance in farads, `1.0·a`.
    pub hw_cap_f: f64,
}

pub fn hw_scale(sw_horizon: f64, a: f64) -> Result<ScalePlan> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("scale factor must be positive, got {a}")));
    }
    if !(sw_horizon > 0.0 && sw_horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon must be positive, got {sw_horizon}")));
    }
    Ok(ScalePlan {
        a,
        sw_horizon,
        hw_time_s: sw_horizon * a,
        hw_cap_f: a,
    })
}

/// Format a quantity with an SI prefix, e.g. `1 fs` or `2.5 nF`.
pub fn si(value: f64, unit: &str) -> String {
    const PREFIXES: [(f64, &str); 11] = [
        (1e12, "T"),
        (1e9, "G"),
        (1e6, "M"),
        (1e3, "k"),
        (1.0, ""),
        (1e-3, "m"),
        (1e-6, "µ"),
        (1e-9, "n"),
        (1e-12, "p"),
        (1e-15, "f"),
        (1e-18, "a"),
    ];
    if value == 0.0 {
        return format!("0 {unit}");
    }
    let mag = value.abs();
    let (scale, prefix) = PREFIXES
        .iter()
        .copied()
        .find(|&(s, _)| mag >= s * (1.0 - 1e-9))
        .unwrap_or(PREFIXES[PREFIXES.len() - 1]);
    let scaled = value / scale;
    // trim float noise such as 0.9999999999999999
    let rounded = (scaled * 1e9).round() / 1e9;
    format!("{rounded} {prefix}{unit}")
}

impl fmt::Display for ScalePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{}", "scale factor a", self.a)?;
        writeln!(f, "{:<24}{}", "software horizon D*T", self.sw_horizon)?;
        writeln!(f, "{:<24}{} ({:e} F)", "ground capacitance", si(self.hw_cap_f, "F"), self.hw_cap_f)?;
        writeln!(f, "{:<24}{} ({:e} s)", "inference time", si(self.hw_time_s, "s"), self.hw_time_s)
    }
}

/// Integrate `(θ_cap, T)` and `(a·θ_cap, a·T)` with the same step count and
/// return the largest voltage difference over all step boundaries.
pub fn verify_scale_equivalence(dynamics: &LayerDynamics, v0: &NodeState, cfg: &IntegratorConfig, a: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("scale factor must be positive, got {a}")));
    }
    let opts = IntegrateOptions {
        record: true,
        ..Default::default()
    };
    let base = integrate_with(dynamics, v0, cfg, opts)?;
    let scaled_dyn = dynamics.scaled_capacitance(a)?;
    let scaled_cfg = IntegratorConfig {
        horizon: cfg.horizon * a,
        ..*cfg
    };
    let scaled = integrate_with(&scaled_dyn, v0, &scaled_cfg, opts)?;
    Ok(base
        .checkpoints
        .iter()
        .zip(&scaled.checkpoints)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max))
}
