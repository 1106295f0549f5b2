//! Kirchhoff-current-law dynamics of one layer.
//!
//! Each node carries a fixed capacitor `θ_cap` to ground, so for node `j`
//!
//! ```text
//! θ_cap dv_j/dt = Σ_{s→j} g(v_s, v_j, θ_sj) − Σ_{j→d} g(v_j, v_d, θ_jd) − Σ_{j→gnd} g(v_j, 0, θ_j)
//! ```
//!
//! Parameters are packed edge by edge in edge order, followed by the ground
//! edges, `param_count` contiguous values per device.

use std::fmt;

use rand::Rng;

use crate::device::{DeviceKind, Local};
use crate::error::{Error, Result};
use crate::topology::Topology;

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub v: Vec<f64>,
    pub logp_delta: Option<f64>,
}

impl NodeState {
    pub fn new(v: Vec<f64>) -> Self {
        NodeState { v, logp_delta: None }
    }

    pub fn with_logp(v: Vec<f64>) -> Self {
        NodeState {
            v,
            logp_delta: Some(0.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|x| x.is_finite()) && self.logp_delta.is_none_or(f64::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDynamics {
    topology: Topology,
    kind: DeviceKind,
    params: Vec<f64>,
    theta_cap: f64,
}

impl LayerDynamics {
    pub fn new(topology: Topology, kind: DeviceKind, params: Vec<f64>, theta_cap: f64) -> Result<Self> {
        topology.check()?;
        kind.ensure_branch()?;
        let expected = topology.num_devices() * kind.param_count();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "{} devices of kind {kind} need {expected} parameters, got {}",
                topology.num_devices(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("layer parameters must be finite"));
        }
        if !(theta_cap > 0.0 && theta_cap.is_finite()) {
            return Err(Error::invalid(format!("ground capacitance must be positive, got {theta_cap}")));
        }
        Ok(LayerDynamics {
            topology,
            kind,
            params,
            theta_cap,
        })
    }

    /// All parameters zero.
    pub fn zeros(topology: Topology, kind: DeviceKind, theta_cap: f64) -> Result<Self> {
        let n = topology.num_devices() * kind.param_count();
        Self::new(topology, kind, vec![0.0; n], theta_cap)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn kind(&self) -> DeviceKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn theta_cap(&self) -> f64 {
        self.theta_cap
    }

    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Copy of this layer with the ground capacitance multiplied by `a`.
    pub fn scaled_capacitance(&self, a: f64) -> Result<Self> {
        Self::new(self.topology.clone(), self.kind, self.params.clone(), self.theta_cap * a)
    }

    /// Fan-scaled uniform initialization: each device's parameters are drawn
    /// from `U[-1/√fan, 1/√fan]`, where `fan` is the number of devices
    /// touching the destination node (the node itself for ground edges).
    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let pc = self.kind.param_count();
        let fan = self.topology.incidence();
        let dests = self
            .topology
            .edges
            .iter()
            .map(|&(_, d)| d)
            .chain(self.topology.ground_edges.iter().copied());
        for (chunk, d) in self.params.chunks_exact_mut(pc).zip(dests) {
            let bound = 1.0 / (fan[d].max(1) as f64).sqrt();
            for p in chunk {
                *p = rng.random_range(-bound..=bound);
            }
        }
    }

    fn check_state(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_nodes() {
            return Err(Error::invalid(format!(
                "state has {} entries, layer has {} nodes",
                v.len(),
                self.num_nodes()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                message: "non-finite node voltage".into(),
            });
        }
        Ok(())
    }

    pub fn rhs(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_state(v)?;
        let mut out = vec![0.0; v.len()];
        self.rhs_into(v, &mut out);
        Ok(out)
    }

    /// Trace of the Jacobian of [`rhs`](Self::rhs) at `v`, in `O(|edges|)`.
    pub fn rhs_trace(&self, v: &[f64]) -> Result<f64> {
        self.check_state(v)?;
        let mut scratch = vec![0.0; v.len()];
        Ok(self.rhs_trace_into(v, &mut scratch))
    }

    /// Dense Jacobian `∂rhs/∂v`, row `i` holding `∂f_i/∂v_·`.
    pub fn rhs_jacobian(&self, v: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_state(v)?;
        let n = v.len();
        let mut jac = vec![vec![0.0; n]; n];
        let pc = self.kind.param_count();
        let c = self.theta_cap;
        let (edge_params, ground_params) = self.params.split_at(self.topology.edges.len() * pc);
        for (&(s, d), p) in self.topology.edges.iter().zip(edge_params.chunks_exact(pc)) {
            let l = Local::eval(self.kind, v[s], v[d], p);
            let (gs, gd) = (l.d1 * l.w_s / c, l.d1 * l.w_d / c);
            jac[d][s] += gs;
            jac[d][d] += gd;
            jac[s][s] -= gs;
            jac[s][d] -= gd;
        }
        for (&j, p) in self.topology.ground_edges.iter().zip(ground_params.chunks_exact(pc)) {
            let l = Local::eval(self.kind, v[j], 0.0, p);
            jac[j][j] -= l.d1 * l.w_s / c;
        }
        Ok(jac)
    }

    /// Pre-activations of every device at `v` (edge order, then ground
    /// edges). Empty for the linear kinds.
    pub fn preactivations(&self, v: &[f64]) -> Vec<f64> {
        let pc = self.kind.param_count();
        let (edge_params, ground_params) = self.params.split_at(self.topology.edges.len() * pc);
        let internal = self
            .topology
            .edges
            .iter()
            .zip(edge_params.chunks_exact(pc))
            .filter_map(|(&(s, d), p)| crate::device::preactivation(self.kind, v[s], v[d], p));
        let ground = self
            .topology
            .ground_edges
            .iter()
            .zip(ground_params.chunks_exact(pc))
            .filter_map(|(&j, p)| crate::device::preactivation(self.kind, v[j], 0.0, p));
        internal.chain(ground).collect()
    }

    /// Unchecked field evaluation; `out` is overwritten.
    pub(crate) fn rhs_into(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let pc = self.kind.param_count();
        let kind = self.kind;
        let (edge_params, ground_params) = self.params.split_at(self.topology.edges.len() * pc);
        for (&(s, d), p) in self.topology.edges.iter().zip(edge_params.chunks_exact(pc)) {
            let i = crate::device::current(kind, v[s], v[d], p);
            out[d] += i;
            out[s] -= i;
        }
        for (&j, p) in self.topology.ground_edges.iter().zip(ground_params.chunks_exact(pc)) {
            out[j] -= crate::device::current(kind, v[j], 0.0, p);
        }
        let c = self.theta_cap;
        for x in out.iter_mut() {
            *x /= c;
        }
    }

    /// Field and Jacobian trace in one pass; `out` is overwritten with the
    /// field and the trace is returned.
    pub(crate) fn rhs_trace_into(&self, v: &[f64], out: &mut [f64]) -> f64 {
        out.fill(0.0);
        let pc = self.kind.param_count();
        let kind = self.kind;
        let mut trace = 0.0;
        let (edge_params, ground_params) = self.params.split_at(self.topology.edges.len() * pc);
        for (&(s, d), p) in self.topology.edges.iter().zip(edge_params.chunks_exact(pc)) {
            let l = Local::eval(kind, v[s], v[d], p);
            out[d] += l.current;
            out[s] -= l.current;
            trace += l.d1 * (l.w_d - l.w_s);
        }
        for (&j, p) in self.topology.ground_edges.iter().zip(ground_params.chunks_exact(pc)) {
            let l = Local::eval(kind, v[j], 0.0, p);
            out[j] -= l.current;
            trace -= l.d1 * l.w_s;
        }
        let c = self.theta_cap;
        for x in out.iter_mut() {
            *x /= c;
        }
        trace / c
    }

    /// Vector-Jacobian product of the augmented field `(f, tr ∂f/∂v)` at `v`:
    /// `out_v += Jᵀ cot_v + cot_trace ∇_v tr`, and
    /// `out_theta += (∂f/∂θ)ᵀ cot_v + cot_trace ∇_θ tr`.
    pub(crate) fn vjp_into(
        &self,
        v: &[f64],
        cot_v: &[f64],
        cot_trace: f64,
        out_v: &mut [f64],
        out_theta: &mut [f64],
    ) {
        let pc = self.kind.param_count();
        let kind = self.kind;
        let c = self.theta_cap;
        let mu = cot_trace / c;
        let split = self.topology.edges.len() * pc;
        let (edge_params, ground_params) = self.params.split_at(split);
        let (edge_grads, ground_grads) = out_theta.split_at_mut(split);
        for ((&(s, d), p), g) in self
            .topology
            .edges
            .iter()
            .zip(edge_params.chunks_exact(pc))
            .zip(edge_grads.chunks_exact_mut(pc))
        {
            let l = Local::eval(kind, v[s], v[d], p);
            let lambda = (cot_v[d] - cot_v[s]) / c;
            let kappa = l.w_d - l.w_s;
            let a = lambda * l.d1;
            let b = mu * l.d2 * kappa;
            out_v[s] += (a + b) * l.w_s;
            out_v[d] += (a + b) * l.w_d;
            for k in 0..pc {
                g[k] += (a + b) * l.dz[k] + mu * l.d1 * (l.dw_d[k] - l.dw_s[k]);
            }
        }
        for ((&j, p), g) in self
            .topology
            .ground_edges
            .iter()
            .zip(ground_params.chunks_exact(pc))
            .zip(ground_grads.chunks_exact_mut(pc))
        {
            let l = Local::eval(kind, v[j], 0.0, p);
            let lambda = -cot_v[j] / c;
            let kappa = -l.w_s;
            let a = lambda * l.d1;
            let b = mu * l.d2 * kappa;
            out_v[j] += (a + b) * l.w_s;
            for k in 0..pc {
                g[k] += (a + b) * l.dz[k] - mu * l.d1 * l.dw_s[k];
            }
        }
    }

    /// Nodal-analysis form `C v̇ + G v = b` of a layer built from linear
    /// devices only.
    pub fn assemble_linear(&self) -> Result<LinearSystem> {
        if !self.kind.is_linear() {
            return Err(Error::invalid(format!(
                "assemble_linear needs source or conductance devices, layer uses {}",
                self.kind
            )));
        }
        let n = self.num_nodes();
        let mut c = vec![vec![0.0; n]; n];
        for (j, row) in c.iter_mut().enumerate() {
            row[j] = self.theta_cap;
        }
        let mut g = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        let (edge_params, ground_params) = self.params.split_at(self.topology.edges.len());
        for (&(s, d), &p) in self.topology.edges.iter().zip(edge_params) {
            match self.kind {
                DeviceKind::Source => {
                    b[d] += p;
                    b[s] -= p;
                }
                _ => {
                    g[s][s] += p;
                    g[d][d] += p;
                    g[s][d] -= p;
                    g[d][s] -= p;
                }
            }
        }
        for (&j, &p) in self.topology.ground_edges.iter().zip(ground_params) {
            match self.kind {
                DeviceKind::Source => b[j] -= p,
                _ => g[j][j] += p,
            }
        }
        Ok(LinearSystem { c, g, b })
    }
}

/// `C v̇ + G v = b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub c: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LinearSystem {
    /// `C⁻¹ (b − G v)` for the diagonal `C` of this architecture.
    pub fn derivative(&self, v: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|i| {
                let gv: f64 = self.g[i].iter().zip(v).map(|(g, x)| g * x).sum();
                (self.b[i] - gv) / self.c[i][i]
            })
            .collect()
    }
}

impl fmt::Display for LinearSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |r: &[f64]| r.iter().map(|x| format!("{x:>10.4}")).collect::<Vec<_>>().join(" ");
        writeln!(f, "C =")?;
        for r in &self.c {
            writeln!(f, "  [{}]", row(r))?;
        }
        writeln!(f, "G =")?;
        for r in &self.g {
            writeln!(f, "  [{}]", row(r))?;
        }
        writeln!(f, "b = [{}]", row(&self.b))
    }
}
