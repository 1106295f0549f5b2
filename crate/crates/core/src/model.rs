//! Multi-layer KirchhoffNet: a sequence of time segments, each with its own
//! topology, device law, horizon and step count.
//!
//! Inputs are written onto `input_nodes` at `t = 0` (all other nodes start
//! at zero) and the output is read from `readout_nodes` at `t = D·T`. At a
//! layer boundary the first `min(N_prev, N_next)` nodes keep their
//! voltages, surplus nodes of the previous layer are dropped and new nodes
//! start at zero.
//!
//! In flow mode (every layer has the same node count `d` and inputs and
//! readouts are nodes `0..d`), `v(0) ~ N(0, I)` and the network defines a
//! density on `v(D·T)`:
//!
//! ```text
//! log q(x) = log N(v(0); 0, I) − ∫₀^{DT} tr(∂f/∂v) dt
//! ```
//!
//! `forward_logdensity` evaluates it by integrating the time-reversed field
//! from `x` back to `v(0)` on the same grid.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjoint::{backward_into, AdjointState};
use crate::device::DeviceKind;
use crate::dynamics::{LayerDynamics, NodeState};
use crate::error::{Error, Result};
use crate::integrator::{integrate_with, IntegrateOptions, IntegratorConfig, Method, Trajectory};
use crate::topology::Topology;

pub const CHECKPOINT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(z; 0, I)`.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|x| x * x).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub dynamics: LayerDynamics,
    pub integrator: IntegratorConfig,
}

impl Layer {
    pub fn new(dynamics: LayerDynamics, integrator: IntegratorConfig) -> Result<Self> {
        integrator.validate()?;
        Ok(Layer { dynamics, integrator })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KirchhoffNet {
    layers: Vec<Layer>,
    input_nodes: Vec<usize>,
    readout_nodes: Vec<usize>,
}

/// Per-layer trajectories of one pass, in execution order.
#[derive(Clone, Debug)]
pub struct Pass {
    pub trajectories: Vec<(usize, Trajectory)>,
    pub reverse: bool,
    pub with_logp: bool,
}

impl Pass {
    pub fn final_state(&self) -> &NodeState {
        &self.trajectories.last().expect("a pass covers at least one layer").1.final_state
    }

    /// Accumulated log-density change over all layers.
    pub fn logp_delta(&self) -> f64 {
        self.final_state().logp_delta.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub params: Vec<f64>,
    /// Gradient with respect to the pass's starting state.
    pub initial: Vec<f64>,
}

fn check_indices(name: &str, idx: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::invalid(format!("{name} index {i} out of range for {n} nodes")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("{name} index {i} repeated")));
        }
    }
    Ok(())
}

/// Carry a state across a layer boundary.
fn carry(v: &[f64], next_nodes: usize) -> Vec<f64> {
    let mut out = vec![0.0; next_nodes];
    let keep = v.len().min(next_nodes);
    out[..keep].copy_from_slice(&v[..keep]);
    out
}

impl KirchhoffNet {
    pub fn new(layers: Vec<Layer>, input_nodes: Vec<usize>, readout_nodes: Vec<usize>) -> Result<Self> {
        let (first, last) = match (layers.first(), layers.last()) {
            (Some(f), Some(l)) => (f.dynamics.num_nodes(), l.dynamics.num_nodes()),
            _ => return Err(Error::invalid("a network needs at least one layer")),
        };
        if input_nodes.is_empty() || readout_nodes.is_empty() {
            return Err(Error::invalid("input and readout node lists must be non-empty"));
        }
        check_indices("input", &input_nodes, first)?;
        check_indices("readout", &readout_nodes, last)?;
        for layer in &layers {
            layer.integrator.validate()?;
        }
        Ok(KirchhoffNet {
            layers,
            input_nodes,
            readout_nodes,
        })
    }

    /// Flow-mode network: every layer shares `topology`, inputs and readouts
    /// are all nodes.
    pub fn flow(layers: Vec<Layer>) -> Result<Self> {
        let d = layers
            .first()
            .map(|l| l.dynamics.num_nodes())
            .ok_or_else(|| Error::invalid("a network needs at least one layer"))?;
        let net = Self::new(layers, (0..d).collect(), (0..d).collect())?;
        net.flow_dim()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_nodes(&self) -> &[usize] {
        &self.input_nodes
    }

    pub fn readout_nodes(&self) -> &[usize] {
        &self.readout_nodes
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Total horizon `Σ T` over layers.
    pub fn total_horizon(&self) -> f64 {
        self.layers.iter().map(|l| l.integrator.horizon).sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.dynamics.num_params()).sum()
    }

    /// All parameters, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.dynamics.params());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let dst = layer.dynamics.params_mut();
            dst.copy_from_slice(&params[offset..offset + dst.len()]);
            offset += dst.len();
        }
        Ok(())
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let start = acc;
                acc += l.dynamics.num_params();
                start
            })
            .collect()
    }

    /// Fan-scaled uniform initialization of every layer.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            layer.dynamics.init_params(&mut rng);
        }
    }

    /// Dimension of the flow, or an error if the net is not in flow mode.
    pub fn flow_dim(&self) -> Result<usize> {
        let d = self.layers[0].dynamics.num_nodes();
        let all: Vec<usize> = (0..d).collect();
        if self.layers.iter().any(|l| l.dynamics.num_nodes() != d) {
            return Err(Error::invalid("net is not in flow mode: node count changes between layers"));
        }
        if self.input_nodes != all || self.readout_nodes != all {
            return Err(Error::invalid("net is not in flow mode: inputs and readouts must be all nodes in order"));
        }
        Ok(d)
    }

    pub fn is_flow(&self) -> bool {
        self.flow_dim().is_ok()
    }

    /// Integrate every layer starting from `v0`, in forward order or as the
    /// time-reversed flow (last layer first).
    pub fn run(&self, v0: Vec<f64>, reverse: bool, with_logp: bool) -> Result<Pass> {
        let order: Vec<usize> = if reverse {
            (0..self.layers.len()).rev().collect()
        } else {
            (0..self.layers.len()).collect()
        };
        let opts = IntegrateOptions {
            with_logp,
            record: true,
            reverse,
        };
        let mut trajectories = Vec::with_capacity(order.len());
        let mut state = NodeState {
            v: v0,
            logp_delta: with_logp.then_some(0.0),
        };
        for &idx in &order {
            let layer = &self.layers[idx];
            if state.v.len() != layer.dynamics.num_nodes() {
                state.v = carry(&state.v, layer.dynamics.num_nodes());
            }
            let traj = integrate_with(&layer.dynamics, &state, &layer.integrator, opts).map_err(|e| e.in_layer(idx))?;
            state = traj.final_state.clone();
            trajectories.push((idx, traj));
        }
        Ok(Pass {
            trajectories,
            reverse,
            with_logp,
        })
    }

    /// Gradient of a loss with respect to the parameters and the starting
    /// state of `pass`, given `∂L/∂v` at the end of the pass and `∂L/∂ℓ`.
    pub fn backward(&self, pass: &Pass, dl_dv: &[f64], dl_dlogp: Option<f64>) -> Result<Gradient> {
        let offsets = self.offsets();
        let mut grad = vec![0.0; self.num_params()];
        let mut a = dl_dv.to_vec();
        for (pos, (idx, traj)) in pass.trajectories.iter().enumerate().rev() {
            let layer = &self.layers[*idx];
            let np = layer.dynamics.num_params();
            let mut state = AdjointState {
                a,
                a_logp: dl_dlogp,
                grad_params: std::mem::take(&mut grad[offsets[*idx]..offsets[*idx] + np].to_vec()),
                grad_v0: Vec::new(),
            };
            backward_into(&layer.dynamics, traj, &layer.integrator, &mut state).map_err(|e| e.in_layer(*idx))?;
            grad[offsets[*idx]..offsets[*idx] + np].copy_from_slice(&state.grad_params);
            a = state.grad_v0;
            if pos > 0 {
                let prev_nodes = pass.trajectories[pos - 1].1.final_state.v.len();
                a = carry(&a, prev_nodes);
            }
        }
        Ok(Gradient { params: grad, initial: a })
    }

    fn embed_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_nodes.len() {
            return Err(Error::invalid(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_nodes.len()
            )));
        }
        let mut v0 = vec![0.0; self.layers[0].dynamics.num_nodes()];
        for (&node, &value) in self.input_nodes.iter().zip(x) {
            v0[node] = value;
        }
        Ok(v0)
    }

    fn readout(&self, v: &[f64]) -> Vec<f64> {
        self.readout_nodes.iter().map(|&i| v[i]).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut state = NodeState::new(self.embed_input(x)?);
        for (idx, layer) in self.layers.iter().enumerate() {
            if state.v.len() != layer.dynamics.num_nodes() {
                state.v = carry(&state.v, layer.dynamics.num_nodes());
            }
            let traj = integrate_with(&layer.dynamics, &state, &layer.integrator, IntegrateOptions::default())
                .map_err(|e| e.in_layer(idx))?;
            state = traj.final_state;
        }
        Ok(self.readout(&state.v))
    }

    /// Forward pass that keeps everything needed by [`Self::output_gradient`].
    pub fn forward_traced(&self, x: &[f64]) -> Result<(Vec<f64>, Pass)> {
        let pass = self.run(self.embed_input(x)?, false, false)?;
        let y = self.readout(&pass.final_state().v);
        Ok((y, pass))
    }

    /// Parameter and input gradients of a loss whose gradient with respect
    /// to the output is `dl_dy`.
    pub fn output_gradient(&self, pass: &Pass, dl_dy: &[f64]) -> Result<Gradient> {
        if dl_dy.len() != self.readout_nodes.len() {
            return Err(Error::invalid("output gradient length does not match the readout"));
        }
        let mut dl_dv = vec![0.0; pass.final_state().v.len()];
        for (&node, &g) in self.readout_nodes.iter().zip(dl_dy) {
            dl_dv[node] += g;
        }
        let g = self.backward(pass, &dl_dv, None)?;
        let initial = self.input_nodes.iter().map(|&i| g.initial[i]).collect();
        Ok(Gradient {
            params: g.params,
            initial,
        })
    }

    /// `log q(x)` of the flow density at a data point `x`.
    pub fn forward_logdensity(&self, x: &[f64]) -> Result<f64> {
        Ok(self.logdensity_traced(x)?.0)
    }

    pub fn logdensity_traced(&self, x: &[f64]) -> Result<(f64, Pass)> {
        let d = self.flow_dim()?;
        if x.len() != d {
            return Err(Error::invalid(format!("data point has {} entries, flow has {d}", x.len())));
        }
        let pass = self.run(x.to_vec(), true, true)?;
        let z = &pass.final_state().v;
        let logq = std_normal_logpdf(z) - pass.logp_delta();
        Ok((logq, pass))
    }

    /// `−log q(x)` and its parameter gradient.
    pub fn nll_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (logq, pass) = self.logdensity_traced(x)?;
        let z = pass.final_state().v.clone();
        // −log q = ½|z|² + const + ℓ
        let g = self.backward(&pass, &z, Some(1.0))?;
        Ok((-logq, g.params))
    }

    /// Push a base draw through the flow: returns `x = v(D·T)` and `log q(x)`.
    pub fn transport(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (x, logq, _) = self.transport_traced(z)?;
        Ok((x, logq))
    }

    pub fn transport_traced(&self, z: &[f64]) -> Result<(Vec<f64>, f64, Pass)> {
        let d = self.flow_dim()?;
        if z.len() != d {
            return Err(Error::invalid(format!("base draw has {} entries, flow has {d}", z.len())));
        }
        let pass = self.run(z.to_vec(), false, true)?;
        let x = pass.final_state().v.clone();
        let logq = std_normal_logpdf(z) + pass.logp_delta();
        Ok((x, logq, pass))
    }

    /// One sample; deterministic given `seed`.
    pub fn sample(&self, seed: u64) -> Result<Vec<f64>> {
        Ok(self.sample_n(1, seed)?.remove(0))
    }

    pub fn sample_n(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let d = self.flow_dim()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z = base_draw(&mut rng, d);
                let pass = self.run(z, false, false)?;
                Ok(pass.final_state().v.clone())
            })
            .collect()
    }

    /// Serialize to the versioned JSON checkpoint format.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let t = l.dynamics.topology();
                    LayerRecord {
                        nodes: t.num_nodes,
                        edges: t.edges.clone(),
                        gedges: t.ground_edges.clone(),
                        kind: l.dynamics.kind(),
                        horizon: l.integrator.horizon,
                        steps: l.integrator.steps,
                        method: l.integrator.method,
                        theta_cap: l.dynamics.theta_cap(),
                        params: l.dynamics.params().to_vec(),
                    }
                })
                .collect(),
            input_nodes: self.input_nodes.clone(),
            readout_nodes: self.readout_nodes.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let layers = ck
            .layers
            .into_iter()
            .map(|r| {
                let topo = Topology::new(r.nodes, r.edges, r.gedges)?;
                let dynamics = LayerDynamics::new(topo, r.kind, r.params, r.theta_cap)?;
                Layer::new(
                    dynamics,
                    IntegratorConfig {
                        method: r.method,
                        steps: r.steps,
                        horizon: r.horizon,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, ck.input_nodes, ck.readout_nodes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| json_error(&e))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| json_error(&e))?;
        Self::from_checkpoint(ck)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn json_error(e: &serde_json::Error) -> Error {
    Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
}

pub(crate) fn base_draw(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layers: Vec<LayerRecord>,
    pub input_nodes: Vec<usize>,
    pub readout_nodes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub gedges: Vec<usize>,
    pub kind: DeviceKind,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "unit_cap")]
    pub theta_cap: f64,
    pub params: Vec<f64>,
}

fn unit_cap() -> f64 {
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::fc_topo;
    use rand::Rng;

    fn layer(topo: Topology, kind: DeviceKind, horizon: f64, steps: usize) -> Layer {
        Layer::new(LayerDynamics::zeros(topo, kind, 1.0).unwrap(), IntegratorConfig::euler(horizon, steps)).unwrap()
    }

    fn random_flow(seed: u64, depth: usize, kind: DeviceKind) -> KirchhoffNet {
        let topo = fc_topo(2, 2).unwrap().with_ground_edges(1);
        let layers = (0..depth).map(|_| layer(topo.clone(), kind, 0.5, 20)).collect();
        let mut net = KirchhoffNet::flow(layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..net.num_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
        net.set_params(&p).unwrap();
        net
    }

    #[test]
    fn zero_params_are_identity() {
        let net = KirchhoffNet::new(
            vec![layer(fc_topo(4, 1).unwrap(), DeviceKind::Relu2, 1.0, 10); 3],
            vec![0, 1, 2],
            vec![0, 1, 2],
        )
        .unwrap();
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
        let flow = KirchhoffNet::flow(vec![layer(fc_topo(2, 1).unwrap(), DeviceKind::Tanh3, 1.0, 5); 2]).unwrap();
        let x = [0.3, -0.7];
        assert!((flow.forward_logdensity(&x).unwrap() - std_normal_logpdf(&x)).abs() < 1e-15);
    }

    #[test]
    fn single_step_by_hand() {
        let dynamics =
            LayerDynamics::new(Topology::new(2, vec![(0, 1)], vec![]).unwrap(), DeviceKind::Relu2, vec![2.0, -0.5], 1.0)
                .unwrap();
        let net = KirchhoffNet::new(vec![Layer::new(dynamics, IntegratorConfig::euler(0.25, 1)).unwrap()], vec![0], vec![0, 1])
            .unwrap();
        // i = relu(2·(1 − 0) − 0.5) = 1.5; v ← v + 0.25·[−1.5, 1.5]
        assert_eq!(net.forward(&[1.0]).unwrap(), vec![0.625, 0.375]);
    }

    #[test]
    fn added_nodes_start_at_zero() {
        // layer 1 on 7 nodes with a constant source pushing charge around,
        // layer 2 adds nodes 7 and 8 (zero-based) which have no devices
        let mut l1 = layer(fc_topo(7, 1).unwrap(), DeviceKind::Source, 1.0, 4);
        l1.dynamics.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p = 0.01 * i as f64);
        let l2 = layer(Topology::new(9, vec![(0, 1)], vec![]).unwrap(), DeviceKind::Relu2, 1.0, 4);
        let net = KirchhoffNet::new(vec![l1, l2], (0..7).collect(), (0..9).collect()).unwrap();
        let (_, pass) = net.forward_traced(&[1.0; 7]).unwrap();
        let entering = &pass.trajectories[1].1.checkpoints[0];
        assert_eq!((entering[7], entering[8]), (0.0, 0.0));
        assert_eq!(entering[..7], pass.trajectories[0].1.final_state.v[..]);
    }

    #[test]
    fn dropped_nodes_vanish() {
        let l1 = layer(fc_topo(4, 1).unwrap(), DeviceKind::Tanh2, 1.0, 2);
        let l2 = layer(fc_topo(2, 1).unwrap(), DeviceKind::Tanh2, 1.0, 2);
        let net = KirchhoffNet::new(vec![l1, l2], vec![0, 1, 2, 3], vec![0, 1]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn invalid_nets() {
        let l = layer(fc_topo(3, 1).unwrap(), DeviceKind::Relu2, 1.0, 2);
        assert!(KirchhoffNet::new(vec![], vec![0], vec![0]).is_err());
        assert!(KirchhoffNet::new(vec![l.clone()], vec![3], vec![0]).is_err());
        assert!(KirchhoffNet::new(vec![l.clone()], vec![0, 0], vec![0]).is_err());
        assert!(KirchhoffNet::new(vec![l.clone()], vec![0], vec![5]).is_err());
        let net = KirchhoffNet::new(vec![l], vec![0, 1], vec![2]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.forward_logdensity(&[0.0, 0.0, 0.0]).is_err());
        assert!(net.sample(0).is_err());
    }

    #[test]
    fn splitting_a_layer_preserves_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let topo = fc_topo(3, 2).unwrap();
        let params: Vec<f64> = (0..topo.num_devices() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dynamics = LayerDynamics::new(topo, DeviceKind::Tanh3, params, 1.0).unwrap();
        let whole = KirchhoffNet::new(
            vec![Layer::new(dynamics.clone(), IntegratorConfig::euler(1.0, 20)).unwrap()],
            vec![0, 1],
            vec![0, 1, 2],
        )
        .unwrap();
        let half = Layer::new(dynamics, IntegratorConfig::euler(0.5, 10)).unwrap();
        let split = KirchhoffNet::new(vec![half.clone(), half], vec![0, 1], vec![0, 1, 2]).unwrap();
        assert_eq!(whole.forward(&[0.4, -0.9]).unwrap(), split.forward(&[0.4, -0.9]).unwrap());
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let l1 = layer(fc_topo(4, 1).unwrap(), DeviceKind::Tanh2, 0.5, 8);
        let l2 = layer(fc_topo(5, 1).unwrap().with_ground_edges(1), DeviceKind::Tanh3, 0.5, 8);
        let l3 = layer(fc_topo(3, 2).unwrap(), DeviceKind::Tanh3, 0.5, 8);
        let mut net = KirchhoffNet::new(vec![l1, l2, l3], vec![0, 2], vec![1, 2]).unwrap();
        let p: Vec<f64> = (0..net.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        net.set_params(&p).unwrap();
        let x = [0.7, -0.4];
        let loss = |n: &KirchhoffNet, x: &[f64]| n.forward(x).unwrap().iter().map(|y| y * y).sum::<f64>();
        let (y, pass) = net.forward_traced(&x).unwrap();
        let g = net.output_gradient(&pass, &y.iter().map(|v| 2.0 * v).collect::<Vec<_>>()).unwrap();
        let fd = crate::adjoint::finite_diff_grad(
            &p,
            |q| {
                let mut n = net.clone();
                n.set_params(q)?;
                Ok(loss(&n, &x))
            },
            1e-6,
        )
        .unwrap();
        for (a, b) in g.params.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7 * a.abs().max(1.0), "{a} vs {b}");
        }
        let fdx = crate::adjoint::finite_diff_grad(&x, |x| Ok(loss(&net, x)), 1e-6).unwrap();
        for (a, b) in g.initial.iter().zip(&fdx) {
            assert!((a - b).abs() < 1e-7 * a.abs().max(1.0));
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let net = random_flow(5, 2, DeviceKind::Tanh3);
        let x = [0.6, -1.1];
        let (nll, grad) = net.nll_and_grad(&x).unwrap();
        assert!((nll + net.forward_logdensity(&x).unwrap()).abs() < 1e-15);
        let fd = crate::adjoint::finite_diff_grad(
            &net.params(),
            |q| {
                let mut n = net.clone();
                n.set_params(q)?;
                Ok(-n.forward_logdensity(&x)?)
            },
            1e-6,
        )
        .unwrap();
        for (a, b) in grad.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let net = random_flow(1, 2, DeviceKind::Tanh3);
        assert_eq!(net.sample(9).unwrap(), net.sample(9).unwrap());
        assert_ne!(net.sample(9).unwrap(), net.sample(10).unwrap());
        let zero = KirchhoffNet::flow(vec![layer(fc_topo(2, 1).unwrap(), DeviceKind::Relu2, 1.0, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(zero.sample(4).unwrap(), base_draw(&mut rng, 2));
    }

    #[test]
    fn transport_then_density_is_consistent() {
        let net = random_flow(3, 2, DeviceKind::Tanh3);
        let (x, logq_fwd) = net.transport(&[0.2, 0.5]).unwrap();
        let logq_back = net.forward_logdensity(&x).unwrap();
        // forward and reverse Euler agree up to O(Δt)
        assert!((logq_fwd - logq_back).abs() < 5e-2, "{logq_fwd} vs {logq_back}");
        assert!(logq_back.is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = random_flow(8, 3, DeviceKind::Tanh3);
        let text = net.to_json();
        let back = KirchhoffNet::from_json(&text).unwrap();
        assert_eq!(back, net);
        let x = [0.123456789, -0.987654321];
        assert_eq!(
            back.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            net.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(KirchhoffNet::from_json(&text[..text.len() / 2]), Err(Error::Parse { .. })));
        let bumped = text.replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(KirchhoffNet::from_json(&bumped), Err(Error::Version { found: 7, .. })));
    }
}
