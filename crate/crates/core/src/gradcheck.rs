//! Adjoint gradients against central finite differences on random nets.
//!
//! For the ReLU kinds a parameter is skipped when either perturbed run
//! flips the sign of any preactivation at any recorded step: finite
//! differences across a kink measure a one-sided slope and say nothing
//! about the adjoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::device::DeviceKind;
use crate::dynamics::LayerDynamics;
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::model::{KirchhoffNet, Layer, Pass};
use crate::topology::Topology;

/// Relative error with a floor on the denominator, so that gradients of
/// order `1e-4` and below are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub kind: DeviceKind,
    pub nets: usize,
    pub max_nodes: usize,
    pub max_depth: usize,
    pub steps: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl GradcheckConfig {
    pub fn new(kind: DeviceKind, seed: u64) -> Self {
        GradcheckConfig {
            kind,
            nets: 20,
            max_nodes: 8,
            max_depth: 3,
            steps: 32,
            eps: 1e-5,
            tolerance: 1e-4,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: DeviceKind,
    pub nets: usize,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a kink.
    pub excluded: usize,
    pub max_rel_err: f64,
    /// `(net, parameter)` of the worst comparison.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// A random multi-layer net with random multigraph topologies, ground
/// devices, node counts that change between layers, a random input and a
/// random readout, plus random loss weights.
pub struct RandomCase {
    pub net: KirchhoffNet,
    pub x: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RandomCase {
    /// `L = Σ wᵢ yᵢ + ½ Σ yᵢ²`.
    pub fn loss(&self, net: &KirchhoffNet) -> Result<f64> {
        let y = net.forward(&self.x)?;
        Ok(y.iter().zip(&self.weights).map(|(y, w)| w * y + 0.5 * y * y).sum())
    }

    fn loss_grad(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.weights).map(|(y, w)| w + y).collect()
    }
}

pub fn random_case(kind: DeviceKind, seed: u64, max_nodes: usize, max_depth: usize, steps: usize) -> Result<RandomCase> {
    kind.ensure_branch()?;
    if max_nodes < 2 || max_depth == 0 || steps == 0 {
        return Err(Error::invalid("random nets need max_nodes >= 2, max_depth >= 1 and steps >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=max_depth);
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let n = rng.random_range(2..=max_nodes);
        let mut edges = Vec::new();
        for _ in 0..rng.random_range(n..=3 * n) {
            let s = rng.random_range(0..n);
            let d = (s + rng.random_range(1..n)) % n;
            edges.push((s, d));
        }
        let ground: Vec<usize> = (0..rng.random_range(0..=n)).map(|_| rng.random_range(0..n)).collect();
        let topo = Topology::new(n, edges, ground)?;
        let params = (0..topo.num_devices() * kind.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dynamics = LayerDynamics::new(topo, kind, params, rng.random_range(0.5..2.0))?;
        let horizon = rng.random_range(0.3..1.0);
        // ReLU kinks are only monitored at step boundaries, so ReLU nets use
        // Euler; smooth kinds alternate between the two steppers
        let integrator = if !kind.is_relu() && seed % 2 == 1 {
            IntegratorConfig::rk4(horizon, steps)
        } else {
            IntegratorConfig::euler(horizon, steps)
        };
        layers.push(Layer::new(dynamics, integrator)?);
    }
    let first = layers[0].dynamics.num_nodes();
    let last = layers[depth - 1].dynamics.num_nodes();
    let mut inputs: Vec<usize> = (0..first).collect();
    inputs.truncate(rng.random_range(1..=first));
    let mut readout: Vec<usize> = (0..last).filter(|_| rng.random_bool(0.6)).collect();
    if readout.is_empty() {
        readout.push(last - 1);
    }
    let x = inputs.iter().map(|_| rng.random_range(-1.5..1.5)).collect();
    let weights = readout.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(RandomCase {
        net: KirchhoffNet::new(layers, inputs, readout)?,
        x,
        weights,
    })
}

/// Sign pattern of every preactivation at every recorded state.
fn kink_pattern(net: &KirchhoffNet, pass: &Pass) -> Vec<bool> {
    let mut out = Vec::new();
    for (idx, traj) in &pass.trajectories {
        let dynamics = &net.layers()[*idx].dynamics;
        for v in &traj.checkpoints {
            out.extend(dynamics.preactivations(v).into_iter().map(|z| z > 0.0));
        }
    }
    out
}

/// Compare adjoint and finite-difference gradients on `cfg.nets` random
/// nets.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut report = GradcheckReport {
        kind: cfg.kind,
        nets: cfg.nets,
        checked: 0,
        excluded: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    for k in 0..cfg.nets {
        let case = random_case(cfg.kind, cfg.seed.wrapping_add(k as u64), cfg.max_nodes, cfg.max_depth, cfg.steps)?;
        let (y, pass) = case.net.forward_traced(&case.x)?;
        let adjoint = case.net.output_gradient(&pass, &case.loss_grad(&y))?.params;
        let base_pattern = cfg.kind.is_relu().then(|| kink_pattern(&case.net, &pass));
        let params = case.net.params();
        let mut probe = case.net.clone();
        let mut shifted = params.clone();
        for (j, &g) in adjoint.iter().enumerate() {
            let mut eval = |delta: f64| -> Result<(f64, bool)> {
                shifted[j] = params[j] + delta;
                probe.set_params(&shifted)?;
                shifted[j] = params[j];
                let crossed = match &base_pattern {
                    Some(base) => {
                        let (_, p) = probe.forward_traced(&case.x)?;
                        kink_pattern(&probe, &p) != *base
                    }
                    None => false,
                };
                Ok((case.loss(&probe)?, crossed))
            };
            let (up, crossed_up) = eval(cfg.eps)?;
            let (down, crossed_down) = eval(-cfg.eps)?;
            if crossed_up || crossed_down {
                report.excluded += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * cfg.eps);
            let err = rel_err(g, fd);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((k, j));
            }
        }
    }
    Ok(report)
}
