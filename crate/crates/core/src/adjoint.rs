//! Reverse-mode gradients through a fixed-step layer integration.
//!
//! The backward pass is the exact transpose of the discrete forward
//! computation (discretize, then differentiate). For forward Euler,
//! stepping from `t + Δt` back to `t`:
//!
//! ```text
//! a(t)  = a(t+Δt) + Δt · J(v(t))ᵀ a(t+Δt)
//! ∇θ   += Δt · (∂f/∂θ)(v(t))ᵀ a(t+Δt)
//! ```
//!
//! When the log-density channel is active (`dℓ/dt = −tr ∂f/∂v`), its
//! adjoint `a_ℓ` is constant in time and contributes `−a_ℓ ∇ tr` to both
//! sums. RK4 steps are reversed stage by stage, recomputing the stage
//! states from the stored step-boundary checkpoints. ReLU indicators are
//! re-evaluated at exactly the stored states, so forward and backward agree
//! on which side of each kink they are.

use crate::dynamics::LayerDynamics;
use crate::error::{Error, Result};
use crate::integrator::{IntegratorConfig, Method, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    /// `∂L/∂v` at the current time.
    pub a: Vec<f64>,
    /// `∂L/∂ℓ`, constant along the trajectory.
    pub a_logp: Option<f64>,
    pub grad_params: Vec<f64>,
    pub grad_v0: Vec<f64>,
}

/// Gradients of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub grad_params: Vec<f64>,
    pub grad_v0: Vec<f64>,
}

pub fn backward(
    dynamics: &LayerDynamics,
    trajectory: &Trajectory,
    cfg: &IntegratorConfig,
    dl_dv: &[f64],
    dl_dlogp: Option<f64>,
) -> Result<LayerGradient> {
    let mut state = AdjointState {
        a: dl_dv.to_vec(),
        a_logp: dl_dlogp,
        grad_params: vec![0.0; dynamics.num_params()],
        grad_v0: Vec::new(),
    };
    backward_into(dynamics, trajectory, cfg, &mut state)?;
    Ok(LayerGradient {
        grad_params: state.grad_params,
        grad_v0: state.grad_v0,
    })
}

/// Run the backward pass on `state` in place: `state.a` enters as `∂L/∂v(T)`
/// and leaves as `∂L/∂v(0)` (also copied to `grad_v0`); parameter gradients
/// are added to `state.grad_params`.
pub fn backward_into(
    dynamics: &LayerDynamics,
    trajectory: &Trajectory,
    cfg: &IntegratorConfig,
    state: &mut AdjointState,
) -> Result<()> {
    cfg.validate()?;
    let n = dynamics.num_nodes();
    if trajectory.checkpoints.len() != cfg.steps + 1 {
        return Err(Error::invalid(format!(
            "trajectory holds {} checkpoints, config needs {}",
            trajectory.checkpoints.len(),
            cfg.steps + 1
        )));
    }
    if trajectory.method != cfg.method || (trajectory.dt.abs() - cfg.dt()).abs() > 1e-12 * cfg.dt() {
        return Err(Error::invalid("trajectory was recorded with a different integrator config"));
    }
    if trajectory.checkpoints.iter().any(|c| c.len() != n) || state.a.len() != n {
        return Err(Error::invalid(format!("state dimension does not match the {n}-node layer")));
    }
    if state.grad_params.len() != dynamics.num_params() {
        return Err(Error::invalid("gradient accumulator does not match the layer parameters"));
    }

    let h = trajectory.dt;
    let a_logp = state.a_logp.unwrap_or(0.0);
    let mut scratch = Scratch::new(n);
    for step in (0..cfg.steps).rev() {
        let v = &trajectory.checkpoints[step];
        match cfg.method {
            Method::ForwardEuler => scratch.euler(dynamics, v, h, a_logp, &mut state.a, &mut state.grad_params),
            Method::Rk4 => scratch.rk4(dynamics, v, h, a_logp, &mut state.a, &mut state.grad_params),
        }
        if state.a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                step,
                message: "non-finite adjoint".into(),
            });
        }
    }
    if state.grad_params.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            step: 0,
            message: "non-finite parameter gradient".into(),
        });
    }
    state.grad_v0 = state.a.clone();
    Ok(())
}

struct Scratch {
    cot: Vec<f64>,
    out: Vec<f64>,
    k: [Vec<f64>; 3],
    u: [Vec<f64>; 3],
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            cot: vec![0.0; n],
            out: vec![0.0; n],
            k: std::array::from_fn(|_| vec![0.0; n]),
            u: std::array::from_fn(|_| vec![0.0; n]),
        }
    }

    fn euler(&mut self, dynamics: &LayerDynamics, v: &[f64], h: f64, a_logp: f64, a: &mut [f64], grad: &mut [f64]) {
        for (c, x) in self.cot.iter_mut().zip(a.iter()) {
            *c = h * x;
        }
        self.out.fill(0.0);
        dynamics.vjp_into(v, &self.cot, -h * a_logp, &mut self.out, grad);
        for (x, d) in a.iter_mut().zip(&self.out) {
            *x += d;
        }
    }

    fn rk4(&mut self, dynamics: &LayerDynamics, v: &[f64], h: f64, a_logp: f64, a: &mut [f64], grad: &mut [f64]) {
        const W: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
        // stage states u2, u3, u4
        let [k1, k2, k3] = &mut self.k;
        let [u2, u3, u4] = &mut self.u;
        dynamics.rhs_into(v, k1);
        for i in 0..v.len() {
            u2[i] = v[i] + 0.5 * h * k1[i];
        }
        dynamics.rhs_into(u2, k2);
        for i in 0..v.len() {
            u3[i] = v[i] + 0.5 * h * k2[i];
        }
        dynamics.rhs_into(u3, k3);
        for i in 0..v.len() {
            u4[i] = v[i] + h * k3[i];
        }

        let a_next = a.to_vec();
        // cotangent of the stage slope feeding the next stage, scaled by the
        // stage offset; starts empty for the last stage
        let mut carry = vec![0.0; v.len()];
        let stages: [(&[f64], f64); 4] = [(u4, 1.0), (u3, 0.5), (u2, 0.5), (v, 0.0)];
        for (idx, (u, offset)) in stages.into_iter().enumerate() {
            let w = W[3 - idx];
            for i in 0..v.len() {
                self.cot[i] = w * h * a_next[i] + carry[i];
            }
            self.out.fill(0.0);
            dynamics.vjp_into(u, &self.cot, -w * h * a_logp, &mut self.out, grad);
            for i in 0..v.len() {
                a[i] += self.out[i];
                carry[i] = offset * h * self.out[i];
            }
        }
    }
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(params: &[f64], mut loss: F, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let up = loss(&probe)?;
        probe[i] = params[i] - eps;
        let down = loss(&probe)?;
        probe[i] = params[i];
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}
