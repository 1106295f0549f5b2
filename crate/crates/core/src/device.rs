//! Current-voltage laws of the learnable branch devices.
//!
//! Every supported law is an activation applied to a pre-activation that
//! is affine in the terminal voltages:
//!
//! | kind          | current                          | params |
//! |---------------|----------------------------------|--------|
//! | `source`      | `θ`                              | 1      |
//! | `conductance` | `θ (v_s - v_d)`                  | 1      |
//! | `relu2`       | `relu(θ1 (v_s - v_d) + θ2)`      | 2      |
//! | `tanh2`       | `tanh(θ1 (v_s - v_d) + θ2)`      | 2      |
//! | `relu3`       | `relu(θ1 v_s + θ2 v_d + θ3)`     | 3      |
//! | `tanh3`       | `tanh(θ1 v_s + θ2 v_d + θ3)`     | 3      |
//!
//! The ReLU derivative at exactly zero is taken as 0.
//!
//! Capacitance exists as a kind so that configs can name it, but the only
//! capacitors in the architecture are the fixed node-to-ground ones that
//! the dynamics absorb as a `1/θ` factor; evaluating it as a branch is an
//! error.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Source,
    Conductance,
    Capacitance,
    Relu2,
    Tanh2,
    Relu3,
    Tanh3,
}

impl DeviceKind {
    pub const LEARNABLE: [DeviceKind; 6] = [
        DeviceKind::Source,
        DeviceKind::Conductance,
        DeviceKind::Relu2,
        DeviceKind::Tanh2,
        DeviceKind::Relu3,
        DeviceKind::Tanh3,
    ];

    /// The four nonlinear laws used for training.
    pub const NONLINEAR: [DeviceKind; 4] = [
        DeviceKind::Relu2,
        DeviceKind::Tanh2,
        DeviceKind::Relu3,
        DeviceKind::Tanh3,
    ];

    pub fn param_count(self) -> usize {
        match self {
            DeviceKind::Source | DeviceKind::Conductance | DeviceKind::Capacitance => 1,
            DeviceKind::Relu2 | DeviceKind::Tanh2 => 2,
            DeviceKind::Relu3 | DeviceKind::Tanh3 => 3,
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, DeviceKind::Source | DeviceKind::Conductance)
    }

    pub fn is_relu(self) -> bool {
        matches!(self, DeviceKind::Relu2 | DeviceKind::Relu3)
    }

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::Source => "source",
            DeviceKind::Conductance => "conductance",
            DeviceKind::Capacitance => "capacitance",
            DeviceKind::Relu2 => "relu2",
            DeviceKind::Tanh2 => "tanh2",
            DeviceKind::Relu3 => "relu3",
            DeviceKind::Tanh3 => "tanh3",
        }
    }

    /// Reject kinds that cannot sit on a learnable edge.
    pub fn ensure_branch(self) -> Result<()> {
        if self == DeviceKind::Capacitance {
            return Err(Error::UnsupportedDevice(
                "capacitance is only available as the fixed node-to-ground capacitor".into(),
            ));
        }
        Ok(())
    }

    fn check(self, params: &[f64]) -> Result<()> {
        self.ensure_branch()?;
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "{} expects {} parameters, got {}",
                self.name(),
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeviceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" => Ok(DeviceKind::Source),
            "conductance" => Ok(DeviceKind::Conductance),
            "capacitance" => Ok(DeviceKind::Capacitance),
            "relu2" => Ok(DeviceKind::Relu2),
            "tanh2" => Ok(DeviceKind::Tanh2),
            "relu3" => Ok(DeviceKind::Relu3),
            "tanh3" => Ok(DeviceKind::Tanh3),
            other => Err(Error::invalid(format!("unknown device kind {other:?}"))),
        }
    }
}

/// Parameter vector of one edge, tied to its device kind.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeParams {
    kind: DeviceKind,
    values: Vec<f64>,
}

impl EdgeParams {
    pub fn new(kind: DeviceKind, values: Vec<f64>) -> Result<Self> {
        kind.check(&values)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("edge parameters must be finite"));
        }
        Ok(EdgeParams { kind, values })
    }

    pub fn kind(&self) -> DeviceKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `(∂i/∂v_s, ∂i/∂v_d, ∂i/∂θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Partials {
    pub dv_s: f64,
    pub dv_d: f64,
    pub dtheta: Vec<f64>,
}

pub fn branch_current(kind: DeviceKind, v_s: f64, v_d: f64, params: &[f64]) -> Result<f64> {
    kind.check(params)?;
    Ok(current(kind, v_s, v_d, params))
}

pub fn branch_current_partials(kind: DeviceKind, v_s: f64, v_d: f64, params: &[f64]) -> Result<Partials> {
    kind.check(params)?;
    let l = Local::eval(kind, v_s, v_d, params);
    let n = kind.param_count();
    Ok(Partials {
        dv_s: l.d1 * l.w_s,
        dv_d: l.d1 * l.w_d,
        dtheta: l.dz[..n].iter().map(|dz| l.d1 * dz).collect(),
    })
}

#[inline(always)]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Branch current without argument checks. `params` must hold at least
/// `kind.param_count()` values and `kind` must not be `Capacitance`.
#[inline]
pub(crate) fn current(kind: DeviceKind, v_s: f64, v_d: f64, p: &[f64]) -> f64 {
    match kind {
        DeviceKind::Source => p[0],
        DeviceKind::Conductance => p[0] * (v_s - v_d),
        DeviceKind::Relu2 => relu(p[0] * (v_s - v_d) + p[1]),
        DeviceKind::Tanh2 => (p[0] * (v_s - v_d) + p[1]).tanh(),
        DeviceKind::Relu3 => relu(p[0] * v_s + p[1] * v_d + p[2]),
        DeviceKind::Tanh3 => (p[0] * v_s + p[1] * v_d + p[2]).tanh(),
        DeviceKind::Capacitance => unreachable!("capacitance is rejected before evaluation"),
    }
}

/// Pre-activation of the device law, `None` for the linear kinds.
#[inline]
pub(crate) fn preactivation(kind: DeviceKind, v_s: f64, v_d: f64, p: &[f64]) -> Option<f64> {
    match kind {
        DeviceKind::Relu2 | DeviceKind::Tanh2 => Some(p[0] * (v_s - v_d) + p[1]),
        DeviceKind::Relu3 | DeviceKind::Tanh3 => Some(p[0] * v_s + p[1] * v_d + p[2]),
        _ => None,
    }
}

/// Local first- and second-order information of one device at one state.
///
/// With pre-activation `z = w_s v_s + w_d v_d + (terms in θ)` and current
/// `i = act(z)`: `d1 = act'(z)`, `d2 = act''(z)`, `dz[k] = ∂z/∂θ_k`,
/// `dw_s[k] = ∂w_s/∂θ_k`, `dw_d[k] = ∂w_d/∂θ_k`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Local {
    pub current: f64,
    pub d1: f64,
    pub d2: f64,
    pub w_s: f64,
    pub w_d: f64,
    pub dz: [f64; 3],
    pub dw_s: [f64; 3],
    pub dw_d: [f64; 3],
}

impl Local {
    #[inline]
    pub fn eval(kind: DeviceKind, v_s: f64, v_d: f64, p: &[f64]) -> Local {
        const Z: [f64; 3] = [0.0; 3];
        match kind {
            DeviceKind::Source => Local {
                current: p[0],
                d1: 1.0,
                d2: 0.0,
                w_s: 0.0,
                w_d: 0.0,
                dz: [1.0, 0.0, 0.0],
                dw_s: Z,
                dw_d: Z,
            },
            DeviceKind::Conductance => Local {
                current: p[0] * (v_s - v_d),
                d1: 1.0,
                d2: 0.0,
                w_s: p[0],
                w_d: -p[0],
                dz: [v_s - v_d, 0.0, 0.0],
                dw_s: [1.0, 0.0, 0.0],
                dw_d: [-1.0, 0.0, 0.0],
            },
            DeviceKind::Relu2 | DeviceKind::Tanh2 => {
                let z = p[0] * (v_s - v_d) + p[1];
                let (current, d1, d2) = activation(kind, z);
                Local {
                    current,
                    d1,
                    d2,
                    w_s: p[0],
                    w_d: -p[0],
                    dz: [v_s - v_d, 1.0, 0.0],
                    dw_s: [1.0, 0.0, 0.0],
                    dw_d: [-1.0, 0.0, 0.0],
                }
            }
            DeviceKind::Relu3 | DeviceKind::Tanh3 => {
                let z = p[0] * v_s + p[1] * v_d + p[2];
                let (current, d1, d2) = activation(kind, z);
                Local {
                    current,
                    d1,
                    d2,
                    w_s: p[0],
                    w_d: p[1],
                    dz: [v_s, v_d, 1.0],
                    dw_s: [1.0, 0.0, 0.0],
                    dw_d: [0.0, 1.0, 0.0],
                }
            }
            DeviceKind::Capacitance => unreachable!("capacitance is rejected before evaluation"),
        }
    }
}

#[inline(always)]
fn activation(kind: DeviceKind, z: f64) -> (f64, f64, f64) {
    if kind.is_relu() {
        if z > 0.0 {
            (z, 1.0, 0.0)
        } else {
            (0.0, 0.0, 0.0)
        }
    } else {
        let t = z.tanh();
        let s = 1.0 - t * t;
        (t, s, -2.0 * t * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn current_examples() {
        let i = branch_current(DeviceKind::Relu2, 1.0, 0.25, &[2.0, -1.0]).unwrap();
        assert!((i - 0.5).abs() < 1e-15);
        for a in [-3.0, 0.0, 0.7, 11.0] {
            assert_eq!(branch_current(DeviceKind::Tanh2, 0.4, 0.4, &[a, 0.0]).unwrap(), 0.0);
        }
        assert_eq!(branch_current(DeviceKind::Conductance, 2.0, 0.5, &[2.0]).unwrap(), 3.0);
        assert_eq!(branch_current(DeviceKind::Relu3, 0.5, -0.5, &[1.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(branch_current(DeviceKind::Source, 9.0, -3.0, &[0.25]).unwrap(), 0.25);
    }

    #[test]
    fn current_errors() {
        assert!(matches!(
            branch_current(DeviceKind::Capacitance, 0.0, 0.0, &[1.0]),
            Err(Error::UnsupportedDevice(_))
        ));
        assert!(matches!(
            branch_current(DeviceKind::Relu2, 0.0, 0.0, &[1.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(EdgeParams::new(DeviceKind::Tanh3, vec![0.0, f64::NAN, 1.0]).is_err());
        assert!(EdgeParams::new(DeviceKind::Tanh3, vec![0.0, 1.0]).is_err());
        assert_eq!(EdgeParams::new(DeviceKind::Tanh3, vec![0.0; 3]).unwrap().values().len(), 3);
    }

    #[test]
    fn partial_examples() {
        let p = branch_current_partials(DeviceKind::Relu2, 1.0, 0.25, &[2.0, 0.1]).unwrap();
        assert_eq!(p, Partials { dv_s: 2.0, dv_d: -2.0, dtheta: vec![0.75, 1.0] });
        let p = branch_current_partials(DeviceKind::Relu2, 0.0, 1.0, &[2.0, 0.1]).unwrap();
        assert_eq!(p, Partials { dv_s: 0.0, dv_d: 0.0, dtheta: vec![0.0, 0.0] });
        let (a, b) = (0.7, -1.3);
        // pre-activation a*v_s + b*v_d = 0
        let (vs, vd) = (1.3, 0.7);
        let p = branch_current_partials(DeviceKind::Tanh3, vs, vd, &[a, b, 0.0]).unwrap();
        assert!((p.dv_s - a).abs() < 1e-15 && (p.dv_d - b).abs() < 1e-15);
        assert!((p.dtheta[0] - vs).abs() < 1e-15 && (p.dtheta[1] - vd).abs() < 1e-15);
        assert!((p.dtheta[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kink_subgradient_is_zero() {
        let p = branch_current_partials(DeviceKind::Relu2, 0.5, 0.5, &[3.0, 0.0]).unwrap();
        assert_eq!((p.dv_s, p.dv_d), (0.0, 0.0));
    }

    #[test]
    fn kind_names_parse_case_insensitively() {
        for kind in DeviceKind::LEARNABLE {
            assert_eq!(kind.name().to_uppercase().parse::<DeviceKind>().unwrap(), kind);
        }
        assert!("diode".parse::<DeviceKind>().is_err());
    }

    fn fd(kind: DeviceKind, vs: f64, vd: f64, p: &[f64], which: usize) -> f64 {
        let h = 1e-6;
        let eval = |delta: f64| {
            let mut vs = vs;
            let mut vd = vd;
            let mut p = p.to_vec();
            match which {
                0 => vs += delta,
                1 => vd += delta,
                k => p[k - 2] += delta,
            }
            current(kind, vs, vd, &p)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in DeviceKind::LEARNABLE {
            let n = kind.param_count();
            let mut checked = 0;
            while checked < 10_000 {
                let vs: f64 = rng.random_range(-2.0..2.0);
                let vd: f64 = rng.random_range(-2.0..2.0);
                let p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                if let Some(z) = preactivation(kind, vs, vd, &p) {
                    if kind.is_relu() && z.abs() < 1e-4 {
                        continue;
                    }
                }
                checked += 1;
                let an = branch_current_partials(kind, vs, vd, &p).unwrap();
                let analytic: Vec<f64> = [an.dv_s, an.dv_d].into_iter().chain(an.dtheta).collect();
                for (which, a) in analytic.iter().enumerate() {
                    let f = fd(kind, vs, vd, &p, which);
                    let err = (a - f).abs() / a.abs().max(f.abs()).max(1e-3);
                    assert!(err < 1e-5, "{kind} partial {which}: {a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn difference_laws_are_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (vs, vd, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random_range(-5.0..5.0));
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            for kind in [DeviceKind::Relu2, DeviceKind::Tanh2] {
                let a = current(kind, vs, vd, &p);
                let b = current(kind, vs + c, vd + c, &p);
                assert!((a - b).abs() < 1e-12);
            }
            let i = current(DeviceKind::Tanh3, vs, vd, &[p[0], p[1], 0.3]);
            assert!(i > -1.0 && i < 1.0);
            assert!(current(DeviceKind::Relu3, vs, vd, &[p[0], p[1], 0.3]) >= 0.0);
        }
        // three-parameter laws see absolute voltages
        let p = [1.0, 0.5, 0.0];
        assert_ne!(
            current(DeviceKind::Tanh3, 0.1, 0.2, &p),
            current(DeviceKind::Tanh3, 1.1, 1.2, &p)
        );
    }
}
