//! KirchhoffNet: neural networks whose forward pass is the transient
//! response of a circuit governed by Kirchhoff's current law.

pub mod adjoint;
pub mod data;
pub mod device;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod integrator;
pub mod io;
pub mod model;
pub mod topology;
pub mod training;

pub use device::DeviceKind;
pub use dynamics::{LayerDynamics, NodeState};
pub use error::{Error, Result};
pub use integrator::{IntegratorConfig, Method};
pub use model::{KirchhoffNet, Layer};
pub use topology::Topology;
