//! Curvature certification and trajectory diagnostics for the weight-decayed
//! squared loss of scalar-output ReLU networks.
//!
//! * [`net`]: switch-matrix evaluation, activation signatures, smoothness classes.
//! * [`loss`]: `ℓ`, `ℓ_λ`, gradients, Hessian-vector products, Laplacian.
//! * [`region`]: the region `U(λ, θ)`, curvature floors, certificates, isolation probes.
//! * [`trajectory`]: gradient flow, SGD, and curvature along the path.
//! * [`linear`]: the all-switches-on network, rotation symmetry, critical-point search.
//! * [`data`]: teacher datasets, CSV and IDX loading, radius normalization.

pub mod data;
pub mod descent;
pub mod error;
pub mod fixtures;
pub mod linear;
pub mod loss;
pub mod matrix;
pub mod net;
pub mod region;
pub mod rng;
pub mod serde_f17;
pub mod spectral;
pub mod trajectory;

pub use error::{Error, Result};
pub use loss::LossConfig;
pub use matrix::Matrix;
pub use net::{Architecture, Dataset, Direction, Params, SwitchSignature, Switching};
pub use region::{Certificate, RegionSpec};
