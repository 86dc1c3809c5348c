//! Total-variation optimization lab: ROF inner solvers, outer loops for
//! general linear operators, the unfolded residual network, and an
//! ultrasound speed-of-sound pipeline.

pub mod adam;
pub mod conv;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod outer;
pub mod rof;
pub mod rsnet;
pub mod synthetic;
pub mod ultrasound;

pub use error::{Error, Result};
pub use grid::{AxisWeights, Image, SolverConfig, VectorField};
