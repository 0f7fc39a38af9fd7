//! Signal and shift-distribution recovery for multireference alignment.

pub mod cyclic;
pub mod bounds;
pub mod em;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod ls;
pub mod moments;
pub mod spectral;
pub mod spiked;

pub use cyclic::{align, dft, idft, relative_error, shift, AlignmentResult, Distribution, Signal, Spectrum};
pub use error::{MraError, Result};
pub use model::{generate, GeneratorConfig, ObservationSet};
