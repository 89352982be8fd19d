//! Style-based face swapping: attribute infusion into a modulated-convolution
//! generator, a mask branch that blends and gates attributes, training on
//! procedurally rendered faces, and identity inversion in W/W+ space.

pub mod augment;
pub mod checkpoint;
pub mod embedders;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod inversion;
pub mod losses;
pub mod mask;
pub mod networks;
pub mod swap;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use styleswap_autograd as autograd;
