//! Classical simulation engine for time evolution of translation-invariant
//! 1D spin chains in the thermodynamic limit, using layered uniform
//! sequential circuits as the variational state class.

pub mod circuit;
pub mod evolve;
pub mod gates;
pub mod tensor;
pub mod transfer;
pub mod umps;
