//! Convexity machinery of the optimal-weight method.
//!
//! For a growth law `g` the profile works with H(s) = √s·g(√s) on [0, s0²],
//! its conjugate Ĥ*, L(r) = Ĥ*(r)/r, the ratio Λ_H(s) = H(s)/(s·H'(s)), the
//! time change ψ and the weight w(s) = L⁻¹(s/β). Envelopes turn these into
//! decay bounds for the energy.

mod envelope;
mod growth;
mod profile;

pub use envelope::{DecayEnvelope, EnvelopeVariant};
pub use growth::{CustomLaw, GrowthFunction, GrowthKind, GrowthLaw};
pub use profile::{default_beta, ConvexityProfile, DecayMode, Tolerances};
