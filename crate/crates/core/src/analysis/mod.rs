//! Decay measurement, observability constants, mesh-uniformity sweeps and
//! numerical audits of the comparison inequalities behind the decay proofs.

mod audit;
mod decay;
mod gramian;
mod iteration;
mod sweep;

pub use audit::{audit_space, audit_time, lemma_audit, AuditEntry, AuditReport};
pub use decay::{
    envelope_check, fit_decay, fit_decay_series, half_time, half_time_series, DecayFit, EnvelopeCheck,
    FitModel, HalfTime,
};
pub use gramian::{gramian_constant, GramianReport};
pub use iteration::{discrete_iteration, IterationReport, IterationWindow};
pub use sweep::{
    uniformity_sweep, CellResult, EnvelopeSpec, FitSpec, FitWindow, SweepCell, SweepResult, SweepSpec, Uniformity,
};
