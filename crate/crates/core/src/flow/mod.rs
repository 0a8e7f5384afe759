//! Invertible conditional maps with exact log-determinants.

mod cnf;
mod discrete;

pub use cnf::{
    cnf_logdensity, integrate, jacobian_trace, CnfBackend, ConcatSquashField, LinearField, TraceMode,
    VectorField, DEFAULT_STEPS, EXACT_TRACE_MAX_DIM, MIN_STEPS,
};
pub use discrete::{
    standard_normal_logpdf, standard_normal_logpdf_row, ActNorm, ArAffine, FlowBlock, FlowConfig, FlowStack,
    InvertibleLinear, S_MAX,
};
