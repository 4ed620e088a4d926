//! Independent checks of the model: operation counts, baseline
//! equivalence at initialization, gradients and the prototypical loss.

mod equivalence;
mod flops;
mod gradcheck;
mod oracle;

pub use equivalence::check_baseline_equivalence;
pub use flops::{flop_count, symbolic_block_macs, symbolic_patch_macs, ComplexityTerms, ComponentMacs, FlopReport};
pub use gradcheck::{grad_check_model, grad_check_with_fault, GradCheckOptions, GradCheckReport, GradEntry};
pub use oracle::proto_oracle;
