//! A desk-scale laboratory for learned parallel unmasking in masked
//! diffusion sampling: exactly solvable Markov-chain generation
//! environments, confidence-based unmasking policies trained with
//! group-relative policy optimization, heuristic baselines, and an
//! accuracy-versus-compute evaluation harness.

pub mod autodiff;
pub mod config;
pub mod env;
pub mod grpo;
pub mod harness;
pub mod heuristics;
pub mod nn;
pub mod policy;
pub mod rng;
