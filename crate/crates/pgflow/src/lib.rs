//! Power-flow analysis toolkit: a Newton-Raphson AC power-flow solver used as
//! ground truth, and physics-guided neural power-flow solvers in which an MLP
//! encoder predicts bus voltages while a physics-encoding decoder (MLP,
//! bilinear, or topology-pruned bilinear) reconstructs power injections as a
//! regularizing auxiliary task.

pub mod acpf;
pub mod case_model;
pub mod data;
pub mod experiments;
pub mod linalg;
pub mod nn;
pub mod pgnn;
