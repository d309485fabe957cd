// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod cli;
pub mod delta;
pub mod manip_ctrl;
pub mod mobase;
pub mod multibody;
pub mod scenario;
pub mod sea;
pub mod spatial;
