pub mod bt;
pub mod diag;
pub mod expr;
pub mod hl;
pub mod jani;
pub mod registry;
pub mod scxml;
pub mod smc;
pub mod system;
pub mod translate;
mod xml;
