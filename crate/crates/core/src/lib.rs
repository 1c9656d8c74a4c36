//! Compiler and interpreter for recurrent-tensor programs.

pub mod astgen;
pub mod frontend;
pub mod pdg;
pub mod pipeline;
pub mod polysched;
pub mod runtime;
pub mod symexpr;
pub mod transforms;
