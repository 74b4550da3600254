//! Attention components: the continuous local rendering head and the
//! scale-aware non-local feature block.

pub mod local;
pub mod nonlocal;
