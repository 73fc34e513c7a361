//! Contactless stress tracing from ultra-wideband radar returns.
//!
//! The crate simulates channel impulse response (CIR) frames for seated
//! subjects whose chest motion encodes heartbeat and respiration, then traces
//! a binary stress state over time with a three-stage network: per-signal
//! extraction (`sem`), multimodal fusion with cross and residual connections
//! (`mfm`), and a recurrent tracing head (`stm`). Everything trains on the
//! in-crate reverse-mode autodiff engine in `tensor`.

pub mod cli;
pub mod config;
pub mod mfm;
pub mod model;
pub mod stm;
pub mod train;
pub mod radar;
pub mod sem;
pub mod tensor;
