pub mod extract;
pub mod infer;
pub mod synth;
pub mod train;
