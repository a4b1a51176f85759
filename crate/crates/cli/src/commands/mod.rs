pub mod fit;
pub mod predict;
pub mod rank;
pub mod synth;
