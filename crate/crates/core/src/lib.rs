pub mod codec;
pub mod dehair;
pub mod geomesh;
pub mod losses;
pub mod lten;
pub mod raster;
pub mod splat;
pub mod synth;
pub mod tensor;
pub mod harness;
