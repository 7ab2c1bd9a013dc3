pub mod agcn;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod mcnn;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
