pub mod error;
pub mod counters;
pub mod dataset;
pub mod geom;
pub mod losses;
pub mod mesher;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod sdf;
pub mod trainer;

pub use error::{Error, Result};
