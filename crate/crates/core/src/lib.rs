//! Visual-inertial odometry plus Monte-Carlo localization of a UAV against a
//! georeferenced orthophoto, using orthorectified oblique camera images.

pub mod calib;
pub mod geo;
pub mod io;
pub mod mcl;
pub mod metrics;
pub mod ortho;
pub mod pipeline;
pub mod raster;
pub mod sim;
pub mod track;
pub mod vio;
