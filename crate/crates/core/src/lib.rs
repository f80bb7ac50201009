//! Level-set topology optimization of unimorph cantilevered piezoelectric
//! energy harvesters.
//!
//! The pipeline is: build a tagged hexahedral mesh ([`mesh`]), interpolate
//! material properties from two level-set fields ([`materials`],
//! [`level_set`]), assemble the coupled operators and solve the open- and
//! short-circuit eigenproblems ([`fem`]), evaluate coupling, frequency and
//! voltage measures ([`objectives`], [`response`]) and evolve the fields with
//! a reaction–diffusion update ([`optimizer`]).

pub mod config;
pub mod eigen;
pub mod error;
pub mod fem;
pub mod history;
pub mod level_set;
pub mod materials;
pub mod mesh;
pub mod objectives;
pub mod optimizer;
pub mod response;
pub mod sparse;
pub mod vtk;
pub mod xi;

pub use error::{Error, Result};
