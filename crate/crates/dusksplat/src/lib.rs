//! Differentiable 3D Gaussian splatting for low-light scenes.
//!
//! A Gaussian cloud is optimized jointly against all input views. Each
//! Gaussian's color is the product of a view-independent material component
//! and a view-dependent light component, both produced by small MLPs; a
//! learned per-Gaussian gamma correction enhances the light component so the
//! same scene renders both a reconstruction of the dark inputs and a relit,
//! view-consistent output. Everything runs on CPU in double precision with
//! hand-written backward passes.

pub mod cli;
pub mod error;
pub mod img;
pub mod losses;
pub mod math;
pub mod mcolor;
pub mod mlp;
pub mod preprocess;
pub mod rasterizer;
pub mod scene;

pub use error::{Error, Result};
