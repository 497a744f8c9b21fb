//! Single-image controllable head avatars rendered from mesh vertices.
//!
//! A parametric head mesh is posed from shape, expression and pose
//! coefficients; a transformer learns one feature descriptor per vertex from
//! a source image; the descriptors are splatted into image space with a
//! z-buffer and a U-Net turns the splat into an RGB frame plus a foreground
//! mask.

mod error;

pub mod ablation;
pub mod bench;
pub mod camera;
pub mod head_model;
pub mod imaging;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod rasterizer;
pub mod renderer;
pub mod training;
pub mod vertex_transformer;
pub mod weights;

pub use error::{Error, Result};
