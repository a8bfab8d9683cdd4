//! Tileable, optionally pattern-conditioned generation of spatially-varying
//! materials, a differentiable flash renderer, and inversion of the generator
//! against a single photograph.

pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod invert;
pub mod losses;
pub mod material;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod periodic_ops;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use periodic_ops::{PadMode, PeriodicTensor, Shift2D};
pub use tensor::{Real, Tensor};
pub use material::{ConditionPattern, MaterialClass, MaterialClassSpec, MaterialMaps, MaterialSample};
pub use render::RenderSetup;
pub use networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, LatentBundle};
