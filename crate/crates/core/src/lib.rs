//! From-scratch implementation of a scene-classification CNN regularized by
//! a fully-convolutional semantic-segmentation branch, together with the
//! surrounding machinery: a dense f64 tensor core with finite-difference
//! gradient checking, SGD-with-momentum training, an RGB-D input pipeline
//! (depth rescaling, bilateral smoothing, point clouds, surface normals),
//! tf-idf scene-object priors for refining segmentation, an
//! object-occurrence SVM baseline, evaluation metrics, and a deterministic
//! synthetic dataset generator.

pub mod data;
pub mod depth;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod occurrence;
pub mod param;
pub mod refine;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
