//! Lossless coding of Bayer colour-filter-array mosaics.
//!
//! Each 2x2 block is predicted from two causal 64x64 windows (one above, one
//! to the left), either by a median edge detector or by a two-branch
//! convolutional network loaded from a weight file. Residuals are coded with
//! adaptive arithmetic coding, one model per colour channel and per quantized
//! local-variance class.

pub mod cli;
pub mod coder;
pub mod context;
pub mod entropy;
pub mod error;
pub mod io;
pub mod mosaic;
pub mod par;
pub mod pipeline;
pub mod predictors;
pub mod quantizer;

pub use error::{Error, Result};
pub use mosaic::{BayerPhase, Channel, MosaicImage};
pub use par::ExecMode;
pub use pipeline::{analyze_image, decode_image, encode_image, NoWeights, WeightResolver, WeightSearchPath};
pub use predictors::{CnnPredictor, LinearPredictor, NetworkGraph, Predictor, PredictorId};
pub use quantizer::QuantizerCodebook;
