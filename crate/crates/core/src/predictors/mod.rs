//! Block predictors. Each predictor maps the causal contexts of a 2x2 block
//! to a quantized, bounded 2x2 prediction.

mod cnn;
pub mod graph;
mod linear;

use std::fmt;
use std::sync::Arc;

pub use cnn::{predict_cnn, CnnPredictor};
pub use graph::NetworkGraph;
pub use linear::{med, predict_linear, LinearPredictor};

use crate::context::{extract_from_view, CanvasView, ContextPair};
use crate::error::Result;
use crate::mosaic::BayerPhase;

/// A 2x2 block of predicted samples, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PredictionBlock {
    pub values: [[u16; 2]; 2],
}

impl PredictionBlock {
    pub fn splat(v: u16) -> Self {
        PredictionBlock { values: [[v; 2]; 2] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictorTag {
    Linear = 0,
    Cnn = 1,
}

/// Identifies the predictor a stream was encoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PredictorId {
    pub tag: PredictorTag,
    /// Content hash of the weight file; present iff `tag` is `Cnn`.
    pub weights_hash: Option<u64>,
}

impl PredictorId {
    pub const LINEAR: PredictorId = PredictorId { tag: PredictorTag::Linear, weights_hash: None };

    pub fn cnn(hash: u64) -> Self {
        PredictorId { tag: PredictorTag::Cnn, weights_hash: Some(hash) }
    }
}

impl fmt::Display for PredictorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.weights_hash {
            Some(h) => write!(f, "cnn:{h:016x}"),
            None => f.write_str("linear"),
        }
    }
}

pub trait Predictor: Send + Sync {
    fn id(&self) -> PredictorId;

    fn predict(&self, ctx: &ContextPair, phase: BayerPhase, bit_depth: u8) -> Result<PredictionBlock>;

    /// Predict the block at `origin` of a canvas padded so both context
    /// windows exist. Only samples in the causal past of the block are read.
    fn predict_at(&self, canvas: &CanvasView<'_>, origin: (usize, usize)) -> Result<PredictionBlock> {
        let ctx = extract_from_view(canvas, origin)?;
        self.predict(&ctx, canvas.phase, canvas.bit_depth)
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn id(&self) -> PredictorId {
        (**self).id()
    }

    fn predict(&self, ctx: &ContextPair, phase: BayerPhase, bit_depth: u8) -> Result<PredictionBlock> {
        (**self).predict(ctx, phase, bit_depth)
    }

    fn predict_at(&self, canvas: &CanvasView<'_>, origin: (usize, usize)) -> Result<PredictionBlock> {
        (**self).predict_at(canvas, origin)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn id(&self) -> PredictorId {
        (**self).id()
    }

    fn predict(&self, ctx: &ContextPair, phase: BayerPhase, bit_depth: u8) -> Result<PredictionBlock> {
        (**self).predict(ctx, phase, bit_depth)
    }

    fn predict_at(&self, canvas: &CanvasView<'_>, origin: (usize, usize)) -> Result<PredictionBlock> {
        (**self).predict_at(canvas, origin)
    }
}
