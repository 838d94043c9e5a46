//! Deterministic single-precision executor for [`NetworkGraph`].
//!
//! Nodes run in file order. Inside a node every output element starts from
//! its bias and accumulates `weight * input` one product at a time, over input
//! channels, then kernel rows, then kernel columns (dense: over the flattened
//! input in row-major order). Products and sums are separate IEEE-754 f32
//! operations; nothing is reassociated or fused.

use std::sync::Arc;

use crate::context::{ContextPair, CONTEXT_SIZE};
use crate::error::{Error, Result};
use crate::mosaic::{max_sample, BayerPhase};

use super::graph::{NetworkGraph, Op, Shape, OUTPUT_SIZE};
use super::{PredictionBlock, Predictor, PredictorId};

impl NetworkGraph {
    /// Run the graph on two normalized `64x64` inputs and return the flattened
    /// `16x16` output.
    pub fn forward(&self, top: &[f32], left: &[f32]) -> Result<Vec<f32>> {
        self.run(top, left, None)
    }

    /// The output elements at flat indices `demand`, in that order. When the
    /// graph ends in a dense layer (optionally reshaped) that nothing else
    /// reads, only the demanded rows of that layer are evaluated; the values
    /// are identical to those of [`forward`](Self::forward).
    pub fn forward_outputs(&self, top: &[f32], left: &[f32], demand: &[usize]) -> Result<Vec<f32>> {
        let out = self.run(top, left, self.sparse_head().map(|k| (k, demand)))?;
        demand
            .iter()
            .map(|&i| out.get(i).copied().ok_or_else(|| Error::Graph(format!("output index {i} out of range"))))
            .collect()
    }

    /// Index of a final dense node whose rows can be evaluated on demand.
    fn sparse_head(&self) -> Option<usize> {
        let nodes = self.nodes();
        let mut k = nodes.len() - 1;
        while let Op::Reshape { .. } = nodes[k].op {
            k = nodes[k].inputs[0].checked_sub(2)?;
        }
        let Op::Dense { .. } = nodes[k].op else { return None };
        // only a chain of reshapes may follow, each reading its predecessor
        let sole = nodes[k + 1..]
            .iter()
            .enumerate()
            .all(|(o, n)| matches!(n.op, Op::Reshape { .. }) && n.inputs == [k + o + 2]);
        sole.then_some(k)
    }

    fn run(&self, top: &[f32], left: &[f32], sparse: Option<(usize, &[usize])>) -> Result<Vec<f32>> {
        let n = CONTEXT_SIZE * CONTEXT_SIZE;
        if top.len() != n || left.len() != n {
            return Err(Error::Graph(format!(
                "graph inputs must hold {n} values, got {} and {}",
                top.len(),
                left.len()
            )));
        }
        let shapes = self.shapes();
        let mut tensors: Vec<Vec<f32>> = Vec::with_capacity(shapes.len());
        tensors.push(top.to_vec());
        tensors.push(left.to_vec());
        for (k, node) in self.nodes().iter().enumerate() {
            let out_shape = shapes[k + 2];
            let first = node.inputs[0];
            let out = match &node.op {
                Op::Conv2d { in_ch, out_ch, kh, kw, stride, pad, weights, bias } => conv2d(
                    &tensors[first],
                    shapes[first],
                    out_shape,
                    ConvParams { in_ch: *in_ch, out_ch: *out_ch, kh: *kh, kw: *kw, stride: *stride, pad: *pad },
                    weights,
                    bias,
                ),
                Op::LeakyRelu { slope } => {
                    tensors[first].iter().map(|&x| if x >= 0.0 { x } else { x * slope }).collect()
                }
                Op::Concat => node.inputs.iter().flat_map(|&i| tensors[i].iter().copied()).collect(),
                Op::Dense { in_size, out_size, weights, bias } => {
                    let x = &tensors[first];
                    let row = |o: usize| {
                        let mut acc = bias[o];
                        for (w, v) in weights[o * in_size..(o + 1) * in_size].iter().zip(x) {
                            acc += w * v;
                        }
                        acc
                    };
                    match sparse {
                        Some((head, demand)) if head == k => {
                            let mut out = vec![0.0; *out_size];
                            for &o in demand.iter().filter(|&&o| o < *out_size) {
                                out[o] = row(o);
                            }
                            out
                        }
                        _ => (0..*out_size).map(row).collect(),
                    }
                }
                Op::Reshape { .. } => tensors[first].clone(),
            };
            if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation at element {bad} of node {k} ({})",
                    node.op.name()
                )));
            }
            tensors.push(out);
        }
        Ok(tensors.pop().unwrap())
    }
}

#[derive(Clone, Copy)]
struct ConvParams {
    in_ch: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

fn conv2d(x: &[f32], xs: Shape, ys: Shape, p: ConvParams, weights: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut y = Vec::with_capacity(ys.numel());
    for oc in 0..p.out_ch {
        let wk = &weights[oc * p.in_ch * p.kh * p.kw..(oc + 1) * p.in_ch * p.kh * p.kw];
        for oy in 0..ys.h {
            for ox in 0..ys.w {
                let mut acc = bias[oc];
                for ic in 0..p.in_ch {
                    let plane = &x[ic * xs.h * xs.w..(ic + 1) * xs.h * xs.w];
                    for ky in 0..p.kh {
                        let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        let wrow = &wk[(ic * p.kh + ky) * p.kw..(ic * p.kh + ky + 1) * p.kw];
                        for (kx, w) in wrow.iter().enumerate() {
                            let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            acc += w * row[ix as usize];
                        }
                    }
                }
                y.push(acc);
            }
        }
    }
    y
}

/// Normalize, execute, and quantize/bound the top-left 2x2 of the output.
pub fn predict_cnn(graph: &NetworkGraph, ctx: &ContextPair, bit_depth: u8) -> Result<PredictionBlock> {
    if graph.bit_depth() != bit_depth {
        return Err(Error::Graph(format!(
            "graph was built for {}-bit samples, image is {bit_depth}-bit",
            graph.bit_depth()
        )));
    }
    let norm = graph.normalization();
    let top: Vec<f32> = ctx.top.iter().map(|&v| v as f32 / norm).collect();
    let left: Vec<f32> = ctx.left.iter().map(|&v| v as f32 / norm).collect();
    const BLOCK_OUTPUTS: [usize; 4] = [0, 1, OUTPUT_SIZE, OUTPUT_SIZE + 1];
    let out = graph.forward_outputs(&top, &left, &BLOCK_OUTPUTS)?;
    let max = max_sample(bit_depth) as f32;
    let mut values = [[0u16; 2]; 2];
    for (dy, row) in values.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            // f32::round is half-away-from-zero
            let x = (out[2 * dy + dx] * norm).round();
            *v = x.clamp(0.0, max) as u16;
        }
    }
    Ok(PredictionBlock { values })
}

/// Predictor backed by a shared, immutable graph.
#[derive(Debug, Clone)]
pub struct CnnPredictor {
    graph: Arc<NetworkGraph>,
}

impl CnnPredictor {
    pub fn new(graph: Arc<NetworkGraph>) -> Self {
        CnnPredictor { graph }
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }
}

impl Predictor for CnnPredictor {
    fn id(&self) -> PredictorId {
        PredictorId::cnn(self.graph.content_hash())
    }

    fn predict(&self, ctx: &ContextPair, _phase: BayerPhase, bit_depth: u8) -> Result<PredictionBlock> {
        predict_cnn(&self.graph, ctx, bit_depth)
    }
}
