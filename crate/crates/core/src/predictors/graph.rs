//! Serialized predictor network: an ordered list of tensor operations with
//! their weights, plus the reader/writer for the `MIPW` weight file.
//!
//! Tensors are `(channels, height, width)` in row-major order. Tensor 0 is
//! the top context and tensor 1 the left context, both `1x64x64`; node `k`
//! produces tensor `k + 2`. The last node's output is the `1x16x16`
//! prediction map.
//!
//! Weight file layout, all integers and floats little-endian:
//!
//! ```text
//! "MIPW" | version u16 | bit_depth u8 | node_count u32
//!        | normalization f32 | parameter_count u64
//! node*  : kind u8 | input_count u8 | input tensor ids u32*  | params
//! hash   : u64, first 8 bytes (LE) of SHA-256 over everything before it
//! ```
//!
//! | kind | op          | params                                                    |
//! |------|-------------|-----------------------------------------------------------|
//! | 0    | conv2d      | in, out, kh, kw, stride, pad (u32), weights `[out][in][kh][kw]`, bias `[out]` |
//! | 1    | leaky relu  | slope f32                                                 |
//! | 2    | concat      | none (channel axis)                                       |
//! | 3    | dense       | in, out (u32), weights `[out][in]`, bias `[out]`          |
//! | 4    | reshape     | c, h, w (u32)                                             |

use sha2::{Digest, Sha256};

use crate::context::CONTEXT_SIZE;
use crate::error::{Error, Result};
use crate::mosaic::{check_bit_depth, max_sample};

pub const MAGIC: &[u8; 4] = b"MIPW";
pub const FORMAT_VERSION: u16 = 1;

/// Side of the square network output (the 2x2 prediction plus auxiliary ring).
pub const OUTPUT_SIZE: usize = 16;

/// Parameter count reported for the reference two-branch network.
pub const REFERENCE_PARAMETER_COUNT: u64 = 1_017_988;

const INPUT_TENSORS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    LeakyRelu {
        slope: f32,
    },
    Concat,
    Dense {
        in_size: usize,
        out_size: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Reshape {
        shape: Shape,
    },
}

impl Op {
    fn kind(&self) -> u8 {
        match self {
            Op::Conv2d { .. } => 0,
            Op::LeakyRelu { .. } => 1,
            Op::Concat => 2,
            Op::Dense { .. } => 3,
            Op::Reshape { .. } => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Concat => "concat",
            Op::Dense { .. } => "dense",
            Op::Reshape { .. } => "reshape",
        }
    }

    pub fn parameter_count(&self) -> u64 {
        match self {
            Op::Conv2d { weights, bias, .. } | Op::Dense { weights, bias, .. } => (weights.len() + bias.len()) as u64,
            _ => 0,
        }
    }

    fn write_params(&self, out: &mut Vec<u8>) {
        match self {
            Op::Conv2d { in_ch, out_ch, kh, kw, stride, pad, weights, bias } => {
                for v in [in_ch, out_ch, kh, kw, stride, pad] {
                    put_u32(out, *v as u32);
                }
                put_f32s(out, weights);
                put_f32s(out, bias);
            }
            Op::LeakyRelu { slope } => out.extend_from_slice(&slope.to_le_bytes()),
            Op::Concat => {}
            Op::Dense { in_size, out_size, weights, bias } => {
                put_u32(out, *in_size as u32);
                put_u32(out, *out_size as u32);
                put_f32s(out, weights);
                put_f32s(out, bias);
            }
            Op::Reshape { shape } => {
                for v in [shape.c, shape.h, shape.w] {
                    put_u32(out, v as u32);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    /// Tensor ids consumed by this node.
    pub inputs: Vec<usize>,
}

impl Node {
    pub fn new(op: Op, inputs: &[usize]) -> Self {
        Node { op, inputs: inputs.to_vec() }
    }
}

/// A validated, immutable predictor network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    bit_depth: u8,
    normalization: f32,
    nodes: Vec<Node>,
    shapes: Vec<Shape>,
    parameter_count: u64,
    content_hash: u64,
}

impl NetworkGraph {
    /// Validate `nodes` and compute shapes, parameter count and content hash.
    pub fn new(bit_depth: u8, nodes: Vec<Node>) -> Result<Self> {
        check_bit_depth(bit_depth).map_err(|e| Error::Graph(e.to_string()))?;
        let shapes = infer_shapes(&nodes)?;
        check_shared_branches(&nodes)?;
        let parameter_count = nodes.iter().map(|n| n.op.parameter_count()).sum();
        let mut g = NetworkGraph {
            bit_depth,
            normalization: max_sample(bit_depth) as f32,
            nodes,
            shapes,
            parameter_count,
            content_hash: 0,
        };
        let bytes = g.body_bytes();
        g.content_hash = content_hash(&bytes);
        Ok(g)
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn normalization(&self) -> f32 {
        self.normalization
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Output shape of every tensor, inputs first.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn parameter_count(&self) -> u64 {
        self.parameter_count
    }

    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.parameter_count as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.bit_depth);
        put_u32(&mut out, self.nodes.len() as u32);
        out.extend_from_slice(&self.normalization.to_le_bytes());
        out.extend_from_slice(&self.parameter_count.to_le_bytes());
        for node in &self.nodes {
            out.push(node.op.kind());
            out.push(node.inputs.len() as u8);
            for &i in &node.inputs {
                put_u32(&mut out, i as u32);
            }
            node.op.write_params(&mut out);
        }
        out
    }
}

/// Serialize to the `MIPW` weight file format.
pub fn store_graph(graph: &NetworkGraph) -> Vec<u8> {
    let mut out = graph.body_bytes();
    out.extend_from_slice(&graph.content_hash.to_le_bytes());
    out
}

/// Parse and validate a `MIPW` weight file.
pub fn load_graph(bytes: &[u8]) -> Result<NetworkGraph> {
    if bytes.len() < 4 + 2 + 1 + 4 + 4 + 8 + 8 {
        return Err(Error::Format("weight file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad weight file magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let found = content_hash(body);
    if found != stored {
        return Err(Error::Format(format!(
            "weight file content hash mismatch (stored {stored:016x}, computed {found:016x})"
        )));
    }
    let bit_depth = r.u8()?;
    let node_count = r.u32()? as usize;
    let normalization = r.f32()?;
    let declared_params = r.u64()?;
    let mut nodes = Vec::with_capacity(node_count.min(1 << 16));
    for _ in 0..node_count {
        let kind = r.u8()?;
        let n_in = r.u8()? as usize;
        let inputs = (0..n_in).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let op = match kind {
            0 => {
                let [in_ch, out_ch, kh, kw, stride, pad] = r.u32s::<6>()?;
                let weights = r.f32s(in_ch.saturating_mul(out_ch).saturating_mul(kh).saturating_mul(kw))?;
                let bias = r.f32s(out_ch)?;
                Op::Conv2d { in_ch, out_ch, kh, kw, stride, pad, weights, bias }
            }
            1 => Op::LeakyRelu { slope: r.f32()? },
            2 => Op::Concat,
            3 => {
                let [in_size, out_size] = r.u32s::<2>()?;
                let weights = r.f32s(in_size.saturating_mul(out_size))?;
                let bias = r.f32s(out_size)?;
                Op::Dense { in_size, out_size, weights, bias }
            }
            4 => {
                let [c, h, w] = r.u32s::<3>()?;
                Op::Reshape { shape: Shape::new(c, h, w) }
            }
            k => return Err(Error::Format(format!("unknown node kind {k}"))),
        };
        nodes.push(Node { op, inputs });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes in weight file", body.len() - r.pos)));
    }
    let graph = NetworkGraph::new(bit_depth, nodes).map_err(|e| Error::Format(e.to_string()))?;
    if graph.normalization.to_bits() != normalization.to_bits() {
        return Err(Error::Format(format!("normalization {normalization} does not match bit depth {bit_depth}")));
    }
    if graph.parameter_count != declared_params {
        return Err(Error::Format(format!(
            "declared parameter count {declared_params} != actual {}",
            graph.parameter_count
        )));
    }
    debug_assert_eq!(graph.content_hash, stored);
    Ok(graph)
}

pub fn content_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("weight file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s<const N: usize>(&mut self) -> Result<[usize; N]> {
        let mut out = [0usize; N];
        for v in &mut out {
            *v = self.u32()? as usize;
        }
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

fn graph_err(k: usize, msg: impl std::fmt::Display) -> Error {
    Error::Graph(format!("node {k}: {msg}"))
}

fn infer_shapes(nodes: &[Node]) -> Result<Vec<Shape>> {
    if nodes.is_empty() {
        return Err(Error::Graph("graph has no nodes".into()));
    }
    let input = Shape::new(1, CONTEXT_SIZE, CONTEXT_SIZE);
    let mut shapes = vec![input; INPUT_TENSORS];
    for (k, node) in nodes.iter().enumerate() {
        let own = k + INPUT_TENSORS;
        if let Some(&bad) = node.inputs.iter().find(|&&i| i >= own) {
            return Err(graph_err(k, format!("input tensor {bad} is not produced earlier")));
        }
        let single = || -> Result<Shape> {
            match node.inputs.as_slice() {
                [i] => Ok(shapes[*i]),
                _ => Err(graph_err(k, format!("{} takes exactly one input", node.op.name()))),
            }
        };
        let out = match &node.op {
            Op::Conv2d { in_ch, out_ch, kh, kw, stride, pad, weights, bias } => {
                let s = single()?;
                if s.c != *in_ch {
                    return Err(graph_err(k, format!("conv expects {in_ch} channels, input has {}", s.c)));
                }
                if *stride == 0 || *kh == 0 || *kw == 0 || *out_ch == 0 {
                    return Err(graph_err(k, "conv with zero stride, kernel or width"));
                }
                if s.h + 2 * pad < *kh || s.w + 2 * pad < *kw {
                    return Err(graph_err(k, "conv kernel larger than padded input"));
                }
                if weights.len() != out_ch * in_ch * kh * kw || bias.len() != *out_ch {
                    return Err(graph_err(k, "conv weight/bias length mismatch"));
                }
                check_finite(k, weights.iter().chain(bias))?;
                Shape::new(*out_ch, (s.h + 2 * pad - kh) / stride + 1, (s.w + 2 * pad - kw) / stride + 1)
            }
            Op::LeakyRelu { slope } => {
                check_finite(k, [*slope].iter())?;
                single()?
            }
            Op::Concat => {
                if node.inputs.len() < 2 {
                    return Err(graph_err(k, "concat needs at least two inputs"));
                }
                let first = shapes[node.inputs[0]];
                let mut c = 0;
                for &i in &node.inputs {
                    let s = shapes[i];
                    if (s.h, s.w) != (first.h, first.w) {
                        return Err(graph_err(k, "concat inputs differ in spatial size"));
                    }
                    c += s.c;
                }
                Shape::new(c, first.h, first.w)
            }
            Op::Dense { in_size, out_size, weights, bias } => {
                let s = single()?;
                if s.numel() != *in_size {
                    return Err(graph_err(k, format!("dense expects {in_size} inputs, got {}", s.numel())));
                }
                if *out_size == 0 || weights.len() != in_size * out_size || bias.len() != *out_size {
                    return Err(graph_err(k, "dense weight/bias length mismatch"));
                }
                check_finite(k, weights.iter().chain(bias))?;
                Shape::new(*out_size, 1, 1)
            }
            Op::Reshape { shape } => {
                let s = single()?;
                if s.numel() != shape.numel() {
                    return Err(graph_err(k, format!("cannot reshape {} elements to {shape:?}", s.numel())));
                }
                *shape
            }
        };
        shapes.push(out);
    }
    let last = *shapes.last().unwrap();
    if last != Shape::new(1, OUTPUT_SIZE, OUTPUT_SIZE) {
        return Err(Error::Graph(format!("graph output is {last:?}, expected 1x16x16")));
    }
    Ok(shapes)
}

fn check_finite<'a>(k: usize, vals: impl Iterator<Item = &'a f32>) -> Result<()> {
    for v in vals {
        if !v.is_finite() {
            return Err(graph_err(k, "non-finite parameter"));
        }
    }
    Ok(())
}

/// Nodes that depend on only the top input form one branch, nodes that
/// depend on only the left input the other. The branches must be mirror
/// images with byte-identical parameters.
fn check_shared_branches(nodes: &[Node]) -> Result<()> {
    const TOP: u8 = 1;
    const LEFT: u8 = 2;
    let mut deps = vec![TOP, LEFT];
    for node in nodes {
        deps.push(node.inputs.iter().fold(0, |acc, &i| acc | deps[i]));
    }
    let branch = |mask: u8| -> Vec<usize> { (0..nodes.len()).filter(|&k| deps[k + INPUT_TENSORS] == mask).collect() };
    let (a, b) = (branch(TOP), branch(LEFT));
    if a.len() != b.len() {
        return Err(Error::Graph(format!("context branches differ in length ({} vs {})", a.len(), b.len())));
    }
    // tensor id in branch A -> mirrored id in branch B
    let mut mirror = std::collections::HashMap::from([(0usize, 1usize)]);
    for (&ka, &kb) in a.iter().zip(&b) {
        let (na, nb) = (&nodes[ka], &nodes[kb]);
        let mapped: Option<Vec<usize>> = na.inputs.iter().map(|i| mirror.get(i).copied()).collect();
        if mapped.as_deref() != Some(nb.inputs.as_slice()) {
            return Err(Error::Graph(format!("branch nodes {ka} and {kb} are wired differently")));
        }
        if op_hash(&na.op) != op_hash(&nb.op) {
            return Err(Error::Graph(format!("branch nodes {ka} and {kb} do not share weights")));
        }
        mirror.insert(ka + INPUT_TENSORS, kb + INPUT_TENSORS);
    }
    Ok(())
}

fn op_hash(op: &Op) -> u64 {
    let mut bytes = vec![op.kind()];
    op.write_params(&mut bytes);
    content_hash(&bytes)
}

/// SplitMix64 stream for reproducible weight initialisation.
struct SplitMix(u64);

impl SplitMix {
    fn next_f32(&mut self) -> f32 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        // uniform in [-1, 1)
        ((z >> 40) as f32 / (1u64 << 23) as f32) - 1.0
    }

    fn fill(&mut self, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| self.next_f32() * scale).collect()
    }
}

/// Builder that emits mirrored conv layers for the two context branches.
struct GraphBuilder {
    nodes: Vec<Node>,
    rng: SplitMix,
    slope: f32,
}

impl GraphBuilder {
    fn new(seed: u64) -> Self {
        GraphBuilder { nodes: Vec::new(), rng: SplitMix(seed), slope: 0.01 }
    }

    fn push(&mut self, op: Op, inputs: &[usize]) -> usize {
        self.nodes.push(Node::new(op, inputs));
        self.nodes.len() - 1 + INPUT_TENSORS
    }

    fn conv_op(&mut self, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Op {
        let fan_in = (in_ch * k * k) as f32;
        let scale = (6.0 / fan_in).sqrt();
        Op::Conv2d {
            in_ch,
            out_ch,
            kh: k,
            kw: k,
            stride,
            pad: k / 2,
            weights: self.rng.fill(out_ch * in_ch * k * k, scale),
            bias: vec![0.0; out_ch],
        }
    }

    fn conv_act(&mut self, x: usize, op: Op) -> usize {
        let y = self.push(op, &[x]);
        self.push(Op::LeakyRelu { slope: self.slope }, &[y])
    }

    /// Same layer applied to both branches (weights stored twice, identical).
    fn shared_conv(
        &mut self,
        xs: (usize, usize),
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    ) -> (usize, usize) {
        let op = self.conv_op(in_ch, out_ch, k, stride);
        let a = self.conv_act(xs.0, op.clone());
        let b = self.conv_act(xs.1, op);
        (a, b)
    }
}

impl NetworkGraph {
    /// The reference two-branch architecture with reproducible random weights:
    ///
    /// per branch (shared): conv 5x5 1->32, conv 5x5 32->64 /2, conv 3x3 64->64 /2;
    /// concat (128x16x16); conv 3x3 128->128, conv 3x3 128->128 /2;
    /// conv 1x1 128->32; dense 2048->256; reshape 1x16x16.
    /// Leaky ReLU (slope 0.01) follows every conv.
    pub fn reference_architecture(bit_depth: u8, seed: u64) -> Result<Self> {
        let mut b = GraphBuilder::new(seed);
        let x = b.shared_conv((0, 1), 1, 32, 5, 1);
        let x = b.shared_conv(x, 32, 64, 5, 2);
        let (t, l) = b.shared_conv(x, 64, 64, 3, 2);
        let mut y = b.push(Op::Concat, &[t, l]);
        let op = b.conv_op(128, 128, 3, 1);
        y = b.conv_act(y, op);
        let op = b.conv_op(128, 128, 3, 2);
        y = b.conv_act(y, op);
        let op = b.conv_op(128, 32, 1, 1);
        y = b.conv_act(y, op);
        let scale = (6.0f32 / 2048.0).sqrt();
        let weights = b.rng.fill(2048 * 256, scale);
        y = b.push(Op::Dense { in_size: 2048, out_size: 256, weights, bias: vec![0.0; 256] }, &[y]);
        b.push(Op::Reshape { shape: Shape::new(1, OUTPUT_SIZE, OUTPUT_SIZE) }, &[y]);
        NetworkGraph::new(bit_depth, b.nodes)
    }

    /// A small hand-set network used as a test fixture and demo model.
    ///
    /// Each branch averages its context over 8x8 cells; the dense head
    /// predicts the 2x2 block as the mean of the two cells touching it
    /// (bottom-right cell of each context) and every auxiliary output as the
    /// mean of all cells.
    pub fn tiny_fixture(bit_depth: u8) -> Result<Self> {
        let mut b = GraphBuilder::new(0);
        let pool = Op::Conv2d {
            in_ch: 1,
            out_ch: 1,
            kh: 8,
            kw: 8,
            stride: 8,
            pad: 0,
            weights: vec![1.0 / 64.0; 64],
            bias: vec![0.0],
        };
        let t = b.conv_act(0, pool.clone());
        let l = b.conv_act(1, pool);
        let y = b.push(Op::Concat, &[t, l]);
        let (n_in, n_out) = (128, OUTPUT_SIZE * OUTPUT_SIZE);
        let mut weights = vec![1.0 / n_in as f32; n_in * n_out];
        for o in [0, 1, OUTPUT_SIZE, OUTPUT_SIZE + 1] {
            let row = &mut weights[o * n_in..(o + 1) * n_in];
            row.fill(0.0);
            row[63] = 0.5;
            row[127] = 0.5;
        }
        let y = b.push(Op::Dense { in_size: n_in, out_size: n_out, weights, bias: vec![0.0; n_out] }, &[y]);
        b.push(Op::Reshape { shape: Shape::new(1, OUTPUT_SIZE, OUTPUT_SIZE) }, &[y]);
        NetworkGraph::new(bit_depth, b.nodes)
    }
}
