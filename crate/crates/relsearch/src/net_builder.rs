//! Turn an [`ArchitectureSpec`] into an executable 3D network.
//!
//! The built graph is stem + reachable blocks + head.  The stem halves
//! the input with a strided 3x3x3 convolution and feeds level 2; each
//! block consumes its two predecessors through per-edge adapters
//! (resampling to the consumer's level where levels differ, then a
//! 1x1x1 channel projection), fuses them by element-wise sum, and runs
//! its op at the level's width.  The head projects the final block to
//! class channels, resizes back to the input size, and applies a
//! channel softmax.
//!
//! Channel width at level l is `c1 * 2^(l-1)`; spatial size is the
//! input divided by `2^(l-1)`.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{self, BoundParams, Conv3d, InstanceNorm, ParamId, ParamSet};
use crate::search_space::{reachable_blocks, ArchitectureSpec, OpKind, PRED_SENTINEL};
use crate::tape::{NodeId, Tape};

/// The stem output feeds the pyramid at this level.
pub const STEM_LEVEL: i64 = 2;

/// Channel width of the feature pyramid at a level.
pub fn level_width(c1: usize, level: i64) -> usize {
    c1 << (level - 1) as usize
}

/// Spatial reduction factor at a level.
pub fn level_divisor(level: i64) -> usize {
    1usize << (level - 1) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3D {
    pub channels: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Shape3D {
    pub fn new(channels: usize, x: usize, y: usize, z: usize) -> Self {
        Shape3D { channels, x, y, z }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.x, self.y, self.z]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BuildOptions {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Base width; level l runs at `c1 * 2^(l-1)` channels.
    pub c1: usize,
    /// Capacity of each attention pass's learned positional bias table;
    /// attended axes must not exceed it at forward time.
    pub max_attn_len: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            in_channels: 1,
            num_classes: 2,
            c1: 16,
            max_attn_len: 32,
        }
    }
}

/// Where an incoming edge originates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeSource {
    Stem,
    Block(usize),
}

/// Adapter on one incoming edge: optional resampling to the consumer's
/// level, then a 1x1x1 projection to the consumer's width.
#[derive(Debug, Clone)]
struct Edge {
    source: EdgeSource,
    source_level: i64,
    /// One stride-2 k=2 conv per level step down; empty unless the
    /// consumer sits deeper than the source.
    down: Vec<Conv3d>,
    proj: Conv3d,
}

impl Edge {
    fn resample_label(&self, consumer_level: i64) -> String {
        if !self.down.is_empty() {
            format!("down x{}", 1 << self.down.len())
        } else if self.source_level > consumer_level {
            format!("up x{}", 1 << (self.source_level - consumer_level) as usize)
        } else {
            "none".to_string()
        }
    }
}

/// Learned tensors of one single-axis attention pass.
#[derive(Debug, Clone, Copy)]
pub struct AttnPass {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Additive per-key-position bias along the attended axis.
    pub pos: ParamId,
}

#[derive(Debug, Clone)]
enum Body {
    Residual {
        conv1: Conv3d,
        norm1: InstanceNorm,
        conv2: Conv3d,
        norm2: InstanceNorm,
    },
    Bottleneck {
        reduce: Conv3d,
        norm1: InstanceNorm,
        mid: Conv3d,
        norm2: InstanceNorm,
        expand: Conv3d,
        norm3: InstanceNorm,
    },
    Axial {
        /// Spatial axes (0=X, 1=Y, 2=Z) in attention order.
        axes: [usize; 3],
        passes: [AttnPass; 3],
    },
}

#[derive(Debug, Clone)]
struct GraphNode {
    block_id: usize,
    op: OpKind,
    level: i64,
    edges: Vec<Edge>,
    body: Body,
}

/// Executable network: parameters plus the wiring to run them.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    arch: ArchitectureSpec,
    opts: BuildOptions,
    pub params: ParamSet,
    stem: Conv3d,
    nodes: Vec<GraphNode>,
    head: Conv3d,
    final_level: i64,
}

/// A recorded forward pass, open for further tape operations (losses).
pub struct ForwardPass {
    pub tape: Tape,
    pub bound: BoundParams,
    /// Class-probability output node, shape (num_classes, x, y, z).
    pub output: NodeId,
}

/// Attention axis order for the two axial op kinds.
pub fn attn_axes(op: OpKind) -> Option<[usize; 3]> {
    match op {
        OpKind::AxialAttnXYZ => Some([0, 1, 2]),
        OpKind::AxialAttnYXZ => Some([1, 0, 2]),
        _ => None,
    }
}

/// Register the three passes of an axial attention block.
pub fn register_axial_passes<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    width: usize,
    max_attn_len: usize,
) -> [AttnPass; 3] {
    let mut passes = Vec::with_capacity(3);
    for i in 0..3 {
        passes.push(AttnPass {
            wq: ps.register(
                format!("{name}.attn{i}.wq"),
                nn::fan_in_uniform(rng, &[width, width], width),
            ),
            wk: ps.register(
                format!("{name}.attn{i}.wk"),
                nn::fan_in_uniform(rng, &[width, width], width),
            ),
            wv: ps.register(
                format!("{name}.attn{i}.wv"),
                nn::fan_in_uniform(rng, &[width, width], width),
            ),
            pos: ps.register(format!("{name}.attn{i}.pos"), nn::zeros(&[max_attn_len])),
        });
    }
    passes.try_into().unwrap()
}

/// Build the executable graph for a valid architecture.  Dangling blocks
/// (unreachable from the final block) are pruned and contribute no
/// parameters.
pub fn build_network<R: Rng>(
    arch: &ArchitectureSpec,
    opts: &BuildOptions,
    rng: &mut R,
) -> Result<NetworkGraph> {
    assert!(opts.c1 >= 1);
    assert!(opts.num_classes >= 2);
    let reachable = reachable_blocks(arch)?;
    let mut params = ParamSet::new();
    let stem = Conv3d::register(
        &mut params,
        rng,
        "stem",
        opts.in_channels,
        level_width(opts.c1, STEM_LEVEL),
        3,
    );
    let mut nodes = Vec::with_capacity(reachable.len());
    for &id in &reachable {
        let spec = &arch.blocks[id];
        let width = level_width(opts.c1, spec.level);
        let mut edges = Vec::with_capacity(2);
        for (slot, pred) in [spec.pred1, spec.pred2].into_iter().enumerate() {
            let (source, source_level) = if pred == PRED_SENTINEL {
                (EdgeSource::Stem, STEM_LEVEL)
            } else {
                (EdgeSource::Block(pred as usize), arch.blocks[pred as usize].level)
            };
            let src_width = level_width(opts.c1, source_level);
            let mut down = Vec::new();
            for step in 0..(spec.level - source_level).max(0) {
                down.push(Conv3d::register(
                    &mut params,
                    rng,
                    &format!("b{id}.e{slot}.down{step}"),
                    src_width,
                    src_width,
                    2,
                ));
            }
            let proj = Conv3d::register(
                &mut params,
                rng,
                &format!("b{id}.e{slot}.proj"),
                src_width,
                width,
                1,
            );
            edges.push(Edge {
                source,
                source_level,
                down,
                proj,
            });
        }
        let body = match spec.op {
            OpKind::Residual3D => Body::Residual {
                conv1: Conv3d::register(&mut params, rng, &format!("b{id}.conv1"), width, width, 3),
                norm1: InstanceNorm::register(&mut params, &format!("b{id}.norm1"), width),
                conv2: Conv3d::register(&mut params, rng, &format!("b{id}.conv2"), width, width, 3),
                norm2: InstanceNorm::register(&mut params, &format!("b{id}.norm2"), width),
            },
            OpKind::Bottleneck3D => {
                let mid_width = (width / 4).max(1);
                Body::Bottleneck {
                    reduce: Conv3d::register(
                        &mut params,
                        rng,
                        &format!("b{id}.reduce"),
                        width,
                        mid_width,
                        1,
                    ),
                    norm1: InstanceNorm::register(&mut params, &format!("b{id}.norm1"), mid_width),
                    mid: Conv3d::register(
                        &mut params,
                        rng,
                        &format!("b{id}.mid"),
                        mid_width,
                        mid_width,
                        3,
                    ),
                    norm2: InstanceNorm::register(&mut params, &format!("b{id}.norm2"), mid_width),
                    expand: Conv3d::register(
                        &mut params,
                        rng,
                        &format!("b{id}.expand"),
                        mid_width,
                        width,
                        1,
                    ),
                    norm3: InstanceNorm::register(&mut params, &format!("b{id}.norm3"), width),
                }
            }
            op => Body::Axial {
                axes: attn_axes(op).unwrap(),
                passes: register_axial_passes(
                    &mut params,
                    rng,
                    &format!("b{id}"),
                    width,
                    opts.max_attn_len,
                ),
            },
        };
        nodes.push(GraphNode {
            block_id: id,
            op: spec.op,
            level: spec.level,
            edges,
            body,
        });
    }
    let final_level = arch.blocks[arch.final_block()].level;
    let head = Conv3d::register(
        &mut params,
        rng,
        "head",
        level_width(opts.c1, final_level),
        opts.num_classes,
        1,
    );
    Ok(NetworkGraph {
        arch: arch.clone(),
        opts: *opts,
        params,
        stem,
        nodes,
        head,
        final_level,
    })
}

impl NetworkGraph {
    pub fn options(&self) -> &BuildOptions {
        &self.opts
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Exact count of learnable scalars in stem, reachable blocks,
    /// adapters, and head.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_divisible(&self, input: Shape3D) -> Result<()> {
        let mut levels: Vec<i64> = vec![STEM_LEVEL];
        levels.extend(self.nodes.iter().map(|n| n.level));
        for level in levels {
            let divisor = level_divisor(level);
            for dim in input.spatial() {
                if dim % divisor != 0 {
                    return Err(Error::IndivisibleInput { level, divisor, dim });
                }
            }
        }
        Ok(())
    }

    /// Output shape of every reachable block for a given input shape.
    pub fn infer_shapes(&self, input: Shape3D) -> Result<BTreeMap<usize, Shape3D>> {
        if input.channels != self.opts.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.opts.in_channels),
                actual: format!("{}", input.channels),
            });
        }
        self.check_divisible(input)?;
        let mut shapes = BTreeMap::new();
        for node in &self.nodes {
            let d = level_divisor(node.level);
            shapes.insert(
                node.block_id,
                Shape3D::new(
                    level_width(self.opts.c1, node.level),
                    input.x / d,
                    input.y / d,
                    input.z / d,
                ),
            );
        }
        Ok(shapes)
    }

    /// Record the full forward computation on a fresh tape.
    pub fn forward_tape(&self, volume: &ArrayD<f64>) -> Result<ForwardPass> {
        let dims = volume.shape();
        if dims.len() != 4 || dims[0] != self.opts.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, x, y, z)", self.opts.in_channels),
                actual: format!("{dims:?}"),
            });
        }
        if !volume.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite values in input volume".into()));
        }
        let input = Shape3D::new(dims[0], dims[1], dims[2], dims[3]);
        self.check_divisible(input)?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(volume.clone());
        let stem_out = self.stem.apply(&mut tape, &bound, x, 2, 1);

        let mut feats: BTreeMap<usize, NodeId> = BTreeMap::new();
        for node in &self.nodes {
            let d = level_divisor(node.level);
            let target_spatial = [input.x / d, input.y / d, input.z / d];
            let mut fused: Option<NodeId> = None;
            for edge in &node.edges {
                let mut h = match edge.source {
                    EdgeSource::Stem => stem_out,
                    EdgeSource::Block(p) => feats[&p],
                };
                for conv in &edge.down {
                    h = conv.apply(&mut tape, &bound, h, 2, 0);
                }
                if edge.source_level > node.level {
                    h = tape.trilinear_resize(h, target_spatial);
                }
                h = edge.proj.apply(&mut tape, &bound, h, 1, 0);
                fused = Some(match fused {
                    Some(acc) => tape.add(acc, h),
                    None => h,
                });
            }
            let fused = fused.expect("every block has two predecessors");
            let out = self.run_body(&mut tape, &bound, node, fused)?;
            feats.insert(node.block_id, out);
        }

        let last = feats[&self.arch.final_block()];
        let logits = self.head.apply(&mut tape, &bound, last, 1, 0);
        let resized = tape.trilinear_resize(logits, input.spatial());
        let output = tape.softmax(resized, 0);
        Ok(ForwardPass { tape, bound, output })
    }

    fn run_body(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        node: &GraphNode,
        fused: NodeId,
    ) -> Result<NodeId> {
        match &node.body {
            Body::Residual { conv1, norm1, conv2, norm2 } => {
                let mut h = conv1.apply(tape, bound, fused, 1, 1);
                h = norm1.apply(tape, bound, h);
                h = tape.relu(h);
                h = conv2.apply(tape, bound, h, 1, 1);
                h = norm2.apply(tape, bound, h);
                h = tape.add(h, fused);
                Ok(tape.relu(h))
            }
            Body::Bottleneck { reduce, norm1, mid, norm2, expand, norm3 } => {
                let mut h = reduce.apply(tape, bound, fused, 1, 0);
                h = norm1.apply(tape, bound, h);
                h = tape.relu(h);
                h = mid.apply(tape, bound, h, 1, 1);
                h = norm2.apply(tape, bound, h);
                h = tape.relu(h);
                h = expand.apply(tape, bound, h, 1, 0);
                h = norm3.apply(tape, bound, h);
                h = tape.add(h, fused);
                Ok(tape.relu(h))
            }
            Body::Axial { axes, passes } => {
                let mut h = fused;
                for (axis, pass) in axes.iter().zip(passes.iter()) {
                    h = attn_pass_on_tape(tape, bound, &self.params, h, *axis, pass)?;
                }
                Ok(h)
            }
        }
    }

    /// Class-probability maps for a volume: (num_classes, x, y, z),
    /// summing to 1 over the class axis at every voxel.
    pub fn forward(&self, volume: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let fp = self.forward_tape(volume)?;
        Ok(fp.tape.value(fp.output).clone())
    }

    /// Parameter gradients (registration order) for an upstream gradient
    /// on the class-probability output.
    pub fn backward(&self, volume: &ArrayD<f64>, upstream: &ArrayD<f64>) -> Result<Vec<ArrayD<f64>>> {
        let fp = self.forward_tape(volume)?;
        let out_shape = fp.tape.value(fp.output).shape();
        if upstream.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{out_shape:?}"),
                actual: format!("{:?}", upstream.shape()),
            });
        }
        let grads = fp.tape.backward_from(fp.output, upstream.clone());
        self.params.collect_grads(&fp.bound, &grads)
    }

    fn component_params(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Graph description: nodes, edges, adapters, shapes, parameter counts.
    pub fn export_json(&self, input: Option<Shape3D>) -> Result<serde_json::Value> {
        let shapes = match input {
            Some(shape) => Some(self.infer_shapes(shape)?),
            None => None,
        };
        let nodes: Vec<serde_json::Value> = self
            .nodes
            .iter()
            .map(|n| {
                let spec = &self.arch.blocks[n.block_id];
                json!({
                    "block_id": n.block_id,
                    "op": n.op.name(),
                    "level": n.level,
                    "width": level_width(self.opts.c1, n.level),
                    "preds": [spec.pred1, spec.pred2],
                    "parameters": self.component_params(&format!("b{}.", n.block_id)),
                    "output_shape": shapes.as_ref().map(|s| s[&n.block_id]),
                })
            })
            .collect();
        let mut edges = Vec::new();
        for n in &self.nodes {
            for (slot, e) in n.edges.iter().enumerate() {
                let from = match e.source {
                    EdgeSource::Stem => "stem".to_string(),
                    EdgeSource::Block(p) => format!("b{p}"),
                };
                edges.push(json!({
                    "from": from,
                    "to": format!("b{}", n.block_id),
                    "slot": slot,
                    "resample": e.resample_label(n.level),
                    "projection": [
                        level_width(self.opts.c1, e.source_level),
                        level_width(self.opts.c1, n.level),
                    ],
                }));
            }
        }
        Ok(json!({
            "schema_version": crate::SCHEMA_VERSION,
            "in_channels": self.opts.in_channels,
            "num_classes": self.opts.num_classes,
            "c1": self.opts.c1,
            "stem": {
                "kernel": 3,
                "stride": 2,
                "out_width": level_width(self.opts.c1, STEM_LEVEL),
                "parameters": self.component_params("stem."),
            },
            "nodes": nodes,
            "edges": edges,
            "head": {
                "from": format!("b{}", self.arch.final_block()),
                "level": self.final_level,
                "num_classes": self.opts.num_classes,
                "parameters": self.component_params("head."),
            },
            "total_parameters": self.count_parameters(),
        }))
    }

    /// DOT text for graph visualization.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph network {\n  rankdir=TB;\n  node [shape=box];\n");
        out.push_str(&format!(
            "  stem [label=\"stem\\nconv3 s2, w{} L{}\"];\n",
            level_width(self.opts.c1, STEM_LEVEL),
            STEM_LEVEL
        ));
        for n in &self.nodes {
            out.push_str(&format!(
                "  b{} [label=\"b{}\\n{} L{} w{}\"];\n",
                n.block_id,
                n.block_id,
                n.op.name(),
                n.level,
                level_width(self.opts.c1, n.level)
            ));
        }
        // Pruned blocks appear dashed so the sampled topology stays
        // visible; solid nodes are exactly reachable + stem + head.
        let kept: std::collections::BTreeSet<usize> =
            self.nodes.iter().map(|n| n.block_id).collect();
        for spec in &self.arch.blocks {
            if !kept.contains(&spec.block_id) {
                out.push_str(&format!(
                    "  b{} [label=\"b{}\\n{} L{} (dangling)\", style=dashed];\n",
                    spec.block_id,
                    spec.block_id,
                    spec.op.name(),
                    spec.level
                ));
            }
        }
        out.push_str(&format!(
            "  head [label=\"head\\n1x1x1 to {} classes, resize, softmax\"];\n",
            self.opts.num_classes
        ));
        for n in &self.nodes {
            for e in &n.edges {
                let from = match e.source {
                    EdgeSource::Stem => "stem".to_string(),
                    EdgeSource::Block(p) => format!("b{p}"),
                };
                out.push_str(&format!(
                    "  {} -> b{} [label=\"{}, proj\"];\n",
                    from,
                    n.block_id,
                    e.resample_label(n.level)
                ));
            }
        }
        for spec in &self.arch.blocks {
            if !kept.contains(&spec.block_id) {
                let mut sources: Vec<String> = spec.preds().map(|p| format!("b{p}")).collect();
                if sources.is_empty() {
                    sources.push("stem".to_string());
                }
                for from in sources {
                    out.push_str(&format!("  {} -> b{} [style=dashed];\n", from, spec.block_id));
                }
            }
        }
        out.push_str(&format!("  b{} -> head;\n}}\n", self.arch.final_block()));
        out
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// One single-axis self-attention pass with residual connection, recorded
/// on an existing tape.  `axis` is the spatial axis (0=X, 1=Y, 2=Z) of a
/// (C, X, Y, Z) feature map.
fn attn_pass_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParamSet,
    x: NodeId,
    axis: usize,
    pass: &AttnPass,
) -> Result<NodeId> {
    let dims = tape.value(x).shape().to_vec();
    assert_eq!(dims.len(), 4, "attention input must be (C, X, Y, Z)");
    let c = dims[0];
    let len = dims[1 + axis];
    let table = params.value(pass.pos).len();
    if len > table {
        return Err(Error::Config(format!(
            "attention axis length {len} exceeds positional bias table {table}"
        )));
    }
    // Move the attended axis next-to-last and channels last:
    // (batch0, batch1, L, C).
    let perm: [usize; 4] = match axis {
        0 => [2, 3, 1, 0],
        1 => [1, 3, 2, 0],
        2 => [1, 2, 3, 0],
        _ => panic!("spatial axis out of range: {axis}"),
    };
    let p = tape.permute(x, &perm);
    let pdims = tape.value(p).shape().to_vec();
    let batch = pdims[0] * pdims[1];
    let flat = tape.reshape(p, &[batch * len, c]);
    let q = tape.matmul(flat, bound.node(pass.wq));
    let k = tape.matmul(flat, bound.node(pass.wk));
    let v = tape.matmul(flat, bound.node(pass.wv));
    let q3 = tape.reshape(q, &[batch, len, c]);
    let k3 = tape.reshape(k, &[batch, len, c]);
    let v3 = tape.reshape(v, &[batch, len, c]);
    let kt = tape.permute(k3, &[0, 2, 1]);
    let scores = tape.batch_matmul(q3, kt);
    let scaled = tape.affine(scores, 1.0 / (c as f64).sqrt(), 0.0);
    let bias = tape.slice1d(bound.node(pass.pos), 0, len);
    let biased = tape.add_bias_last(scaled, bias);
    let attn = tape.softmax(biased, 2);
    let ctx = tape.batch_matmul(attn, v3);
    let back = tape.reshape(ctx, &[pdims[0], pdims[1], len, c]);
    let unperm = tape.permute(back, &inverse_perm(&perm));
    Ok(tape.add(x, unperm))
}

/// Standalone single-axis attention pass on raw features.
pub fn axial_attention_pass(
    features: &ArrayD<f64>,
    axis: usize,
    pass: &AttnPass,
    params: &ParamSet,
) -> Result<ArrayD<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(features.clone());
    let out = attn_pass_on_tape(&mut tape, &bound, params, x, axis, pass)?;
    Ok(tape.value(out).clone())
}

/// Three sequential single-axis attention passes in the given axis order;
/// shape preserved.
pub fn axial_attention(
    features: &ArrayD<f64>,
    axes: [usize; 3],
    passes: &[AttnPass; 3],
    params: &ParamSet,
) -> Result<ArrayD<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut h = tape.leaf(features.clone());
    for (axis, pass) in axes.iter().zip(passes.iter()) {
        h = attn_pass_on_tape(&mut tape, &bound, params, h, *axis, pass)?;
    }
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{sample_architecture, BlockSpec};
    use crate::tape::max_rel_err_fd;
    use ndarray::IxDyn;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn chain_arch(levels: &[i64], ops: &[OpKind]) -> ArchitectureSpec {
        assert_eq!(levels.len(), ops.len());
        let blocks = levels
            .iter()
            .zip(ops)
            .enumerate()
            .map(|(i, (&level, &op))| BlockSpec {
                block_id: i,
                op,
                level,
                pred1: if i == 0 { PRED_SENTINEL } else { i as i64 - 1 },
                pred2: if i < 2 { PRED_SENTINEL } else { i as i64 - 2 },
            })
            .collect();
        ArchitectureSpec { blocks }
    }

    fn residual_chain(levels: &[i64]) -> ArchitectureSpec {
        chain_arch(levels, &vec![OpKind::Residual3D; levels.len()])
    }

    fn rand_volume(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn five_block_chain_has_five_nodes() {
        let arch = residual_chain(&[2, 2, 2, 2, 2]);
        let mut rng = StdRng::seed_from_u64(0);
        let graph = build_network(&arch, &BuildOptions::default(), &mut rng).unwrap();
        assert_eq!(graph.num_nodes(), 5);
    }

    #[test]
    fn level_shapes_match_pyramid_rule() {
        let arch = residual_chain(&[2, 3, 4, 5, 5]);
        let mut rng = StdRng::seed_from_u64(1);
        let graph = build_network(&arch, &BuildOptions::default(), &mut rng).unwrap();
        let shapes = graph
            .infer_shapes(Shape3D::new(1, 16, 16, 16))
            .unwrap();
        assert_eq!(shapes[&0], Shape3D::new(32, 8, 8, 8));
        assert_eq!(shapes[&1], Shape3D::new(64, 4, 4, 4));
        assert_eq!(shapes[&2], Shape3D::new(128, 2, 2, 2));
        assert_eq!(shapes[&3], Shape3D::new(256, 1, 1, 1));
    }

    #[test]
    fn indivisible_input_names_the_level() {
        let arch = residual_chain(&[2, 2, 4, 2, 2]);
        let mut rng = StdRng::seed_from_u64(2);
        let graph = build_network(&arch, &BuildOptions::default(), &mut rng).unwrap();
        let err = graph.infer_shapes(Shape3D::new(1, 10, 10, 10)).unwrap_err();
        match err {
            Error::IndivisibleInput { level, divisor, dim } => {
                assert_eq!(level, 4);
                assert_eq!(divisor, 8);
                assert_eq!(dim, 10);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn forward_shape_and_softmax_normalization() {
        let arch = residual_chain(&[2, 2, 3, 2, 2]);
        let mut rng = StdRng::seed_from_u64(3);
        let opts = BuildOptions {
            num_classes: 3,
            c1: 2,
            ..BuildOptions::default()
        };
        let graph = build_network(&arch, &opts, &mut rng).unwrap();
        let vol = rand_volume(&[1, 8, 8, 8], 30);
        let out = graph.forward(&vol).unwrap();
        assert_eq!(out.shape(), &[3, 8, 8, 8]);
        for xi in 0..8 {
            for yi in 0..8 {
                for zi in 0..8 {
                    let s: f64 = (0..3).map(|c| out[[c, xi, yi, zi]]).sum();
                    assert!((s - 1.0).abs() < 1e-5, "voxel sum {s}");
                }
            }
        }
    }

    #[test]
    fn zeroed_head_gives_uniform_probabilities() {
        let arch = residual_chain(&[2, 2, 2, 2, 2]);
        let mut rng = StdRng::seed_from_u64(4);
        let opts = BuildOptions {
            num_classes: 4,
            c1: 2,
            ..BuildOptions::default()
        };
        let mut graph = build_network(&arch, &opts, &mut rng).unwrap();
        let w = graph.params.find("head.w").unwrap();
        graph.params.value_mut(w).fill(0.0);
        let out = graph.forward(&rand_volume(&[1, 8, 8, 8], 40)).unwrap();
        assert!(out.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = residual_chain(&[2, 3, 2, 3, 2]);
        let mut rng = StdRng::seed_from_u64(5);
        let opts = BuildOptions {
            c1: 2,
            ..BuildOptions::default()
        };
        let graph = build_network(&arch, &opts, &mut rng).unwrap();
        let vol = rand_volume(&[1, 8, 8, 8], 50);
        let a = graph.forward(&vol).unwrap();
        let b = graph.forward(&vol).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dangling_block_is_pruned_and_inert() {
        // Block 2 is dangling: nothing downstream consumes it.
        let mut blocks = vec![
            BlockSpec { block_id: 0, op: OpKind::Residual3D, level: 2, pred1: PRED_SENTINEL, pred2: PRED_SENTINEL },
            BlockSpec { block_id: 1, op: OpKind::Residual3D, level: 2, pred1: 0, pred2: PRED_SENTINEL },
            BlockSpec { block_id: 2, op: OpKind::Bottleneck3D, level: 3, pred1: 0, pred2: 1 },
            BlockSpec { block_id: 3, op: OpKind::Residual3D, level: 2, pred1: 1, pred2: 0 },
            BlockSpec { block_id: 4, op: OpKind::Residual3D, level: 2, pred1: 3, pred2: 1 },
        ];
        let arch = ArchitectureSpec { blocks: blocks.clone() };
        let opts = BuildOptions { c1: 2, ..BuildOptions::default() };
        let mut rng = StdRng::seed_from_u64(6);
        let graph = build_network(&arch, &opts, &mut rng).unwrap();
        assert_eq!(graph.num_nodes(), 4);
        let count = graph.count_parameters();
        let vol = rand_volume(&[1, 8, 8, 8], 60);
        let out = graph.forward(&vol).unwrap();

        // Mutating the dangling block must not change count or output.
        blocks[2].op = OpKind::AxialAttnXYZ;
        blocks[2].level = 5;
        let mutated = ArchitectureSpec { blocks };
        let mut rng = StdRng::seed_from_u64(6);
        let graph2 = build_network(&mutated, &opts, &mut rng).unwrap();
        assert_eq!(graph2.count_parameters(), count);
        assert_eq!(graph2.forward(&vol).unwrap(), out);
    }

    #[test]
    fn adapters_sit_exactly_on_level_mismatched_edges() {
        // Mixed-level graph, hand-traced:
        //   b0 L2 <- stem (same level twice)
        //   b1 L3 <- b0 (down 1), stem (down 1)
        //   b2 L5 <- b1 (down 2), b0 (down 3)
        //   b3 L2 <- b2 (up x8), b1 (up x2)
        //   b4 L3 <- b3 (down 1), b2 (up x4)
        let arch = ArchitectureSpec {
            blocks: vec![
                BlockSpec { block_id: 0, op: OpKind::Residual3D, level: 2, pred1: PRED_SENTINEL, pred2: PRED_SENTINEL },
                BlockSpec { block_id: 1, op: OpKind::Residual3D, level: 3, pred1: 0, pred2: PRED_SENTINEL },
                BlockSpec { block_id: 2, op: OpKind::Residual3D, level: 5, pred1: 1, pred2: 0 },
                BlockSpec { block_id: 3, op: OpKind::Residual3D, level: 2, pred1: 2, pred2: 1 },
                BlockSpec { block_id: 4, op: OpKind::Residual3D, level: 3, pred1: 3, pred2: 2 },
            ],
        };
        let mut rng = StdRng::seed_from_u64(7);
        let graph = build_network(&arch, &BuildOptions { c1: 2, ..BuildOptions::default() }, &mut rng).unwrap();
        let expect: &[&[(&str, &str)]] = &[
            &[("stem", "none"), ("stem", "none")],
            &[("b0", "down x2"), ("stem", "down x2")],
            &[("b1", "down x4"), ("b0", "down x8")],
            &[("b2", "up x8"), ("b1", "up x2")],
            &[("b3", "down x2"), ("b2", "up x4")],
        ];
        for (node, row) in graph.nodes.iter().zip(expect) {
            for (edge, &(from, resample)) in node.edges.iter().zip(row.iter()) {
                let actual_from = match edge.source {
                    EdgeSource::Stem => "stem".to_string(),
                    EdgeSource::Block(p) => format!("b{p}"),
                };
                assert_eq!(actual_from, from);
                assert_eq!(edge.resample_label(node.level), resample, "edge into b{}", node.block_id);
                let steps = (node.level - edge.source_level).max(0) as usize;
                assert_eq!(edge.down.len(), steps);
            }
        }
    }

    #[test]
    fn residual_body_param_count_at_width_32() {
        // Width 32 residual body: 2 * (3^3 * 32 * 32) conv weights +
        // 2 * 32 conv biases + 2 * (2 * 32) norm scales/shifts.
        let arch = residual_chain(&[2, 2, 2, 2, 2]);
        let mut rng = StdRng::seed_from_u64(8);
        let graph = build_network(&arch, &BuildOptions::default(), &mut rng).unwrap();
        assert_eq!(level_width(16, 2), 32);
        let body: usize = graph
            .params
            .iter()
            .filter(|(n, _)| {
                n.starts_with("b0.conv") || n.starts_with("b0.norm")
            })
            .map(|(_, v)| v.len())
            .sum();
        let convs = 2 * (27 * 32 * 32) + 2 * 32;
        let norms = 2 * (2 * 32);
        assert_eq!(convs, 55_360);
        assert_eq!(body, convs + norms);
        assert_eq!(body, 55_488);
    }

    #[test]
    fn doubling_c1_quadruples_block_conv_weights() {
        let arch = residual_chain(&[2, 2, 2, 2, 2]);
        let conv_weight_count = |c1: usize| -> usize {
            let mut rng = StdRng::seed_from_u64(9);
            let graph = build_network(
                &arch,
                &BuildOptions { c1, ..BuildOptions::default() },
                &mut rng,
            )
            .unwrap();
            graph
                .params
                .iter()
                .filter(|(n, v)| n.starts_with('b') && v.ndim() == 5)
                .map(|(_, v)| v.len())
                .sum()
        };
        assert_eq!(conv_weight_count(8), 4 * conv_weight_count(4));
    }

    #[test]
    fn full_graph_gradcheck_at_8_cubed() {
        let arch = chain_arch(
            &[2, 3, 2, 3, 2],
            &[
                OpKind::Residual3D,
                OpKind::Bottleneck3D,
                OpKind::AxialAttnXYZ,
                OpKind::Residual3D,
                OpKind::AxialAttnYXZ,
            ],
        );
        let opts = BuildOptions { c1: 2, ..BuildOptions::default() };
        let mut rng = StdRng::seed_from_u64(10);
        let graph = build_network(&arch, &opts, &mut rng).unwrap();
        let vol = rand_volume(&[1, 8, 8, 8], 100);

        // Loss: weighted sum of the probability output, fixed weights.
        let weights = rand_volume(&[2, 8, 8, 8], 101);
        let fp = graph.forward_tape(&vol).unwrap();
        let grads = fp.tape.backward_from(fp.output, weights.clone());
        let analytic = graph.params.collect_grads(&fp.bound, &grads).unwrap();

        let mut f = |values: &[ArrayD<f64>]| {
            let mut g = graph.clone();
            g.params.load_values(values.to_vec()).unwrap();
            let out = g.forward(&vol).unwrap();
            (&out * &weights).sum()
        };
        let err = max_rel_err_fd(
            &mut f,
            graph.params.values(),
            &analytic,
            1e-5,
            2,
            12345,
        );
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn zero_upstream_gradient_zeroes_all_params() {
        let arch = residual_chain(&[2, 2, 2, 2, 2]);
        let opts = BuildOptions { c1: 2, ..BuildOptions::default() };
        let mut rng = StdRng::seed_from_u64(11);
        let graph = build_network(&arch, &opts, &mut rng).unwrap();
        let vol = rand_volume(&[1, 8, 8, 8], 110);
        let zeros = ArrayD::zeros(IxDyn(&[2, 8, 8, 8]));
        let grads = graph.backward(&vol, &zeros).unwrap();
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wrong_input_channels_is_a_shape_error() {
        let arch = residual_chain(&[2, 2, 2, 2, 2]);
        let mut rng = StdRng::seed_from_u64(12);
        let graph = build_network(&arch, &BuildOptions { c1: 2, ..BuildOptions::default() }, &mut rng).unwrap();
        let err = graph.forward(&rand_volume(&[3, 8, 8, 8], 120)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn attention_preserves_shape_and_degenerates_at_length_one() {
        let mut rng = StdRng::seed_from_u64(13);
        let mut ps = ParamSet::new();
        let passes = register_axial_passes(&mut ps, &mut rng, "t", 8, 32);

        let x = rand_volume(&[8, 4, 4, 4], 130);
        let out = axial_attention(&x, [0, 1, 2], &passes, &ps).unwrap();
        assert_eq!(out.shape(), x.shape());

        // Single-voxel spatial extent: every softmax weight is 1, so each
        // pass reduces to x + value projection.
        let x1 = rand_volume(&[8, 1, 1, 1], 131);
        let got = axial_attention_pass(&x1, 0, &passes[0], &ps).unwrap();
        let wv = ps.value(passes[0].wv);
        let mut expect = x1.clone();
        for co in 0..8 {
            let mut v = 0.0;
            for ci in 0..8 {
                v += x1[[ci, 0, 0, 0]] * wv[[ci, co]];
            }
            expect[[co, 0, 0, 0]] += v;
        }
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_is_equivariant_along_non_attended_axes() {
        let mut rng = StdRng::seed_from_u64(14);
        let mut ps = ParamSet::new();
        let passes = register_axial_passes(&mut ps, &mut rng, "t", 4, 32);
        // Give the positional bias non-trivial values; it acts along the
        // attended axis only.
        let bias = nn::uniform(&mut rng, &[32], -0.5, 0.5);
        *ps.value_mut(passes[0].pos) = bias;

        let x = rand_volume(&[4, 3, 5, 4], 140);
        let base = axial_attention_pass(&x, 0, &passes[0], &ps).unwrap();

        // Cyclic shift along Z (a batch axis for the X pass).
        let mut shifted = x.clone();
        for c in 0..4 {
            for xi in 0..3 {
                for yi in 0..5 {
                    for zi in 0..4 {
                        shifted[[c, xi, yi, (zi + 1) % 4]] = x[[c, xi, yi, zi]];
                    }
                }
            }
        }
        let out = axial_attention_pass(&shifted, 0, &passes[0], &ps).unwrap();
        for c in 0..4 {
            for xi in 0..3 {
                for yi in 0..5 {
                    for zi in 0..4 {
                        let a = out[[c, xi, yi, (zi + 1) % 4]];
                        let b = base[[c, xi, yi, zi]];
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_axis_longer_than_bias_table_errors() {
        let mut rng = StdRng::seed_from_u64(15);
        let mut ps = ParamSet::new();
        let passes = register_axial_passes(&mut ps, &mut rng, "t", 2, 4);
        let x = rand_volume(&[2, 8, 2, 2], 150);
        let err = axial_attention_pass(&x, 0, &passes[0], &ps).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn random_arch_shape_roundtrip_fuzz() {
        let mut rng = StdRng::seed_from_u64(16);
        let opts = BuildOptions { c1: 1, ..BuildOptions::default() };
        for _ in 0..25 {
            let arch = sample_architecture(&mut rng);
            let graph = build_network(&arch, &opts, &mut rng).unwrap();
            let vol = rand_volume(&[1, 16, 16, 16], 160);
            let out = graph.forward(&vol).unwrap();
            assert_eq!(out.shape(), &[2, 16, 16, 16]);
        }
    }

    #[test]
    fn export_json_and_dot_describe_the_graph() {
        let arch = residual_chain(&[2, 3, 2, 2, 2]);
        let mut rng = StdRng::seed_from_u64(17);
        let graph = build_network(&arch, &BuildOptions { c1: 2, ..BuildOptions::default() }, &mut rng).unwrap();
        let j = graph.export_json(Some(Shape3D::new(1, 16, 16, 16))).unwrap();
        assert_eq!(j["nodes"].as_array().unwrap().len(), 5);
        assert_eq!(j["total_parameters"].as_u64().unwrap() as usize, graph.count_parameters());
        assert_eq!(j["nodes"][1]["op"], "residual3d");
        assert_eq!(j["nodes"][1]["output_shape"]["channels"], 8);
        let dot = graph.to_dot();
        assert!(dot.starts_with("digraph network {"));
        assert!(dot.contains("stem ->"));
        assert!(dot.contains("-> head"));
    }
}
