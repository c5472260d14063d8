//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records tensor operations as they execute; [`Tape::backward`]
//! replays them in reverse to accumulate gradients for every recorded
//! node.  The 3D network builder and the relation predictor both run on
//! this engine, so each primitive's backward pass is written (and
//! finite-difference checked) exactly once.
//!
//! Node values are always stored in standard (C) layout.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// a*x + b with scalar constants; only the scale matters for backward.
    Affine(NodeId, f64),
    Relu(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    /// (m,k) x (k,n).
    MatMul(NodeId, NodeId),
    /// (b,m,k) x (b,k,n), batched over the leading axis.
    BatchMatMul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    /// Concatenation of two 1-d vectors.
    ConcatVec(NodeId, NodeId),
    /// 1-d slice [start, start+len).
    Slice1D(NodeId, usize),
    Softmax(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// (C, spatial...) -> (C,), summing every non-channel axis.
    SumPerChannel(NodeId),
    /// (n, d) -> (d,).
    MeanRows(NodeId),
    /// x (..., L) + b (L,), broadcast over leading axes.
    AddBiasLast(NodeId, NodeId),
    /// Sum of any number of same-shaped nodes.
    SumN(Vec<NodeId>),
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    TrilinearResize(NodeId),
    /// Row lookup into a (vocab, d) table.
    Gather(NodeId, Vec<usize>),
    /// Binary cross-entropy on a single logit against a constant target.
    BceWithLogits(NodeId, f64),
    BceMean(NodeId, Vec<f64>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by a backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros in its shape if it received none.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn std_layout(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn reshaped(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape {:?} -> {:?}", a.shape(), shape);
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape of standard-layout array")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a single-element node as a scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "scalar() on node of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: std_layout(value),
            op,
        });
        self.nodes.len() - 1
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value / &self.nodes[b].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| scale * t + shift);
        self.push(v, Op::Affine(x, scale))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::ln);
        self.push(v, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as3(&self.nodes[a].value);
        let bv = as3(&self.nodes[b].value);
        let (ba, m, k) = av.dim();
        let (bb, k2, n) = bv.dim();
        assert_eq!(ba, bb, "batch dims");
        assert_eq!(k, k2, "batch_matmul inner dims");
        let mut out = ndarray::Array3::<f64>::zeros((ba, m, n));
        for i in 0..ba {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(out.into_dyn(), Op::BatchMatMul(a, b))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = reshaped(&self.nodes[x].value, shape);
        self.push(v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.nodes[x]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Permute(x, axes.to_vec()))
    }

    pub fn concat_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.ndim(), 1);
        assert_eq!(bv.ndim(), 1);
        let mut data = av.iter().copied().collect::<Vec<_>>();
        data.extend(bv.iter().copied());
        let v = ArrayD::from_shape_vec(IxDyn(&[data.len()]), data).unwrap();
        self.push(v, Op::ConcatVec(a, b))
    }

    pub fn slice1d(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.ndim(), 1);
        assert!(start + len <= xv.len(), "slice1d {start}+{len} > {}", xv.len());
        let v = xv
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .slice(ndarray::s![start..start + len])
            .to_owned()
            .into_dyn();
        self.push(v, Op::Slice1D(x, start))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in lane.iter_mut() {
                *t = (*t - max).exp();
                sum += *t;
            }
            for t in lane.iter_mut() {
                *t /= sum;
            }
        }
        self.push(v, Op::Softmax(x, axis))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[x].value.sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[x].value.sum() / n);
        self.push(v, Op::MeanAll(x))
    }

    pub fn sum_per_channel(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let c = xv.shape()[0];
        let flat = xv.view().into_shape_with_order((c, xv.len() / c)).unwrap();
        let v = flat.sum_axis(Axis(1)).into_dyn();
        self.push(v, Op::SumPerChannel(x))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let v = xv.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(v, Op::MeanRows(x))
    }

    pub fn add_bias_last(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[b].value;
        assert_eq!(bv.ndim(), 1);
        assert_eq!(xv.shape()[xv.ndim() - 1], bv.len(), "bias length");
        let v = xv + bv;
        self.push(v, Op::AddBiasLast(x, b))
    }

    pub fn sum_n(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut v = self.nodes[xs[0]].value.clone();
        for &x in &xs[1..] {
            assert_eq!(self.nodes[x].value.shape(), v.shape());
            v += &self.nodes[x].value;
        }
        self.push(v, Op::SumN(xs.to_vec()))
    }

    /// 3D convolution: x (Cin,X,Y,Z), w (Cout,Cin,K,K,K), b (Cout).
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = kernels::conv3d_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            pad,
        );
        self.push(v, Op::Conv3d { x, w, b, stride, pad })
    }

    /// Per-channel normalization over the spatial axes of (C, X, Y, Z).
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = kernels::instance_norm_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        );
        self.push(v, Op::InstanceNorm { x, gamma, beta, eps })
    }

    /// Per-row normalization over the last axis of (n, d).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = kernels::layer_norm_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        );
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Resize (C,X,Y,Z) to (C, out[0], out[1], out[2]) by trilinear
    /// interpolation.
    pub fn trilinear_resize(&mut self, x: NodeId, out: [usize; 3]) -> NodeId {
        let v = kernels::trilinear_forward(&self.nodes[x].value, out);
        self.push(v, Op::TrilinearResize(x))
    }

    /// Look up rows of a (vocab, d) table.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = as2(&self.nodes[table].value);
        let d = t.ncols();
        let mut v = ndarray::Array2::<f64>::zeros((indices.len(), d));
        for (row, &idx) in indices.iter().enumerate() {
            v.row_mut(row).assign(&t.row(idx));
        }
        self.push(v.into_dyn(), Op::Gather(table, indices.to_vec()))
    }

    /// Numerically stable BCE between sigmoid(logit) and a constant target.
    pub fn bce_with_logits(&mut self, logit: NodeId, target: f64) -> NodeId {
        let z = self.scalar(logit);
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let v = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(v, Op::BceWithLogits(logit, target))
    }

    /// Mean of the stable BCE over a 1D logit vector with per-element
    /// constant targets.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let zv = &self.nodes[logits].value;
        assert_eq!(zv.ndim(), 1, "bce_with_logits_mean expects 1D logits");
        assert_eq!(zv.len(), targets.len(), "logit/target count");
        let total: f64 = zv
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let v = ArrayD::from_elem(IxDyn(&[]), total / targets.len() as f64);
        self.push(v, Op::BceMean(logits, targets.to_vec()))
    }

    /// Backward pass from a single-element node, seeding with gradient 1.
    pub fn backward(&self, output: NodeId) -> Gradients {
        let shape = self.nodes[output].value.shape().to_vec();
        let seed = ArrayD::from_elem(IxDyn(&shape), 1.0);
        assert_eq!(seed.len(), 1, "backward() needs a scalar output");
        self.backward_from(output, seed)
    }

    /// Backward pass from any node with an explicit upstream gradient.
    pub fn backward_from(&self, output: NodeId, upstream: ArrayD<f64>) -> Gradients {
        assert_eq!(upstream.shape(), self.nodes[output].value.shape());
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[output] = Some(std_layout(upstream));
        for id in (0..=output).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.step_backward(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn step_backward(&self, id: NodeId, gy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, -gy);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, gy * &nodes[*b].value);
                acc(grads, *b, gy * &nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &nodes[*b].value;
                acc(grads, *a, gy / bv);
                acc(grads, *b, -(gy * &nodes[id].value / bv));
            }
            Op::Affine(x, scale) => {
                acc(grads, *x, gy * *scale);
            }
            Op::Relu(x) => {
                let mask = nodes[*x].value.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *x, gy * &mask);
            }
            Op::Log(x) => {
                acc(grads, *x, gy / &nodes[*x].value);
            }
            Op::Sigmoid(x) => {
                let y = &nodes[id].value;
                acc(grads, *x, gy * y * &y.mapv(|t| 1.0 - t));
            }
            Op::MatMul(a, b) => {
                let av = as2(&nodes[*a].value);
                let bv = as2(&nodes[*b].value);
                let g = as2(gy);
                acc(grads, *a, g.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&g).into_dyn());
            }
            Op::BatchMatMul(a, b) => {
                let av = as3(&nodes[*a].value);
                let bv = as3(&nodes[*b].value);
                let g = as3(gy);
                let (batch, m, k) = av.dim();
                let n = bv.dim().2;
                let mut ga = ndarray::Array3::<f64>::zeros((batch, m, k));
                let mut gb = ndarray::Array3::<f64>::zeros((batch, k, n));
                for i in 0..batch {
                    let gi = g.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                acc(grads, *a, ga.into_dyn());
                acc(grads, *b, gb.into_dyn());
            }
            Op::Reshape(x) => {
                acc(grads, *x, reshaped(gy, nodes[*x].value.shape()));
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let g = gy
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                acc(grads, *x, g);
            }
            Op::ConcatVec(a, b) => {
                let na = nodes[*a].value.len();
                let g = gy.view().into_dimensionality::<Ix1>().unwrap();
                acc(grads, *a, g.slice(ndarray::s![..na]).to_owned().into_dyn());
                acc(grads, *b, g.slice(ndarray::s![na..]).to_owned().into_dyn());
            }
            Op::Slice1D(x, start) => {
                let mut g = ArrayD::zeros(IxDyn(nodes[*x].value.shape()));
                {
                    let mut g1 = g.view_mut().into_dimensionality::<Ix1>().unwrap();
                    let gyv = gy.view().into_dimensionality::<Ix1>().unwrap();
                    g1.slice_mut(ndarray::s![*start..start + gyv.len()])
                        .assign(&gyv);
                }
                acc(grads, *x, g);
            }
            Op::Softmax(x, axis) => {
                let y = &nodes[id].value;
                let mut g = gy * y;
                // g_lane -= y_lane * sum(g_lane)
                let sums: Vec<f64> = g.lanes(Axis(*axis)).into_iter().map(|l| l.sum()).collect();
                for (mut lane, (ylane, s)) in g
                    .lanes_mut(Axis(*axis))
                    .into_iter()
                    .zip(y.lanes(Axis(*axis)).into_iter().zip(sums))
                {
                    lane.zip_mut_with(&ylane, |gv, yv| *gv -= yv * s);
                }
                acc(grads, *x, g);
            }
            Op::SumAll(x) => {
                let s = gy.iter().next().copied().unwrap();
                acc(grads, *x, ArrayD::from_elem(IxDyn(nodes[*x].value.shape()), s));
            }
            Op::MeanAll(x) => {
                let n = nodes[*x].value.len() as f64;
                let s = gy.iter().next().copied().unwrap() / n;
                acc(grads, *x, ArrayD::from_elem(IxDyn(nodes[*x].value.shape()), s));
            }
            Op::SumPerChannel(x) => {
                let shape = nodes[*x].value.shape().to_vec();
                let per = shape.iter().skip(1).product::<usize>();
                let mut g = Vec::with_capacity(shape.iter().product());
                for &gc in gy.iter() {
                    g.extend(std::iter::repeat(gc).take(per));
                }
                acc(grads, *x, ArrayD::from_shape_vec(IxDyn(&shape), g).unwrap());
            }
            Op::MeanRows(x) => {
                let xv = as2(&nodes[*x].value);
                let (n, d) = xv.dim();
                let mut g = ndarray::Array2::<f64>::zeros((n, d));
                let gv = gy.view().into_dimensionality::<Ix1>().unwrap();
                for mut row in g.rows_mut() {
                    row.zip_mut_with(&gv, |r, &gvv| *r = gvv / n as f64);
                }
                acc(grads, *x, g.into_dyn());
            }
            Op::AddBiasLast(x, b) => {
                acc(grads, *x, gy.clone());
                let mut gb = gy.clone();
                while gb.ndim() > 1 {
                    gb = gb.sum_axis(Axis(0));
                }
                acc(grads, *b, gb);
            }
            Op::SumN(xs) => {
                for &x in xs {
                    acc(grads, x, gy.clone());
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv3d_backward(
                    &nodes[*x].value,
                    &nodes[*w].value,
                    gy,
                    *stride,
                    *pad,
                );
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) = kernels::instance_norm_backward(
                    &nodes[*x].value,
                    &nodes[*gamma].value,
                    gy,
                    *eps,
                );
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(
                    &nodes[*x].value,
                    &nodes[*gamma].value,
                    gy,
                    *eps,
                );
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::TrilinearResize(x) => {
                let g = kernels::trilinear_backward(gy, &nodes[*x].value);
                acc(grads, *x, g);
            }
            Op::Gather(table, indices) => {
                let t = as2(&nodes[*table].value);
                let mut g = ndarray::Array2::<f64>::zeros(t.dim());
                let gv = as2(gy);
                for (row, &idx) in indices.iter().enumerate() {
                    let mut target = g.row_mut(idx);
                    target += &gv.row(row);
                }
                acc(grads, *table, g.into_dyn());
            }
            Op::BceWithLogits(logit, target) => {
                let z = nodes[*logit].value.iter().next().copied().unwrap();
                let up = gy.iter().next().copied().unwrap();
                let dz = (sigmoid(z) - target) * up;
                acc(
                    grads,
                    *logit,
                    ArrayD::from_elem(IxDyn(nodes[*logit].value.shape()), dz),
                );
            }
            Op::BceMean(logits, targets) => {
                let up = gy.iter().next().copied().unwrap();
                let scale = up / targets.len() as f64;
                let g: Vec<f64> = nodes[*logits]
                    .value
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                let len = g.len();
                acc(grads, *logits, ArrayD::from_shape_vec(IxDyn(&[len]), g).unwrap());
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn acc(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(std_layout(delta)),
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected 2-d, got {:?}", a.shape()))
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view()
        .into_dimensionality::<Ix3>()
        .unwrap_or_else(|_| panic!("expected 3-d, got {:?}", a.shape()))
}

// ---------------------------------------------------------------------------
// Dense kernels

mod kernels {
    use super::*;

    fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
        let s = a.shape();
        assert_eq!(s.len(), 4, "expected 4-d, got {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    /// Output extent of a conv axis.
    pub fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> usize {
        (input + 2 * pad - k) / stride + 1
    }

    pub fn conv3d_forward(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (cin, xs, ys, zs) = dims4(x);
        let ws = w.shape();
        assert_eq!(ws.len(), 5);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(wcin, cin, "conv3d channel mismatch");
        assert_eq!(ws[3], k);
        assert_eq!(ws[4], k);
        assert_eq!(b.len(), cout);
        let (ox, oy, oz) = (
            conv_out(xs, k, stride, pad),
            conv_out(ys, k, stride, pad),
            conv_out(zs, k, stride, pad),
        );
        let xv = x.as_slice().unwrap();
        let wv = w.as_slice().unwrap();
        let mut out = vec![0.0f64; cout * ox * oy * oz];
        // Bias first, then accumulate kernel taps.
        for (co, &bias) in b.iter().enumerate() {
            out[co * ox * oy * oz..(co + 1) * ox * oy * oz].fill(bias);
        }
        for co in 0..cout {
            for ci in 0..cin {
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let wval = wv[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                            if wval == 0.0 {
                                continue;
                            }
                            accumulate_tap(
                                &mut out, xv, wval, co, ci, kx, ky, kz, xs, ys, zs, ox, oy, oz,
                                stride, pad,
                            );
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[cout, ox, oy, oz]), out).unwrap()
    }

    /// One (co, ci, kx, ky, kz) tap of the convolution, over all valid
    /// output positions.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_tap(
        out: &mut [f64],
        xv: &[f64],
        wval: f64,
        co: usize,
        ci: usize,
        kx: usize,
        ky: usize,
        kz: usize,
        xs: usize,
        ys: usize,
        zs: usize,
        ox: usize,
        oy: usize,
        oz: usize,
        stride: usize,
        pad: usize,
    ) {
        let (lo_x, hi_x) = valid_range(xs, kx, stride, pad, ox);
        let (lo_y, hi_y) = valid_range(ys, ky, stride, pad, oy);
        let (lo_z, hi_z) = valid_range(zs, kz, stride, pad, oz);
        for o_x in lo_x..hi_x {
            let i_x = o_x * stride + kx - pad;
            for o_y in lo_y..hi_y {
                let i_y = o_y * stride + ky - pad;
                let out_base = ((co * ox + o_x) * oy + o_y) * oz;
                let in_base = ((ci * xs + i_x) * ys + i_y) * zs;
                for o_z in lo_z..hi_z {
                    let i_z = o_z * stride + kz - pad;
                    out[out_base + o_z] += wval * xv[in_base + i_z];
                }
            }
        }
    }

    /// Valid output range along one axis for a kernel offset: positions
    /// where `o*stride + k - pad` lands inside [0, input).
    fn valid_range(input: usize, k: usize, stride: usize, pad: usize, out: usize) -> (usize, usize) {
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        // largest o with o*stride + k - pad <= input - 1
        let hi = if input + pad < k + 1 {
            0
        } else {
            (((input + pad - k - 1) / stride) + 1).min(out)
        };
        (lo.min(hi), hi)
    }

    pub fn conv3d_backward(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        gy: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let (cin, xs, ys, zs) = dims4(x);
        let ws = w.shape();
        let (cout, k) = (ws[0], ws[2]);
        let (_, ox, oy, oz) = dims4(gy);
        let xv = x.as_slice().unwrap();
        let wv = w.as_slice().unwrap();
        let gv = gy.as_slice().unwrap();

        let mut gx = vec![0.0f64; cin * xs * ys * zs];
        let mut gw = vec![0.0f64; w.len()];
        let mut gb = vec![0.0f64; cout];

        for co in 0..cout {
            let plane = &gv[co * ox * oy * oz..(co + 1) * ox * oy * oz];
            gb[co] = plane.iter().sum();
        }
        for co in 0..cout {
            for ci in 0..cin {
                for kx in 0..k {
                    let (lo_x, hi_x) = valid_range(xs, kx, stride, pad, ox);
                    for ky in 0..k {
                        let (lo_y, hi_y) = valid_range(ys, ky, stride, pad, oy);
                        for kz in 0..k {
                            let (lo_z, hi_z) = valid_range(zs, kz, stride, pad, oz);
                            let widx = (((co * cin + ci) * k + kx) * k + ky) * k + kz;
                            let wval = wv[widx];
                            let mut wgrad = 0.0;
                            for o_x in lo_x..hi_x {
                                let i_x = o_x * stride + kx - pad;
                                for o_y in lo_y..hi_y {
                                    let i_y = o_y * stride + ky - pad;
                                    let gy_base = ((co * ox + o_x) * oy + o_y) * oz;
                                    let in_base = ((ci * xs + i_x) * ys + i_y) * zs;
                                    for o_z in lo_z..hi_z {
                                        let i_z = o_z * stride + kz - pad;
                                        let g = gv[gy_base + o_z];
                                        wgrad += g * xv[in_base + i_z];
                                        gx[in_base + i_z] += g * wval;
                                    }
                                }
                            }
                            gw[widx] += wgrad;
                        }
                    }
                }
            }
        }
        (
            ArrayD::from_shape_vec(IxDyn(&[cin, xs, ys, zs]), gx).unwrap(),
            ArrayD::from_shape_vec(IxDyn(ws), gw).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap(),
        )
    }

    pub fn instance_norm_forward(
        x: &ArrayD<f64>,
        gamma: &ArrayD<f64>,
        beta: &ArrayD<f64>,
        eps: f64,
    ) -> ArrayD<f64> {
        let (c, xs, ys, zs) = dims4(x);
        let n = xs * ys * zs;
        assert_eq!(gamma.len(), c);
        assert_eq!(beta.len(), c);
        let xv = x.as_slice().unwrap();
        let mut out = vec![0.0f64; xv.len()];
        for ch in 0..c {
            let sl = &xv[ch * n..(ch + 1) * n];
            let mean = sl.iter().sum::<f64>() / n as f64;
            let var = sl.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let (g, b) = (gamma[ch], beta[ch]);
            for (o, &t) in out[ch * n..(ch + 1) * n].iter_mut().zip(sl) {
                *o = g * (t - mean) * inv + b;
            }
        }
        ArrayD::from_shape_vec(IxDyn(x.shape()), out).unwrap()
    }

    pub fn instance_norm_backward(
        x: &ArrayD<f64>,
        gamma: &ArrayD<f64>,
        gy: &ArrayD<f64>,
        eps: f64,
    ) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let (c, xs, ys, zs) = dims4(x);
        let n = xs * ys * zs;
        let xv = x.as_slice().unwrap();
        let gv = gy.as_slice().unwrap();
        let mut gx = vec![0.0f64; xv.len()];
        let mut gg = vec![0.0f64; c];
        let mut gb = vec![0.0f64; c];
        for ch in 0..c {
            let sl = &xv[ch * n..(ch + 1) * n];
            let gsl = &gv[ch * n..(ch + 1) * n];
            let mean = sl.iter().sum::<f64>() / n as f64;
            let var = sl.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let mut sum_g = 0.0;
            let mut sum_gxhat = 0.0;
            for (&g, &t) in gsl.iter().zip(sl) {
                let xhat = (t - mean) * inv;
                sum_g += g;
                sum_gxhat += g * xhat;
            }
            gb[ch] = sum_g;
            gg[ch] = sum_gxhat;
            let gam = gamma[ch];
            let mean_g = sum_g / n as f64;
            let mean_gxhat = sum_gxhat / n as f64;
            for ((o, &g), &t) in gx[ch * n..(ch + 1) * n].iter_mut().zip(gsl).zip(sl) {
                let xhat = (t - mean) * inv;
                *o = gam * inv * (g - mean_g - xhat * mean_gxhat);
            }
        }
        (
            ArrayD::from_shape_vec(IxDyn(x.shape()), gx).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[c]), gg).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap(),
        )
    }

    pub fn layer_norm_forward(
        x: &ArrayD<f64>,
        gamma: &ArrayD<f64>,
        beta: &ArrayD<f64>,
        eps: f64,
    ) -> ArrayD<f64> {
        let xv = super::as2(x);
        let (rows, d) = xv.dim();
        assert_eq!(gamma.len(), d);
        assert_eq!(beta.len(), d);
        let gv = gamma.as_slice().unwrap();
        let bv = beta.as_slice().unwrap();
        let mut out = ndarray::Array2::<f64>::zeros((rows, d));
        for (mut orow, xrow) in out.rows_mut().into_iter().zip(xv.rows()) {
            let mean = xrow.sum() / d as f64;
            let var = xrow.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, (o, &t)) in orow.iter_mut().zip(xrow.iter()).enumerate() {
                *o = gv[j] * (t - mean) * inv + bv[j];
            }
        }
        out.into_dyn()
    }

    pub fn layer_norm_backward(
        x: &ArrayD<f64>,
        gamma: &ArrayD<f64>,
        gy: &ArrayD<f64>,
        eps: f64,
    ) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let xv = super::as2(x);
        let gv = super::as2(gy);
        let (rows, d) = xv.dim();
        let gam = gamma.as_slice().unwrap();
        let mut gx = ndarray::Array2::<f64>::zeros((rows, d));
        let mut gg = vec![0.0f64; d];
        let mut gb = vec![0.0f64; d];
        for ((mut gxrow, xrow), grow) in gx.rows_mut().into_iter().zip(xv.rows()).zip(gv.rows()) {
            let mean = xrow.sum() / d as f64;
            let var = xrow.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let mut sum_gh = 0.0;
            let mut sum_ghxhat = 0.0;
            for (j, (&g, &t)) in grow.iter().zip(xrow.iter()).enumerate() {
                let xhat = (t - mean) * inv;
                gg[j] += g * xhat;
                gb[j] += g;
                let gh = g * gam[j];
                sum_gh += gh;
                sum_ghxhat += gh * xhat;
            }
            let mean_gh = sum_gh / d as f64;
            let mean_ghxhat = sum_ghxhat / d as f64;
            for (j, (o, &t)) in gxrow.iter_mut().zip(xrow.iter()).enumerate() {
                let xhat = (t - mean) * inv;
                let gh = grow[j] * gam[j];
                *o = inv * (gh - mean_gh - xhat * mean_ghxhat);
            }
        }
        (
            gx.into_dyn(),
            ArrayD::from_shape_vec(IxDyn(&[d]), gg).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[d]), gb).unwrap(),
        )
    }

    /// Per-axis interpolation taps for half-pixel-center resizing.
    fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = src - i0 as f64;
                (i0, i1, frac)
            })
            .collect()
    }

    pub fn trilinear_forward(x: &ArrayD<f64>, out_dims: [usize; 3]) -> ArrayD<f64> {
        let (c, xs, ys, zs) = dims4(x);
        let [ox, oy, oz] = out_dims;
        let tx = resize_taps(xs, ox);
        let ty = resize_taps(ys, oy);
        let tz = resize_taps(zs, oz);
        let xv = x.as_slice().unwrap();
        let mut out = vec![0.0f64; c * ox * oy * oz];
        for ch in 0..c {
            let base_in = ch * xs * ys * zs;
            let base_out = ch * ox * oy * oz;
            for (o_x, &(x0, x1, fx)) in tx.iter().enumerate() {
                for (o_y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (o_z, &(z0, z1, fz)) in tz.iter().enumerate() {
                        let fetch = |ix: usize, iy: usize, iz: usize| {
                            xv[base_in + (ix * ys + iy) * zs + iz]
                        };
                        let c00 = fetch(x0, y0, z0) * (1.0 - fx) + fetch(x1, y0, z0) * fx;
                        let c01 = fetch(x0, y0, z1) * (1.0 - fx) + fetch(x1, y0, z1) * fx;
                        let c10 = fetch(x0, y1, z0) * (1.0 - fx) + fetch(x1, y1, z0) * fx;
                        let c11 = fetch(x0, y1, z1) * (1.0 - fx) + fetch(x1, y1, z1) * fx;
                        let c0 = c00 * (1.0 - fy) + c10 * fy;
                        let c1 = c01 * (1.0 - fy) + c11 * fy;
                        out[base_out + (o_x * oy + o_y) * oz + o_z] = c0 * (1.0 - fz) + c1 * fz;
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, ox, oy, oz]), out).unwrap()
    }

    pub fn trilinear_backward(gy: &ArrayD<f64>, x: &ArrayD<f64>) -> ArrayD<f64> {
        let (c, xs, ys, zs) = dims4(x);
        let (_, ox, oy, oz) = dims4(gy);
        let tx = resize_taps(xs, ox);
        let ty = resize_taps(ys, oy);
        let tz = resize_taps(zs, oz);
        let gv = gy.as_slice().unwrap();
        let mut gx = vec![0.0f64; c * xs * ys * zs];
        for ch in 0..c {
            let base_in = ch * xs * ys * zs;
            let base_out = ch * ox * oy * oz;
            for (o_x, &(x0, x1, fx)) in tx.iter().enumerate() {
                for (o_y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (o_z, &(z0, z1, fz)) in tz.iter().enumerate() {
                        let g = gv[base_out + (o_x * oy + o_y) * oz + o_z];
                        let mut put = |ix: usize, iy: usize, iz: usize, w: f64| {
                            gx[base_in + (ix * ys + iy) * zs + iz] += g * w;
                        };
                        put(x0, y0, z0, (1.0 - fx) * (1.0 - fy) * (1.0 - fz));
                        put(x1, y0, z0, fx * (1.0 - fy) * (1.0 - fz));
                        put(x0, y1, z0, (1.0 - fx) * fy * (1.0 - fz));
                        put(x1, y1, z0, fx * fy * (1.0 - fz));
                        put(x0, y0, z1, (1.0 - fx) * (1.0 - fy) * fz);
                        put(x1, y0, z1, fx * (1.0 - fy) * fz);
                        put(x0, y1, z1, (1.0 - fx) * fy * fz);
                        put(x1, y1, z1, fx * fy * fz);
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, xs, ys, zs]), gx).unwrap()
    }
}

pub use kernels::conv_out;

/// Trilinear resize of a (C,X,Y,Z) array without tape involvement; the
/// same half-pixel-center kernel the tape op uses.
pub fn trilinear_resize_array(x: &ArrayD<f64>, out_dims: [usize; 3]) -> ArrayD<f64> {
    kernels::trilinear_forward(x, out_dims)
}

// ---------------------------------------------------------------------------
// Finite-difference checking

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Entries compared against the analytic gradient.
    pub checked: usize,
    /// Entries skipped because the function is not smooth there: central
    /// differences at step h and h/2 disagreed, which happens when a
    /// rectifier kink falls inside the probe window.  At such points the
    /// finite difference does not estimate the derivative, so comparison
    /// is meaningless; a wrong backward pass cannot hide here because it
    /// would also fail at the smooth entries.
    pub skipped: usize,
}

/// Compare analytic gradients against central finite differences of `f`,
/// sampling up to `samples_per_tensor` entries of each parameter tensor.
///
/// Relative error uses a small absolute floor so near-zero gradient pairs
/// do not blow up the ratio.
pub fn fd_check(
    f: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    step: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> FdReport {
    assert_eq!(params.len(), analytic.len());
    let mut rng = StdRng::seed_from_u64(seed);
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for t in 0..params.len() {
        assert_eq!(params[t].shape(), analytic[t].shape());
        let len = params[t].len();
        let entries: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for e in entries {
            let mut central = |h: f64| {
                let orig = work[t].as_slice().unwrap()[e];
                work[t].as_slice_mut().unwrap()[e] = orig + h;
                let up = f(&work);
                work[t].as_slice_mut().unwrap()[e] = orig - h;
                let down = f(&work);
                work[t].as_slice_mut().unwrap()[e] = orig;
                (up - down) / (2.0 * h)
            };
            let fd = central(step);
            let fd_half = central(step / 2.0);
            let smooth_denom = fd.abs().max(fd_half.abs()).max(1e-3);
            if (fd - fd_half).abs() / smooth_denom > 1e-4 {
                report.skipped += 1;
                continue;
            }
            let an = analytic[t].as_slice().unwrap()[e];
            // Two-term tolerance: the absolute floor absorbs the
            // finite-difference roundoff that dominates when the true
            // gradient is zero (e.g. a conv bias cancelled by a
            // following normalization).
            let gap = ((an - fd).abs() - 1e-8).max(0.0);
            let denom = an.abs().max(fd.abs()).max(1e-6);
            report.max_rel_err = report.max_rel_err.max(gap / denom);
            report.checked += 1;
        }
    }
    report
}

/// [`fd_check`] reduced to its maximum relative error; panics if more
/// than a quarter of the probed entries had to be skipped as non-smooth.
pub fn max_rel_err_fd(
    f: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    step: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> f64 {
    let report = fd_check(f, params, analytic, step, samples_per_tensor, seed);
    assert!(
        report.checked >= 3 * (report.checked + report.skipped) / 4,
        "too many non-smooth probe points: {} skipped of {}",
        report.skipped,
        report.checked + report.skipped
    );
    report.max_rel_err
}
