//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once for a given set of shapes, then evaluated with
//! [`Graph::forward`] and differentiated with [`Graph::backward`]. Nodes are
//! stored in construction order, which is a topological order by
//! construction: an operation can only reference already-existing nodes.
//!
//! Sampling nodes draw noise during the forward pass and cache it in the
//! returned [`Evaluation`], so the backward pass differentiates through
//! `mean + stddev * eps` with the same `eps` (reparameterization).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::optim::ParamSet;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

pub type NodeId = usize;

/// How the second operand of an elementwise op is expanded to the first
/// operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// b is `[1, d]`, repeated for every row of a `[n, d]`.
    Row,
    /// b is `[n, 1]`, repeated across every column of a `[n, d]`.
    Col,
    /// b is a single element, repeated everywhere.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Param { name: String },
    Const { value: Tensor },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId, bc: Broadcast },
    Mul { a: NodeId, b: NodeId, bc: Broadcast },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Sigmoid { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    SumAxis { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    Concat { a: NodeId, b: NodeId, axis: usize },
    SampleGaussian { mean: NodeId, stddev: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const { .. } => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum_all",
            Op::Concat { .. } => "concat",
            Op::SampleGaussian { .. } => "sample_gaussian",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Forward-pass result: one value per node plus the noise drawn by sampling
/// nodes. Required by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    noises: BTreeMap<NodeId, Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// Noise tensors drawn by `sample_gaussian` nodes, keyed by node id.
    pub fn noises(&self) -> &BTreeMap<NodeId, Tensor> {
        &self.noises
    }
}

/// Gradients of one scalar output with respect to parameters and inputs.
/// Every declared parameter and input is present; unused ones are zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

enum NoiseMode<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Replay(&'a BTreeMap<NodeId, Tensor>),
    Deterministic,
}

/// A static computation graph over named inputs and parameters.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Human-readable node name used in error messages, e.g. `matmul#12`.
    pub fn node_label(&self, id: NodeId) -> String {
        match &self.nodes[id].op {
            Op::Input { name } => format!("input '{name}'#{id}"),
            Op::Param { name } => format!("param '{name}'#{id}"),
            op => format!("{}#{id}", op.name()),
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        id
    }

    fn shape_err(&self, op: &'static str, detail: String) -> CoreError {
        CoreError::Shape {
            node: format!("{op}#{}", self.nodes.len()),
            detail,
        }
    }

    /// Declares (or re-references) a named graph input of a fixed shape.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.inputs.get(name) {
            if self.nodes[id].shape != shape {
                return Err(self.shape_err(
                    "input",
                    format!(
                        "input '{name}' redeclared with shape {:?}, was {:?}",
                        shape, self.nodes[id].shape
                    ),
                ));
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Input {
                name: String::from(name),
            },
            shape.to_vec(),
        );
        self.inputs.insert(String::from(name), id);
        Ok(id)
    }

    /// Declares (or re-references) a named parameter of a fixed shape.
    /// Referencing the same name twice yields the same node, so modules can
    /// share parameters.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id].shape != shape {
                return Err(self.shape_err(
                    "param",
                    format!(
                        "param '{name}' redeclared with shape {:?}, was {:?}",
                        shape, self.nodes[id].shape
                    ),
                ));
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Param {
                name: String::from(name),
            },
            shape.to_vec(),
        );
        self.params.insert(String::from(name), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const { value }, shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            let detail = format!("cannot multiply {sa:?} by {sb:?}");
            return Err(self.shape_err("matmul", detail));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul { a, b }, shape))
    }

    fn broadcast_kind(big: &[usize], small: &[usize]) -> Option<Broadcast> {
        if big == small {
            return Some(Broadcast::Same);
        }
        let small_len: usize = small.iter().product();
        if small_len == 1 {
            return Some(Broadcast::Scalar);
        }
        if big.len() == 2 && small.len() == 2 {
            if small[0] == 1 && small[1] == big[1] {
                return Some(Broadcast::Row);
            }
            if small[0] == big[0] && small[1] == 1 {
                return Some(Broadcast::Col);
            }
        }
        None
    }

    fn elementwise(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<(NodeId, NodeId, Broadcast)> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let (la, lb): (usize, usize) = (sa.iter().product(), sb.iter().product());
        // The broadcasting operand goes second; add and mul commute.
        let (x, y) = if lb <= la { (a, b) } else { (b, a) };
        let (sx, sy) = (&self.nodes[x].shape, &self.nodes[y].shape);
        match Self::broadcast_kind(sx, sy) {
            Some(bc) => Ok((x, y, bc)),
            None => {
                let detail = format!("incompatible shapes {sa:?} and {sb:?}");
                Err(self.shape_err(op, detail))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y, bc) = self.elementwise("add", a, b)?;
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::Add { a: x, b: y, bc }, shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y, bc) = self.elementwise("mul", a, b)?;
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::Mul { a: x, b: y, bc }, shape))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Relu { a }, shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Exp { a }, shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Log { a }, shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Sigmoid { a }, shape)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = &self.nodes[a].shape;
        if sa.len() != 2 || axis > 1 {
            let detail = format!("softmax needs rank-2 input and axis 0|1, got {sa:?} axis {axis}");
            return Err(self.shape_err("softmax", detail));
        }
        let shape = sa.clone();
        Ok(self.push(Op::Softmax { a, axis }, shape))
    }

    /// Sum over one axis, keeping it as size 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = &self.nodes[a].shape;
        if sa.len() != 2 || axis > 1 {
            let detail = format!("sum_axis needs rank-2 input and axis 0|1, got {sa:?} axis {axis}");
            return Err(self.shape_err("sum_axis", detail));
        }
        let shape = if axis == 0 {
            vec![1, sa[1]]
        } else {
            vec![sa[0], 1]
        };
        Ok(self.push(Op::SumAxis { a, axis }, shape))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll { a }, vec![1])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || axis > 1 {
            let detail = format!("concat needs rank-2 inputs and axis 0|1, got {sa:?} and {sb:?}");
            return Err(self.shape_err("concat", detail));
        }
        let other = 1 - axis;
        if sa[other] != sb[other] {
            let detail = format!("concat axis {axis} mismatch: {sa:?} vs {sb:?}");
            return Err(self.shape_err("concat", detail));
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        Ok(self.push(Op::Concat { a, b, axis }, shape))
    }

    /// `mean + stddev * eps` with `eps ~ N(0, I)` drawn once per forward and
    /// cached, so the backward pass sees the same noise.
    pub fn sample_gaussian(&mut self, mean: NodeId, stddev: NodeId) -> Result<NodeId> {
        let (sm, ss) = (&self.nodes[mean].shape, &self.nodes[stddev].shape);
        if sm != ss {
            let detail = format!("mean {sm:?} vs stddev {ss:?}");
            return Err(self.shape_err("sample_gaussian", detail));
        }
        let shape = sm.clone();
        Ok(self.push(Op::SampleGaussian { mean, stddev }, shape))
    }

    // Composite helpers; these only emit primitive nodes.

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let minus_one = self.scalar(-1.0);
        self.mul(a, minus_one)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> Result<NodeId> {
        let c = self.scalar(value);
        self.add(a, c)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n: usize = self.nodes[a].shape.iter().product();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Extracts column `col` of a rank-2 node as `[n, 1]`.
    pub fn select_col(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let sa = &self.nodes[a].shape;
        if sa.len() != 2 || col >= sa[1] {
            let detail = format!("column {col} of shape {sa:?}");
            return Err(self.shape_err("mul", detail));
        }
        let mut mask = Tensor::zeros(&[1, sa[1]]);
        mask.data_mut()[col] = 1.0;
        let mask = self.constant(mask);
        let masked = self.mul(a, mask)?;
        self.sum_axis(masked, 1)
    }

    /// Repeats a `[1, d]` row `n` times into `[n, d]` via ones-matmul.
    pub fn tile_rows(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let sr = &self.nodes[row].shape;
        if sr.len() != 2 || sr[0] != 1 {
            let detail = format!("tile_rows needs a [1, d] row, got {sr:?}");
            return Err(self.shape_err("matmul", detail));
        }
        let ones = self.constant(Tensor::full(&[n, 1], 1.0));
        self.matmul(ones, row)
    }

    // Execution.

    /// Evaluates every node, drawing fresh noise for sampling nodes from
    /// `rng`. Identical inputs, parameters, and rng state produce
    /// bit-identical results.
    pub fn forward(
        &self,
        params: &ParamSet,
        inputs: &BTreeMap<String, Tensor>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Evaluation> {
        self.run(params, inputs, NoiseMode::Fresh(rng))
    }

    /// Evaluates with noise tensors taken from a previous evaluation.
    pub fn forward_replay(
        &self,
        params: &ParamSet,
        inputs: &BTreeMap<String, Tensor>,
        noises: &BTreeMap<NodeId, Tensor>,
    ) -> Result<Evaluation> {
        self.run(params, inputs, NoiseMode::Replay(noises))
    }

    /// Evaluates a graph that contains no sampling nodes.
    pub fn forward_det(&self, params: &ParamSet, inputs: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        self.run(params, inputs, NoiseMode::Deterministic)
    }

    fn run(
        &self,
        params: &ParamSet,
        inputs: &BTreeMap<String, Tensor>,
        mut noise: NoiseMode<'_>,
    ) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut noises: BTreeMap<NodeId, Tensor> = BTreeMap::new();

        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name } => {
                    let t = inputs.get(name).ok_or(CoreError::Missing {
                        kind: "input",
                        name: name.clone(),
                    })?;
                    if t.shape() != node.shape {
                        return Err(CoreError::Shape {
                            node: self.node_label(id),
                            detail: format!("expected {:?}, got {:?}", node.shape, t.shape()),
                        });
                    }
                    t.clone()
                }
                Op::Param { name } => {
                    let t = params.get(name).ok_or(CoreError::Missing {
                        kind: "param",
                        name: name.clone(),
                    })?;
                    if t.shape() != node.shape {
                        return Err(CoreError::Shape {
                            node: self.node_label(id),
                            detail: format!("expected {:?}, got {:?}", node.shape, t.shape()),
                        });
                    }
                    t.clone()
                }
                Op::Const { value } => value.clone(),
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let data = matmul_nn(ta.data(), tb.data(), m, k, n);
                    Tensor::new(node.shape.clone(), data)?
                }
                Op::Add { a, b, bc } => {
                    let out = apply_broadcast(&values[*a], &values[*b], *bc, |x, y| x + y);
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::Mul { a, b, bc } => {
                    let out = apply_broadcast(&values[*a], &values[*b], *bc, |x, y| x * y);
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::Relu { a } => {
                    let data = values[*a].data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
                    Tensor::new(node.shape.clone(), data)?
                }
                Op::Exp { a } => {
                    let data = values[*a].data().iter().map(|&x| crate::fmath::exp(x)).collect();
                    Tensor::new(node.shape.clone(), data)?
                }
                Op::Log { a } => {
                    let data = values[*a].data().iter().map(|&x| crate::fmath::ln(x)).collect();
                    Tensor::new(node.shape.clone(), data)?
                }
                Op::Sigmoid { a } => {
                    let data = values[*a].data().iter().map(|&x| sigmoid(x)).collect();
                    Tensor::new(node.shape.clone(), data)?
                }
                Op::Softmax { a, axis } => {
                    let t = &values[*a];
                    Tensor::new(node.shape.clone(), softmax_2d(t, *axis))?
                }
                Op::SumAxis { a, axis } => {
                    let t = &values[*a];
                    let (r, c) = (t.shape()[0], t.shape()[1]);
                    let data = if *axis == 0 {
                        let mut out = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                out[j] += t.data()[i * c + j];
                            }
                        }
                        out
                    } else {
                        let mut out = vec![0.0; r];
                        for i in 0..r {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += t.data()[i * c + j];
                            }
                            out[i] = s;
                        }
                        out
                    };
                    Tensor::new(node.shape.clone(), data)?
                }
                Op::SumAll { a } => {
                    let s: f64 = values[*a].data().iter().sum();
                    Tensor::scalar(s)
                }
                Op::Concat { a, b, axis } => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    Tensor::new(node.shape.clone(), concat_2d(ta, tb, *axis))?
                }
                Op::SampleGaussian { mean, stddev } => {
                    let (tm, ts) = (&values[*mean], &values[*stddev]);
                    let eps = match &mut noise {
                        NoiseMode::Fresh(rng) => {
                            let data: Vec<f64> =
                                (0..tm.len()).map(|_| StandardNormal.sample(*rng)).collect();
                            Tensor::new(node.shape.clone(), data)?
                        }
                        NoiseMode::Replay(map) => {
                            let t = map.get(&id).ok_or(CoreError::Missing {
                                kind: "replay noise for node",
                                name: self.node_label(id),
                            })?;
                            if t.shape() != node.shape {
                                return Err(CoreError::Shape {
                                    node: self.node_label(id),
                                    detail: format!(
                                        "replay noise shape {:?}, expected {:?}",
                                        t.shape(),
                                        node.shape
                                    ),
                                });
                            }
                            t.clone()
                        }
                        NoiseMode::Deterministic => {
                            return Err(CoreError::invalid(format!(
                                "graph contains sampling node {} but no noise source was provided",
                                self.node_label(id)
                            )))
                        }
                    };
                    let data: Vec<f64> = tm
                        .data()
                        .iter()
                        .zip(ts.data())
                        .zip(eps.data())
                        .map(|((m, s), e)| m + s * e)
                        .collect();
                    noises.insert(id, eps);
                    Tensor::new(node.shape.clone(), data)?
                }
            };
            if !value.all_finite() {
                return Err(CoreError::NonFinite {
                    node: self.node_label(id),
                });
            }
            values.push(value);
        }

        Ok(Evaluation { values, noises })
    }

    /// Reverse-mode pass from `output`. With `seed` omitted the output must
    /// be a single element and is seeded with 1. Returns gradients for every
    /// declared parameter and input; unused ones are exactly zero.
    pub fn backward(&self, eval: &Evaluation, output: NodeId, seed: Option<&Tensor>) -> Result<Gradients> {
        if output >= self.nodes.len() {
            return Err(CoreError::invalid(format!("no node #{output}")));
        }
        let out_shape = &self.nodes[output].shape;
        let seed_data: Vec<f64> = match seed {
            Some(t) => {
                if t.shape() != out_shape.as_slice() {
                    return Err(CoreError::Shape {
                        node: self.node_label(output),
                        detail: format!("seed shape {:?}, output {:?}", t.shape(), out_shape),
                    });
                }
                t.data().to_vec()
            }
            None => {
                let numel: usize = out_shape.iter().product();
                if numel != 1 {
                    return Err(CoreError::invalid(format!(
                        "backward without a seed requires a scalar output, node {} has shape {:?}",
                        self.node_label(output),
                        out_shape
                    )));
                }
                vec![1.0]
            }
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output] = Some(seed_data);

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input { .. } | Op::Param { .. } | Op::Const { .. } => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&eval.values[*a], &eval.values[*b]);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let da = matmul_nt(&g, tb.data(), m, n, k);
                    let db = matmul_tn(ta.data(), &g, m, k, n);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Add { a, b, bc } => {
                    accumulate(&mut grads, *a, &g);
                    let gb = reduce_broadcast(&g, self.nodes[*a].shape.as_slice(), *bc);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Mul { a, b, bc } => {
                    let (ta, tb) = (&eval.values[*a], &eval.values[*b]);
                    let ga = apply_broadcast_grad(&g, tb, ta.shape(), *bc);
                    accumulate(&mut grads, *a, &ga);
                    let gxa: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                    let gb = reduce_broadcast(&gxa, ta.shape(), *bc);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Relu { a } => {
                    let ta = &eval.values[*a];
                    let da: Vec<f64> = g
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Exp { a } => {
                    let y = &eval.values[id];
                    let da: Vec<f64> = g.iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Log { a } => {
                    let ta = &eval.values[*a];
                    let da: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Sigmoid { a } => {
                    let y = &eval.values[id];
                    let da: Vec<f64> = g
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Softmax { a, axis } => {
                    let y = &eval.values[id];
                    let da = softmax_backward(y, &g, *axis);
                    accumulate(&mut grads, *a, &da);
                }
                Op::SumAxis { a, axis } => {
                    let sa = &self.nodes[*a].shape;
                    let (r, c) = (sa[0], sa[1]);
                    let mut da = vec![0.0; r * c];
                    if *axis == 0 {
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = g[j];
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = g[i];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::SumAll { a } => {
                    let n: usize = self.nodes[*a].shape.iter().product();
                    let da = vec![g[0]; n];
                    accumulate(&mut grads, *a, &da);
                }
                Op::Concat { a, b, axis } => {
                    let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                    let (da, db) = split_concat_grad(&g, sa, sb, *axis);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::SampleGaussian { mean, stddev } => {
                    accumulate(&mut grads, *mean, &g);
                    let eps = &eval.noises[&id];
                    let ds: Vec<f64> = g.iter().zip(eps.data()).map(|(gv, ev)| gv * ev).collect();
                    accumulate(&mut grads, *stddev, &ds);
                }
            }
        }

        let mut by_param = BTreeMap::new();
        for (name, &nid) in &self.params {
            let shape = self.nodes[nid].shape.clone();
            let t = match grads[nid].take() {
                Some(data) => {
                    let t = Tensor::new(shape, data)?;
                    if !t.all_finite() {
                        return Err(CoreError::NonFinite {
                            node: self.node_label(nid),
                        });
                    }
                    t
                }
                None => Tensor::zeros(&shape),
            };
            by_param.insert(name.clone(), t);
        }
        let mut by_input = BTreeMap::new();
        for (name, &nid) in &self.inputs {
            let shape = self.nodes[nid].shape.clone();
            let t = match grads[nid].take() {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(&shape),
            };
            by_input.insert(name.clone(), t);
        }

        Ok(Gradients {
            params: by_param,
            inputs: by_input,
        })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + crate::fmath::exp(-x))
    } else {
        let e = crate::fmath::exp(x);
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut grads[id] {
        Some(g) => {
            for (gv, dv) in g.iter_mut().zip(delta) {
                *gv += dv;
            }
        }
        None => grads[id] = Some(delta.to_vec()),
    }
}

fn apply_broadcast(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let ad = a.data();
    let bd = b.data();
    match bc {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = bd[0];
            ad.iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::Row => {
            let c = a.shape()[1];
            ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect()
        }
        Broadcast::Col => {
            let c = a.shape()[1];
            ad.iter().enumerate().map(|(i, &x)| f(x, bd[i / c])).collect()
        }
    }
}

/// Gradient of `a` in `a op b`: the incoming gradient times `b` expanded to
/// `a`'s shape (multiplication), used with `bc` describing how `b` was
/// broadcast.
fn apply_broadcast_grad(g: &[f64], b: &Tensor, a_shape: &[usize], bc: Broadcast) -> Vec<f64> {
    let bd = b.data();
    match bc {
        Broadcast::Same => g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect(),
        Broadcast::Scalar => {
            let y = bd[0];
            g.iter().map(|gv| gv * y).collect()
        }
        Broadcast::Row => {
            let c = a_shape[1];
            g.iter().enumerate().map(|(i, gv)| gv * bd[i % c]).collect()
        }
        Broadcast::Col => {
            let c = a_shape[1];
            g.iter().enumerate().map(|(i, gv)| gv * bd[i / c]).collect()
        }
    }
}

/// Reduces a full-shape gradient back to the broadcast operand's shape by
/// summing over the repeated positions.
fn reduce_broadcast(g: &[f64], a_shape: &[usize], bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let c = a_shape[1];
            let mut out = vec![0.0; c];
            for (i, gv) in g.iter().enumerate() {
                out[i % c] += gv;
            }
            out
        }
        Broadcast::Col => {
            let c = a_shape[1];
            let r = a_shape[0];
            let mut out = vec![0.0; r];
            for (i, gv) in g.iter().enumerate() {
                out[i / c] += gv;
            }
            out
        }
    }
}

fn softmax_2d(t: &Tensor, axis: usize) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; r * c];
    let (slices, len, stride, step) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
    for s in 0..slices {
        let base = s * stride;
        let mut max = f64::NEG_INFINITY;
        for i in 0..len {
            max = max.max(d[base + i * step]);
        }
        let mut sum = 0.0;
        for i in 0..len {
            let e = crate::fmath::exp(d[base + i * step] - max);
            out[base + i * step] = e;
            sum += e;
        }
        for i in 0..len {
            out[base + i * step] /= sum;
        }
    }
    out
}

fn softmax_backward(y: &Tensor, g: &[f64], axis: usize) -> Vec<f64> {
    let (r, c) = (y.shape()[0], y.shape()[1]);
    let yd = y.data();
    let mut out = vec![0.0; r * c];
    let (slices, len, stride, step) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
    for s in 0..slices {
        let base = s * stride;
        let mut dot = 0.0;
        for i in 0..len {
            let idx = base + i * step;
            dot += g[idx] * yd[idx];
        }
        for i in 0..len {
            let idx = base + i * step;
            out[idx] = yd[idx] * (g[idx] - dot);
        }
    }
    out
}

fn concat_2d(a: &Tensor, b: &Tensor, axis: usize) -> Vec<f64> {
    if axis == 0 {
        let mut out = a.data().to_vec();
        out.extend_from_slice(b.data());
        out
    } else {
        let (r, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
        }
        out
    }
}

fn split_concat_grad(g: &[f64], sa: &[usize], sb: &[usize], axis: usize) -> (Vec<f64>, Vec<f64>) {
    if axis == 0 {
        let na = sa[0] * sa[1];
        (g[..na].to_vec(), g[na..].to_vec())
    } else {
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut da = Vec::with_capacity(r * ca);
        let mut db = Vec::with_capacity(r * cb);
        for i in 0..r {
            let base = i * (ca + cb);
            da.extend_from_slice(&g[base..base + ca]);
            db.extend_from_slice(&g[base + ca..base + ca + cb]);
        }
        (da, db)
    }
}
