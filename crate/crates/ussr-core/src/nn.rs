//! Small feed-forward building blocks on top of the graph primitives.
//!
//! A "linear" layer owns two parameters, `{prefix}.w` of shape
//! `[in, out]` and `{prefix}.b` of shape `[1, out]`. An MLP chains linear
//! layers with relu between them and no activation after the last.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

/// Applies `x @ w + b`, declaring the layer's parameters on first use.
pub fn linear(g: &mut Graph, prefix: &str, x: NodeId, in_dim: usize, out_dim: usize) -> Result<NodeId> {
    let w = g.param(&format!("{prefix}.w"), &[in_dim, out_dim])?;
    let b = g.param(&format!("{prefix}.b"), &[1, out_dim])?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Applies a chain of linear layers with relu between them. `dims` lists
/// every width including input and output, so `[8, 16, 4]` is two layers.
/// Layer parameters are `{prefix}.0.w`, `{prefix}.0.b`, `{prefix}.1.w`, ...
pub fn mlp(g: &mut Graph, prefix: &str, x: NodeId, dims: &[usize]) -> Result<NodeId> {
    let mut h = x;
    for l in 0..dims.len() - 1 {
        h = linear(g, &format!("{prefix}.{l}"), h, dims[l], dims[l + 1])?;
        if l + 1 < dims.len() - 1 {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Uniform(-lim, lim) with `lim = sqrt(6 / (in + out))`; biases start at 0.
pub fn init_linear(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, out_dim: usize) {
    let lim = crate::fmath::sqrt(6.0 / (in_dim + out_dim) as f64);
    let data: Vec<f64> = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-lim..lim))
        .collect();
    params.insert(
        &format!("{prefix}.w"),
        Tensor::new(alloc::vec![in_dim, out_dim], data).expect("init shape"),
    );
    params.insert(&format!("{prefix}.b"), Tensor::zeros(&[1, out_dim]));
}

pub fn init_mlp(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, dims: &[usize]) {
    for l in 0..dims.len() - 1 {
        init_linear(params, rng, &format!("{prefix}.{l}"), dims[l], dims[l + 1]);
    }
}

/// Parameter names an MLP of this shape declares, in layer order.
pub fn mlp_param_names(prefix: &str, dims: &[usize]) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..dims.len() - 1 {
        names.push(format!("{prefix}.{l}.w"));
        names.push(format!("{prefix}.{l}.b"));
    }
    names
}
