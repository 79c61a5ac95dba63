//! Shared test helpers: central-difference gradient checking.

use std::collections::BTreeMap;

use ussr_core::{Graph, NodeId, ParamSet, Tensor};

/// Largest relative error between analytic and central-difference gradients
/// over every parameter entry. Noise drawn on the first forward is replayed
/// for every perturbed evaluation so the finite difference sees the same
/// function.
pub fn fd_gradcheck(
    graph: &Graph,
    params: &ParamSet,
    inputs: &BTreeMap<String, Tensor>,
    output: NodeId,
    h: f64,
) -> f64 {
    let mut rng = ussr_core::rng::seeded(1234, ussr_core::rng::stream::NOISE);
    let eval = graph.forward(params, inputs, &mut rng).expect("forward");
    let noises = eval.noises().clone();
    let grads = graph.backward(&eval, output, None).expect("backward");

    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let base = params.get(&name).unwrap().clone();
        let analytic = &grads.params[&name];
        for i in 0..base.len() {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] = base.data()[i] + h;
            let f_plus = graph
                .forward_replay(&plus, inputs, &noises)
                .expect("forward +h")
                .value(output)
                .item();

            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] = base.data()[i] - h;
            let f_minus = graph
                .forward_replay(&minus, inputs, &noises)
                .expect("forward -h")
                .value(output)
                .item();

            let fd = (f_plus - f_minus) / (2.0 * h);
            let ad = analytic.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
