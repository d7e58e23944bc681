//! Central finite-difference checks of tape gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps gradients that are
/// numerically zero from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval<F>(f: &F, store: &ParamStore, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, store, &ids)?;
    Ok(g.value(out).item())
}

/// Largest relative error between tape gradients and central differences,
/// over every input element and every parameter value of `store`.
pub fn max_gradient_error<F>(f: F, store: &ParamStore, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, store, &ids)?;
    let grads = g.backward(out)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    grads.accumulate_into(&mut analytic_store)?;

    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[i] += step;
            let up = eval(&f, store, &probe)?;
            probe[k].data_mut()[i] -= 2.0 * step;
            let down = eval(&f, store, &probe)?;
            worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * step)));
        }
    }
    for pid in store.ids().collect::<Vec<_>>() {
        for i in 0..store.value(pid).len() {
            let mut probe = store.clone();
            probe.value_mut(pid).data_mut()[i] += step;
            let up = eval(&f, &probe, inputs)?;
            probe.value_mut(pid).data_mut()[i] -= 2.0 * step;
            let down = eval(&f, &probe, inputs)?;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic_store.grad(pid).data()[i], numeric));
        }
    }
    Ok(worst)
}

type CheckFn = Box<dyn Fn(&mut Graph, &ParamStore, &[NodeId]) -> Result<NodeId>>;

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct adjoint.
pub fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    use rand::Rng;
    let shape = g.value(y).shape().to_vec();
    let mut rng = crate::rng::stream(seed);
    let w = (0..g.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.input(Tensor::new(shape, w)?)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    positive: bool,
    build: fn(&mut ParamStore, &mut crate::rng::StreamRng) -> Result<CheckFn>,
}

fn op(f: fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> Result<CheckFn> {
    Ok(Box::new(move |g, _, x| {
        let y = f(g, x)?;
        weighted_sum(g, y, 7)
    }))
}

fn cases() -> Vec<Case> {
    use super::layers::{Conv2d, Dense, EncoderBlock, LayerNorm, MultiHeadAttention};
    let m = |r: usize, c: usize| vec![r, c];
    vec![
        Case { name: "matmul", shapes: vec![m(3, 4), m(4, 2)], positive: false, build: |_, _| op(|g, x| g.matmul(x[0], x[1])) },
        Case { name: "add_bias", shapes: vec![m(3, 4), vec![4]], positive: false, build: |_, _| op(|g, x| g.add_bias(x[0], x[1])) },
        Case { name: "mul_row", shapes: vec![m(3, 4), vec![4]], positive: false, build: |_, _| op(|g, x| g.mul_row(x[0], x[1])) },
        Case { name: "add", shapes: vec![m(2, 3), m(2, 3)], positive: false, build: |_, _| op(|g, x| g.add(x[0], x[1])) },
        Case { name: "sub", shapes: vec![m(2, 3), m(2, 3)], positive: false, build: |_, _| op(|g, x| g.sub(x[0], x[1])) },
        Case { name: "mul", shapes: vec![m(2, 3), m(2, 3)], positive: false, build: |_, _| op(|g, x| g.mul(x[0], x[1])) },
        Case { name: "scale", shapes: vec![m(2, 3)], positive: false, build: |_, _| op(|g, x| g.scale(x[0], -1.7)) },
        Case { name: "add_scalar", shapes: vec![m(2, 3)], positive: false, build: |_, _| op(|g, x| g.add_scalar(x[0], 0.4)) },
        Case { name: "relu", shapes: vec![m(3, 3)], positive: false, build: |_, _| op(|g, x| g.relu(x[0])) },
        Case { name: "tanh", shapes: vec![m(3, 3)], positive: false, build: |_, _| op(|g, x| g.tanh(x[0])) },
        Case { name: "softplus", shapes: vec![m(3, 3)], positive: false, build: |_, _| op(|g, x| g.softplus(x[0])) },
        Case { name: "exp", shapes: vec![m(3, 3)], positive: false, build: |_, _| op(|g, x| g.exp(x[0])) },
        Case { name: "log", shapes: vec![m(3, 3)], positive: true, build: |_, _| op(|g, x| g.log(x[0])) },
        Case { name: "square", shapes: vec![m(3, 3)], positive: false, build: |_, _| op(|g, x| g.square(x[0])) },
        Case { name: "sum", shapes: vec![m(3, 3)], positive: false, build: |_, _| op(|g, x| g.sum(x[0])) },
        Case { name: "mean", shapes: vec![m(3, 3)], positive: false, build: |_, _| op(|g, x| g.mean(x[0])) },
        Case { name: "mean_rows", shapes: vec![m(4, 3)], positive: false, build: |_, _| op(|g, x| g.mean_rows(x[0])) },
        Case { name: "repeat_rows", shapes: vec![m(1, 3)], positive: false, build: |_, _| op(|g, x| g.repeat_rows(x[0], 4)) },
        Case { name: "softmax_rows", shapes: vec![m(3, 4)], positive: false, build: |_, _| op(|g, x| g.softmax_rows(x[0])) },
        Case { name: "layer_norm", shapes: vec![m(3, 5)], positive: false, build: |_, _| op(|g, x| g.layer_norm(x[0], 1e-5)) },
        Case { name: "transpose", shapes: vec![m(2, 5)], positive: false, build: |_, _| op(|g, x| g.transpose(x[0])) },
        Case { name: "reshape", shapes: vec![m(2, 6)], positive: false, build: |_, _| op(|g, x| g.reshape(x[0], &[3, 4])) },
        Case { name: "concat_cols", shapes: vec![m(3, 2), m(3, 3)], positive: false, build: |_, _| op(|g, x| g.concat_cols(&[x[0], x[1]])) },
        Case { name: "slice_cols", shapes: vec![m(3, 5)], positive: false, build: |_, _| op(|g, x| g.slice_cols(x[0], 1, 4)) },
        Case {
            name: "conv2d",
            shapes: vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]],
            positive: false,
            build: |_, _| op(|g, x| g.conv2d(x[0], x[1], x[2])),
        },
        Case { name: "avg_pool", shapes: vec![vec![2, 2, 4, 4]], positive: false, build: |_, _| op(|g, x| g.avg_pool(x[0], 2)) },
        Case {
            name: "global_avg_pool",
            shapes: vec![vec![2, 3, 3, 3]],
            positive: false,
            build: |_, _| op(|g, x| g.global_avg_pool(x[0])),
        },
        Case {
            name: "dense_layer",
            shapes: vec![m(3, 4)],
            positive: false,
            build: |s, r| {
                let d = Dense::new(s, "d", 4, 3, r)?;
                Ok(Box::new(move |g, s, x| {
                    let y = d.forward(g, s, x[0])?;
                    weighted_sum(g, y, 7)
                }))
            },
        },
        Case {
            name: "conv_layer",
            shapes: vec![vec![1, 2, 4, 4]],
            positive: false,
            build: |s, r| {
                let c = Conv2d::new(s, "c", 2, 2, 3, r)?;
                Ok(Box::new(move |g, s, x| {
                    let y = c.forward(g, s, x[0])?;
                    weighted_sum(g, y, 7)
                }))
            },
        },
        Case {
            name: "layer_norm_layer",
            shapes: vec![m(3, 4)],
            positive: false,
            build: |s, _| {
                let l = LayerNorm::new(s, "ln", 4)?;
                Ok(Box::new(move |g, s, x| {
                    let y = l.forward(g, s, x[0])?;
                    weighted_sum(g, y, 7)
                }))
            },
        },
        Case {
            name: "attention",
            shapes: vec![m(2, 4)],
            positive: false,
            build: |s, r| {
                let a = MultiHeadAttention::new(s, "a", 4, 2, r)?;
                Ok(Box::new(move |g, s, x| {
                    let y = a.forward(g, s, x[0], x[0], x[0])?;
                    weighted_sum(g, y, 7)
                }))
            },
        },
        Case {
            name: "encoder_block",
            shapes: vec![m(3, 4)],
            positive: false,
            build: |s, r| {
                let b = EncoderBlock::new(s, "b", 4, 2, r)?;
                Ok(Box::new(move |g, s, x| {
                    let y = b.forward(g, s, x[0])?;
                    weighted_sum(g, y, 7)
                }))
            },
        },
    ]
}

/// Worst relative gradient error per op or layer over `draws` random instances.
pub fn check_all_ops(draws: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    use rand::Rng;
    let mut report = Vec::new();
    for (k, case) in cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for d in 0..draws {
            let mut rng = crate::rng::derived_stream(seed, &[k as u64, d as u64]);
            let mut store = ParamStore::new(seed);
            let f = (case.build)(&mut store, &mut rng)?;
            let inputs = case
                .shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    let data = (0..n)
                        .map(|_| if case.positive { rng.gen_range(0.2..2.0) } else { rng.gen_range(-1.5..1.5) })
                        .collect();
                    Tensor::new(s.clone(), data)
                })
                .collect::<Result<Vec<_>>>()?;
            worst = worst.max(max_gradient_error(&f, &store, &inputs, FD_STEP)?);
        }
        report.push((case.name.to_string(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_differences() {
        for (name, err) in check_all_ops(20, 31).unwrap() {
            assert!(err < 1e-4, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-9, 0.0) < 1e-5);
    }
}
