//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::sync::Arc;

use catse::filterbank::Filterbank;
use catse::model::Model;
use catse::objectives::{loss_classification_node, loss_separation_node, LossWeights};
use catse::scenegen::{draw_targets, synthetic_vocabulary, Dataset, SceneSpec, SourcePool, TargetMode};
use catse::separator::{HeadConfig, SeparatorConfig, Variant};
use catse::tensor::ops::BinaryOp;
use catse::tensor::{Graph, Tensor, Var};
use catse::trainer::example_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Ceiling on the norm-relative gradient error.
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_signal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nn) == 0.0 {
        0.0
    } else {
        diff / na.max(nn)
    }
}

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// Builds `op` on leaves holding `inputs`, reduces its output to a scalar
/// with a fixed random projection and returns the worst input's gradient
/// error against central differences.
pub fn op_error(inputs: &[Tensor], op: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor], track: bool| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = op(&mut g, &vars);
        (g, vars, out)
    };
    let (probe, _, out) = eval(inputs, false);
    let projection = random(probe.value(out).shape(), &mut rng);
    let loss_of = |g: &mut Graph, out: Var| {
        let p = g.leaf(projection.clone(), false);
        let prod = g.mul(out, p).unwrap();
        g.sum(prod)
    };

    let (mut g, vars, out) = eval(inputs, true);
    let loss = loss_of(&mut g, out);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let f = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let (mut g, _, out) = eval(&shifted, false);
                let l = loss_of(&mut g, out);
                g.value(l).item().unwrap()
            };
            *slot = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Every differentiable operator with seeded random inputs.
pub fn operator_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, rng);
    let fb = Arc::new(Filterbank::default());
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    cases.push((
        "conv dilation 2",
        vec![r(&[3, 9], &mut rng), r(&[4, 3, 3], &mut rng), r(&[4], &mut rng)],
        Box::new(|g, v| g.conv1d_causal(v[0], v[1], v[2], 2, 1).unwrap()),
    ));
    cases.push((
        "conv grouped",
        vec![r(&[4, 7], &mut rng), r(&[2, 2, 2], &mut rng), r(&[2], &mut rng)],
        Box::new(|g, v| g.conv1d_causal(v[0], v[1], v[2], 1, 2).unwrap()),
    ));
    cases.push((
        "conv depthwise",
        vec![r(&[5, 12], &mut rng), r(&[5, 1, 3], &mut rng), r(&[5], &mut rng)],
        Box::new(|g, v| g.conv1d_causal(v[0], v[1], v[2], 4, 5).unwrap()),
    ));
    cases.push((
        "fc vector",
        vec![r(&[6], &mut rng), r(&[4, 6], &mut rng), r(&[4], &mut rng)],
        Box::new(|g, v| g.fully_connected(v[0], v[1], v[2]).unwrap()),
    ));
    cases.push((
        "fc batch",
        vec![r(&[3, 6], &mut rng), r(&[4, 6], &mut rng), r(&[4], &mut rng)],
        Box::new(|g, v| g.fully_connected(v[0], v[1], v[2]).unwrap()),
    ));
    let x = r(&[4, 5], &mut rng);
    cases.push(("relu", vec![x.clone()], Box::new(|g, v| g.relu(v[0]))));
    cases.push(("leaky relu", vec![x.clone()], Box::new(|g, v| g.leaky_relu(v[0], 0.01))));
    cases.push(("sigmoid", vec![x.clone()], Box::new(|g, v| g.sigmoid(v[0]))));
    cases.push((
        "prelu",
        vec![x, Tensor::scalar(0.25)],
        Box::new(|g, v| g.prelu(v[0], v[1]).unwrap()),
    ));
    cases.push((
        "cgln",
        vec![r(&[3, 6], &mut rng), r(&[3], &mut rng), r(&[3], &mut rng)],
        Box::new(|g, v| g.cgln(v[0], v[1], v[2]).unwrap()),
    ));
    let x = r(&[3, 8], &mut rng);
    cases.push(("maxpool", vec![x.clone()], Box::new(|g, v| g.maxpool1d(v[0], 3).unwrap())));
    cases.push(("mean over time", vec![x.clone()], Box::new(|g, v| g.mean_time(v[0]).unwrap())));
    cases.push(("scale", vec![x.clone()], Box::new(|g, v| g.scale(v[0], -1.5))));
    cases.push(("sum", vec![x], Box::new(|g, v| g.sum(v[0]))));
    let a = r(&[3, 4], &mut rng);
    let b = r(&[3, 4], &mut rng);
    let c = r(&[3], &mut rng);
    cases.push((
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(|g, v| g.binary(v[0], v[1], BinaryOp::Mul).unwrap()),
    ));
    cases.push((
        "add",
        vec![a.clone(), b],
        Box::new(|g, v| g.binary(v[0], v[1], BinaryOp::Add).unwrap()),
    ));
    cases.push((
        "mul channel broadcast",
        vec![c.clone(), a.clone()],
        Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
    ));
    cases.push((
        "add channel broadcast",
        vec![a.clone(), c],
        Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
    ));
    cases.push((
        "concat channels",
        vec![a.clone(), r(&[2, 4], &mut rng)],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 0).unwrap()),
    ));
    cases.push((
        "concat time",
        vec![a, r(&[3, 2], &mut rng)],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
    ));
    cases.push((
        "synthesize",
        vec![r(&[258, 3], &mut rng)],
        Box::new(move |g, v| g.synthesize(v[0], fb.clone()).unwrap()),
    ));
    let reference = random_signal(40, &mut rng);
    let est = Tensor::from_vec(reference.iter().map(|x| x + rng.gen_range(-0.5..0.5)).collect());
    cases.push((
        "L_s",
        vec![est],
        Box::new(move |g, v| loss_separation_node(g, v[0], &reference).unwrap()),
    ));
    cases.push((
        "L_c",
        vec![r(&[6], &mut rng)],
        Box::new(|g, v| {
            let p = g.sigmoid(v[0]);
            loss_classification_node(g, p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap()
        }),
    ));
    cases
}

/// A small model configuration that keeps finite differences cheap.
pub fn small_config(variant: Variant, n_classes: usize) -> SeparatorConfig {
    SeparatorConfig {
        variant,
        n_classes,
        n_stacks: 2,
        blocks_per_stack: 2,
        hidden_channels: 6,
        heads: HeadConfig {
            channels: 4,
            blocks: 2,
            kernel: 3,
            pool: 2,
            fc_hidden: 5,
        },
        ..Default::default()
    }
}

/// End-to-end loss gradient error of a small model, measured on three random
/// coordinates of every parameter array. Returns the error and the largest
/// numeric gradient magnitude seen.
pub fn model_error(variant: Variant, lambda: f64) -> (f64, f64) {
    let spec = SceneSpec {
        min_fg_classes: 2,
        max_fg_classes: 3,
        min_fg_duration_s: 0.1,
        max_fg_duration_s: 0.2,
        scene_duration_s: 0.3,
        ..Default::default()
    };
    let data = Dataset::generate(5, 1, synthetic_vocabulary(4).unwrap(), spec, SourcePool::Synthetic).unwrap();
    let scene = data.scene(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let draw = draw_targets(&scene, TargetMode::Multi, &mut rng).unwrap();
    let model = Model::init(small_config(variant, 4), 3).unwrap();
    let weights = LossWeights::new(lambda).unwrap();
    let (_, grads) = example_gradients(&model, &scene, &draw, weights).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, t) in model.params().iter() {
        for _ in 0..3 {
            let j = rng.gen_range(0..t.numel());
            let f = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(name).unwrap().data_mut()[j] += delta;
                example_gradients(&m, &scene, &draw, weights).unwrap().0.total
            };
            numeric.push((f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP));
            analytic.push(grads.get(name).unwrap().data()[j]);
        }
    }
    let peak = numeric.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    (relative_error(&analytic, &numeric), peak)
}
