//! Shared helpers for the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use leba_core::nets::Model;
use leba_core::{Graph, NodeId, Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[0.1, 1], so relu kinks are far from every input.
pub fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

pub type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids).unwrap();
    g.value(root).item()
}

/// Max relative error between `backward` and central differences of the
/// scalar built by `build`, over every element of every input.
pub fn gradcheck(inputs: &[Tensor], h: f64, build: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids).unwrap();
    let analytic = g.backward(root, &ids).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], fd));
        }
    }
    worst
}

/// First-order gradient of the built scalar with respect to input 0, dotted
/// with `dir`.
fn directional(inputs: &[Tensor], dir: &Tensor, build: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids).unwrap();
    let gx = g.backward(root, &ids[..1]).unwrap().remove(0);
    gx.dot(dir).unwrap()
}

/// Derivatives of `∇_{x0} f · dir` with respect to every input, taken through
/// `grad_as_node`, against central differences of first-order gradients.
pub fn double_gradcheck(inputs: &[Tensor], dir: &Tensor, h: f64, build: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids).unwrap();
    let gx = g.grad_as_node(root, ids[0]).unwrap();
    let d = g.constant(dir.clone());
    let s = g.dot(gx, d).unwrap();
    let analytic = g.backward(s, &ids).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (directional(&plus, dir, build) - directional(&minus, dir, build)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], fd));
        }
    }
    worst
}

/// `Σ_n log softmax(model(x))[n, labels[n]]` with the model's parameters
/// taken from `params` (graph leaves in parameter order).
pub fn log_target(model: &Model, g: &mut Graph, x: NodeId, params: &[NodeId], labels: &[usize]) -> Result<NodeId> {
    let logits = model.forward(g, x, params)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.gather(ls, labels)?;
    Ok(g.sum(picked))
}

/// Inputs for [`gradcheck`] over a model: the batch first, then every
/// parameter.
pub fn model_inputs(model: &Model, x: &Tensor) -> Vec<Tensor> {
    std::iter::once(x.clone())
        .chain(model.params().iter().map(|p| p.value.clone()))
        .collect()
}

pub type Op = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: Op,
}

pub fn case(name: &'static str, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static) -> Case {
    Case {
        name,
        inputs,
        op: Box::new(op),
    }
}

/// Every public primitive with inputs away from its kinks and poles.
pub fn primitives() -> Vec<Case> {
    let mut r = rng(11);
    let mut t = |shape: &[usize]| off_kink(&mut r, shape);
    let pos = |t: Tensor| t.map(|v| v.abs() + 0.5);
    vec![
        case("add", vec![t(&[2, 3]), t(&[2, 3])], |g, x| g.add(x[0], x[1])),
        case("sub", vec![t(&[2, 3]), t(&[2, 3])], |g, x| g.sub(x[0], x[1])),
        case("mul", vec![t(&[2, 3]), t(&[2, 3])], |g, x| g.mul(x[0], x[1])),
        case("neg", vec![t(&[4])], |g, x| Ok(g.neg(x[0]))),
        case("scale", vec![t(&[4])], |g, x| Ok(g.scale(x[0], 1.7))),
        case("add_scalar", vec![t(&[4])], |g, x| Ok(g.add_scalar(x[0], 0.3))),
        case("recip", vec![pos(t(&[5]))], |g, x| Ok(g.recip(x[0]))),
        case("log", vec![pos(t(&[5]))], |g, x| Ok(g.log(x[0]))),
        case("exp", vec![t(&[5])], |g, x| Ok(g.exp(x[0]))),
        case("relu", vec![t(&[6])], |g, x| Ok(g.relu(x[0]))),
        case("matmul", vec![t(&[2, 3]), t(&[3, 4])], |g, x| g.matmul(x[0], x[1])),
        case("transpose", vec![t(&[2, 3])], |g, x| g.transpose(x[0])),
        case("conv2d", vec![t(&[2, 2, 5, 5]), t(&[3, 2, 3, 3])], |g, x| g.conv2d(x[0], x[1])),
        case("bias_broadcast", vec![t(&[3])], |g, x| g.bias_broadcast(x[0], &[2, 3, 2, 2])),
        case("bias_sum", vec![t(&[2, 3, 2, 2])], |g, x| g.bias_sum(x[0])),
        case("bias_add", vec![t(&[2, 3, 4]), t(&[3])], |g, x| g.bias_add(x[0], x[1])),
        case("avg_pool2", vec![t(&[1, 2, 4, 6])], |g, x| g.avg_pool2(x[0])),
        case("log_softmax", vec![t(&[3, 5])], |g, x| g.log_softmax(x[0])),
        case("row_sum", vec![t(&[3, 4])], |g, x| g.row_sum(x[0])),
        case("row_broadcast", vec![t(&[3])], |g, x| g.row_broadcast(x[0], 4)),
        case("sum", vec![t(&[2, 3])], |g, x| Ok(g.sum(x[0]))),
        case("mean", vec![t(&[2, 3])], |g, x| Ok(g.mean(x[0]))),
        case("broadcast", vec![t(&[])], |g, x| g.broadcast(x[0], &[2, 3])),
        case("gather", vec![t(&[3, 4])], |g, x| g.gather(x[0], &[1, 0, 3])),
        case("scatter", vec![t(&[3])], |g, x| g.scatter(x[0], &[2, 0, 1], 4)),
        case("reshape", vec![t(&[2, 6])], |g, x| g.reshape(x[0], &[3, 4])),
        case("dot", vec![t(&[2, 3]), t(&[2, 3])], |g, x| g.dot(x[0], x[1])),
        case("mse", vec![t(&[2, 3]), t(&[2, 3])], |g, x| g.mse(x[0], x[1])),
    ]
}

/// `Σ w ⊙ op(x)²` with fixed random `w`: a scalar with non-zero second
/// derivatives through every primitive.
pub fn squared_readout(c: &Case, seed: u64) -> impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + '_ {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = c.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (c.op)(&mut g, &ids).unwrap();
    let w = rand_tensor(&mut rng(seed), g.value(out).shape(), -1.0, 1.0);
    move |g: &mut Graph, x: &[NodeId]| {
        let out = (c.op)(g, x)?;
        let sq = g.mul(out, out)?;
        let w = g.constant(w.clone());
        g.dot(sq, w)
    }
}

pub fn composite(g: &mut Graph, x: &[NodeId]) -> Result<NodeId> {
    let z = g.matmul(x[0], x[1])?;
    let z = g.scale(z, 0.3);
    let e = g.exp(z);
    let s = g.row_sum(e)?;
    let s = g.add_scalar(s, 1.0);
    let r = g.recip(s);
    let rb = g.row_broadcast(r, 5)?;
    let t = g.transpose(x[2])?;
    let m = g.mul(rb, t)?;
    let ls = g.log_softmax(m)?;
    let picked = g.gather(ls, &[4, 0, 2])?;
    let a = g.sum(picked);
    let h = g.relu(m);
    let b = g.mse(h, rb)?;
    g.sub(a, b)
}

pub fn composite_inputs(seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    vec![off_kink(&mut r, &[3, 4]), off_kink(&mut r, &[4, 5]), off_kink(&mut r, &[5, 3])]
}
