use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::{Graph, NodeId, Tensor};

use super::spec::{Arch, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A classifier: its spec and named parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

/// Parameter names and shapes in creation order.
pub(crate) fn param_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let (c, h, w) = spec.input_shape;
    let flat = match &spec.arch {
        Arch::Mlp { hidden } => {
            let mut fan_in = c * h * w;
            for (i, &width) in hidden.iter().enumerate() {
                out.push((format!("fc{i}.weight"), vec![fan_in, width]));
                out.push((format!("fc{i}.bias"), vec![width]));
                fan_in = width;
            }
            fan_in
        }
        Arch::TinyCnn { channels, kernel } => {
            let (mut cin, mut h, mut w) = (c, h, w);
            for (i, &cout) in channels.iter().enumerate() {
                out.push((format!("conv{i}.weight"), vec![cout, cin, *kernel, *kernel]));
                out.push((format!("conv{i}.bias"), vec![cout]));
                cin = cout;
                if h % 2 == 0 && w % 2 == 0 {
                    h /= 2;
                    w /= 2;
                }
            }
            cin * h * w
        }
    };
    out.push(("out.weight".into(), vec![flat, spec.classes]));
    out.push(("out.bias".into(), vec![spec.classes]));
    out
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        // linear [in, out]
        2 => shape[0],
        // conv [out, in, k, k]
        4 => shape[1] * shape[2] * shape[3],
        _ => 1,
    }
}

/// Deterministic uniform fan-in initialization: every weight and bias of a
/// layer is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = param_layout(spec);
    let mut params = Vec::with_capacity(layout.len());
    let mut bound = 1.0;
    for (name, shape) in layout {
        if name.ends_with("weight") {
            bound = 1.0 / (fan_in(&shape) as f64).sqrt();
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        params.push(Param {
            name,
            value: Tensor::new(&shape, data)?,
        });
    }
    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

impl Model {
    /// Assemble a model from explicit parameters; names and shapes must match
    /// the spec's layout exactly.
    pub fn from_params(spec: ModelSpec, params: Vec<Param>) -> Result<Self> {
        spec.validate()?;
        let layout = param_layout(&spec);
        if layout.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.value.all_finite() {
                return Err(Error::Incompatible(format!("parameter `{}` is not finite", p.name)));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register the parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// `params[i] -= lr * grads[i]`
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return contract("gradient count does not match parameter count");
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.value.axpy(-lr, g)?;
        }
        Ok(())
    }

    /// Check `x` is `[C, H, W]` or `[N, C, H, W]` and return it as a batch.
    pub fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        let dims = self.spec.input_dims();
        match x.shape() {
            s if s == dims => x.reshape(&[1, dims[0], dims[1], dims[2]]),
            [_, rest @ ..] if rest == dims => Ok(x.clone()),
            s => Err(Error::Shape {
                op: "model input",
                left: s.to_vec(),
                right: dims.to_vec(),
            }),
        }
    }

    /// Logits `[N, K]` for a batch node `x: [N, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let n = g.value(x).shape()[0];
        let mut p = params.iter().copied();
        let mut next = || p.next().ok_or_else(|| Error::Contract("missing parameter node".into()));
        let mut h = x;
        match &self.spec.arch {
            Arch::Mlp { hidden } => {
                h = g.reshape(h, &[n, self.spec.input_len()])?;
                for _ in hidden {
                    let (w, b) = (next()?, next()?);
                    let z = g.matmul(h, w)?;
                    let z = g.bias_add(z, b)?;
                    h = g.relu(z);
                }
            }
            Arch::TinyCnn { channels, .. } => {
                for _ in channels {
                    let (w, b) = (next()?, next()?);
                    let z = g.conv2d(h, w)?;
                    let z = g.bias_add(z, b)?;
                    h = g.relu(z);
                    let s = g.value(h).shape();
                    if s[2] % 2 == 0 && s[3] % 2 == 0 {
                        h = g.avg_pool2(h)?;
                    }
                }
                let flat = g.value(h).len() / n;
                h = g.reshape(h, &[n, flat])?;
            }
        }
        let (w, b) = (next()?, next()?);
        let z = g.matmul(h, w)?;
        g.bias_add(z, b)
    }

    /// Raw logits for one image `[C, H, W]` (as `[K]`) or a batch (as `[N, K]`).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let single = x.rank() == 3;
        let batch = self.as_batch(x)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xi = g.constant(batch);
        let out = self.forward(&mut g, xi, &params)?;
        let v = g.value(out).clone();
        if single {
            v.reshape(&[self.spec.classes])
        } else {
            Ok(v)
        }
    }

    /// Log-probabilities via log-softmax, same layout as [`Model::logits`].
    pub fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::kernels::log_softmax(&self.logits(x)?)
    }

    /// Class probabilities (softmax of the logits).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.log_probs(x)?.map(f64::exp))
    }

    /// `d log p_target / dX` for one image `[C, H, W]`.
    pub fn grad_input(&self, x: &Tensor, target: usize) -> Result<Tensor> {
        if target >= self.spec.classes {
            return contract(format!(
                "target class {target} out of range for {} classes",
                self.spec.classes
            ));
        }
        let batch = self.as_batch(x)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xi = g.leaf(batch, true);
        let logits = self.forward(&mut g, xi, &params)?;
        let ls = g.log_softmax(logits)?;
        let picked = g.gather(ls, &[target])?;
        let root = g.sum(picked);
        let grad = g.backward(root, &[xi])?.remove(0);
        grad.reshape(x.shape())
    }
}
