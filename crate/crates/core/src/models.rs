//! Small differentiable classifiers over `[C, H, W]` images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        weight: String,
        bias: Option<String>,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    Linear {
        weight: String,
        bias: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<Layer>,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::contract(format!("duplicate parameter name {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    /// Same names and shapes as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn expect_congruent(&self, other: &Self, what: &str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract(format!(
                "{what}: {} parameters vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::contract(format!("{what}: key {na:?} vs {nb:?}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::contract(format!(
                    "{what}: {na:?} has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    arch: Architecture,
    params: ParamSet<T>,
}

/// Parameter leaves of one model registered on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Vec<NodeId>,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// One node per layer boundary (flatten excluded), ending with the logits.
    pub activations: Vec<NodeId>,
    pub logits: NodeId,
}

/// First-layer kernel `[C, kh, kw]` with per-channel value ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDump {
    pub name: String,
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
}

impl<T: Real> Model<T> {
    pub fn from_parts(arch: Architecture, params: ParamSet<T>) -> Result<Self> {
        let model = Self { arch, params };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.arch.num_classes == 0 {
            return Err(Error::contract("num_classes must be positive"));
        }
        let mut used = Vec::new();
        for layer in &self.arch.layers {
            let names: Vec<&String> = match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    std::iter::once(weight).chain(bias.iter()).collect()
                }
                _ => vec![],
            };
            for n in names {
                if self.params.get(n).is_none() {
                    return Err(Error::contract(format!("layer refers to missing parameter {n:?}")));
                }
                used.push(n.as_str());
            }
        }
        if let Some(extra) = self.params.names().find(|n| !used.contains(n)) {
            return Err(Error::contract(format!("parameter {extra:?} is not used by any layer")));
        }
        // A dry run on one zero image checks every shape.
        let [c, h, w] = self.arch.input_shape;
        let logits = self.forward(&Tensor::zeros(&[1, c, h, w]))?;
        logits.expect_shape("model", &[1, self.arch.num_classes])
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Registers every parameter as a graph leaf, in `ParamSet` order.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            params: self.params.tensors().map(|t| g.parameter(t.clone())).collect(),
        }
    }

    fn param_node(&self, bound: &Bound, name: &str) -> NodeId {
        let idx = self
            .params
            .names()
            .position(|n| n == name)
            .expect("validated parameter name");
        bound.params[idx]
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> Result<Trace> {
        let [c, h, w] = self.arch.input_shape;
        match g.shape(x) {
            [_, xc, xh, xw] if [*xc, *xh, *xw] == [c, h, w] => {}
            s => {
                return Err(Error::shape(
                    "forward",
                    format!("model expects [B, {c}, {h}, {w}], got {s:?}"),
                ))
            }
        }
        let mut cur = x;
        let mut activations = Vec::new();
        for layer in &self.arch.layers {
            cur = match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let k = self.param_node(bound, weight);
                    let y = g.conv2d(cur, k, *stride, *padding)?;
                    match bias {
                        Some(b) => g.add_channel_bias(y, self.param_node(bound, b))?,
                        None => y,
                    }
                }
                Layer::Relu => g.relu(cur),
                Layer::Flatten => {
                    let s = g.shape(cur).to_vec();
                    let rows = s[0];
                    let width = s[1..].iter().product::<usize>();
                    g.reshape(cur, &[rows, width])?
                }
                Layer::Linear { weight, bias } => {
                    let wn = self.param_node(bound, weight);
                    let bn = bias.as_ref().map(|b| self.param_node(bound, b));
                    g.linear(cur, wn, bn)?
                }
            };
            if !matches!(layer, Layer::Flatten) {
                activations.push(cur);
            }
        }
        Ok(Trace {
            logits: cur,
            activations,
        })
    }

    /// Binds parameters and runs one forward pass.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId) -> Result<(Bound, Trace)> {
        let bound = self.bind(g);
        let trace = self.forward_bound(g, &bound, x)?;
        Ok((bound, trace))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (_, trace) = self.forward_graph(&mut g, xn)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Activations at every layer boundary in propagation order; the last is the logits.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (_, trace) = self.forward_graph(&mut g, xn)?;
        Ok(trace
            .activations
            .iter()
            .map(|&id| g.value(id).clone())
            .collect())
    }

    /// Human-readable names for the entries returned by [`Model::features`].
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let (mut conv, mut relu, mut lin) = (0, 0, 0);
        for layer in &self.arch.layers {
            match layer {
                Layer::Conv2d { .. } => {
                    conv += 1;
                    names.push(format!("conv{conv}"));
                }
                Layer::Relu => {
                    relu += 1;
                    names.push(format!("relu{relu}"));
                }
                Layer::Flatten => {}
                Layer::Linear { .. } => {
                    lin += 1;
                    names.push(format!("linear{lin}"));
                }
            }
        }
        if let Some(last) = names.last_mut() {
            *last = "logits".to_string();
        }
        names
    }

    /// Kernels of the first convolution, one entry per output filter.
    pub fn dump_filters(&self) -> Result<Vec<FilterDump>> {
        let weight = self
            .arch
            .layers
            .iter()
            .find_map(|l| match l {
                Layer::Conv2d { weight, .. } => Some(weight),
                _ => None,
            })
            .ok_or_else(|| Error::contract("model has no convolution layer"))?;
        let k = self.params.get(weight).expect("validated parameter name");
        let [f, c, kh, kw] = crate::kernels::dims4(k, "dump_filters")?;
        let per = c * kh * kw;
        Ok((0..f)
            .map(|i| {
                let values: Vec<f64> = k.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let (channel_min, channel_max) = (0..c)
                    .map(|ch| {
                        let plane = &values[ch * kh * kw..(ch + 1) * kh * kw];
                        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        (lo, hi)
                    })
                    .unzip();
                FilterDump {
                    name: format!("{weight}/filter{i}"),
                    shape: [c, kh, kw],
                    values,
                    channel_min,
                    channel_max,
                }
            })
            .collect())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: ParamSet {
                entries: self
                    .params
                    .iter()
                    .map(|(n, t)| (n.to_string(), t.cast()))
                    .collect(),
            },
        }
    }
}

/// Shape and fan-in of one parameter to initialize.
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

/// Draws every parameter uniformly in `[−1/√fan_in, 1/√fan_in]`, in order.
fn init_params<T: Real>(specs: Vec<ParamSpec>, seed: u64) -> Result<ParamSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = specs
        .into_iter()
        .map(|spec| {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let t = Tensor::from_fn(&spec.shape, |_| T::of(rng.random_range(-bound..=bound)));
            (spec.name, t)
        })
        .collect();
    ParamSet::new(entries)
}

fn dense_specs(prefix: &str, out: usize, fan_in: usize, kernel: Option<[usize; 3]>, bias: bool) -> Vec<ParamSpec> {
    let weight_shape = match kernel {
        Some([c, kh, kw]) => vec![out, c, kh, kw],
        None => vec![out, fan_in],
    };
    let mut specs = vec![ParamSpec {
        name: format!("{prefix}.weight"),
        shape: weight_shape,
        fan_in,
    }];
    if bias {
        specs.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![out],
            fan_in,
        });
    }
    specs
}

/// `conv(C→F, 3×3, stride 1, pad 1) → relu → flatten → linear`.
pub fn build_toy_cnn<T: Real>(
    num_filters: usize,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    build_small_cnn(&[num_filters], input_shape, num_classes, seed)
}

/// 3×3 conv+relu blocks (stride 2 on every second block) followed by flatten+linear.
pub fn build_small_cnn<T: Real>(
    widths: &[usize],
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<Model<T>> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::contract("widths must be non-empty and positive"));
    }
    if num_classes == 0 || input_shape.contains(&0) {
        return Err(Error::contract("input shape and class count must be positive"));
    }
    let [mut c, mut h, mut w] = input_shape;
    let mut layers = Vec::new();
    let mut specs = Vec::new();
    for (i, &width) in widths.iter().enumerate() {
        let stride = if i % 2 == 1 { 2 } else { 1 };
        if stride == 2 && (h < 2 || w < 2) {
            return Err(Error::contract(format!(
                "spatial size {h}x{w} too small for stride-2 block {}",
                i + 1
            )));
        }
        h = (h + 2 - 3) / stride + 1;
        w = (w + 2 - 3) / stride + 1;
        let prefix = format!("conv{}", i + 1);
        specs.extend(dense_specs(&prefix, width, c * 9, Some([c, 3, 3]), true));
        layers.push(Layer::Conv2d {
            weight: format!("{prefix}.weight"),
            bias: Some(format!("{prefix}.bias")),
            stride,
            padding: 1,
        });
        layers.push(Layer::Relu);
        c = width;
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear {
        weight: "fc.weight".into(),
        bias: Some("fc.bias".into()),
    });
    specs.extend(dense_specs("fc", num_classes, c * h * w, None, true));
    let arch = Architecture {
        layers,
        input_shape,
        num_classes,
    };
    let params = init_params(specs, seed)?;
    Model::from_parts(arch, params)
}

/// `flatten → linear`, optionally without bias.
pub fn build_linear<T: Real>(
    input_shape: [usize; 3],
    num_classes: usize,
    bias: bool,
    seed: u64,
) -> Result<Model<T>> {
    let arch = Architecture {
        layers: vec![
            Layer::Flatten,
            Layer::Linear {
                weight: "fc.weight".into(),
                bias: bias.then(|| "fc.bias".to_string()),
            },
        ],
        input_shape,
        num_classes,
    };
    let d = input_shape.iter().product();
    let params = init_params(dense_specs("fc", num_classes, d, None, bias), seed)?;
    Model::from_parts(arch, params)
}
