use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{gemm, maxpool_forward, softmax_in_place, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv2D {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    MaxPool2D {
        pool: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::MaxPool2D { .. } => "MaxPool2D",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dense { .. } => "Dense",
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |what: String| Err(Error::arg(format!("layer {index} ({}): {what}", self.kind())));
        match *self {
            LayerSpec::Conv2D { filters, kernel, activation } => {
                if filters == 0 || kernel == 0 {
                    return bad("filters and kernel size must be positive".into());
                }
                if activation == Activation::Softmax {
                    return bad("softmax is only supported on dense layers".into());
                }
            }
            LayerSpec::MaxPool2D { pool } if pool == 0 => return bad("pool size must be positive".into()),
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return bad(format!("dropout rate {rate} outside [0, 1)"))
            }
            LayerSpec::Dense { units, .. } if units == 0 => return bad("units must be positive".into()),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Index of this layer's first parameter tensor (weights, then bias).
    first_param: usize,
}

/// A feed-forward stack of layers with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
}

/// Activations recorded by a training-mode forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug)]
struct Record {
    input: Vec<f64>,
    output: Vec<f64>,
    aux: Aux,
}

#[derive(Debug)]
enum Aux {
    None,
    /// Per-activation dropout multiplier (0 or 1/(1-rate)).
    Mask(Vec<f64>),
    Argmax(Vec<usize>),
}

/// One gradient tensor per parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients(net.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|t| t.scale(k));
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub struct Backward {
    pub params: Gradients,
    pub input: Tensor,
}

fn infer_shape(spec: &LayerSpec, index: usize, input: &[usize]) -> Result<Vec<usize>> {
    let mismatch = |expected: Vec<usize>| Error::Shape {
        layer: index,
        kind: spec.kind(),
        expected,
        got: input.to_vec(),
    };
    match *spec {
        LayerSpec::Conv2D { filters, .. } => match input {
            [_, h, w] => Ok(vec![filters, *h, *w]),
            _ => Err(mismatch(vec![0, 0, 0])),
        },
        LayerSpec::MaxPool2D { pool } => match input {
            [c, h, w] if *h >= pool && *w >= pool => Ok(vec![*c, h / pool, w / pool]),
            [c, _, _] => Err(mismatch(vec![*c, pool, pool])),
            _ => Err(mismatch(vec![0, pool, pool])),
        },
        LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::Dense { units, .. } => match input {
            [_] => Ok(vec![units]),
            _ => Err(mismatch(vec![input.iter().product()])),
        },
    }
}

impl Network {
    /// Builds a network, checking that consecutive layer shapes agree, and
    /// initializes weights from `seed` (uniform fan-in scaling, He-style for
    /// ReLU layers; zero biases).
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::arg(format!("invalid input shape {input_shape:?}")));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.into_iter().enumerate() {
            spec.validate(i)?;
            let out = infer_shape(&spec, i, &shape)?;
            let first_param = params.len();
            let mut init = rng::stream(seed, &[rng::tag::INIT, i as u64]);
            let fan_init = |fan_in: usize, act: Activation, n: usize, r: &mut rng::Stream| {
                let gain = if act == Activation::Relu { 6.0 } else { 3.0 };
                let limit = (gain / fan_in as f64).sqrt();
                (0..n).map(|_| r.gen_range(-limit..limit)).collect::<Vec<_>>()
            };
            match spec {
                LayerSpec::Conv2D { filters, kernel, activation } => {
                    let fan_in = shape[0] * kernel * kernel;
                    let w = fan_init(fan_in, activation, filters * fan_in, &mut init);
                    params.push(Tensor::from_vec(vec![filters, shape[0], kernel, kernel], w)?);
                    params.push(Tensor::zeros(&[filters]));
                }
                LayerSpec::Dense { units, activation } => {
                    let fan_in = shape[0];
                    let w = fan_init(fan_in, activation, units * fan_in, &mut init);
                    params.push(Tensor::from_vec(vec![units, fan_in], w)?);
                    params.push(Tensor::zeros(&[units]));
                }
                _ => {}
            }
            layers.push(Layer {
                spec,
                in_shape: shape,
                out_shape: out.clone(),
                first_param,
            });
            shape = out;
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.out_shape)
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.out_shape.clone()).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Human-readable name of parameter tensor `index`.
    pub fn param_name(&self, index: usize) -> String {
        let layer = self
            .layers
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| l.first_param <= index && matches!(l.spec, LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. }))
            .expect("parameter index belongs to a layer");
        let part = if index == layer.1.first_param { "weight" } else { "bias" };
        format!("layer {} {}.{part}", layer.0, layer.1.spec.kind())
    }

    pub(crate) fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::arg("parameter tensors do not match the architecture"));
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                layer: 0,
                kind: self.layers.first().map_or("input", |l| l.spec.kind()),
                expected: self.input_shape.clone(),
                got: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass. Dropout is active only in [`Mode::Training`]; inference
    /// never touches `rng`.
    pub fn forward<R: Rng>(&self, input: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.data().to_vec();
        for layer in &self.layers {
            let (y, _) = self.layer_forward(layer, &x, mode, rng, false);
            x = y;
        }
        Tensor::from_vec(self.output_shape().to_vec(), x)
    }

    /// Training-mode forward pass that records what [`backward`](Self::backward) needs.
    pub fn forward_recorded<R: Rng>(&self, input: &Tensor, rng: &mut R) -> Result<(Tensor, Tape)> {
        self.check_input(input)?;
        let mut x = input.data().to_vec();
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, aux) = self.layer_forward(layer, &x, Mode::Training, rng, true);
            let input = std::mem::replace(&mut x, y);
            records.push(Record {
                input,
                output: x.clone(),
                aux,
            });
        }
        Ok((Tensor::from_vec(self.output_shape().to_vec(), x)?, Tape { records }))
    }

    fn layer_forward<R: Rng>(&self, layer: &Layer, x: &[f64], mode: Mode, rng: &mut R, record: bool) -> (Vec<f64>, Aux) {
        match layer.spec {
            LayerSpec::Conv2D { filters, kernel, activation } => {
                let geom = ConvGeom {
                    channels: layer.in_shape[0],
                    height: layer.in_shape[1],
                    width: layer.in_shape[2],
                    kernel,
                };
                let (w, b) = (&self.params[layer.first_param], &self.params[layer.first_param + 1]);
                let hw = geom.pixels();
                let mut cols = vec![0.0; geom.patch_len() * hw];
                geom.im2col(x, &mut cols);
                let mut out = vec![0.0; filters * hw];
                for (f, row) in out.chunks_mut(hw).enumerate() {
                    row.fill(b.data()[f]);
                }
                gemm(filters, geom.patch_len(), hw, w.data(), false, &cols, false, 1.0, &mut out);
                activate(activation, &mut out);
                (out, Aux::None)
            }
            LayerSpec::Dense { units, activation } => {
                let (w, b) = (&self.params[layer.first_param], &self.params[layer.first_param + 1]);
                let n_in = x.len();
                let mut out: Vec<f64> = w
                    .data()
                    .chunks(n_in)
                    .zip(b.data())
                    .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                debug_assert_eq!(out.len(), units);
                activate(activation, &mut out);
                (out, Aux::None)
            }
            LayerSpec::MaxPool2D { pool } => {
                let n = layer.out_shape.iter().product();
                let mut out = vec![0.0; n];
                let mut arg = vec![0usize; n];
                maxpool_forward(x, layer.in_shape[0], layer.in_shape[1], layer.in_shape[2], pool, &mut out, &mut arg);
                (out, if record { Aux::Argmax(arg) } else { Aux::None })
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Inference || rate == 0.0 {
                    return (x.to_vec(), Aux::Mask(vec![1.0; x.len()]));
                }
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let out = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
                (out, Aux::Mask(mask))
            }
            LayerSpec::Flatten => (x.to_vec(), Aux::None),
        }
    }

    /// Back-propagates `grad_out` (gradient of the loss with respect to the
    /// network output) through a recorded forward pass.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<Backward> {
        if tape.records.len() != self.layers.len() || tape.is_empty() {
            return Err(Error::State(
                "backward requires a recorded training-mode forward pass".into(),
            ));
        }
        if grad_out.shape() != self.output_shape() {
            return Err(Error::Shape {
                layer: self.layers.len() - 1,
                kind: "output gradient",
                expected: self.output_shape().to_vec(),
                got: grad_out.shape().to_vec(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut g = grad_out.data().to_vec();
        for (layer, rec) in self.layers.iter().zip(&tape.records).rev() {
            g = self.layer_backward(layer, rec, g, &mut grads);
        }
        Ok(Backward {
            params: grads,
            input: Tensor::from_vec(self.input_shape.clone(), g)?,
        })
    }

    fn layer_backward(&self, layer: &Layer, rec: &Record, mut g: Vec<f64>, grads: &mut Gradients) -> Vec<f64> {
        match layer.spec {
            LayerSpec::Conv2D { filters, kernel, activation } => {
                activation_backward(activation, &rec.output, &mut g);
                let geom = ConvGeom {
                    channels: layer.in_shape[0],
                    height: layer.in_shape[1],
                    width: layer.in_shape[2],
                    kernel,
                };
                let hw = geom.pixels();
                let k = geom.patch_len();
                let mut cols = vec![0.0; k * hw];
                geom.im2col(&rec.input, &mut cols);
                let (gw, gb) = grads.0.split_at_mut(layer.first_param + 1);
                gemm(filters, hw, k, &g, false, &cols, true, 1.0, gw[layer.first_param].data_mut());
                for (f, row) in g.chunks(hw).enumerate() {
                    gb[0].data_mut()[f] += row.iter().sum::<f64>();
                }
                let w = &self.params[layer.first_param];
                gemm(k, filters, hw, w.data(), true, &g, false, 0.0, &mut cols);
                let mut gin = vec![0.0; rec.input.len()];
                geom.col2im(&cols, &mut gin);
                gin
            }
            LayerSpec::Dense { activation, .. } => {
                activation_backward(activation, &rec.output, &mut g);
                let n_in = rec.input.len();
                let (gw, gb) = grads.0.split_at_mut(layer.first_param + 1);
                for ((row, gi), bias) in gw[layer.first_param]
                    .data_mut()
                    .chunks_mut(n_in)
                    .zip(&g)
                    .zip(gb[0].data_mut())
                {
                    *bias += gi;
                    for (r, x) in row.iter_mut().zip(&rec.input) {
                        *r += gi * x;
                    }
                }
                let w = &self.params[layer.first_param];
                let mut gin = vec![0.0; n_in];
                for (row, gi) in w.data().chunks(n_in).zip(&g) {
                    for (acc, wv) in gin.iter_mut().zip(row) {
                        *acc += gi * wv;
                    }
                }
                gin
            }
            LayerSpec::MaxPool2D { .. } => {
                let mut gin = vec![0.0; rec.input.len()];
                if let Aux::Argmax(arg) = &rec.aux {
                    for (gv, &idx) in g.iter().zip(arg) {
                        gin[idx] += gv;
                    }
                }
                gin
            }
            LayerSpec::Dropout { .. } => {
                if let Aux::Mask(mask) = &rec.aux {
                    for (gv, m) in g.iter_mut().zip(mask) {
                        *gv *= m;
                    }
                }
                g
            }
            LayerSpec::Flatten => g,
        }
    }
}

fn activate(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Linear => {}
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => softmax_in_place(z),
    }
}

/// Turns dL/d(output) into dL/d(pre-activation), given the layer output.
fn activation_backward(act: Activation, out: &[f64], g: &mut [f64]) {
    match act {
        Activation::Linear => {}
        Activation::Relu => {
            for (gv, o) in g.iter_mut().zip(out) {
                if *o <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        Activation::Softmax => {
            let dot: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
            for (gv, p) in g.iter_mut().zip(out) {
                *gv = p * (*gv - dot);
            }
        }
    }
}
