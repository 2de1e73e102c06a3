//! Forward evaluation and reverse-mode gradients over a validated [`NetworkSpec`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nets::kernels::{self, ConvGeom};
use crate::nets::params::ParameterStore;
use crate::nets::spec::{Activation, LayerKind, NetworkSpec, NodeInfo};
use crate::tensor::Tensor;

/// A spec compiled for execution. Immutable and shareable; `forward` is reentrant.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    info: Vec<NodeInfo>,
    input_idx: Vec<Vec<usize>>,
    output_idx: Vec<usize>,
}

enum Cache {
    None,
    PoolArg(Vec<u32>),
}

/// Every node's output from one forward pass, retained for `backward`.
pub struct Activations {
    values: Vec<Tensor>,
    caches: Vec<Cache>,
}

/// Parameter gradients (only for trainable parameters) and requested input gradients.
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Vec<f64>>,
    pub inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn accumulate(&mut self, other: Gradients) {
        for (k, v) in other.params {
            match self.params.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(k, v);
                }
            }
        }
        for (k, v) in other.inputs {
            match self.inputs.get_mut(&k) {
                Some(acc) => acc.add_assign(&v).expect("same input shape"),
                None => {
                    self.inputs.insert(k, v);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

impl Activations {
    pub fn get(&self, net: &Network, name: &str) -> Result<&Tensor> {
        let i = net.index_of(name)?;
        Ok(&self.values[i])
    }

    pub fn take(mut self, net: &Network, name: &str) -> Result<Tensor> {
        let i = net.index_of(name)?;
        Ok(std::mem::replace(&mut self.values[i], Tensor::zeros([0, 0, 0, 0])))
    }
}

fn param<'a>(params: &'a ParameterStore, name: &str, suffix: &str) -> Result<&'a [f64]> {
    params
        .get(&format!("{name}.{suffix}"))
        .map(|a| a.data.as_slice())
        .ok_or_else(|| Error::Spec(format!("parameter `{name}.{suffix}` missing")))
}

fn opt_param<'a>(params: &'a ParameterStore, name: &str, has: bool) -> Result<Option<&'a [f64]>> {
    if has {
        param(params, name, "bias").map(Some)
    } else {
        Ok(None)
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let info = spec.validate()?;
        let index: BTreeMap<&str, usize> = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();
        let input_idx = spec
            .layers
            .iter()
            .map(|l| l.inputs.iter().map(|n| index[n.as_str()]).collect())
            .collect();
        let output_idx = spec.outputs.iter().map(|o| index[o.as_str()]).collect();
        Ok(Network {
            spec,
            info,
            input_idx,
            output_idx,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn info(&self, name: &str) -> Result<NodeInfo> {
        Ok(self.info[self.index_of(name)?])
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.spec
            .position(name)
            .ok_or_else(|| Error::Spec(format!("network `{}` has no node `{name}`", self.spec.name)))
    }

    /// Run the network, keeping every intermediate for a later `backward`.
    pub fn forward(&self, params: &ParameterStore, inputs: &[(&str, &Tensor)]) -> Result<Activations> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.spec.layers.len());
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let ins: Vec<&Tensor> = self.input_idx[i].iter().map(|&j| &values[j]).collect();
            let (out, cache) = match &layer.kind {
                LayerKind::Input { channels } => {
                    let t = inputs
                        .iter()
                        .find(|(n, _)| *n == layer.name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| {
                            Error::Shape(format!("input `{}` was not provided", layer.name))
                        })?;
                    if t.c() != *channels {
                        return Err(Error::Shape(format!(
                            "input `{}` expects {channels} channels, got {}",
                            layer.name,
                            t.c()
                        )));
                    }
                    (t.clone(), Cache::None)
                }
                LayerKind::Conv {
                    out_channels,
                    groups,
                    bias,
                    ..
                } => {
                    let w = param(params, &layer.name, "weight")?;
                    let b = opt_param(params, &layer.name, *bias)?;
                    let g = layer.kind.conv_geom().expect("conv geometry");
                    (
                        kernels::conv2d_forward(ins[0], w, b, *out_channels, *groups, &g)?,
                        Cache::None,
                    )
                }
                LayerKind::ConvTranspose {
                    out_channels, bias, ..
                } => {
                    let w = param(params, &layer.name, "weight")?;
                    let b = opt_param(params, &layer.name, *bias)?;
                    let g = layer.kind.conv_geom().expect("conv geometry");
                    (
                        kernels::conv_transpose2d_forward(ins[0], w, b, *out_channels, &g)?,
                        Cache::None,
                    )
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let (t, arg) = kernels::max_pool_forward(ins[0], *kernel, *stride)?;
                    (t, Cache::PoolArg(arg))
                }
                LayerKind::Act(a) => (activate(ins[0], *a), Cache::None),
                LayerKind::Concat => (kernels::concat_channels(&ins)?, Cache::None),
                LayerKind::Add => {
                    let mut t = ins[0].clone();
                    for o in &ins[1..] {
                        t.add_assign(o)?;
                    }
                    (t, Cache::None)
                }
                LayerKind::GlobalAvgPool => (kernels::global_avg_pool_forward(ins[0]), Cache::None),
                LayerKind::Affine { out_features, .. } => {
                    let w = param(params, &layer.name, "weight")?;
                    let b = param(params, &layer.name, "bias")?;
                    (
                        kernels::affine_forward(ins[0], w, b, *out_features),
                        Cache::None,
                    )
                }
                LayerKind::LogSoftmax => (kernels::log_softmax_forward(ins[0]), Cache::None),
            };
            values.push(out);
            caches.push(cache);
        }
        Ok(Activations { values, caches })
    }

    /// Forward pass returning only the declared outputs, in declaration order.
    pub fn predict(&self, params: &ParameterStore, inputs: &[(&str, &Tensor)]) -> Result<Vec<Tensor>> {
        let mut acts = self.forward(params, inputs)?;
        Ok(self
            .output_idx
            .iter()
            .map(|&i| std::mem::replace(&mut acts.values[i], Tensor::zeros([0, 0, 0, 0])))
            .collect())
    }

    pub fn output<'a>(&self, acts: &'a Activations, k: usize) -> &'a Tensor {
        &acts.values[self.output_idx[k]]
    }

    /// Reverse pass. `output_grads` seeds the gradient at any named nodes; gradients are
    /// produced for every non-frozen parameter and for each input listed in `input_grads`.
    pub fn backward(
        &self,
        params: &ParameterStore,
        acts: &Activations,
        output_grads: Vec<(&str, Tensor)>,
        input_grads: &[&str],
    ) -> Result<Gradients> {
        let n = self.spec.layers.len();
        // A node needs a gradient if something trainable (or a requested input) feeds it.
        let mut needs = vec![false; n];
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let own = match &layer.kind {
                LayerKind::Input { .. } => input_grads.contains(&layer.name.as_str()),
                k if k.is_trainable() => params.is_trainable(&format!("{}.weight", layer.name)),
                _ => false,
            };
            needs[i] = own || self.input_idx[i].iter().any(|&j| needs[j]);
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (name, g) in output_grads {
            let i = self.index_of(name)?;
            if g.shape() != acts.values[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, output has {:?}",
                    g.shape(),
                    acts.values[i].shape()
                )));
            }
            accumulate(&mut grads[i], g);
        }
        let mut out = Gradients::default();
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let layer = &self.spec.layers[i];
            let ins = &self.input_idx[i];
            let want_in = |k: usize| needs[ins[k]];
            match &layer.kind {
                LayerKind::Input { .. } => {
                    out.inputs.insert(layer.name.clone(), dy);
                }
                LayerKind::Conv { groups, bias, .. } => {
                    let x = &acts.values[ins[0]];
                    let w = param(params, &layer.name, "weight")?;
                    let g: ConvGeom = layer.kind.conv_geom().expect("conv geometry");
                    let trainable = params.is_trainable(&format!("{}.weight", layer.name));
                    let r = kernels::conv2d_backward(x, w, *bias, &dy, *groups, &g, want_in(0), trainable);
                    self.store_param_grads(&mut out, &layer.name, r.weight, r.bias);
                    if let Some(dx) = r.input {
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerKind::ConvTranspose { bias, .. } => {
                    let x = &acts.values[ins[0]];
                    let w = param(params, &layer.name, "weight")?;
                    let g = layer.kind.conv_geom().expect("conv geometry");
                    let trainable = params.is_trainable(&format!("{}.weight", layer.name));
                    let r = kernels::conv_transpose2d_backward(x, w, *bias, &dy, &g, want_in(0), trainable);
                    self.store_param_grads(&mut out, &layer.name, r.weight, r.bias);
                    if let Some(dx) = r.input {
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerKind::Affine { .. } => {
                    let x = &acts.values[ins[0]];
                    let w = param(params, &layer.name, "weight")?;
                    let trainable = params.is_trainable(&format!("{}.weight", layer.name));
                    let r = kernels::affine_backward(x, w, &dy, want_in(0), trainable);
                    self.store_param_grads(&mut out, &layer.name, r.weight, r.bias);
                    if let Some(dx) = r.input {
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerKind::MaxPool { .. } => {
                    if want_in(0) {
                        let Cache::PoolArg(arg) = &acts.caches[i] else {
                            unreachable!("pool cache")
                        };
                        let dx = kernels::max_pool_backward(acts.values[ins[0]].shape(), &dy, arg);
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerKind::Act(a) => {
                    if want_in(0) {
                        let dx = activate_backward(&acts.values[ins[0]], &acts.values[i], &dy, *a);
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerKind::LogSoftmax => {
                    if want_in(0) {
                        let dx = kernels::log_softmax_backward(&acts.values[i], &dy);
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerKind::GlobalAvgPool => {
                    if want_in(0) {
                        let dx = kernels::global_avg_pool_backward(acts.values[ins[0]].shape(), &dy);
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerKind::Concat => {
                    let channels: Vec<usize> = ins.iter().map(|&j| acts.values[j].c()).collect();
                    let parts = kernels::split_channels(&dy, &channels);
                    for (k, part) in parts.into_iter().enumerate() {
                        if want_in(k) {
                            accumulate(&mut grads[ins[k]], part);
                        }
                    }
                }
                LayerKind::Add => {
                    for k in 0..ins.len() {
                        if want_in(k) {
                            accumulate(&mut grads[ins[k]], dy.clone());
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn store_param_grads(
        &self,
        out: &mut Gradients,
        layer: &str,
        weight: Option<Vec<f64>>,
        bias: Option<Vec<f64>>,
    ) {
        if let Some(w) = weight {
            out.params.insert(format!("{layer}.weight"), w);
        }
        if let Some(b) = bias {
            out.params.insert(format!("{layer}.bias"), b);
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
}

fn activate(x: &Tensor, a: Activation) -> Tensor {
    let mut y = x.clone();
    match a {
        Activation::Relu => y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::LeakyRelu { .. } => {
            let s = a.leaky_slope();
            y.data_mut()
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { *v } else { s * *v })
        }
        Activation::Tanh => y.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Sigmoid => y
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
    }
    y
}

fn activate_backward(x: &Tensor, y: &Tensor, dy: &Tensor, a: Activation) -> Tensor {
    let mut dx = dy.clone();
    let d = dx.data_mut();
    match a {
        Activation::Relu => d
            .iter_mut()
            .zip(x.data())
            .for_each(|(g, &xv)| {
                if xv <= 0.0 {
                    *g = 0.0
                }
            }),
        Activation::LeakyRelu { .. } => {
            let s = a.leaky_slope();
            d.iter_mut().zip(x.data()).for_each(|(g, &xv)| {
                if xv <= 0.0 {
                    *g *= s
                }
            })
        }
        Activation::Tanh => d
            .iter_mut()
            .zip(y.data())
            .for_each(|(g, &yv)| *g *= 1.0 - yv * yv),
        Activation::Sigmoid => d
            .iter_mut()
            .zip(y.data())
            .for_each(|(g, &yv)| *g *= yv * (1.0 - yv)),
    }
    dx
}
