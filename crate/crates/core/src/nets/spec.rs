//! Declarative layer graphs.
//!
//! A [`NetworkSpec`] is a topologically ordered list of named layers. Layer names are
//! qualified as `<section>.<local>`, where the section (`en`, `dn`, `out`, `pp.en`, ...)
//! is everything before the last dot. Parameter names append `.weight` / `.bias` to the
//! layer name, which makes cross-network transfer purely name-based.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::kernels::ConvGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "fn")]
pub enum Activation {
    Relu,
    LeakyRelu { slope_milli: u32 },
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn leaky_slope(self) -> f64 {
        match self {
            Activation::LeakyRelu { slope_milli } => slope_milli as f64 / 1000.0,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Act(Activation),
    Concat,
    Add,
    GlobalAvgPool,
    Affine {
        in_features: usize,
        out_features: usize,
    },
    LogSoftmax,
}

impl LayerKind {
    pub fn is_trainable(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::Affine { .. }
        )
    }

    /// Shapes of the parameter arrays this layer owns, keyed by suffix.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                groups,
                bias,
                ..
            } => {
                let mut v = vec![(
                    "weight",
                    vec![out_channels, in_channels / groups, kernel, kernel],
                )];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![("weight", vec![in_channels, out_channels, kernel, kernel])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            LayerKind::Affine {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            _ => Vec::new(),
        }
    }

    pub(crate) fn conv_geom(&self) -> Option<ConvGeom> {
        match *self {
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                dilation,
                ..
            } => Some(ConvGeom {
                kernel,
                stride,
                padding,
                dilation,
            }),
            LayerKind::ConvTranspose {
                kernel,
                stride,
                padding,
                ..
            } => Some(ConvGeom {
                kernel,
                stride,
                padding,
                dilation: 1,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Names of the layers feeding this one. Empty for inputs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

/// Spatial stride of a node relative to the network input, as a reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stride {
    pub num: u32,
    pub den: u32,
}

impl Stride {
    pub const UNIT: Stride = Stride { num: 1, den: 1 };

    fn reduced(num: u32, den: u32) -> Stride {
        fn gcd(a: u32, b: u32) -> u32 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(num, den).max(1);
        Stride {
            num: num / g,
            den: den / g,
        }
    }

    pub fn down(self, factor: usize) -> Stride {
        Stride::reduced(self.num * factor as u32, self.den)
    }

    pub fn up(self, factor: usize) -> Stride {
        Stride::reduced(self.num, self.den * factor as u32)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Stride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Static per-node facts derived from the layer list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub channels: usize,
    pub stride: Stride,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<String>,
    /// Named nodes of interest, e.g. `features` for the encoder output and
    /// `skip.*` for encoder taps consumed by a decoder.
    #[serde(default)]
    pub taps: BTreeMap<String, String>,
}

pub fn section_of(layer_name: &str) -> &str {
    layer_name
        .rsplit_once('.')
        .map(|(section, _)| section)
        .unwrap_or("")
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>) -> Self {
        NetworkSpec {
            name: name.into(),
            layers: Vec::new(),
            outputs: Vec::new(),
            taps: BTreeMap::new(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn tap(&self, key: &str) -> Result<&str> {
        self.taps
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Spec(format!("network `{}` has no `{key}` tap", self.name)))
    }

    pub fn inputs(&self) -> impl Iterator<Item = (&str, usize)> {
        self.layers.iter().filter_map(|l| match l.kind {
            LayerKind::Input { channels } => Some((l.name.as_str(), channels)),
            _ => None,
        })
    }

    /// Every parameter name with its expected shape, in layer order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.kind
                    .param_shapes()
                    .into_iter()
                    .map(move |(suffix, shape)| (format!("{}.{suffix}", l.name), shape))
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Distinct layer sections in declaration order.
    pub fn sections(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.layers {
            let s = section_of(&l.name);
            if !s.is_empty() && !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        }
        out
    }

    /// Stable hash of the architecture, used to match checkpoints to networks.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("network spec serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
    }

    /// Check that layer shapes compose and return per-node channel and stride facts.
    pub fn validate(&self) -> Result<Vec<NodeInfo>> {
        self.check(true)
    }

    fn check(&self, require_outputs: bool) -> Result<Vec<NodeInfo>> {
        let mut infos: Vec<NodeInfo> = Vec::with_capacity(self.layers.len());
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if seen.contains_key(layer.name.as_str()) {
                return Err(Error::Spec(format!("duplicate layer name `{}`", layer.name)));
            }
            let mut ins = Vec::with_capacity(layer.inputs.len());
            for i in &layer.inputs {
                let pos = *seen.get(i.as_str()).ok_or_else(|| {
                    Error::Spec(format!(
                        "layer `{}` reads `{i}` which is not declared before it",
                        layer.name
                    ))
                })?;
                ins.push(infos[pos]);
            }
            let single = |what: &str| -> Result<NodeInfo> {
                if ins.len() != 1 {
                    return Err(Error::Spec(format!(
                        "{what} layer `{}` needs exactly one input, has {}",
                        layer.name,
                        ins.len()
                    )));
                }
                Ok(ins[0])
            };
            let info = match &layer.kind {
                LayerKind::Input { channels } => {
                    if !layer.inputs.is_empty() {
                        return Err(Error::Spec(format!("input `{}` has inputs", layer.name)));
                    }
                    NodeInfo {
                        channels: *channels,
                        stride: Stride::UNIT,
                    }
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    groups,
                    dilation,
                    ..
                } => {
                    let src = single("convolution")?;
                    self.check_channels(layer, src.channels, *in_channels)?;
                    if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}`: {in_channels} -> {out_channels} channels cannot be split into {groups} groups",
                            layer.name
                        )));
                    }
                    if *kernel == 0 || *stride == 0 || *dilation == 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}` has a zero kernel, stride or dilation",
                            layer.name
                        )));
                    }
                    NodeInfo {
                        channels: *out_channels,
                        stride: src.stride.down(*stride),
                    }
                }
                LayerKind::ConvTranspose {
                    in_channels,
                    out_channels,
                    stride,
                    kernel,
                    ..
                } => {
                    let src = single("transposed convolution")?;
                    self.check_channels(layer, src.channels, *in_channels)?;
                    if *kernel == 0 || *stride == 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}` has a zero kernel or stride",
                            layer.name
                        )));
                    }
                    NodeInfo {
                        channels: *out_channels,
                        stride: src.stride.up(*stride),
                    }
                }
                LayerKind::MaxPool { stride, kernel } => {
                    let src = single("pooling")?;
                    if *kernel == 0 || *stride == 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}` has a zero window",
                            layer.name
                        )));
                    }
                    NodeInfo {
                        channels: src.channels,
                        stride: src.stride.down(*stride),
                    }
                }
                LayerKind::Act(_) | LayerKind::LogSoftmax => single("elementwise")?,
                LayerKind::GlobalAvgPool => {
                    let src = single("global pooling")?;
                    NodeInfo {
                        channels: src.channels,
                        stride: src.stride,
                    }
                }
                LayerKind::Affine {
                    in_features,
                    out_features,
                } => {
                    let src = single("affine")?;
                    self.check_channels(layer, src.channels, *in_features)?;
                    NodeInfo {
                        channels: *out_features,
                        stride: src.stride,
                    }
                }
                LayerKind::Concat | LayerKind::Add => {
                    if ins.len() < 2 {
                        return Err(Error::Spec(format!(
                            "layer `{}` joins fewer than two inputs",
                            layer.name
                        )));
                    }
                    if ins.iter().any(|i| i.stride != ins[0].stride) {
                        let strides: Vec<String> =
                            ins.iter().map(|i| i.stride.to_string()).collect();
                        return Err(Error::Spec(format!(
                            "layer `{}` joins features of unequal stride [{}]",
                            layer.name,
                            strides.join(", ")
                        )));
                    }
                    if matches!(layer.kind, LayerKind::Concat) {
                        NodeInfo {
                            channels: ins.iter().map(|i| i.channels).sum(),
                            stride: ins[0].stride,
                        }
                    } else {
                        if ins.iter().any(|i| i.channels != ins[0].channels) {
                            return Err(Error::Spec(format!(
                                "skip connection `{}` adds unequal channel counts",
                                layer.name
                            )));
                        }
                        ins[0]
                    }
                }
            };
            seen.insert(layer.name.as_str(), idx);
            infos.push(info);
        }
        if require_outputs && self.outputs.is_empty() {
            return Err(Error::Spec(format!("network `{}` has no outputs", self.name)));
        }
        for o in self.outputs.iter().chain(self.taps.values()) {
            if !seen.contains_key(o.as_str()) {
                return Err(Error::Spec(format!("unknown output or tap `{o}`")));
            }
        }
        Ok(infos)
    }

    fn check_channels(&self, layer: &LayerSpec, got: usize, declared: usize) -> Result<()> {
        if got != declared {
            return Err(Error::Spec(format!(
                "layer `{}` declares {declared} input channels but receives {got}",
                layer.name
            )));
        }
        Ok(())
    }

    /// Facts about one node of a possibly unfinished spec.
    pub fn node_info(&self, name: &str) -> Result<NodeInfo> {
        let infos = self.check(false)?;
        let pos = self
            .position(name)
            .ok_or_else(|| Error::Spec(format!("unknown layer `{name}`")))?;
        Ok(infos[pos])
    }
}

/// Incremental builder that tracks the current node and its channel count.
pub struct SpecBuilder {
    spec: NetworkSpec,
    section: String,
    cursor: String,
    channels: usize,
}

impl SpecBuilder {
    pub fn new(name: &str) -> Self {
        SpecBuilder {
            spec: NetworkSpec::new(name),
            section: String::new(),
            cursor: String::new(),
            channels: 0,
        }
    }

    /// Continue an existing spec.
    pub fn extend(spec: NetworkSpec, cursor: &str) -> Result<Self> {
        let channels = spec.node_info(cursor)?.channels;
        Ok(SpecBuilder {
            spec,
            section: String::new(),
            cursor: cursor.to_string(),
            channels,
        })
    }

    pub fn section(&mut self, section: &str) -> &mut Self {
        self.section = section.to_string();
        self
    }

    pub fn cursor(&self) -> &str {
        &self.cursor
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Move the cursor to an existing node.
    pub fn at(&mut self, node: &str, channels: usize) -> &mut Self {
        self.cursor = node.to_string();
        self.channels = channels;
        self
    }

    fn qualified(&self, local: &str) -> String {
        if self.section.is_empty() {
            local.to_string()
        } else {
            format!("{}.{local}", self.section)
        }
    }

    pub fn push(&mut self, local: &str, kind: LayerKind, inputs: Vec<String>, channels: usize) -> String {
        let name = self.qualified(local);
        self.spec.layers.push(LayerSpec {
            name: name.clone(),
            kind,
            inputs,
        });
        self.cursor = name.clone();
        self.channels = channels;
        name
    }

    pub fn input(&mut self, name: &str, channels: usize) -> String {
        let name = name.to_string();
        self.spec.layers.push(LayerSpec {
            name: name.clone(),
            kind: LayerKind::Input { channels },
            inputs: Vec::new(),
        });
        self.cursor = name.clone();
        self.channels = channels;
        name
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_full(
        &mut self,
        local: &str,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> String {
        let kind = LayerKind::Conv {
            in_channels: self.channels,
            out_channels: out,
            kernel,
            stride,
            padding,
            dilation,
            groups,
            bias: true,
        };
        let inputs = vec![self.cursor.clone()];
        self.push(local, kind, inputs, out)
    }

    /// Same-padded 3x3 convolution.
    pub fn conv3(&mut self, local: &str, out: usize) -> String {
        self.conv_full(local, out, 3, 1, 1, 1, 1)
    }

    pub fn conv1(&mut self, local: &str, out: usize) -> String {
        self.conv_full(local, out, 1, 1, 0, 1, 1)
    }

    pub fn deconv(&mut self, local: &str, out: usize, kernel: usize, stride: usize, padding: usize) -> String {
        let kind = LayerKind::ConvTranspose {
            in_channels: self.channels,
            out_channels: out,
            kernel,
            stride,
            padding,
            bias: true,
        };
        let inputs = vec![self.cursor.clone()];
        self.push(local, kind, inputs, out)
    }

    pub fn act(&mut self, local: &str, act: Activation) -> String {
        let inputs = vec![self.cursor.clone()];
        let c = self.channels;
        self.push(local, LayerKind::Act(act), inputs, c)
    }

    pub fn relu(&mut self, local: &str) -> String {
        self.act(local, Activation::Relu)
    }

    pub fn max_pool(&mut self, local: &str) -> String {
        let inputs = vec![self.cursor.clone()];
        let c = self.channels;
        self.push(local, LayerKind::MaxPool { kernel: 2, stride: 2 }, inputs, c)
    }

    pub fn concat(&mut self, local: &str, parts: &[(&str, usize)]) -> String {
        let inputs = parts.iter().map(|(n, _)| n.to_string()).collect();
        let c = parts.iter().map(|(_, c)| c).sum();
        self.push(local, LayerKind::Concat, inputs, c)
    }

    pub fn add(&mut self, local: &str, parts: &[&str]) -> String {
        let inputs = parts.iter().map(|n| n.to_string()).collect();
        let c = self.channels;
        self.push(local, LayerKind::Add, inputs, c)
    }

    pub fn global_avg_pool(&mut self, local: &str) -> String {
        let inputs = vec![self.cursor.clone()];
        let c = self.channels;
        self.push(local, LayerKind::GlobalAvgPool, inputs, c)
    }

    pub fn affine(&mut self, local: &str, out: usize) -> String {
        let kind = LayerKind::Affine {
            in_features: self.channels,
            out_features: out,
        };
        let inputs = vec![self.cursor.clone()];
        self.push(local, kind, inputs, out)
    }

    pub fn log_softmax(&mut self, local: &str) -> String {
        let inputs = vec![self.cursor.clone()];
        let c = self.channels;
        self.push(local, LayerKind::LogSoftmax, inputs, c)
    }

    pub fn tap(&mut self, key: &str, node: &str) -> &mut Self {
        self.spec.taps.insert(key.to_string(), node.to_string());
        self
    }

    pub fn output(&mut self, node: &str) -> &mut Self {
        self.spec.outputs.push(node.to_string());
        self
    }

    pub fn finish(self) -> Result<NetworkSpec> {
        self.spec.validate()?;
        Ok(self.spec)
    }

    pub fn into_unchecked(self) -> NetworkSpec {
        self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut b = SpecBuilder::new("bad");
        b.input("x", 3);
        b.section("en");
        b.conv3("c1", 8);
        b.push(
            "c2",
            LayerKind::Conv {
                in_channels: 4,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
                dilation: 1,
                groups: 1,
                bias: true,
            },
            vec!["en.c1".into()],
            8,
        );
        b.output("en.c2");
        let err = b.finish().unwrap_err().to_string();
        assert!(err.contains("en.c2"), "{err}");
    }

    #[test]
    fn strides_compose_through_pool_and_deconv() {
        let mut b = SpecBuilder::new("s");
        b.input("x", 3);
        b.section("en");
        b.conv3("c1", 4);
        b.max_pool("p1");
        b.max_pool("p2");
        b.section("dn");
        let d = b.deconv("d1", 4, 4, 2, 1);
        b.output(&d);
        let spec = b.finish().unwrap();
        assert_eq!(spec.node_info("en.p2").unwrap().stride, Stride { num: 4, den: 1 });
        assert_eq!(spec.node_info("dn.d1").unwrap().stride, Stride { num: 2, den: 1 });
    }

    #[test]
    fn section_is_prefix_before_last_dot() {
        assert_eq!(section_of("pp.en.conv1"), "pp.en");
        assert_eq!(section_of("en.conv1"), "en");
        assert_eq!(section_of("past"), "");
    }

    #[test]
    fn hash_is_stable_and_architecture_sensitive() {
        let build = |c: usize| {
            let mut b = SpecBuilder::new("h");
            b.input("x", 3);
            b.section("en");
            let o = b.conv3("c1", c);
            b.output(&o);
            b.finish().unwrap()
        };
        assert_eq!(build(4).hash(), build(4).hash());
        assert_ne!(build(4).hash(), build(8).hash());
    }
}
