//! Toy-scale network presets and the stage-to-stage network surgeries.
//!
//! All encoders have total stride 8. The VGG-style preset stacks 3x3 convolutions with
//! max pooling and ends in a three-layer transposed-convolution decoder that halves the
//! channel count at every layer (K4/S2/P1). The residual preset uses identity skip blocks,
//! a dilation-2 final stage and FCN-style decoder skips from `conv1`, `pool1` and `conv3`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::graph::Network;
use crate::nets::params::{ParamArray, ParameterStore, Provenance};
use crate::nets::spec::{section_of, Activation, LayerKind, LayerSpec, NetworkSpec, SpecBuilder, Stride};

pub const PAST_INPUT: &str = "past";
pub const FRAME_INPUT: &str = "frame";
pub const FEATURES_TAP: &str = "features";
pub const GENERATOR_OUTPUT: &str = "out.tanh";
pub const DISCRIMINATOR_OUTPUT: &str = "d.prob";
pub const PARSER_OUTPUT: &str = "dn.logprobs";
pub const PSP_PREDICTIVE_OUTPUT: &str = "pp.dn.logprobs";
pub const PSP_FUSED_OUTPUT: &str = "ip.dn.logprobs";
pub const FUSION_CONCAT: &str = "fuse.concat";

/// Channels per RGB frame.
pub const RGB: usize = 3;
/// Extra input channels of the flow-augmented parser (dx, dy).
pub const FLOW_CHANNELS: usize = 2;
pub const ENCODER_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Vgg,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub backbone: Backbone,
    /// Channels of the first encoder stage; later stages use 2x and 4x.
    pub width: usize,
    pub disc_width: usize,
    pub adapnet_depth: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            backbone: Backbone::Vgg,
            width: 16,
            disc_width: 8,
            adapnet_depth: 1,
        }
    }
}

impl ArchConfig {
    pub fn encoder_channels(&self) -> usize {
        4 * self.width
    }
}

/// A network description together with its parameters.
#[derive(Clone, Debug)]
pub struct Built {
    pub spec: NetworkSpec,
    pub params: ParameterStore,
}

impl Built {
    pub fn network(&self) -> Result<Network> {
        Network::new(self.spec.clone())
    }
}

/// Append an encoder reading `input` (already declared) to the builder. `groups` sets the
/// group count of the first convolution.
fn encoder(b: &mut SpecBuilder, arch: &ArchConfig, groups: usize) -> Result<()> {
    let w = arch.width;
    if w % groups != 0 || b.channels() % groups != 0 {
        return Err(Error::Spec(format!(
            "first encoder layer ({} -> {w} channels) is not groupable into {groups} groups",
            b.channels()
        )));
    }
    b.section("en");
    match arch.backbone {
        Backbone::Vgg => {
            b.conv_full("conv1", w, 3, 1, 1, 1, groups);
            b.relu("relu1");
            b.max_pool("pool1");
            b.conv3("conv2", 2 * w);
            b.relu("relu2");
            b.max_pool("pool2");
            b.conv3("conv3", 4 * w);
            b.relu("relu3");
            b.max_pool("pool3");
            b.conv3("conv4", 4 * w);
            b.relu("relu4");
            b.conv1("fc7", 4 * w);
            let f = b.relu("relu_fc7");
            b.tap(FEATURES_TAP, &f);
        }
        Backbone::Residual => {
            b.conv_full("conv1", w, 3, 1, 1, 1, groups);
            let c1 = b.relu("relu1");
            b.tap("skip.conv1", &c1);
            let p1 = b.max_pool("pool1");
            b.tap("skip.pool1", &p1);
            residual_block(b, "res2", &p1, w, 1);
            b.conv_full("down3", 2 * w, 3, 2, 1, 1, 1);
            let d3 = b.relu("relu_down3");
            let c3 = residual_block(b, "res3", &d3, 2 * w, 1);
            b.tap("skip.conv3", &c3);
            b.conv_full("down5", 4 * w, 3, 2, 1, 1, 1);
            let d5 = b.relu("relu_down5");
            let f = residual_block(b, "res5", &d5, 4 * w, 2);
            b.tap(FEATURES_TAP, &f);
        }
    }
    Ok(())
}

fn residual_block(b: &mut SpecBuilder, name: &str, input: &str, c: usize, dilation: usize) -> String {
    b.at(input, c);
    b.conv_full(&format!("{name}_a"), c, 3, 1, dilation, dilation, 1);
    b.relu(&format!("{name}_relu_a"));
    let y = b.conv_full(&format!("{name}_b"), c, 3, 1, dilation, dilation, 1);
    b.add(&format!("{name}_sum"), &[input, &y]);
    b.relu(&format!("{name}_out"))
}

/// Append a decoder (section `dn`) reading `features` with `in_channels` channels. Skip
/// taps of the residual preset are read from `skips` (already-qualified node names).
fn decoder(
    b: &mut SpecBuilder,
    arch: &ArchConfig,
    features: &str,
    in_channels: usize,
    skips: &dyn Fn(&str) -> Result<(String, usize)>,
    num_classes: usize,
) -> Result<String> {
    let w = arch.width;
    b.section("dn");
    b.at(features, in_channels);
    match arch.backbone {
        Backbone::Vgg => {
            b.deconv("deconv1", 2 * w, 4, 2, 1);
            b.relu("relu1");
            b.deconv("deconv2", w, 4, 2, 1);
            b.relu("relu2");
            b.deconv("deconv3", w / 2, 4, 2, 1);
            b.relu("relu3");
        }
        Backbone::Residual => {
            let stages = [
                ("1", 2 * w, "skip.conv3"),
                ("2", w, "skip.pool1"),
                ("3", w, "skip.conv1"),
            ];
            for (tag, out, skip) in stages.iter() {
                b.deconv(&format!("up{tag}"), *out, 4, 2, 1);
                let r = b.relu(&format!("relu_up{tag}"));
                let (skip_node, skip_c) = skips(skip)?;
                b.concat(&format!("cat{tag}"), &[(&r, *out), (&skip_node, skip_c)]);
                b.conv3(&format!("fuse{tag}"), *out);
                b.relu(&format!("relu_fuse{tag}"));
            }
        }
    }
    b.conv1("classifier", num_classes);
    Ok(b.log_softmax("logprobs"))
}

/// Resolves a decoder skip key to a node name (with `prefix`) and its channel count.
fn skip_lookup<'a>(spec: &'a NetworkSpec, prefix: &'a str) -> impl Fn(&str) -> Result<(String, usize)> + 'a {
    move |key: &str| {
        let node = spec.tap(key)?;
        let info = spec.node_info(node)?;
        Ok((format!("{prefix}{node}"), info.channels))
    }
}

fn check_full_resolution(spec: &NetworkSpec, output: &str) -> Result<()> {
    let stride = spec.node_info(output)?.stride;
    if stride != Stride::UNIT {
        return Err(Error::Spec(format!(
            "decoder output `{output}` has stride {stride} relative to the input, expected 1"
        )));
    }
    Ok(())
}

/// Generator: grouped-first-layer encoder over `s` stacked past frames plus a single
/// transposed-convolution output layer with a tanh head, producing an RGB frame in [-1, 1].
pub fn build_generator<R: Rng + ?Sized>(arch: &ArchConfig, s: usize, rng: &mut R) -> Result<Built> {
    if s == 0 {
        return Err(Error::InvalidArgument("generator needs s >= 1 past frames".into()));
    }
    let mut b = SpecBuilder::new("generator");
    b.input(PAST_INPUT, RGB * s);
    encoder(&mut b, arch, s)?;
    b.section("out");
    let k = 2 * ENCODER_STRIDE;
    b.deconv("deconv", RGB, k, ENCODER_STRIDE, ENCODER_STRIDE / 2);
    let o = b.act("tanh", Activation::Tanh);
    b.output(&o);
    let spec = b.finish()?;
    check_full_resolution(&spec, GENERATOR_OUTPUT)?;
    let params = ParameterStore::init(&spec, rng);
    Ok(Built { spec, params })
}

/// Toy discriminator: strided convolutions, one inception-style block with parallel 1x1
/// and 3x3 branches, global pooling and a logistic head.
pub fn discriminator_spec(arch: &ArchConfig) -> Result<NetworkSpec> {
    let w = arch.disc_width;
    let lrelu = Activation::LeakyRelu { slope_milli: 200 };
    let mut b = SpecBuilder::new("discriminator");
    b.input(FRAME_INPUT, RGB);
    b.section("d");
    b.conv_full("conv1", w, 3, 2, 1, 1, 1);
    b.act("act1", lrelu);
    b.conv_full("conv2", 2 * w, 3, 2, 1, 1, 1);
    let a2 = b.act("act2", lrelu);
    b.conv1("incep_1x1", w);
    let i1 = b.act("incep_act1", lrelu);
    b.at(&a2, 2 * w);
    b.conv3("incep_3x3", w);
    let i3 = b.act("incep_act3", lrelu);
    b.concat("incep_cat", &[(&i1, w), (&i3, w)]);
    b.conv_full("conv3", 4 * w, 3, 2, 1, 1, 1);
    b.act("act3", lrelu);
    b.global_avg_pool("gap");
    b.affine("logit", 1);
    let o = b.act("prob", Activation::Sigmoid);
    b.output(&o);
    b.finish()
}

/// Instantiate a discriminator spec; it must map a frame to one probability per sample.
pub fn build_discriminator<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Built> {
    let infos = spec.validate()?;
    let out = spec
        .outputs
        .first()
        .ok_or_else(|| Error::Spec("discriminator has no output".into()))?;
    let pos = spec.position(out).expect("validated");
    let pooled = spec.layers[..pos]
        .iter()
        .any(|l| matches!(l.kind, LayerKind::GlobalAvgPool));
    if spec.outputs.len() != 1 || infos[pos].channels != 1 || !pooled {
        return Err(Error::Spec(
            "discriminator must produce a single scalar per frame (global pooling then one channel)".into(),
        ));
    }
    if !matches!(spec.layers[pos].kind, LayerKind::Act(Activation::Sigmoid)) {
        return Err(Error::Spec("discriminator output must be a logistic head".into()));
    }
    let params = ParameterStore::init(&spec, rng);
    Ok(Built { spec, params })
}

/// Layers of `spec` belonging to `section` (and below), plus the input layers they read.
fn section_layers(spec: &NetworkSpec, section: &str) -> Vec<LayerSpec> {
    spec.layers
        .iter()
        .filter(|l| {
            matches!(l.kind, LayerKind::Input { .. })
                || section_of(&l.name) == section
                || section_of(&l.name).starts_with(&format!("{section}."))
        })
        .cloned()
        .collect()
}

/// Replace the generator's output layer with a fresh deconvolutional decoder. Encoder
/// parameters are copied from the generator and marked as transferred from FPNet.
pub fn build_ppnet_from_fpnet<R: Rng + ?Sized>(
    generator: &Built,
    arch: &ArchConfig,
    num_classes: usize,
    rng: &mut R,
) -> Result<Built> {
    let mut spec = NetworkSpec::new("ppnet");
    spec.layers = section_layers(&generator.spec, "en");
    spec.taps = generator
        .spec
        .taps
        .iter()
        .filter(|(k, _)| k.as_str() == FEATURES_TAP || k.starts_with("skip."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let features = spec.tap(FEATURES_TAP)?.to_string();
    let c = spec.node_info(&features)?.channels;
    let taps_spec = spec.clone();
    let mut b = SpecBuilder::extend(spec, &features)?;
    let out = decoder(&mut b, arch, &features, c, &skip_lookup(&taps_spec, ""), num_classes)?;
    b.output(&out);
    let spec = b.finish()?;
    check_full_resolution(&spec, &out)?;
    let mut params = ParameterStore::init(&spec, rng);
    params.transfer_from(&generator.params, "en", "fp")?;
    params.set_provenance("en", Provenance::TransferredFrom("fp".into()));
    Ok(Built { spec, params })
}

/// PPNet trained from scratch (random encoder), used for the no-pretraining ablation.
pub fn build_ppnet_random<R: Rng + ?Sized>(arch: &ArchConfig, s: usize, num_classes: usize, rng: &mut R) -> Result<Built> {
    let generator = build_generator(arch, s, rng)?;
    let mut built = build_ppnet_from_fpnet(&generator, arch, num_classes, rng)?;
    built.params.set_provenance("en", Provenance::Random);
    Ok(built)
}

/// Single-frame parser (encoder + decoder). `flow_channels` adds optical-flow input
/// channels to the first layer (the flow-augmented baseline).
pub fn build_ipnet<R: Rng + ?Sized>(
    arch: &ArchConfig,
    num_classes: usize,
    flow_channels: usize,
    rng: &mut R,
) -> Result<Built> {
    let spec = ipnet_spec(arch, num_classes, flow_channels)?;
    let params = ParameterStore::init(&spec, rng);
    Ok(Built { spec, params })
}

pub fn ipnet_spec(arch: &ArchConfig, num_classes: usize, flow_channels: usize) -> Result<NetworkSpec> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("a parser needs at least two classes".into()));
    }
    let mut b = SpecBuilder::new("ipnet");
    b.input(FRAME_INPUT, RGB + flow_channels);
    encoder(&mut b, arch, 1)?;
    let mut partial = b.into_unchecked();
    partial.outputs.push(partial.tap(FEATURES_TAP)?.to_string());
    let features = partial.tap(FEATURES_TAP)?.to_string();
    let c = partial.node_info(&features)?.channels;
    let taps_spec = partial.clone();
    partial.outputs.clear();
    let mut b = SpecBuilder::extend(partial, &features)?;
    let out = decoder(&mut b, arch, &features, c, &skip_lookup(&taps_spec, ""), num_classes)?;
    b.output(&out);
    let spec = b.finish()?;
    check_full_resolution(&spec, &out)?;
    Ok(spec)
}

/// Shallow feature adapter: `depth` 1x1 convolutions (channels preserved), each followed
/// by a rectifier.
pub fn build_adapnet<R: Rng + ?Sized>(in_channels: usize, depth: usize, rng: &mut R) -> Result<Built> {
    if in_channels == 0 || depth == 0 {
        return Err(Error::InvalidArgument("adapnet needs >= 1 channel and >= 1 layer".into()));
    }
    let mut b = SpecBuilder::new("adapnet");
    b.input("adap_in", in_channels);
    b.section("adap");
    for i in 1..=depth {
        b.conv1(&format!("conv{i}"), in_channels);
        b.relu(&format!("relu{i}"));
    }
    let out = b.cursor().to_string();
    b.output(&out);
    b.tap(FEATURES_TAP, &out);
    let spec = b.finish()?;
    let params = ParameterStore::init(&spec, rng);
    Ok(Built { spec, params })
}

/// Set every AdapNet layer to the identity map with zero bias.
pub fn set_identity_adapnet(adapnet: &mut Built) {
    for layer in &adapnet.spec.layers {
        if let LayerKind::Conv { out_channels, .. } = layer.kind {
            let w = adapnet
                .params
                .get_mut(&format!("{}.weight", layer.name))
                .expect("adapnet weight");
            w.data.fill(0.0);
            for c in 0..out_channels {
                w.data[c * out_channels + c] = 1.0;
            }
            adapnet
                .params
                .get_mut(&format!("{}.bias", layer.name))
                .expect("adapnet bias")
                .data
                .fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeKind {
    /// Jointly trained PPNet + AdapNet + IPNet with both parsing heads.
    Pspnet,
    /// Frozen feature encoder + AdapNet + IPNet, fused head only.
    FrozenFeatures,
}

/// A multi-branch parser built from component networks.
#[derive(Clone, Debug)]
pub struct Composite {
    pub kind: CompositeKind,
    pub net: Network,
    pub params: ParameterStore,
}

impl Composite {
    pub fn spec(&self) -> &NetworkSpec {
        self.net.spec()
    }
}

/// How the fused decoder's first layer is initialized for the IPNet-feature slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionInit {
    /// Keep the supplied IPNet's decoder weights for its own feature channels.
    Inherit,
    /// Fresh weights for the whole decoder.
    Random,
}

fn rename(name: &str, prefix: &str) -> String {
    format!("{prefix}.{name}")
}

fn prefixed_layers(layers: &[LayerSpec], prefix: &str, keep: &dyn Fn(&str) -> bool) -> Vec<LayerSpec> {
    layers
        .iter()
        .filter(|l| !matches!(l.kind, LayerKind::Input { .. }))
        .map(|l| LayerSpec {
            name: rename(&l.name, prefix),
            kind: l.kind.clone(),
            inputs: l
                .inputs
                .iter()
                .map(|i| if keep(i) { i.clone() } else { rename(i, prefix) })
                .collect(),
        })
        .collect()
}

fn is_input(spec: &NetworkSpec, name: &str) -> bool {
    spec.layer(name)
        .map(|l| matches!(l.kind, LayerKind::Input { .. }))
        .unwrap_or(false)
}

/// Encoder output node of `spec` and its stride / channels.
fn features_of(spec: &NetworkSpec) -> Result<(String, usize, Stride)> {
    let f = spec.tap(FEATURES_TAP)?.to_string();
    let info = spec.node_info(&f)?;
    Ok((f, info.channels, info.stride))
}

/// Wire a feature encoder (through AdapNet) into an IPNet's decoder.
///
/// Returns the layers and parameters of `ip.*`, `adap.*` and the fusion concat, given the
/// already-prefixed feature node `feat_node` of `feat_channels` channels and `feat_stride`.
fn fuse_into_ipnet<R: Rng + ?Sized>(
    ipnet: &Built,
    adapnet: &Built,
    feat_node: &str,
    feat_channels: usize,
    feat_stride: Stride,
    fusion_init: FusionInit,
    rng: &mut R,
    layers: &mut Vec<LayerSpec>,
    params: &mut ParameterStore,
) -> Result<()> {
    let (ip_feat, ip_c, ip_stride) = features_of(&ipnet.spec)?;
    if ip_stride != feat_stride {
        return Err(Error::Spec(format!(
            "cannot fuse features of stride {feat_stride} into IPNet features of stride {ip_stride}"
        )));
    }
    let adap_in: Vec<&str> = adapnet.spec.inputs().collect::<Vec<_>>().iter().map(|(n, _)| *n).collect();
    let adap_in_c: usize = adapnet.spec.inputs().map(|(_, c)| c).sum();
    let (adap_out, adap_c, _) = features_of(&adapnet.spec)?;
    if adap_in.len() != 1 || adap_in_c != feat_channels {
        return Err(Error::Spec(format!(
            "AdapNet expects {adap_in_c} channels but the feature encoder provides {feat_channels}"
        )));
    }

    // AdapNet reads the feature encoder output.
    for l in adapnet.spec.layers.iter().filter(|l| !matches!(l.kind, LayerKind::Input { .. })) {
        layers.push(LayerSpec {
            name: l.name.clone(),
            kind: l.kind.clone(),
            inputs: l
                .inputs
                .iter()
                .map(|i| if i == adap_in[0] { feat_node.to_string() } else { i.clone() })
                .collect(),
        });
    }
    for (k, v) in adapnet.params.iter() {
        params.insert(k.clone(), v.clone());
    }
    if let Some(p) = adapnet.params.provenance().get("adap") {
        params.set_provenance("adap", p.clone());
    }

    let ip_keep = |n: &str| is_input(&ipnet.spec, n);
    let ip_layers = prefixed_layers(&ipnet.spec.layers, "ip", &ip_keep);
    let ip_feat_q = rename(&ip_feat, "ip");
    let mut concat_done = false;
    for mut l in ip_layers {
        let reads_features = l.inputs.iter().any(|i| *i == ip_feat_q);
        if reads_features && section_of(&l.name) == "ip.dn" {
            if !concat_done {
                layers.push(LayerSpec {
                    name: FUSION_CONCAT.to_string(),
                    kind: LayerKind::Concat,
                    inputs: vec![ip_feat_q.clone(), adap_out.clone()],
                });
                concat_done = true;
            }
            let fused = ip_c + adap_c;
            match &mut l.kind {
                LayerKind::Conv { in_channels, groups: 1, .. }
                | LayerKind::ConvTranspose { in_channels, .. } => {
                    if *in_channels != ip_c && *in_channels != fused {
                        return Err(Error::Spec(format!(
                            "decoder layer `{}` declares {} input channels; fusion provides {fused}",
                            l.name, in_channels
                        )));
                    }
                    *in_channels = fused;
                }
                _ => {
                    return Err(Error::Spec(format!(
                        "decoder layer `{}` reading the encoder output must be a convolution",
                        l.name
                    )))
                }
            }
            for i in l.inputs.iter_mut() {
                if *i == ip_feat_q {
                    *i = FUSION_CONCAT.to_string();
                }
            }
        }
        layers.push(l);
    }
    if !concat_done {
        return Err(Error::Spec("IPNet decoder never reads the encoder features".into()));
    }

    // Parameters: everything of the IPNet under `ip.`, fused layers re-shaped.
    let mut fresh = ParameterStore::new();
    for l in layers.iter().filter(|l| section_of(&l.name).starts_with("ip.")) {
        fresh.init_layer(&l.name, &l.kind, rng);
    }
    for l in layers.iter().filter(|l| section_of(&l.name).starts_with("ip.")) {
        for (suffix, shape) in l.kind.param_shapes() {
            let name = format!("{}.{suffix}", l.name);
            let src_name = name.strip_prefix("ip.").expect("ip prefix");
            let src = ipnet.params.get(src_name).ok_or_else(|| Error::Transfer {
                layer: src_name.to_string(),
                reason: "missing in IPNet parameters".into(),
            })?;
            let mut arr = fresh.get(&name).expect("fresh init").clone();
            let inherit = fusion_init == FusionInit::Inherit || section_of(&l.name) == "ip.en";
            if src.shape == shape {
                if inherit {
                    arr = src.clone();
                }
            } else if suffix == "weight" {
                // Fused first decoder layer: fresh He weights for the appended feature slice,
                // IPNet weights (when inherited) for the leading slice.
                let fan_in = fused_fan_in(&l.kind);
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
                for v in arr.data.iter_mut() {
                    *v = rand_distr::Distribution::sample(&normal, rng);
                }
                if inherit {
                    copy_leading_inputs(&l.kind, src, &mut arr);
                }
            } else {
                return Err(Error::Transfer {
                    layer: name,
                    reason: format!("shape {:?} vs {:?}", src.shape, shape),
                });
            }
            params.insert(name, arr);
        }
    }
    for (k, v) in ipnet.params.provenance() {
        params.set_provenance(&format!("ip.{k}"), v.clone());
    }
    if fusion_init == FusionInit::Random {
        params.set_provenance("ip.dn", Provenance::Random);
    }
    Ok(())
}

fn fused_fan_in(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Conv {
            in_channels, kernel, ..
        } => in_channels * kernel * kernel,
        LayerKind::ConvTranspose {
            in_channels,
            kernel,
            stride,
            ..
        } => (in_channels * kernel * kernel / (stride * stride)).max(1),
        _ => 1,
    }
}

/// Copy `src` into the leading input-channel slice of `dst` (same layer, more inputs).
fn copy_leading_inputs(kind: &LayerKind, src: &ParamArray, dst: &mut ParamArray) {
    match kind {
        LayerKind::Conv { .. } => {
            // [out, in, k, k]
            let (out, in_src, kk) = (src.shape[0], src.shape[1], src.shape[2] * src.shape[3]);
            let in_dst = dst.shape[1];
            for o in 0..out {
                let s = &src.data[o * in_src * kk..(o + 1) * in_src * kk];
                dst.data[o * in_dst * kk..o * in_dst * kk + in_src * kk].copy_from_slice(s);
            }
        }
        LayerKind::ConvTranspose { .. } => {
            // [in, out, k, k]: leading input rows are contiguous.
            dst.data[..src.data.len()].copy_from_slice(&src.data);
        }
        _ => {}
    }
}

/// Prediction-steering parser: PPNet (both encoder and decoder, reading `past`), AdapNet on
/// the PPNet features, and an IPNet (reading `frame`) whose decoder consumes the channel
/// concatenation of its own encoder features and the adapted PPNet features.
pub fn assemble_pspnet<R: Rng + ?Sized>(
    ppnet: &Built,
    ipnet: &Built,
    adapnet: &Built,
    fusion_init: FusionInit,
    rng: &mut R,
) -> Result<Composite> {
    let mut layers: Vec<LayerSpec> = Vec::new();
    for spec in [&ppnet.spec, &ipnet.spec] {
        for l in spec.layers.iter().filter(|l| matches!(l.kind, LayerKind::Input { .. })) {
            if !layers.iter().any(|x| x.name == l.name) {
                layers.push(l.clone());
            }
        }
    }
    let pp_keep = |n: &str| is_input(&ppnet.spec, n);
    layers.extend(prefixed_layers(&ppnet.spec.layers, "pp", &pp_keep));
    let mut params = ParameterStore::new();
    params.merge_prefixed(&ppnet.params, "pp");

    let (pp_feat, pp_c, pp_stride) = features_of(&ppnet.spec)?;
    let pp_out = ppnet
        .spec
        .outputs
        .first()
        .ok_or_else(|| Error::Spec("PPNet has no output".into()))?;
    fuse_into_ipnet(
        ipnet,
        adapnet,
        &rename(&pp_feat, "pp"),
        pp_c,
        pp_stride,
        fusion_init,
        rng,
        &mut layers,
        &mut params,
    )?;

    let ip_out = ipnet
        .spec
        .outputs
        .first()
        .ok_or_else(|| Error::Spec("IPNet has no output".into()))?;
    let mut spec = NetworkSpec::new("pspnet");
    spec.layers = layers;
    spec.outputs = vec![rename(pp_out, "pp"), rename(ip_out, "ip")];
    spec.taps
        .insert("pp.features".into(), rename(&pp_feat, "pp"));
    spec.taps
        .insert("ip.features".into(), rename(ipnet.spec.tap(FEATURES_TAP)?, "ip"));
    let net = Network::new(spec)?;
    params.check_against(net.spec())?;
    Ok(Composite {
        kind: CompositeKind::Pspnet,
        net,
        params,
    })
}

/// Fixed-feature variant: only the encoder of `feature_net` (a generator or a PPNet) is
/// wired through AdapNet into the IPNet; its weights are frozen and it has no parsing head.
pub fn assemble_frozen_variant<R: Rng + ?Sized>(
    feature_net: &Built,
    ipnet: &Built,
    adapnet: &Built,
    fusion_init: FusionInit,
    rng: &mut R,
) -> Result<Composite> {
    let enc_layers = section_layers(&feature_net.spec, "en");
    let mut layers: Vec<LayerSpec> = Vec::new();
    for l in enc_layers.iter().chain(ipnet.spec.layers.iter()) {
        if matches!(l.kind, LayerKind::Input { .. }) && !layers.iter().any(|x| x.name == l.name) {
            layers.push(l.clone());
        }
    }
    let keep = |n: &str| is_input(&feature_net.spec, n);
    layers.extend(prefixed_layers(&enc_layers, "feat", &keep));
    let mut params = ParameterStore::new();
    let enc_params: Vec<(String, ParamArray)> = feature_net
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("en."))
        .map(|(k, v)| (rename(k, "feat"), v.clone()))
        .collect();
    for (k, v) in enc_params {
        params.insert(k, v);
    }
    let source_stage = if feature_net.spec.name == "ppnet" { "pp" } else { "fp" };
    params.set_provenance("feat.en", Provenance::TransferredFrom(source_stage.into()));
    params.freeze("feat.en");

    let (feat, c, stride) = features_of(&feature_net.spec)?;
    fuse_into_ipnet(
        ipnet,
        adapnet,
        &rename(&feat, "feat"),
        c,
        stride,
        fusion_init,
        rng,
        &mut layers,
        &mut params,
    )?;
    let ip_out = ipnet
        .spec
        .outputs
        .first()
        .ok_or_else(|| Error::Spec("IPNet has no output".into()))?;
    let mut spec = NetworkSpec::new("frozen_variant");
    spec.layers = layers;
    spec.outputs = vec![rename(ip_out, "ip")];
    spec.taps.insert("feat.features".into(), rename(&feat, "feat"));
    spec.taps
        .insert("ip.features".into(), rename(ipnet.spec.tap(FEATURES_TAP)?, "ip"));
    let net = Network::new(spec)?;
    params.check_against(net.spec())?;
    Ok(Composite {
        kind: CompositeKind::FrozenFeatures,
        net,
        params,
    })
}
