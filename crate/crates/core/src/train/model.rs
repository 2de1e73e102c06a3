//! Trained networks as runnable models: input preparation, batch assembly, loss and
//! gradient evaluation, and reconstruction from checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{combined_spec_hash, load_checkpoint, Checkpoint};
use super::Stage;
use crate::data::{
    denormalize_prediction, normalize_for_parsing_scaled, normalize_for_prediction, CropWindow, Frame,
    LabelMap, Normalization, SequenceSample,
};
use crate::error::{Error, Result};
use crate::eval::{CausalContext, FlowField, FlowProvider, ParsingModel};
use crate::losses::{
    adversarial_loss, discriminator_loss, generator_loss, pspnet_loss, reconstruction_loss, weighted_ce_loss,
    LossConfig, LossValue,
};
use crate::nets::presets::{
    build_ppnet_random, DISCRIMINATOR_OUTPUT, FLOW_CHANNELS, FRAME_INPUT, GENERATOR_OUTPUT, PAST_INPUT,
    RGB,
};
use crate::nets::{
    assemble_frozen_variant, assemble_pspnet, build_adapnet, build_discriminator, build_generator, build_ipnet,
    discriminator_spec, ArchConfig, Built, FusionInit, Gradients, Network, NetworkSpec, ParameterStore,
};
use crate::tensor::Tensor;

/// Mean subtraction followed by a global scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub scale: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm {
            mean: [127.5; 3],
            scale: 1.0 / 127.5,
        }
    }
}

impl InputNorm {
    pub fn apply(&self, frame: &Frame) -> Result<Frame> {
        normalize_for_parsing_scaled(frame, self.mean, self.scale)
    }
}

/// Normalization of the past-frame input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastNorm {
    /// Same mean subtraction as the current frame.
    #[default]
    Parsing,
    /// The [-1, 1] range frame prediction was trained on.
    Prediction,
}

/// Optical flow appended to the current frame as extra input channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowInput {
    pub provider: FlowProvider,
    /// Multiplier from pixels to input units.
    pub scale: f64,
}

/// Everything besides parameters needed to rebuild and run a stage's network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelMeta {
    pub arch: ArchConfig,
    pub s: usize,
    /// 0 for frame prediction.
    pub num_classes: usize,
    pub input: InputNorm,
    pub past_norm: PastNorm,
    pub flow: Option<FlowInput>,
    pub class_weights: Option<Vec<f64>>,
    /// Stage whose encoder feeds a frozen-feature variant.
    pub feature_source: Option<Stage>,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta {
            arch: ArchConfig::default(),
            s: 4,
            num_classes: 0,
            input: InputNorm::default(),
            past_norm: PastNorm::Parsing,
            flow: None,
            class_weights: None,
            feature_source: None,
        }
    }
}

/// Network inputs and targets for one minibatch.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    /// `[N, 3s, H, W]`, nearest past frame in the first three channels.
    pub past: Option<Tensor>,
    /// `[N, 3 (+2 flow), H, W]`.
    pub frame: Option<Tensor>,
    /// Frame-prediction target `[N, 3, H, W]` in [-1, 1].
    pub target: Option<Tensor>,
    pub labels: Vec<LabelMap>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels
            .len()
            .max(self.past.as_ref().map_or(0, |t| t.n()))
            .max(self.frame.as_ref().map_or(0, |t| t.n()))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn inputs(&self) -> Vec<(&str, &Tensor)> {
        let mut v = Vec::new();
        if let Some(p) = &self.past {
            v.push((PAST_INPUT, p));
        }
        if let Some(f) = &self.frame {
            v.push((FRAME_INPUT, f));
        }
        v
    }

    fn label_refs(&self) -> Vec<&LabelMap> {
        self.labels.iter().collect()
    }
}

/// A sample paired with the flow into its target frame, when the model reads flow.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub sample: SequenceSample,
    pub flow: Option<FlowField>,
}

pub fn crop_flow(flow: &FlowField, w: CropWindow) -> Result<FlowField> {
    let mut data = Vec::with_capacity(w.height * w.width * 2);
    for y in w.top..w.top + w.height {
        for x in w.left..w.left + w.width {
            let (dx, dy) = flow.at(y, x);
            data.extend_from_slice(&[dx, dy]);
        }
    }
    FlowField::new(w.height, w.width, data)
}

/// Mirror left to right; horizontal displacements change sign.
pub fn flip_flow(flow: &FlowField) -> FlowField {
    let (h, w) = (flow.height(), flow.width());
    let mut out = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, w - 1 - x);
            out.set(y, x, -dx, dy);
        }
    }
    out
}

fn stack_frames(frames: &[Vec<&Frame>], extra: Option<Vec<Vec<f64>>>) -> Result<Tensor> {
    let first = frames
        .first()
        .and_then(|f| f.first())
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let hw = h * w;
    let per = frames[0].len();
    let extra_c = extra.as_ref().map_or(0, |e| e[0].len() / hw);
    let c = RGB * per + extra_c;
    let mut t = Tensor::zeros([frames.len(), c, h, w]);
    for (n, group) in frames.iter().enumerate() {
        if group.len() != per {
            return Err(Error::Shape("samples disagree on frame count".into()));
        }
        let dst = t.sample_mut(n);
        for (k, f) in group.iter().enumerate() {
            if f.height() != h || f.width() != w {
                return Err(Error::Shape("frames in a batch differ in size".into()));
            }
            f.write_planar(&mut dst[k * RGB * hw..(k + 1) * RGB * hw]);
        }
        if let Some(e) = &extra {
            dst[RGB * per * hw..].copy_from_slice(&e[n]);
        }
    }
    Ok(t)
}

/// Which inputs and loss a parser stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParserShape {
    PastOnly,
    FrameOnly,
    Both,
}

fn parser_shape(stage: Stage) -> Result<ParserShape> {
    match stage {
        Stage::Pp => Ok(ParserShape::PastOnly),
        Stage::IpnetBaseline | Stage::FlowAugmentedBaseline => Ok(ParserShape::FrameOnly),
        Stage::Psp | Stage::FrozenVariant => Ok(ParserShape::Both),
        Stage::Fp => Err(Error::InvalidArgument("frame prediction is not a parsing stage".into())),
    }
}

/// A parsing network of any stage with its parameters and input conventions.
#[derive(Clone, Debug)]
pub struct ParserNet {
    pub stage: Stage,
    pub net: Network,
    pub params: ParameterStore,
    pub meta: ModelMeta,
}

impl ParserNet {
    pub fn new(stage: Stage, net: Network, params: ParameterStore, meta: ModelMeta) -> Result<Self> {
        parser_shape(stage)?;
        params.check_against(net.spec())?;
        Ok(ParserNet {
            stage,
            net,
            params,
            meta,
        })
    }

    pub fn spec_hash(&self) -> String {
        self.net.spec().hash()
    }

    /// Index of the output scored at inference (the fused head for PSPNet).
    pub fn inference_output(&self) -> usize {
        match self.stage {
            Stage::Psp => 1,
            _ => 0,
        }
    }

    fn past_frame(&self, f: &Frame) -> Result<Frame> {
        match self.meta.past_norm {
            PastNorm::Parsing => self.meta.input.apply(f),
            PastNorm::Prediction => normalize_for_prediction(f),
        }
    }

    /// Normalize raw samples and stack them into network inputs.
    pub fn batch(&self, samples: &[RawSample]) -> Result<Batch> {
        let shape = parser_shape(self.stage)?;
        let mut out = Batch::default();
        if shape != ParserShape::FrameOnly {
            let normed: Vec<Vec<Frame>> = samples
                .iter()
                .map(|r| r.sample.past.iter().map(|f| self.past_frame(f)).collect())
                .collect::<Result<_>>()?;
            let refs: Vec<Vec<&Frame>> = normed.iter().map(|v| v.iter().collect()).collect();
            out.past = Some(stack_frames(&refs, None)?);
        }
        if shape != ParserShape::PastOnly {
            let normed: Vec<Frame> = samples
                .iter()
                .map(|r| self.meta.input.apply(&r.sample.target))
                .collect::<Result<_>>()?;
            let refs: Vec<Vec<&Frame>> = normed.iter().map(|f| vec![f]).collect();
            let extra = match &self.meta.flow {
                Some(fi) => Some(
                    samples
                        .iter()
                        .map(|r| {
                            r.flow
                                .as_ref()
                                .map(|f| f.planar(fi.scale))
                                .ok_or_else(|| Error::InvalidArgument("flow input missing from sample".into()))
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            out.frame = Some(stack_frames(&refs, extra)?);
        }
        out.labels = samples.iter().filter_map(|r| r.sample.label.clone()).collect();
        Ok(out)
    }

    /// Training loss on a labeled batch.
    pub fn loss(&self, batch: &Batch, loss: &LossConfig) -> Result<LossValue> {
        Ok(self.loss_and_grads_inner(batch, loss, false)?.0)
    }

    pub fn loss_and_grads(&self, batch: &Batch, loss: &LossConfig) -> Result<(LossValue, Gradients)> {
        let (v, g) = self.loss_and_grads_inner(batch, loss, true)?;
        Ok((v, g.expect("gradients requested")))
    }

    fn loss_and_grads_inner(
        &self,
        batch: &Batch,
        loss: &LossConfig,
        want_grads: bool,
    ) -> Result<(LossValue, Option<Gradients>)> {
        if batch.labels.len() != batch.len() || batch.is_empty() {
            return Err(Error::InvalidArgument("parser training needs one label per sample".into()));
        }
        let weights = loss.weights_for(self.meta.num_classes)?;
        let acts = self.net.forward(&self.params, &batch.inputs())?;
        let labels = batch.label_refs();
        let outs = &self.net.spec().outputs;
        let (value, seeds) = match self.stage {
            Stage::Psp => {
                let (v, g_pp, g_ip) = pspnet_loss(
                    self.net.output(&acts, 0),
                    self.net.output(&acts, 1),
                    &labels,
                    &weights,
                    loss.lambda_ip,
                    loss.pp_mining(),
                    loss.ip_mining(),
                )?;
                (v, vec![(outs[0].as_str(), g_pp), (outs[1].as_str(), g_ip)])
            }
            stage => {
                let mining = if stage == Stage::Pp {
                    loss.pp_mining()
                } else {
                    loss.ip_mining()
                };
                let (v, g) = weighted_ce_loss(self.net.output(&acts, 0), &labels, &weights, mining)?;
                (v, vec![(outs[0].as_str(), g)])
            }
        };
        if !want_grads {
            return Ok((value, None));
        }
        let grads = self.net.backward(&self.params, &acts, seeds, &[])?;
        Ok((value, Some(grads)))
    }

    /// Class probabilities `[N, C, H, W]` for a prepared batch.
    pub fn probs(&self, batch: &Batch) -> Result<Tensor> {
        let mut outs = self.net.predict(&self.params, &batch.inputs())?;
        let mut t = outs.swap_remove(self.inference_output());
        t.data_mut().iter_mut().for_each(|v| *v = v.exp());
        Ok(t)
    }

    fn sample_from_context(&self, ctx: &CausalContext<'_>) -> Result<RawSample> {
        let past = ctx.past(self.meta.s)?;
        let sample = SequenceSample::new(past, ctx.current().clone(), None, ctx.clip_id, ctx.index)?;
        let flow = match &self.meta.flow {
            Some(fi) => Some(ctx.flow_to_current(&fi.provider)?),
            None => None,
        };
        Ok(RawSample { sample, flow })
    }
}

impl ParsingModel for ParserNet {
    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn predict_probs(&self, ctx: &CausalContext<'_>) -> Result<Tensor> {
        let raw = self.sample_from_context(ctx)?;
        self.probs(&self.batch(std::slice::from_ref(&raw))?)
    }
}

/// Generator and discriminator sharing one parameter store (`en.`/`out.` and `d.`).
#[derive(Clone, Debug)]
pub struct FrameModel {
    pub generator: Network,
    pub discriminator: Network,
    pub params: ParameterStore,
    pub meta: ModelMeta,
}

/// Losses of one discriminator or generator evaluation.
#[derive(Clone, Debug)]
pub struct AdversarialTerms {
    pub loss: LossValue,
    pub mean_d_real: f64,
    pub mean_d_fake: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl FrameModel {
    pub fn new(generator: Built, discriminator: Built, meta: ModelMeta) -> Result<Self> {
        let mut params = generator.params.clone();
        for (k, v) in discriminator.params.iter() {
            if params.get(k).is_some() {
                return Err(Error::Spec(format!("generator and discriminator both define `{k}`")));
            }
            params.insert(k.clone(), v.clone());
        }
        for (s, p) in discriminator.params.provenance() {
            params.set_provenance(s, p.clone());
        }
        Ok(FrameModel {
            generator: generator.network()?,
            discriminator: discriminator.network()?,
            params,
            meta,
        })
    }

    pub fn spec_hash(&self) -> String {
        combined_spec_hash(&[self.generator.spec(), self.discriminator.spec()])
    }

    /// Past frames and target normalized to [-1, 1].
    pub fn batch(&self, samples: &[RawSample]) -> Result<Batch> {
        let past: Vec<Vec<Frame>> = samples
            .iter()
            .map(|r| r.sample.past.iter().map(normalize_for_prediction).collect())
            .collect::<Result<_>>()?;
        let target: Vec<Frame> = samples
            .iter()
            .map(|r| normalize_for_prediction(&r.sample.target))
            .collect::<Result<_>>()?;
        let past_refs: Vec<Vec<&Frame>> = past.iter().map(|v| v.iter().collect()).collect();
        let target_refs: Vec<Vec<&Frame>> = target.iter().map(|f| vec![f]).collect();
        Ok(Batch {
            past: Some(stack_frames(&past_refs, None)?),
            frame: None,
            target: Some(stack_frames(&target_refs, None)?),
            labels: vec![],
        })
    }

    fn parts<'a>(&self, batch: &'a Batch) -> Result<(&'a Tensor, &'a Tensor)> {
        match (&batch.past, &batch.target) {
            (Some(p), Some(t)) => Ok((p, t)),
            _ => Err(Error::InvalidArgument("frame prediction needs past frames and a target".into())),
        }
    }

    pub fn predict(&self, past: &Tensor) -> Result<Tensor> {
        Ok(self.generator.predict(&self.params, &[(PAST_INPUT, past)])?.swap_remove(0))
    }

    /// Predict the next raw frame from raw past frames (nearest first).
    pub fn predict_frame(&self, past: &[Frame]) -> Result<Frame> {
        let normed: Vec<Frame> = past.iter().map(normalize_for_prediction).collect::<Result<_>>()?;
        let t = stack_frames(&[normed.iter().collect()], None)?;
        let out = self.predict(&t)?;
        let f = Frame::from_planar(out.h(), out.w(), Normalization::Prediction, out.sample(0))?;
        denormalize_prediction(&f)
    }

    fn discriminate(&self, frames: &Tensor) -> Result<(crate::nets::Activations, Vec<f64>)> {
        let acts = self.discriminator.forward(&self.params, &[(FRAME_INPUT, frames)])?;
        let probs = self.discriminator.output(&acts, 0).data().to_vec();
        Ok((acts, probs))
    }

    fn d_terms(&self, batch: &Batch, want_grads: bool) -> Result<(AdversarialTerms, Option<Gradients>)> {
        let (past, target) = self.parts(batch)?;
        let fake = self.predict(past)?;
        let (acts_f, p_fake) = self.discriminate(&fake)?;
        let (acts_r, p_real) = self.discriminate(target)?;
        let (loss, g_fake, g_real) = discriminator_loss(&p_fake, &p_real)?;
        let terms = AdversarialTerms {
            loss,
            mean_d_real: mean(&p_real),
            mean_d_fake: mean(&p_fake),
        };
        if !want_grads {
            return Ok((terms, None));
        }
        let shape = [p_fake.len(), 1, 1, 1];
        let mut grads = self.discriminator.backward(
            &self.params,
            &acts_f,
            vec![(DISCRIMINATOR_OUTPUT, Tensor::from_vec(shape, g_fake)?)],
            &[],
        )?;
        grads.accumulate(self.discriminator.backward(
            &self.params,
            &acts_r,
            vec![(DISCRIMINATOR_OUTPUT, Tensor::from_vec(shape, g_real)?)],
            &[],
        )?);
        Ok((terms, Some(grads)))
    }

    /// Discriminator loss with the generator fixed.
    pub fn d_loss(&self, batch: &Batch) -> Result<AdversarialTerms> {
        Ok(self.d_terms(batch, false)?.0)
    }

    /// Discriminator loss and gradients for the `d.` parameters only.
    pub fn d_grads(&self, batch: &Batch) -> Result<(AdversarialTerms, Gradients)> {
        let (t, g) = self.d_terms(batch, true)?;
        Ok((t, g.expect("gradients requested")))
    }

    fn g_terms(&mut self, batch: &Batch, loss: &LossConfig, want_grads: bool) -> Result<(LossValue, Option<Gradients>)> {
        let (past, target) = self.parts(batch)?;
        let acts = self.generator.forward(&self.params, &[(PAST_INPUT, past)])?;
        let fake = self.generator.output(&acts, 0);
        let (rec, mut g_out) = reconstruction_loss(fake, target, loss.rec_norm)?;
        let adv_needed = loss.lambda_adv > 0.0;
        let adv = if adv_needed {
            self.params.freeze("d");
            let r = (|| -> Result<(LossValue, Tensor)> {
                let (acts_d, p_fake) = self.discriminate(fake)?;
                let (adv, g) = adversarial_loss(&p_fake)?;
                if !want_grads {
                    return Ok((adv, Tensor::zeros([0, 0, 0, 0])));
                }
                let gd = self.discriminator.backward(
                    &self.params,
                    &acts_d,
                    vec![(DISCRIMINATOR_OUTPUT, Tensor::from_vec([p_fake.len(), 1, 1, 1], g)?)],
                    &[FRAME_INPUT],
                )?;
                let dx = gd
                    .inputs
                    .get(FRAME_INPUT)
                    .cloned()
                    .ok_or_else(|| Error::Spec("discriminator produced no input gradient".into()))?;
                Ok((adv, dx))
            })();
            self.params.unfreeze("d");
            let (adv, mut dx) = r?;
            if want_grads {
                dx.scale(loss.lambda_adv);
                g_out.add_assign(&dx)?;
            }
            adv
        } else {
            LossValue::scalar(0.0)
        };
        let total = generator_loss(&rec, &adv, loss.lambda_adv)?;
        if !want_grads {
            return Ok((total, None));
        }
        let grads = self
            .generator
            .backward(&self.params, &acts, vec![(GENERATOR_OUTPUT, g_out)], &[])?;
        Ok((total, Some(grads)))
    }

    /// Generator loss `rec + lambda_adv * adv` with the discriminator fixed.
    pub fn g_loss(&mut self, batch: &Batch, loss: &LossConfig) -> Result<LossValue> {
        Ok(self.g_terms(batch, loss, false)?.0)
    }

    pub fn g_grads(&mut self, batch: &Batch, loss: &LossConfig) -> Result<(LossValue, Gradients)> {
        let (v, g) = self.g_terms(batch, loss, true)?;
        Ok((v, g.expect("gradients requested")))
    }

    /// The generator alone as a built network.
    pub fn generator_built(&self) -> Built {
        Built {
            spec: self.generator.spec().clone(),
            params: self.params.extract_sections(self.generator.spec()),
        }
    }
}

/// A runnable model of any stage.
#[derive(Clone, Debug)]
pub enum StageModel {
    Frame(FrameModel),
    Parser(ParserNet),
}

impl StageModel {
    pub fn stage(&self) -> Stage {
        match self {
            StageModel::Frame(_) => Stage::Fp,
            StageModel::Parser(p) => p.stage,
        }
    }

    pub fn params(&self) -> &ParameterStore {
        match self {
            StageModel::Frame(m) => &m.params,
            StageModel::Parser(p) => &p.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        match self {
            StageModel::Frame(m) => &mut m.params,
            StageModel::Parser(p) => &mut p.params,
        }
    }

    pub fn meta(&self) -> &ModelMeta {
        match self {
            StageModel::Frame(m) => &m.meta,
            StageModel::Parser(p) => &p.meta,
        }
    }

    pub fn spec_hash(&self) -> String {
        match self {
            StageModel::Frame(m) => m.spec_hash(),
            StageModel::Parser(p) => p.spec_hash(),
        }
    }
}

fn init_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Architecture of `stage` with freshly initialized parameters.
pub fn build_stage_model(stage: Stage, meta: &ModelMeta, rng: &mut ChaCha8Rng) -> Result<StageModel> {
    let arch = &meta.arch;
    let c = meta.num_classes;
    let adapnet = |rng: &mut ChaCha8Rng| build_adapnet(arch.encoder_channels(), arch.adapnet_depth, rng);
    Ok(match stage {
        Stage::Fp => {
            let g = build_generator(arch, meta.s, rng)?;
            let d = build_discriminator(discriminator_spec(arch)?, rng)?;
            StageModel::Frame(FrameModel::new(g, d, meta.clone())?)
        }
        Stage::Pp => {
            let b = build_ppnet_random(arch, meta.s, c, rng)?;
            StageModel::Parser(ParserNet::new(stage, b.network()?, b.params, meta.clone())?)
        }
        Stage::IpnetBaseline | Stage::FlowAugmentedBaseline => {
            let flow = if stage == Stage::FlowAugmentedBaseline {
                FLOW_CHANNELS
            } else {
                0
            };
            let b = build_ipnet(arch, c, flow, rng)?;
            StageModel::Parser(ParserNet::new(stage, b.network()?, b.params, meta.clone())?)
        }
        Stage::Psp => {
            let pp = build_ppnet_random(arch, meta.s, c, rng)?;
            let ip = build_ipnet(arch, c, 0, rng)?;
            let comp = assemble_pspnet(&pp, &ip, &adapnet(rng)?, FusionInit::Random, rng)?;
            StageModel::Parser(ParserNet::new(stage, comp.net, comp.params, meta.clone())?)
        }
        Stage::FrozenVariant => {
            let feat = match meta.feature_source {
                Some(Stage::Pp) => build_ppnet_random(arch, meta.s, c, rng)?,
                _ => build_generator(arch, meta.s, rng)?,
            };
            let ip = build_ipnet(arch, c, 0, rng)?;
            let comp = assemble_frozen_variant(&feat, &ip, &adapnet(rng)?, FusionInit::Random, rng)?;
            StageModel::Parser(ParserNet::new(stage, comp.net, comp.params, meta.clone())?)
        }
    })
}

/// Rebuild a stage model from a decoded checkpoint, verifying the architecture hash.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<StageModel> {
    let mut model = build_stage_model(ck.meta.stage, &ck.meta.model, &mut init_rng())?;
    let hash = model.spec_hash();
    let params = ck.params_for(&hash)?.clone();
    let expected: Vec<&String> = model.params().names().collect();
    let found: Vec<&String> = params.names().collect();
    if expected != found {
        return Err(Error::Checkpoint("checkpoint arrays do not match the rebuilt network".into()));
    }
    for (k, v) in model.params().iter() {
        if params.get(k).map(|p| &p.shape) != Some(&v.shape) {
            return Err(Error::Checkpoint(format!("array `{k}` has the wrong shape")));
        }
    }
    *model.params_mut() = params;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<(StageModel, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    let model = model_from_checkpoint(&ck)?;
    Ok((model, ck))
}

/// Sections of `params` that belong to layers of `spec`.
pub(crate) trait ExtractSections {
    fn extract_sections(&self, spec: &NetworkSpec) -> ParameterStore;
}

impl ExtractSections for ParameterStore {
    fn extract_sections(&self, spec: &NetworkSpec) -> ParameterStore {
        let layers: BTreeMap<&str, ()> = spec.layers.iter().map(|l| (l.name.as_str(), ())).collect();
        let mut out = ParameterStore::new();
        for (k, v) in self.iter() {
            let layer = k.rsplit_once('.').map_or(k.as_str(), |(l, _)| l);
            if layers.contains_key(layer) {
                out.insert(k.clone(), v.clone());
            }
        }
        for (s, p) in self.provenance() {
            if spec.layers.iter().any(|l| l.name.starts_with(&format!("{s}."))) {
                out.set_provenance(s, p.clone());
            }
        }
        for s in self.frozen_sections() {
            if spec.layers.iter().any(|l| l.name.starts_with(&format!("{s}."))) {
                out.freeze(s);
            }
        }
        out
    }
}
