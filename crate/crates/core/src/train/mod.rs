//! Stage orchestration: adversarial frame prediction, predictive parsing, joint
//! prediction-steered parsing, baselines, and checkpointing.

pub mod checkpoint;
pub mod model;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::io::{Split, VideoDataset};
use crate::data::sampling::{fp_windows, pp_windows, select_fp_windows, sequence_at, WindowRef};
use crate::data::{
    apply_augmentation, channel_mean, class_weights_for, draw_augmentation, load_dataset, AugmentOptions,
    MotionConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, CausalContext, EvalOptions, FlowField, FlowProvider, MetricsReport};
use crate::losses::LossConfig;
use crate::nets::presets::build_ppnet_from_fpnet;
use crate::nets::{
    assemble_frozen_variant, assemble_pspnet, build_adapnet, build_generator, build_ipnet, ArchConfig, Built,
    FusionInit, Gradients, ParameterStore, Provenance,
};

pub use checkpoint::{
    combined_spec_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, Dtype, OptimizerMeta, CHECKPOINT_MAGIC,
};
pub use model::{
    build_stage_model, crop_flow, flip_flow, load_model, model_from_checkpoint, AdversarialTerms, Batch, FlowInput,
    FrameModel, InputNorm, ModelMeta, ParserNet, PastNorm, RawSample, StageModel,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Fp,
    Pp,
    Psp,
    #[serde(alias = "baseline")]
    IpnetBaseline,
    FrozenVariant,
    #[serde(alias = "flow-augmented")]
    FlowAugmentedBaseline,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Fp,
        Stage::Pp,
        Stage::Psp,
        Stage::IpnetBaseline,
        Stage::FrozenVariant,
        Stage::FlowAugmentedBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Fp => "fp",
            Stage::Pp => "pp",
            Stage::Psp => "psp",
            Stage::IpnetBaseline => "ipnet-baseline",
            Stage::FrozenVariant => "frozen-variant",
            Stage::FlowAugmentedBaseline => "flow-augmented-baseline",
        }
    }

    pub fn is_parser(self) -> bool {
        self != Stage::Fp
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Training configuration; the JSON form uses these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Dataset root; its `val` clips are the held-out split unless `val_dataset` is set.
    pub dataset: Option<PathBuf>,
    pub val_dataset: Option<PathBuf>,
    /// Past frames per sample.
    pub s: usize,
    pub batch_size: usize,
    /// Steps to run; a resumed run continues numbering from the checkpoint's step.
    pub steps: u64,
    pub optimizer: OptimizerConfig,
    /// Discriminator optimizer; `None` reuses `optimizer`.
    pub d_optimizer: Option<OptimizerConfig>,
    /// Discriminator updates per step.
    pub d_steps: usize,
    /// Generator updates per step.
    pub g_steps: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Predecessor-stage checkpoint, or a same-stage checkpoint to resume.
    pub checkpoint_in: Option<PathBuf>,
    /// Trained single-frame parser whose weights seed the IPNet branch.
    pub ipnet_checkpoint: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    /// Intermediate snapshot period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub checkpoint_dtype: Dtype,
    /// JSON-lines loss log.
    pub log_path: Option<PathBuf>,
    /// Start predictive parsing from a random encoder instead of an fp checkpoint.
    pub random_init: bool,
    /// Allow psp / frozen-variant without their predecessor checkpoint.
    pub pipeline_override: bool,
    pub arch: ArchConfig,
    pub motion: MotionConfig,
    /// Temporal reversal applies to frame prediction only.
    pub augment: AugmentOptions,
    pub max_fp_windows: usize,
    /// Derive class weights from training labels when `loss.class_weights` is unset.
    pub class_weighting: bool,
    /// Scale applied after mean subtraction for parsing inputs.
    pub input_scale: f64,
    /// Keep the IPNet decoder weights for its own features when fusing; defaults to
    /// true exactly when `ipnet_checkpoint` is given.
    pub inherit_fusion: Option<bool>,
    pub flow_provider: FlowProvider,
    pub flow_scale: f64,
    /// Validation period in steps; 0 disables periodic validation.
    pub val_every: u64,
    pub validate_at_end: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Fp,
            dataset: None,
            val_dataset: None,
            s: 4,
            batch_size: 4,
            steps: 200,
            optimizer: OptimizerConfig::default(),
            d_optimizer: None,
            d_steps: 1,
            g_steps: 1,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_in: None,
            ipnet_checkpoint: None,
            checkpoint_out: None,
            checkpoint_every: 0,
            checkpoint_dtype: Dtype::F32,
            log_path: None,
            random_init: false,
            pipeline_override: false,
            arch: ArchConfig::default(),
            motion: MotionConfig::default(),
            augment: AugmentOptions {
                crop_size: None,
                flip: true,
                temporal_reverse: true,
            },
            max_fp_windows: 100_000,
            class_weighting: true,
            input_scale: 1.0 / 127.5,
            inherit_fusion: None,
            flow_provider: FlowProvider::SyntheticTruth,
            flow_scale: 0.25,
            val_every: 0,
            validate_at_end: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.s == 0 {
            return bad("s must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.stage == Stage::Fp && self.d_steps + self.g_steps == 0 {
            return bad("d_steps and g_steps cannot both be 0");
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return bad("input_scale must be positive");
        }
        if !self.flow_scale.is_finite() {
            return bad("flow_scale must be finite");
        }
        if self.random_init && self.stage != Stage::Pp {
            return bad("random_init applies to the pp stage only");
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Some(d) = &self.d_optimizer {
            d.validate()?;
        }
        Ok(())
    }
}

/// Apply `key=value` overrides to any serializable config. Keys are dotted field paths
/// (`-` reads as `_`); values parse as JSON, falling back to a plain string.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(cfg: &T, overrides: &[(String, String)]) -> Result<T> {
    let mut v = serde_json::to_value(cfg)?;
    for (key, raw) in overrides {
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let parts: Vec<String> = key.split('.').map(|p| p.replace('-', "_")).collect();
        let mut slot = &mut v;
        for (i, p) in parts.iter().enumerate() {
            if slot.is_null() {
                *slot = serde_json::Value::Object(Default::default());
            }
            let obj = slot
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
            slot = obj.entry(p.clone()).or_insert(serde_json::Value::Null);
        }
        *slot = parsed;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngProvenance {
    pub algorithm: String,
    pub seed: u64,
    /// Stream used for parameter initialization.
    pub init_stream: u64,
    /// Stream used for batch order and augmentation.
    pub data_stream: u64,
}

impl RngProvenance {
    fn new(seed: u64) -> Self {
        RngProvenance {
            algorithm: "chacha8".into(),
            seed,
            init_stream: INIT_STREAM,
            data_stream: DATA_STREAM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub seed: u64,
    pub start_step: u64,
    pub end_step: u64,
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    /// Not serialized, so identical runs write identical reports.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
    pub rng: RngProvenance,
    pub provenance: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl TrainReport {
    /// Losses only, for comparing runs.
    pub fn loss_trace(&self) -> Vec<(u64, f64)> {
        self.steps.iter().map(|r| (r.step, r.loss)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Training and held-out data for one run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: VideoDataset,
    pub val: Option<VideoDataset>,
}

impl TrainData {
    /// Split one dataset by its clip split flags.
    pub fn from_dataset(dataset: VideoDataset) -> Self {
        let val = dataset.filter_split(Split::Val);
        let train = dataset.filter_split(Split::Train);
        TrainData {
            train,
            val: (!val.clips.is_empty()).then_some(val),
        }
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let root = cfg
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("`dataset` is required".into()))?;
        let mut data = TrainData::from_dataset(load_dataset(root)?);
        if let Some(v) = &cfg.val_dataset {
            data.val = Some(load_dataset(v)?);
        }
        Ok(data)
    }
}

/// Result of a training run: the report and the final model.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: StageModel,
    /// Encoded final checkpoint (written to `checkpoint_out` when set).
    pub checkpoint: Vec<u8>,
}

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Windows a stage draws batches from, with per-window flow for flow-reading models.
struct Pool {
    windows: Vec<WindowRef>,
    flows: Option<Vec<FlowField>>,
    labeled: bool,
}

impl Pool {
    fn new(cfg: &TrainConfig, data: &VideoDataset, flow: Option<&FlowProvider>) -> Result<Self> {
        let labeled = cfg.stage.is_parser();
        let windows = if labeled {
            pp_windows(data, cfg.s, &cfg.motion)?
        } else {
            select_fp_windows(data, cfg.s, &cfg.motion, cfg.max_fp_windows, cfg.seed)?
        };
        if windows.is_empty() {
            return Err(Error::Dataset(format!(
                "no training windows for stage {} (check annotations and the motion threshold)",
                cfg.stage
            )));
        }
        let flows = match flow {
            Some(p) => Some(
                windows
                    .iter()
                    .map(|w| {
                        let clip = &data.clips[w.clip];
                        CausalContext::new(&clip.id, &clip.frames, clip.flows.as_deref(), w.index)?.flow_to_current(p)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Pool {
            windows,
            flows,
            labeled,
        })
    }

    fn draw(&self, data: &VideoDataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<RawSample>> {
        let mut opts = cfg.augment;
        if self.labeled {
            opts.temporal_reverse = false;
        }
        (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..self.windows.len());
                let sample = sequence_at(data, self.windows[i], cfg.s, self.labeled)?;
                let d = draw_augmentation(sample.target.height(), sample.target.width(), rng, &opts)?;
                let sample = apply_augmentation(&sample, &d)?;
                let flow = match &self.flows {
                    Some(f) => {
                        let mut f = f[i].clone();
                        if let Some(c) = d.crop {
                            f = crop_flow(&f, c)?;
                        }
                        if d.flip {
                            f = flip_flow(&f);
                        }
                        Some(f)
                    }
                    None => None,
                };
                Ok(RawSample { sample, flow })
            })
            .collect()
    }
}

/// Live optimizer state of a run.
struct Optimizers {
    groups: BTreeMap<String, Optimizer>,
}

impl Optimizers {
    fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let mut groups = BTreeMap::new();
        if cfg.stage == Stage::Fp {
            groups.insert("g".into(), Optimizer::new(cfg.optimizer.clone())?);
            let d = cfg.d_optimizer.clone().unwrap_or_else(|| cfg.optimizer.clone());
            groups.insert("d".into(), Optimizer::new(d)?);
        } else {
            groups.insert("opt".into(), Optimizer::new(cfg.optimizer.clone())?);
        }
        Ok(Optimizers { groups })
    }

    /// Restore moment buffers; the learning-rate settings come from the current config.
    fn restore(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut fresh = Optimizers::fresh(cfg)?;
        for (name, opt) in fresh.groups.iter_mut() {
            let t = ck.meta.optimizers.get(name).map_or(0, |m| m.t);
            *opt = Optimizer::restore(opt.config.clone(), t, &ck.optimizer_state(name))?;
        }
        Ok(fresh)
    }

    fn get(&mut self, name: &str) -> &mut Optimizer {
        self.groups.get_mut(name).expect("optimizer group exists")
    }

    fn meta(&self) -> BTreeMap<String, OptimizerMeta> {
        self.groups
            .iter()
            .map(|(k, o)| {
                (
                    k.clone(),
                    OptimizerMeta {
                        config: o.config.clone(),
                        t: o.t,
                    },
                )
            })
            .collect()
    }

    fn state(&self) -> BTreeMap<String, crate::nets::ParamArray> {
        let mut out = BTreeMap::new();
        for (g, o) in &self.groups {
            for (k, v) in o.state_arrays() {
                out.insert(format!("{g}.{k}"), v);
            }
        }
        out
    }
}

fn read_predecessor(path: &Path, what: &str) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io { .. } => Error::Pipeline(format!("{what} checkpoint {} cannot be read: {e}", path.display())),
        other => other,
    })
}

fn expect_stage(ck: &Checkpoint, allowed: &[Stage], stage: Stage) -> Result<()> {
    if allowed.contains(&ck.meta.stage) {
        return Ok(());
    }
    let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
    Err(Error::Pipeline(format!(
        "stage {stage} needs a checkpoint from {} but got one from {}; the pipeline is fp -> pp -> psp",
        names.join(" or "),
        ck.meta.stage
    )))
}

fn check_compatible(cfg: &TrainConfig, meta: &ModelMeta) -> Result<()> {
    if meta.s != cfg.s {
        return Err(Error::Config(format!("checkpoint uses s = {}, config has s = {}", meta.s, cfg.s)));
    }
    if meta.arch != cfg.arch {
        return Err(Error::Config("checkpoint architecture differs from `arch` in the config".into()));
    }
    Ok(())
}

fn parser_of(ck: &Checkpoint) -> Result<ParserNet> {
    match model_from_checkpoint(ck)? {
        StageModel::Parser(p) => Ok(p),
        StageModel::Frame(_) => Err(Error::Pipeline("expected a parsing checkpoint".into())),
    }
}

fn generator_of(ck: &Checkpoint) -> Result<Built> {
    match model_from_checkpoint(ck)? {
        StageModel::Frame(m) => Ok(m.generator_built()),
        StageModel::Parser(_) => Err(Error::Pipeline("expected a frame-prediction checkpoint".into())),
    }
}

/// The IPNet branch: from `ipnet_checkpoint` when given, else random.
fn ipnet_branch(cfg: &TrainConfig, meta: &ModelMeta, rng: &mut ChaCha8Rng) -> Result<(Built, bool)> {
    match &cfg.ipnet_checkpoint {
        Some(p) => {
            let ck = read_predecessor(p, "ipnet")?;
            expect_stage(&ck, &[Stage::IpnetBaseline], cfg.stage)?;
            check_compatible(cfg, &ck.meta.model)?;
            if ck.meta.model.num_classes != meta.num_classes {
                return Err(Error::Config("ipnet checkpoint has a different class count".into()));
            }
            let p = parser_of(&ck)?;
            let mut params = p.params;
            for s in ["en", "dn"] {
                params.set_provenance(s, Provenance::TransferredFrom(Stage::IpnetBaseline.name().into()));
            }
            Ok((
                Built {
                    spec: p.net.spec().clone(),
                    params,
                },
                true,
            ))
        }
        None => Ok((build_ipnet(&meta.arch, meta.num_classes, 0, rng)?, false)),
    }
}

fn fusion_init(cfg: &TrainConfig, have_ipnet: bool) -> FusionInit {
    if cfg.inherit_fusion.unwrap_or(have_ipnet) {
        FusionInit::Inherit
    } else {
        FusionInit::Random
    }
}

/// Copy every same-shaped array; the first convolution keeps its extra input channels
/// random and takes the RGB slice from the source.
fn seed_flow_parser(dst: &mut ParameterStore, src: &ParameterStore) -> Result<()> {
    let names: Vec<String> = dst.names().cloned().collect();
    for name in names {
        let Some(s) = src.get(&name) else { continue };
        let d = dst.get_mut(&name).expect("listed");
        if d.shape == s.shape {
            d.data.clone_from(&s.data);
        } else if d.shape.len() == 4 && s.shape.len() == 4 && d.shape[0] == s.shape[0] && d.shape[1] > s.shape[1] {
            let kk = d.shape[2] * d.shape[3];
            let (in_d, in_s) = (d.shape[1], s.shape[1]);
            for o in 0..d.shape[0] {
                d.data[o * in_d * kk..o * in_d * kk + in_s * kk]
                    .copy_from_slice(&s.data[o * in_s * kk..(o + 1) * in_s * kk]);
            }
        } else {
            return Err(Error::Transfer {
                layer: name,
                reason: format!("shape {:?} vs {:?}", d.shape, s.shape),
            });
        }
    }
    for s in ["en", "dn"] {
        dst.set_provenance(s, Provenance::TransferredFrom(Stage::IpnetBaseline.name().into()));
    }
    Ok(())
}

/// Where a run starts: a fresh model, or a resumed snapshot.
struct Start {
    model: StageModel,
    optimizers: Optimizers,
    rng: ChaCha8Rng,
    step: u64,
}

fn resolve_loss(cfg: &TrainConfig, data: &TrainData) -> Result<LossConfig> {
    let mut loss = cfg.loss.clone();
    if cfg.stage.is_parser() && loss.class_weights.is_none() && cfg.class_weighting {
        loss.class_weights = Some(class_weights_for(data.train.labels())?.weights);
    }
    Ok(loss)
}

fn base_meta(cfg: &TrainConfig, data: &TrainData, loss: &LossConfig) -> Result<ModelMeta> {
    let parser = cfg.stage.is_parser();
    Ok(ModelMeta {
        arch: cfg.arch.clone(),
        s: cfg.s,
        num_classes: if parser { data.train.num_classes } else { 0 },
        input: if parser {
            InputNorm {
                mean: channel_mean(data.train.frames())?,
                scale: cfg.input_scale,
            }
        } else {
            InputNorm::default()
        },
        past_norm: if parser { PastNorm::Parsing } else { PastNorm::Prediction },
        flow: (cfg.stage == Stage::FlowAugmentedBaseline).then(|| FlowInput {
            provider: cfg.flow_provider.clone(),
            scale: cfg.flow_scale,
        }),
        class_weights: loss.class_weights.clone(),
        feature_source: None,
    })
}

fn initialize(cfg: &TrainConfig, data: &TrainData, loss: &LossConfig) -> Result<Start> {
    let predecessor = match &cfg.checkpoint_in {
        Some(p) => Some(read_predecessor(p, "input")?),
        None => None,
    };
    let data_rng = stream_rng(cfg.seed, DATA_STREAM);
    if let Some(ck) = predecessor.as_ref().filter(|ck| ck.meta.stage == cfg.stage) {
        check_compatible(cfg, &ck.meta.model)?;
        let model = model_from_checkpoint(ck)?;
        let rng = match &ck.meta.rng_state {
            Some(v) => serde_json::from_value(v.clone())?,
            None => data_rng,
        };
        return Ok(Start {
            model,
            optimizers: Optimizers::restore(cfg, ck)?,
            rng,
            step: ck.meta.step,
        });
    }
    let mut rng = stream_rng(cfg.seed, INIT_STREAM);
    let mut meta = base_meta(cfg, data, loss)?;
    let c = meta.num_classes;
    let arch = cfg.arch.clone();
    let parser = |b: Built, meta: ModelMeta| -> Result<StageModel> {
        Ok(StageModel::Parser(ParserNet::new(cfg.stage, b.network()?, b.params, meta)?))
    };
    let missing = |what: &str| {
        Error::Pipeline(format!(
            "stage {} requires {what} (pipeline fp -> pp -> psp); set `pipeline_override` to start without it",
            cfg.stage
        ))
    };
    let model = match cfg.stage {
        Stage::Fp | Stage::IpnetBaseline => {
            if let Some(ck) = &predecessor {
                expect_stage(ck, &[cfg.stage], cfg.stage)?;
            }
            build_stage_model(cfg.stage, &meta, &mut rng)?
        }
        Stage::FlowAugmentedBaseline => {
            if let Some(ck) = &predecessor {
                expect_stage(ck, &[cfg.stage], cfg.stage)?;
            }
            let mut m = build_stage_model(cfg.stage, &meta, &mut rng)?;
            if let Some(p) = &cfg.ipnet_checkpoint {
                let ck = read_predecessor(p, "ipnet")?;
                expect_stage(&ck, &[Stage::IpnetBaseline], cfg.stage)?;
                check_compatible(cfg, &ck.meta.model)?;
                seed_flow_parser(m.params_mut(), &ck.params)?;
            }
            m
        }
        Stage::Pp => match &predecessor {
            Some(ck) => {
                expect_stage(ck, &[Stage::Fp], cfg.stage)?;
                check_compatible(cfg, &ck.meta.model)?;
                let generator = generator_of(ck)?;
                parser(build_ppnet_from_fpnet(&generator, &arch, c, &mut rng)?, meta)?
            }
            None if cfg.random_init => build_stage_model(Stage::Pp, &meta, &mut rng)?,
            None => {
                return Err(Error::Pipeline(
                    "stage pp requires an fp checkpoint (pipeline fp -> pp -> psp); set `random_init` to train from scratch"
                        .into(),
                ))
            }
        },
        Stage::Psp => {
            let pp = match &predecessor {
                Some(ck) => {
                    expect_stage(ck, &[Stage::Pp], cfg.stage)?;
                    check_compatible(cfg, &ck.meta.model)?;
                    let p = parser_of(ck)?;
                    meta.input = p.meta.input;
                    Built {
                        spec: p.net.spec().clone(),
                        params: p.params,
                    }
                }
                None if cfg.pipeline_override => crate::nets::presets::build_ppnet_random(&arch, cfg.s, c, &mut rng)?,
                None => return Err(missing("a pp checkpoint")),
            };
            let (ip, have_ip) = ipnet_branch(cfg, &meta, &mut rng)?;
            let adap = build_adapnet(arch.encoder_channels(), arch.adapnet_depth, &mut rng)?;
            let comp = assemble_pspnet(&pp, &ip, &adap, fusion_init(cfg, have_ip), &mut rng)?;
            StageModel::Parser(ParserNet::new(cfg.stage, comp.net, comp.params, meta)?)
        }
        Stage::FrozenVariant => {
            let feat = match &predecessor {
                Some(ck) => {
                    expect_stage(ck, &[Stage::Fp, Stage::Pp], cfg.stage)?;
                    check_compatible(cfg, &ck.meta.model)?;
                    meta.feature_source = Some(ck.meta.stage);
                    if ck.meta.stage == Stage::Fp {
                        meta.past_norm = PastNorm::Prediction;
                        generator_of(ck)?
                    } else {
                        let p = parser_of(ck)?;
                        meta.input = p.meta.input;
                        Built {
                            spec: p.net.spec().clone(),
                            params: p.params,
                        }
                    }
                }
                None if cfg.pipeline_override => {
                    meta.feature_source = Some(Stage::Fp);
                    meta.past_norm = PastNorm::Prediction;
                    build_generator(&arch, cfg.s, &mut rng)?
                }
                None => return Err(missing("an fp or pp checkpoint")),
            };
            let (ip, have_ip) = ipnet_branch(cfg, &meta, &mut rng)?;
            let adap = build_adapnet(arch.encoder_channels(), arch.adapnet_depth, &mut rng)?;
            let comp = assemble_frozen_variant(&feat, &ip, &adap, fusion_init(cfg, have_ip), &mut rng)?;
            StageModel::Parser(ParserNet::new(cfg.stage, comp.net, comp.params, meta)?)
        }
    };
    Ok(Start {
        model,
        optimizers: Optimizers::fresh(cfg)?,
        rng: data_rng,
        step: 0,
    })
}

fn guard(step: u64, what: &str, value: f64, grads: &Gradients) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Divergence {
            step: step as usize,
            detail: format!("{what} loss is {value}"),
        });
    }
    if !grads.is_finite() {
        return Err(Error::Divergence {
            step: step as usize,
            detail: format!("{what} gradients are not finite"),
        });
    }
    Ok(())
}

fn guard_params(step: u64, params: &ParameterStore) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: step as usize,
            detail: "parameters became non-finite".into(),
        })
    }
}

/// One alternating frame-prediction step: `d_steps` discriminator updates with the
/// generator fixed, then `g_steps` generator updates with the discriminator fixed.
fn fp_step(
    m: &mut FrameModel,
    opts: &mut Optimizers,
    pool: &Pool,
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &VideoDataset,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepRecord> {
    let mut comps = BTreeMap::new();
    let mut total = f64::NAN;
    for _ in 0..cfg.d_steps {
        let batch = m.batch(&pool.draw(data, cfg, rng)?)?;
        let (terms, grads) = m.d_grads(&batch)?;
        guard(step, "discriminator", terms.loss.value, &grads)?;
        opts.get("d").step(&mut m.params, &grads)?;
        comps.insert("d".to_string(), terms.loss.value);
        comps.insert("d_real".to_string(), terms.mean_d_real);
        comps.insert("d_fake".to_string(), terms.mean_d_fake);
        total = terms.loss.value;
    }
    for _ in 0..cfg.g_steps {
        let batch = m.batch(&pool.draw(data, cfg, rng)?)?;
        let (v, grads) = m.g_grads(&batch, loss)?;
        guard(step, "generator", v.value, &grads)?;
        opts.get("g").step(&mut m.params, &grads)?;
        comps.extend(v.components.iter().map(|(k, x)| (k.clone(), *x)));
        comps.insert("g".to_string(), v.value);
        total = v.value;
    }
    guard_params(step, &m.params)?;
    Ok(StepRecord {
        step,
        stage: Stage::Fp,
        loss: total,
        components: comps,
    })
}

#[allow(clippy::too_many_arguments)]
fn parser_step(
    p: &mut ParserNet,
    opts: &mut Optimizers,
    pool: &Pool,
    cfg: &TrainConfig,
    loss: &LossConfig,
    data: &VideoDataset,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepRecord> {
    let batch = p.batch(&pool.draw(data, cfg, rng)?)?;
    let (v, grads) = p.loss_and_grads(&batch, loss)?;
    guard(step, p.stage.name(), v.value, &grads)?;
    opts.get("opt").step(&mut p.params, &grads)?;
    guard_params(step, &p.params)?;
    let mut components = v.components.clone();
    if components.is_empty() {
        components.insert("ce".to_string(), v.value);
    }
    Ok(StepRecord {
        step,
        stage: p.stage,
        loss: v.value,
        components,
    })
}

fn snapshot(cfg: &TrainConfig, model: &StageModel, opts: &Optimizers, rng: &ChaCha8Rng, step: u64) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        stage: cfg.stage,
        step,
        spec_hash: model.spec_hash(),
        dtype: cfg.checkpoint_dtype,
        provenance: BTreeMap::new(),
        frozen: vec![],
        rng_state: Some(serde_json::to_value(rng)?),
        model: model.meta().clone(),
        optimizers: opts.meta(),
        config: serde_json::to_value(cfg)?,
        arrays: vec![],
        state_arrays: vec![],
    };
    encode_checkpoint(model.params(), &meta, &opts.state())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn validate_model(model: &StageModel, val: &VideoDataset) -> Result<Option<MetricsReport>> {
    match model {
        StageModel::Parser(p) => Ok(Some(evaluate(p, val, &EvalOptions::default())?.report)),
        StageModel::Frame(_) => Ok(None),
    }
}

/// Run one stage on in-memory data.
pub fn run_stage(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let loss = resolve_loss(cfg, data)?;
    let Start {
        mut model,
        mut optimizers,
        mut rng,
        step: start_step,
    } = initialize(cfg, data, &loss)?;
    if let StageModel::Parser(p) = &model {
        if p.meta.num_classes != data.train.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, dataset has {}",
                p.meta.num_classes, data.train.num_classes
            )));
        }
    }
    let loss = match (&model, cfg.loss.class_weights.is_none()) {
        (StageModel::Parser(p), true) if p.meta.class_weights.is_some() => LossConfig {
            class_weights: p.meta.class_weights.clone(),
            ..loss
        },
        _ => loss,
    };
    let pool = Pool::new(cfg, &data.train, model.meta().flow.as_ref().map(|f| &f.provider))?;
    let mut log = match &cfg.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p.clone()))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut validation = Vec::new();
    let end_step = start_step + cfg.steps;
    for step in start_step + 1..=end_step {
        let rec = match &mut model {
            StageModel::Frame(m) => fp_step(m, &mut optimizers, &pool, cfg, &loss, &data.train, &mut rng, step)?,
            StageModel::Parser(p) => parser_step(p, &mut optimizers, &pool, cfg, &loss, &data.train, &mut rng, step)?,
        };
        log::debug!("step {step} loss {:.6}", rec.loss);
        if let Some((w, p)) = &mut log {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(p.clone(), e))?;
        }
        records.push(rec);
        let periodic = cfg.val_every > 0 && step % cfg.val_every == 0;
        let last = step == end_step && cfg.validate_at_end;
        if let (Some(val), true) = (&data.val, periodic || last) {
            if let Some(metrics) = validate_model(&model, val)? {
                log::info!("step {step} validation mIoU {:.4}", metrics.miou);
                validation.push(ValidationRecord { step, metrics });
            }
        }
        if let (Some(out), true) = (&cfg.checkpoint_out, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            let bytes = snapshot(cfg, &model, &optimizers, &rng, step)?;
            let name = format!("step_{step:08}.ckpt");
            let path = out.parent().map_or_else(|| PathBuf::from(&name), |d| d.join(&name));
            write_bytes(&path, &bytes)?;
        }
    }
    if let Some((w, p)) = &mut log {
        w.flush().map_err(|e| Error::io(p.clone(), e))?;
    }
    let checkpoint = snapshot(cfg, &model, &optimizers, &rng, end_step)?;
    if let Some(out) = &cfg.checkpoint_out {
        write_bytes(out, &checkpoint)?;
    }
    let mut resolved = cfg.clone();
    resolved.loss = loss;
    let report = TrainReport {
        stage: cfg.stage,
        seed: cfg.seed,
        start_step,
        end_step,
        steps: records,
        validation,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        final_checkpoint: cfg.checkpoint_out.clone(),
        rng: RngProvenance::new(cfg.seed),
        provenance: model
            .params()
            .provenance()
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect(),
        config: serde_json::to_value(&resolved)?,
    };
    Ok(TrainOutcome {
        report,
        model,
        checkpoint,
    })
}

/// Load the configured dataset and run the stage.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainData::load(cfg)?;
    run_stage(cfg, &data)
}

pub fn train_fpnet(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    run_as(cfg, data, &[Stage::Fp])
}

pub fn train_ppnet(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    run_as(cfg, data, &[Stage::Pp])
}

/// Joint PSPNet training, or its frozen-feature variant.
pub fn train_pspnet(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    run_as(cfg, data, &[Stage::Psp, Stage::FrozenVariant])
}

/// Single-frame IPNet, with or without flow channels.
pub fn train_baseline(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    run_as(cfg, data, &[Stage::IpnetBaseline, Stage::FlowAugmentedBaseline])
}

fn run_as(cfg: &TrainConfig, data: &TrainData, stages: &[Stage]) -> Result<TrainOutcome> {
    if !stages.contains(&cfg.stage) {
        return Err(Error::Config(format!("this entry point does not train stage {}", cfg.stage)));
    }
    run_stage(cfg, data)
}

/// Frame-prediction windows available for a config (before the `max_fp_windows` cap).
pub fn count_fp_windows(cfg: &TrainConfig, data: &VideoDataset) -> Result<usize> {
    Ok(fp_windows(data, cfg.s, &cfg.motion)?.len())
}
