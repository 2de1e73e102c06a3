//! Metrics, causal evaluation, temporal consistency and flow-based baselines.

pub mod flow;
pub mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::VideoDataset;
use crate::data::{build_preceding_set, Frame, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use flow::{
    block_matching_flow, compute_flow, merge_warped, temporal_consistency, warp_labels, warp_probs, BlockMatching,
    FlowField, FlowProvider, FlowQuery,
};
pub use metrics::{accumulate_confusion, class_accuracy, miou, pixel_accuracy, ConfusionMatrix};

/// Frames `1..=index` of one clip; later frames are not reachable from here.
#[derive(Clone, Copy)]
pub struct CausalContext<'a> {
    pub clip_id: &'a str,
    pub index: usize,
    frames: &'a [Frame],
    flows: Option<&'a [FlowField]>,
}

impl<'a> CausalContext<'a> {
    pub fn new(clip_id: &'a str, frames: &'a [Frame], flows: Option<&'a [FlowField]>, index: usize) -> Result<Self> {
        if index == 0 || index > frames.len() {
            return Err(Error::InvalidArgument(format!(
                "frame index {index} outside 1..={}",
                frames.len()
            )));
        }
        Ok(CausalContext {
            clip_id,
            index,
            frames: &frames[..index],
            flows: flows.map(|f| &f[..index.min(f.len())]),
        })
    }

    pub fn current(&self) -> &'a Frame {
        &self.frames[self.index - 1]
    }

    /// The preceding set of the current frame, nearest first.
    pub fn past(&self, s: usize) -> Result<Vec<Frame>> {
        build_preceding_set(self.frames, self.index, s)
    }

    /// The same clip viewed at an earlier frame.
    pub fn at(&self, index: usize) -> Result<CausalContext<'a>> {
        CausalContext::new(self.clip_id, self.frames, self.flows, index)
    }

    /// Flow from the previous frame to the current one; zero at the first frame.
    pub fn flow_to_current(&self, provider: &FlowProvider) -> Result<FlowField> {
        let cur = self.current();
        if self.index == 1 {
            return Ok(FlowField::zeros(cur.height(), cur.width()));
        }
        let query = FlowQuery {
            clip_id: self.clip_id,
            recorded: self.flows,
            index: self.index,
        };
        compute_flow(&self.frames[self.index - 2], cur, provider, Some(query))
    }
}

/// A parser evaluated frame by frame with causal access to its clip.
pub trait ParsingModel {
    fn num_classes(&self) -> usize;

    /// Per-pixel class probabilities `[1, C, H, W]` for the context's current frame.
    fn predict_probs(&self, ctx: &CausalContext<'_>) -> Result<Tensor>;

    /// Hard labels for the context's current frame.
    fn predict_labels(&self, ctx: &CausalContext<'_>) -> Result<LabelMap> {
        argmax_labels(&self.predict_probs(ctx)?)
    }
}

impl<M: ParsingModel + ?Sized> ParsingModel for &M {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn predict_probs(&self, ctx: &CausalContext<'_>) -> Result<Tensor> {
        (**self).predict_probs(ctx)
    }
    fn predict_labels(&self, ctx: &CausalContext<'_>) -> Result<LabelMap> {
        (**self).predict_labels(ctx)
    }
}

impl<M: ParsingModel + ?Sized> ParsingModel for Box<M> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn predict_probs(&self, ctx: &CausalContext<'_>) -> Result<Tensor> {
        (**self).predict_probs(ctx)
    }
    fn predict_labels(&self, ctx: &CausalContext<'_>) -> Result<LabelMap> {
        (**self).predict_labels(ctx)
    }
}

/// Arg-max over channels of a `[1, C, H, W]` map; ties resolve to the lower class.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    let [n, c, h, w] = probs.shape();
    if n != 1 {
        return Err(Error::Shape("arg-max expects a single map".into()));
    }
    let hw = h * w;
    let d = probs.data();
    let labels = (0..hw)
        .map(|q| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + q] > d[best * hw + q] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, c, labels)
}

/// One-hot probabilities of a label map; ignored pixels become uniform.
pub fn one_hot(label: &LabelMap) -> Tensor {
    let (h, w, c) = (label.height(), label.width(), label.num_classes());
    let hw = h * w;
    let mut t = Tensor::zeros([1, c, h, w]);
    let d = t.data_mut();
    for (q, &l) in label.labels().iter().enumerate() {
        if label.is_ignored(l) {
            for k in 0..c {
                d[k * hw + q] = 1.0 / c as f64;
            }
        } else {
            d[l as usize * hw + q] = 1.0;
        }
    }
    t
}

/// Returns the stored label of every frame it is asked about.
pub struct LabelOracle {
    num_classes: usize,
    labels: BTreeMap<(String, usize), LabelMap>,
}

impl LabelOracle {
    pub fn new(num_classes: usize) -> Self {
        LabelOracle {
            num_classes,
            labels: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, clip_id: &str, index: usize, label: LabelMap) {
        self.labels.insert((clip_id.to_string(), index), label);
    }

    /// Oracle over every frame label of a dataset.
    pub fn from_dataset(dataset: &VideoDataset) -> Self {
        let mut o = LabelOracle::new(dataset.num_classes);
        for clip in &dataset.clips {
            for (&i, l) in &clip.labels {
                o.insert(&clip.id, i, l.clone());
            }
        }
        o
    }
}

impl ParsingModel for LabelOracle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn predict_probs(&self, ctx: &CausalContext<'_>) -> Result<Tensor> {
        self.labels
            .get(&(ctx.clip_id.to_string(), ctx.index))
            .map(one_hot)
            .ok_or_else(|| Error::InvalidArgument(format!("oracle has no label for {} frame {}", ctx.clip_id, ctx.index)))
    }
}

/// Predicts one class everywhere.
pub struct ConstantParser {
    pub num_classes: usize,
    pub class: u8,
}

impl ParsingModel for ConstantParser {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn predict_probs(&self, ctx: &CausalContext<'_>) -> Result<Tensor> {
        let f = ctx.current();
        let l = LabelMap::filled(f.height(), f.width(), self.num_classes, self.class)?;
        Ok(one_hot(&l))
    }
}

/// Warps the inner model's map of frame i-1 onto frame i and merges it with the map of
/// frame i. Hard labels break exact ties in the merged map toward the current frame's class.
pub struct WarpMergeParser<M> {
    pub inner: M,
    pub provider: FlowProvider,
    pub alpha: f64,
}

impl<M: ParsingModel> ParsingModel for WarpMergeParser<M> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn predict_probs(&self, ctx: &CausalContext<'_>) -> Result<Tensor> {
        let current = self.inner.predict_probs(ctx)?;
        if ctx.index == 1 {
            return Ok(current);
        }
        let prev = self.inner.predict_probs(&ctx.at(ctx.index - 1)?)?;
        let flow = ctx.flow_to_current(&self.provider)?;
        let (warped, valid) = warp_probs(&prev, &flow)?;
        merge_warped(&warped, &valid, &current, self.alpha)
    }
    fn predict_labels(&self, ctx: &CausalContext<'_>) -> Result<LabelMap> {
        let merged = self.predict_probs(ctx)?;
        if ctx.index == 1 {
            return argmax_labels(&merged);
        }
        let current = argmax_labels(&self.inner.predict_probs(ctx)?)?;
        let best = argmax_labels(&merged)?;
        let (h, w) = (best.height(), best.width());
        let d = merged.data();
        let labels = best
            .labels()
            .iter()
            .zip(current.labels())
            .enumerate()
            .map(|(q, (&b, &k))| {
                if d[k as usize * h * w + q] == d[b as usize * h * w + q] {
                    k
                } else {
                    b
                }
            })
            .collect();
        LabelMap::new(h, w, best.num_classes(), labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Provider for temporal-consistency flow; `None` skips the score.
    pub consistency_flow: Option<FlowProvider>,
    pub keep_predictions: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            consistency_flow: Some(FlowProvider::SyntheticTruth),
            keep_predictions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub class_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub temporal_consistency: Option<f64>,
    pub scored_pixels: u64,
    pub frames: usize,
    pub class_pixel_counts: Vec<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, frames: usize, temporal: Option<f64>) -> Result<Self> {
        Ok(MetricsReport {
            miou: miou(cm)?,
            pixel_accuracy: pixel_accuracy(cm)?,
            class_accuracy: class_accuracy(cm)?,
            per_class_iou: cm.per_class_iou(),
            temporal_consistency: temporal,
            scored_pixels: cm.total(),
            frames,
            class_pixel_counts: (0..cm.num_classes()).map(|c| cm.row(c)).collect(),
            config: serde_json::Value::Null,
        })
    }

    /// Writes `metrics.json` and `per_class_iou.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let mut csv = String::from("class,iou,pixels\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            csv.push_str(&format!("{c},{v},{}\n", self.class_pixel_counts[c]));
        }
        let path = dir.join("per_class_iou.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub clip_id: String,
    pub index: usize,
    pub confusion: ConfusionMatrix,
    pub prediction: Option<LabelMap>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub frames: Vec<FrameScore>,
}

/// Score every annotated frame causally. Temporal consistency compares the prediction
/// for each annotated frame i >= 2 with the warped prediction for frame i-1.
pub fn evaluate<M: ParsingModel + ?Sized>(model: &M, dataset: &VideoDataset, options: &EvalOptions) -> Result<EvalOutcome> {
    let c = dataset.num_classes;
    if model.num_classes() != c {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes, dataset has {c}",
            model.num_classes()
        )));
    }
    let mut total = ConfusionMatrix::new(c);
    let mut frames = Vec::new();
    let mut consistency = Vec::new();
    for clip in &dataset.clips {
        for (&i, truth) in &clip.labels {
            let ctx = CausalContext::new(&clip.id, &clip.frames, clip.flows.as_deref(), i)?;
            let pred = model.predict_labels(&ctx)?;
            let mut cm = ConfusionMatrix::new(c);
            accumulate_confusion(&mut cm, &pred, truth)?;
            total.merge(&cm)?;
            if let (Some(provider), true) = (&options.consistency_flow, i >= 2) {
                let prev = model.predict_labels(&ctx.at(i - 1)?)?;
                let flow = ctx.flow_to_current(provider)?;
                consistency.push(temporal_consistency(&[prev, pred.clone()], &[flow], None)?);
            }
            frames.push(FrameScore {
                clip_id: clip.id.clone(),
                index: i,
                confusion: cm,
                prediction: options.keep_predictions.then_some(pred),
            });
        }
    }
    let temporal = (!consistency.is_empty()).then(|| consistency.iter().sum::<f64>() / consistency.len() as f64);
    let report = MetricsReport::from_confusion(&total, frames.len(), temporal)?;
    Ok(EvalOutcome { report, frames })
}
