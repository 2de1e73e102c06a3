//! Frames, label maps, causal sequence sampling, class statistics and dataset I/O.

pub mod io;
pub mod sampling;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_flow, write_flow, DatasetManifest, VideoDataset};
pub use sampling::{apply_augmentation, augment, draw_augmentation, AugmentDecision, sample_fp_sequences, sample_pp_sequences, AugmentOptions, CropWindow, MotionConfig};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig, SyntheticCorpus};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// Value domain of a frame's pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// 8-bit intensities in [0, 255].
    Raw,
    /// Affinely mapped to [-1, 1] for frame prediction.
    Prediction,
    /// Per-channel mean removed (optionally rescaled) for parsing.
    MeanSubtracted,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Normalization::Raw => "raw",
            Normalization::Prediction => "prediction[-1,1]",
            Normalization::MeanSubtracted => "mean-subtracted",
        };
        f.write_str(s)
    }
}

/// An RGB frame stored row-major with interleaved channels (H×W×3).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    norm: Normalization,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, norm: Normalization, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("frames must be at least 1x1".into()));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB frame needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("frame contains non-finite values".into()));
        }
        Ok(Frame {
            height,
            width,
            norm,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, norm: Normalization, value: f64) -> Self {
        Frame::new(height, width, norm, vec![value; height * width * 3]).expect("valid constant frame")
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn norm(&self) -> Normalization {
        self.norm
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn expect_norm(&self, expected: Normalization) -> Result<()> {
        if self.norm != expected {
            return Err(Error::Normalization {
                expected: expected.to_string(),
                found: self.norm.to_string(),
            });
        }
        Ok(())
    }

    /// Write the frame planar (C×H×W) into `dst`.
    pub fn write_planar(&self, dst: &mut [f64]) {
        let hw = self.height * self.width;
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            dst[p] = px[0];
            dst[hw + p] = px[1];
            dst[2 * hw + p] = px[2];
        }
    }

    /// Build from planar C×H×W values.
    pub fn from_planar(height: usize, width: usize, norm: Normalization, planar: &[f64]) -> Result<Self> {
        let hw = height * width;
        let mut pixels = vec![0.0; hw * 3];
        for p in 0..hw {
            for c in 0..3 {
                pixels[p * 3 + c] = planar[c * hw + p];
            }
        }
        Frame::new(height, width, norm, pixels)
    }

    pub(crate) fn map(&self, norm: Normalization, f: impl Fn(f64, usize) -> f64) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            norm,
            pixels: self
                .pixels
                .iter()
                .enumerate()
                .map(|(i, &v)| f(v, i % 3))
                .collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, norm: Normalization, pixels: Vec<f64>) -> Frame {
        Frame {
            height,
            width,
            norm,
            pixels,
        }
    }
}

/// Per-pixel class indices with an ignore sentinel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    ignore_index: u8,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        Self::with_ignore(height, width, num_classes, DEFAULT_IGNORE_INDEX, labels)
    }

    pub fn with_ignore(
        height: usize,
        width: usize,
        num_classes: usize,
        ignore_index: u8,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > ignore_index as usize {
            return Err(Error::InvalidArgument(format!(
                "{num_classes} classes do not fit below ignore index {ignore_index}"
            )));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != ignore_index && l as usize >= num_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            num_classes,
            ignore_index,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, value: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn is_ignored(&self, v: u8) -> bool {
        v == self.ignore_index
    }

    pub(crate) fn with_labels(&self, height: usize, width: usize, labels: Vec<u8>) -> LabelMap {
        LabelMap {
            height,
            width,
            num_classes: self.num_classes,
            ignore_index: self.ignore_index,
            labels,
        }
    }
}

/// `s` past frames (nearest first), the target frame and its optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub past: Vec<Frame>,
    pub target: Frame,
    pub label: Option<LabelMap>,
    pub clip_id: String,
    /// 1-based index of the target frame within its clip.
    pub frame_index: usize,
}

impl SequenceSample {
    pub fn new(
        past: Vec<Frame>,
        target: Frame,
        label: Option<LabelMap>,
        clip_id: impl Into<String>,
        frame_index: usize,
    ) -> Result<Self> {
        if past.is_empty() {
            return Err(Error::InvalidArgument("a sequence needs at least one past frame".into()));
        }
        for f in &past {
            if !f.same_size(&target) || f.norm() != target.norm() {
                return Err(Error::Shape(
                    "past frames must share the target's size and normalization".into(),
                ));
            }
        }
        if let Some(l) = &label {
            if l.height() != target.height() || l.width() != target.width() {
                return Err(Error::Shape("label size differs from target frame".into()));
            }
        }
        Ok(SequenceSample {
            past,
            target,
            label,
            clip_id: clip_id.into(),
            frame_index,
        })
    }

    pub fn s(&self) -> usize {
        self.past.len()
    }

    pub fn map_frames(&self, f: impl Fn(&Frame) -> Frame) -> SequenceSample {
        SequenceSample {
            past: self.past.iter().map(&f).collect(),
            target: f(&self.target),
            label: self.label.clone(),
            clip_id: self.clip_id.clone(),
            frame_index: self.frame_index,
        }
    }
}

/// The `s` frames preceding 1-based index `i`, nearest first. Indices before the clip start
/// resolve to the first frame.
pub fn build_preceding_set<F: Clone>(clip: &[F], i: usize, s: usize) -> Result<Vec<F>> {
    if clip.is_empty() {
        return Err(Error::InvalidArgument("empty clip".into()));
    }
    if i == 0 || i > clip.len() {
        return Err(Error::InvalidArgument(format!(
            "frame index {i} outside 1..={}",
            clip.len()
        )));
    }
    if s == 0 {
        return Err(Error::InvalidArgument("s must be at least 1".into()));
    }
    Ok((1..=s)
        .map(|k| {
            let idx = if i > k { i - k } else { 1 };
            clip[idx - 1].clone()
        })
        .collect())
}

/// How the motion score normalizes the frame difference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionNorm {
    /// Euclidean norm divided by sqrt(H·W·3).
    #[default]
    Rms,
    /// Plain Euclidean norm of the raw difference.
    L2,
}

/// Motion between two raw frames.
pub fn compute_motion_score(a: &Frame, b: &Frame, norm: MotionNorm) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::Shape(format!(
            "motion score between {}x{} and {}x{} frames",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.norm != b.norm {
        return Err(Error::Normalization {
            expected: a.norm.to_string(),
            found: b.norm.to_string(),
        });
    }
    a.expect_norm(Normalization::Raw)?;
    let sq: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(match norm {
        MotionNorm::Rms => (sq / a.pixels.len() as f64).sqrt(),
        MotionNorm::L2 => sq.sqrt(),
    })
}

/// Raw [0, 255] -> [-1, 1].
pub fn normalize_for_prediction(frame: &Frame) -> Result<Frame> {
    frame.expect_norm(Normalization::Raw)?;
    Ok(frame.map(Normalization::Prediction, |v, _| v / 127.5 - 1.0))
}

/// Inverse of [`normalize_for_prediction`].
pub fn denormalize_prediction(frame: &Frame) -> Result<Frame> {
    frame.expect_norm(Normalization::Prediction)?;
    Ok(frame.map(Normalization::Raw, |v, _| (v + 1.0) * 127.5))
}

/// Raw -> per-channel mean subtracted.
pub fn normalize_for_parsing(frame: &Frame, mean: [f64; 3]) -> Result<Frame> {
    normalize_for_parsing_scaled(frame, mean, 1.0)
}

/// Mean subtraction followed by a global scale factor.
pub fn normalize_for_parsing_scaled(frame: &Frame, mean: [f64; 3], scale: f64) -> Result<Frame> {
    frame.expect_norm(Normalization::Raw)?;
    Ok(frame.map(Normalization::MeanSubtracted, |v, c| (v - mean[c]) * scale))
}

/// Per-channel mean over a set of raw frames.
pub fn channel_mean<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for f in frames {
        f.expect_norm(Normalization::Raw)?;
        for px in f.pixels.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c];
            }
        }
        n += f.height * f.width;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no frames to average".into()));
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Fraction of non-ignored pixels per class.
pub fn compute_class_frequencies<'a>(labels: impl IntoIterator<Item = &'a LabelMap>) -> Result<Vec<f64>> {
    let mut counts: Vec<u64> = Vec::new();
    for map in labels {
        if counts.is_empty() {
            counts = vec![0; map.num_classes];
        } else if counts.len() != map.num_classes {
            return Err(Error::InvalidArgument("label maps disagree on class count".into()));
        }
        for &l in &map.labels {
            if l != map.ignore_index {
                counts[l as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "class frequencies need at least one non-ignored pixel".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Dataset scalar separating frequent from rare classes: sort classes by descending
/// frequency and return the frequency of the class at which cumulative coverage first
/// reaches 85%.
pub fn derive_eta(frequencies: &[f64]) -> f64 {
    const FREQUENT_COVERAGE: f64 = 0.85;
    let mut sorted: Vec<f64> = frequencies.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite frequencies"));
    let mut cumulative = 0.0;
    for &f in &sorted {
        cumulative += f;
        // Tolerance absorbs rounding in sums like 17 x 0.05.
        if cumulative >= FREQUENT_COVERAGE - 1e-12 {
            return f;
        }
    }
    sorted.last().copied().unwrap_or(1.0)
}

/// Frequencies, the frequent/rare scalar and the resulting per-class loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightTable {
    pub frequencies: Vec<f64>,
    pub eta: f64,
    pub weights: Vec<f64>,
}

/// `2^ceil(log10(eta / f))` for each observed class; unobserved classes take the largest
/// observed weight.
pub fn compute_class_weights(frequencies: &[f64], eta: f64) -> Result<ClassWeightTable> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let mut weights: Vec<Option<f64>> = frequencies
        .iter()
        .map(|&f| (f > 0.0).then(|| 2f64.powf((eta / f).log10().ceil())))
        .collect();
    let fallback = weights
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let fallback = if fallback.is_finite() { fallback } else { 1.0 };
    for w in weights.iter_mut() {
        w.get_or_insert(fallback);
    }
    Ok(ClassWeightTable {
        frequencies: frequencies.to_vec(),
        eta,
        weights: weights.into_iter().map(|w| w.expect("filled")).collect(),
    })
}

/// Frequencies, eta and weights from a set of label maps in one call.
pub fn class_weights_for<'a>(labels: impl IntoIterator<Item = &'a LabelMap>) -> Result<ClassWeightTable> {
    let f = compute_class_frequencies(labels)?;
    let eta = derive_eta(&f);
    compute_class_weights(&f, eta)
}

/// Counts per class, for reports.
pub fn class_histogram(map: &LabelMap) -> BTreeMap<u8, usize> {
    let mut h = BTreeMap::new();
    for &l in &map.labels {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}
