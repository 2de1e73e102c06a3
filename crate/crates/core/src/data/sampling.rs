//! Window selection for frame prediction and predictive parsing, plus augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::VideoDataset;
use super::{build_preceding_set, compute_motion_score, Frame, LabelMap, MotionNorm, SequenceSample};
use crate::error::{Error, Result};

/// Normalized default for the motion threshold: 230 at 1024x2048x3 raw elements.
pub fn default_motion_threshold() -> f64 {
    230.0 / ((1024.0 * 2048.0 * 3.0) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Windows qualify when motion(first, last) is strictly above this; `<= 0` disables the check.
    pub threshold: f64,
    pub norm: MotionNorm,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            threshold: default_motion_threshold(),
            norm: MotionNorm::Rms,
        }
    }
}

impl MotionConfig {
    pub fn disabled() -> Self {
        MotionConfig {
            threshold: 0.0,
            norm: MotionNorm::Rms,
        }
    }

    pub fn passes(&self, first: &Frame, last: &Frame) -> Result<bool> {
        if self.threshold <= 0.0 {
            return Ok(true);
        }
        Ok(compute_motion_score(first, last, self.norm)? > self.threshold)
    }
}

/// A (clip, 1-based frame index) pair naming a target frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowRef {
    pub clip: usize,
    pub index: usize,
}

/// Full `(s+1)`-frame windows that pass the motion check, in dataset order.
pub fn fp_windows(dataset: &VideoDataset, s: usize, motion: &MotionConfig) -> Result<Vec<WindowRef>> {
    if s == 0 {
        return Err(Error::InvalidArgument("s must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (c, clip) in dataset.clips.iter().enumerate() {
        for i in (s + 1)..=clip.frames.len() {
            if motion.passes(&clip.frames[i - 1 - s], &clip.frames[i - 1])? {
                out.push(WindowRef { clip: c, index: i });
            }
        }
    }
    Ok(out)
}

/// Annotated targets whose boundary-padded window passes the motion check.
pub fn pp_windows(dataset: &VideoDataset, s: usize, motion: &MotionConfig) -> Result<Vec<WindowRef>> {
    if s == 0 {
        return Err(Error::InvalidArgument("s must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut annotated = 0usize;
    for (c, clip) in dataset.clips.iter().enumerate() {
        for &i in clip.labels.keys() {
            annotated += 1;
            let first = &clip.frames[i.saturating_sub(s + 1)];
            if motion.passes(first, &clip.frames[i - 1])? {
                out.push(WindowRef { clip: c, index: i });
            }
        }
    }
    if out.is_empty() && annotated > 0 {
        log::warn!("no annotated frame passes the motion threshold {}", motion.threshold);
    }
    Ok(out)
}

/// Materialize the sample for a window; the label is attached when present and requested.
pub fn sequence_at(dataset: &VideoDataset, w: WindowRef, s: usize, with_label: bool) -> Result<SequenceSample> {
    let clip = dataset
        .clips
        .get(w.clip)
        .ok_or_else(|| Error::InvalidArgument(format!("clip {} out of range", w.clip)))?;
    let past = build_preceding_set(&clip.frames, w.index, s)?;
    let label = if with_label {
        clip.labels.get(&w.index).cloned()
    } else {
        None
    };
    SequenceSample::new(past, clip.frames[w.index - 1].clone(), label, &clip.id, w.index)
}

/// Seeded choice of at most `max_count` qualifying windows, in shuffled order.
pub fn select_fp_windows(
    dataset: &VideoDataset,
    s: usize,
    motion: &MotionConfig,
    max_count: usize,
    rng_seed: u64,
) -> Result<Vec<WindowRef>> {
    let mut windows = fp_windows(dataset, s, motion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    windows.shuffle(&mut rng);
    windows.truncate(max_count);
    Ok(windows)
}

/// Unlabeled frame-prediction samples.
pub fn sample_fp_sequences(
    dataset: &VideoDataset,
    s: usize,
    motion: &MotionConfig,
    max_count: usize,
    rng_seed: u64,
) -> Result<Vec<SequenceSample>> {
    select_fp_windows(dataset, s, motion, max_count, rng_seed)?
        .into_iter()
        .map(|w| sequence_at(dataset, w, s, false))
        .collect()
}

/// One labeled sample per qualifying annotated frame.
pub fn sample_pp_sequences(dataset: &VideoDataset, s: usize, motion: &MotionConfig) -> Result<Vec<SequenceSample>> {
    pp_windows(dataset, s, motion)?
        .into_iter()
        .map(|w| sequence_at(dataset, w, s, true))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentOptions {
    /// `(height, width)` of a random crop; `None` keeps the full frame.
    pub crop_size: Option<(usize, usize)>,
    /// Flip horizontally with probability 1/2.
    pub flip: bool,
    /// Reverse the window with probability 1/2; unlabeled samples only.
    pub temporal_reverse: bool,
}

fn crop_frame(f: &Frame, w: CropWindow) -> Frame {
    let mut px = Vec::with_capacity(w.height * w.width * 3);
    for y in w.top..w.top + w.height {
        let row = (y * f.width() + w.left) * 3;
        px.extend_from_slice(&f.pixels()[row..row + w.width * 3]);
    }
    Frame::from_parts_unchecked(w.height, w.width, f.norm(), px)
}

fn crop_label(l: &LabelMap, w: CropWindow) -> LabelMap {
    let mut out = Vec::with_capacity(w.height * w.width);
    for y in w.top..w.top + w.height {
        let row = y * l.width() + w.left;
        out.extend_from_slice(&l.labels()[row..row + w.width]);
    }
    l.with_labels(w.height, w.width, out)
}

fn flip_frame(f: &Frame) -> Frame {
    let (h, w) = (f.height(), f.width());
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * 3;
            px.extend_from_slice(&f.pixels()[i..i + 3]);
        }
    }
    Frame::from_parts_unchecked(h, w, f.norm(), px)
}

fn flip_label(l: &LabelMap) -> LabelMap {
    let (h, w) = (l.height(), l.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend(l.labels()[y * w..(y + 1) * w].iter().rev());
    }
    l.with_labels(h, w, out)
}

/// Apply one crop window to every frame and the label.
pub fn crop_sample(sample: &SequenceSample, w: CropWindow) -> Result<SequenceSample> {
    let (h, wd) = (sample.target.height(), sample.target.width());
    if w.height == 0 || w.width == 0 || w.top + w.height > h || w.left + w.width > wd {
        return Err(Error::InvalidArgument(format!(
            "crop {}x{} at ({}, {}) exceeds {h}x{wd} frame",
            w.height, w.width, w.top, w.left
        )));
    }
    let mut out = sample.map_frames(|f| crop_frame(f, w));
    out.label = sample.label.as_ref().map(|l| crop_label(l, w));
    Ok(out)
}

/// Mirror every frame and the label left to right.
pub fn flip_sample(sample: &SequenceSample) -> SequenceSample {
    let mut out = sample.map_frames(flip_frame);
    out.label = sample.label.as_ref().map(flip_label);
    out
}

/// Reverse the `(s+1)`-frame window: the oldest frame becomes the target and the
/// remaining frames form the new nearest-first past.
pub fn reverse_sample(sample: &SequenceSample) -> Result<SequenceSample> {
    if sample.label.is_some() {
        return Err(Error::InvalidArgument(
            "temporal reversal applies only to unlabeled frame-prediction samples".into(),
        ));
    }
    // Chronological window: past reversed, then target.
    let mut window: Vec<Frame> = sample.past.iter().rev().cloned().collect();
    window.push(sample.target.clone());
    window.reverse();
    let target = window.pop().expect("window has s+1 frames");
    let past: Vec<Frame> = window.into_iter().rev().collect();
    let first_index = sample.frame_index.saturating_sub(sample.s()).max(1);
    SequenceSample::new(past, target, None, sample.clip_id.clone(), first_index)
}

/// One draw of the random augmentation choices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentDecision {
    pub crop: Option<CropWindow>,
    pub flip: bool,
    pub reverse: bool,
}

/// Draw crop, flip and reversal choices for an `h`x`w` sample.
pub fn draw_augmentation<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    rng: &mut R,
    options: &AugmentOptions,
) -> Result<AugmentDecision> {
    let crop = match options.crop_size {
        Some((ch, cw)) => {
            if ch == 0 || cw == 0 || ch > h || cw > w {
                return Err(Error::InvalidArgument(format!(
                    "crop {ch}x{cw} does not fit a {h}x{w} frame"
                )));
            }
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            Some(CropWindow {
                top,
                left,
                height: ch,
                width: cw,
            })
        }
        None => None,
    };
    let flip = options.flip && rng.random_bool(0.5);
    let reverse = options.temporal_reverse && rng.random_bool(0.5);
    Ok(AugmentDecision { crop, flip, reverse })
}

/// Apply crop, then flip, then reversal.
pub fn apply_augmentation(sample: &SequenceSample, d: &AugmentDecision) -> Result<SequenceSample> {
    let mut out = match d.crop {
        Some(w) => crop_sample(sample, w)?,
        None => sample.clone(),
    };
    if d.flip {
        out = flip_sample(&out);
    }
    if d.reverse {
        out = reverse_sample(&out)?;
    }
    Ok(out)
}

/// Random crop, flip and (unlabeled only) temporal reversal, shared by all frames.
pub fn augment<R: Rng + ?Sized>(sample: &SequenceSample, rng: &mut R, options: &AugmentOptions) -> Result<SequenceSample> {
    if options.temporal_reverse && sample.label.is_some() {
        return Err(Error::InvalidArgument(
            "temporal reversal requested on a labeled sample".into(),
        ));
    }
    let d = draw_augmentation(sample.target.height(), sample.target.width(), rng, options)?;
    apply_augmentation(sample, &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalization;
    use proptest::prelude::*;
    use rand::Rng;

    fn tagged(v: f64, h: usize, w: usize) -> Frame {
        let px = (0..h * w * 3).map(|i| v * 1000.0 + i as f64).collect();
        Frame::new(h, w, Normalization::Raw, px).unwrap()
    }

    fn window(n: usize) -> SequenceSample {
        // Frames X1..Xn tagged by index; target Xn.
        let frames: Vec<Frame> = (1..=n).map(|k| tagged(k as f64, 2, 3)).collect();
        let past = build_preceding_set(&frames, n, n - 1).unwrap();
        SequenceSample::new(past, frames[n - 1].clone(), None, "c", n).unwrap()
    }

    fn tag(f: &Frame) -> usize {
        (f.pixels()[0] / 1000.0).round() as usize
    }

    #[test]
    fn reversal_makes_oldest_frame_the_target() {
        let s = window(5);
        let r = reverse_sample(&s).unwrap();
        assert_eq!(tag(&r.target), 1);
        assert_eq!(r.past.iter().map(tag).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert_eq!(reverse_sample(&r).unwrap().past, s.past);
    }

    #[test]
    fn reversal_rejects_labeled_samples() {
        let mut s = window(3);
        s.label = Some(LabelMap::filled(2, 3, 2, 0).unwrap());
        assert!(reverse_sample(&s).is_err());
        let opts = AugmentOptions {
            temporal_reverse: true,
            ..Default::default()
        };
        assert!(augment(&s, &mut ChaCha8Rng::seed_from_u64(0), &opts).is_err());
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let s = window(3);
        let w = CropWindow {
            top: 0,
            left: 0,
            height: 2,
            width: 3,
        };
        assert_eq!(crop_sample(&s, w).unwrap(), s);
        let opts = AugmentOptions {
            crop_size: Some((2, 3)),
            ..Default::default()
        };
        assert_eq!(augment(&s, &mut ChaCha8Rng::seed_from_u64(3), &opts).unwrap(), s);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let s = window(3);
        let opts = AugmentOptions {
            crop_size: Some((3, 3)),
            ..Default::default()
        };
        assert!(augment(&s, &mut ChaCha8Rng::seed_from_u64(0), &opts).is_err());
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Frame::new(h, w, Normalization::Raw, (0..h * w * 3).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
            let l = LabelMap::new(h, w, 4, (0..h * w).map(|_| rng.random_range(0..4u8)).collect()).unwrap();
            let s = SequenceSample::new(vec![f.clone()], f, Some(l), "c", 1).unwrap();
            prop_assert_eq!(flip_sample(&flip_sample(&s)), s);
        }

        #[test]
        fn augment_commutes_with_label_lookup(
            h in 2usize..10, w in 2usize..10, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..5u8)).collect();
            let l = LabelMap::new(h, w, 5, labels).unwrap();
            let pix: Vec<f64> = (0..h * w * 3).map(|i| i as f64).collect();
            let f = Frame::new(h, w, Normalization::Raw, pix).unwrap();
            let s = SequenceSample::new(vec![f.clone()], f, Some(l.clone()), "c", 1).unwrap();
            let ch = rng.random_range(1..=h);
            let cw = rng.random_range(1..=w);
            let opts = AugmentOptions { crop_size: Some((ch, cw)), flip: true, temporal_reverse: false };
            let out = augment(&s, &mut rng, &opts).unwrap();
            let ol = out.label.as_ref().unwrap();
            // Pixel values encode their source coordinates, so the transform can be read back.
            for y in 0..ch {
                for x in 0..cw {
                    let src = out.target.get(y, x, 0) as usize / 3;
                    let (sy, sx) = (src / w, src % w);
                    prop_assert_eq!(ol.get(y, x), l.get(sy, sx));
                    for k in 0..3 {
                        prop_assert_eq!(out.past[0].get(y, x, k), out.target.get(y, x, k));
                    }
                }
            }
        }
    }
}
