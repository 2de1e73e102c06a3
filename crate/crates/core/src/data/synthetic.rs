//! Synthetic labeled video: textured rigid shapes translating over a static textured
//! background, with exact labels, owner maps and integer ground-truth flow.
//!
//! Every clip also carries static distractors that copy the appearance of an object
//! class but are labeled background, so a single frame cannot tell them apart from
//! moving objects; only temporal context can.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_dataset, Clip, Split, VideoDataset};
use super::{Frame, LabelMap, Normalization};
use crate::error::{Error, Result};
use crate::eval::FlowField;

/// Base colours of object classes 1, 2, ...; class 0 is background.
pub const CLASS_COLOURS: [[u8; 3]; 8] = [
    [220, 50, 40],
    [40, 190, 70],
    [50, 90, 230],
    [235, 200, 40],
    [190, 60, 210],
    [40, 200, 210],
    [240, 130, 30],
    [150, 150, 240],
];

const BACKGROUND_BASE: f64 = 110.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_clips: usize,
    /// Clips at the end of the corpus assigned to the validation split.
    pub val_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of the dominant speed component in px/frame.
    pub object_speed_range: [u32; 2],
    pub objects_per_clip: usize,
    pub distractors_per_clip: usize,
    /// Inclusive range of shape extents in px.
    pub shape_size_range: [usize; 2],
    /// Half-width of the uniform per-pixel texture, in intensity levels.
    pub texture_amplitude: u8,
    /// Std-dev of per-frame Gaussian noise added before quantization.
    pub noise_std: f64,
    /// 0-based indices of annotated frames; empty selects the frame two thirds into the clip.
    pub annotated_frames: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_clips: 40,
            val_clips: 8,
            frames_per_clip: 12,
            height: 32,
            width: 64,
            num_classes: 5,
            object_speed_range: [1, 3],
            objects_per_clip: 2,
            distractors_per_clip: 2,
            shape_size_range: [8, 14],
            texture_amplitude: 24,
            noise_std: 0.0,
            annotated_frames: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 classes (background + object), got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("at most 255 classes fit below the ignore index".into()));
        }
        if self.height == 0 || self.width == 0 || self.frames_per_clip == 0 {
            return Err(Error::Config("frame size and clip length must be positive".into()));
        }
        let [lo, hi] = self.shape_size_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid shape size range [{lo}, {hi}]")));
        }
        if hi > self.height || hi > self.width {
            return Err(Error::Config(format!(
                "shapes up to {hi} px do not fit a {}x{} frame",
                self.height, self.width
            )));
        }
        if self.object_speed_range[0] > self.object_speed_range[1] {
            return Err(Error::Config("speed range minimum exceeds maximum".into()));
        }
        if self.val_clips > self.num_clips {
            return Err(Error::Config("more validation clips than clips".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if let Some(&bad) = self.annotated_frames.iter().find(|&&i| i >= self.frames_per_clip) {
            return Err(Error::Config(format!(
                "annotated frame {bad} outside a {}-frame clip",
                self.frames_per_clip
            )));
        }
        Ok(())
    }

    /// 0-based annotated frame indices after applying the default rule.
    pub fn annotated_indices(&self) -> Vec<usize> {
        if self.annotated_frames.is_empty() {
            vec![(2 * self.frames_per_clip / 3).saturating_sub(1)]
        } else {
            let mut v = self.annotated_frames.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// A rigid textured shape; its centre at frame t (0-based) is `start + t * velocity`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub height: usize,
    pub width: usize,
    /// `(y, x)` of the centre at frame 0.
    pub start: (i64, i64),
    /// `(dx, dy)` in px/frame.
    pub velocity: (i64, i64),
    /// Class written to the label map.
    pub label: u8,
    pub colour: [u8; 3],
    /// Signed per-pixel offsets, `height * width * 3`, in shape-local coordinates.
    pub texture: Vec<i16>,
}

impl ShapeSpec {
    fn centre(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + self.velocity.1 * t as i64,
            self.start.1 + self.velocity.0 * t as i64,
        )
    }

    /// Shape-local coordinates of `(y, x)` at frame t when covered.
    fn local(&self, t: usize, y: i64, x: i64) -> Option<(usize, usize)> {
        let (cy, cx) = self.centre(t);
        let top = cy - self.height as i64 / 2;
        let left = cx - self.width as i64 / 2;
        let (ly, lx) = (y - top, x - left);
        if ly < 0 || lx < 0 || ly >= self.height as i64 || lx >= self.width as i64 {
            return None;
        }
        if self.kind == ShapeKind::Ellipse {
            let ry = self.height as f64 / 2.0;
            let rx = self.width as f64 / 2.0;
            let ny = (ly as f64 + 0.5 - ry) / ry;
            let nx = (lx as f64 + 0.5 - rx) / rx;
            if ny * ny + nx * nx > 1.0 {
                return None;
            }
        }
        Some((ly as usize, lx as usize))
    }
}

/// Everything needed to render one clip deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Static background, `height * width * 3` raw values.
    pub background: Vec<u8>,
    /// Drawn in order; later shapes occlude earlier ones. Owner id is index + 1.
    pub shapes: Vec<ShapeSpec>,
}

/// A rendered clip: raw frames, full labels, owner ids and per-frame ground-truth flow.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedClip {
    pub frames: Vec<Frame>,
    pub labels: Vec<LabelMap>,
    /// 0 for background, `k + 1` for `shapes[k]`.
    pub owners: Vec<Vec<u16>>,
    pub flows: Vec<FlowField>,
}

impl ClipScene {
    pub fn render<R: Rng + ?Sized>(&self, num_classes: usize, noise_std: f64, rng: &mut R) -> Result<RenderedClip> {
        let (h, w) = (self.height, self.width);
        let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = RenderedClip {
            frames: Vec::with_capacity(self.frames),
            labels: Vec::with_capacity(self.frames),
            owners: Vec::with_capacity(self.frames),
            flows: Vec::with_capacity(self.frames),
        };
        for t in 0..self.frames {
            let mut px: Vec<f64> = self.background.iter().map(|&v| v as f64).collect();
            let mut owner = vec![0u16; h * w];
            let mut label = vec![0u8; h * w];
            let mut flow = FlowField::zeros(h, w);
            for (k, s) in self.shapes.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        if let Some((ly, lx)) = s.local(t, y as i64, x as i64) {
                            let q = y * w + x;
                            for c in 0..3 {
                                let tex = s.texture[(ly * s.width + lx) * 3 + c] as f64;
                                px[q * 3 + c] = (s.colour[c] as f64 + tex).clamp(0.0, 255.0);
                            }
                            owner[q] = (k + 1) as u16;
                            label[q] = s.label;
                            if t > 0 {
                                flow.set(y, x, s.velocity.0 as f64, s.velocity.1 as f64);
                            } else {
                                flow.set(y, x, 0.0, 0.0);
                            }
                        }
                    }
                }
            }
            if noise_std > 0.0 {
                for v in px.iter_mut() {
                    *v = (*v + noise.sample(rng)).round().clamp(0.0, 255.0);
                }
            }
            out.frames.push(Frame::new(h, w, Normalization::Raw, px)?);
            out.labels.push(LabelMap::new(h, w, num_classes, label)?);
            out.owners.push(owner);
            out.flows.push(flow);
        }
        Ok(out)
    }
}

/// The generated corpus. `dataset` holds only the annotated labels, as a loader would see
/// them; `labels` and `owners` keep every frame for verification.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub dataset: VideoDataset,
    pub scenes: Vec<ClipScene>,
    pub labels: Vec<Vec<LabelMap>>,
    pub owners: Vec<Vec<Vec<u16>>>,
}

impl SyntheticCorpus {
    /// Write the standard on-disk layout and return the manifest path.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        write_dataset(root, &self.dataset)
    }

    /// Pixels of frame `t` (1-based, t >= 2) whose flow source in frame t-1 shows the
    /// same surface.
    pub fn non_disoccluded(&self, clip: usize, t: usize) -> Result<Vec<bool>> {
        let owners = &self.owners[clip];
        if t < 2 || t > owners.len() {
            return Err(Error::InvalidArgument(format!("frame {t} has no predecessor in clip")));
        }
        let flows = self.dataset.clips[clip].flows.as_ref().expect("synthetic clips record flow");
        let flow = &flows[t - 1];
        let (h, w) = (self.dataset.height, self.dataset.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.at(y, x);
                let sy = y as i64 - dy as i64;
                let sx = x as i64 - dx as i64;
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    out[y * w + x] = owners[t - 2][sy as usize * w + sx as usize] == owners[t - 1][y * w + x];
                }
            }
        }
        Ok(out)
    }
}

fn random_texture<R: Rng + ?Sized>(rng: &mut R, n: usize, amplitude: u8) -> Vec<i16> {
    let a = amplitude as i16;
    (0..n).map(|_| rng.random_range(-a..=a)).collect()
}

fn random_background<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, amplitude: u8) -> Vec<u8> {
    let fy = rng.random_range(0.5..2.0) * std::f64::consts::PI / h as f64;
    let fx = rng.random_range(0.5..2.0) * std::f64::consts::PI / w as f64;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let a = amplitude as i32;
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let smooth = 20.0 * ((y as f64 * fy + phase).sin() + (x as f64 * fx).cos());
            for _ in 0..3 {
                let v = BACKGROUND_BASE + smooth + rng.random_range(-a..=a) as f64;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Velocity component and start coordinate keeping the centre inside `[0, extent)` for
/// all frames.
fn place<R: Rng + ?Sized>(rng: &mut R, extent: usize, frames: usize, speed: i64) -> (i64, i64) {
    let span = (frames.max(1) - 1) as i64;
    let max_speed = if span == 0 { speed.abs() } else { (extent as i64 - 1) / span };
    let v = speed.signum() * speed.abs().min(max_speed);
    let travel = v * span;
    let (lo, hi) = if travel >= 0 {
        (0, extent as i64 - 1 - travel)
    } else {
        (-travel, extent as i64 - 1)
    };
    (v, rng.random_range(lo..=hi))
}

fn random_shape<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SyntheticConfig,
    label: u8,
    appearance_class: u8,
    moving: bool,
) -> ShapeSpec {
    let [lo, hi] = cfg.shape_size_range;
    let height = rng.random_range(lo..=hi);
    let width = rng.random_range(lo..=hi);
    let kind = if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let (sx, sy) = if moving {
        let [smin, smax] = cfg.object_speed_range;
        let main = rng.random_range(smin..=smax) as i64;
        let main = if rng.random_bool(0.5) { main } else { -main };
        let minor_max = (smax / 2) as i64;
        (main, rng.random_range(-minor_max..=minor_max))
    } else {
        (0, 0)
    };
    let (vx, cx) = place(rng, cfg.width, cfg.frames_per_clip, sx);
    let (vy, cy) = place(rng, cfg.height, cfg.frames_per_clip, sy);
    let colour = CLASS_COLOURS[(appearance_class as usize - 1) % CLASS_COLOURS.len()];
    ShapeSpec {
        kind,
        height,
        width,
        start: (cy, cx),
        velocity: (vx, vy),
        label,
        colour,
        texture: random_texture(rng, height * width * 3, cfg.texture_amplitude),
    }
}

/// Render a deterministic corpus; identical configs give identical corpora.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let annotated = cfg.annotated_indices();
    let object_classes = (cfg.num_classes - 1) as u8;
    let mut clips = Vec::with_capacity(cfg.num_clips);
    let mut scenes = Vec::with_capacity(cfg.num_clips);
    let mut all_labels = Vec::with_capacity(cfg.num_clips);
    let mut all_owners = Vec::with_capacity(cfg.num_clips);
    for k in 0..cfg.num_clips {
        let background = random_background(&mut rng, cfg.height, cfg.width, cfg.texture_amplitude);
        let mut shapes = Vec::with_capacity(cfg.distractors_per_clip + cfg.objects_per_clip);
        for _ in 0..cfg.distractors_per_clip {
            let look = rng.random_range(1..=object_classes);
            shapes.push(random_shape(&mut rng, cfg, 0, look, false));
        }
        for _ in 0..cfg.objects_per_clip {
            let class = rng.random_range(1..=object_classes);
            shapes.push(random_shape(&mut rng, cfg, class, class, true));
        }
        let scene = ClipScene {
            height: cfg.height,
            width: cfg.width,
            frames: cfg.frames_per_clip,
            background,
            shapes,
        };
        let rendered = scene.render(cfg.num_classes, cfg.noise_std, &mut rng)?;
        let labels: BTreeMap<usize, LabelMap> = annotated
            .iter()
            .map(|&i| (i + 1, rendered.labels[i].clone()))
            .collect();
        let split = if k >= cfg.num_clips - cfg.val_clips {
            Split::Val
        } else {
            Split::Train
        };
        clips.push(Clip {
            id: format!("clip_{k:04}"),
            split,
            frames: rendered.frames,
            labels,
            flows: Some(rendered.flows),
        });
        scenes.push(scene);
        all_labels.push(rendered.labels);
        all_owners.push(rendered.owners);
    }
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        dataset: VideoDataset {
            num_classes: cfg.num_classes,
            height: cfg.height,
            width: cfg.width,
            clips,
        },
        scenes,
        labels: all_labels,
        owners: all_owners,
    })
}
