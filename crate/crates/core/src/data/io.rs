//! On-disk dataset layout: PNG frames and labels, `manifest.json` and FLO1 flow rasters.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Frame, LabelMap, Normalization};
use crate::error::{Error, Result};
use crate::eval::FlowField;

pub const MANIFEST_FILE: &str = "manifest.json";
const FLOW_MAGIC: &[u8; 4] = b"FLO1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// A label file attached to one frame; `index` is 0-based as in file names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub index: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub split: Split,
    pub frames: Vec<String>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows: Option<Vec<String>>,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Dataset("manifest declares no classes".into()));
        }
        for clip in &self.clips {
            if clip.frames.is_empty() {
                return Err(Error::Dataset(format!("clip {} has no frames", clip.id)));
            }
            if clip.frames.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Dataset(format!(
                    "frame paths of clip {} are not strictly ordered",
                    clip.id
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for a in &clip.annotations {
                if a.index >= clip.frames.len() || !seen.insert(a.index) {
                    return Err(Error::Dataset(format!(
                        "annotation {} of clip {} does not name a unique frame",
                        a.index, clip.id
                    )));
                }
            }
            if let Some(f) = &clip.flows {
                if f.len() != clip.frames.len() {
                    return Err(Error::Dataset(format!(
                        "clip {} lists {} flow files for {} frames",
                        clip.id,
                        f.len(),
                        clip.frames.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn annotated_count(&self) -> usize {
        self.clips.iter().map(|c| c.annotations.len()).sum()
    }
}

/// One clip held in memory. Label and flow indices are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub split: Split,
    pub frames: Vec<Frame>,
    pub labels: BTreeMap<usize, LabelMap>,
    /// `flows[t-1]` is the motion from frame t-1 to t on frame t's grid; frame 1 holds zeros.
    pub flows: Option<Vec<FlowField>>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A fully loaded dataset of raw frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDataset {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<Clip>,
}

impl VideoDataset {
    pub fn clip_by_id(&self, id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Split into (train, val) without copying frames.
    pub fn into_splits(self) -> (VideoDataset, VideoDataset) {
        let (train, val): (Vec<Clip>, Vec<Clip>) = self.clips.into_iter().partition(|c| c.split == Split::Train);
        let make = |clips| VideoDataset {
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
            clips,
        };
        (make(train), make(val))
    }

    pub fn filter_split(&self, split: Split) -> VideoDataset {
        VideoDataset {
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
            clips: self.clips.iter().filter(|c| c.split == split).cloned().collect(),
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &LabelMap> {
        self.clips.iter().flat_map(|c| c.labels.values())
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.clips.iter().flat_map(|c| c.frames.iter())
    }

    pub fn annotated_count(&self) -> usize {
        self.clips.iter().map(|c| c.labels.len()).sum()
    }
}

pub fn frame_file_name(index0: usize) -> String {
    format!("frame_{index0:06}.png")
}

pub fn flow_file_name(index0: usize) -> String {
    format!("frame_{index0:06}.npyflt")
}

pub fn read_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let px = img.into_raw().into_iter().map(f64::from).collect();
    Frame::new(h as usize, w as usize, Normalization::Raw, px)
}

/// Quantize a raw frame to 8 bits (round, clamp) and write it as RGB PNG.
pub fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    frame.expect_norm(Normalization::Raw)?;
    let bytes: Vec<u8> = frame.pixels().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("frame buffer size".into()))?;
    save_png(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}

pub fn read_label_png(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    LabelMap::new(h as usize, w as usize, num_classes, img.into_raw())
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn write_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    let img = image::GrayImage::from_raw(label.width() as u32, label.height() as u32, label.labels().to_vec())
        .ok_or_else(|| Error::Shape("label buffer size".into()))?;
    save_png(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}

pub(crate) fn save_png(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// "FLO1", u32 LE height, u32 LE width, then f32 LE (dx, dy) per pixel, row-major.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::with_capacity(12 + flow.data().len() * 4);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for &v in flow.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::Dataset(format!("{}: missing FLO1 header", path.display())));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != h * w * 2 * 4 {
        return Err(Error::Dataset(format!(
            "{}: {h}x{w} flow needs {} bytes, found {}",
            path.display(),
            h * w * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FlowField::new(h, w, data)
}

/// Load every frame, annotation and (when listed) flow referenced by `<root>/manifest.json`.
pub fn load_dataset(root: &Path) -> Result<VideoDataset> {
    let manifest = DatasetManifest::read(&root.join(MANIFEST_FILE))?;
    load_from_manifest(root, &manifest)
}

pub fn load_from_manifest(root: &Path, manifest: &DatasetManifest) -> Result<VideoDataset> {
    let [height, width] = manifest.resolution;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let frames = entry
            .frames
            .iter()
            .map(|p| read_frame_png(&root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        for f in &frames {
            if f.height() != height || f.width() != width {
                return Err(Error::Dataset(format!(
                    "clip {}: frame is {}x{}, manifest says {height}x{width}",
                    entry.id,
                    f.height(),
                    f.width()
                )));
            }
        }
        let mut labels = BTreeMap::new();
        for a in &entry.annotations {
            let l = read_label_png(&root.join(&a.label), manifest.num_classes)?;
            if l.height() != height || l.width() != width {
                return Err(Error::Dataset(format!("clip {}: label size mismatch", entry.id)));
            }
            labels.insert(a.index + 1, l);
        }
        let flows = entry
            .flows
            .as_ref()
            .map(|paths| paths.iter().map(|p| read_flow(&root.join(p))).collect::<Result<Vec<_>>>())
            .transpose()?;
        clips.push(Clip {
            id: entry.id.clone(),
            split: entry.split,
            frames,
            labels,
            flows,
        });
    }
    Ok(VideoDataset {
        num_classes: manifest.num_classes,
        height,
        width,
        clips,
    })
}

/// Write a dataset in the standard layout and return the manifest path.
pub fn write_dataset(root: &Path, dataset: &VideoDataset) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(dataset.clips.len());
    for clip in &dataset.clips {
        let mut frames = Vec::with_capacity(clip.frames.len());
        for (k, f) in clip.frames.iter().enumerate() {
            let rel = format!("clips/{}/{}", clip.id, frame_file_name(k));
            write_frame_png(&root.join(&rel), f)?;
            frames.push(rel);
        }
        let mut annotations = Vec::new();
        for (&i, l) in &clip.labels {
            let rel = format!("labels/{}/{}", clip.id, frame_file_name(i - 1));
            write_label_png(&root.join(&rel), l)?;
            annotations.push(Annotation { index: i - 1, label: rel });
        }
        let flows = match &clip.flows {
            Some(fl) => {
                let mut out = Vec::with_capacity(fl.len());
                for (k, f) in fl.iter().enumerate() {
                    let rel = format!("flow/{}/{}", clip.id, flow_file_name(k));
                    write_flow(&root.join(&rel), f)?;
                    out.push(rel);
                }
                Some(out)
            }
            None => None,
        };
        entries.push(ClipEntry {
            id: clip.id.clone(),
            split: clip.split,
            frames,
            annotations,
            flows,
        });
    }
    let manifest = DatasetManifest {
        num_classes: dataset.num_classes,
        resolution: [dataset.height, dataset.width],
        clips: entries,
    };
    manifest.validate()?;
    let path = root.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}
