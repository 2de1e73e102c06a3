//! Flow fields, backward warping, warp-and-merge and flow providers.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::io::{flow_file_name, read_flow};
use crate::data::{Frame, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel (dx, dy) in pixels, interleaved row-major. A field stored for frame t lives
/// on t's grid and holds the motion from frame t-1 to t.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::Shape(format!(
                "{height}x{width} flow needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("flow contains non-finite values".into()));
        }
        Ok(FlowField { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let mut f = Self::zeros(height, width);
        for v in f.data.chunks_exact_mut(2) {
            v[0] = dx;
            v[1] = dy;
        }
        f
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: f64, dy: f64) {
        let i = (y * self.width + x) * 2;
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(Error::Shape(format!(
                "{}x{} flow applied to {h}x{w} map",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Planar (dx, dy) channels for network input, scaled by `scale`.
    pub fn planar(&self, scale: f64) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 2 * hw];
        for p in 0..hw {
            out[p] = self.data[2 * p] * scale;
            out[hw + p] = self.data[2 * p + 1] * scale;
        }
        out
    }
}

/// Backward nearest-neighbour warp: `out(p) = map(round(p - F(p)))`. Out-of-frame sources
/// are invalid and carry the ignore index.
pub fn warp_labels(map: &LabelMap, flow: &FlowField) -> Result<(LabelMap, Vec<bool>)> {
    let (h, w) = (map.height(), map.width());
    flow.check(h, w)?;
    let mut out = vec![map.ignore_index(); h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let sx = (x as f64 - dx).round();
            let sy = (y as f64 - dy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                out[y * w + x] = map.get(sy as usize, sx as usize);
                valid[y * w + x] = true;
            }
        }
    }
    Ok((map.with_labels(h, w, out), valid))
}

/// Backward bilinear warp of a `[1, C, H, W]` probability map. Sources outside
/// `[0, W-1] x [0, H-1]` are invalid and left at zero.
pub fn warp_probs(probs: &Tensor, flow: &FlowField) -> Result<(Tensor, Vec<bool>)> {
    let [n, c, h, w] = probs.shape();
    if n != 1 {
        return Err(Error::Shape("probability warp expects a single map".into()));
    }
    flow.check(h, w)?;
    let mut out = Tensor::zeros([1, c, h, w]);
    let mut valid = vec![false; h * w];
    let hw = h * w;
    let src = probs.data();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let sx = x as f64 - dx;
            let sy = y as f64 - dy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            valid[y * w + x] = true;
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let o = out.data_mut();
            for k in 0..c {
                let base = k * hw;
                let v = (1.0 - fy) * ((1.0 - fx) * src[base + y0 * w + x0] + fx * src[base + y0 * w + x1])
                    + fy * ((1.0 - fx) * src[base + y1 * w + x0] + fx * src[base + y1 * w + x1]);
                o[base + y * w + x] = v;
            }
        }
    }
    Ok((out, valid))
}

/// `alpha * prev + (1 - alpha) * current` on valid pixels, `current` elsewhere, then
/// renormalized to sum 1 per pixel.
pub fn merge_warped(prev_warped: &Tensor, validity: &[bool], current: &Tensor, alpha: f64) -> Result<Tensor> {
    if prev_warped.shape() != current.shape() {
        return Err(Error::Shape("merge of differently shaped probability maps".into()));
    }
    let [n, c, h, w] = current.shape();
    let hw = h * w;
    if n != 1 || validity.len() != hw {
        return Err(Error::Shape("validity mask does not match probability map".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("merge weight {alpha} outside [0, 1]")));
    }
    let mut out = current.clone();
    let (p, o) = (prev_warped.data(), out.data_mut());
    for q in 0..hw {
        if validity[q] {
            for k in 0..c {
                let i = k * hw + q;
                o[i] = alpha * p[i] + (1.0 - alpha) * o[i];
            }
        }
        let sum: f64 = (0..c).map(|k| o[k * hw + q]).sum();
        if sum > 0.0 {
            for k in 0..c {
                o[k * hw + q] /= sum;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockMatching {
    pub block: usize,
    pub radius: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        BlockMatching { block: 8, radius: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FlowProvider {
    /// Flow recorded by the synthetic generator.
    SyntheticTruth,
    /// Exhaustive integer search per block.
    BlockMatching(BlockMatching),
    /// Precomputed FLO1 files under `<dir>/<clip_id>/frame_%06d.npyflt`.
    External { dir: PathBuf },
}

impl FlowProvider {
    pub fn from_name(name: &str, external_dir: Option<PathBuf>) -> Result<Self> {
        match name {
            "synthetic-truth" => Ok(FlowProvider::SyntheticTruth),
            "block-matching" => Ok(FlowProvider::BlockMatching(BlockMatching::default())),
            "external" => external_dir
                .map(|dir| FlowProvider::External { dir })
                .ok_or_else(|| Error::Config("the external flow provider needs a directory".into())),
            other => Err(Error::UnknownFlowProvider(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FlowProvider::SyntheticTruth => "synthetic-truth",
            FlowProvider::BlockMatching(_) => "block-matching",
            FlowProvider::External { .. } => "external",
        }
    }
}

/// Identifies frame `index` (1-based) of a clip for providers that look flow up.
/// `recorded` holds the clip's stored flows for frames `1..=index` or more.
#[derive(Clone, Copy)]
pub struct FlowQuery<'a> {
    pub clip_id: &'a str,
    pub recorded: Option<&'a [FlowField]>,
    pub index: usize,
}

/// Flow from `a` (frame t-1) to `b` (frame t), expressed on `b`'s grid.
pub fn compute_flow(a: &Frame, b: &Frame, provider: &FlowProvider, query: Option<FlowQuery<'_>>) -> Result<FlowField> {
    if !a.same_size(b) {
        return Err(Error::Shape("flow between differently sized frames".into()));
    }
    let flow = match provider {
        FlowProvider::BlockMatching(cfg) => return block_matching_flow(a, b, cfg),
        FlowProvider::SyntheticTruth => {
            let q = query.ok_or_else(|| Error::InvalidArgument("synthetic-truth flow needs a clip reference".into()))?;
            let flows = q
                .recorded
                .ok_or_else(|| Error::Dataset(format!("clip {} has no recorded flow", q.clip_id)))?;
            flows
                .get(q.index.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("frame {} outside clip {}", q.index, q.clip_id)))?
        }
        FlowProvider::External { dir } => {
            let q = query.ok_or_else(|| Error::InvalidArgument("external flow needs a clip reference".into()))?;
            if q.index == 0 {
                return Err(Error::InvalidArgument("frame indices start at 1".into()));
            }
            read_flow(&dir.join(q.clip_id).join(flow_file_name(q.index - 1)))?
        }
    };
    flow.check(b.height(), b.width())?;
    Ok(flow)
}

/// For each block of `b`, the displacement `d` minimising the SSD between `b(p)` and
/// `a(p - d)`. Candidates whose source block leaves the frame are skipped; ties go to the
/// smallest `|d|`, then to the first in raster order.
pub fn block_matching_flow(a: &Frame, b: &Frame, cfg: &BlockMatching) -> Result<FlowField> {
    if cfg.block == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    if !a.same_size(b) || a.norm() != b.norm() {
        return Err(Error::Shape("block matching needs same-size, same-domain frames".into()));
    }
    let (h, w) = (b.height(), b.width());
    let r = cfg.radius as isize;
    let mut flow = FlowField::zeros(h, w);
    for by in (0..h).step_by(cfg.block) {
        for bx in (0..w).step_by(cfg.block) {
            let bh = cfg.block.min(h - by);
            let bw = cfg.block.min(w - bx);
            let mut best = (f64::INFINITY, isize::MAX, 0isize, 0isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = by as isize - dy;
                    let sx = bx as isize - dx;
                    if sy < 0 || sx < 0 || sy as usize + bh > h || sx as usize + bw > w {
                        continue;
                    }
                    let mut ssd = 0.0;
                    for y in 0..bh {
                        let rb = ((by + y) * w + bx) * 3;
                        let ra = ((sy as usize + y) * w + sx as usize) * 3;
                        let pb = &b.pixels()[rb..rb + bw * 3];
                        let pa = &a.pixels()[ra..ra + bw * 3];
                        ssd += pb.iter().zip(pa).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
                    }
                    let mag = dx * dx + dy * dy;
                    if ssd < best.0 || (ssd == best.0 && mag < best.1) {
                        best = (ssd, mag, dx, dy);
                    }
                }
            }
            for y in by..by + bh {
                for x in bx..bx + bw {
                    flow.set(y, x, best.2 as f64, best.3 as f64);
                }
            }
        }
    }
    Ok(flow)
}

/// Mean over consecutive pairs of the fraction of valid pixels where the warped
/// prediction of frame t agrees with the prediction of frame t+1. `flows[t]` carries
/// frame t to t+1; `masks`, when given, further restricts the scored pixels per pair.
pub fn temporal_consistency(preds: &[LabelMap], flows: &[FlowField], masks: Option<&[Vec<bool>]>) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::InvalidArgument("temporal consistency needs at least two maps".into()));
    }
    if flows.len() != preds.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} maps need {} flows, got {}",
            preds.len(),
            preds.len() - 1,
            flows.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != flows.len() {
            return Err(Error::InvalidArgument("one mask per consecutive pair expected".into()));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for t in 0..flows.len() {
        let (warped, valid) = warp_labels(&preds[t], &flows[t])?;
        let next = &preds[t + 1];
        if next.height() != warped.height() || next.width() != warped.width() {
            return Err(Error::Shape("prediction sizes differ within a clip".into()));
        }
        let mut agree = 0usize;
        let mut scored = 0usize;
        for (q, &v) in valid.iter().enumerate() {
            let keep = v && masks.map_or(true, |m| m[t][q]);
            if keep {
                scored += 1;
                if warped.labels()[q] == next.labels()[q] {
                    agree += 1;
                }
            }
        }
        if scored > 0 {
            total += agree as f64 / scored as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument("no valid pixels to score".into()));
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalization;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
        Frame::new(h, w, Normalization::Raw, (0..h * w * 3).map(|_| rng.random_range(0..=255) as f64).collect()).unwrap()
    }

    fn shift(f: &Frame, dx: isize, dy: isize) -> Frame {
        let (h, w) = (f.height() as isize, f.width() as isize);
        let mut px = vec![0.0; f.pixels().len()];
        for y in 0..h {
            for x in 0..w {
                let sy = (y - dy).rem_euclid(h);
                let sx = (x - dx).rem_euclid(w);
                for c in 0..3 {
                    px[((y * w + x) * 3 + c) as usize] = f.get(sy as usize, sx as usize, c as usize);
                }
            }
        }
        Frame::new(f.height(), f.width(), f.norm(), px).unwrap()
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let l = LabelMap::new(2, 3, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let (out, valid) = warp_labels(&l, &FlowField::zeros(2, 3)).unwrap();
        assert_eq!(out, l);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn integer_translation_shifts_labels() {
        let l = LabelMap::new(1, 5, 5, vec![0, 1, 2, 3, 4]).unwrap();
        let (out, valid) = warp_labels(&l, &FlowField::constant(1, 5, 2.0, 0.0)).unwrap();
        assert_eq!(valid, vec![false, false, true, true, true]);
        assert_eq!(&out.labels()[2..], &[0, 1, 2]);
        let (_, none) = warp_labels(&l, &FlowField::constant(1, 5, 10.0, 0.0)).unwrap();
        assert!(none.iter().all(|&v| !v));
    }

    #[test]
    fn bilinear_warp_interpolates() {
        let p = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let (out, valid) = warp_probs(&p, &FlowField::constant(1, 3, 0.5, 0.0)).unwrap();
        assert_eq!(valid, vec![false, true, true]);
        assert_eq!(&out.data()[1..], &[0.5, 0.5]);
    }

    #[test]
    fn merge_examples() {
        let prev = Tensor::from_vec([1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let cur = Tensor::from_vec([1, 2, 1, 1], vec![0.9, 0.1]).unwrap();
        assert_eq!(merge_warped(&prev, &[true], &cur, 0.0).unwrap(), cur);
        assert_eq!(merge_warped(&prev, &[true], &cur, 1.0).unwrap(), prev);
        let m = merge_warped(&prev, &[true], &cur, 0.5).unwrap();
        assert!((m.data()[0] - 0.7).abs() < 1e-12 && (m.data()[1] - 0.3).abs() < 1e-12);
        assert_eq!(merge_warped(&prev, &[false], &cur, 0.5).unwrap(), cur);
    }

    #[test]
    fn block_matching_finds_global_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_frame(&mut rng, 32, 32);
        assert_eq!(block_matching_flow(&a, &a, &BlockMatching::default()).unwrap(), FlowField::zeros(32, 32));
        let b = shift(&a, 2, -1);
        let f = block_matching_flow(&a, &b, &BlockMatching::default()).unwrap();
        for y in 8..24 {
            for x in 8..24 {
                assert_eq!(f.at(y, x), (2.0, -1.0));
            }
        }
    }

    #[test]
    fn unknown_provider_is_an_error() {
        assert!(matches!(FlowProvider::from_name("epic", None), Err(Error::UnknownFlowProvider(_))));
        assert!(FlowProvider::from_name("external", None).is_err());
        assert_eq!(FlowProvider::from_name("block-matching", None).unwrap().name(), "block-matching");
    }

    #[test]
    fn consistency_examples() {
        let a = LabelMap::new(1, 4, 2, vec![0, 1, 0, 1]).unwrap();
        let b = LabelMap::new(1, 4, 2, vec![1, 0, 1, 0]).unwrap();
        let z = FlowField::zeros(1, 4);
        assert_eq!(temporal_consistency(&[a.clone(), a.clone()], &[z.clone()], None).unwrap(), 1.0);
        assert_eq!(temporal_consistency(&[a, b], &[z], None).unwrap(), 0.0);
    }
}
