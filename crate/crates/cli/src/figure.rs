//! Tile grids written as PNG.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use pearl::data::{Frame, LabelMap, Normalization};

use crate::palette::Palette;

const GAP: u32 = 2;
const GAP_COLOUR: Rgb<u8> = Rgb([64, 64, 64]);

/// One tile: an image, or an empty cell of the given size.
pub enum Tile {
    Image(RgbImage),
    Blank(u32, u32),
}

pub fn frame_tile(frame: &Frame) -> Result<Tile> {
    frame.expect_norm(Normalization::Raw)?;
    let bytes: Vec<u8> = frame.pixels().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let img = RgbImage::from_raw(frame.width() as u32, frame.height() as u32, bytes).context("frame buffer size")?;
    Ok(Tile::Image(img))
}

pub fn label_tile(map: &LabelMap, palette: &Palette) -> Tile {
    let mut img = RgbImage::new(map.width() as u32, map.height() as u32);
    for (q, &l) in map.labels().iter().enumerate() {
        let (x, y) = ((q % map.width()) as u32, (q / map.width()) as u32);
        img.put_pixel(x, y, Rgb(palette.colour(l, map.ignore_index())));
    }
    Tile::Image(img)
}

impl Tile {
    fn size(&self) -> (u32, u32) {
        match self {
            Tile::Image(i) => i.dimensions(),
            Tile::Blank(w, h) => (*w, *h),
        }
    }
}

/// Rows of equally sized tiles separated by a gap.
pub fn compose(rows: &[Vec<Tile>]) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flat_map(|r| r.iter())
        .next()
        .context("figure has no tiles")?;
    let (tw, th) = first.size();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let n = rows.len() as u32;
    let mut out = RgbImage::from_pixel(cols * tw + (cols + 1) * GAP, n * th + (n + 1) * GAP, GAP_COLOUR);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.size() != (tw, th) {
                anyhow::bail!("tile sizes differ within a figure");
            }
            if let Tile::Image(img) = tile {
                let x0 = GAP + c as u32 * (tw + GAP);
                let y0 = GAP + r as u32 * (th + GAP);
                for (x, y, p) in img.enumerate_pixels() {
                    out.put_pixel(x0 + x, y0 + y, *p);
                }
            }
        }
    }
    Ok(out)
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size_and_placement() {
        let f = Frame::filled(3, 4, Normalization::Raw, 200.0);
        let rows = vec![vec![frame_tile(&f).unwrap(), Tile::Blank(4, 3)], vec![frame_tile(&f).unwrap()]];
        let img = compose(&rows).unwrap();
        assert_eq!(img.dimensions(), (2 * 4 + 3 * GAP, 2 * 3 + 3 * GAP));
        assert_eq!(*img.get_pixel(GAP, GAP), Rgb([200, 200, 200]));
        assert_eq!(*img.get_pixel(2 * GAP + 4, GAP), GAP_COLOUR);
    }

    #[test]
    fn labels_use_the_palette() {
        let map = LabelMap::new(1, 2, 3, vec![1, 2]).unwrap();
        let Tile::Image(img) = label_tile(&map, &Palette::default_synthetic()) else {
            panic!("expected an image tile")
        };
        assert_eq!(img.get_pixel(0, 0).0, [220, 50, 40]);
        assert_eq!(img.get_pixel(1, 0).0, [40, 190, 70]);
    }
}
