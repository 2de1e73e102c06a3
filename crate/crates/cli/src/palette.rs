//! Class index to RGB colour maps for parsing figures.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};

use crate::config::config_error;

pub const DEFAULT_PALETTE_JSON: &str = include_str!("../palettes/synthetic.json");

/// Colour for pixels carrying the ignore label.
pub const IGNORE_COLOUR: [u8; 3] = [255, 255, 255];

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    colours: BTreeMap<u8, [u8; 3]>,
}

impl Palette {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, [u8; 3]> =
            serde_json::from_str(text).map_err(|e| config_error(format!("palette: {e}")))?;
        let mut colours = BTreeMap::new();
        for (k, rgb) in raw {
            let idx: u8 = k
                .parse()
                .map_err(|_| config_error(format!("palette key `{k}` is not a class index")))?;
            colours.insert(idx, rgb);
        }
        Ok(Palette { colours })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading palette {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn default_synthetic() -> Self {
        Self::parse(DEFAULT_PALETTE_JSON).expect("bundled palette parses")
    }

    /// Every class in `0..num_classes` must have a colour.
    pub fn check_covers(&self, num_classes: usize) -> Result<()> {
        match (0..num_classes).find(|&c| !self.colours.contains_key(&(c as u8))) {
            Some(c) => Err(config_error(format!("palette has no colour for class {c}"))),
            None => Ok(()),
        }
    }

    pub fn colour(&self, class: u8, ignore: u8) -> [u8; 3] {
        if class == ignore {
            return IGNORE_COLOUR;
        }
        self.colours.get(&class).copied().unwrap_or(IGNORE_COLOUR)
    }
}
