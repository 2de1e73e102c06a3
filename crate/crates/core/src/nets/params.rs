//! Named parameter arrays and name-based transfer between networks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::spec::{section_of, LayerKind, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        ParamArray {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Where a group of parameters came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Provenance {
    Random,
    TransferredFrom(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Random => f.write_str("random"),
            Provenance::TransferredFrom(stage) => write!(f, "transferred-from:{stage}"),
        }
    }
}

impl From<Provenance> for String {
    fn from(p: Provenance) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Provenance {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        if s == "random" {
            Ok(Provenance::Random)
        } else if let Some(stage) = s.strip_prefix("transferred-from:") {
            Ok(Provenance::TransferredFrom(stage.to_string()))
        } else {
            Err(format!("unknown provenance `{s}`"))
        }
    }
}

/// Flat `layer.weight` / `layer.bias` map plus per-section provenance and freeze flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, ParamArray>,
    provenance: BTreeMap<String, Provenance>,
    frozen: BTreeSet<String>,
    /// Bumped on every in-place update.
    pub version: u64,
}

/// Section of a parameter name (`pp.en.conv1.weight` -> `pp.en`).
pub fn param_section(param: &str) -> &str {
    section_of(section_of(param))
}

fn in_section(param: &str, section: &str) -> bool {
    param_section(param) == section
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh parameters for every trainable layer: He fan-in normal for convolutions and
    /// affine layers, bilinear upsampling for transposed convolutions, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut store = ParameterStore::new();
        for layer in &spec.layers {
            store.init_layer(&layer.name, &layer.kind, rng);
        }
        for section in spec.sections() {
            store.provenance.insert(section, Provenance::Random);
        }
        store
    }

    pub(crate) fn init_layer<R: Rng + ?Sized>(&mut self, name: &str, kind: &LayerKind, rng: &mut R) {
        for (suffix, shape) in kind.param_shapes() {
            let mut arr = ParamArray::zeros(shape);
            if suffix == "weight" {
                match *kind {
                    LayerKind::Conv {
                        in_channels,
                        kernel,
                        groups,
                        ..
                    } => he_fill(&mut arr.data, in_channels / groups * kernel * kernel, rng),
                    LayerKind::Affine { in_features, .. } => {
                        he_fill(&mut arr.data, in_features, rng)
                    }
                    LayerKind::ConvTranspose {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => bilinear_fill(&mut arr.data, in_channels, out_channels, kernel),
                    _ => {}
                }
            }
            self.params.insert(format!("{name}.{suffix}"), arr);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, arr: ParamArray) {
        self.params.insert(name.into(), arr);
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamArray> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamArray)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamArray)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(ParamArray::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .values()
            .all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    pub fn provenance(&self) -> &BTreeMap<String, Provenance> {
        &self.provenance
    }

    pub fn set_provenance(&mut self, section: &str, p: Provenance) {
        self.provenance.insert(section.to_string(), p);
    }

    pub fn freeze(&mut self, section: &str) {
        self.frozen.insert(section.to_string());
    }

    pub fn unfreeze(&mut self, section: &str) {
        self.frozen.remove(section);
    }

    pub fn frozen_sections(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_trainable(&self, param: &str) -> bool {
        let section = param_section(param);
        !self
            .frozen
            .iter()
            .any(|f| section == f || section.starts_with(&format!("{f}.")))
    }

    /// Arrays belonging to `section`, in name order.
    pub fn section(&self, section: &str) -> impl Iterator<Item = (&String, &ParamArray)> {
        let section = section.to_string();
        self.params
            .iter()
            .filter(move |(k, _)| in_section(k, &section))
    }

    /// Check that every trainable layer of `spec` has exactly one array of matching shape
    /// and that no extra arrays are present.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.parameter_shapes();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => {
                    return Err(Error::Spec(format!(
                        "parameter `{name}` missing for network `{}`",
                        spec.name
                    )))
                }
                Some(a) if &a.shape != shape || a.data.len() != shape.iter().product::<usize>() => {
                    return Err(Error::Spec(format!(
                        "parameter `{name}` has shape {:?}, network expects {shape:?}",
                        a.shape
                    )))
                }
                _ => {}
            }
        }
        if self.params.len() != expected.len() {
            let extra: Vec<&String> = self
                .params
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::Spec(format!(
                "unexpected parameters for network `{}`: {extra:?}",
                spec.name
            )));
        }
        Ok(())
    }

    /// Copy every array of `section` from `src` into `self` under the same names.
    pub fn transfer_from(&mut self, src: &ParameterStore, section: &str, stage: &str) -> Result<usize> {
        self.transfer_mapped(src, section, section, stage)
    }

    /// Copy arrays of `src_section` in `src` into `dst_section` of `self`, renaming the
    /// section prefix. Shapes are validated for every array before anything is written.
    pub fn transfer_mapped(
        &mut self,
        src: &ParameterStore,
        src_section: &str,
        dst_section: &str,
        stage: &str,
    ) -> Result<usize> {
        let mut plan = Vec::new();
        for (name, arr) in src.section(src_section) {
            let local = &name[src_section.len() + 1..];
            let dst_name = format!("{dst_section}.{local}");
            match self.params.get(&dst_name) {
                None => {
                    return Err(Error::Transfer {
                        layer: dst_name,
                        reason: "no such parameter in destination".into(),
                    })
                }
                Some(d) if d.shape != arr.shape => {
                    return Err(Error::Transfer {
                        layer: dst_name,
                        reason: format!("shape {:?} does not match source {:?}", d.shape, arr.shape),
                    })
                }
                _ => plan.push((dst_name, arr)),
            }
        }
        if plan.is_empty() {
            return Err(Error::Transfer {
                layer: src_section.to_string(),
                reason: "source section holds no parameters".into(),
            });
        }
        let dst_count = self.section(dst_section).count();
        if dst_count != plan.len() {
            return Err(Error::Transfer {
                layer: dst_section.to_string(),
                reason: format!(
                    "destination section has {dst_count} arrays, source provides {}",
                    plan.len()
                ),
            });
        }
        let n = plan.len();
        for (dst_name, arr) in plan {
            self.params
                .get_mut(&dst_name)
                .expect("validated above")
                .data
                .copy_from_slice(&arr.data);
        }
        self.provenance.insert(
            dst_section.to_string(),
            Provenance::TransferredFrom(stage.to_string()),
        );
        self.version += 1;
        Ok(n)
    }

    /// Absorb `other`'s arrays under `prefix.` (used when composing networks).
    pub fn merge_prefixed(&mut self, other: &ParameterStore, prefix: &str) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}.{k}"), v.clone());
        }
        for (k, v) in &other.provenance {
            self.provenance.insert(format!("{prefix}.{k}"), v.clone());
        }
        for f in &other.frozen {
            self.frozen.insert(format!("{prefix}.{f}"));
        }
    }

    /// Subset of `self` whose names start with `prefix.`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParameterStore {
        let p = format!("{prefix}.");
        let mut out = ParameterStore::new();
        for (k, v) in &self.params {
            if let Some(rest) = k.strip_prefix(&p) {
                out.params.insert(rest.to_string(), v.clone());
            }
        }
        for (k, v) in &self.provenance {
            if let Some(rest) = k.strip_prefix(&p) {
                out.provenance.insert(rest.to_string(), v.clone());
            }
        }
        out.version = self.version;
        out
    }

    pub(crate) fn provenance_mut(&mut self) -> &mut BTreeMap<String, Provenance> {
        &mut self.provenance
    }

    pub(crate) fn frozen_mut(&mut self) -> &mut BTreeSet<String> {
        &mut self.frozen
    }
}

/// Transfer `section` from `src` into `dst`; returns the number of arrays copied.
pub fn transfer_parameters(
    src: &ParameterStore,
    dst: &mut ParameterStore,
    section: &str,
    stage: &str,
) -> Result<usize> {
    dst.transfer_from(src, section, stage)
}

fn he_fill<R: Rng + ?Sized>(data: &mut [f64], fan_in: usize, rng: &mut R) {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    data.iter_mut().for_each(|v| *v = normal.sample(rng));
}

/// Bilinear upsampling kernel on the channel diagonal (`[in, out, k, k]` layout).
pub(crate) fn bilinear_fill(data: &mut [f64], cin: usize, cout: usize, k: usize) {
    data.fill(0.0);
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 {
        factor - 1.0
    } else {
        factor - 0.5
    };
    let mut kernel = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            kernel[y * k + x] = (1.0 - (y as f64 - center).abs() / factor)
                * (1.0 - (x as f64 - center).abs() / factor);
        }
    }
    for c in 0..cin.min(cout) {
        let start = (c * cout + c) * k * k;
        data[start..start + k * k].copy_from_slice(&kernel);
    }
}
