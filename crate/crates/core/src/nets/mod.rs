//! Network construction, evaluation and parameter handling.

pub mod graph;
pub mod kernels;
pub mod params;
pub mod presets;
pub mod spec;

pub use graph::{Activations, Gradients, Network};
pub use params::{transfer_parameters, ParamArray, ParameterStore, Provenance};
pub use presets::{
    assemble_frozen_variant, assemble_pspnet, build_adapnet, build_discriminator, build_generator,
    build_ipnet, build_ppnet_from_fpnet, discriminator_spec, ArchConfig, Backbone, Built, Composite,
    CompositeKind, FusionInit,
};
pub use spec::{Activation, LayerKind, LayerSpec, NetworkSpec, NodeInfo, SpecBuilder, Stride};

use crate::tensor::Tensor;

/// A feature map with its spatial stride relative to the input frame.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: Stride,
}
