//! Architectures: an MLP and CIFAR-style residual networks built from
//! masked weights, phased activations and optional weight sharing.

mod accounting;
mod net;
mod spec;

pub use accounting::{flops_report, learnable_census, model_flops, Density, FlopsReport, LayerFlops};
pub use net::{BnBuffers, DenseParam, Forward, Gradients, Model, ParamStore, Phase, BN_EPS, BN_MOMENTUM};
pub use spec::{
    ActGeom, ActivationMode, ArchSpec, BlockLayout, BnGeom, Body, ConvRef, DenseGeom, DenseKind, Family, Layout,
    LinearRef, Storage, WeightGeom, BOTTLENECK_EXPANSION,
};
