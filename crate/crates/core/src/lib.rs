//! Parameter-efficient fine-tuning of a from-scratch ViT-style encoder.
//!
//! The crate provides a small f64 autodiff engine, a transformer image
//! encoder with a per-patch mask head, adapter and low-rank (LoRA) injection
//! elements, four standard injection layouts with frozen-backbone training,
//! segmentation metrics, and reproducible synthetic datasets. The `vitadapt`
//! CLI in the sibling crate wires these together.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod variants;

pub use backbone::{Backbone, BackboneConfig, MaskHead};
pub use error::{Error, Result};
pub use peft::{Activation, AdapterModule, DesignElement, LoraModule};
pub use rng::SplitMix64;
pub use tensor::{grad_check, grad_check_against, Gradients, Tape, Tensor, Var};
pub use variants::{
    build_variant, count_params, count_trainable, freeze_backbone, InjectionPlan, ParamCounts,
    PeftModel, VariantKind, VariantSpec,
};
