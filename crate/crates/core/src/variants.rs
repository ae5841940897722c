//! The four injection layouts over a frozen backbone.
//!
//! - Series: a sequential adapter after the attention sublayer and another
//!   after the FFN sublayer of every block.
//! - Parallel: the same two slots, with parallel adapters beside each
//!   sublayer.
//! - Mixed: sequential at attention, parallel at FFN.
//! - Lora: low-rank updates wrapping the query and value projections.
//!
//! Building a variant never changes what the model computes: all elements
//! start as exact no-ops. `freeze_backbone` then marks every backbone
//! parameter untrainable; the injected elements and the mask head are the
//! whole trainable set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    assemble_image, decode_mask, encode, Backbone, BackboneConfig, BackboneVars, BlockHooks,
    LinearVars, MaskHead,
};
use crate::error::{Error, Result};
use crate::peft::{
    adapter_param_count, describe_adapter, describe_lora, Activation, AdapterModule, DesignElement,
    InsertionForm, LoraModule, LoraTarget, ModifiedLocation, lora_param_count,
};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Which of the four layouts to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Series,
    Parallel,
    Mixed,
    Lora,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Series,
        VariantKind::Parallel,
        VariantKind::Mixed,
        VariantKind::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Series => "series",
            VariantKind::Parallel => "parallel",
            VariantKind::Mixed => "mixed",
            VariantKind::Lora => "lora",
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "series" => Ok(VariantKind::Series),
            "parallel" => Ok(VariantKind::Parallel),
            "mixed" => Ok(VariantKind::Mixed),
            "lora" => Ok(VariantKind::Lora),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant '{other}' (expected series, parallel, mixed, or lora)"
            ))),
        }
    }
}

/// Variant selection plus its element hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantSpec {
    pub kind: VariantKind,
    /// Adapter hidden dimension as a fraction of d_model.
    pub adapter_ratio: f64,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub activation: Activation,
}

impl Default for VariantSpec {
    fn default() -> Self {
        VariantSpec {
            kind: VariantKind::Mixed,
            adapter_ratio: 0.25,
            lora_rank: 4,
            lora_scale: 1.0,
            activation: Activation::Gelu,
        }
    }
}

impl VariantSpec {
    pub fn with_kind(kind: VariantKind) -> Self {
        VariantSpec {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        if !(self.adapter_ratio > 0.0 && self.adapter_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "adapter_ratio {} must be in (0, 1)",
                self.adapter_ratio
            )));
        }
        if !self.lora_scale.is_finite() {
            return Err(Error::InvalidConfig("lora_scale must be finite".into()));
        }
        let hidden = self.adapter_hidden(config.d_model);
        if hidden == 0 || hidden >= config.d_model {
            return Err(Error::InvalidConfig(format!(
                "adapter hidden {hidden} out of range for d_model {}",
                config.d_model
            )));
        }
        if matches!(self.kind, VariantKind::Lora)
            && (self.lora_rank == 0 || self.lora_rank >= config.d_model)
        {
            return Err(Error::InvalidConfig(format!(
                "lora_rank {} out of range for d_model {}",
                self.lora_rank, config.d_model
            )));
        }
        Ok(())
    }

    pub fn adapter_hidden(&self, d_model: usize) -> usize {
        ((d_model as f64 * self.adapter_ratio).round() as usize).max(1)
    }
}

/// One planned element: what it is and where it attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedElement {
    pub descriptor: DesignElement,
}

/// Structural description of the injections, one element list per block.
/// Buildable from a config alone, without allocating weights.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    pub blocks: Vec<Vec<PlannedElement>>,
}

impl InjectionPlan {
    pub fn for_variant(config: &BackboneConfig, spec: &VariantSpec) -> Self {
        let per_block: Vec<PlannedElement> = match spec.kind {
            VariantKind::Series => vec![
                PlannedElement {
                    descriptor: describe_adapter(
                        InsertionForm::Sequential,
                        ModifiedLocation::AttnSublayer,
                    ),
                },
                PlannedElement {
                    descriptor: describe_adapter(
                        InsertionForm::Sequential,
                        ModifiedLocation::FfnSublayer,
                    ),
                },
            ],
            VariantKind::Parallel => vec![
                PlannedElement {
                    descriptor: describe_adapter(
                        InsertionForm::Parallel,
                        ModifiedLocation::AttnSublayer,
                    ),
                },
                PlannedElement {
                    descriptor: describe_adapter(
                        InsertionForm::Parallel,
                        ModifiedLocation::FfnSublayer,
                    ),
                },
            ],
            VariantKind::Mixed => vec![
                PlannedElement {
                    descriptor: describe_adapter(
                        InsertionForm::Sequential,
                        ModifiedLocation::AttnSublayer,
                    ),
                },
                PlannedElement {
                    descriptor: describe_adapter(
                        InsertionForm::Parallel,
                        ModifiedLocation::FfnSublayer,
                    ),
                },
            ],
            VariantKind::Lora => vec![
                PlannedElement {
                    descriptor: describe_lora(LoraTarget::Query),
                },
                PlannedElement {
                    descriptor: describe_lora(LoraTarget::Value),
                },
            ],
        };
        InjectionPlan {
            blocks: vec![per_block; config.depth],
        }
    }

    pub fn element_count(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// The trainable elements attached to one block.
#[derive(Debug, Clone)]
pub enum BlockElements {
    Adapters {
        attn_form: InsertionForm,
        attn: AdapterModule,
        ffn_form: InsertionForm,
        ffn: AdapterModule,
    },
    Loras { q: LoraModule, v: LoraModule },
}

/// Backbone + head + injected elements + freeze state.
#[derive(Debug, Clone)]
pub struct PeftModel {
    pub backbone: Backbone,
    pub head: MaskHead,
    pub spec: VariantSpec,
    pub plan: InjectionPlan,
    pub elements: Vec<BlockElements>,
    /// Path → frozen. Populated by [`freeze_backbone`]; empty before.
    pub freeze_mask: BTreeMap<String, bool>,
}

/// Assemble a variant over an existing backbone. All elements are
/// zero-initialized, so the result computes exactly what the base backbone
/// computes until training.
pub fn build_variant(backbone: Backbone, spec: VariantSpec, seed: u64) -> Result<PeftModel> {
    spec.validate(&backbone.config)?;
    let config = backbone.config;
    let d = config.d_model;
    let mut rng = SplitMix64::derive(seed, 0x9EF7);
    let plan = InjectionPlan::for_variant(&config, &spec);
    let mut elements = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let block = match spec.kind {
            VariantKind::Series => BlockElements::Adapters {
                attn_form: InsertionForm::Sequential,
                attn: AdapterModule::new(d, spec.adapter_hidden(d), spec.activation, true, &mut rng)?,
                ffn_form: InsertionForm::Sequential,
                ffn: AdapterModule::new(d, spec.adapter_hidden(d), spec.activation, true, &mut rng)?,
            },
            VariantKind::Parallel => BlockElements::Adapters {
                attn_form: InsertionForm::Parallel,
                attn: AdapterModule::new(d, spec.adapter_hidden(d), spec.activation, false, &mut rng)?,
                ffn_form: InsertionForm::Parallel,
                ffn: AdapterModule::new(d, spec.adapter_hidden(d), spec.activation, false, &mut rng)?,
            },
            VariantKind::Mixed => BlockElements::Adapters {
                attn_form: InsertionForm::Sequential,
                attn: AdapterModule::new(d, spec.adapter_hidden(d), spec.activation, true, &mut rng)?,
                ffn_form: InsertionForm::Parallel,
                ffn: AdapterModule::new(d, spec.adapter_hidden(d), spec.activation, false, &mut rng)?,
            },
            VariantKind::Lora => BlockElements::Loras {
                q: LoraModule::new(d, d, spec.lora_rank, spec.lora_scale, LoraTarget::Query, &mut rng)?,
                v: LoraModule::new(d, d, spec.lora_rank, spec.lora_scale, LoraTarget::Value, &mut rng)?,
            },
        };
        elements.push(block);
    }
    Ok(PeftModel {
        backbone,
        head: MaskHead::new(&config),
        spec,
        plan,
        elements,
        freeze_mask: BTreeMap::new(),
    })
}

/// Mark every backbone parameter frozen and everything else trainable. The
/// optimizer and the tape both honor the flags set here: frozen parameters
/// never materialize gradients.
pub fn freeze_backbone(model: &mut PeftModel) {
    let mut mask = BTreeMap::new();
    for (path, tensor) in model.backbone.params_mut() {
        tensor.set_requires_grad(false);
        mask.insert(path, true);
    }
    for (path, tensor) in model.head.params_mut() {
        tensor.set_requires_grad(true);
        mask.insert(path, false);
    }
    for (path, tensor) in peft_params_mut(&mut model.elements) {
        tensor.set_requires_grad(true);
        mask.insert(path, false);
    }
    model.freeze_mask = mask;
}

macro_rules! collect_peft_params {
    ($elements:expr, $out:ident, $iter:ident, $($r:tt)+) => {
        for (i, block) in $elements.$iter().enumerate() {
            match block {
                BlockElements::Adapters { attn, ffn, .. } => {
                    $out.push((format!("peft.block.{i}.attn_adapter.w_down"), $($r)+ attn.w_down));
                    $out.push((format!("peft.block.{i}.attn_adapter.b_down"), $($r)+ attn.b_down));
                    $out.push((format!("peft.block.{i}.attn_adapter.w_up"), $($r)+ attn.w_up));
                    $out.push((format!("peft.block.{i}.attn_adapter.b_up"), $($r)+ attn.b_up));
                    $out.push((format!("peft.block.{i}.ffn_adapter.w_down"), $($r)+ ffn.w_down));
                    $out.push((format!("peft.block.{i}.ffn_adapter.b_down"), $($r)+ ffn.b_down));
                    $out.push((format!("peft.block.{i}.ffn_adapter.w_up"), $($r)+ ffn.w_up));
                    $out.push((format!("peft.block.{i}.ffn_adapter.b_up"), $($r)+ ffn.b_up));
                }
                BlockElements::Loras { q, v } => {
                    $out.push((format!("peft.block.{i}.lora_q.a"), $($r)+ q.a));
                    $out.push((format!("peft.block.{i}.lora_q.b"), $($r)+ q.b));
                    $out.push((format!("peft.block.{i}.lora_v.a"), $($r)+ v.a));
                    $out.push((format!("peft.block.{i}.lora_v.b"), $($r)+ v.b));
                }
            }
        }
    };
}

fn peft_params(elements: &[BlockElements]) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    collect_peft_params!(elements, out, iter, &);
    out
}

fn peft_params_mut(elements: &mut [BlockElements]) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    collect_peft_params!(elements, out, iter_mut, &mut);
    out
}

impl PeftModel {
    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// All parameters in canonical order: backbone, head, then elements.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.params();
        out.extend(self.head.params());
        out.extend(peft_params(&self.elements));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.params_mut();
        out.extend(self.head.params_mut());
        out.extend(peft_params_mut(&mut self.elements));
        out
    }

    /// Trainable (path, tensor) pairs in canonical order.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor)> {
        self.params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }
}

/// On-tape handles for a bound model.
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub head: LinearVars,
    pub hooks: Vec<Option<BlockHooks>>,
    /// (path, var) in the same canonical order as [`PeftModel::params`].
    pub bindings: Vec<(String, Var)>,
}

impl PeftModel {
    /// Register every parameter on the tape once; the returned vars can run
    /// any number of images on that tape.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut bindings = Vec::new();
        let backbone = self.backbone.bind(tape, &mut bindings);
        let head = self.head.bind(tape, &mut bindings);
        let mut hooks = Vec::with_capacity(self.elements.len());
        for (i, block) in self.elements.iter().enumerate() {
            let hook = match block {
                BlockElements::Adapters {
                    attn_form,
                    attn,
                    ffn_form,
                    ffn,
                } => {
                    let mut leaf = |t: &Tensor, name: &str, tape: &mut Tape| {
                        let v = tape.leaf(t);
                        bindings.push((format!("peft.block.{i}.{name}"), v));
                        v
                    };
                    let attn_vars = crate::peft::AdapterVars {
                        w_down: leaf(&attn.w_down, "attn_adapter.w_down", tape),
                        b_down: leaf(&attn.b_down, "attn_adapter.b_down", tape),
                        w_up: leaf(&attn.w_up, "attn_adapter.w_up", tape),
                        b_up: leaf(&attn.b_up, "attn_adapter.b_up", tape),
                        activation: attn.activation,
                        skip_connect: attn.skip_connect,
                    };
                    let ffn_vars = crate::peft::AdapterVars {
                        w_down: leaf(&ffn.w_down, "ffn_adapter.w_down", tape),
                        b_down: leaf(&ffn.b_down, "ffn_adapter.b_down", tape),
                        w_up: leaf(&ffn.w_up, "ffn_adapter.w_up", tape),
                        b_up: leaf(&ffn.b_up, "ffn_adapter.b_up", tape),
                        activation: ffn.activation,
                        skip_connect: ffn.skip_connect,
                    };
                    BlockHooks {
                        attn_adapter: Some((*attn_form, attn_vars)),
                        ffn_adapter: Some((*ffn_form, ffn_vars)),
                        lora_q: None,
                        lora_v: None,
                    }
                }
                BlockElements::Loras { q, v } => {
                    let mut leaf = |t: &Tensor, name: &str, tape: &mut Tape| {
                        let var = tape.leaf(t);
                        bindings.push((format!("peft.block.{i}.{name}"), var));
                        var
                    };
                    BlockHooks {
                        attn_adapter: None,
                        ffn_adapter: None,
                        lora_q: Some(crate::peft::LoraVars {
                            a: leaf(&q.a, "lora_q.a", tape),
                            b: leaf(&q.b, "lora_q.b", tape),
                            scale: q.scale,
                        }),
                        lora_v: Some(crate::peft::LoraVars {
                            a: leaf(&v.a, "lora_v.a", tape),
                            b: leaf(&v.b, "lora_v.b", tape),
                            scale: v.scale,
                        }),
                    }
                }
            };
            hooks.push(Some(hook));
        }
        ModelVars {
            backbone,
            head,
            hooks,
            bindings,
        }
    }

    /// Patch-grid logits [n, patch²] for one image on an existing binding.
    pub fn forward_bound(&self, tape: &mut Tape, vars: &ModelVars, image: &Tensor) -> Result<Var> {
        let tokens = encode(tape, &vars.backbone, self.config(), image, &vars.hooks)?;
        decode_mask(tape, tokens, &vars.head)
    }

    /// Bind and run a single image.
    pub fn forward_on_tape(&self, tape: &mut Tape, image: &Tensor) -> Result<(Var, ModelVars)> {
        let vars = self.bind(tape);
        let logits = self.forward_bound(tape, &vars, image)?;
        Ok((logits, vars))
    }

    /// Mask probabilities on the pixel grid [H·W], forward only.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward_on_tape(&mut tape, image)?;
        let probs = tape.sigmoid(logits);
        Ok(assemble_image(tape.value(probs), self.config()))
    }

    /// Pixel-grid logits [H·W], forward only.
    pub fn predict_logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward_on_tape(&mut tape, image)?;
        Ok(assemble_image(tape.value(logits), self.config()))
    }
}

impl PeftModel {
    /// Token encodings [n, d] with injections applied, forward only.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let tokens = encode(&mut tape, &vars.backbone, self.config(), image, &vars.hooks)?;
        Ok(tape.to_tensor(tokens))
    }
}

/// Base-model forward (no injections): what the backbone + head compute
/// before any element is attached.
pub fn base_forward_logits(backbone: &Backbone, head: &MaskHead, image: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut bindings = Vec::new();
    let bvars = backbone.bind(&mut tape, &mut bindings);
    let hvars = head.bind(&mut tape, &mut bindings);
    let hooks = vec![None; backbone.config.depth];
    let tokens = encode(&mut tape, &bvars, &backbone.config, image, &hooks)?;
    let logits = decode_mask(&mut tape, tokens, &hvars)?;
    Ok(assemble_image(tape.value(logits), &backbone.config))
}

/// Base-model token encodings, no injections.
pub fn base_encode(backbone: &Backbone, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut bindings = Vec::new();
    let bvars = backbone.bind(&mut tape, &mut bindings);
    let hooks = vec![None; backbone.config.depth];
    let tokens = encode(&mut tape, &bvars, &backbone.config, image, &hooks)?;
    Ok(tape.to_tensor(tokens))
}

// ── parameter accounting ────────────────────────────────────────────

/// Exact integer parameter counts by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub peft: usize,
    pub head: usize,
    pub trainable: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn fraction_trainable(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Closed-form accounting from a config and variant spec, without building
/// any weights. Covers arbitrarily large configurations.
pub fn count_params(config: &BackboneConfig, spec: &VariantSpec) -> ParamCounts {
    let d = config.d_model;
    let peft_per_block = match spec.kind {
        VariantKind::Lora => 2 * lora_param_count(d, d, spec.lora_rank),
        _ => 2 * adapter_param_count(d, spec.adapter_hidden(d)),
    };
    let backbone = config.backbone_param_count();
    let head = config.head_param_count();
    let peft = config.depth * peft_per_block;
    ParamCounts {
        backbone,
        peft,
        head,
        trainable: peft + head,
        total: backbone + peft + head,
    }
}

/// Brute-force walk over the built model's actual parameter records,
/// grouping by path prefix and trainability.
pub fn count_trainable(model: &PeftModel) -> ParamCounts {
    let mut backbone = 0;
    let mut peft = 0;
    let mut head = 0;
    let mut trainable = 0;
    let mut total = 0;
    for (path, tensor) in model.params() {
        total += tensor.numel();
        if tensor.requires_grad() {
            trainable += tensor.numel();
        }
        if path.starts_with("backbone.") {
            backbone += tensor.numel();
        } else if path.starts_with("peft.") {
            peft += tensor.numel();
        } else {
            head += tensor.numel();
        }
    }
    ParamCounts {
        backbone,
        peft,
        head,
        trainable,
        total,
    }
}
