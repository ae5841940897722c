//! The two injection elements — bottleneck adapters and low-rank (LoRA)
//! projection updates — plus the four-dimension descriptor that unifies them.
//!
//! Both elements compute a residual correction Δh to a hidden state. An
//! adapter is down-projection → nonlinearity → up-projection; sequential use
//! transforms a sublayer's output (with its own skip), parallel use runs
//! beside the sublayer reading the sublayer's input and contributing the
//! residual itself. LoRA adds s·x·Aᵀ·Bᵀ beside a frozen projection.
//!
//! Freshly constructed elements are exact no-ops: adapter up-projections and
//! LoRA B matrices start at zero, so an injected model reproduces the base
//! model bit-for-bit until training moves the new parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Adapter nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Bottleneck adapter: d → r_a → d with biases.
#[derive(Debug, Clone)]
pub struct AdapterModule {
    pub w_down: Tensor, // [d, r_a]
    pub b_down: Tensor, // [r_a]
    pub w_up: Tensor,   // [r_a, d]
    pub b_up: Tensor,   // [d]
    pub activation: Activation,
    pub skip_connect: bool,
}

impl AdapterModule {
    /// Zero-init policy: `w_down` small-random, `w_up` and both biases zero,
    /// so the module contributes Δh = 0 at construction.
    pub fn new(
        d: usize,
        hidden: usize,
        activation: Activation,
        skip_connect: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if hidden == 0 || hidden >= d {
            return Err(Error::InvalidConfig(format!(
                "adapter hidden dimension {hidden} must be in 1..{d}"
            )));
        }
        let w_down = Tensor::new(
            vec![d, hidden],
            (0..d * hidden).map(|_| rng.next_normal_trunc(0.02, 2.0)).collect(),
        )?;
        Ok(AdapterModule {
            w_down,
            b_down: Tensor::zeros(vec![hidden]),
            w_up: Tensor::zeros(vec![hidden, d]),
            b_up: Tensor::zeros(vec![d]),
            activation,
            skip_connect,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_down.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        adapter_param_count(self.feature_dim(), self.hidden_dim())
    }
}

/// Weights + biases of one adapter: d·r_a + r_a + r_a·d + d.
pub fn adapter_param_count(d: usize, hidden: usize) -> usize {
    d * hidden + hidden + hidden * d + d
}

/// Which projection a LoRA module wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Value,
}

/// Low-rank update for a frozen linear map: output gains s·(x·Aᵀ)·Bᵀ.
/// No bias terms.
#[derive(Debug, Clone)]
pub struct LoraModule {
    pub a: Tensor, // [r, d_in]  down-projection
    pub b: Tensor, // [d_out, r] up-projection, zero at construction
    pub scale: f64,
    pub target: LoraTarget,
}

impl LoraModule {
    pub fn new(
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
        target: LoraTarget,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::InvalidConfig(format!(
                "LoRA rank {rank} must be in 1..min({d_in}, {d_out})"
            )));
        }
        let a = Tensor::new(
            vec![rank, d_in],
            (0..rank * d_in).map(|_| rng.next_normal_trunc(0.02, 2.0)).collect(),
        )?;
        Ok(LoraModule {
            a,
            b: Tensor::zeros(vec![d_out, rank]),
            scale,
            target,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// LoRA parameters per wrapped projection: r·d_in + d_out·r (2·d·r when
/// square). Zero rank means no injection and counts zero.
pub fn lora_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * d_in + d_out * rank
}

// ── tape application ────────────────────────────────────────────────

/// On-tape handles for one adapter's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub activation: Activation,
    pub skip_connect: bool,
}

impl AdapterModule {
    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            w_down: tape.leaf(&self.w_down),
            b_down: tape.leaf(&self.b_down),
            w_up: tape.leaf(&self.w_up),
            b_up: tape.leaf(&self.b_up),
            activation: self.activation,
            skip_connect: self.skip_connect,
        }
    }
}

/// The bare bottleneck branch f(x·W_down + b)·W_up + b.
pub fn adapter_branch(tape: &mut Tape, x: Var, adapter: &AdapterVars) -> Result<Var> {
    let z = tape.matmul(x, adapter.w_down)?;
    let z = tape.add_bias(z, adapter.b_down)?;
    let h = adapter.activation.apply(tape, z);
    let up = tape.matmul(h, adapter.w_up)?;
    tape.add_bias(up, adapter.b_up)
}

/// Sequential insertion: h + f(h·W_down)·W_up when the skip connection is
/// on, the bare branch otherwise.
pub fn adapter_apply_sequential(tape: &mut Tape, h: Var, adapter: &AdapterVars) -> Result<Var> {
    let branch = adapter_branch(tape, h, adapter)?;
    if adapter.skip_connect {
        tape.add(h, branch)
    } else {
        Ok(branch)
    }
}

/// Parallel insertion: the adapter reads the sublayer input `x` and the
/// residual is contributed here, so the caller must not add `x` again:
/// sublayer_out + f(x·W_down)·W_up + x.
pub fn adapter_apply_parallel(
    tape: &mut Tape,
    x: Var,
    sublayer_out: Var,
    adapter: &AdapterVars,
) -> Result<Var> {
    let branch = adapter_branch(tape, x, adapter)?;
    let with_branch = tape.add(sublayer_out, branch)?;
    tape.add(with_branch, x)
}

/// On-tape handles for one LoRA module.
#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

impl LoraModule {
    pub fn bind(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            a: tape.leaf(&self.a),
            b: tape.leaf(&self.b),
            scale: self.scale,
        }
    }
}

/// Low-rank residual for a wrapped projection: x·W_0 (+ bias) + s·(x·Aᵀ)·Bᵀ.
pub fn lora_apply(
    tape: &mut Tape,
    x: Var,
    w0: Var,
    bias: Option<Var>,
    lora: &LoraVars,
) -> Result<Var> {
    let mut base = tape.matmul(x, w0)?;
    if let Some(b) = bias {
        base = tape.add_bias(base, b)?;
    }
    let a_t = tape.transpose(lora.a)?;
    let down = tape.matmul(x, a_t)?;
    let b_t = tape.transpose(lora.b)?;
    let up = tape.matmul(down, b_t)?;
    let scaled = tape.mul_scalar(up, lora.scale);
    tape.add(base, scaled)
}

// ── design-element descriptor ───────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionForm {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModifiedLocation {
    AttnSublayer,
    FfnSublayer,
    AttnQuery,
    AttnValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalForm {
    /// f(h·W_down)·W_up
    AdapterSequential,
    /// f(x·W_down)·W_up + x
    AdapterParallel,
    /// x·W_down·W_up
    LowRank,
}

impl FunctionalForm {
    pub fn formula(self) -> &'static str {
        match self {
            FunctionalForm::AdapterSequential => "f(h·W_down)·W_up",
            FunctionalForm::AdapterParallel => "f(x·W_down)·W_up + x",
            FunctionalForm::LowRank => "x·W_down·W_up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalFunction {
    /// h ← h + Δh
    PlainResidual,
    /// h ← h + s·Δh
    ScaledResidual,
}

/// The four dimensions along which every injection element is classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignElement {
    pub functional_form: FunctionalForm,
    pub insertion_form: InsertionForm,
    pub modified_location: ModifiedLocation,
    pub final_function: FinalFunction,
}

/// Descriptor of an adapter at a sublayer location.
pub fn describe_adapter(insertion: InsertionForm, location: ModifiedLocation) -> DesignElement {
    DesignElement {
        functional_form: match insertion {
            InsertionForm::Sequential => FunctionalForm::AdapterSequential,
            InsertionForm::Parallel => FunctionalForm::AdapterParallel,
        },
        insertion_form: insertion,
        modified_location: location,
        final_function: FinalFunction::PlainResidual,
    }
}

/// Descriptor of a LoRA module on a projection.
pub fn describe_lora(target: LoraTarget) -> DesignElement {
    DesignElement {
        functional_form: FunctionalForm::LowRank,
        insertion_form: InsertionForm::Parallel,
        modified_location: match target {
            LoraTarget::Query => ModifiedLocation::AttnQuery,
            LoraTarget::Value => ModifiedLocation::AttnValue,
        },
        final_function: FinalFunction::ScaledResidual,
    }
}
