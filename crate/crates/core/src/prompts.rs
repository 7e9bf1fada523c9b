//! Context learners: prompt construction and initialization, per-layer
//! discard-and-reinject, CoCoOp image conditioning and the multimodal
//! coupling functions that map unified prompts to textual and visual ones.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{phrase_ids, Backbone, BackboneConfig, Upsampler};
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, LayerNorm, Linear, LoraLinear, TransformerBlock};
use crate::tensor::{Param, Parameterized, Tensor};

pub const PROMPT_INIT_STD: f64 = 0.02;
pub const INIT_PHRASE: &str = "a photo of a";
/// Rank of each factorized meta-net layer when CoCoOp runs with LoRA.
pub const COCOOP_LORA_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    DeepTextual,
    Coop,
    Cocoop,
    Vpt,
    Maple,
    SharedAttention,
    SharedSeparate,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::DeepTextual,
        StrategyKind::Coop,
        StrategyKind::Cocoop,
        StrategyKind::Vpt,
        StrategyKind::Maple,
        StrategyKind::SharedAttention,
        StrategyKind::SharedSeparate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::DeepTextual => "deep-textual",
            StrategyKind::Coop => "coop",
            StrategyKind::Cocoop => "cocoop",
            StrategyKind::Vpt => "vpt",
            StrategyKind::Maple => "maple",
            StrategyKind::SharedAttention => "shared-attention",
            StrategyKind::SharedSeparate => "shared-separate",
        }
    }

    pub fn touches_text(self) -> bool {
        !matches!(self, StrategyKind::Vpt)
    }

    pub fn touches_vision(self) -> bool {
        matches!(
            self,
            StrategyKind::Vpt | StrategyKind::Maple | StrategyKind::SharedAttention | StrategyKind::SharedSeparate
        )
    }

    pub fn is_multimodal(self) -> bool {
        self.touches_text() && self.touches_vision()
    }

    /// Whether the first-depth prompts live in the text token space.
    pub fn supports_text_init(self) -> bool {
        matches!(
            self,
            StrategyKind::DeepTextual | StrategyKind::Coop | StrategyKind::Cocoop | StrategyKind::Maple
        )
    }

    pub fn supports_lora(self) -> bool {
        matches!(self, StrategyKind::Cocoop | StrategyKind::Maple)
    }

    pub fn max_depth(self, cfg: &BackboneConfig) -> usize {
        match (self.touches_text(), self.touches_vision()) {
            (true, true) => cfg.max_prompt_depth(),
            (true, false) => cfg.text_layers,
            _ => cfg.vision_layers,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    Gaussian,
    PhotoOfA,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplerConfig {
    /// Width `H_u` of the unified prompts. MaPLe fixes it to the text width.
    pub shared_dim: Option<usize>,
    pub use_lora: bool,
    pub intermediate_dim: usize,
    pub attn_heads: usize,
    pub attn_dropout: f64,
    pub attn_ff_dim: usize,
    pub layernorm_first: bool,
}

impl Default for CouplerConfig {
    fn default() -> Self {
        Self {
            shared_dim: None,
            use_lora: false,
            intermediate_dim: 32,
            attn_heads: 4,
            attn_dropout: 0.1,
            attn_ff_dim: 80,
            layernorm_first: true,
        }
    }
}

pub const DEFAULT_SHARED_DIM: usize = 32;

/// Everything that defines a context learner before initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub kind: StrategyKind,
    pub length: usize,
    pub depth: usize,
    pub init: InitMode,
    pub coupler: CouplerConfig,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Coop,
            length: 4,
            depth: 1,
            init: InitMode::Gaussian,
            coupler: CouplerConfig::default(),
        }
    }
}

impl PromptConfig {
    pub fn new(kind: StrategyKind, length: usize, depth: usize) -> Self {
        Self {
            kind,
            length,
            depth,
            ..Default::default()
        }
    }

    pub fn unified_width(&self, bb: &BackboneConfig) -> Result<usize> {
        match self.kind {
            StrategyKind::Maple => match self.coupler.shared_dim {
                Some(d) if d != bb.text_width => Err(Error::config(format!(
                    "maple unified prompts live in text space: shared_dim {d} != text width {}",
                    bb.text_width
                ))),
                _ => Ok(bb.text_width),
            },
            _ => Ok(self.coupler.shared_dim.unwrap_or(DEFAULT_SHARED_DIM)),
        }
    }

    pub fn validate(&self, bb: &BackboneConfig) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("prompt length must be >= 1"));
        }
        let max = self.kind.max_depth(bb);
        if self.depth == 0 || self.depth > max {
            return Err(Error::config(format!(
                "prompt depth {} outside [1, {max}] for {}",
                self.depth, self.kind
            )));
        }
        if self.init == InitMode::PhotoOfA && !self.kind.supports_text_init() {
            return Err(Error::config(format!(
                "`{INIT_PHRASE}` initialization needs text-space prompts; {} has none",
                self.kind
            )));
        }
        if self.coupler.use_lora && !self.kind.supports_lora() {
            return Err(Error::config(format!("use_lora does not apply to {}", self.kind)));
        }
        if self.coupler.intermediate_dim == 0 {
            return Err(Error::config("intermediate_dim must be >= 1"));
        }
        if self.kind.is_multimodal() {
            let hu = self.unified_width(bb)?;
            if hu == 0 {
                return Err(Error::config("shared_dim must be >= 1"));
            }
            if self.kind == StrategyKind::SharedAttention {
                let heads = self.coupler.attn_heads;
                if heads == 0 || hu % heads != 0 {
                    return Err(Error::config(format!("attn_heads {heads} does not divide shared width {hu}")));
                }
                if !(0.0..1.0).contains(&self.coupler.attn_dropout) {
                    return Err(Error::config("attn_dropout outside [0, 1)"));
                }
                if self.coupler.attn_ff_dim == 0 {
                    return Err(Error::config("attn_ff_dim must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// A linear map that is either dense or LoRA-factorized.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Dense(Linear),
    LowRank(LoraLinear),
}

impl Projection {
    fn new(name: &str, d_in: usize, d_out: usize, lora_rank: Option<usize>, rng: &mut ChaCha8Rng) -> Self {
        match lora_rank {
            Some(r) => Projection::LowRank(LoraLinear::new(name, d_in, d_out, r, rng)),
            None => Projection::Dense(Linear::new(name, d_in, d_out, true, rng)),
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Projection::Dense(l) => l.forward(tape, x),
            Projection::LowRank(l) => l.forward(tape, x),
        }
    }

    /// The `[in, out]` weight matrix this projection applies.
    pub fn matrix(&self) -> Tensor {
        match self {
            Projection::Dense(l) => l.weight.tensor.clone(),
            Projection::LowRank(l) => l.composed(),
        }
    }
}

impl Parameterized for Projection {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            Projection::Dense(l) => l.visit(f),
            Projection::LowRank(l) => l.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Projection::Dense(l) => l.visit_mut(f),
            Projection::LowRank(l) => l.visit_mut(f),
        }
    }
}

/// One side of a separable coupler.
#[derive(Clone, Debug, PartialEq)]
pub enum Branch {
    Identity,
    Linear(Projection),
    LinearNorm(Linear, LayerNorm),
}

impl Branch {
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Branch::Identity => Ok(x),
            Branch::Linear(p) => p.forward(tape, x),
            Branch::LinearNorm(l, n) => n.forward(tape, l.forward(tape, x)?),
        }
    }
}

impl Parameterized for Branch {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            Branch::Identity => {}
            Branch::Linear(p) => p.visit(f),
            Branch::LinearNorm(l, n) => {
                l.visit(f);
                n.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Branch::Identity => {}
            Branch::Linear(p) => p.visit_mut(f),
            Branch::LinearNorm(l, n) => {
                l.visit_mut(f);
                n.visit_mut(f);
            }
        }
    }
}

/// Per-layer coupling function from unified prompts `[B, H_u]` to a textual
/// `[B, H_l]` and a visual `[B, H_v]` prompt.
#[derive(Clone, Debug, PartialEq)]
pub enum Coupler {
    /// `P = U^l(P̂)`, `P̃ = U^v(P̂)` computed independently.
    Separable { text: Branch, vision: Branch },
    /// A transformer block over the unified prompts, then one linear head per modality.
    Attention {
        block: TransformerBlock,
        text_head: Linear,
        vision_head: Linear,
    },
}

impl Coupler {
    pub fn couple(&self, tape: &Tape, unified: Var) -> Result<(Var, Var)> {
        match self {
            Coupler::Separable { text, vision } => Ok((text.forward(tape, unified)?, vision.forward(tape, unified)?)),
            Coupler::Attention {
                block,
                text_head,
                vision_head,
            } => {
                let h = block.forward(tape, unified)?;
                Ok((text_head.forward(tape, h)?, vision_head.forward(tape, h)?))
            }
        }
    }
}

impl Parameterized for Coupler {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            Coupler::Separable { text, vision } => {
                text.visit(f);
                vision.visit(f);
            }
            Coupler::Attention {
                block,
                text_head,
                vision_head,
            } => {
                block.visit(f);
                text_head.visit(f);
                vision_head.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Coupler::Separable { text, vision } => {
                text.visit_mut(f);
                vision.visit_mut(f);
            }
            Coupler::Attention {
                block,
                text_head,
                vision_head,
            } => {
                block.visit_mut(f);
                text_head.visit_mut(f);
                vision_head.visit_mut(f);
            }
        }
    }
}

/// CoCoOp's image-conditioning network `H_vl → intermediate → H_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet {
    pub hidden: Projection,
    pub output: Projection,
}

impl MetaNet {
    /// The bias `π` added to every textual prompt vector.
    pub fn forward(&self, tape: &Tape, z_image: Var) -> Result<Var> {
        let d = tape.shape(z_image).iter().product::<usize>();
        let x = tape.reshape(z_image, &[1, d])?;
        let h = tape.relu(self.hidden.forward(tape, x)?);
        let pi = self.output.forward(tape, h)?;
        let w = tape.shape(pi)[1];
        tape.reshape(pi, &[w])
    }
}

impl Parameterized for MetaNet {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.hidden.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// All learnable context of one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub config: PromptConfig,
    pub textual: Vec<Param>,
    pub visual: Vec<Param>,
    pub unified: Vec<Param>,
    pub couplers: Vec<Coupler>,
    pub meta_net: Option<MetaNet>,
}

impl PromptState {
    pub fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    pub fn length(&self) -> usize {
        self.config.length
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }
}

impl Parameterized for PromptState {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.textual.visit(f);
        self.visual.visit(f);
        self.unified.visit(f);
        self.couplers.visit(f);
        self.meta_net.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.textual.visit_mut(f);
        self.visual.visit_mut(f);
        self.unified.visit_mut(f);
        self.couplers.visit_mut(f);
        self.meta_net.visit_mut(f);
    }
}

fn gaussian_prompts(prefix: &str, depth: usize, rows: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<Param> {
    (0..depth)
        .map(|i| {
            Param::new(
                format!("{prefix}.{i}"),
                Tensor::randn(&[rows, width], PROMPT_INIT_STD, rng),
            )
        })
        .collect()
}

/// Overwrites the leading rows of `p` with frozen token embeddings of the
/// initialization phrase. Rows beyond the phrase length keep their Gaussian draw.
fn apply_phrase_init(p: &mut Param, backbone: &Backbone) -> Result<()> {
    let ids = phrase_ids(INIT_PHRASE)?;
    let table = &backbone.text.token_embedding.tensor;
    let h = table.shape()[1];
    let rows = p.tensor.shape()[0].min(ids.len());
    for (r, &id) in ids.iter().take(rows).enumerate() {
        let src = &table.data()[id * h..(id + 1) * h];
        p.tensor.data_mut()[r * h..(r + 1) * h].copy_from_slice(src);
    }
    Ok(())
}

/// Builds and initializes the learnable state for `cfg`.
pub fn init_prompts(cfg: &PromptConfig, backbone: &Backbone, seed: u64) -> Result<PromptState> {
    let bb = &backbone.config;
    cfg.validate(bb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, j) = (cfg.length, cfg.depth);
    let (hl, hv) = (bb.text_width, bb.vision_width);
    let mut state = PromptState {
        config: cfg.clone(),
        textual: Vec::new(),
        visual: Vec::new(),
        unified: Vec::new(),
        couplers: Vec::new(),
        meta_net: None,
    };
    match cfg.kind {
        StrategyKind::DeepTextual | StrategyKind::Coop => {
            state.textual = gaussian_prompts("prompts.text", j, b, hl, &mut rng);
        }
        StrategyKind::Cocoop => {
            state.textual = gaussian_prompts("prompts.text", j, b, hl, &mut rng);
            let r = cfg.coupler.intermediate_dim;
            let lora = cfg.coupler.use_lora.then_some(COCOOP_LORA_RANK);
            state.meta_net = Some(MetaNet {
                hidden: Projection::new("prompts.meta_net.hidden", bb.joint_width, r, lora, &mut rng),
                output: Projection::new("prompts.meta_net.output", r, hl, lora, &mut rng),
            });
        }
        StrategyKind::Vpt => {
            state.visual = gaussian_prompts("prompts.vision", j, b, hv, &mut rng);
        }
        StrategyKind::Maple => {
            state.unified = gaussian_prompts("prompts.unified", j, b, hl, &mut rng);
            let lora = cfg.coupler.use_lora.then_some(cfg.coupler.intermediate_dim);
            state.couplers = (0..j)
                .map(|i| Coupler::Separable {
                    text: Branch::Identity,
                    vision: Branch::Linear(Projection::new(
                        &format!("prompts.coupler.{i}.vision"),
                        hl,
                        hv,
                        lora,
                        &mut rng,
                    )),
                })
                .collect();
        }
        StrategyKind::SharedSeparate => {
            let hu = cfg.unified_width(bb)?;
            state.unified = gaussian_prompts("prompts.unified", j, b, hu, &mut rng);
            state.couplers = (0..j)
                .map(|i| {
                    let name = format!("prompts.coupler.{i}");
                    Coupler::Separable {
                        text: Branch::LinearNorm(
                            Linear::new(&format!("{name}.text"), hu, hl, true, &mut rng),
                            LayerNorm::new(&format!("{name}.text_norm"), hl),
                        ),
                        vision: Branch::LinearNorm(
                            Linear::new(&format!("{name}.vision"), hu, hv, true, &mut rng),
                            LayerNorm::new(&format!("{name}.vision_norm"), hv),
                        ),
                    }
                })
                .collect();
        }
        StrategyKind::SharedAttention => {
            let hu = cfg.unified_width(bb)?;
            state.unified = gaussian_prompts("prompts.unified", j, b, hu, &mut rng);
            let block = BlockConfig {
                width: hu,
                heads: cfg.coupler.attn_heads,
                ff_dim: cfg.coupler.attn_ff_dim,
                dropout: cfg.coupler.attn_dropout,
                layernorm_first: cfg.coupler.layernorm_first,
            };
            state.couplers = (0..j)
                .map(|i| {
                    let name = format!("prompts.coupler.{i}");
                    Ok(Coupler::Attention {
                        block: TransformerBlock::new(&format!("{name}.block"), block, &mut rng)?,
                        text_head: Linear::new(&format!("{name}.text"), hu, hl, true, &mut rng),
                        vision_head: Linear::new(&format!("{name}.vision"), hu, hv, true, &mut rng),
                    })
                })
                .collect::<Result<_>>()?;
        }
    }
    if cfg.init == InitMode::PhotoOfA {
        let first = match cfg.kind {
            StrategyKind::Maple => state.unified.first_mut(),
            _ => state.textual.first_mut(),
        };
        apply_phrase_init(first.expect("depth >= 1"), backbone)?;
    }
    state.set_requires_grad(true);
    Ok(state)
}

/// Prompt vectors for the first `J` layers of one encoder, already on a tape.
#[derive(Clone, Debug, Default)]
pub struct PromptPlan {
    pub per_layer: Vec<Var>,
    pub count: usize,
}

impl PromptPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }

    pub(crate) fn check(&self, layers: usize) -> Result<()> {
        if self.count == 0 {
            return Ok(());
        }
        if self.per_layer.is_empty() || self.per_layer.len() > layers {
            return Err(Error::config(format!(
                "prompt depth {} outside [1, {layers}]",
                self.per_layer.len()
            )));
        }
        Ok(())
    }
}

/// Where the prompt rows of a layer's input came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotSource {
    /// No prompts.
    Absent,
    /// Fresh parameters for this depth; the previous layer's prompt outputs are discarded.
    Fresh(usize),
    /// The previous layer's prompt outputs, treated like any other token.
    Carried,
}

fn checked_prompt(tape: &Tape, p: Var, count: usize, width: usize) -> Result<Var> {
    let s = tape.shape(p);
    if s != [count, width] {
        return Err(Error::shape("prompt", &s, &[count, width]));
    }
    Ok(p)
}

/// Assembles the input of text layer `layer_index` as `[P, W]`.
pub fn inject_textual(
    tape: &Tape,
    layer_index: usize,
    words: Var,
    carried: Option<Var>,
    plan: Option<&PromptPlan>,
) -> Result<(Var, SlotSource)> {
    let Some(plan) = plan.filter(|p| p.count > 0) else {
        return Ok((words, SlotSource::Absent));
    };
    let width = tape.shape(words)[1];
    let (prompt, source) = match plan.per_layer.get(layer_index) {
        Some(&p) => (checked_prompt(tape, p, plan.count, width)?, SlotSource::Fresh(layer_index)),
        None => (
            carried.ok_or_else(|| Error::contract("no prompt outputs to carry into a layer past the depth"))?,
            SlotSource::Carried,
        ),
    };
    Ok((tape.concat_rows(&[prompt, words])?, source))
}

/// Assembles the input of vision layer `layer_index` as `[c, E, P̃]`.
pub fn inject_visual(
    tape: &Tape,
    layer_index: usize,
    cls_and_patches: Var,
    carried: Option<Var>,
    plan: Option<&PromptPlan>,
) -> Result<(Var, SlotSource)> {
    let Some(plan) = plan.filter(|p| p.count > 0) else {
        return Ok((cls_and_patches, SlotSource::Absent));
    };
    let width = tape.shape(cls_and_patches)[1];
    let (prompt, source) = match plan.per_layer.get(layer_index) {
        Some(&p) => (checked_prompt(tape, p, plan.count, width)?, SlotSource::Fresh(layer_index)),
        None => (
            carried.ok_or_else(|| Error::contract("no prompt outputs to carry into a layer past the depth"))?,
            SlotSource::Carried,
        ),
    };
    Ok((tape.concat_rows(&[cls_and_patches, prompt])?, source))
}

/// Adds the meta-net bias `π(z_v)` to every textual prompt.
pub fn cocoop_condition(tape: &Tape, state: &PromptState, z_image: Var) -> Result<(Vec<Var>, Var)> {
    let meta = match (state.kind(), &state.meta_net) {
        (StrategyKind::Cocoop, Some(m)) => m,
        (kind, _) => return Err(Error::contract(format!("cocoop conditioning requested for {kind}"))),
    };
    let pi = meta.forward(tape, z_image)?;
    let prompts = state
        .textual
        .iter()
        .map(|p| tape.add_row(tape.param(p), pi))
        .collect::<Result<_>>()?;
    Ok((prompts, pi))
}

/// Textual and visual prompt plans for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BuiltPrompts {
    pub text: Option<PromptPlan>,
    pub vision: Option<PromptPlan>,
    pub cocoop_bias: Option<Var>,
}

impl PromptState {
    /// Records the prompt tensors (and couplers) on `tape`. CoCoOp needs the
    /// image embedding `z_v`.
    pub fn build(&self, tape: &Tape, z_image: Option<Var>) -> Result<BuiltPrompts> {
        let count = self.length();
        let plan = |per_layer: Vec<Var>| Some(PromptPlan { per_layer, count });
        let params = |ps: &[Param]| ps.iter().map(|p| tape.param(p)).collect::<Vec<_>>();
        Ok(match self.kind() {
            StrategyKind::DeepTextual | StrategyKind::Coop => BuiltPrompts {
                text: plan(params(&self.textual)),
                ..Default::default()
            },
            StrategyKind::Cocoop => {
                let z = z_image.ok_or_else(|| Error::contract("cocoop needs the image embedding"))?;
                let (prompts, pi) = cocoop_condition(tape, self, z)?;
                BuiltPrompts {
                    text: plan(prompts),
                    vision: None,
                    cocoop_bias: Some(pi),
                }
            }
            StrategyKind::Vpt => BuiltPrompts {
                vision: plan(params(&self.visual)),
                ..Default::default()
            },
            StrategyKind::Maple | StrategyKind::SharedAttention | StrategyKind::SharedSeparate => {
                let mut text = Vec::with_capacity(self.depth());
                let mut vision = Vec::with_capacity(self.depth());
                for (u, coupler) in self.unified.iter().zip(&self.couplers) {
                    let (t, v) = coupler.couple(tape, tape.param(u))?;
                    text.push(t);
                    vision.push(v);
                }
                BuiltPrompts {
                    text: plan(text),
                    vision: plan(vision),
                    cocoop_bias: None,
                }
            }
        })
    }
}

/// Everything that trains: the context learner plus the optional residual upsampler.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableState {
    pub prompts: PromptState,
    pub upsampler: Option<Upsampler>,
}

impl TrainableState {
    pub fn new(cfg: &PromptConfig, backbone: &Backbone, use_upsampler: bool, seed: u64) -> Result<Self> {
        let prompts = init_prompts(cfg, backbone, seed)?;
        let upsampler = use_upsampler.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a9d);
            Upsampler::new(&backbone.config, &mut rng)
        });
        Ok(Self { prompts, upsampler })
    }
}

impl Parameterized for TrainableState {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.prompts.visit(f);
        self.upsampler.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.prompts.visit_mut(f);
        self.upsampler.visit_mut(f);
    }
}

/// The named tensors that train for a given state: prompts, couplers,
/// meta-net and, when enabled, the upsampler. Nothing from the backbone.
pub fn trainable_parameters(state: &TrainableState) -> Vec<&Param> {
    state.params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::UPSAMPLER_KERNEL;

    fn backbone() -> Backbone {
        Backbone::new(
            BackboneConfig {
                image_size: 16,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn names(state: &TrainableState) -> Vec<(String, Vec<usize>)> {
        trainable_parameters(state)
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect()
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("prefix".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let bb = backbone();
        for k in StrategyKind::ALL {
            let cfg = PromptConfig::new(k, 4, 2);
            assert_eq!(init_prompts(&cfg, &bb, 9).unwrap(), init_prompts(&cfg, &bb, 9).unwrap());
            assert_ne!(init_prompts(&cfg, &bb, 9).unwrap(), init_prompts(&cfg, &bb, 10).unwrap());
        }
    }

    #[test]
    fn gaussian_init_has_requested_std() {
        let bb = backbone();
        let cfg = PromptConfig::new(StrategyKind::Coop, 313, 1);
        let s = init_prompts(&cfg, &bb, 1).unwrap();
        let d = s.textual[0].tensor.data();
        assert!(d.len() >= 10_000);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((0.018..=0.022).contains(&std), "{std}");
    }

    #[test]
    fn photo_of_a_copies_token_embeddings() {
        let bb = backbone();
        let ids = phrase_ids(INIT_PHRASE).unwrap();
        let table = &bb.text.token_embedding.tensor;
        let h = bb.config.text_width;
        for kind in [StrategyKind::Coop, StrategyKind::Maple, StrategyKind::Cocoop] {
            for b in [4, 16] {
                let mut cfg = PromptConfig::new(kind, b, 1);
                cfg.init = InitMode::PhotoOfA;
                let s = init_prompts(&cfg, &bb, 2).unwrap();
                let p = if kind == StrategyKind::Maple { &s.unified[0] } else { &s.textual[0] };
                let rows = b.min(ids.len());
                for r in 0..rows {
                    let want = &table.data()[ids[r] * h..(ids[r] + 1) * h];
                    assert_eq!(&p.tensor.data()[r * h..(r + 1) * h], want);
                }
                if b > rows {
                    let g = PromptConfig::new(kind, b, 1);
                    let gauss = init_prompts(&g, &bb, 2).unwrap();
                    let q = if kind == StrategyKind::Maple { &gauss.unified[0] } else { &gauss.textual[0] };
                    assert_eq!(&p.tensor.data()[rows * h..], &q.tensor.data()[rows * h..]);
                }
            }
        }
    }

    #[test]
    fn text_init_rejected_without_text_prompts() {
        let bb = backbone();
        for kind in [StrategyKind::Vpt, StrategyKind::SharedAttention, StrategyKind::SharedSeparate] {
            let mut cfg = PromptConfig::new(kind, 4, 1);
            cfg.init = InitMode::PhotoOfA;
            assert!(matches!(init_prompts(&cfg, &bb, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_validation() {
        let bb = backbone();
        let bad = [
            PromptConfig::new(StrategyKind::Coop, 0, 1),
            PromptConfig::new(StrategyKind::Vpt, 4, 0),
            PromptConfig::new(StrategyKind::Vpt, 4, 5),
        ];
        for cfg in bad {
            assert!(init_prompts(&cfg, &bb, 0).is_err(), "{cfg:?}");
        }
        let mut lora_vpt = PromptConfig::new(StrategyKind::Vpt, 4, 1);
        lora_vpt.coupler.use_lora = true;
        assert!(init_prompts(&lora_vpt, &bb, 0).is_err());
        let mut maple = PromptConfig::new(StrategyKind::Maple, 4, 1);
        maple.coupler.shared_dim = Some(64);
        assert!(init_prompts(&maple, &bb, 0).is_err());
        let mut attn = PromptConfig::new(StrategyKind::SharedAttention, 4, 1);
        attn.coupler.attn_heads = 3;
        assert!(init_prompts(&attn, &bb, 0).is_err());
    }

    #[test]
    fn trainable_parameter_enumeration() {
        let bb = backbone();
        let (hl, hv, f) = (32, 32, bb.config.decoder_features);
        let upsampler = f * UPSAMPLER_KERNEL * UPSAMPLER_KERNEL + 2;

        let coop = TrainableState::new(&PromptConfig::new(StrategyKind::Coop, 4, 1), &bb, false, 0).unwrap();
        assert_eq!(names(&coop), vec![("prompts.text.0".to_string(), vec![4, hl])]);

        let vpt = TrainableState::new(&PromptConfig::new(StrategyKind::Vpt, 4, 3), &bb, false, 0).unwrap();
        let n = names(&vpt);
        assert_eq!(n.len(), 3);
        assert!(n.iter().all(|(name, shape)| name.starts_with("prompts.vision.") && shape == &[4, hv]));

        let maple = TrainableState::new(&PromptConfig::new(StrategyKind::Maple, 4, 2), &bb, true, 0).unwrap();
        assert_eq!(maple.num_scalars(), 2 * 4 * hl + 2 * (hl * hv + hv) + upsampler);

        for k in StrategyKind::ALL {
            let s = TrainableState::new(&PromptConfig::new(k, 4, 2), &bb, true, 0).unwrap();
            let params = trainable_parameters(&s);
            assert!(params.iter().all(|p| p.tensor.requires_grad()));
            let mut seen: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), params.len(), "{k}: duplicate names");
            assert!(bb.params().iter().all(|p| !p.tensor.requires_grad()));
        }
    }

    /// Rank by Gaussian elimination with partial pivoting.
    fn numerical_rank(t: &Tensor) -> usize {
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut a: Vec<Vec<f64>> = t.data().chunks(cols).map(<[f64]>::to_vec).collect();
        let scale = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-10 * scale.max(1e-300) * rows.max(cols) as f64;
        let mut rank = 0;
        for c in 0..cols {
            let Some(piv) = (rank..rows).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())) else {
                break;
            };
            if a[piv][c].abs() <= tol {
                continue;
            }
            a.swap(rank, piv);
            for r in rank + 1..rows {
                let f = a[r][c] / a[rank][c];
                for k in c..cols {
                    a[r][k] -= f * a[rank][k];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn lora_projections_have_requested_rank() {
        let bb = backbone();
        let mut cfg = PromptConfig::new(StrategyKind::Maple, 4, 2);
        cfg.coupler.use_lora = true;
        cfg.coupler.intermediate_dim = 8;
        let s = init_prompts(&cfg, &bb, 4).unwrap();
        for c in &s.couplers {
            let Coupler::Separable {
                text: Branch::Identity,
                vision: Branch::Linear(p @ Projection::LowRank(_)),
            } = c
            else {
                panic!("unexpected maple coupler {c:?}");
            };
            assert_eq!(numerical_rank(&p.matrix()), 8);
        }
        let dense = init_prompts(&PromptConfig::new(StrategyKind::Maple, 4, 1), &bb, 4).unwrap();
        let Coupler::Separable {
            vision: Branch::Linear(p),
            ..
        } = &dense.couplers[0]
        else {
            panic!()
        };
        assert_eq!(numerical_rank(&p.matrix()), 32);

        let mut co = PromptConfig::new(StrategyKind::Cocoop, 4, 1);
        co.coupler.use_lora = true;
        let s = init_prompts(&co, &bb, 4).unwrap();
        let m = s.meta_net.as_ref().unwrap();
        assert_eq!(numerical_rank(&m.hidden.matrix()), COCOOP_LORA_RANK);
        assert_eq!(numerical_rank(&m.output.matrix()), COCOOP_LORA_RANK);
    }

    #[test]
    fn maple_text_prompt_is_the_unified_prompt() {
        let bb = backbone();
        let s = init_prompts(&PromptConfig::new(StrategyKind::Maple, 4, 3), &bb, 1).unwrap();
        let tape = Tape::new();
        let built = s.build(&tape, None).unwrap();
        let text = built.text.unwrap();
        for (i, v) in text.per_layer.iter().enumerate() {
            assert_eq!(&*tape.value(*v), s.unified[i].tensor.data());
        }
        assert_eq!(built.vision.unwrap().per_layer.len(), 3);
    }

    #[test]
    fn cocoop_bias_has_text_width() {
        let bb = backbone();
        let s = init_prompts(&PromptConfig::new(StrategyKind::Cocoop, 4, 2), &bb, 1).unwrap();
        let tape = Tape::new();
        let z = tape.constant(&[bb.config.joint_width], vec![0.1; 32]).unwrap();
        let (prompts, pi) = cocoop_condition(&tape, &s, z).unwrap();
        assert_eq!(tape.shape(pi), vec![bb.config.text_width]);
        assert_eq!(prompts.len(), 2);
        let pi = tape.value(pi).to_vec();
        for (p, param) in prompts.iter().zip(&s.textual) {
            for (r, row) in tape.value(*p).chunks(32).enumerate() {
                for c in 0..32 {
                    assert_eq!(row[c], param.tensor.data()[r * 32 + c] + pi[c]);
                }
            }
        }
        let coop = init_prompts(&PromptConfig::new(StrategyKind::Coop, 4, 1), &bb, 1).unwrap();
        assert!(cocoop_condition(&tape, &coop, z).is_err());
    }

    #[test]
    fn injection_orders_and_sources() {
        let tape = Tape::new();
        let words = tape.constant(&[3, 2], vec![1.0; 6]).unwrap();
        let fresh = tape.constant(&[2, 2], vec![5.0; 4]).unwrap();
        let carried = tape.constant(&[2, 2], vec![7.0; 4]).unwrap();
        let plan = PromptPlan {
            per_layer: vec![fresh],
            count: 2,
        };
        let (x, src) = inject_textual(&tape, 0, words, None, Some(&plan)).unwrap();
        assert_eq!(src, SlotSource::Fresh(0));
        assert_eq!(&tape.value(x)[..4], &[5.0; 4]);
        let (x, src) = inject_textual(&tape, 1, words, Some(carried), Some(&plan)).unwrap();
        assert_eq!(src, SlotSource::Carried);
        assert_eq!(&tape.value(x)[..4], &[7.0; 4]);
        let (x, src) = inject_visual(&tape, 0, words, None, Some(&plan)).unwrap();
        assert_eq!(src, SlotSource::Fresh(0));
        assert_eq!(&tape.value(x)[6..], &[5.0; 4]);
        let (x, src) = inject_visual(&tape, 0, words, None, None).unwrap();
        assert_eq!((x, src), (words, SlotSource::Absent));
        assert!(inject_textual(&tape, 1, words, None, Some(&plan)).is_err());
    }
}
