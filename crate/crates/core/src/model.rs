//! End-to-end forward pass: prompts, both encoders and the decoder.

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, ImageEncoding, TextEncoding, TokenIds};
use crate::error::Result;
use crate::prompts::{StrategyKind, TrainableState};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub body_logits: Var,
    pub text: TextEncoding,
    pub image: ImageEncoding,
    pub cocoop_bias: Option<Var>,
}

/// Runs the prompted model on one (image, phrase) pair. For CoCoOp the image
/// is encoded first so its embedding can condition the textual prompts.
pub fn forward(
    tape: &Tape,
    backbone: &Backbone,
    state: &TrainableState,
    image: &Tensor,
    tokens: &TokenIds,
) -> Result<ForwardOutput> {
    let prompts = &state.prompts;
    let (image_enc, built) = if prompts.kind() == StrategyKind::Cocoop {
        let enc = backbone.encode_image(tape, image, None)?;
        let built = prompts.build(tape, Some(enc.z))?;
        (enc, built)
    } else {
        let built = prompts.build(tape, None)?;
        (backbone.encode_image(tape, image, built.vision.as_ref())?, built)
    };
    let text_enc = backbone.encode_text(tape, tokens, built.text.as_ref())?;
    let decoded = backbone.decode(tape, image_enc.patch_tokens, text_enc.z, state.upsampler.as_ref())?;
    Ok(ForwardOutput {
        logits: decoded.logits,
        body_logits: decoded.body,
        text: text_enc,
        image: image_enc,
        cocoop_bias: built.cocoop_bias,
    })
}

/// Forward pass of the untuned backbone, no prompts and no upsampler.
pub fn forward_plain(tape: &Tape, backbone: &Backbone, image: &Tensor, tokens: &TokenIds) -> Result<Var> {
    let image_enc = backbone.encode_image(tape, image, None)?;
    let text_enc = backbone.encode_text(tape, tokens, None)?;
    Ok(backbone.decode(tape, image_enc.patch_tokens, text_enc.z, None)?.logits)
}
