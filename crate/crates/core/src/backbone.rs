//! Miniature dual encoder plus segmentation decoder.
//!
//! The text tower embeds byte tokens, runs `K_l` pre-norm transformer blocks
//! and projects the EOS output into the joint space. The image tower patchifies,
//! prepends a CLS token, runs `K_v` blocks and projects the final CLS output.
//! The decoder modulates the final patch tokens by the projected sentence
//! embedding, runs a few more blocks and unembeds every token into a tile of
//! per-pixel features, followed by a 1×1 head producing logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, Linear, TransformerBlock};
use crate::prompts::{inject_textual, inject_visual, PromptPlan, SlotSource};
use crate::tensor::{Param, Parameterized, Tensor};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UPSAMPLER_KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub text_width: usize,
    pub vision_width: usize,
    pub joint_width: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub max_tokens: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub text_heads: usize,
    pub vision_heads: usize,
    pub decoder_layers: usize,
    /// Channels of the per-pixel feature map the decoder unembeds into.
    pub decoder_features: usize,
    pub mlp_ratio: usize,
    pub use_upsampler: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            text_width: 32,
            vision_width: 32,
            joint_width: 32,
            text_layers: 4,
            vision_layers: 4,
            max_tokens: 16,
            patch_size: 8,
            image_size: 64,
            vocab_size: 256,
            text_heads: 4,
            vision_heads: 4,
            decoder_layers: 2,
            decoder_features: 4,
            mlp_ratio: 4,
            use_upsampler: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("text_width", self.text_width),
            ("vision_width", self.vision_width),
            ("joint_width", self.joint_width),
            ("text_layers", self.text_layers),
            ("vision_layers", self.vision_layers),
            ("max_tokens", self.max_tokens),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("decoder_features", self.decoder_features),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        for (heads, width, which) in [
            (self.text_heads, self.text_width, "text"),
            (self.vision_heads, self.vision_width, "vision"),
        ] {
            if heads == 0 || width % heads != 0 {
                return Err(Error::config(format!("{which} heads {heads} do not divide width {width}")));
            }
        }
        if self.vocab_size <= EOS_ID || self.vocab_size > 256 {
            return Err(Error::config("vocab_size must lie in (2, 256] for byte tokens"));
        }
        if self.max_tokens < 3 {
            return Err(Error::config("max_tokens must leave room for BOS, one byte and EOS"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn max_prompt_depth(&self) -> usize {
        self.text_layers.min(self.vision_layers)
    }

    fn block(&self, width: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            width,
            heads,
            ff_dim: width * self.mlp_ratio,
            dropout: 0.0,
            layernorm_first: true,
        }
    }
}

/// Byte-level token ids wrapped in BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<usize>,
}

impl TokenIds {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        let eos = ids.iter().filter(|&&i| i == EOS_ID).count();
        if eos != 1 {
            return Err(Error::Tokenize(format!("expected exactly one EOS marker, found {eos}")));
        }
        Ok(Self { ids })
    }

    pub fn eos_index(&self) -> usize {
        self.ids.iter().position(|&i| i == EOS_ID).expect("validated on construction")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps each byte of `phrase` to its own id; ids 0–2 are reserved for
/// PAD/BOS/EOS so those bytes are rejected.
pub fn tokenize(phrase: &str, max_tokens: usize) -> Result<TokenIds> {
    if phrase.is_empty() {
        return Err(Error::Tokenize("empty phrase".into()));
    }
    let mut ids = Vec::with_capacity(phrase.len() + 2);
    ids.push(BOS_ID);
    for b in phrase.bytes() {
        if (b as usize) <= EOS_ID {
            return Err(Error::Tokenize(format!("byte {b} collides with a reserved id")));
        }
        ids.push(b as usize);
    }
    ids.push(EOS_ID);
    if ids.len() > max_tokens {
        return Err(Error::Tokenize(format!(
            "phrase needs {} tokens but the context holds {max_tokens}",
            ids.len()
        )));
    }
    TokenIds::new(ids)
}

/// Bytes of `phrase` as ids, without BOS/EOS.
pub fn phrase_ids(phrase: &str) -> Result<Vec<usize>> {
    let t = tokenize(phrase, phrase.len() + 2)?;
    Ok(t.ids[1..t.ids.len() - 1].to_vec())
}

/// Per-layer record of how the input sequence was assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub input_len: usize,
    pub slots: SlotSource,
    /// The layer's output rows at prompt positions, when prompts are present.
    pub prompt_output: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub z: Var,
    pub final_hidden: Var,
    pub eos_index: usize,
    pub trace: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoding {
    pub z: Var,
    pub cls: Var,
    pub patch_tokens: Var,
    pub trace: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: Param,
    pub positional: Param,
    pub layers: Vec<TransformerBlock>,
    pub projection: Param,
}

impl TextEncoder {
    fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.text_width;
        let layers = (0..cfg.text_layers)
            .map(|i| TransformerBlock::new(&format!("text.layers.{i}"), cfg.block(h, cfg.text_heads), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embedding: Param::new("text.token_embedding", Tensor::randn(&[cfg.vocab_size, h], 0.02, rng)),
            positional: Param::new("text.positional", Tensor::randn(&[cfg.max_tokens, h], 0.01, rng)),
            layers,
            projection: Param::new(
                "text.projection",
                Tensor::randn(&[h, cfg.joint_width], 1.0 / (h as f64).sqrt(), rng),
            ),
        })
    }

    fn width(&self) -> usize {
        self.token_embedding.tensor.shape()[1]
    }

    /// `W_0`: token embeddings plus positional encodings.
    pub fn embed(&self, tape: &Tape, tokens: &TokenIds) -> Result<Var> {
        let h = self.width();
        let max = self.positional.tensor.shape()[0];
        let vocab = self.token_embedding.tensor.shape()[0];
        if tokens.len() > max {
            return Err(Error::Tokenize(format!("{} tokens exceed the context of {max}", tokens.len())));
        }
        if let Some(bad) = tokens.ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Tokenize(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let n = tokens.len();
        let index = tokens
            .ids
            .iter()
            .flat_map(|&t| (0..h).map(move |j| t * h + j))
            .collect();
        let table = tape.param(&self.token_embedding);
        let words = tape.gather(table, index, &[n, h])?;
        let pos = tape.slice_rows(tape.param(&self.positional), 0, n)?;
        tape.add(words, pos)
    }
}

impl Parameterized for TextEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.token_embedding);
        f(&self.positional);
        self.layers.visit(f);
        f(&self.projection);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.token_embedding);
        f(&mut self.positional);
        self.layers.visit_mut(f);
        f(&mut self.projection);
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_projection: Param,
    pub cls: Param,
    pub positional: Param,
    pub layers: Vec<TransformerBlock>,
    pub projection: Param,
}

impl ImageEncoder {
    fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.vision_width;
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let layers = (0..cfg.vision_layers)
            .map(|i| TransformerBlock::new(&format!("image.layers.{i}"), cfg.block(h, cfg.vision_heads), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_projection: Param::new(
                "image.patch_projection",
                Tensor::randn(&[patch_dim, h], 1.0 / (patch_dim as f64).sqrt(), rng),
            ),
            cls: Param::new("image.cls", Tensor::randn(&[1, h], 1.0 / (h as f64).sqrt(), rng)),
            positional: Param::new("image.positional", Tensor::randn(&[1 + cfg.num_patches(), h], 0.02, rng)),
            layers,
            projection: Param::new(
                "image.projection",
                Tensor::randn(&[h, cfg.joint_width], 1.0 / (h as f64).sqrt(), rng),
            ),
        })
    }

    /// `[c_0, E_0]`: CLS followed by projected patches, plus positions.
    pub fn embed(&self, tape: &Tape, image: &Tensor, cfg: &BackboneConfig) -> Result<Var> {
        let s = cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape("encode_image", image.shape(), &[3, s, s]));
        }
        let patches = patchify(image, cfg.patch_size);
        let n = cfg.num_patches();
        let pv = tape.constant(&[n, 3 * cfg.patch_size * cfg.patch_size], patches)?;
        let e = tape.matmul(pv, tape.param(&self.patch_projection))?;
        let seq = tape.concat_rows(&[tape.param(&self.cls), e])?;
        tape.add(seq, tape.param(&self.positional))
    }
}

impl Parameterized for ImageEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.patch_projection);
        f(&self.cls);
        f(&self.positional);
        self.layers.visit(f);
        f(&self.projection);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.patch_projection);
        f(&mut self.cls);
        f(&mut self.positional);
        self.layers.visit_mut(f);
        f(&mut self.projection);
    }
}

/// Row-major patches, each flattened as (channel, y, x).
pub fn patchify(image: &Tensor, patch: usize) -> Vec<f64> {
    let s = image.shape()[1];
    let side = s / patch;
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for pi in 0..side {
        for pj in 0..side {
            for c in 0..3 {
                for y in 0..patch {
                    let row = (c * s + pi * patch + y) * s + pj * patch;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub condition: Linear,
    pub layers: Vec<TransformerBlock>,
    pub unembed: Linear,
    pub head_weight: Param,
    pub head_bias: Param,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.vision_width;
        let f = cfg.decoder_features;
        let layers = (0..cfg.decoder_layers)
            .map(|i| TransformerBlock::new(&format!("decoder.layers.{i}"), cfg.block(h, cfg.vision_heads), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            condition: Linear::new("decoder.condition", cfg.joint_width, h, true, rng),
            layers,
            unembed: Linear::new("decoder.unembed", h, f * cfg.patch_size * cfg.patch_size, true, rng),
            head_weight: Param::new(
                "decoder.head.weight",
                Tensor::randn(&[1, f, 1, 1], 1.0 / (f as f64).sqrt(), rng),
            ),
            head_bias: Param::new("decoder.head.bias", Tensor::zeros(&[1])),
        })
    }
}

impl Parameterized for Decoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.condition.visit(f);
        self.layers.visit(f);
        self.unembed.visit(f);
        f(&self.head_weight);
        f(&self.head_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.condition.visit_mut(f);
        self.layers.visit_mut(f);
        self.unembed.visit_mut(f);
        f(&mut self.head_weight);
        f(&mut self.head_bias);
    }
}

/// Learnable residual branch: bilinear resampling of the decoder's feature
/// map, a 5×5 convolution, scaled by a learnable factor and added to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    pub factor: usize,
    pub conv_weight: Param,
    pub conv_bias: Param,
    pub residual_factor: Param,
}

impl Upsampler {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let f = cfg.decoder_features;
        let k = UPSAMPLER_KERNEL;
        let fan_in = (f * k * k) as f64;
        Self {
            factor: 1,
            conv_weight: Param::new(
                "upsampler.conv.weight",
                Tensor::randn(&[1, f, k, k], 1.0 / fan_in.sqrt(), rng).with_requires_grad(true),
            ),
            conv_bias: Param::new("upsampler.conv.bias", Tensor::zeros(&[1]).with_requires_grad(true)),
            residual_factor: Param::new(
                "upsampler.residual_factor",
                Tensor::scalar(0.1).with_requires_grad(true),
            ),
        }
    }

    pub fn forward(&self, tape: &Tape, features: Var) -> Result<Var> {
        let up = tape.bilinear_upsample(features, self.factor)?;
        let conv = tape.conv2d(
            up,
            tape.param(&self.conv_weight),
            Some(tape.param(&self.conv_bias)),
            UPSAMPLER_KERNEL / 2,
        )?;
        tape.mul_scalar(conv, tape.param(&self.residual_factor))
    }
}

impl Parameterized for Upsampler {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.conv_weight);
        f(&self.conv_bias);
        f(&self.residual_factor);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv_weight);
        f(&mut self.conv_bias);
        f(&mut self.residual_factor);
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub logits: Var,
    /// Logits of the decoder body alone, before any residual branch.
    pub body: Var,
    /// The `[F, S, S]` per-pixel feature map feeding the head and upsampler.
    pub features: Var,
}

/// The frozen dual encoder and decoder.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub decoder: Decoder,
}

impl Backbone {
    /// Random initialization; every parameter starts frozen.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::new(&config, &mut rng)?;
        let image = ImageEncoder::new(&config, &mut rng)?;
        let decoder = Decoder::new(&config, &mut rng)?;
        let mut backbone = Self {
            config,
            text,
            image,
            decoder,
        };
        backbone.set_requires_grad(false);
        Ok(backbone)
    }

    pub fn tokenize(&self, phrase: &str) -> Result<TokenIds> {
        tokenize(phrase, self.config.max_tokens)
    }

    /// Runs the text tower; with a prompt plan, prompts are prepended and
    /// re-injected per layer. Returns `z_l = P_lᵀ W_K[eos]`.
    pub fn encode_text(&self, tape: &Tape, tokens: &TokenIds, prompts: Option<&PromptPlan>) -> Result<TextEncoding> {
        let eos = tokens.eos_index();
        let mut words = self.text.embed(tape, tokens)?;
        let n = tokens.len();
        let b = prompts.map_or(0, |p| p.count);
        if let Some(p) = prompts {
            p.check(self.config.text_layers)?;
        }
        let mut carried = None;
        let mut trace = Vec::with_capacity(self.text.layers.len());
        let mut out = words;
        for (i, layer) in self.text.layers.iter().enumerate() {
            let (input, slots) = inject_textual(tape, i, words, carried, prompts)?;
            out = layer.forward(tape, input)?;
            let prompt_output = if b > 0 {
                let p = tape.slice_rows(out, 0, b)?;
                carried = Some(p);
                words = tape.slice_rows(out, b, b + n)?;
                Some(p)
            } else {
                words = out;
                None
            };
            trace.push(LayerTrace {
                input_len: tape.shape(input)[0],
                slots,
                prompt_output,
            });
        }
        let eos_index = b + eos;
        let sentence = tape.slice_rows(out, eos_index, eos_index + 1)?;
        let z = tape.matmul(sentence, tape.param(&self.text.projection))?;
        let z = tape.reshape(z, &[self.config.joint_width])?;
        Ok(TextEncoding {
            z,
            final_hidden: out,
            eos_index,
            trace,
        })
    }

    /// Runs the image tower; visual prompts are appended after `[c, E]`.
    /// Returns `z_v = P_vᵀ c_K` and the final patch tokens (CLS and prompt
    /// slots excluded).
    pub fn encode_image(&self, tape: &Tape, image: &Tensor, prompts: Option<&PromptPlan>) -> Result<ImageEncoding> {
        let n = self.config.num_patches();
        let b = prompts.map_or(0, |p| p.count);
        if let Some(p) = prompts {
            p.check(self.config.vision_layers)?;
        }
        let mut body = self.image.embed(tape, image, &self.config)?;
        let mut carried = None;
        let mut trace = Vec::with_capacity(self.image.layers.len());
        for (i, layer) in self.image.layers.iter().enumerate() {
            let (input, slots) = inject_visual(tape, i, body, carried, prompts)?;
            let out = layer.forward(tape, input)?;
            let prompt_output = if b > 0 {
                let p = tape.slice_rows(out, 1 + n, 1 + n + b)?;
                carried = Some(p);
                body = tape.slice_rows(out, 0, 1 + n)?;
                Some(p)
            } else {
                body = out;
                None
            };
            trace.push(LayerTrace {
                input_len: tape.shape(input)[0],
                slots,
                prompt_output,
            });
        }
        let cls = tape.slice_rows(body, 0, 1)?;
        let patch_tokens = tape.slice_rows(body, 1, 1 + n)?;
        let z = tape.matmul(cls, tape.param(&self.image.projection))?;
        let z = tape.reshape(z, &[self.config.joint_width])?;
        Ok(ImageEncoding {
            z,
            cls,
            patch_tokens,
            trace,
        })
    }

    /// Conditions patch tokens on `z_l`, decodes to `[S, S]` logits and adds
    /// the residual upsampler branch when one is supplied.
    pub fn decode(&self, tape: &Tape, patch_tokens: Var, z_text: Var, upsampler: Option<&Upsampler>) -> Result<DecodeOutput> {
        let cfg = &self.config;
        let (n, h, s, f) = (
            cfg.num_patches(),
            cfg.vision_width,
            cfg.image_size,
            cfg.decoder_features,
        );
        let shape = tape.shape(patch_tokens);
        if shape != [n, h] {
            return Err(Error::shape("decode", &shape, &[n, h]));
        }
        if tape.shape(z_text) != [cfg.joint_width] {
            return Err(Error::shape("decode conditioning", &tape.shape(z_text), &[cfg.joint_width]));
        }
        let z = tape.reshape(z_text, &[1, cfg.joint_width])?;
        let cond = self.decoder.condition.forward(tape, z)?;
        let cond = tape.reshape(cond, &[h])?;
        let mut x = tape.mul_row(patch_tokens, cond)?;
        for layer in &self.decoder.layers {
            x = layer.forward(tape, x)?;
        }
        let tiles = self.decoder.unembed.forward(tape, x)?;
        let features = tape.gather(tiles, tile_assembly_index(cfg), &[f, s, s])?;
        let head = tape.conv2d(
            features,
            tape.param(&self.decoder.head_weight),
            Some(tape.param(&self.decoder.head_bias)),
            0,
        )?;
        let body = tape.reshape(head, &[s, s])?;
        let logits = match upsampler {
            Some(up) => {
                let r = up.forward(tape, features)?;
                let r = tape.reshape(r, &[s, s])?;
                tape.add(body, r)?
            }
            None => body,
        };
        Ok(DecodeOutput { logits, body, features })
    }

    /// FNV-1a over every parameter's name and bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        self.visit(&mut |p| {
            feed(p.name.as_bytes());
            for v in p.tensor.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        });
        hash
    }
}

/// Flat index mapping the unembedded `[n, F·p·p]` tiles onto an `[F, S, S]` map.
fn tile_assembly_index(cfg: &BackboneConfig) -> Vec<usize> {
    let (p, s, f) = (cfg.patch_size, cfg.image_size, cfg.decoder_features);
    let side = cfg.patches_per_side();
    let row = f * p * p;
    let mut index = Vec::with_capacity(f * s * s);
    for c in 0..f {
        for y in 0..s {
            for x in 0..s {
                let token = (y / p) * side + x / p;
                index.push(token * row + (c * p + y % p) * p + x % p);
            }
        }
    }
    index
}

impl Parameterized for Backbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.text.visit(f);
        self.image.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.text.visit_mut(f);
        self.image.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            ..BackboneConfig::default()
        }
    }

    fn image(cfg: &BackboneConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        let data = (0..3 * s * s).map(|_| rng.random::<f64>()).collect();
        Tensor::new(&[3, s, s], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            image_size: 60,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            text_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            vision_layers: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tokenizer_contract() {
        let t = tokenize("cat", 16).unwrap();
        assert_eq!(t.ids, vec![BOS_ID, b'c' as usize, b'a' as usize, b't' as usize, EOS_ID]);
        assert_eq!(t.eos_index(), 4);
        assert!(matches!(tokenize("a much too long phrase", 16), Err(Error::Tokenize(_))));
        assert!(matches!(TokenIds::new(vec![1, 5, 6]), Err(Error::Tokenize(_))));
        assert!(matches!(TokenIds::new(vec![1, 2, 2]), Err(Error::Tokenize(_))));
    }

    #[test]
    fn single_layer_text_is_projection_of_eos() {
        let cfg = BackboneConfig {
            text_layers: 1,
            ..small_config()
        };
        let bb = Backbone::new(cfg, 3).unwrap();
        let tokens = bb.tokenize("red circle").unwrap();
        let tape = Tape::new();
        let enc = bb.encode_text(&tape, &tokens, None).unwrap();
        let w0 = bb.text.embed(&tape, &tokens).unwrap();
        let w1 = bb.text.layers[0].forward(&tape, w0).unwrap();
        let eos = tokens.eos_index();
        let row = tape.slice_rows(w1, eos, eos + 1).unwrap();
        let z = tape.matmul(row, tape.param(&bb.text.projection)).unwrap();
        assert_eq!(&*tape.value(enc.z), &*tape.value(z));
    }

    #[test]
    fn identical_tokens_identical_embedding() {
        let bb = Backbone::new(small_config(), 4).unwrap();
        let t1 = bb.tokenize("square").unwrap();
        let t2 = TokenIds::new(t1.ids.clone()).unwrap();
        let tape = Tape::new();
        let a = bb.encode_text(&tape, &t1, None).unwrap();
        let b = bb.encode_text(&tape, &t2, None).unwrap();
        assert_eq!(&*tape.value(a.z), &*tape.value(b.z));
    }

    #[test]
    fn image_shapes_and_errors() {
        let cfg = small_config();
        let bb = Backbone::new(cfg.clone(), 5).unwrap();
        let tape = Tape::new();
        let enc = bb.encode_image(&tape, &image(&cfg, 1), None).unwrap();
        assert_eq!(tape.shape(enc.patch_tokens), vec![(16 / 8) * (16 / 8), 32]);
        assert_eq!(tape.shape(enc.z), vec![32]);
        let wrong = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(bb.encode_image(&tape, &wrong, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_image_zero_positions_gives_equal_patch_embeddings() {
        let cfg = small_config();
        let mut bb = Backbone::new(cfg.clone(), 6).unwrap();
        bb.image.positional.tensor.data_mut().fill(0.0);
        let tape = Tape::new();
        let seq = bb.image.embed(&tape, &Tensor::zeros(&[3, 16, 16]), &cfg).unwrap();
        let v = tape.value(seq);
        let rows: Vec<&[f64]> = v.chunks(32).skip(1).collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn decode_shape_and_residual() {
        let cfg = small_config();
        let bb = Backbone::new(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut up = Upsampler::new(&cfg, &mut rng);
        let tape = Tape::new();
        let tokens = tape.leaf(&Tensor::randn(&[4, 32], 1.0, &mut rng));
        let z = tape.leaf(&Tensor::randn(&[32], 1.0, &mut rng));
        let plain = bb.decode(&tape, tokens, z, None).unwrap();
        assert_eq!(tape.shape(plain.logits), vec![16, 16]);
        assert_eq!(plain.logits, plain.body);

        let with = bb.decode(&tape, tokens, z, Some(&up)).unwrap();
        assert_ne!(&*tape.value(with.logits), &*tape.value(plain.logits));

        // the tape caches parameters by name, so the edited factor needs a fresh tape
        up.residual_factor.tensor.data_mut()[0] = 0.0;
        let fresh = Tape::new();
        let tokens2 = fresh.leaf(&tape.to_tensor(tokens));
        let z2 = fresh.leaf(&tape.to_tensor(z));
        let zeroed = bb.decode(&fresh, tokens2, z2, Some(&up)).unwrap();
        assert_eq!(&*fresh.value(zeroed.logits), &*tape.value(plain.logits));

        let bad = tape.leaf(&Tensor::zeros(&[5, 32]));
        assert!(bb.decode(&tape, bad, z, None).is_err());
    }

    #[test]
    fn tile_assembly_places_patch_pixels() {
        let cfg = small_config();
        let idx = tile_assembly_index(&cfg);
        // pixel (y=9, x=2) of channel 1 lives in token (1,0) = 2, tile offset (1*8+1)*8+2
        let row = cfg.decoder_features * 64;
        assert_eq!(idx[(16 + 9) * 16 + 2], 2 * row + (8 + 1) * 8 + 2);
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), idx.len());
    }

    #[test]
    fn backbone_is_frozen_by_default() {
        let bb = Backbone::new(small_config(), 9).unwrap();
        assert!(bb.params().iter().all(|p| !p.tensor.requires_grad()));
        let names: std::collections::HashSet<_> = bb.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), bb.params().len());
    }
}
