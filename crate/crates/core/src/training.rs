//! Losses, AdamW, the freeze ledger and the training loop.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, TokenIds};
use crate::checkpoint;
use crate::data::{augment, normalize, Mask, Normalization, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::{forward, forward_plain};
use crate::prompts::{trainable_parameters, PromptConfig, TrainableState};
use crate::tensor::{Param, Parameterized, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_d: f64,
    pub lambda_ce: f64,
    /// Added to numerator and denominator of the dice ratio.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_ce: 0.2,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d >= 0.0 && self.lambda_ce >= 0.0 && self.smooth >= 0.0) {
            return Err(Error::config("loss weights and smoothing must be >= 0"));
        }
        Ok(())
    }

    /// `λ_d·ℒ_d + λ_ce·ℒ_ce` on already-computed terms.
    pub fn combine(&self, dice: f64, bce: f64) -> f64 {
        self.lambda_d * dice + self.lambda_ce * bce
    }
}

fn mask_constant(tape: &Tape, like: Var, mask: &Mask) -> Result<Var> {
    let shape = tape.shape(like);
    if shape != [mask.height(), mask.width()] {
        return Err(Error::shape("loss", &shape, &[mask.height(), mask.width()]));
    }
    tape.constant(&shape, mask.to_f64())
}

/// `1 − (2Σpg + s) / (Σp² + Σg² + s)` on probabilities `p`.
pub fn dice_loss_from_probs(tape: &Tape, probs: Var, mask: &Mask, smooth: f64) -> Result<Var> {
    let g = mask_constant(tape, probs, mask)?;
    let inter = tape.sum(tape.mul(probs, g)?);
    let num = tape.shift(tape.scale(inter, 2.0), smooth);
    let p2 = tape.sum(tape.mul(probs, probs)?);
    let den = tape.shift(p2, mask.count() as f64 + smooth);
    let ratio = tape.div(num, den)?;
    Ok(tape.shift(tape.scale(ratio, -1.0), 1.0))
}

pub fn dice_loss(tape: &Tape, logits: Var, mask: &Mask, smooth: f64) -> Result<Var> {
    dice_loss_from_probs(tape, tape.sigmoid(logits), mask, smooth)
}

/// Mean of `softplus(x) − x·y`, the stable form of binary cross-entropy on logits.
pub fn bce_loss(tape: &Tape, logits: Var, mask: &Mask) -> Result<Var> {
    let y = mask_constant(tape, logits, mask)?;
    let per_pixel = tape.sub(tape.softplus(logits), tape.mul(logits, y)?)?;
    Ok(tape.mean(per_pixel))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
}

pub fn combined_loss(tape: &Tape, logits: Var, mask: &Mask, cfg: &LossConfig) -> Result<LossTerms> {
    let dice = dice_loss(tape, logits, mask, cfg.smooth)?;
    let bce = bce_loss(tape, logits, mask)?;
    let total = tape.add(tape.scale(dice, cfg.lambda_d), tape.scale(bce, cfg.lambda_ce))?;
    Ok(LossTerms { total, dice, bce })
}

/// `2|P∩G| / (|P|+|G|)`, with two empty masks scoring 1.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "dice_score",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let inter: usize = pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a & b) as usize).sum();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    /// Allocates moment buffers for exactly the parameters that require grad.
    pub fn new(learning_rate: f64, weight_decay: f64, params: &impl Parameterized) -> Self {
        let mut moments = BTreeMap::new();
        params.visit(&mut |p| {
            if p.tensor.requires_grad() {
                let n = p.tensor.numel();
                moments.insert(
                    p.name.clone(),
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                );
            }
        });
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn num_buffers(&self) -> usize {
        self.moments.len()
    }

    /// Consumes the accumulated gradients (absent gradients count as zero)
    /// and updates every trainable parameter.
    pub fn step(&mut self, params: &mut impl Parameterized) -> Result<()> {
        let mut trainable = 0;
        let mut missing = None;
        params.visit(&mut |p| {
            if p.tensor.requires_grad() {
                trainable += 1;
                if !self.moments.contains_key(&p.name) && missing.is_none() {
                    missing = Some(p.name.clone());
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::contract(format!("missing moment buffer for {name}")));
        }
        if trainable != self.moments.len() {
            return Err(Error::contract(format!(
                "{} moment buffers for {trainable} trainable parameters",
                self.moments.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (lr, wd, eps) = (self.learning_rate, self.weight_decay, self.eps);
        let moments = &mut self.moments;
        params.visit_mut(&mut |p| {
            if !p.tensor.requires_grad() {
                return;
            }
            let grad = p.tensor.take_grad();
            let mo = moments.get_mut(&p.name).expect("checked above");
            for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g;
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g * g;
                let m_hat = mo.m[i] / c1;
                let v_hat = mo.v[i] / c2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
        });
        Ok(())
    }
}

/// Names and fingerprint of what may and may not change during training.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeLedger {
    pub backbone_checksum: u64,
    pub trainable: BTreeSet<String>,
}

impl FreezeLedger {
    /// Fails if any backbone tensor requires grad, if a trainable tensor does
    /// not, or if the two name sets overlap.
    pub fn validate(backbone: &Backbone, state: &TrainableState) -> Result<Self> {
        let mut frozen = BTreeSet::new();
        for p in backbone.params() {
            if p.tensor.requires_grad() {
                return Err(Error::FreezeViolation(format!("backbone parameter {} requires grad", p.name)));
            }
            frozen.insert(p.name.clone());
        }
        let mut trainable = BTreeSet::new();
        for p in trainable_parameters(state) {
            if !p.tensor.requires_grad() {
                return Err(Error::contract(format!("trainable parameter {} is frozen", p.name)));
            }
            if frozen.contains(&p.name) || !trainable.insert(p.name.clone()) {
                return Err(Error::FreezeViolation(format!("parameter name {} is not unique", p.name)));
            }
        }
        Ok(Self {
            backbone_checksum: backbone.checksum(),
            trainable,
        })
    }

    pub fn verify(&self, backbone: &Backbone) -> Result<()> {
        let now = backbone.checksum();
        if now != self.backbone_checksum {
            return Err(Error::FreezeViolation(format!(
                "backbone checksum changed from {:016x} to {now:016x}",
                self.backbone_checksum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub steps: usize,
    /// Effective batch size; realized as micro-batches plus accumulation.
    pub batch_size: usize,
    pub micro_batch: usize,
    pub seed: u64,
    pub prompt: PromptConfig,
    pub use_upsampler: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    /// Leading training samples (unaugmented) scored at each evaluation.
    pub eval_samples: usize,
    pub augment: bool,
    pub loss: LossConfig,
    /// Defaults to statistics of the training images.
    pub normalization: Option<Normalization>,
    /// Test hook: perturb one backbone weight after this step.
    pub inject_backbone_mutation_at: Option<usize>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            micro_batch: 4,
            seed: 0,
            prompt: PromptConfig::default(),
            use_upsampler: true,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            eval_every: 50,
            eval_samples: 16,
            augment: true,
            loss: LossConfig::default(),
            normalization: None,
            inject_backbone_mutation_at: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::config("batch_size and micro_batch must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate must be > 0 and weight_decay >= 0"));
        }
        self.loss.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record; absent
    /// for the step-0 record.
    pub loss: Option<f64>,
    pub dice: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedArtifacts {
    pub state: TrainableState,
    pub metrics: Vec<MetricRecord>,
    /// Training loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub normalization: Normalization,
    pub backbone_checksum: u64,
    pub steps_run: usize,
}

impl TrainedArtifacts {
    pub fn final_dice(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.dice)
    }

    pub fn checkpoint_bytes(&self, cfg: &TrainRunConfig) -> Result<Vec<u8>> {
        prompt_checkpoint_bytes(&self.state, cfg, &self.normalization)
    }

    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn prompt_checkpoint_bytes(state: &TrainableState, cfg: &TrainRunConfig, norm: &Normalization) -> Result<Vec<u8>> {
    let meta = serde_json::json!({
        "kind": "prompts",
        "prompt": cfg.prompt,
        "use_upsampler": state.upsampler.is_some(),
        "normalization": norm,
    });
    checkpoint::to_bytes(&trainable_parameters(state), &meta)
}

/// Inputs prepared once per run: normalized images and tokenized phrases.
pub struct PreparedSample<'a> {
    pub source: &'a SegmentationSample,
    pub image: Tensor,
    pub tokens: TokenIds,
}

pub fn prepare<'a>(
    backbone: &Backbone,
    samples: &'a [SegmentationSample],
    norm: &Normalization,
) -> Result<Vec<PreparedSample<'a>>> {
    let mut cache: HashMap<&str, TokenIds> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            let tokens = match cache.get(s.phrase.as_str()) {
                Some(t) => t.clone(),
                None => {
                    let t = backbone.tokenize(&s.phrase)?;
                    cache.insert(&s.phrase, t.clone());
                    t
                }
            };
            Ok(PreparedSample {
                source: s,
                image: normalize(&s.image, &norm.mean, &norm.std)?,
                tokens,
            })
        })
        .collect()
}

/// Mean per-sample dice of the tuned model, thresholded at probability 0.5.
pub fn evaluate(backbone: &Backbone, state: &TrainableState, samples: &[PreparedSample]) -> Result<f64> {
    mean_dice(samples, |tape, s| Ok(forward(tape, backbone, state, &s.image, &s.tokens)?.logits))
}

/// Same metric for the untuned frozen model (no prompts, no upsampler).
pub fn evaluate_plain(backbone: &Backbone, samples: &[PreparedSample]) -> Result<f64> {
    mean_dice(samples, |tape, s| forward_plain(tape, backbone, &s.image, &s.tokens))
}

fn mean_dice(samples: &[PreparedSample], run: impl Fn(&Tape, &PreparedSample) -> Result<Var>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyAxis { op: "evaluate" });
    }
    let mut total = 0.0;
    for s in samples {
        let tape = Tape::new();
        let logits = run(&tape, s)?;
        let gt = &s.source.mask;
        let pred = Mask::from_scores(gt.height(), gt.width(), &tape.value(logits), 0.0)?;
        total += dice_score(&pred, gt)?;
    }
    Ok(total / samples.len() as f64)
}

/// Forward + backward for one sample; gradients (scaled by `weight`) are
/// added to the trainable tensors. Returns the unscaled loss.
pub fn accumulate_sample_grad(
    tape: &Tape,
    backbone: &Backbone,
    state: &mut TrainableState,
    image: &Tensor,
    tokens: &TokenIds,
    mask: &Mask,
    loss_cfg: &LossConfig,
    weight: f64,
) -> Result<f64> {
    let out = forward(tape, backbone, state, image, tokens)?;
    let terms = combined_loss(tape, out.logits, mask, loss_cfg)?;
    let loss = tape.scalar(terms.total);
    let grads = tape.backward(terms.total)?;
    let mut failure = None;
    state.visit_mut(&mut |p: &mut Param| {
        if let Some(g) = tape.param_var(&p.name).and_then(|v| grads.get(v)) {
            let scaled: Vec<f64> = g.iter().map(|x| x * weight).collect();
            if let Err(e) = p.tensor.accumulate_grad(&scaled) {
                failure.get_or_insert(e);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(loss),
    }
}

fn sample_seed(seed: u64, step: usize, j: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | j as u64);
    rng.random()
}

pub fn train(backbone: &Backbone, data: &[SegmentationSample], cfg: &TrainRunConfig) -> Result<TrainedArtifacts> {
    train_with(backbone, data, cfg, |_| ControlFlow::Continue(()))
}

/// Runs `cfg.steps` optimizer steps. `on_eval` sees every metrics record and
/// may end the run early by returning `Break`.
pub fn train_with(
    backbone: &Backbone,
    data: &[SegmentationSample],
    cfg: &TrainRunConfig,
    mut on_eval: impl FnMut(&MetricRecord) -> ControlFlow<()>,
) -> Result<TrainedArtifacts> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut state = TrainableState::new(&cfg.prompt, backbone, cfg.use_upsampler, cfg.seed)?;
    let ledger = FreezeLedger::validate(backbone, &state)?;
    let mut working: Cow<Backbone> = Cow::Borrowed(backbone);
    let norm = cfg
        .normalization
        .unwrap_or_else(|| Normalization::from_images(data.iter().map(|s| &s.image)));
    let prepared = prepare(backbone, data, &norm)?;
    let eval_set = &prepared[..cfg.eval_samples.clamp(1, prepared.len())];
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, &state);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);

    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut last_recorded = 0;
    let mut record = |step: usize, losses: &[f64], state: &TrainableState, bb: &Backbone| -> Result<ControlFlow<()>> {
        let recent = &losses[last_recorded.min(losses.len())..];
        last_recorded = losses.len();
        let loss = (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64);
        let r = MetricRecord {
            step,
            loss,
            dice: evaluate(bb, state, eval_set)?,
            lr: cfg.learning_rate,
        };
        let flow = on_eval(&r);
        metrics.push(r);
        Ok(flow)
    };

    let mut steps_run = 0;
    let mut stop = record(0, &step_losses, &state, &working)?.is_break();
    while !stop && steps_run < cfg.steps {
        let step = steps_run + 1;
        let weight = 1.0 / cfg.batch_size as f64;
        let mut step_loss = 0.0;
        // micro-batches are processed in a fixed order, so accumulation is deterministic
        for j in 0..cfg.batch_size {
            let idx = rng.random_range(0..prepared.len());
            let s = &prepared[idx];
            let seed = sample_seed(cfg.seed, step, j);
            let (image, mask) = if cfg.augment {
                let mut arng = ChaCha8Rng::seed_from_u64(seed);
                let a = augment(s.source, &mut arng)?;
                (normalize(&a.image, &norm.mean, &norm.std)?, Cow::Owned(a.mask))
            } else {
                (s.image.clone(), Cow::Borrowed(&s.source.mask))
            };
            let tape = Tape::with_dropout_seed(seed);
            step_loss +=
                accumulate_sample_grad(&tape, &working, &mut state, &image, &s.tokens, &mask, &cfg.loss, weight)? * weight;
        }
        opt.step(&mut state)?;
        step_losses.push(step_loss);
        steps_run = step;
        if cfg.inject_backbone_mutation_at == Some(step) {
            let bb = working.to_mut();
            bb.text.token_embedding.tensor.data_mut()[0] += 1e-3;
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            stop = record(step, &step_losses, &state, &working)?.is_break();
        }
    }
    ledger.verify(&working)?;
    Ok(TrainedArtifacts {
        state,
        metrics,
        step_losses,
        normalization: norm,
        backbone_checksum: ledger.backbone_checksum,
        steps_run,
    })
}

/// Settings for fitting the backbone itself before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            eval_every: 100,
            eval_samples: 32,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

/// Trains every backbone weight on `data` (no prompts, no upsampler) and
/// returns the result frozen again.
pub fn pretrain_backbone(
    mut backbone: Backbone,
    data: &[SegmentationSample],
    cfg: &PretrainConfig,
    mut on_eval: impl FnMut(&MetricRecord),
) -> Result<(Backbone, Vec<MetricRecord>)> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 || data.is_empty() {
        return Err(Error::config("pretraining needs data, batch_size >= 1 and eval_every >= 1"));
    }
    cfg.loss.validate()?;
    backbone.set_requires_grad(true);
    let norm = Normalization::from_images(data.iter().map(|s| &s.image));
    let prepared = prepare(&backbone, data, &norm)?;
    let n_eval = cfg.eval_samples.clamp(1, prepared.len());
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, &backbone);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(11);
    let mut metrics = Vec::new();
    let mut losses = Vec::new();
    let mut last_recorded = 0;
    let weight = 1.0 / cfg.batch_size as f64;
    for step in 1..=cfg.steps {
        let mut grads_acc: Vec<Vec<f64>> = Vec::new();
        let mut step_loss = 0.0;
        for j in 0..cfg.batch_size {
            let s = &prepared[rng.random_range(0..prepared.len())];
            let seed = sample_seed(cfg.seed, step, j);
            let (image, mask) = if cfg.augment {
                let a = augment(s.source, &mut ChaCha8Rng::seed_from_u64(seed))?;
                (normalize(&a.image, &norm.mean, &norm.std)?, Cow::Owned(a.mask))
            } else {
                (s.image.clone(), Cow::Borrowed(&s.source.mask))
            };
            let tape = Tape::new();
            let logits = forward_plain(&tape, &backbone, &image, &s.tokens)?;
            let terms = combined_loss(&tape, logits, &mask, &cfg.loss)?;
            step_loss += tape.scalar(terms.total) * weight;
            let grads = tape.backward(terms.total)?;
            let params = backbone.params();
            if grads_acc.is_empty() {
                grads_acc = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            }
            for (acc, p) in grads_acc.iter_mut().zip(&params) {
                if let Some(g) = tape.param_var(&p.name).and_then(|v| grads.get(v)) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x * weight;
                    }
                }
            }
        }
        let mut acc = grads_acc.into_iter();
        let mut failure = None;
        backbone.visit_mut(&mut |p| {
            if let Some(g) = acc.next() {
                if let Err(e) = p.tensor.accumulate_grad(&g) {
                    failure.get_or_insert(e);
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        opt.step(&mut backbone)?;
        losses.push(step_loss);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let recent = &losses[last_recorded..];
            last_recorded = losses.len();
            let r = MetricRecord {
                step,
                loss: Some(recent.iter().sum::<f64>() / recent.len() as f64),
                dice: evaluate_plain(&backbone, &prepared[..n_eval])?,
                lr: cfg.learning_rate,
            };
            on_eval(&r);
            metrics.push(r);
        }
    }
    backbone.set_requires_grad(false);
    Ok((backbone, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> Mask {
        Mask::new(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_loss_hand_example() {
        let tape = Tape::new();
        let p = tape.constant(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = dice_loss_from_probs(&tape, p, &mask(1, 4, &[1, 0, 0, 0]), 0.0).unwrap();
        assert!((tape.scalar(l) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_vanishes_for_saturated_perfect_prediction() {
        let tape = Tape::new();
        let m = mask(2, 2, &[1, 0, 1, 1]);
        let logits: Vec<f64> = m.data().iter().map(|&v| if v == 1 { 40.0 } else { -40.0 }).collect();
        let x = tape.constant(&[2, 2], logits).unwrap();
        let l = dice_loss(&tape, x, &m, 1e-12).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let m = mask(2, 3, &[1, 0, 1, 1, 0, 0]);
        let zeros = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!((tape.scalar(bce_loss(&tape, zeros, &m).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
        let sat: Vec<f64> = m.data().iter().map(|&v| if v == 1 { 20.0 } else { -20.0 }).collect();
        let sat = tape.constant(&[2, 3], sat).unwrap();
        assert!(tape.scalar(bce_loss(&tape, sat, &m).unwrap()) < 1e-8);
    }

    #[test]
    fn loss_shape_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(bce_loss(&tape, x, &mask(1, 4, &[0; 4])), Err(Error::Shape { .. })));
        assert!(matches!(dice_loss(&tape, x, &mask(1, 4, &[0; 4]), 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn combined_hand_example() {
        let cfg = LossConfig::default();
        assert!((cfg.combine(0.5, 0.3) - 0.56).abs() < 1e-12);
        let pure = LossConfig {
            lambda_ce: 0.0,
            ..cfg
        };
        assert_eq!(pure.combine(0.5, 0.3), 0.5);
    }

    fn fd_check(loss: impl Fn(&Tape, Var) -> Var, n: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::new(&[1, n], x.clone()).unwrap().with_requires_grad(true));
        let out = loss(&tape, v);
        let grads = tape.backward(out).unwrap();
        let g = grads.get(v).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..n {
            let eval = |d: f64| {
                let t = Tape::new();
                let mut xs = x.clone();
                xs[i] += d;
                let v = t.constant(&[1, n], xs).unwrap();
                t.scalar(loss(&t, v))
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "i={i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let m = mask(1, 6, &[1, 1, 0, 0, 1, 0]);
        fd_check(|t, v| dice_loss(t, v, &m, 1.0).unwrap(), 6);
        fd_check(|t, v| bce_loss(t, v, &m).unwrap(), 6);
        fd_check(|t, v| combined_loss(t, v, &m, &LossConfig::default()).unwrap().total, 6);
    }

    #[test]
    fn dice_score_examples() {
        let g = mask(1, 4, &[1, 1, 0, 0]);
        assert_eq!(dice_score(&g, &g).unwrap(), 1.0);
        assert_eq!(dice_score(&mask(1, 4, &[0, 0, 1, 1]), &g).unwrap(), 0.0);
        assert_eq!(dice_score(&mask(1, 4, &[1, 0, 1, 0]), &g).unwrap(), 0.5);
        assert_eq!(dice_score(&Mask::zeros(2, 2), &Mask::zeros(2, 2)).unwrap(), 1.0);
    }

    fn scalar_param(v: f64) -> Param {
        Param::new("theta", Tensor::scalar(v).with_requires_grad(true))
    }

    #[test]
    fn adamw_hand_step() {
        let mut p = scalar_param(1.0);
        let mut opt = AdamW::new(0.1, 0.0, &p);
        p.tensor.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut p).unwrap();
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.tensor.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad() {
        let mut p = scalar_param(0.7);
        let mut opt = AdamW::new(0.1, 0.0, &p);
        for _ in 0..5 {
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p.tensor.data()[0], 0.7);

        let (lr, wd) = (0.01, 0.5);
        let mut p = scalar_param(2.0);
        let mut opt = AdamW::new(lr, wd, &p);
        for k in 1..=20 {
            opt.step(&mut p).unwrap();
            let closed = 2.0 * (1.0 - lr * wd).powi(k);
            assert!((p.tensor.data()[0] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_requires_moment_buffers() {
        let frozen = Param::new("theta", Tensor::scalar(1.0));
        let mut opt = AdamW::new(0.1, 0.0, &frozen);
        assert_eq!(opt.num_buffers(), 0);
        let mut p = scalar_param(1.0);
        assert!(matches!(opt.step(&mut p), Err(Error::Contract(_))));
    }
}
