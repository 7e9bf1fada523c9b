//! Hyperparameter search: the search space, a TPE sampler, resumable studies
//! and reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::prompts::StrategyKind;
use crate::training::{evaluate, prepare, train, TrainRunConfig};

pub const GAMMA: f64 = 0.25;
pub const N_STARTUP: usize = 10;
pub const N_CANDIDATES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    LearningRate,
    WeightDecay,
    PromptDepth,
    IntermediateDim,
    UseLora,
    AttnHeads,
    AttnDropout,
    AttnFfDim,
    LayernormFirst,
    SharedDim,
}

impl Dim {
    pub const ALL: [Dim; 10] = [
        Dim::LearningRate,
        Dim::WeightDecay,
        Dim::PromptDepth,
        Dim::IntermediateDim,
        Dim::UseLora,
        Dim::AttnHeads,
        Dim::AttnDropout,
        Dim::AttnFfDim,
        Dim::LayernormFirst,
        Dim::SharedDim,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Dim::LearningRate => "learning_rate",
            Dim::WeightDecay => "weight_decay",
            Dim::PromptDepth => "prompt_depth",
            Dim::IntermediateDim => "intermediate_dim",
            Dim::UseLora => "use_lora",
            Dim::AttnHeads => "attn_heads",
            Dim::AttnDropout => "attn_dropout",
            Dim::AttnFfDim => "attn_ff_dim",
            Dim::LayernormFirst => "layernorm_first",
            Dim::SharedDim => "shared_dim",
        }
    }

    /// The "Applicable for" column of the search-space table.
    pub fn applies_to(self, kind: StrategyKind) -> bool {
        use StrategyKind::*;
        match self {
            Dim::LearningRate | Dim::WeightDecay | Dim::PromptDepth => true,
            Dim::IntermediateDim | Dim::UseLora => matches!(kind, Cocoop | Maple),
            Dim::AttnHeads | Dim::AttnDropout | Dim::AttnFfDim | Dim::LayernormFirst => kind == SharedAttention,
            Dim::SharedDim => kind == SharedSeparate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
}

impl ParamValue {
    pub fn as_f64(self) -> f64 {
        match self {
            ParamValue::Bool(b) => b as i64 as f64,
            ParamValue::Int(i) => i as f64,
            ParamValue::Float(f) => f,
        }
    }
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x:.3e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Range {
    LogUniform { low: f64, high: f64 },
    Uniform { low: f64, high: f64 },
    Int { low: i64, high: i64 },
    Choice { options: Vec<ParamValue> },
}

impl Range {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Range::LogUniform { low, high } => *low > 0.0 && low < high,
            Range::Uniform { low, high } => low < high,
            Range::Int { low, high } => low <= high,
            Range::Choice { options } => !options.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid range {self:?}")))
        }
    }

    pub fn contains(&self, v: ParamValue) -> bool {
        match (self, v) {
            (Range::LogUniform { low, high } | Range::Uniform { low, high }, ParamValue::Float(x)) => {
                (*low..=*high).contains(&x)
            }
            (Range::Int { low, high }, ParamValue::Int(i)) => (*low..=*high).contains(&i),
            (Range::Choice { options }, v) => options.contains(&v),
            _ => false,
        }
    }

    /// Bounds of the internal coordinate the Parzen estimators work in.
    fn internal_bounds(&self) -> (f64, f64) {
        match self {
            Range::LogUniform { low, high } => (low.ln(), high.ln()),
            Range::Uniform { low, high } => (*low, *high),
            Range::Int { low, high } => (*low as f64 - 0.5, *high as f64 + 0.5),
            Range::Choice { options } => (0.0, options.len() as f64),
        }
    }

    fn to_internal(&self, v: ParamValue) -> f64 {
        match (self, v) {
            (Range::LogUniform { .. }, v) => v.as_f64().ln(),
            (Range::Choice { options }, v) => options.iter().position(|o| *o == v).unwrap_or(0) as f64,
            (_, v) => v.as_f64(),
        }
    }

    fn from_internal(&self, x: f64) -> ParamValue {
        match self {
            Range::LogUniform { low, high } => ParamValue::Float(x.exp().clamp(*low, *high)),
            Range::Uniform { low, high } => ParamValue::Float(x.clamp(*low, *high)),
            Range::Int { low, high } => ParamValue::Int((x.round() as i64).clamp(*low, *high)),
            Range::Choice { options } => options[(x as usize).min(options.len() - 1)],
        }
    }

    fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> ParamValue {
        match self {
            Range::Choice { options } => options[rng.random_range(0..options.len())],
            Range::Int { low, high } => ParamValue::Int(rng.random_range(*low..=*high)),
            _ => {
                let (lo, hi) = self.internal_bounds();
                self.from_internal(rng.random_range(lo..hi))
            }
        }
    }
}

/// Search dimensions and their ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: BTreeMap<Dim, Range>,
}

fn choice<T: Copy>(values: &[T], f: impl Fn(T) -> ParamValue) -> Range {
    Range::Choice {
        options: values.iter().map(|&v| f(v)).collect(),
    }
}

impl SearchSpace {
    /// Ranges for full-size backbones.
    pub fn full_size() -> Self {
        Self::with(11, &[16, 20, 32], &[1280, 1420])
    }

    /// Desk-scale space: depth bounded by the backbone, attention heads and
    /// feed-forward widths rescaled to the 32-wide coupler block.
    pub fn desk(depth_max: usize) -> Self {
        Self::with(depth_max, &[2, 4, 8], &[80, 89])
    }

    pub fn for_backbone(cfg: &BackboneConfig) -> Self {
        Self::desk(cfg.max_prompt_depth())
    }

    fn with(depth_max: usize, heads: &[i64], ff: &[i64]) -> Self {
        let dims = BTreeMap::from([
            (Dim::LearningRate, Range::LogUniform { low: 1e-5, high: 5e-3 }),
            (Dim::WeightDecay, Range::LogUniform { low: 1e-5, high: 0.01 }),
            (
                Dim::PromptDepth,
                Range::Int {
                    low: 1,
                    high: depth_max as i64,
                },
            ),
            (Dim::IntermediateDim, choice(&[32, 64, 96, 128], ParamValue::Int)),
            (Dim::UseLora, choice(&[true, false], ParamValue::Bool)),
            (Dim::AttnHeads, choice(heads, ParamValue::Int)),
            (Dim::AttnDropout, Range::Uniform { low: 0.1, high: 0.55 }),
            (Dim::AttnFfDim, choice(ff, ParamValue::Int)),
            (Dim::LayernormFirst, choice(&[true, false], ParamValue::Bool)),
            (Dim::SharedDim, choice(&[32, 64], ParamValue::Int)),
        ]);
        Self { dims }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.values().try_for_each(Range::validate)
    }

    /// The dimensions a trial of `kind` samples, in key order.
    pub fn applicable(&self, kind: StrategyKind) -> Vec<(Dim, &Range)> {
        self.dims
            .iter()
            .filter(|(d, _)| d.applies_to(kind))
            .map(|(d, r)| (*d, r))
            .collect()
    }

    /// True when `cfg` holds exactly the applicable keys, each in range.
    pub fn admits(&self, kind: StrategyKind, cfg: &TrialConfig) -> bool {
        let dims = self.applicable(kind);
        dims.len() == cfg.len() && dims.iter().all(|(d, r)| cfg.get(d).is_some_and(|v| r.contains(*v)))
    }
}

pub type TrialConfig = BTreeMap<Dim, ParamValue>;

/// Overlays a sampled trial onto a base training configuration.
pub fn apply_trial(base: &TrainRunConfig, kind: StrategyKind, trial: &TrialConfig) -> Result<TrainRunConfig> {
    let mut cfg = base.clone();
    cfg.prompt.kind = kind;
    let int = |d: Dim, v: ParamValue| match v {
        ParamValue::Int(i) if i > 0 => Ok(i as usize),
        _ => Err(Error::config(format!("{} expects a positive integer, got {v}", d.key()))),
    };
    let boolean = |d: Dim, v: ParamValue| match v {
        ParamValue::Bool(b) => Ok(b),
        _ => Err(Error::config(format!("{} expects a boolean, got {v}", d.key()))),
    };
    for (&d, &v) in trial {
        match d {
            Dim::LearningRate => cfg.learning_rate = v.as_f64(),
            Dim::WeightDecay => cfg.weight_decay = v.as_f64(),
            Dim::PromptDepth => cfg.prompt.depth = int(d, v)?,
            Dim::IntermediateDim => cfg.prompt.coupler.intermediate_dim = int(d, v)?,
            Dim::UseLora => cfg.prompt.coupler.use_lora = boolean(d, v)?,
            Dim::AttnHeads => cfg.prompt.coupler.attn_heads = int(d, v)?,
            Dim::AttnDropout => cfg.prompt.coupler.attn_dropout = v.as_f64(),
            Dim::AttnFfDim => cfg.prompt.coupler.attn_ff_dim = int(d, v)?,
            Dim::LayernormFirst => cfg.prompt.coupler.layernorm_first = boolean(d, v)?,
            Dim::SharedDim => cfg.prompt.coupler.shared_dim = Some(int(d, v)?),
        }
    }
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Tpe,
    Random,
}

/// Gaussian-kernel Parzen estimator with a uniform prior component.
struct Parzen {
    centers: Vec<f64>,
    bandwidth: f64,
    lo: f64,
    hi: f64,
}

impl Parzen {
    fn fit(points: &[f64], lo: f64, hi: f64) -> Self {
        let n = points.len();
        let width = hi - lo;
        let bandwidth = if n < 2 {
            width
        } else {
            let mean = points.iter().sum::<f64>() / n as f64;
            let var = points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Scott's rule for one dimension, floored so ties keep some spread
            (var.sqrt() * (n as f64).powf(-0.2)).max(width / (10.0 * n as f64).max(10.0))
        };
        Self {
            centers: points.to_vec(),
            bandwidth,
            lo,
            hi,
        }
    }

    fn density(&self, x: f64) -> f64 {
        let k = self.centers.len() as f64 + 1.0;
        let prior = 1.0 / (self.hi - self.lo);
        let norm = 1.0 / (self.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        let kernels: f64 = self
            .centers
            .iter()
            .map(|c| norm * (-0.5 * ((x - c) / self.bandwidth).powi(2)).exp())
            .sum();
        (prior + kernels) / k
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let j = rng.random_range(0..=self.centers.len());
        if j == self.centers.len() {
            return rng.random_range(self.lo..self.hi);
        }
        let normal = Normal::new(self.centers[j], self.bandwidth).expect("positive bandwidth");
        normal.sample(rng).clamp(self.lo, self.hi)
    }
}

/// Smoothed category frequencies: `(count + 1/k) / (n + 1)`.
fn categorical(points: &[f64], k: usize) -> Vec<f64> {
    let mut p = vec![1.0 / k as f64; k];
    for &x in points {
        p[x as usize] += 1.0;
    }
    let total = points.len() as f64 + 1.0;
    p.iter().map(|v| v / total).collect()
}

/// Splits completed history into (good, bad) by the γ-quantile of the
/// objective. When every score ties, both sets are the whole history.
fn split_history<'a>(history: &'a [(TrialConfig, f64)]) -> (Vec<&'a TrialConfig>, Vec<&'a TrialConfig>) {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[b].1.total_cmp(&history[a].1).then(a.cmp(&b)));
    let all: Vec<&TrialConfig> = order.iter().map(|&i| &history[i].0).collect();
    let first = history[order[0]].1;
    if history.iter().all(|(_, v)| *v == first) {
        return (all.clone(), all);
    }
    let n_good = ((GAMMA * history.len() as f64).ceil() as usize).clamp(1, history.len() - 1);
    (all[..n_good].to_vec(), all[n_good..].to_vec())
}

/// Draws the next trial configuration. Uniform over the applicable space for
/// the random sampler or while fewer than `N_STARTUP` trials have completed;
/// afterwards an independent TPE step per dimension.
pub fn sample_trial(
    space: &SearchSpace,
    kind: StrategyKind,
    history: &[(TrialConfig, f64)],
    sampler: SamplerKind,
    rng: &mut ChaCha8Rng,
) -> Result<TrialConfig> {
    let dims = space.applicable(kind);
    if dims.is_empty() {
        return Err(Error::config(format!("search space has no dimension applicable to {kind}")));
    }
    space.validate()?;
    let history: Vec<(TrialConfig, f64)> = history.iter().filter(|(_, v)| v.is_finite()).cloned().collect();
    if sampler == SamplerKind::Random || history.len() < N_STARTUP {
        return Ok(dims.into_iter().map(|(d, r)| (d, r.sample_uniform(rng))).collect());
    }
    let (good, bad) = split_history(&history);
    let mut out = TrialConfig::new();
    for (d, r) in dims {
        let xs = |set: &[&TrialConfig]| -> Vec<f64> {
            set.iter().filter_map(|c| c.get(&d)).map(|v| r.to_internal(*v)).collect()
        };
        let (gx, bx) = (xs(&good), xs(&bad));
        let value = match r {
            Range::Choice { options } => {
                let k = options.len();
                let (l, g) = (categorical(&gx, k), categorical(&bx, k));
                let mut best = (f64::NEG_INFINITY, 0);
                for _ in 0..N_CANDIDATES {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let c = l.iter().position(|p| {
                        acc += p;
                        u < acc
                    });
                    let c = c.unwrap_or(k - 1);
                    let score = l[c].ln() - g[c].ln();
                    if score > best.0 {
                        best = (score, c);
                    }
                }
                options[best.1]
            }
            _ => {
                let (lo, hi) = r.internal_bounds();
                let (l, g) = (Parzen::fit(&gx, lo, hi), Parzen::fit(&bx, lo, hi));
                let mut best = (f64::NEG_INFINITY, lo);
                for _ in 0..N_CANDIDATES {
                    let x = l.sample(rng);
                    let score = l.density(x).ln() - g.density(x).ln();
                    if score > best.0 {
                        best = (score, x);
                    }
                }
                r.from_internal(best.1)
            }
        };
        out.insert(d, value);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub config: TrialConfig,
    pub val_dice: Option<f64>,
    pub test_dice: Option<f64>,
    pub status: TrialStatus,
    pub seed: u64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// First line of a study file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyHeader {
    #[serde(default = "default_task")]
    pub task: String,
    pub strategy: StrategyKind,
    pub sampler: SamplerKind,
    pub seed: u64,
    /// ChaCha8 word position of the sampler stream after the last draw.
    pub rng_word_pos: String,
    pub space: SearchSpace,
}

fn default_task() -> String {
    "task".into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyState {
    pub header: StudyHeader,
    pub trials: Vec<TrialRecord>,
}

impl StudyState {
    pub fn new(strategy: StrategyKind, space: SearchSpace, sampler: SamplerKind, seed: u64) -> Result<Self> {
        space.validate()?;
        if space.applicable(strategy).is_empty() {
            return Err(Error::config(format!("search space has no dimension applicable to {strategy}")));
        }
        Ok(Self {
            header: StudyHeader {
                task: default_task(),
                strategy,
                sampler,
                seed,
                rng_word_pos: "0".into(),
                space,
            },
            trials: Vec::new(),
        })
    }

    fn rng(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .header
            .rng_word_pos
            .parse()
            .map_err(|_| Error::config("corrupt sampler state in study header"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.header.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }

    /// Samples the next configuration and advances the persisted RNG state.
    pub fn next_config(&mut self) -> Result<TrialConfig> {
        let mut rng = self.rng()?;
        let history: Vec<(TrialConfig, f64)> = self
            .trials
            .iter()
            .filter_map(|t| match (t.status, t.val_dice) {
                (TrialStatus::Complete, Some(v)) => Some((t.config.clone(), v)),
                _ => None,
            })
            .collect();
        let h = &self.header;
        let cfg = sample_trial(&h.space, h.strategy, &history, h.sampler, &mut rng)?;
        self.header.rng_word_pos = rng.get_word_pos().to_string();
        Ok(cfg)
    }

    /// Best complete trial by validation dice; earliest wins ties.
    pub fn best(&self) -> Option<&TrialRecord> {
        self.trials
            .iter()
            .filter(|t| t.status == TrialStatus::Complete)
            .fold(None, |best: Option<&TrialRecord>, t| match best {
                Some(b) if b.val_dice >= t.val_dice => Some(b),
                _ => Some(t),
            })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for t in &self.trials {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: StudyHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::config("empty study file"))?)?;
        let trials = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { header, trials })
    }

    /// Writes the whole file to a sibling temp file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, self.to_jsonl()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

fn trial_seed(study_seed: u64, trial_id: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(study_seed);
    rng.set_stream(1 + trial_id as u64);
    rng.random()
}

/// Something that scores a trial configuration as (val dice, test dice).
pub trait Objective {
    fn evaluate(&mut self, kind: StrategyKind, trial: &TrialConfig, seed: u64) -> Result<(f64, f64)>;
}

impl<F: FnMut(StrategyKind, &TrialConfig, u64) -> Result<(f64, f64)>> Objective for F {
    fn evaluate(&mut self, kind: StrategyKind, trial: &TrialConfig, seed: u64) -> Result<(f64, f64)> {
        self(kind, trial, seed)
    }
}

/// Runs trials until the study holds `n_trials` records. Trials run one at a
/// time; the study file (when given) is rewritten after every trial, so an
/// interrupted study resumes from its last completed record.
pub fn run_study(
    study: &mut StudyState,
    n_trials: usize,
    objective: &mut dyn Objective,
    path: Option<&Path>,
) -> Result<()> {
    while study.trials.len() < n_trials {
        let trial_id = study.trials.len();
        let config = study.next_config()?;
        let seed = trial_seed(study.header.seed, trial_id);
        let start = Instant::now();
        let outcome = objective
            .evaluate(study.header.strategy, &config, seed)
            .and_then(|(v, t)| {
                if (0.0..=1.0).contains(&v) && (0.0..=1.0).contains(&t) {
                    Ok((v, t))
                } else {
                    Err(Error::contract(format!("dice outside [0, 1]: val {v}, test {t}")))
                }
            });
        let (val_dice, test_dice, status, error) = match outcome {
            Ok((v, t)) => (Some(v), Some(t), TrialStatus::Complete, None),
            Err(e) => (None, None, TrialStatus::Failed, Some(e.to_string())),
        };
        study.trials.push(TrialRecord {
            trial_id,
            config,
            val_dice,
            test_dice,
            status,
            seed,
            wall_time: start.elapsed().as_secs_f64(),
            error,
        });
        if let Some(p) = path {
            study.save(p)?;
        }
    }
    Ok(())
}

/// Trains the trial's configuration and scores it on the val and test splits.
pub struct TrainingObjective<'a> {
    pub backbone: &'a Backbone,
    pub data: &'a Dataset,
    pub base: TrainRunConfig,
}

impl Objective for TrainingObjective<'_> {
    fn evaluate(&mut self, kind: StrategyKind, trial: &TrialConfig, seed: u64) -> Result<(f64, f64)> {
        let mut cfg = apply_trial(&self.base, kind, trial)?;
        cfg.seed = seed;
        let run = train(self.backbone, &self.data.train, &cfg)?;
        let score = |samples| -> Result<f64> {
            let prepared = prepare(self.backbone, samples, &run.normalization)?;
            evaluate(self.backbone, &run.state, &prepared)
        };
        Ok((score(&self.data.val)?, score(&self.data.test)?))
    }
}

/// A smooth synthetic response surface over the search space, peaked at
/// lr = 1e-3, wd = 1e-3 and the deepest prompt depth; used to test samplers
/// without training.
pub struct QuadraticSurface {
    pub depth_max: usize,
}

impl QuadraticSurface {
    pub fn score(&self, trial: &TrialConfig) -> f64 {
        let lr = trial.get(&Dim::LearningRate).map_or(-3.0, |v| v.as_f64().log10());
        let wd = trial.get(&Dim::WeightDecay).map_or(-3.0, |v| v.as_f64().log10());
        let depth = trial.get(&Dim::PromptDepth).map_or(1.0, |v| v.as_f64());
        let d = (depth - self.depth_max as f64) / self.depth_max.max(1) as f64;
        let loss = 0.12 * (lr + 3.0).powi(2) + 0.04 * (wd + 3.0).powi(2) + 0.3 * d * d;
        (1.0 - loss).clamp(0.0, 1.0)
    }
}

impl Objective for QuadraticSurface {
    fn evaluate(&mut self, _kind: StrategyKind, trial: &TrialConfig, _seed: u64) -> Result<(f64, f64)> {
        let s = self.score(trial);
        Ok((s, s))
    }
}

// ---- reporting -------------------------------------------------------------

/// Mean and population standard deviation; the std is `None` for one value.
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
    Some((mean, std))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub strategy: String,
    /// Test dice of the best-by-validation trial, per task.
    pub per_task: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Groups loaded studies by the task named in their headers.
pub fn report_studies(studies: &[StudyState]) -> Report {
    let pairs: Vec<(String, StudyState)> = studies.iter().map(|s| (s.header.task.clone(), s.clone())).collect();
    report(&pairs)
}

/// One row per strategy, one column per task, plus mean ± std over tasks.
pub fn report(studies: &[(String, StudyState)]) -> Report {
    let mut tasks: Vec<String> = Vec::new();
    let mut strategies: Vec<StrategyKind> = Vec::new();
    for (task, s) in studies {
        if !tasks.contains(task) {
            tasks.push(task.clone());
        }
        if !strategies.contains(&s.header.strategy) {
            strategies.push(s.header.strategy);
        }
    }
    let rows = strategies
        .into_iter()
        .map(|k| {
            let per_task: Vec<Option<f64>> = tasks
                .iter()
                .map(|t| {
                    studies
                        .iter()
                        .find(|(task, s)| task == t && s.header.strategy == k)
                        .and_then(|(_, s)| s.best())
                        .and_then(|b| b.test_dice)
                })
                .collect();
            let present: Vec<f64> = per_task.iter().flatten().copied().collect();
            let ms = mean_std(&present);
            ReportRow {
                strategy: k.to_string(),
                per_task,
                mean: ms.map(|m| m.0),
                std: ms.and_then(|m| m.1),
            }
        })
        .collect();
    Report { tasks, rows }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut header = vec!["strategy".to_string()];
        header.extend(self.tasks.iter().cloned());
        header.push("mean ± std".into());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.strategy.clone()];
                line.extend(r.per_task.iter().map(|v| cell(*v)));
                line.push(match (r.mean, r.std) {
                    (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
                    (Some(m), None) => format!("{m:.4}"),
                    _ => String::new(),
                });
                line
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|l| l[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",mean,std\n");
        for r in &self.rows {
            out.push_str(&r.strategy);
            for v in &r.per_task {
                out.push(',');
                out.push_str(&cell(*v));
            }
            let _ = writeln!(out, ",{},{}", cell(r.mean), cell(r.std));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

/// Least-squares line through `points`, accumulated in one pass with
/// running means and co-moments. R² is 1 when every y is equal.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    let (mut n, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        n += 1.0;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if points.len() < 2 || sxx == 0.0 {
        return Err(Error::config("linear fit needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
        n: points.len(),
    })
}

/// (prompt depth, test dice) for every complete trial.
pub fn depth_scatter<'a>(studies: impl IntoIterator<Item = &'a StudyState>) -> Vec<(f64, f64)> {
    studies
        .into_iter()
        .flat_map(|s| &s.trials)
        .filter(|t| t.status == TrialStatus::Complete)
        .filter_map(|t| Some((t.config.get(&Dim::PromptDepth)?.as_f64(), t.test_dice?)))
        .collect()
}

pub fn scatter_csv(points: &[(f64, f64)], fit: Option<&LinearFit>) -> String {
    let mut out = String::new();
    if let Some(f) = fit {
        let _ = writeln!(out, "# slope={} intercept={} r2={} n={}", f.slope, f.intercept, f.r2, f.n);
    }
    out.push_str("prompt_depth,test_dice\n");
    for (x, y) in points {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}

/// A minimal SVG scatter with the fitted line.
pub fn scatter_svg(points: &[(f64, f64)], fit: Option<&LinearFit>) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let xmax = points.iter().map(|p| p.0).fold(1.0, f64::max) + 0.5;
    let xmin = points.iter().map(|p| p.0).fold(xmax, f64::min).min(1.0) - 0.5;
    let px = |x: f64| m + (x - xmin) / (xmax - xmin) * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(
        out,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">Prompt depth</text>",
        w / 2.0 - 30.0,
        h - 10.0
    );
    let _ = writeln!(out, "<text x=\"4\" y=\"{}\" font-size=\"12\">Test dice</text>", m - 8.0);
    for (x, y) in points {
        let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>", px(*x), py(*y));
    }
    if let Some(f) = fit {
        let (x0, x1) = (xmin + 0.5, xmax - 0.5);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"crimson\"/>",
            px(x0),
            py(f.intercept + f.slope * x0),
            px(x1),
            py(f.intercept + f.slope * x1)
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">slope {:.4}, R² {:.3}</text>",
            m + 6.0,
            m + 16.0,
            f.slope,
            f.r2
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Best validation dice of paired TPE and random studies that share a seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedComparison {
    pub tpe_best: Vec<f64>,
    pub random_best: Vec<f64>,
    pub median_tpe: f64,
    pub median_random: f64,
    pub tpe_wins: usize,
    pub ties: usize,
}

impl PairedComparison {
    pub fn to_text(&self) -> String {
        let mut out = String::from("repetition  tpe_best  random_best  delta\n");
        for (i, (t, r)) in self.tpe_best.iter().zip(&self.random_best).enumerate() {
            let _ = writeln!(out, "{i:<10}  {t:.4}    {r:.4}       {:+.4}", t - r);
        }
        let _ = writeln!(
            out,
            "median      {:.4}    {:.4}       {:+.4}  (tpe wins {}, ties {})",
            self.median_tpe,
            self.median_random,
            self.median_tpe - self.median_random,
            self.tpe_wins,
            self.ties
        );
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `repetitions` pairs of studies (TPE and random, same seed each pair)
/// and compares their best validation dice.
pub fn compare_samplers(
    kind: StrategyKind,
    space: &SearchSpace,
    n_trials: usize,
    repetitions: usize,
    seed: u64,
    objective: &mut dyn Objective,
) -> Result<PairedComparison> {
    let mut tpe_best = Vec::with_capacity(repetitions);
    let mut random_best = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        let rep_seed = trial_seed(seed, rep);
        for (sampler, sink) in [(SamplerKind::Tpe, &mut tpe_best), (SamplerKind::Random, &mut random_best)] {
            let mut study = StudyState::new(kind, space.clone(), sampler, rep_seed)?;
            run_study(&mut study, n_trials, objective, None)?;
            sink.push(study.best().and_then(|b| b.val_dice).unwrap_or(0.0));
        }
    }
    let tpe_wins = tpe_best.iter().zip(&random_best).filter(|(t, r)| t > r).count();
    let ties = tpe_best.iter().zip(&random_best).filter(|(t, r)| t == r).count();
    Ok(PairedComparison {
        median_tpe: median(&tpe_best),
        median_random: median(&random_best),
        tpe_best,
        random_best,
        tpe_wins,
        ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn applicability_matches_table() {
        let space = SearchSpace::desk(4);
        let keys = |k| space.applicable(k).iter().map(|(d, _)| *d).collect::<Vec<_>>();
        let base = vec![Dim::LearningRate, Dim::WeightDecay, Dim::PromptDepth];
        assert_eq!(keys(StrategyKind::Coop), base);
        assert_eq!(keys(StrategyKind::Vpt), base);
        assert_eq!(keys(StrategyKind::DeepTextual), base);
        let mut co = base.clone();
        co.extend([Dim::IntermediateDim, Dim::UseLora]);
        assert_eq!(keys(StrategyKind::Cocoop), co);
        assert_eq!(keys(StrategyKind::Maple), co);
        let mut sa = base.clone();
        sa.extend([Dim::AttnHeads, Dim::AttnDropout, Dim::AttnFfDim, Dim::LayernormFirst]);
        assert_eq!(keys(StrategyKind::SharedAttention), sa);
        let mut ss = base;
        ss.push(Dim::SharedDim);
        assert_eq!(keys(StrategyKind::SharedSeparate), ss);
    }

    #[test]
    fn empty_space_is_a_config_error() {
        let space = SearchSpace { dims: BTreeMap::new() };
        let err = sample_trial(&space, StrategyKind::Coop, &[], SamplerKind::Tpe, &mut rng(0));
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(StudyState::new(StrategyKind::Coop, space, SamplerKind::Tpe, 0).is_err());
    }

    #[test]
    fn apply_trial_sets_fields() {
        let mut t = TrialConfig::new();
        t.insert(Dim::LearningRate, ParamValue::Float(2e-3));
        t.insert(Dim::PromptDepth, ParamValue::Int(3));
        t.insert(Dim::SharedDim, ParamValue::Int(64));
        let cfg = apply_trial(&TrainRunConfig::default(), StrategyKind::SharedSeparate, &t).unwrap();
        assert_eq!(cfg.learning_rate, 2e-3);
        assert_eq!(cfg.prompt.depth, 3);
        assert_eq!(cfg.prompt.coupler.shared_dim, Some(64));
        assert_eq!(cfg.prompt.kind, StrategyKind::SharedSeparate);
        t.insert(Dim::UseLora, ParamValue::Int(1));
        assert!(apply_trial(&TrainRunConfig::default(), StrategyKind::Maple, &t).is_err());
    }

    #[test]
    fn linear_fit_on_exact_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 0.3 + 0.05 * i as f64)).collect();
        let f = linear_fit(&pts).unwrap();
        assert!((f.slope - 0.05).abs() < 1e-12);
        assert!((f.intercept - 0.3).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[(1.0, 0.2), (1.0, 0.4)]).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
