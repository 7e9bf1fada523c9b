//! Paired ablation runs: upsampler on/off and prompt initialization.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{Dataset, Normalization, SegmentationSample};
use crate::error::{Error, Result};
use crate::prompts::{InitMode, StrategyKind, TrainableState, INIT_PHRASE};
use crate::training::{evaluate, prepare, train, TrainRunConfig, TrainedArtifacts};

/// Published mean dice drop (points) when the upsampling layer is removed.
/// Quoted in reports for context only.
pub const REFERENCE_UPSAMPLER_DROP: f64 = 2.59;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    /// Final training-subset dice from the metrics log.
    pub train_dice: f64,
    pub val_dice: f64,
    pub test_dice: f64,
}

/// Scores a finished run on every split of `data`.
pub fn score_splits(backbone: &Backbone, data: &Dataset, run: &TrainedArtifacts) -> Result<SplitScores> {
    let score = |samples| score_state(backbone, &run.state, samples, &run.normalization);
    Ok(SplitScores {
        train_dice: run.final_dice().unwrap_or(f64::NAN),
        val_dice: score(&data.val)?,
        test_dice: score(&data.test)?,
    })
}

pub fn score_state(
    backbone: &Backbone,
    state: &TrainableState,
    samples: &[SegmentationSample],
    norm: &Normalization,
) -> Result<f64> {
    let prepared = prepare(backbone, samples, norm)?;
    evaluate(backbone, state, &prepared)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: StrategyKind,
    pub arm: String,
    pub seed: u64,
    pub scores: SplitScores,
    pub backbone_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub strategy: StrategyKind,
    pub seed: u64,
    /// Test dice of the first arm minus the second, in dice points (×100).
    pub delta_points: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub title: String,
    pub note: String,
    pub arms: [String; 2],
    pub rows: Vec<AblationRow>,
    pub deltas: Vec<PairedDelta>,
}

impl AblationReport {
    pub fn mean_delta(&self) -> Option<f64> {
        (!self.deltas.is_empty())
            .then(|| self.deltas.iter().map(|d| d.delta_points).sum::<f64>() / self.deltas.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n# {}\n", self.title, self.note);
        out.push_str("strategy          arm          seed  train_dice  val_dice  test_dice  backbone\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16}  {:<11}  {:<4}  {:<10.4}  {:<8.4}  {:<9.4}  {}",
                r.strategy.as_str(),
                r.arm,
                r.seed,
                r.scores.train_dice,
                r.scores.val_dice,
                r.scores.test_dice,
                r.backbone_checksum
            );
        }
        let _ = writeln!(out, "\ndelta = test dice ({}) - test dice ({}), in points", self.arms[0], self.arms[1]);
        for d in &self.deltas {
            let _ = writeln!(out, "{:<16}  seed {:<4}  {:+.2}", d.strategy.as_str(), d.seed, d.delta_points);
        }
        if let Some(m) = self.mean_delta() {
            let _ = writeln!(out, "mean              {:+.2}", m);
        }
        out
    }
}

fn run_arm(
    backbone: &Backbone,
    data: &Dataset,
    cfg: &TrainRunConfig,
    arm: &str,
) -> Result<AblationRow> {
    let run = train(backbone, &data.train, cfg)?;
    Ok(AblationRow {
        strategy: cfg.prompt.kind,
        arm: arm.to_string(),
        seed: cfg.seed,
        scores: score_splits(backbone, data, &run)?,
        backbone_checksum: format!("{:016x}", run.backbone_checksum),
    })
}

fn paired(a: &AblationRow, b: &AblationRow) -> PairedDelta {
    PairedDelta {
        strategy: a.strategy,
        seed: a.seed,
        delta_points: 100.0 * (a.scores.test_dice - b.scores.test_dice),
    }
}

/// Trains each strategy twice from the same seed, with and without the
/// residual upsampler. Two rows per strategy.
pub fn ablate_upsampler(
    backbone: &Backbone,
    data: &Dataset,
    base: &TrainRunConfig,
    strategies: &[StrategyKind],
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(2 * strategies.len());
    let mut deltas = Vec::with_capacity(strategies.len());
    for &kind in strategies {
        let mut cfg = base.clone();
        cfg.prompt.kind = kind;
        cfg.prompt.depth = cfg.prompt.depth.min(kind.max_depth(&backbone.config));
        cfg.use_upsampler = true;
        let with = run_arm(backbone, data, &cfg, "upsampler")?;
        cfg.use_upsampler = false;
        let without = run_arm(backbone, data, &cfg, "none")?;
        deltas.push(paired(&with, &without));
        rows.push(with);
        rows.push(without);
    }
    Ok(AblationReport {
        title: "upsampler ablation".into(),
        note: format!(
            "reference: removing the layer lowered mean dice by {REFERENCE_UPSAMPLER_DROP} points on full-scale \
             backbones; quoted for context, not expected at this scale"
        ),
        arms: ["upsampler".into(), "none".into()],
        rows,
        deltas,
    })
}

/// Trains `photo-of-a` against Gaussian initialization for each strategy and
/// seed. Strategies without text-space prompts are a configuration error.
pub fn ablate_init(
    backbone: &Backbone,
    data: &Dataset,
    base: &TrainRunConfig,
    strategies: &[StrategyKind],
    seeds: &[u64],
) -> Result<AblationReport> {
    if let Some(k) = strategies.iter().find(|k| !k.supports_text_init()) {
        return Err(Error::config(format!(
            "`{INIT_PHRASE}` initialization does not apply to {k}: it has no text-space prompts"
        )));
    }
    if seeds.is_empty() {
        return Err(Error::config("init ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    let mut deltas = Vec::new();
    for &kind in strategies {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.prompt.kind = kind;
            cfg.prompt.depth = cfg.prompt.depth.min(kind.max_depth(&backbone.config));
            cfg.prompt.init = InitMode::PhotoOfA;
            let photo = run_arm(backbone, data, &cfg, "photo-of-a")?;
            cfg.prompt.init = InitMode::Gaussian;
            let gauss = run_arm(backbone, data, &cfg, "gaussian")?;
            deltas.push(paired(&photo, &gauss));
            rows.push(photo);
            rows.push(gauss);
        }
    }
    Ok(AblationReport {
        title: "prompt initialization ablation".into(),
        note: format!("arms differ only in init: `{INIT_PHRASE}` embeddings vs N(0, 0.02^2)"),
        arms: ["photo-of-a".into(), "gaussian".into()],
        rows,
        deltas,
    })
}
