//! The JSON run configuration, dot-path overrides and path resolution.

use std::fs;
use std::path::{Path, PathBuf};

use promptseg::data::SyntheticTaskSpec;
use promptseg::sweep::SamplerKind;
use promptseg::training::{PretrainConfig, TrainRunConfig};
use promptseg::{BackboneConfig, StrategyKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    /// Frozen weights to load. When absent a backbone is initialized from
    /// `config` and `seed`.
    pub checkpoint: Option<PathBuf>,
    pub config: BackboneConfig,
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            config: BackboneConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Load samples from this manifest instead of generating `spec`.
    pub manifest: Option<PathBuf>,
    /// Name used for this task in sweep reports.
    pub task: Option<String>,
    pub spec: SyntheticTaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Training sets of all listed specs are pooled.
    pub datasets: Vec<SyntheticTaskSpec>,
    pub run: PretrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            datasets: vec![SyntheticTaskSpec::default()],
            run: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub strategies: Vec<StrategyKind>,
    pub n_trials: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Paired TPE-vs-random studies on the quadratic surface; 0 skips them.
    pub compare_repetitions: usize,
    pub compare_trials: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            strategies: StrategyKind::ALL.to_vec(),
            n_trials: 20,
            sampler: SamplerKind::Tpe,
            seed: 0,
            compare_repetitions: 10,
            compare_trials: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub strategies: Vec<StrategyKind>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            strategies: StrategyKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Directories searched for `study_*.jsonl` files. Defaults to `--out`.
    pub studies: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub data: DataSection,
    pub train: TrainRunConfig,
    pub pretrain: PretrainSection,
    pub sweep: SweepSection,
    pub ablation: AblationSection,
    pub report: ReportSection,
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.backbone.checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.data.manifest {
            fix(p);
        }
        self.report.studies.iter_mut().for_each(fix);
    }

    /// Applies `key=value` overrides. Keys are dot paths into the JSON form
    /// and must already exist; values are parsed as JSON, falling back to a
    /// bare string, and the result is type-checked by deserializing again.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, String> {
        let mut doc = serde_json::to_value(self).map_err(|e| e.to_string())?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| format!("override `{item}` is not key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| format!("invalid override: {e}"))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| format!("unknown config key `{key}`"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(format!("empty config key in `{key}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed_and_keys_checked() {
        let cfg = RunConfig::default();
        let c = cfg
            .with_overrides(&["train.steps=7".into(), "train.prompt.kind=vpt".into()])
            .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.prompt.kind, StrategyKind::Vpt);
        assert!(cfg.with_overrides(&["train.stepz=7".into()]).unwrap_err().contains("unknown"));
        assert!(cfg.with_overrides(&["train.steps=abc".into()]).is_err());
        assert!(cfg.with_overrides(&["train.steps".into()]).is_err());
        assert!(cfg.with_overrides(&["train.steps.x=1".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::default().with_overrides(&["sweep.n_trials=3".into()]).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
