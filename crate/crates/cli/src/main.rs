//! `promptseg`: data generation, pretraining, prompt training, sweeps,
//! ablations and reports.

mod config;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptseg::checkpoint::{load_backbone, save_backbone};
use promptseg::data::{generate_dataset, load_manifest, write_dataset, Dataset};
use promptseg::experiments::{ablate_init, ablate_upsampler, score_splits};
use promptseg::sweep::{
    compare_samplers, depth_scatter, linear_fit, report_studies, run_study, scatter_csv, scatter_svg,
    QuadraticSurface, SearchSpace, StudyState, TrainingObjective,
};
use promptseg::training::{evaluate_plain, MetricRecord, prepare, pretrain_backbone, train_with};
use promptseg::{Backbone, Error, StrategyKind};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Prompt tuning for a frozen vision-language segmentation backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dot-path override such as `train.steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for the run (training, pretraining and sweep seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic task to PPM/PGM files plus a manifest.
    GenData(Common),
    /// Fit backbone weights on synthetic data and save them frozen.
    Pretrain(Common),
    /// Train one prompt strategy against the frozen backbone.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<StrategyKind>,
        #[arg(long)]
        prompt_depth: Option<usize>,
    },
    /// Run (or resume) one hyperparameter study per strategy.
    Sweep(Common),
    /// Paired runs with and without the residual upsampler.
    AblateUpsampler(Common),
    /// Paired runs with `a photo of a` vs Gaussian prompt initialization.
    AblateInit(Common),
    /// Summarize saved studies: table, CSV and the depth scatter.
    Report(Common),
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("configuration error: {m}")),
            e => Failure::Run(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::FreezeViolation(_)) { 3 } else { 2 })
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let base = match &common.config {
        Some(p) => RunConfig::from_file(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.set).map_err(Failure::Usage)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.pretrain.run.seed = seed;
        cfg.sweep.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Creates the output directory and records the resolved config there.
fn start(out: &Path, cfg: &RunConfig) -> Outcome {
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)
}

fn backbone(cfg: &mut RunConfig) -> Result<Backbone, Failure> {
    let bb = match &cfg.backbone.checkpoint {
        Some(p) => load_backbone(p)?,
        None => Backbone::new(cfg.backbone.config.clone(), cfg.backbone.seed)?,
    };
    cfg.backbone.config = bb.config.clone();
    Ok(bb)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    Ok(match &cfg.data.manifest {
        Some(p) => load_manifest(p)?,
        None => generate_dataset(&cfg.data.spec)?,
    })
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData(c) => gen_data(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::Train {
            common,
            strategy,
            prompt_depth,
        } => train_cmd(&common, strategy, prompt_depth),
        Command::Sweep(c) => sweep(&c),
        Command::AblateUpsampler(c) => ablation(&c, false),
        Command::AblateInit(c) => ablation(&c, true),
        Command::Report(c) => report(&c),
    }
}

fn gen_data(c: &Common) -> Outcome {
    let cfg = resolve(c)?;
    let data = generate_dataset(&cfg.data.spec)?;
    start(&c.out, &cfg)?;
    let manifest = write_dataset(&c.out, &data)?;
    write_json(&c.out.join("task.json"), &cfg.data.spec)?;
    println!(
        "wrote {} samples to {}",
        data.train.len() + data.val.len() + data.test.len(),
        manifest.display()
    );
    Ok(())
}

fn pretrain(c: &Common) -> Outcome {
    let mut cfg = resolve(c)?;
    let bb = backbone(&mut cfg)?;
    let mut pool = Vec::new();
    for spec in &cfg.pretrain.datasets {
        pool.extend(generate_dataset(spec)?.train);
    }
    start(&c.out, &cfg)?;
    let (bb, metrics) = pretrain_backbone(bb, &pool, &cfg.pretrain.run, |m| {
        eprintln!("{}", progress(m));
    })?;
    save_backbone(&c.out.join("backbone.ckpt"), &bb)?;
    let lines: Vec<String> = metrics.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    fs::write(c.out.join("pretrain_metrics.jsonl"), lines.join("\n") + "\n")?;
    println!("backbone checksum {:016x}", bb.checksum());
    Ok(())
}

fn train_cmd(c: &Common, strategy: Option<StrategyKind>, depth: Option<usize>) -> Outcome {
    let mut cfg = resolve(c)?;
    if let Some(k) = strategy {
        cfg.train.prompt.kind = k;
    }
    if let Some(d) = depth {
        cfg.train.prompt.depth = d;
    }
    let bb = backbone(&mut cfg)?;
    let data = dataset(&cfg)?;
    cfg.train.prompt.validate(&bb.config)?;
    cfg.train.validate()?;
    start(&c.out, &cfg)?;
    let run = train_with(&bb, &data.train, &cfg.train, |m| {
        eprintln!("{}", progress(m));
        ControlFlow::Continue(())
    })?;
    fs::write(c.out.join("prompts.ckpt"), run.checkpoint_bytes(&cfg.train)?)?;
    fs::write(c.out.join("metrics.jsonl"), run.metrics_jsonl()?)?;
    let scores = score_splits(&bb, &data, &run)?;
    let baseline = evaluate_plain(&bb, &prepare(&bb, &data.val, &run.normalization)?)?;
    write_json(
        &c.out.join("summary.json"),
        &serde_json::json!({
            "strategy": cfg.train.prompt.kind,
            "steps": run.steps_run,
            "train_dice": scores.train_dice,
            "val_dice": scores.val_dice,
            "test_dice": scores.test_dice,
            "baseline_val_dice": baseline,
            "backbone_checksum": format!("{:016x}", run.backbone_checksum),
        }),
    )?;
    println!(
        "{}: val dice {:.4}  test dice {:.4}  (untuned baseline val {:.4})",
        cfg.train.prompt.kind, scores.val_dice, scores.test_dice, baseline
    );
    Ok(())
}

fn progress(m: &MetricRecord) -> String {
    match m.loss {
        Some(l) => format!("step {:>5}  loss {l:.4}  dice {:.4}", m.step, m.dice),
        None => format!("step {:>5}  dice {:.4}", m.step, m.dice),
    }
}

fn study_path(out: &Path, kind: StrategyKind) -> PathBuf {
    out.join(format!("study_{}.jsonl", kind.as_str()))
}

fn sweep(c: &Common) -> Outcome {
    let mut cfg = resolve(c)?;
    let bb = backbone(&mut cfg)?;
    let data = dataset(&cfg)?;
    let space = SearchSpace::for_backbone(&bb.config);
    start(&c.out, &cfg)?;
    let task = cfg.data.task.clone().unwrap_or_else(|| "synthetic".into());
    for &kind in &cfg.sweep.strategies {
        let path = study_path(&c.out, kind);
        let mut study = if path.exists() {
            let s = StudyState::load(&path)?;
            if s.header.strategy != kind {
                return Err(Failure::Usage(format!("{} holds a {} study", path.display(), s.header.strategy)));
            }
            eprintln!("{kind}: resuming at trial {}", s.trials.len());
            s
        } else {
            let mut s = StudyState::new(kind, space.clone(), cfg.sweep.sampler, cfg.sweep.seed)?;
            s.header.task = task.clone();
            s
        };
        let mut objective = TrainingObjective {
            backbone: &bb,
            data: &data,
            base: cfg.train.clone(),
        };
        run_study(&mut study, cfg.sweep.n_trials, &mut objective, Some(&path))?;
        if let Some(b) = study.best() {
            println!(
                "{kind}: best val dice {:.4} (trial {}, test {:.4})",
                b.val_dice.unwrap_or(f64::NAN),
                b.trial_id,
                b.test_dice.unwrap_or(f64::NAN)
            );
        }
    }
    if cfg.sweep.compare_repetitions > 0 {
        let kind = cfg.sweep.strategies.first().copied().unwrap_or(StrategyKind::Coop);
        let mut surface = QuadraticSurface {
            depth_max: bb.config.max_prompt_depth(),
        };
        let cmp = compare_samplers(
            kind,
            &space,
            cfg.sweep.compare_trials,
            cfg.sweep.compare_repetitions,
            cfg.sweep.seed,
            &mut surface,
        )?;
        fs::write(c.out.join("sampler_comparison.txt"), cmp.to_text())?;
        write_json(&c.out.join("sampler_comparison.json"), &cmp)?;
        print!("{}", cmp.to_text());
    }
    write_report(&[c.out.clone()], &c.out)
}

fn ablation(c: &Common, init: bool) -> Outcome {
    let mut cfg = resolve(c)?;
    let bb = backbone(&mut cfg)?;
    let data = dataset(&cfg)?;
    let strategies = &cfg.ablation.strategies;
    if init {
        if let Some(k) = strategies.iter().find(|k| !k.supports_text_init()) {
            return Err(Failure::Usage(format!(
                "configuration error: photo-of-a initialization does not apply to {k}; remove it from ablation.strategies"
            )));
        }
    }
    start(&c.out, &cfg)?;
    let (report, name) = if init {
        (ablate_init(&bb, &data, &cfg.train, strategies, &cfg.ablation.seeds)?, "ablate_init")
    } else {
        (ablate_upsampler(&bb, &data, &cfg.train, strategies)?, "ablate_upsampler")
    };
    fs::write(c.out.join(format!("{name}.txt")), report.to_text())?;
    write_json(&c.out.join(format!("{name}.json")), &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn report(c: &Common) -> Outcome {
    let cfg = resolve(c)?;
    start(&c.out, &cfg)?;
    let dirs = if cfg.report.studies.is_empty() {
        vec![c.out.clone()]
    } else {
        cfg.report.studies.clone()
    };
    write_report(&dirs, &c.out)
}

fn write_report(dirs: &[PathBuf], out: &Path) -> Outcome {
    let mut studies = Vec::new();
    for dir in dirs {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("study_") && n.ends_with(".jsonl"))
            })
            .collect();
        paths.sort();
        for p in paths {
            studies.push(StudyState::load(&p)?);
        }
    }
    if studies.is_empty() {
        return Err(Failure::Usage("no study_*.jsonl files found".into()));
    }
    let table = report_studies(&studies);
    fs::write(out.join("report.txt"), table.to_text())?;
    fs::write(out.join("report.csv"), table.to_csv())?;
    let points = depth_scatter(&studies);
    let fit = linear_fit(&points).ok();
    fs::write(out.join("depth_scatter.csv"), scatter_csv(&points, fit.as_ref()))?;
    fs::write(out.join("depth_scatter.svg"), scatter_svg(&points, fit.as_ref()))?;
    write_json(&out.join("depth_fit.json"), &fit)?;
    print!("{}", table.to_text());
    if let Some(f) = fit {
        println!("test dice vs prompt depth: slope {:.4}, intercept {:.4}, R² {:.4}, n {}", f.slope, f.intercept, f.r2, f.n);
    }
    Ok(())
}
