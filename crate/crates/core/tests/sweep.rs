use std::collections::BTreeMap;

use proptest::prelude::*;
use promptseg::sweep::*;
use promptseg::StrategyKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lr_of(cfg: &TrialConfig) -> f64 {
    cfg[&Dim::LearningRate].as_f64()
}

/// Kolmogorov–Smirnov statistic of `xs` against Uniform(lo, hi).
fn ks_uniform(xs: &mut [f64], lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn startup_learning_rate_is_log_uniform() {
    let space = SearchSpace::desk(4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut logs: Vec<f64> = (0..10_000)
        .map(|_| lr_of(&sample_trial(&space, StrategyKind::Coop, &[], SamplerKind::Tpe, &mut rng).unwrap()).log10())
        .collect();
    let d = ks_uniform(&mut logs, -5.0, 5e-3f64.log10());
    // asymptotic critical value at α = 0.01
    assert!(d < 1.628 / 100.0, "KS statistic {d}");
}

fn history_from(space: &SearchSpace, kind: StrategyKind, n: usize, score: impl Fn(&TrialConfig) -> f64) -> Vec<(TrialConfig, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n)
        .map(|_| {
            let c = sample_trial(space, kind, &[], SamplerKind::Random, &mut rng).unwrap();
            let s = score(&c);
            (c, s)
        })
        .collect()
}

#[test]
fn tied_history_degrades_to_near_uniform() {
    let space = SearchSpace::desk(4);
    let history = history_from(&space, StrategyKind::Coop, 40, |_| 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut logs: Vec<f64> = (0..2000)
        .map(|_| lr_of(&sample_trial(&space, StrategyKind::Coop, &history, SamplerKind::Tpe, &mut rng).unwrap()).log10())
        .collect();
    let (lo, hi) = (-5.0, 5e-3f64.log10());
    // every quarter of the range keeps a sizable share of the draws
    for q in 0..4 {
        let a = lo + (hi - lo) * q as f64 / 4.0;
        let b = lo + (hi - lo) * (q + 1) as f64 / 4.0;
        let share = logs.iter().filter(|x| (a..=b).contains(*x)).count() as f64 / logs.len() as f64;
        assert!(share > 0.12, "quarter {q} share {share}");
    }
    let mut depths = [0usize; 4];
    for _ in 0..400 {
        let c = sample_trial(&space, StrategyKind::Coop, &history, SamplerKind::Tpe, &mut rng).unwrap();
        depths[c[&Dim::PromptDepth].as_f64() as usize - 1] += 1;
    }
    assert!(depths.iter().all(|&d| d > 40), "{depths:?}");
    let _ = ks_uniform(&mut logs, lo, hi);
}

#[test]
fn tpe_concentrates_on_good_depths() {
    let space = SearchSpace::desk(4);
    let history = history_from(&space, StrategyKind::Vpt, 30, |c| {
        if c[&Dim::PromptDepth].as_f64() >= 3.0 {
            0.9
        } else {
            0.2
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let deep = (0..50)
        .filter(|_| {
            let c = sample_trial(&space, StrategyKind::Vpt, &history, SamplerKind::Tpe, &mut rng).unwrap();
            c[&Dim::PromptDepth].as_f64() >= 3.0
        })
        .count();
    assert!(deep >= 35, "{deep} of 50 draws at depth >= 3");
}

fn quadratic_study(sampler: SamplerKind, n: usize) -> StudyState {
    let mut s = StudyState::new(StrategyKind::Maple, SearchSpace::desk(4), sampler, 11).unwrap();
    run_study(&mut s, n, &mut QuadraticSurface { depth_max: 4 }, None).unwrap();
    s
}

#[test]
fn single_trial_study() {
    let s = quadratic_study(SamplerKind::Tpe, 1);
    assert_eq!(s.trials.len(), 1);
    assert_eq!(s.best(), Some(&s.trials[0]));
}

#[test]
fn resumed_study_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("study.jsonl");
    let full = quadratic_study(SamplerKind::Tpe, 20);

    let mut partial = StudyState::new(StrategyKind::Maple, SearchSpace::desk(4), SamplerKind::Tpe, 11).unwrap();
    run_study(&mut partial, 13, &mut QuadraticSurface { depth_max: 4 }, Some(&path)).unwrap();
    let mut resumed = StudyState::load(&path).unwrap();
    assert_eq!(resumed.trials.len(), 13);
    run_study(&mut resumed, 20, &mut QuadraticSurface { depth_max: 4 }, Some(&path)).unwrap();

    let configs = |s: &StudyState| s.trials.iter().map(|t| (t.config.clone(), t.val_dice, t.seed)).collect::<Vec<_>>();
    assert_eq!(configs(&resumed), configs(&full));
    assert_eq!(resumed.header, full.header);
}

#[test]
fn records_round_trip_bit_exactly() {
    let s = quadratic_study(SamplerKind::Tpe, 15);
    let text = s.to_jsonl().unwrap();
    let back = StudyState::from_jsonl(&text).unwrap();
    assert_eq!(back, s);
    for (a, b) in s.trials.iter().zip(&back.trials) {
        assert_eq!(a.val_dice.unwrap().to_bits(), b.val_dice.unwrap().to_bits());
        assert_eq!(a.wall_time.to_bits(), b.wall_time.to_bits());
        for (x, y) in a.config.values().zip(b.config.values()) {
            assert_eq!(x.as_f64().to_bits(), y.as_f64().to_bits());
        }
    }
    assert_eq!(back.to_jsonl().unwrap(), text);
}

#[test]
fn failed_trials_are_recorded_and_skipped() {
    let mut s = StudyState::new(StrategyKind::Coop, SearchSpace::desk(4), SamplerKind::Tpe, 0).unwrap();
    let mut flaky = |_: StrategyKind, c: &TrialConfig, _: u64| -> promptseg::Result<(f64, f64)> {
        if c[&Dim::PromptDepth].as_f64() == 1.0 {
            Err(promptseg::Error::Config("boom".into()))
        } else {
            Ok((0.5, 0.4))
        }
    };
    run_study(&mut s, 12, &mut flaky, None).unwrap();
    assert_eq!(s.trials.len(), 12);
    assert!(s.trials.iter().any(|t| t.status == TrialStatus::Failed && t.error.is_some()));
    let best = s.best().unwrap();
    assert_eq!(best.status, TrialStatus::Complete);
}

#[test]
fn tpe_beats_random_on_quadratic_surface() {
    let cmp = compare_samplers(
        StrategyKind::Vpt,
        &SearchSpace::desk(4),
        20,
        10,
        2024,
        &mut QuadraticSurface { depth_max: 4 },
    )
    .unwrap();
    assert_eq!(cmp.tpe_best.len(), 10);
    assert!(cmp.median_tpe >= cmp.median_random, "{}", cmp.to_text());
}

#[test]
fn report_mean_and_population_std() {
    let mk = |v: f64| {
        let mut s = StudyState::new(StrategyKind::Coop, SearchSpace::desk(4), SamplerKind::Tpe, 0).unwrap();
        let mut f = |_: StrategyKind, _: &TrialConfig, _: u64| -> promptseg::Result<(f64, f64)> { Ok((v, v)) };
        run_study(&mut s, 1, &mut f, None).unwrap();
        s
    };
    let r = report(&[("a".into(), mk(0.8)), ("b".into(), mk(0.6))]);
    assert_eq!(r.rows.len(), 1);
    assert!((r.rows[0].mean.unwrap() - 0.7).abs() < 1e-12);
    assert!((r.rows[0].std.unwrap() - 0.1).abs() < 1e-12);
    let single = report(&[("a".into(), mk(0.8))]);
    assert_eq!(single.rows[0].std, None);
    assert!(single.to_csv().lines().nth(1).unwrap().ends_with(','));
    assert!(single.to_text().contains("coop"));
}

/// Closed-form least squares through explicit normal equations.
fn closed_form(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean = sy / n;
    let ss_res: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    (slope, intercept, 1.0 - ss_res / ss_tot)
}

proptest! {
    #[test]
    fn fit_matches_closed_form(points in prop::collection::vec((1u8..12, 0.0f64..1.0), 3..40)) {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x as f64, y)).collect();
        prop_assume!(pts.iter().any(|p| p.0 != pts[0].0));
        prop_assume!(pts.iter().any(|p| p.1 != pts[0].1));
        let fit = linear_fit(&pts).unwrap();
        let (slope, intercept, r2) = closed_form(&pts);
        prop_assert!((fit.slope - slope).abs() < 1e-9);
        prop_assert!((fit.intercept - intercept).abs() < 1e-9);
        prop_assert!((fit.r2 - r2).abs() < 1e-9);
    }

    #[test]
    fn sampled_configs_respect_applicability(seed in any::<u64>(), k in 0usize..7, n_hist in 0usize..25) {
        let kind = StrategyKind::ALL[k];
        let space = SearchSpace::desk(4);
        let history = history_from(&space, kind, n_hist, |c| c[&Dim::LearningRate].as_f64() * 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for sampler in [SamplerKind::Tpe, SamplerKind::Random] {
            let c = sample_trial(&space, kind, &history, sampler, &mut rng).unwrap();
            prop_assert!(space.admits(kind, &c), "{kind}: {c:?}");
            if kind == StrategyKind::Coop {
                prop_assert!(!c.keys().any(|d| matches!(d, Dim::AttnHeads | Dim::AttnDropout | Dim::AttnFfDim | Dim::LayernormFirst | Dim::SharedDim)));
            }
            if kind == StrategyKind::SharedAttention {
                prop_assert!(!c.contains_key(&Dim::IntermediateDim) && !c.contains_key(&Dim::UseLora));
            }
        }
    }
}

#[test]
fn every_dimension_stays_in_range() {
    let space = SearchSpace::desk(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen: BTreeMap<Dim, usize> = BTreeMap::new();
    // uniform draws across all strategies touch every dimension
    for i in 0..100_000 {
        let kind = StrategyKind::ALL[i % 7];
        let c = sample_trial(&space, kind, &[], SamplerKind::Random, &mut rng).unwrap();
        for (d, v) in &c {
            assert!(space.dims[d].contains(*v), "{d:?} = {v}");
            *seen.entry(*d).or_default() += 1;
        }
    }
    assert_eq!(seen.len(), Dim::ALL.len());
    // TPE proposals as well
    let history = history_from(&space, StrategyKind::SharedAttention, 20, |c| c[&Dim::AttnDropout].as_f64());
    for _ in 0..2_000 {
        let c = sample_trial(&space, StrategyKind::SharedAttention, &history, SamplerKind::Tpe, &mut rng).unwrap();
        assert!(space.admits(StrategyKind::SharedAttention, &c));
    }
}
