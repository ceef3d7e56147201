//! Acceptance suite: each check prints one PASS/FAIL line; the binary exits
//! nonzero if any check fails.

use std::time::{Duration, Instant};

use flowr_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use flowr_core::config::ExperimentConfig;
use flowr_core::crp::{predictive_class_probs, sequence_log_prob, ClassCounts, CrpParams};
use flowr_core::data::{generate_synthetic_world, Sample};
use flowr_core::encoder::{AffineLayer, Encoder};
use flowr_core::experiment::{evaluate, EvalConfig, Method};
use flowr_core::gaussian::{batch_posterior, log_density, NaturalStats, NoiseModel, SharedPrior};
use flowr_core::gradcheck::{verification_suite, CheckedLoss, GradCheckOptions};
use flowr_core::meta::{
    meta_train, sample_sc_task, EpisodeConfig, MetaLossConfig, MetaParams, MetaTrainConfig, Setting,
};
use flowr_core::metrics::{auroc, h_measure, h_measure_brute_force, ranking_flip_search, ScoreSet};
use flowr_core::model::{fine_tune_output_layer, init_small_context, ModelState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, limit: Duration, msg: String) -> Check {
    ensure(
        elapsed < limit,
        format!("{msg}, {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn gauss_vec(rng: &mut ChaCha8Rng, d: usize, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).unwrap();
    (0..d).map(|_| n.sample(rng)).collect()
}

fn conjugate_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=16);
        let k = rng.random_range(1..=50);
        let prior = SharedPrior::from_moments(gauss_vec(&mut rng, d, 2.0), rng.random_range(0.1..10.0)).unwrap();
        let noise = NoiseModel::new(rng.random_range(0.05..5.0)).unwrap();
        let zs: Vec<Vec<f64>> = (0..k).map(|_| gauss_vec(&mut rng, d, 3.0)).collect();
        let mut seq = prior.stats.clone();
        for z in &zs {
            seq.condition_in_place(z, noise).unwrap();
        }
        let batch = batch_posterior(&prior, &zs, noise).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel(seq.lambda, batch.lambda));
        for (a, b) in seq.q.iter().zip(&batch.q) {
            // Components that cancel to near zero are compared on the scale of the sum.
            let scale = seq.q.iter().map(|v| v.abs()).fold(0.0, f64::max);
            worst = worst.max((a - b).abs() / scale.max(f64::MIN_POSITIVE));
        }
    }
    let ok = worst <= 1e-9;
    within(
        start.elapsed(),
        Duration::from_secs(5),
        format!("max relative error {worst:.2e}"),
    )
    .and_then(|m| ensure(ok, m))
}

fn random_state(rng: &mut ChaCha8Rng) -> ModelState {
    let d = rng.random_range(1..=8);
    let a = rng.random_range(0.0..0.9);
    let crp = CrpParams::with_b(a, rng.random_range(0.1..5.0)).unwrap();
    let noise = NoiseModel::new(rng.random_range(0.1..2.0)).unwrap();
    let prior = SharedPrior::from_moments(gauss_vec(rng, d, 1.0), rng.random_range(0.5..30.0)).unwrap();
    let mut s = ModelState::empty(Encoder::identity(d), prior, crp, noise).unwrap();
    let n_points = rng.random_range(0..30);
    for _ in 0..n_points {
        let y = rng.random_range(1..=s.n_classes() + 1);
        let x = gauss_vec(rng, d, 5.0);
        s.update(&x, y).unwrap();
    }
    s
}

fn normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = random_state(&mut rng);
        let x = gauss_vec(&mut rng, s.dim(), 8.0);
        let p = s.predict(&x).map_err(|e| e.to_string())?;
        worst = worst.max((p.probs.iter().sum::<f64>() - 1.0).abs());
    }
    let mut worst_int: f64 = 0.0;
    for _ in 0..20 {
        let prior = SharedPrior::from_moments(vec![rng.random_range(-3.0..3.0)], rng.random_range(0.1..5.0)).unwrap();
        let noise = NoiseModel::new(rng.random_range(0.1..2.0)).unwrap();
        let mut st = prior.stats.clone();
        for _ in 0..rng.random_range(0..5) {
            st.condition_in_place(&[rng.random_range(-3.0..3.0)], noise).unwrap();
        }
        let pred = st.predictive(noise);
        let sd = pred.variance.sqrt();
        let (lo, hi) = (pred.mean[0] - 12.0 * sd, pred.mean[0] + 12.0 * sd);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let mut area = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            area += w * h * log_density(&pred, &[lo + i as f64 * h]).exp();
        }
        worst_int = worst_int.max((area - 1.0).abs());
    }
    ensure(
        worst <= 1e-9 && worst_int <= 1e-6,
        format!("max |sum - 1| {worst:.2e}, max |integral - 1| {worst_int:.2e}"),
    )
}

fn crp_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let a = rng.random_range(0.0..0.95);
        let p = CrpParams::with_b(a, rng.random_range(0.01..10.0)).unwrap();
        let counts: Vec<u64> = (0..rng.random_range(0..20)).map(|_| rng.random_range(1..30)).collect();
        let probs = predictive_class_probs(&ClassCounts::from_counts(counts), &p).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((probs.iter().sum::<f64>() - 1.0).abs());
    }
    let p = CrpParams::with_b(0.5, 1.0).unwrap();
    // A dense sequence of 40 labels over 6 classes; permutations are
    // relabeled by first appearance so they remain valid arrival orders.
    let labels: Vec<usize> = (0..40)
        .map(|i| if i < 6 { i + 1 } else { rng.random_range(1..=6) })
        .collect();
    let base = sequence_log_prob(&labels, &p).map_err(|e| e.to_string())?;
    let mut worst_exch: f64 = 0.0;
    for _ in 0..100 {
        let mut perm = labels.clone();
        perm.shuffle(&mut rng);
        let mut map = std::collections::HashMap::new();
        let relabeled: Vec<usize> = perm
            .iter()
            .map(|y| {
                let next = map.len() + 1;
                *map.entry(*y).or_insert(next)
            })
            .collect();
        worst_exch = worst_exch.max((sequence_log_prob(&relabeled, &p).unwrap() - base).abs());
    }
    let hand = predictive_class_probs(&ClassCounts::from_counts(vec![3, 2]), &p).unwrap();
    let want = [2.5 / 6.0, 1.5 / 6.0, 2.0 / 6.0];
    let hand_err = hand.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(
        worst_sum <= 1e-12 && worst_exch <= 1e-9 && hand_err <= 1e-12,
        format!("max |sum - 1| {worst_sum:.2e}, exchangeability {worst_exch:.2e}, hand case {hand_err:.2e}"),
    )
}

fn gradients() -> Check {
    let start = Instant::now();
    let entries = verification_suite(100, 10, &GradCheckOptions::default()).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for loss in [
        CheckedLoss::Pretrain,
        CheckedLoss::MetaSmallContext,
        CheckedLoss::MetaLargeContext,
        CheckedLoss::FineTune,
    ] {
        let worst = entries
            .iter()
            .filter(|e| e.loss == loss)
            .map(|e| e.report.max_rel_error)
            .fold(0.0, f64::max);
        ok &= worst <= 1e-4;
        parts.push(format!("{} {worst:.2e}", loss.name()));
    }
    within(
        start.elapsed(),
        Duration::from_secs(60),
        format!("max relative error over 10 configurations: {}", parts.join(", ")),
    )
    .and_then(|m| ensure(ok, m))
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_h: f64 = 0.0;
    let mut worst_auc: f64 = 0.0;
    for _ in 0..20 {
        let np = rng.random_range(5..60);
        let nn = rng.random_range(5..60);
        let shift = rng.random_range(-0.5..2.5);
        let pos: Vec<f64> = (0..np)
            .map(|_| (shift + gauss_vec(&mut rng, 1, 1.0)[0] * 4.0).round() / 4.0)
            .collect();
        let neg: Vec<f64> = (0..nn)
            .map(|_| (gauss_vec(&mut rng, 1, 1.0)[0] * 4.0).round() / 4.0)
            .collect();
        let s = ScoreSet::new(pos, neg).unwrap();
        let h = h_measure(&s, 2.0, 2.0).unwrap();
        let g = h_measure_brute_force(&s, 2.0, 2.0, 10_001).unwrap();
        worst_h = worst_h.max((h - g).abs());
        let mut pairs = 0.0;
        for p in &s.positives {
            for n in &s.negatives {
                pairs += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        pairs /= (np * nn) as f64;
        worst_auc = worst_auc.max((auroc(&s) - pairs).abs());
    }
    let perfect = h_measure(&ScoreSet::new(vec![2.0, 3.0], vec![0.0, 1.0]).unwrap(), 2.0, 2.0).unwrap();
    let same: Vec<f64> = gauss_vec(&mut rng, 50, 1.0);
    let identical = h_measure(&ScoreSet::new(same.clone(), same).unwrap(), 2.0, 2.0).unwrap();
    ensure(
        worst_h <= 1e-3 && worst_auc <= 1e-12 && perfect == 1.0 && identical <= 1e-9,
        format!(
            "H vs grid {worst_h:.2e}, AUROC vs pairs {worst_auc:.2e}, perfect H {perfect}, identical H {identical:.2e}"
        ),
    )
}

fn ranking_flip() -> Check {
    let r = ranking_flip_search(2024, 10_000).map_err(|e| e.to_string())?;
    match r.found {
        Some(f) => ensure(
            (f.auroc_first - f.auroc_second).signum() == -(f.h_first - f.h_second).signum(),
            format!(
                "flip after {} trials: AUROC {:.4} vs {:.4}, H {:.4} vs {:.4}",
                r.trials_used, f.auroc_first, f.auroc_second, f.h_first, f.h_second
            ),
        ),
        None => Err(format!("no flip in {} trials", r.trials_used)),
    }
}

fn end_to_end_sc() -> Check {
    let start = Instant::now();
    let dim = 8;
    let train = generate_synthetic_world(15, dim, 25.0, 0.5, 40, 7001).unwrap();
    let test = generate_synthetic_world(15, dim, 25.0, 0.5, 30, 7002).unwrap();
    let crp = CrpParams::with_b(0.5, 1.0).unwrap().with_empty_class_mass(1e-3);
    let noise = NoiseModel::new(0.5).unwrap();
    let init = MetaParams::small_context(Encoder::Affine(AffineLayer::identity(dim)), crp, noise);
    let tcfg = MetaTrainConfig {
        setting: Setting::SmallContext,
        episode: EpisodeConfig {
            n_support_classes: 10,
            shots_min: 1,
            shots_max: 10,
            n_novel_classes: 5,
            queries_per_class: 5,
        },
        steps: 500,
        batch_size: 4,
        step_size: 0.05,
        loss: MetaLossConfig::default(),
        seed: 11,
        known_classes: vec![],
    };
    let (params, trace) = meta_train(&train.dataset, init, &tcfg, |_| {}).map_err(|e| e.to_string())?;
    let episodes_used = tcfg.steps * tcfg.batch_size;
    let ecfg = EvalConfig {
        setting: Setting::SmallContext,
        method: Method::Flowr,
        episode: EpisodeConfig {
            n_support_classes: 10,
            shots_min: 1,
            shots_max: 10,
            n_novel_classes: 5,
            queries_per_class: 10,
        },
        episodes: 200,
        seed: 12,
        tpr: 0.6,
        workers: 1,
        fine_tune_steps: 0,
        fine_tune_step_size: 0.0,
        known_classes: vec![],
    };
    let out = evaluate(&params, &test.dataset, None, &ecfg).map_err(|e| e.to_string())?;
    let support = out.suite.support_accuracy.unwrap_or(0.0);
    let h = out.suite.h_measure.unwrap_or(0.0);
    let first = trace.first().map_or(f64::NAN, |r| r.loss);
    let last = trace.iter().rev().take(25).map(|r| r.loss).sum::<f64>() / 25.0;
    let msg = format!(
        "{episodes_used} training episodes (loss {first:.3e} -> {last:.3e}), support accuracy {support:.4}, H {h:.4} at achieved TPR {:.3}",
        out.operating_point.achieved_tpr
    );
    within(start.elapsed(), Duration::from_secs(600), msg)
        .and_then(|m| ensure(episodes_used <= 2000 && support >= 0.95 && h >= 0.5, m))
}

fn protocol() -> Check {
    let prior = SharedPrior::from_moments(vec![0.0, 0.0], 4.0).unwrap();
    let noise = NoiseModel::new(0.5).unwrap();
    let crp = CrpParams::with_b(0.5, 1.0).unwrap();
    let support = vec![Sample::new(1, vec![-3.0, 0.0]), Sample::new(1, vec![-3.2, 0.1])];
    let mut state = init_small_context(prior.clone(), crp, noise, Encoder::identity(2), &support).unwrap();
    let z = vec![-1.0, 0.5];
    let before = state.predict(&z).unwrap();
    let n_before = state.n_classes();
    state.update(&z, n_before + 1).unwrap();
    let expected: NaturalStats = prior.stats.condition(&z, noise).unwrap();
    let after = state.predict(&z).unwrap();
    let grew = state.n_classes() == n_before + 1;
    let stats_ok = state.class_stats[n_before] == expected;
    let higher = after.probs[n_before] > before.novelty_score;
    ensure(
        grew && stats_ok && higher,
        format!(
            "N {n_before} -> {}, new stats equal condition(prior, z): {stats_ok}, p(new class) {:.4} vs pre-label p(novel) {:.4}",
            state.n_classes(),
            after.probs[n_before],
            before.novelty_score
        ),
    )
}

fn fine_tune_monotone() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut violations = 0;
    let mut total_drop = 0.0;
    for run in 0..20 {
        let d = rng.random_range(2..6);
        let world = generate_synthetic_world(6, d, 9.0, 0.5, 10, 300 + run).unwrap();
        let cfg = EpisodeConfig {
            n_support_classes: 4,
            shots_min: 1,
            shots_max: 5,
            n_novel_classes: 1,
            queries_per_class: 1,
        };
        let ep = sample_sc_task(&world.dataset, &cfg, &mut rng).unwrap();
        let prior = SharedPrior::from_moments(gauss_vec(&mut rng, d, 0.5), rng.random_range(1.0..10.0)).unwrap();
        let crp = CrpParams::with_b(0.5, rng.random_range(0.5..2.0)).unwrap();
        let enc = Encoder::Affine(AffineLayer::random(d, d, &mut rng));
        let state = init_small_context(prior, crp, NoiseModel::new(0.5).unwrap(), enc, &ep.support).unwrap();
        let out = fine_tune_output_layer(&state, &ep.support, 50, 0.05, true).map_err(|e| e.to_string())?;
        violations += out.loss_trace.windows(2).filter(|w| w[1] > w[0]).count();
        total_drop += out.loss_trace[0] - out.loss_trace[out.loss_trace.len() - 1];
    }
    ensure(
        violations == 0,
        format!(
            "{violations} increases over 20 runs x 50 steps, mean loss drop {:.4}",
            total_drop / 20.0
        ),
    )
}

fn reproducibility() -> Check {
    let world = generate_synthetic_world(12, 4, 25.0, 0.5, 25, 77).unwrap();
    let cfg = ExperimentConfig {
        dim: 4,
        ..ExperimentConfig::sc_paper()
    };
    let mut params = MetaParams::small_context(
        Encoder::Affine(AffineLayer::identity(4)),
        cfg.crp().unwrap(),
        cfg.noise().unwrap(),
    );
    params.log_lambda0 = -2.0;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.fck");
    save_checkpoint(&path, &Checkpoint::new(params, None, Some(cfg.clone()))).map_err(|e| e.to_string())?;
    let run = |workers: usize| -> Result<String, String> {
        let (ck, _) = load_checkpoint(&path, Some(&cfg)).map_err(|e| e.to_string())?;
        let ecfg = EvalConfig {
            setting: Setting::SmallContext,
            method: Method::Flowr,
            episode: EpisodeConfig {
                n_support_classes: 6,
                shots_min: 1,
                shots_max: 10,
                n_novel_classes: 3,
                queries_per_class: 10,
            },
            episodes: 60,
            seed: 5,
            tpr: 0.15,
            workers,
            fine_tune_steps: 0,
            fine_tune_step_size: 0.0,
            known_classes: vec![],
        };
        Ok(evaluate(&ck.params, &world.dataset, None, &ecfg)
            .map_err(|e| e.to_string())?
            .metric_table())
    };
    let one = run(1)?;
    let four = run(4)?;
    ensure(
        one == four,
        format!(
            "1 vs 4 workers: tables {} ({} bytes)",
            if one == four { "identical" } else { "differ" },
            one.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 10] = [
        ("conjugate inference oracle", conjugate_oracle),
        ("posterior normalization", normalization),
        ("CRP properties", crp_properties),
        ("gradient certification", gradients),
        ("metric oracles", metric_oracles),
        ("AUROC/H-measure ranking flip", ranking_flip),
        ("end-to-end small context", end_to_end_sc),
        ("protocol behavior", protocol),
        ("fine-tuning monotonicity", fine_tune_monotone),
        ("reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| name.contains(f.as_str()) || id.ends_with(&format!(" {f}")))
        {
            continue;
        }
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".to_string()));
        match result {
            Ok(msg) => println!("PASS {id} ({name}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {id} ({name}): {msg}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
