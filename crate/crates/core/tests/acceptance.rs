//! Acceptance checks. Runs as a plain binary so every verdict line is
//! printed even when the test runner captures output.

use std::sync::Arc;
use std::time::{Duration, Instant};

use stalesgd_core::cluster::{TimingSample, EPOCHS_CSV_HEADER};
use stalesgd_core::harness::{
    factorizations, lr_modulation_ab, mu_lambda_suite, run_experiment, ExperimentConfig, LR_AB_BATCH,
    LR_AB_LEARNERS, LR_AB_STABILITY_EDGE_ALPHA0,
};
use stalesgd_core::model::loss;
use stalesgd_core::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, t: Instant, v: Verdict) -> Verdict {
    let e = t.elapsed();
    if e > limit {
        verdict(false, format!("{} [took {e:.1?}, limit {limit:?}]", v.detail))
    } else {
        verdict(v.pass, format!("{} [{e:.1?}]", v.detail))
    }
}

fn data(cfg: &ExperimentConfig) -> (Arc<Dataset>, Arc<Dataset>) {
    cfg.datasets().expect("datasets")
}

fn softsync(learners: usize, batch: usize, n: usize) -> ExperimentConfig {
    ExperimentConfig {
        policy: SyncPolicy::Softsync(n),
        lr_mode: LrMode::StalenessModulated,
        learners,
        batch,
        ..ExperimentConfig::default()
    }
}

fn numeric_gradient(w: &Weights, batch: &MiniBatch, h: f64) -> Vec<f64> {
    let mut probe = w.clone();
    (0..w.len())
        .map(|i| {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = loss(&forward(&probe, batch).unwrap(), &batch.labels).unwrap();
            probe.params_mut()[i] = orig - h;
            let down = loss(&forward(&probe, batch).unwrap(), &batch.labels).unwrap();
            probe.params_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn c1_gradient_check() -> Verdict {
    let t = Instant::now();
    let mut rng = RngStream::new(2024, 0);
    let acts = [Activation::Tanh, Activation::Sigmoid, Activation::Relu];
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let depth = 2 + rng.index(3);
        let mut sizes: Vec<usize> = (0..depth).map(|_| 1 + rng.index(5)).collect();
        let last = sizes.len() - 1;
        sizes[last] = sizes[last].clamp(2, 3);
        let act = acts[rng.index(acts.len())];
        let spec = ModelSpec::uniform(sizes.clone(), act).unwrap();
        let w = Weights::init(&spec, &mut rng);
        let mu = 1 + rng.index(7);
        let x: Vec<f64> = (0..mu * sizes[0]).map(|_| rng.gaussian()).collect();
        let y: Vec<usize> = (0..mu).map(|_| rng.index(sizes[last])).collect();
        let batch = MiniBatch::new(Matrix::from_vec(mu, sizes[0], x).unwrap(), y).unwrap();
        let (g, _) = backward(&w, &batch).unwrap();
        let fd = numeric_gradient(&w, &batch, 1e-5);
        let diff: f64 = g.0.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = g.0.iter().map(|a| a * a).sum::<f64>().sqrt() + fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        worst = worst.max(rel);
    }
    within(
        Duration::from_secs(10),
        t,
        verdict(worst < 1e-4, format!("20 random MLPs, worst relative error {worst:.2e} (< 1e-4)")),
    )
}

fn c2_hardsync_zero_staleness() -> Verdict {
    let mut cfg = ExperimentConfig {
        learners: 6,
        batch: 8,
        epochs: 1000,
        max_updates: Some(200),
        ..ExperimentConfig::default()
    };
    cfg.timing.learner_speeds = vec![1.0, 1.0, 3.0, 1.0, 0.5, 1.0];
    let (tr, te) = data(&cfg);
    let log = run_experiment(&cfg, 7, &tr, &te).unwrap();
    let max = log.records.iter().map(|r| r.max_staleness()).max().unwrap_or(0);
    let full = log.records.iter().all(|r| r.contributors.len() == 6);
    verdict(
        log.updates >= 200 && max == 0 && full,
        format!("{} updates, max staleness {max}, every update has all 6 learners: {full}", log.updates),
    )
}

fn c3_staleness_law() -> Verdict {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [1usize, 2, 30] {
        let cfg = ExperimentConfig {
            epochs: 1000,
            max_updates: Some(if n == 30 { 600 } else { 500 }),
            ..softsync(30, 4, n)
        };
        let (tr, te) = data(&cfg);
        let log = run_experiment(&cfg, 1, &tr, &te).unwrap();
        let st = log.staleness_stats().unwrap();
        let mean = st.run_mean;
        let support = st.histogram.support();
        let nf = n as f64;
        let mut good = log.updates >= 500 && mean >= 0.8 * nf && mean <= 1.2 * nf;
        match n {
            1 => good &= support.iter().all(|&s| s <= 2),
            2 => good &= support.iter().all(|&s| s <= 4),
            _ => good &= st.histogram.tail(60) < 1e-3,
        }
        ok &= good;
        parts.push(format!(
            "n={n}: mean {mean:.3}, max {}, P(>60) {:.1e}",
            st.histogram.max().unwrap_or(0),
            st.histogram.tail(60)
        ));
    }
    within(Duration::from_secs(120), t, verdict(ok, parts.join("; ")))
}

fn c4_softsync_lambda_is_async() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for arch in [Arch::Base, Arch::Adv] {
        let soft = ExperimentConfig {
            arch,
            epochs: 2,
            ..softsync(8, 8, 8)
        };
        let asy = ExperimentConfig {
            policy: SyncPolicy::Async,
            ..soft.clone()
        };
        let (tr, te) = data(&soft);
        let a = run_experiment(&soft, 3, &tr, &te).unwrap();
        let b = run_experiment(&asy, 3, &tr, &te).unwrap();
        let same = a.checksum().unwrap() == b.checksum().unwrap()
            && a.final_weights.to_bytes() == b.final_weights.to_bytes();
        ok &= same;
        parts.push(format!("{arch}: {} updates, identical {same}", a.updates));
    }
    verdict(ok, parts.join("; "))
}

fn c5_update_count_law() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (lambda, n, arch) in [(7, 2, Arch::Base), (8, 3, Arch::Base), (12, 5, Arch::Adv), (16, 1, Arch::AdvStar), (5, 5, Arch::Base)] {
        let cfg = ExperimentConfig {
            arch,
            epochs: 1,
            ..softsync(lambda, 8, n)
        };
        let (tr, te) = data(&cfg);
        let log = run_experiment(&cfg, 11, &tr, &te).unwrap();
        let c = (lambda / n) as u64;
        let good = log.updates * c == log.gradients_consumed
            && log.batches_computed == log.gradients_consumed + log.gradients_discarded;
        ok &= good;
        parts.push(format!("l={lambda} n={n} {arch}: {}x{c}={}", log.updates, log.gradients_consumed));
    }
    verdict(ok, parts.join("; "))
}

fn c6_hardsync_rescale_equivalence() -> Verdict {
    let t = Instant::now();
    let base = ExperimentConfig {
        epochs: 1000,
        max_updates: Some(100),
        sampling: SamplingMode::RoundRobin,
        alpha0: 0.1,
        ref_batch: 16,
        ..ExperimentConfig::default()
    };
    let a = ExperimentConfig {
        learners: 1,
        batch: 8,
        ..base.clone()
    };
    let b = ExperimentConfig {
        learners: 2,
        batch: 4,
        ..base
    };
    let (tr, te) = data(&a);
    let la = run_experiment(&a, 5, &tr, &te).unwrap();
    let lb = run_experiment(&b, 5, &tr, &te).unwrap();
    let d = la
        .final_weights
        .params()
        .iter()
        .zip(lb.final_weights.params())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    within(
        Duration::from_secs(30),
        t,
        verdict(
            la.updates == 100 && lb.updates == 100 && d < 1e-9,
            format!("(8,1) vs (4,2) after {} updates: max |dw| {d:.2e}", la.updates),
        ),
    )
}

fn c7_lr_modulation() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig {
        learners: LR_AB_LEARNERS,
        batch: LR_AB_BATCH,
        alpha0: LR_AB_STABILITY_EDGE_ALPHA0,
        seeds: vec![1, 2, 3],
        ..ExperimentConfig::default()
    };
    let rows = lr_modulation_ab(&cfg, LR_AB_LEARNERS).unwrap();
    let mut wins = 0;
    let mut unmod_div = 0;
    for seed in &cfg.seeds {
        let m = rows.iter().find(|r| r.seed == *seed && r.mode == "modulated").unwrap();
        let u = rows.iter().find(|r| r.seed == *seed && r.mode == "unmodulated").unwrap();
        let m_ok = !m.diverged && m.final_test_error.is_finite();
        if m_ok && (u.diverged || !u.final_test_error.is_finite() || m.final_test_error < u.final_test_error) {
            wins += 1;
        }
        if u.diverged {
            unmod_div += 1;
        }
    }
    within(
        Duration::from_secs(300),
        t,
        verdict(
            wins >= 2 && unmod_div >= 1,
            format!("alpha0={LR_AB_STABILITY_EDGE_ALPHA0}: modulated better in {wins}/3, unmodulated diverged in {unmod_div}/3"),
        ),
    )
}

fn c8_mu_lambda() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig {
        lr_mode: LrMode::StalenessModulated,
        seeds: vec![1, 2, 3, 4, 5],
        ..ExperimentConfig::default()
    };
    let cells = factorizations(&[32, 128, 512], &[4, 8, 16], |_| SyncPolicy::Softsync(1));
    let rep = mu_lambda_suite(&cfg, &cells).unwrap();
    let means: Vec<f64> = rep.groups.iter().map(|g| g.mean).collect();
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    let tight = rep.groups.iter().all(|g| g.spread < 1.5 * g.seed_std);
    let ratios: Vec<String> = rep.groups.iter().map(|g| format!("{:.2}", g.spread / g.seed_std)).collect();
    within(
        Duration::from_secs(900),
        t,
        verdict(
            monotone && tight && rep.groups.len() == 3,
            format!("group means {means:.4?}, spread/std {}", ratios.join(",")),
        ),
    )
}

fn c9_tree_equals_flat() -> Verdict {
    let flat = ExperimentConfig {
        epochs: 2,
        ..ExperimentConfig::default()
    };
    let mut tree = ExperimentConfig {
        arch: Arch::Adv,
        ..flat.clone()
    };
    tree.tree = TreeSpec {
        learners_per_leaf: 2,
        fanout: 2,
        min_depth: 1,
    };
    let (tr, te) = data(&flat);
    let a = run_experiment(&flat, 9, &tr, &te).unwrap();
    let b = run_experiment(&tree, 9, &tr, &te).unwrap();
    let same = a.final_weights.to_bytes() == b.final_weights.to_bytes()
        && a.final_timestamp == b.final_timestamp
        && a.staleness_csv_bytes().unwrap() == b.staleness_csv_bytes().unwrap();
    verdict(same && a.updates > 0, format!("{} updates, flat and 2-level tree identical: {same}", a.updates))
}

fn c10_overlap() -> Verdict {
    let mut values = Vec::new();
    for arch in [Arch::Base, Arch::Adv, Arch::AdvStar] {
        let mut cfg = ExperimentConfig {
            arch,
            epochs: 2,
            ..softsync(16, 16, 1)
        };
        cfg.timing.bandwidth = 3.5e6;
        let (tr, te) = data(&cfg);
        values.push(run_experiment(&cfg, 1, &tr, &te).unwrap().communication_overlap().unwrap());
    }
    let sample = TimingSample {
        learner_id: 0,
        batch_index: 0,
        compute_t: 11.52,
        pull_wait_t: 88.48,
        push_wait_t: 0.0,
    };
    let fixed = stalesgd_core::cluster::communication_overlap(&[sample]).unwrap();
    verdict(
        values[2] > values[1] && values[1] > values[0] && fixed == 11.52,
        format!(
            "base {:.2}% < adv {:.2}% < adv* {:.2}%; 11.52 of 100 -> {fixed}%",
            values[0], values[1], values[2]
        ),
    )
}

fn c11_reproducible_csvs() -> Verdict {
    let cfg = ExperimentConfig {
        arch: Arch::AdvStar,
        epochs: 2,
        ..softsync(8, 8, 2)
    };
    let (tr, te) = data(&cfg);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg, 4, &tr, &te).unwrap().write_csvs(d.path()).unwrap();
    }
    let mut ok = true;
    for name in ["staleness.csv", "epochs.csv", "timing.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        ok &= a == b && !a.is_empty();
    }
    let epochs = std::fs::read_to_string(dirs[0].path().join("epochs.csv")).unwrap();
    ok &= epochs.lines().next() == Some(EPOCHS_CSV_HEADER.join(",").as_str());
    verdict(ok, "two virtual runs wrote byte-identical staleness, epochs and timing CSVs")
}

fn main() {
    type Check = (&'static str, fn() -> Verdict);
    let checks: Vec<Check> = vec![
        ("gradient check", c1_gradient_check),
        ("hardsync staleness", c2_hardsync_zero_staleness),
        ("staleness law", c3_staleness_law),
        ("softsync(lambda) = async", c4_softsync_lambda_is_async),
        ("update count", c5_update_count_law),
        ("hardsync rescale", c6_hardsync_rescale_equivalence),
        ("lr modulation", c7_lr_modulation),
        ("mu-lambda", c8_mu_lambda),
        ("tree = flat", c9_tree_equals_flat),
        ("overlap", c10_overlap),
        ("reproducible csv", c11_reproducible_csvs),
    ];
    let results: Vec<Verdict> = std::thread::scope(|s| {
        let handles: Vec<_> = checks.iter().map(|(_, f)| s.spawn(f)).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| verdict(false, "panicked")))
            .collect()
    });
    let mut failed = 0;
    for (k, ((name, _), v)) in checks.iter().zip(&results).enumerate() {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        if !v.pass {
            failed += 1;
        }
        println!("{tag} criterion {}: {name}: {}", k + 1, v.detail);
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
