//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use magnet_core::diffcore::{finite_difference_check, Tensor2};
use magnet_core::hybrid_graph::{count_detours, EdgeKind};
use magnet_core::model::{accumulate_joint_gradient, forward, init_params, MagnetConfig, Mode};
use magnet_core::objectives::{gram_loss, sf_consistency_loss, LossWeights};
use magnet_core::pipeline::{run_cv, TrainConfig};
use magnet_core::synth::{generate_cohort, SynthConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_secs, || {
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn detour_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut compared = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(4..=10);
        let density = rng.gen_range(0.3..=0.6);
        let adj = common::random_adjacency(&mut rng, n, density);
        for from in 0..n {
            for to in 0..n {
                if from == to {
                    continue;
                }
                for r in 2..=5 {
                    let got = count_detours(&adj, from, to, r).map_err(|e| e.to_string())?;
                    let want = common::brute_force_detours(&adj, from, to, r);
                    check(got == want, || format!("n={n} ({from},{to}) r={r}: {got} vs {want}"))?;
                    compared += 1;
                }
            }
        }
    }
    within(started.elapsed(), 10.0)?;
    Ok(format!("{compared} counts match"))
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let weights = LossWeights { sf: 0.3, task: 0.7 };
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let n = rng.gen_range(3..=8);
        let hidden = 2 * rng.gen_range(2..=8);
        let cfg = MagnetConfig {
            hidden,
            heads: 2,
            layers: 2,
            dropout: 0.0,
            ..Default::default()
        };
        let g = common::random_graph(&mut rng, n, 0.3);
        let fnc = common::random_fnc(&mut rng, n);
        let target = rng.gen_range(-1.5..1.5);
        let mut params = init_params(&cfg, &mut rng).map_err(|e| e.to_string())?;
        params.zero_grads();
        accumulate_joint_gradient(&g, &fnc, target, &mut params, &cfg, weights, 1, Mode::Eval, &mut rng)
            .map_err(|e| e.to_string())?;
        let err = finite_difference_check(
            |p| {
                let t = forward(&g, p, &cfg, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
                let task = (t.prediction - target).powi(2);
                Ok(weights.task * task + weights.sf * sf_consistency_loss(&t.x_final, &fnc)?)
            },
            &params,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        check(err < 1e-4, || format!("seed {seed} (n={n}, h={hidden}): relative error {err:e}"))?;
        worst = worst.max(err);
    }
    within(started.elapsed(), 60.0)?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let cfg = MagnetConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..=16);
        let g = common::random_graph(&mut rng, n, 0.3);
        let params = init_params(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let t = forward(&g, &params, &cfg, Mode::Eval, &mut rng).map_err(|e| e.to_string())?;
        for layer in &t.local_attention {
            for slots in layer.iter().filter(|s| !s.is_empty()) {
                worst = worst.max((slots.iter().sum::<f64>() - 1.0).abs());
            }
        }
        for layer in &t.global_attention {
            for head in layer {
                for r in 0..n {
                    worst = worst.max((head.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    check(worst < 1e-9, || format!("row sum off by {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let cfg = MagnetConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.gen_range(3..=16);
        let g = common::random_graph(&mut rng, n, 0.3);
        let perm = common::random_permutation(&mut rng, n);
        let params = init_params(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let a = forward(&g, &params, &cfg, Mode::Eval, &mut rng).map_err(|e| e.to_string())?;
        let b = forward(&g.permuted(&perm), &params, &cfg, Mode::Eval, &mut rng).map_err(|e| e.to_string())?;
        worst = worst.max((a.prediction - b.prediction).abs());
        for i in 0..n {
            for c in 0..cfg.hidden {
                worst = worst.max((a.x_final.get(i, c) - b.x_final.get(perm[i], c)).abs());
            }
        }
    }
    check(worst < 1e-9, || format!("difference {worst:e}"))?;
    Ok(format!("max difference {worst:.1e}"))
}

fn consistency_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let mut worst_zero = 0.0f64;
    let mut worst_empty = 0.0f64;
    for n in [2, 4, 8, 16, 53] {
        let h = rng.gen_range(1..=16);
        let x = Tensor2::from_vec(n, h, (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = x.matmul_nt(&x);
        worst_zero = worst_zero.max(gram_loss(&x, &w).map_err(|e| e.to_string())?);

        let fnc = common::random_fnc(&mut rng, n);
        let norm2: f64 = fnc.as_slice().iter().map(|v| v * v).sum();
        let got = sf_consistency_loss(&Tensor2::zeros(n, h), &fnc).map_err(|e| e.to_string())?;
        worst_empty = worst_empty.max((got - norm2 / (n * n) as f64).abs());
    }
    check(worst_zero < 1e-20, || format!("loss at X Xᵀ is {worst_zero:e}"))?;
    check(worst_empty < 1e-12, || format!("loss at X = 0 off by {worst_empty:e}"))?;
    Ok(format!("max {worst_zero:.1e} at the Gram target, {worst_empty:.1e} at zero"))
}

fn signal_recovery() -> Outcome {
    let started = Instant::now();
    let synth = SynthConfig {
        seed: 0,
        subjects: 300,
        nodes: 16,
        coupling: 0.7,
        noise_std: 2.0,
        ..Default::default()
    };
    let cohort = generate_cohort(&synth).map_err(|e| e.to_string())?;
    let config = TrainConfig::default();
    let pinned = config.model.heads == 4
        && config.batch_size == 16
        && config.optimizer.learning_rate == 1e-4
        && config.model.hidden == 64
        && config.model.dropout == 0.2
        && config.epochs == 50
        && config.loss.sf == 0.3
        && config.loss.task == 0.7
        && config.folds == 5;
    check(pinned, || "default hyperparameters drifted".into())?;
    let report = run_cv(&cohort.records, &config).map_err(|e| e.to_string())?;
    let corr = report.metrics.aggregate.correlation.as_ref().map(|c| c.mean);
    let mut lines = Vec::new();
    for f in &report.folds {
        lines.push(format!(
            "fold {} mse {:.2} vs {:.2}",
            f.fold, f.metrics.mse, f.baselines.constant.mse
        ));
    }
    for f in &report.folds {
        check(f.metrics.mse < f.baselines.constant.mse, || {
            format!("fold {} mse {} not below constant {}", f.fold, f.metrics.mse, f.baselines.constant.mse)
        })?;
    }
    let corr = corr.ok_or("correlation undefined")?;
    check(corr >= 0.5, || format!("mean correlation {corr:.3} < 0.5; {}", lines.join(", ")))?;
    within(started.elapsed(), 900.0)?;
    Ok(format!("mean correlation {corr:.3}; {}", lines.join(", ")))
}

fn magnet(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_magnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("magnet {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read_json(p: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// Small cohort plus a short training config, written under `root`.
fn small_setup(root: &Path) -> Result<(), String> {
    std::fs::write(root.join("synth.json"), r#"{"seed": 11, "subjects": 40, "nodes": 10}"#).map_err(|e| e.to_string())?;
    std::fs::write(
        root.join("train.json"),
        r#"{"epochs": 3, "folds": 3, "batch_size": 8, "model": {"hidden": 16, "heads": 2}, "graph": {"k": 3, "gamma": 3}}"#,
    )
    .map_err(|e| e.to_string())?;
    magnet(&["gen-data", "--config", s(&root.join("synth.json")), "--out", s(&root.join("cohort"))])?;
    Ok(())
}

fn mean_corr(report: &serde_json::Value) -> String {
    match report["metrics"]["aggregate"]["correlation"]["mean"].as_f64() {
        Some(c) => format!("{c:.3}"),
        None => "undefined".into(),
    }
}

fn ablation_mechanics() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    small_setup(root)?;
    let cohort = root.join("cohort");
    let cfg = root.join("train.json");
    let detours = ["detour_short", "detour_medium", "detour_long"];
    let runs: [(&str, &[&str]); 5] = [
        ("full", &[]),
        ("--no-mdc", &detours),
        ("--no-cmc", &["cross_modal"]),
        ("--no-sf-loss", &[]),
        ("--fnc-only", &["structural", "cross_modal", "detour_short", "detour_medium", "detour_long"]),
    ];
    let mut summary = Vec::new();
    for (flag, absent) in runs {
        let out = root.join(flag.trim_start_matches('-'));
        let mut args = vec!["train", "--cohort", s(&cohort), "--config", s(&cfg), "--out", s(&out), "--no-final-model"];
        if flag != "full" {
            args.push(flag);
        }
        magnet(&args)?;
        let report = read_json(&out.join("run_report.json"))?;
        let counts = &report["audit"]["edge_counts"];
        for kind in absent {
            let c = counts[*kind].as_u64().ok_or_else(|| format!("{flag}: no count for {kind}"))?;
            check(c == 0, || format!("{flag}: {kind} has {c} edges"))?;
        }
        check(counts["functional"].as_u64().unwrap_or(0) > 0, || format!("{flag}: no functional edges"))?;
        let sf_active = report["audit"]["sf_loss_active"].as_bool().ok_or("missing sf_loss_active")?;
        check(sf_active == (flag != "--no-sf-loss"), || format!("{flag}: sf_loss_active = {sf_active}"))?;
        if flag == "full" {
            for kind in EdgeKind::ALL {
                let name = serde_json::to_value(kind).unwrap();
                let name = name.as_str().unwrap();
                if name != "detour_long" {
                    check(counts[name].as_u64().unwrap_or(0) > 0, || format!("full run has no {name} edges"))?;
                }
            }
        }
        summary.push(format!("{flag} r={}", mean_corr(&report)));
    }
    Ok(summary.join(", "))
}

fn end_to_end(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    small_setup(root)?;
    let cohort = root.join("cohort");
    let run = root.join("run");
    magnet(&["train", "--cohort", s(&cohort), "--config", s(&root.join("train.json")), "--out", s(&run)])?;
    let top = root.join("top.json");
    magnet(&["explain", "--checkpoint", s(&run.join("model.json")), "--cohort", s(&cohort), "--out", s(&top)])?;
    let report = std::fs::read(run.join("run_report.json")).map_err(|e| e.to_string())?;
    let explanation = std::fs::read(&top).map_err(|e| e.to_string())?;
    Ok((report, explanation))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ra, ea) = end_to_end(a.path())?;
    let (rb, eb) = end_to_end(b.path())?;
    check(ra == rb, || "run reports differ".into())?;
    check(ea == eb, || "explanations differ".into())?;
    Ok(format!("report {} bytes, explanation {} bytes identical", ra.len(), ea.len()))
}

fn explanation_plumbing() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    small_setup(root)?;
    let cohort = root.join("cohort");
    let run = root.join("run");
    magnet(&["train", "--cohort", s(&cohort), "--config", s(&root.join("train.json")), "--out", s(&run)])?;
    let top = root.join("top.json");
    magnet(&[
        "explain", "--checkpoint", s(&run.join("model.json")), "--cohort", s(&cohort), "--fraction", "0.03", "--out",
        s(&top),
    ])?;
    let e = read_json(&top)?;
    let total = e["total_connections"].as_u64().ok_or("missing total_connections")?;
    let rows = e["connections"].as_array().ok_or("missing connections")?;
    let want = (0.03 * total as f64).ceil() as usize;
    check(rows.len() == want, || format!("{} connections, expected {want} of {total}", rows.len()))?;
    let mut previous = f64::INFINITY;
    for row in rows {
        serde_json::from_value::<EdgeKind>(row["kind"].clone()).map_err(|_| format!("bad kind {}", row["kind"]))?;
        let w = row["mean_weight"].as_f64().ok_or("missing weight")?;
        check(w > 0.0 && w <= 1.0, || format!("weight {w} outside (0, 1]"))?;
        check(w <= previous, || "connections not ranked".into())?;
        previous = w;
        check(row["i"].as_u64() < row["j"].as_u64(), || format!("pair {} {} not ordered", row["i"], row["j"]))?;
    }
    Ok(format!("{} of {total} connections", rows.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("detour oracle equivalence", detour_oracle),
        ("gradient correctness", gradient_check),
        ("attention normalization", attention_normalization),
        ("permutation invariance", permutation_invariance),
        ("consistency loss exactness", consistency_exactness),
        ("synthetic signal recovery", signal_recovery),
        ("ablation mechanics", ablation_mechanics),
        ("determinism", determinism),
        ("explanation plumbing", explanation_plumbing),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let n = n + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {n} {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {n} {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
