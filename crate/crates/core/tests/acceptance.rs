//! Acceptance suite: prints one PASS, FAIL or SKIP line per criterion and
//! exits nonzero if any criterion fails.
//!
//! The C-MAPSS check runs only when `KLINK_CMAPSS_DIR` points at a directory
//! holding `train_FD002.txt`, `test_FD002.txt` and `RUL_FD002.txt`.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::oracles::{fixed_point_errors, graph_invariants, loss_oracle_errors, metric_oracle_errors, score_branch_values};
use common::{synthetic_config, synthetic_data, synthetic_embedder};
use klink_core::dataset::{load_cmapss, CmapssFiles, CmapssPreparation, SyntheticSpec};
use klink_core::train::{
    best_sweep_index, combined_loss_gradcheck, evaluate, sweep_lambda, train, within_group_edge_mass, GradcheckSetup,
    LambdaTerm, Metrics, TrainConfig, TrainData, Variant, SWEEP_VALUES,
};
use klink_core::{Embedder, Task};

const FD002_CONFIG: &str = include_str!("../../../configs/fd002.toml");

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    name: &'static str,
    verdict: Verdict,
    detail: String,
}

fn judged(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        name,
        verdict: if passed { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_suite() -> Outcome {
    let setup = GradcheckSetup::default();
    let start = Instant::now();
    let report = combined_loss_gradcheck(&setup).expect("gradient check runs");
    let elapsed = start.elapsed();
    let worst = report
        .worst
        .as_ref()
        .map_or_else(String::new, |(name, i)| format!(" at {name}[{i}]"));
    judged(
        "gradient suite",
        report.passed && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {:.2e}{worst} (< {:e}), {} entries, {} unresolved kinks, {:.1} s (< 60 s)",
            report.max_rel_error,
            setup.tolerance,
            report.checked,
            report.kinks,
            secs(elapsed)
        ),
    )
}

fn loss_oracles() -> Outcome {
    let [sensor, label, edge] = loss_oracle_errors(50, 2024);
    judged(
        "loss oracles",
        sensor < 1e-10 && label < 1e-10 && edge < 1e-10,
        format!("50 instances, max |diff| sensor {sensor:.1e}, label {label:.1e}, edge {edge:.1e} (< 1e-10)"),
    )
}

fn analytic_fixed_points() -> Outcome {
    let errors = fixed_point_errors();
    let worst = errors
        .iter()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("fixed points");
    judged(
        "analytic fixed points",
        errors.iter().all(|(_, e)| e.abs() < 1e-9),
        format!("{} cases, worst {:.1e} ({}) (< 1e-9)", errors.len(), worst.1.abs(), worst.0),
    )
}

fn graph_invariant_check() -> Outcome {
    let r = graph_invariants(100, 99);
    judged(
        "graph invariants",
        r.global_row_sum < 1e-6
            && r.window_row_sum < 1e-6
            && r.full_window_vs_whole_graph < 1e-12
            && r.mpnn_vs_brute < 1e-12,
        format!(
            "100 configs, row-sum dev global {:.1e} window {:.1e} (< 1e-6), full window vs whole graph {:.1e} (< 1e-12)",
            r.global_row_sum, r.window_row_sum, r.full_window_vs_whole_graph
        ),
    )
}

fn metric_oracles() -> Outcome {
    let worst = metric_oracle_errors(20, 31);
    let (late, early) = score_branch_values();
    let exact = late == 1f64.exp() - 1.0 && early == (10.0f64 / 13.0).exp() - 1.0;
    judged(
        "metric oracles",
        worst.iter().all(|e| *e < 1e-12) && exact,
        format!(
            "20 pairs, max |diff| rmse {:.1e} score {:.1e} acc {:.1e} mf1 {:.1e}; score(+10) = {late:.6}, score(-10) = {early:.6}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn accuracy(m: Metrics) -> f64 {
    match m {
        Metrics::Classification { accuracy, .. } => accuracy,
        Metrics::Regression { .. } => panic!("synthetic corpus is a classification task"),
    }
}

fn directional_replication() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let config = synthetic_config();
    let (corpus, data) = synthetic_data(&spec);
    let embedder = synthetic_embedder(&config, &corpus, spec.length);
    let exp = config.experiment();
    let mut summary = Vec::new();
    for variant in [Variant::Full, Variant::NoKnowledge] {
        let e = exp.with_variant(variant);
        let (mut acc, mut mass) = (0.0, 0.0);
        for &seed in &config.train.seeds {
            let out = train(&e, &data, Some(&embedder), seed).expect("training runs");
            acc += accuracy(evaluate(&out.model, &data.split.test, e.settings.precision).unwrap().metrics);
            mass += within_group_edge_mass(&out.model, &data.split.test, &corpus.group_of).unwrap();
        }
        let runs = config.train.seeds.len() as f64;
        summary.push((acc / runs, mass / runs));
    }
    let elapsed = start.elapsed();
    let ((acc_full, mass_full), (acc_base, mass_base)) = (summary[0], summary[1]);
    judged(
        "directional knowledge transfer",
        acc_full >= acc_base && mass_full > mass_base && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{} seeds, accuracy full {acc_full:.4} vs no_knowledge {acc_base:.4}, within-group edge mass {mass_full:.4} vs {mass_base:.4}, {:.0} s (< 900 s)",
            config.train.seeds.len(),
            secs(elapsed)
        ),
    )
}

fn sweep_shape() -> Outcome {
    let spec = SyntheticSpec::default();
    let config = synthetic_config();
    let (corpus, data) = synthetic_data(&spec);
    let embedder = synthetic_embedder(&config, &corpus, spec.length);
    let seeds = &config.train.seeds;
    let points = sweep_lambda(
        &config.experiment(),
        &data,
        Some(&embedder),
        LambdaTerm::Sensor,
        &SWEEP_VALUES,
        seeds,
    )
    .expect("sweep runs");
    let best: Vec<usize> = (0..seeds.len())
        .map(|run| best_sweep_index(&points, run).expect("every point has every run"))
        .collect();
    let interior = best.iter().filter(|&&k| k != 0 && k != SWEEP_VALUES.len() - 1).count();
    let values: Vec<String> = best.iter().map(|&k| format!("{:e}", SWEEP_VALUES[k])).collect();
    judged(
        "loss-weight sweep shape",
        interior >= 3,
        format!(
            "best sensor-level weight per seed [{}], interior on {interior}/{} seeds (>= 3)",
            values.join(", "),
            seeds.len()
        ),
    )
}

fn fd002_rmse() -> Outcome {
    let name = "FD002 test RMSE";
    let Some(dir) = std::env::var_os("KLINK_CMAPSS_DIR").map(PathBuf::from) else {
        return Outcome {
            name,
            verdict: Verdict::Skip,
            detail: "KLINK_CMAPSS_DIR not set".into(),
        };
    };
    let config = TrainConfig::from_toml(FD002_CONFIG).expect("configs/fd002.toml parses");
    let (split, _) = load_cmapss(&CmapssFiles::in_dir(&dir, "FD002"), &CmapssPreparation::default())
        .expect("C-MAPSS FD002 loads");
    let (split, _) = split.normalized().unwrap();
    let data = TrainData {
        split,
        task: Task::Regression,
        category: "remaining useful life".into(),
    };
    let embedder = Embedder::fallback(config.knowledge.fallback_seed.unwrap_or(0), config.knowledge.dim);
    let exp = config.experiment();
    let start = Instant::now();
    let out = train(&exp, &data, Some(&embedder), config.train.seed).expect("training runs");
    let eval = evaluate(&out.model, &data.split.test, exp.settings.precision).unwrap();
    let Metrics::Regression { rmse, score } = eval.metrics else {
        panic!("FD002 is a regression task");
    };
    judged(
        name,
        rmse <= 16.0,
        format!("rmse {rmse:.2} (<= 16), score {score:.1}, {:.0} s", secs(start.elapsed())),
    )
}

fn main() -> ExitCode {
    let checks: [fn() -> Outcome; 8] = [
        gradient_suite,
        loss_oracles,
        analytic_fixed_points,
        graph_invariant_check,
        metric_oracles,
        directional_replication,
        sweep_shape,
        fd002_rmse,
    ];
    let mut failed = 0;
    for check in checks {
        let o = check();
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag}  {}: {}", o.name, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
