mod common;

use common::oracles::{fixed_point_errors, graph_invariants, loss_oracle_errors, metric_oracle_errors, score_branch_values};

#[test]
fn losses_match_brute_force() {
    let [sensor, label, edge] = loss_oracle_errors(50, 2024);
    assert!(sensor < 1e-10, "sensor-level {sensor:e}");
    assert!(label < 1e-10, "label-level {label:e}");
    assert!(edge < 1e-10, "edge {edge:e}");
}

#[test]
fn analytic_fixed_points() {
    for (name, err) in fixed_point_errors() {
        assert!(err.abs() < 1e-9, "{name}: {err:e}");
    }
    assert!((139f64.ln() - 4.9345).abs() < 1e-4);
}

#[test]
fn graph_rows_are_stochastic_and_windows_reduce_to_whole_graph() {
    let r = graph_invariants(100, 99);
    assert!(r.global_row_sum < 1e-6, "{r:?}");
    assert!(r.window_row_sum < 1e-6, "{r:?}");
    assert!(r.edges_vs_brute < 1e-12, "{r:?}");
    assert!(r.mpnn_vs_brute < 1e-12, "{r:?}");
    assert!(r.full_window_vs_whole_graph < 1e-12, "{r:?}");
}

#[test]
fn metrics_match_brute_force() {
    let worst = metric_oracle_errors(20, 31);
    for (name, err) in ["rmse", "score", "accuracy", "mf1"].iter().zip(worst) {
        assert!(err < 1e-12, "{name}: {err:e}");
    }
    let (late, early) = score_branch_values();
    assert_eq!(late, 1f64.exp() - 1.0);
    assert_eq!(early, (10.0f64 / 13.0).exp() - 1.0);
    assert!((late - 1.7183).abs() < 1e-4);
}
