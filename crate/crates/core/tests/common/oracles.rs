//! Independent plain-loop implementations and the random-instance drivers
//! that compare them with the library.

#![allow(clippy::needless_range_loop)]

use klink_core::alignment::{edge_loss, label_level_loss, sensor_level_loss};
use klink_core::numeric::{Graph, Tensor};
use klink_core::signal::{construct_graph, mpnn_forward, window_edges};
use klink_core::train::metrics;
use klink_core::Similarity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Matrix) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn similarity(a: &[f64], b: &[f64], sim: Similarity) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    match sim {
        Similarity::Dot => dot,
        Similarity::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        }
    }
}

/// `mean_a [ -log( exp(s_aa) / sum_{b != a} exp(s_ab) ) ]`, term by term.
pub fn brute_contrastive(signal: &Matrix, knowledge: &Matrix, tau: f64, sim: Similarity) -> f64 {
    let n = signal.len();
    let mut total = 0.0;
    for a in 0..n {
        let positive = (similarity(&signal[a], &knowledge[a], sim) / tau).exp();
        let negatives: f64 = (0..n)
            .filter(|&b| b != a)
            .map(|b| (similarity(&signal[a], &knowledge[b], sim) / tau).exp())
            .sum();
        total += -(positive / negatives).ln();
    }
    total / n as f64
}

pub fn brute_edge_loss(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (a[i][j] - b[i][j]).powi(2);
        }
    }
    total / (n * n) as f64
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Largest absolute deviation per loss (sensor-level, label-level, edge)
/// over `instances` random problems with at most 12 nodes and batches of at
/// most 6.
pub fn loss_oracle_errors(instances: usize, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for k in 0..instances {
        let sim = if k % 2 == 0 { Similarity::Dot } else { Similarity::Cosine };
        let tau = rng.random_range(0.05..1.0);

        let n = rng.random_range(1..=6);
        let patches = rng.random_range(1..=12 / n).max(if n == 1 { 2 } else { 1 });
        let nodes = n * patches;
        let d = rng.random_range(1..=5);
        let z = random_matrix(&mut rng, nodes, d, 1.0);
        let kp = random_matrix(&mut rng, nodes, d, 1.0);
        let w_m = random_matrix(&mut rng, d, d, 1.0);
        let mut g = Graph::new();
        let (zv, kv, wv) = (
            g.constant(to_tensor(&z)).unwrap(),
            g.constant(to_tensor(&kp)).unwrap(),
            g.constant(to_tensor(&w_m)).unwrap(),
        );
        let l = sensor_level_loss(&mut g, zv, kv, wv, tau, sim).unwrap();
        let expected = brute_contrastive(&matmul(&z, &w_m), &kp, tau, sim);
        worst[0] = worst[0].max((g.value(l).item() - expected).abs());

        let batch = rng.random_range(2..=6);
        let width = rng.random_range(1..=8);
        let gs = random_matrix(&mut rng, batch, width, 1.0);
        let gk = random_matrix(&mut rng, batch, width, 1.0);
        let (sv, kv) = (g.constant(to_tensor(&gs)).unwrap(), g.constant(to_tensor(&gk)).unwrap());
        let l = label_level_loss(&mut g, sv, kv, tau, sim).unwrap();
        worst[1] = worst[1].max((g.value(l).item() - brute_contrastive(&gs, &gk, tau, sim)).abs());

        let es = random_stochastic(&mut rng, nodes);
        let ek = random_stochastic(&mut rng, nodes);
        let (sv, kv) = (g.constant(to_tensor(&es)).unwrap(), g.constant(to_tensor(&ek)).unwrap());
        let l = edge_loss(&mut g, sv, kv).unwrap();
        worst[2] = worst[2].max((g.value(l).item() - brute_edge_loss(&es, &ek)).abs());
    }
    worst
}

/// Library value minus closed form for each analytic fixed point.
pub fn fixed_point_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let eye = |d: usize| {
        let mut m = vec![vec![0.0; d]; d];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        to_tensor(&m)
    };
    for (n, patches) in [(3usize, 2usize), (6, 2), (14, 10)] {
        let nodes = n * patches;
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[nodes, 4], 0.25)).unwrap();
        let w = g.constant(eye(4)).unwrap();
        let l = sensor_level_loss(&mut g, z, z, w, 0.1, Similarity::Dot).unwrap();
        out.push((
            format!("sensor-level uniform, {nodes} nodes"),
            g.value(l).item() - ((nodes - 1) as f64).ln(),
        ));
    }
    for batch in [2usize, 6, 300] {
        let mut g = Graph::new();
        let r = g.constant(Tensor::full(&[batch, 7], -0.1)).unwrap();
        let l = label_level_loss(&mut g, r, r, 0.1, Similarity::Cosine).unwrap();
        out.push((
            format!("label-level uniform, batch {batch}"),
            g.value(l).item() - ((batch - 1) as f64).ln(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for nodes in [2usize, 12, 140] {
        let e = random_stochastic(&mut rng, nodes);
        let mut g = Graph::new();
        let a = g.constant(to_tensor(&e)).unwrap();
        let b = g.constant(to_tensor(&e)).unwrap();
        let l = edge_loss(&mut g, a, b).unwrap();
        out.push((format!("edge loss of identical {nodes}x{nodes}"), g.value(l).item()));
    }
    out
}

fn softmax_rows(m: &Matrix) -> Matrix {
    m.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn transpose(m: &Matrix) -> Matrix {
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Windowed message passing written out directly: every window renormalizes
/// its own edge block, and a node's update is the mean over the windows that
/// contain it.
pub fn brute_mpnn(z: &Matrix, e: &Matrix, n: usize, window: usize, w_g: &Matrix, b_g: &[f64]) -> Matrix {
    let nodes = z.len();
    let d = z[0].len();
    let patches = nodes / n;
    let mut sum = vec![vec![0.0; d]; nodes];
    let mut count = vec![0usize; nodes];
    for w in 0..=patches - window {
        let members: Vec<usize> = (w * n..(w + window) * n).collect();
        for &i in &members {
            let norm: f64 = members.iter().map(|&j| e[i][j]).sum();
            let mut h = vec![0.0; d];
            for &j in &members {
                for k in 0..d {
                    h[k] += e[i][j] / norm * z[j][k];
                }
            }
            for c in 0..d {
                let v: f64 = (0..d).map(|k| h[k] * w_g[k][c]).sum::<f64>() + b_g[c];
                sum[i][c] += v.max(0.0);
            }
            count[i] += 1;
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(row, c)| row.into_iter().map(|v| v / c as f64).collect())
        .collect()
}

#[derive(Debug, Default)]
pub struct GraphInvariantReport {
    /// Largest `|row sum - 1|` of the global edge matrices.
    pub global_row_sum: f64,
    /// Largest `|row sum - 1|` of the per-window renormalized blocks.
    pub window_row_sum: f64,
    /// Largest gap between the library edges and softmax of `Z W (Z W)^T`.
    pub edges_vs_brute: f64,
    /// Largest gap between windowed message passing and the direct version.
    pub mpnn_vs_brute: f64,
    /// Largest gap between a single full-length window and one whole-graph pass.
    pub full_window_vs_whole_graph: f64,
}

/// Builds edges and runs message passing on `configs` random
/// `(sensors, patches, d_h, window)` configurations.
pub fn graph_invariants(configs: usize, seed: u64) -> GraphInvariantReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = GraphInvariantReport::default();
    for _ in 0..configs {
        let n = rng.random_range(1..=5);
        let patches = rng.random_range(1..=6);
        let d = rng.random_range(1..=6);
        let window = rng.random_range(1..=patches);
        let nodes = n * patches;
        let z = random_matrix(&mut rng, nodes, d, 1.5);
        let w_s = random_matrix(&mut rng, d, d, 1.0);
        let w_g = random_matrix(&mut rng, d, d, 1.0);
        let b_g: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();

        let mut g = Graph::new();
        let zv = g.constant(to_tensor(&z)).unwrap();
        let wv = g.constant(to_tensor(&w_s)).unwrap();
        let ev = construct_graph(&mut g, zv, wv).unwrap();
        let e = g.value(ev).clone();
        for i in 0..nodes {
            r.global_row_sum = r.global_row_sum.max((e.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let projected = matmul(&z, &w_s);
        let expected = softmax_rows(&matmul(&projected, &transpose(&projected)));
        for i in 0..nodes {
            for j in 0..nodes {
                r.edges_vs_brute = r.edges_vs_brute.max((e.get2(i, j) - expected[i][j]).abs());
            }
        }
        for block in window_edges(&mut g, ev, n, window).unwrap() {
            let b = g.value(block);
            for i in 0..b.rows() {
                r.window_row_sum = r.window_row_sum.max((b.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }

        let gv = g.constant(to_tensor(&w_g)).unwrap();
        let bv = g.constant(Tensor::vector(b_g.clone())).unwrap();
        let e_rows: Matrix = (0..nodes).map(|i| e.row(i).to_vec()).collect();
        let out = mpnn_forward(&mut g, zv, ev, n, window, gv, bv).unwrap();
        let brute = brute_mpnn(&z, &e_rows, n, window, &w_g, &b_g);
        let got = g.value(out);
        for i in 0..nodes {
            for c in 0..d {
                r.mpnn_vs_brute = r.mpnn_vs_brute.max((got.get2(i, c) - brute[i][c]).abs());
            }
        }

        let full = mpnn_forward(&mut g, zv, ev, n, patches, gv, bv).unwrap();
        let h = g.matmul(ev, zv).unwrap();
        let lin = g.matmul(h, gv).unwrap();
        let lin = g.add_bias(lin, bv).unwrap();
        let whole = g.relu(lin).unwrap();
        r.full_window_vs_whole_graph = r
            .full_window_vs_whole_graph
            .max(g.value(full).max_abs_diff(g.value(whole)));
    }
    r
}

/// F1 per class from a confusion matrix, averaged over the classes that
/// appear anywhere.
pub fn brute_macro_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().unwrap() + 1;
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let mut scores = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if predicted == 0 && actual == 0 {
            continue;
        }
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        scores.push(if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        });
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn brute_score(pred: &[f64], truth: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        total += if d >= 0.0 { (d / 10.0).exp() - 1.0 } else { (-d / 13.0).exp() - 1.0 };
    }
    total / pred.len() as f64
}

/// Largest deviation per metric (RMSE, score, accuracy, macro-F1) over
/// `pairs` random prediction/label sets.
pub fn metric_oracle_errors(pairs: usize, seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..pairs {
        let len = rng.random_range(1..=60);
        let truth: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..125.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-40.0..40.0)).collect();
        let mut sq = 0.0;
        for (p, t) in pred.iter().zip(&truth) {
            sq += (p - t) * (p - t);
        }
        let rmse = (sq / len as f64).sqrt();
        worst[0] = worst[0].max((metrics::rmse(&pred, &truth).unwrap() - rmse).abs());
        worst[1] = worst[1].max((metrics::score(&pred, &truth).unwrap() - brute_score(&pred, &truth)).abs());

        let classes = rng.random_range(2..=6);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let guesses: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..classes) })
            .collect();
        let hits = guesses.iter().zip(&labels).filter(|(a, b)| a == b).count();
        worst[2] = worst[2].max((metrics::accuracy(&guesses, &labels).unwrap() - hits as f64 / len as f64).abs());
        worst[3] = worst[3].max((metrics::macro_f1(&guesses, &labels).unwrap() - brute_macro_f1(&guesses, &labels)).abs());
    }
    worst
}

/// Library score of a single late (+10) and early (-10) prediction.
pub fn score_branch_values() -> (f64, f64) {
    (
        metrics::score(&[10.0], &[0.0]).unwrap(),
        metrics::score(&[0.0], &[10.0]).unwrap(),
    )
}
