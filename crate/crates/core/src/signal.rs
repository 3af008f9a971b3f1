//! Signal branch: per-sensor patch encoder, spatio-temporal graph
//! construction, windowed message passing and the downstream head.
//!
//! Node `t * n + i` is sensor `i` at patch `t` (both 0-based).

use serde::{Deserialize, Serialize};

use crate::dataset::MtsSample;
use crate::error::{Error, Result};
use crate::numeric::{BoundParams, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    /// Channel counts through the CNN blocks, starting at 1.
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub hidden_dim: usize,
    pub patch_size: usize,
    /// Moving-window size in patches.
    pub window: usize,
    /// Hidden widths of the downstream head; the input width is derived and
    /// the output width comes from the task.
    #[serde(default)]
    pub head_hidden: Vec<usize>,
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.first() != Some(&1) || self.block_channels.len() < 2 {
            return Err(Error::invalid(format!(
                "block_channels must start at 1 and name at least one block: {:?}",
                self.block_channels
            )));
        }
        if self.block_channels.iter().chain(&self.head_hidden).any(|&c| c == 0)
            || self.kernel == 0
            || self.hidden_dim == 0
            || self.window == 0
        {
            return Err(Error::invalid("all widths, kernel and window must be positive"));
        }
        self.encoded_length().map(|_| ())
    }

    pub fn blocks(&self) -> usize {
        self.block_channels.len() - 1
    }

    /// Length of a patch after every block halves it.
    pub fn encoded_length(&self) -> Result<usize> {
        let mut len = self.patch_size;
        for block in 0..self.blocks() {
            len /= 2;
            if len == 0 {
                return Err(Error::PoolingUnderflow {
                    block,
                    len: self.patch_size,
                });
            }
        }
        Ok(len)
    }

    /// Number of pooled temporal rows per sensor: `floor(patches / window)`.
    pub fn pooled_rows(&self, patch_count: usize) -> usize {
        patch_count / self.window
    }

    /// Full head widths, input to output.
    pub fn head_widths(&self, n: usize, patch_count: usize, outputs: usize) -> Vec<usize> {
        let mut w = vec![n * self.pooled_rows(patch_count) * self.hidden_dim];
        w.extend(&self.head_hidden);
        w.push(outputs);
        w
    }
}

/// Running batch-norm statistics of one encoder block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update; the stored variance is the unbiased batch variance.
    pub fn update(&mut self, mean: &[f64], biased_var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * biased_var[c] * unbias;
        }
    }
}

pub enum NormMode<'a> {
    /// Batch statistics (training).
    Batch,
    /// Frozen running statistics, one per block.
    Running(&'a [RunningStats]),
}

pub fn conv_w(block: usize) -> String {
    format!("enc.block{block}.conv.w")
}
pub fn bn_gamma(block: usize) -> String {
    format!("enc.block{block}.bn.gamma")
}
pub fn bn_beta(block: usize) -> String {
    format!("enc.block{block}.bn.beta")
}
pub const ENC_PROJ_W: &str = "enc.proj.w";
pub const ENC_PROJ_B: &str = "enc.proj.b";
pub const W_S: &str = "graph.w_s";
pub const W_G: &str = "mpnn.w_g";
pub const B_G: &str = "mpnn.b_g";
pub fn head_w(layer: usize) -> String {
    format!("head.{layer}.w")
}
pub fn head_b(layer: usize) -> String {
    format!("head.{layer}.b")
}

/// Stacks every (sample, patch, sensor) slice into `[batch * nodes, 1, f]`.
pub fn patch_slices(samples: &[&MtsSample], patch_size: usize) -> Result<Tensor> {
    let mut values = Vec::new();
    let mut rows = 0;
    for s in samples {
        let patches = s.partition(patch_size)?;
        for t in 0..patches.patch_count() {
            for i in 0..s.n {
                values.extend_from_slice(patches.slice(t, i));
                rows += 1;
            }
        }
    }
    Tensor::new(vec![rows, 1, patch_size], values)
}

/// Encoder output per slice, `[slices, d_h]`, and the batch-norm nodes.
pub struct Encoded {
    pub features: Var,
    pub norm_nodes: Vec<Var>,
}

/// Runs every sensor-patch slice through the shared CNN blocks
/// (conv, batch norm, max pool, relu) and the affine map to `d_h`.
pub fn encode_sensors(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &SignalConfig,
    slices: Var,
    mode: &NormMode<'_>,
) -> Result<Encoded> {
    let mut x = slices;
    let mut norm_nodes = Vec::with_capacity(cfg.blocks());
    for block in 0..cfg.blocks() {
        if g.shape(x)[2] < 2 {
            return Err(Error::PoolingUnderflow {
                block,
                len: g.shape(x)[2],
            });
        }
        let w = p.var(&conv_w(block))?;
        // batch norm removes any per-channel offset, so the convolution has no bias
        let no_bias = g.constant(Tensor::zeros(&[g.shape(w)[0]]))?;
        let conv = g.conv1d(x, w, no_bias)?;
        let running = match mode {
            NormMode::Batch => None,
            NormMode::Running(stats) => Some((stats[block].mean.as_slice(), stats[block].var.as_slice())),
        };
        let normed = g.batch_norm(conv, p.var(&bn_gamma(block))?, p.var(&bn_beta(block))?, BN_EPS, running)?;
        norm_nodes.push(normed);
        let pooled = g.maxpool1d(normed)?;
        x = g.relu(pooled)?;
    }
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let proj = g.matmul(flat, p.var(ENC_PROJ_W)?)?;
    let features = g.add_bias(proj, p.var(ENC_PROJ_B)?)?;
    Ok(Encoded { features, norm_nodes })
}

/// Sinusoidal encoding of the patch index, repeated for every sensor of the
/// patch: `nodes x d_h`, with `sin(t w_k)` at even and `cos(t w_k)` at odd
/// columns, `w_k = 10000^(-2k / d_h)`.
pub fn positional_encoding(patch_count: usize, n: usize, d_h: usize) -> Tensor {
    let mut values = Vec::with_capacity(patch_count * n * d_h);
    for t in 0..patch_count {
        let row = patch_encoding(t, d_h);
        for _ in 0..n {
            values.extend_from_slice(&row);
        }
    }
    Tensor::from_parts(vec![patch_count * n, d_h], values)
}

pub fn patch_encoding(t: usize, d_h: usize) -> Vec<f64> {
    (0..d_h)
        .map(|j| {
            let k = (j / 2) as f64;
            let freq = 10000f64.powf(-2.0 * k / d_h as f64);
            let angle = t as f64 * freq;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `softmax_rows((Z W_s)(Z W_s)^T)`
pub fn construct_graph(g: &mut Graph, z: Var, w_s: Var) -> Result<Var> {
    let projected = g.matmul(z, w_s)?;
    let t = g.transpose(projected)?;
    let logits = g.matmul(projected, t)?;
    g.softmax_rows(logits)
}

/// Edge blocks of the moving windows (stride 1), each restricted to the
/// window's nodes and renormalized over its columns.
pub fn window_edges(g: &mut Graph, edges: Var, n: usize, window: usize) -> Result<Vec<Var>> {
    let nodes = g.shape(edges)[0];
    if n == 0 || !nodes.is_multiple_of(n) {
        return Err(Error::shape("window_edges", &[g.shape(edges), &[n]]));
    }
    let patch_count = nodes / n;
    if window == 0 || window > patch_count {
        return Err(Error::invalid(format!(
            "window {window} must lie in 1..={patch_count}"
        )));
    }
    (0..=patch_count - window)
        .map(|w| {
            let (r0, r1) = (w * n, (w + window) * n);
            let rows = g.slice_rows(edges, r0, r1)?;
            let cols_t = g.transpose(rows)?;
            let block_t = g.slice_rows(cols_t, r0, r1)?;
            let block = g.transpose(block_t)?;
            g.row_normalize(block)
        })
        .collect()
}

/// Message passing over moving windows of `window` patches (stride 1).
///
/// Inside each window the edge block is renormalized over the window's
/// columns, messages are aggregated (`h = E_w Z_w`) and updated with
/// `relu(h W_g + b_g)`. Nodes covered by several windows take the mean of
/// their per-window updates. Returns `nodes x d_h`.
pub fn mpnn_forward(
    g: &mut Graph,
    z: Var,
    edges: Var,
    n: usize,
    window: usize,
    w_g: Var,
    b_g: Var,
) -> Result<Var> {
    let nodes = g.shape(z)[0];
    let d_h = g.shape(z)[1];
    if n == 0 || !nodes.is_multiple_of(n) {
        return Err(Error::shape("mpnn_forward", &[g.shape(z), &[n]]));
    }
    let patch_count = nodes / n;
    if window == 0 || window > patch_count {
        return Err(Error::invalid(format!(
            "window {window} must lie in 1..={patch_count}"
        )));
    }
    let blocks = window_edges(g, edges, n, window)?;
    let mut acc: Option<Var> = None;
    let mut cover = vec![0usize; patch_count];
    for (w, e_w) in blocks.into_iter().enumerate() {
        let (r0, r1) = (w * n, (w + window) * n);
        let z_w = g.slice_rows(z, r0, r1)?;
        let h = g.matmul(e_w, z_w)?;
        let lin = g.matmul(h, w_g)?;
        let lin = g.add_bias(lin, b_g)?;
        let updated = g.relu(lin)?;
        let placed = g.pad_rows(updated, nodes, r0)?;
        acc = Some(match acc {
            Some(a) => g.add(a, placed)?,
            None => placed,
        });
        for c in &mut cover[w..w + window] {
            *c += 1;
        }
    }
    let acc = acc.expect("at least one window");
    if patch_count == window {
        return Ok(acc);
    }
    let mut inv = Vec::with_capacity(nodes * d_h);
    for &c in &cover {
        inv.extend(std::iter::repeat_n(1.0 / c as f64, n * d_h));
    }
    let inv = g.constant(Tensor::from_parts(vec![nodes, d_h], inv))?;
    g.mul(acc, inv)
}

/// Mean-pools consecutive, non-overlapping groups of `window` patches:
/// `(floor(patches / window) * n) x d_h`, row `p * n + i`.
pub fn temporal_pool(g: &mut Graph, x: Var, n: usize, window: usize) -> Result<Var> {
    let nodes = g.shape(x)[0];
    let pools = (nodes / n) / window;
    if pools == 0 {
        return Err(Error::invalid(format!(
            "window {window} longer than {} patches",
            nodes / n
        )));
    }
    let mut rows = Vec::with_capacity(pools);
    for p in 0..pools {
        let mut sum: Option<Var> = None;
        for m in 0..window {
            let t = p * window + m;
            let block = g.slice_rows(x, t * n, (t + 1) * n)?;
            sum = Some(match sum {
                Some(s) => g.add(s, block)?,
                None => block,
            });
        }
        let sum = sum.unwrap();
        rows.push(if window == 1 { sum } else { g.scale(sum, 1.0 / window as f64)? });
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat(&rows, 0)
    }
}

/// Concatenates each sample's pooled rows in node order and applies the head
/// (relu between layers, none after the last). Returns `[batch, outputs]`.
pub fn readout_and_head(g: &mut Graph, p: &BoundParams, pooled: &[Var], layers: usize) -> Result<Var> {
    let mut flat = Vec::with_capacity(pooled.len());
    for &v in pooled {
        let s = g.shape(v).to_vec();
        flat.push(g.reshape(v, &[1, s.iter().product()])?);
    }
    let mut x = if flat.len() == 1 { flat[0] } else { g.concat(&flat, 0)? };
    for layer in 0..layers {
        let w = p.var(&head_w(layer))?;
        if g.shape(x)[1] != g.shape(w)[0] {
            return Err(Error::shape("readout_and_head", &[g.shape(x), g.shape(w)]));
        }
        let lin = g.matmul(x, w)?;
        x = g.add_bias(lin, p.var(&head_b(layer))?)?;
        if layer + 1 < layers {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}
