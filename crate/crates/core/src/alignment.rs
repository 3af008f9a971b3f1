//! Graph alignment objectives: sensor-level and label-level contrastive
//! losses, edge alignment, and the combined training objective.
//!
//! Both contrastive losses use a denominator over the negatives only (the
//! positive pair is excluded), so unlike the usual InfoNCE they can become
//! negative once the positive similarity dominates every negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};

pub const W_M_ALIGN: &str = "align.w_m";
pub const W_R_ALIGN: &str = "align.w_r";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

/// Temperature and term weights of the combined objective.
///
/// `Σ_a` terms are batch sums, so the optimal `lambda_s` and `lambda_e` scale
/// inversely with the batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub lambda_e: f64,
    pub similarity: Similarity,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 0.1,
            lambda_s: 1e-4,
            lambda_l: 1e-2,
            lambda_e: 1e-3,
            similarity: Similarity::Dot,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if [self.lambda_s, self.lambda_l, self.lambda_e]
            .iter()
            .any(|l| l.is_nan() || *l < 0.0)
        {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn uses_knowledge(&self) -> bool {
        self.lambda_s > 0.0 || self.lambda_l > 0.0 || self.lambda_e > 0.0
    }
}

/// `mean_i [ log sum_{j != i} exp(s_ij) - s_ii ]` of a square score matrix.
pub fn contrastive_from_scores(g: &mut Graph, scores: Var) -> Result<Var> {
    let pos = g.diag(scores)?;
    let neg = g.off_diag_logsumexp(scores)?;
    let diff = g.sub(neg, pos)?;
    g.mean(diff)
}

fn similarity_matrix(g: &mut Graph, a: Var, b: Var, tau: f64, sim: Similarity) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (a, b) = match sim {
        Similarity::Dot => (a, b),
        Similarity::Cosine => (g.l2_normalize_rows(a)?, g.l2_normalize_rows(b)?),
    };
    let bt = g.transpose(b)?;
    let s = g.matmul(a, bt)?;
    g.scale(s, 1.0 / tau)
}

/// Sensor-level alignment of one sample: node `i` of the signal graph
/// (projected by `w_m`) against node `i` of the knowledge graph, with every
/// other knowledge node as a negative.
pub fn sensor_level_loss(
    g: &mut Graph,
    signal_nodes: Var,
    knowledge_sensor_part: Var,
    w_m: Var,
    tau: f64,
    sim: Similarity,
) -> Result<Var> {
    if g.shape(signal_nodes) != g.shape(knowledge_sensor_part) {
        return Err(Error::shape(
            "sensor_level_loss",
            &[g.shape(signal_nodes), g.shape(knowledge_sensor_part)],
        ));
    }
    let projected = g.matmul(signal_nodes, w_m)?;
    let scores = similarity_matrix(g, projected, knowledge_sensor_part, tau, sim)?;
    contrastive_from_scores(g, scores)
}

/// Label-level alignment over a batch of readouts (`[batch, width]` each):
/// sample `a`'s signal readout against its own knowledge readout, with the
/// other samples' knowledge readouts as negatives.
pub fn label_level_loss(
    g: &mut Graph,
    signal_readouts: Var,
    knowledge_readouts: Var,
    tau: f64,
    sim: Similarity,
) -> Result<Var> {
    let (ss, ks) = (g.shape(signal_readouts), g.shape(knowledge_readouts));
    if ss != ks || ss.len() != 2 {
        return Err(Error::shape("label_level_loss", &[ss, ks]));
    }
    if ss[0] < 2 {
        return Err(Error::invalid("label-level alignment needs a batch of at least 2"));
    }
    let scores = similarity_matrix(g, signal_readouts, knowledge_readouts, tau, sim)?;
    contrastive_from_scores(g, scores)
}

/// `sum_ij (e^S_ij - e^K_ij)^2 / nodes^2`
pub fn edge_loss(g: &mut Graph, signal_edges: Var, knowledge_edges: Var) -> Result<Var> {
    g.mse(signal_edges, knowledge_edges)
}

/// `L_D + λ_S Σ_a L_{a,S} + λ_L L_L + λ_E Σ_a L_{a,E}`. Terms whose weight is
/// zero are left out of the graph entirely.
pub fn combined_loss(
    g: &mut Graph,
    downstream: Var,
    sensor: &[Var],
    label: Option<Var>,
    edge: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = downstream;
    let add_weighted = |g: &mut Graph, total: &mut Var, terms: &[Var], lambda: f64| -> Result<()> {
        if lambda == 0.0 || terms.is_empty() {
            return Ok(());
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = g.add(sum, t)?;
        }
        let weighted = g.scale(sum, lambda)?;
        *total = g.add(*total, weighted)?;
        Ok(())
    };
    add_weighted(g, &mut total, sensor, weights.lambda_s)?;
    if let Some(l) = label {
        add_weighted(g, &mut total, &[l], weights.lambda_l)?;
    }
    add_weighted(g, &mut total, edge, weights.lambda_e)?;
    Ok(total)
}
