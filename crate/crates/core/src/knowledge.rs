//! Prompt generation, prompt embeddings and the knowledge-link graph.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Task;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

pub const DEFAULT_EMBEDDING_DIM: usize = 512;

/// `A sensor of [name] at the [t] timestamp`, with `t` the 1-based patch index.
pub fn sensor_prompt(name: &str, t: usize) -> String {
    format!("A sensor of {name} at the {t} timestamp")
}

/// `The [category] is [label]`
pub fn label_prompt(category: &str, label: &str) -> String {
    format!("The {category} is {label}")
}

/// Text of a label inside the label-level prompt: the class name, or the
/// regression target rounded to an integer.
pub fn render_label(task: &Task, label: f64) -> Result<String> {
    match task {
        Task::Regression => Ok(format!("{}", label.round() as i64)),
        Task::Classification { class_names } => class_names
            .get(label.round() as usize)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("label {label} has no class name"))),
    }
}

/// How sensors are referred to in sensor-level prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorNaming {
    #[default]
    Names,
    /// 1-based sensor index instead of the name.
    Index,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    /// Node order: patch-major, then sensor (`t * n + i`).
    pub sensor_prompts: Vec<String>,
    pub label_prompt: String,
    pub category_phrase: String,
    pub n: usize,
    pub patch_count: usize,
}

/// Sensor-level prompts for every sensor and patch only.
pub fn sensor_prompts(sensor_names: &[String], patch_count: usize, naming: SensorNaming) -> Result<Vec<String>> {
    if sensor_names.is_empty() {
        return Err(Error::invalid("no sensor names"));
    }
    if let Some(i) = sensor_names.iter().position(|s| s.trim().is_empty()) {
        return Err(Error::invalid(format!("sensor {i} has an empty name")));
    }
    let mut out = Vec::with_capacity(patch_count * sensor_names.len());
    for t in 1..=patch_count {
        for (i, name) in sensor_names.iter().enumerate() {
            out.push(match naming {
                SensorNaming::Names => sensor_prompt(name, t),
                SensorNaming::Index => sensor_prompt(&(i + 1).to_string(), t),
            });
        }
    }
    Ok(out)
}

pub fn build_prompts(
    sensor_names: &[String],
    patch_count: usize,
    category_phrase: &str,
    label_text: &str,
    naming: SensorNaming,
) -> Result<PromptSet> {
    Ok(PromptSet {
        sensor_prompts: sensor_prompts(sensor_names, patch_count, naming)?,
        label_prompt: label_prompt(category_phrase, label_text),
        category_phrase: category_phrase.to_string(),
        n: sensor_names.len(),
        patch_count,
    })
}

/// Deterministic stand-in for a text encoder: standard normals drawn from a
/// ChaCha stream keyed by SHA-256 of `(seed, prompt)`, scaled to unit length.
pub fn fallback_embedding(prompt: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    dim: usize,
    encoder: String,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    prompt: String,
    vec: Vec<f64>,
}

/// Prompt string to embedding vector, exact-match lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub encoder: String,
    pub dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(encoder: impl Into<String>, dim: usize) -> Self {
        EmbeddingTable {
            encoder: encoder.into(),
            dim,
            entries: HashMap::new(),
        }
    }

    /// Inserts or replaces; returns true when an entry was replaced.
    pub fn insert(&mut self, prompt: String, vec: Vec<f64>) -> bool {
        debug_assert_eq!(vec.len(), self.dim);
        self.entries.insert(prompt, vec).is_some()
    }

    pub fn lookup(&self, prompt: &str) -> Option<&[f64]> {
        self.entries.get(prompt).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a table file. Returns the table and one warning per duplicate
    /// prompt (the last occurrence wins).
    pub fn read(path: &Path) -> Result<(Self, Vec<String>)> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let header: TableHeader = match lines.next() {
            Some((_, l)) => serde_json::from_str(&l?).map_err(|e| perr(1, e.to_string()))?,
            None => return Err(perr(1, "missing header".into())),
        };
        let mut table = EmbeddingTable::new(header.encoder, header.dim);
        let mut warnings = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TableEntry = serde_json::from_str(&line).map_err(|e| perr(idx + 1, e.to_string()))?;
            if entry.vec.len() != table.dim {
                return Err(perr(
                    idx + 1,
                    format!("vector length {} does not match dim {}", entry.vec.len(), table.dim),
                ));
            }
            if entry.vec.iter().any(|v| !v.is_finite()) {
                return Err(perr(idx + 1, "non-finite embedding value".into()));
            }
            let prompt = entry.prompt;
            if table.insert(prompt.clone(), entry.vec) {
                let msg = format!("line {}: duplicate prompt {prompt:?}, last occurrence kept", idx + 1);
                log::warn!("{}: {msg}", path.display());
                warnings.push(msg);
            }
        }
        Ok((table, warnings))
    }

    /// Writes entries sorted by prompt.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &TableHeader {
                dim: self.dim,
                encoder: self.encoder.clone(),
            },
        )?;
        w.write_all(b"\n")?;
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for k in keys {
            serde_json::to_writer(
                &mut w,
                &TableEntry {
                    prompt: k.clone(),
                    vec: self.entries[k].clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Resolves prompts to vectors: table first, then the deterministic fallback
/// when one is configured.
#[derive(Clone, Debug)]
pub struct Embedder {
    table: Option<EmbeddingTable>,
    fallback_seed: Option<u64>,
    dim: usize,
}

impl Embedder {
    /// `dim` is the input width of the mapping heads; a table of another
    /// width is rejected.
    pub fn new(table: Option<EmbeddingTable>, fallback_seed: Option<u64>, dim: usize) -> Result<Self> {
        if let Some(t) = &table {
            if t.dim != dim {
                return Err(Error::invalid(format!(
                    "embedding table dim {} does not match mapping head input {dim}",
                    t.dim
                )));
            }
        }
        if table.is_none() && fallback_seed.is_none() {
            return Err(Error::invalid("no embedding table and no fallback seed"));
        }
        Ok(Embedder {
            table,
            fallback_seed,
            dim,
        })
    }

    pub fn fallback(seed: u64, dim: usize) -> Self {
        Embedder {
            table: None,
            fallback_seed: Some(seed),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.table.as_ref().and_then(|t| t.lookup(prompt)) {
            return Ok(v.to_vec());
        }
        match self.fallback_seed {
            Some(seed) => Ok(fallback_embedding(prompt, seed, self.dim)),
            None => Err(Error::invalid(format!("prompt {prompt:?} not in embedding table"))),
        }
    }

    /// Stacks the embeddings of `prompts` into a `prompts.len() x dim` matrix.
    pub fn embed_matrix(&self, prompts: &[String]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(prompts.len() * self.dim);
        for p in prompts {
            values.extend(self.embed(p)?);
        }
        Tensor::matrix(prompts.len(), self.dim, values)
    }
}

/// Frozen prompt embeddings for one corpus: the sensor-prompt matrix shared
/// by every sample and one label-prompt vector per distinct label text.
#[derive(Clone, Debug)]
pub struct KnowledgeContext {
    pub sensor_embeddings: Tensor,
    label_embeddings: HashMap<String, Tensor>,
    category: String,
    task: Task,
}

impl KnowledgeContext {
    pub fn new(
        embedder: &Embedder,
        sensor_names: &[String],
        patch_count: usize,
        category: &str,
        naming: SensorNaming,
        task: &Task,
        labels: impl IntoIterator<Item = f64>,
    ) -> Result<Self> {
        let prompts = sensor_prompts(sensor_names, patch_count, naming)?;
        let sensor_embeddings = embedder.embed_matrix(&prompts)?;
        let mut label_embeddings = HashMap::new();
        for label in labels {
            let text = render_label(task, label)?;
            if let Entry::Vacant(slot) = label_embeddings.entry(text) {
                let v = embedder.embed(&label_prompt(category, slot.key()))?;
                slot.insert(Tensor::matrix(1, embedder.dim(), v)?);
            }
        }
        Ok(KnowledgeContext {
            sensor_embeddings,
            label_embeddings,
            category: category.to_string(),
            task: task.clone(),
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    /// `1 x dim` embedding of the label prompt for `label`.
    pub fn label_embedding(&self, label: f64) -> Result<&Tensor> {
        let text = render_label(&self.task, label)?;
        self.label_embeddings
            .get(&text)
            .ok_or_else(|| Error::invalid(format!("label prompt for {text:?} was not embedded")))
    }
}

pub const W_M_SENSOR: &str = "know.w_m_sensor";
pub const W_M_LABEL: &str = "know.w_m_label";

/// Knowledge-link graph recorded on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct KnowledgeGraph {
    /// `nodes x 2 d_h`: `[sensor_part | label feature]` per node.
    pub node_features: Var,
    /// Row-softmaxed dot products of `node_features`, when requested.
    pub edges: Option<Var>,
    /// `nodes x d_h` mapped sensor-prompt features.
    pub sensor_part: Var,
}

/// Maps sensor-prompt embeddings through the sensor head.
pub fn map_sensor_prompts(g: &mut Graph, sensor_embeddings: Var, w_m_sensor: Var) -> Result<Var> {
    g.matmul(sensor_embeddings, w_m_sensor)
}

/// Builds the knowledge-link graph of one sample from the already-mapped
/// sensor part (`nodes x d_h`) and the label-prompt embedding (`1 x dim`).
pub fn build_knowledge_graph(
    g: &mut Graph,
    sensor_part: Var,
    label_embedding: Var,
    w_m_label: Var,
    with_edges: bool,
) -> Result<KnowledgeGraph> {
    let nodes = g.shape(sensor_part)[0];
    let label_feature = g.matmul(label_embedding, w_m_label)?;
    let ones = g.constant(Tensor::full(&[nodes, 1], 1.0))?;
    let broadcast = g.matmul(ones, label_feature)?;
    let node_features = g.concat(&[sensor_part, broadcast], 1)?;
    let edges = if with_edges {
        let t = g.transpose(node_features)?;
        let logits = g.matmul(node_features, t)?;
        Some(g.softmax_rows(logits)?)
    } else {
        None
    };
    Ok(KnowledgeGraph {
        node_features,
        edges,
        sensor_part,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_templates() {
        assert_eq!(sensor_prompt("fan speed", 3), "A sensor of fan speed at the 3 timestamp");
        assert_eq!(label_prompt("human activity", "walking"), "The human activity is walking");
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let p = sensor_prompts(&names, 1, SensorNaming::Index).unwrap();
        assert_eq!(p[1], "A sensor of 2 at the 1 timestamp");
    }

    #[test]
    fn prompt_set_node_order() {
        let names: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        let p = build_prompts(&names, 2, "remaining useful life of a machine", "42", SensorNaming::Names).unwrap();
        assert_eq!(p.sensor_prompts.len(), 6);
        assert_eq!(p.sensor_prompts[4], "A sensor of y at the 2 timestamp");
        assert_eq!(p.label_prompt, "The remaining useful life of a machine is 42");
    }

    #[test]
    fn empty_sensor_name_rejected() {
        let names: Vec<String> = vec!["x".into(), " ".into()];
        assert!(build_prompts(&names, 1, "c", "l", SensorNaming::Names).is_err());
    }

    #[test]
    fn regression_labels_render_as_integers() {
        assert_eq!(render_label(&Task::Regression, 87.6).unwrap(), "88");
        let task = Task::Classification {
            class_names: vec!["walking".into(), "sitting".into()],
        };
        assert_eq!(render_label(&task, 1.0).unwrap(), "sitting");
        assert!(render_label(&task, 2.0).is_err());
    }

    #[test]
    fn fallback_is_unit_norm_and_deterministic() {
        let a = fallback_embedding("A sensor of x at the 1 timestamp", 5, 512);
        let b = fallback_embedding("A sensor of x at the 1 timestamp", 5, 512);
        let c = fallback_embedding("A sensor of x at the 1 timestamp", 6, 512);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn table_hit_is_verbatim_and_dim_checked() {
        let mut t = EmbeddingTable::new("enc", 3);
        t.insert("p".into(), vec![0.1, 0.2, 0.3]);
        let e = Embedder::new(Some(t.clone()), Some(1), 3).unwrap();
        assert_eq!(e.embed("p").unwrap(), vec![0.1, 0.2, 0.3]);
        assert_eq!(e.embed("q").unwrap().len(), 3);
        assert!(Embedder::new(Some(t.clone()), None, 512).is_err());
        let strict = Embedder::new(Some(t), None, 3).unwrap();
        assert!(strict.embed("q").is_err());
    }

    #[test]
    fn table_file_duplicates_last_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(
            &path,
            "{\"dim\":2,\"encoder\":\"e\"}\n{\"prompt\":\"a\",\"vec\":[1,2]}\n{\"prompt\":\"a\",\"vec\":[3,4]}\n",
        )
        .unwrap();
        let (t, warnings) = EmbeddingTable::read(&path).unwrap();
        assert_eq!(t.lookup("a").unwrap(), &[3.0, 4.0]);
        assert_eq!(warnings.len(), 1);

        let out = dir.path().join("o.jsonl");
        t.write(&out).unwrap();
        let (back, w) = EmbeddingTable::read(&out).unwrap();
        assert_eq!(back, t);
        assert!(w.is_empty());
    }

    #[test]
    fn identical_prompts_give_uniform_edges() {
        let mut g = Graph::new();
        let sensor = g.constant(Tensor::full(&[4, 2], 0.3)).unwrap();
        let label = g.constant(Tensor::full(&[1, 3], 0.5)).unwrap();
        let w = g.param(Tensor::full(&[3, 2], 0.1)).unwrap();
        let kg = build_knowledge_graph(&mut g, sensor, label, w, true).unwrap();
        let e = g.value(kg.edges.unwrap());
        assert!(e.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(g.shape(kg.node_features), &[4, 4]);
    }

    #[test]
    fn orthogonal_sensor_parts_with_shared_label() {
        // logits: ||label||^2 off the diagonal, ||sensor_i||^2 + ||label||^2 on it
        let mut g = Graph::new();
        let sensor = g
            .constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let label = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let w = g
            .param(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.0, 0.0]]).unwrap())
            .unwrap();
        let kg = build_knowledge_graph(&mut g, sensor, label, w, true).unwrap();
        let z = g.value(kg.node_features).clone();
        let dot = |i: usize, j: usize| (0..4).map(|k| z.get2(i, k) * z.get2(j, k)).sum::<f64>();
        assert_eq!(dot(0, 1), 0.5);
        assert_eq!(dot(0, 0), 4.5);
        assert_eq!(dot(1, 1), 1.5);
        let e = g.value(kg.edges.unwrap());
        let expect = 1.0 / (1.0 + (0.5f64 - 4.5).exp());
        assert!((e.get2(0, 0) - expect).abs() < 1e-15);
    }
}
