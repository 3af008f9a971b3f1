//! Graph learning for multivariate time series with knowledge-linked
//! alignment.
//!
//! A signal branch encodes sensor patches and builds a spatio-temporal graph
//! from the signals; during training a knowledge branch builds a second
//! graph over the same nodes from prompt embeddings, and alignment losses
//! pull the signal graph's nodes and edges toward it. Inference uses the
//! signal branch alone.

pub mod alignment;
pub mod dataset;
pub mod error;
pub mod knowledge;
pub mod model;
pub mod numeric;
pub mod signal;
pub mod train;

pub use alignment::{LossWeights, Similarity};
pub use dataset::{DatasetSplit, MtsSample, Task};
pub use error::{Error, Result};
pub use knowledge::{EmbeddingTable, Embedder};
pub use model::{KLinkModel, ModelConfig};
pub use numeric::{Adam, Graph, ParamStore, Precision, Tensor, Var};
pub use signal::SignalConfig;
