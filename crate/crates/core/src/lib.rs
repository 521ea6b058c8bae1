//! Classification and retrieval over precomputed multimodal embeddings.
//!
//! The crate works entirely on frozen embedding stores (`.cemb` files) plus a
//! JSON Lines dataset manifest:
//!
//! - [`store`]: the binary embedding store, L2 normalization.
//! - [`dataset`]: manifests, class catalogs, split views, alignment checks.
//! - [`classifier`]: a shallow classifier (hidden layer, ReLU, L2-normalization
//!   layer, output layer) trained with Adam on softmax cross-entropy.
//! - [`retrieval`]: zero-shot classification against class description
//!   embeddings and the four retrieval pipelines (visual, class text,
//!   class text with visual re-ranking, oracle text).
//! - [`metrics`]: accuracy, average precision, retrieval and classification mAP.
//! - [`synthetic`]: seeded class-clustered unit-sphere corpora for testing.
//! - [`cli`]: the `embedkit` command-line front end.

pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod retrieval;
pub mod store;
pub mod synthetic;

pub use classifier::{ClassProbabilities, ClassifierParams, Params, TrainConfig};
pub use dataset::{ClassCatalog, DatasetManifest, ManifestItem, Split};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use retrieval::{PipelineMode, RankedList};
pub use store::{EmbeddingStore, Modality};
pub use synthetic::{SynthConfig, SynthCorpus};
