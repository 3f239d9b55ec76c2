//! Retrieval-augmented translation at desk scale: kNN datastores over a toy
//! translation model, interpolated decoding, and offline key revision with a
//! small reviser network trained on key-query pairs from a fine-tuned model.

mod binio;
pub mod datastore;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod pairbuilder;
pub mod provenance;
pub mod reviser;
pub mod seed;
pub mod toymodel;
pub mod vecmath;

pub use datastore::{Datastore, DatastoreEntry, KnnIndex, Neighbor};
pub use error::{Error, Result};
pub use evaluation::{domain_difference, retrieval_accuracy, token_accuracy, EvalReport};
pub use experiment::ExperimentConfig;
pub use inference::{interpolate, knn_distribution, translate, DecodeConfig, Distribution};
pub use pairbuilder::{CollectedStats, KeyQueryStats, TrainingRecord};
pub use reviser::{DistanceMode, ReviserDims, ReviserParams, ReviserTrainConfig};
pub use toymodel::{Corpus, GenConfig, ModelDims, Position, SentencePair, ToyModel, TrainConfig};
pub use vecmath::{Matrix, Vector};
