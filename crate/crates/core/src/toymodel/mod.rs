//! Desk-scale stand-in for the upstream/downstream translation models, plus
//! the synthetic two-domain corpus generator.

mod corpus;
mod model;

pub use corpus::{
    generate_corpora, Corpus, GenConfig, GeneratedData, Position, SentencePair, Vocab, Vocabularies, BOS, EOS, PAD,
};
pub use model::{finetune, train, ModelDims, ModelOutput, ToyModel, TrainConfig, TrainLog};
