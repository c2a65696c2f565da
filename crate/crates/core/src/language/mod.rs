//! Tokenization, vocabularies and the caption decoder.

pub mod generator;
pub mod tokenize;
pub mod vocab;

pub use generator::{
    caption_loss, decode_beam, decode_greedy, embed_keywords, fuse_features, init_decoder_params, BeamConfig, Decoder,
    DecoderConfig, Hypothesis, KeywordMode,
};
pub use tokenize::{normalize_keyword, split_keywords, tokenize};
pub use vocab::{build_vocabulary, Vocabulary, END, PAD, START, UNK};
