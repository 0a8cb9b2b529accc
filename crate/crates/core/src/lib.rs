//! Clinical language-model pipeline for early acute kidney injury prediction
//! from ICU notes.

pub mod attnviz;
pub mod cohort;
pub mod encoder;
pub mod evaluate;
pub mod finetune;
pub mod ingest;
pub mod optim;
pub mod pretrain;
pub mod seed;
pub mod tokenizer;
