//! Controlled artificial-corpus experiments on grammatical gender.

pub mod cli;
pub mod corpus;
pub mod experiments;
pub mod grammar;
pub mod lexicon;
pub mod model;
pub mod probe;
pub mod seed;
