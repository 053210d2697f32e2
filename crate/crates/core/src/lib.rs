//! Graph multi-similarity learning for molecules.

pub mod dataio;
pub mod diffcore;
pub mod encoder;
pub mod fingerprint;
pub mod loss;
pub mod molgraph;
pub mod par;
pub mod similarity;
pub mod trainer;
pub mod synth;
pub mod evalkit;
