//! Multi-representation similarity fusion.
//!
//! Given `N` left/right pairs described by `M` feature representations, this
//! crate builds one cosine similarity matrix per representation, fuses
//! matrices by raw or z-scored summation, searches all `2^M - 1` subsets for
//! the best recall@1 and analyses the result (participation in leading
//! combinations, ablation, oracle and exclusive hits). A second part scores
//! layer-weighted activation distances against human 2AFC judgements.
//!
//! The `parallel` feature (default) runs matrix construction, subset search
//! and scoring on rayon; without it everything runs sequentially with
//! identical results.

pub mod analysis;
pub mod error;
pub mod feature_store;
pub mod fusion;
pub mod par;
pub mod patch_metric;
pub mod report;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
pub use feature_store::{FeatureSet, PairedGallery};
pub use fusion::{FusionMode, SearchResults, SubsetMask};
pub use similarity::{NormStats, SimilarityMatrix};
