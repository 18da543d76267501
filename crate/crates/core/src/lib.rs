//! Data-free zero-shot learning on embedding vectors.
//!
//! The pipeline has three stages:
//!
//! 1. [`recovery`]: sample virtual base-class features from von Mises-Fisher
//!    distributions centred on the protected classifier's weights
//!    (white-box) or on prototypes distilled through its prediction API
//!    (black-box, served by [`oracle`]).
//! 2. [`flpt`]: tune four prompt vectors and a small mapping network that
//!    produces a class-agnostic shift for image features, aligning the
//!    virtual features with class text features.
//! 3. [`generator`] and [`classifier`]: synthesize new-class features from
//!    their text features, train a text-initialized cosine classifier over
//!    base and new classes, and evaluate it.
//!
//! [`pipeline`] wires the stages together over files and [`benchmark`]
//! builds the synthetic datasets used by the tests.

pub mod benchmark;
pub mod classifier;
pub mod diffmath;
pub mod emb;
pub mod error;
pub mod flpt;
pub mod generator;
pub mod oracle;
pub mod pipeline;
pub mod recovery;
pub mod seed;
pub mod vmf;

pub use emb::{read_emb1, write_emb1, EmbeddingSet, SplitSpec};
pub use error::{Error, Result};
pub use vmf::{derive_kappa, sample_vmf, ClassPrototypes, VmfParams, VonMisesFisher};
