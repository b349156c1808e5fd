//! Motion tokenizer, masked infiller, editing pipeline and the novice/expert
//! classifier used for Fréchet statistics.

pub mod classifier;
pub mod edit;
pub mod error;
pub mod features;
pub mod infiller;
pub mod tokenizer;
pub mod tokens;

pub use classifier::{Classifier, ClassifierConfig, ClassifierReport, SpannedClip, FEATURE_DIM};
pub use edit::{edit_motion, EditOptions, EditResult};
pub use error::{ModelError, Result};
pub use features::FeatureStats;
pub use infiller::{InfillMode, Infiller, InfillerConfig, InfillerEpoch};
pub use tokenizer::{vq_loss, Tokenizer, TokenizerConfig, TokenizerEpoch};
pub use tokens::TokenSequence;
