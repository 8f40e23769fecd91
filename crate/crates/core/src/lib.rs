//! Interactive, prompt-guided anomaly segmentation.

pub mod clicks;
pub mod datasets;
pub mod error;
pub mod extractor;
pub mod imgproc;
pub mod language;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod posfar;
pub mod segmode;
pub mod session;
pub mod synthetic;

pub use clicks::{AnomalyMask, Click, ClickEncoding, ClickModel, Polarity};
pub use datasets::{DatasetIndex, Layout, PromptCorpus, PromptKey, ReferenceBank, Split};
pub use error::{Error, Result};
pub use extractor::{ConvExtractor, ConvExtractorConfig, FeatureExtractor};
pub use language::{HashedTextEncoder, LinguisticFeature, TextEncoder};
pub use metrics::{AdScores, IisScores, NocSummary};
pub use network::{AdClickNet, ModelConfig, TrainConfig};
pub use pipeline::Engine;
pub use posfar::PosFarTensor;
