//! Trainable multi-label recognition head with prompt-driven label
//! representations, on a self-contained autodiff tape.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod head;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod text_sim;
pub mod train;

pub use crate::config::TrainConfig;
pub use crate::error::{Error, Result};
pub use crate::head::{HeadConfig, HeadMode, PromptingMode, PvlrModel};
pub use crate::metrics::{evaluate, MetricsReport, ScoreMatrix};
pub use crate::objective::LossConfig;
pub use crate::params::ParamStore;
pub use crate::synthdata::{make_dataset, DataSpec, Splits};
pub use crate::train::{train, Session};
