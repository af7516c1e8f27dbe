//! Multi-task recurrent learning of a content task and a speaker task with
//! two projected-LSTM towers coupled by cross-task recurrent feedback.

pub mod cell;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod joint;
pub mod numerics;
pub mod trainer;

pub use cell::{CellDims, CellParams, CellState, Sink, SinkInjection};
pub use data::{SynthConfig, TrialList, Utterance};
pub use error::{Error, Result};
pub use eval::{EvalReport, Metrics};
pub use joint::{FeedbackConfig, JointModel, JointParams, Source};
pub use numerics::{Mat, SplitMix64};
pub use trainer::{OptimConfig, TrainState};
