//! Multi-domain EEG cognitive-load classification.
//!
//! Raw 4-channel EEG is filtered and segmented, turned into both a
//! z-scored time series and a stack of per-band scalp topography images,
//! and classified by two convolutional encoders whose embeddings are
//! blended by a learned sigmoid gate.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod experiments;
pub mod model;
pub mod pipeline;
pub mod spectral;
pub mod topomap;
pub mod trainer;

pub use data::{CognitiveLoad, EegRecording, EegSegment, LosoSplit, SubjectId};
pub use error::{Error, Result};
pub use spectral::{BandPowers, FrequencyBand};
pub use topomap::{ElectrodeLayout, MultiSpectralMap};
