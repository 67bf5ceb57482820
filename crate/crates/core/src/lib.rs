//! Rider intention prediction workbench.
//!
//! Feature-sequence classifiers for two-wheeler maneuver anticipation: a
//! selective state-space (Mamba2-style) classifier and its multi-view
//! ensemble, a CNN-LSTM, a gated-RNN baseline, and a one-vs-rest RBF SVM with
//! SMOTE resampling, all evaluated with the maneuver-aware metrics in
//! [`metrics`].

pub mod checkpoint;
pub mod classical;
pub mod data;
pub mod metrics;
pub mod models;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;
