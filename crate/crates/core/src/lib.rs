//! Fine-grained traffic sign recognition with a large multimodal model.
//!
//! The pipeline extracts signs from road images using color-coded
//! segmentation masks, builds a memory bank of per-class characteristic and
//! pairwise differential descriptions, optionally describes the scene
//! around each target sign, and asks the model for a ranked answer in a
//! single multistep prompt. [`eval`] scores ranked answers with Top-k
//! accuracy over repeated trials and ablation grids.

pub mod config;
pub mod dataset;
pub mod extraction;
pub mod geometry;
pub mod knowledge;
pub mod lmm;
pub mod prompts;
pub mod text;
pub mod workers;
pub mod eval;
pub mod recognizer;
pub mod synthetic;
