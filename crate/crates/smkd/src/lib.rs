//! Teacher-student Vision Transformer training with masked knowledge
//! distillation, plus episodic few-shot evaluation — all built on a minimal
//! reverse-mode autodiff substrate with no deep-learning framework.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense arrays, differentiable ops, finite-difference oracle
//! - [`masking`]: blockwise / random mask generation over the patch grid
//! - [`vit`]: small ViT backbone with `[MASK]` token substitution
//! - [`head`]: shared projection head with centering and sharpening
//! - [`losses`]: class-level, masked-patch, and matched-patch objectives
//! - [`data`]: synthetic dataset generation, CIFAR binary ingestion, augmentation
//! - [`trainer`]: two-stage training loop with EMA teacher and schedules
//! - [`fewshot`]: N-way K-shot episode sampling and evaluation
//! - [`checkpoint`], [`viz`], [`cli`]: persistence, rendering, and the CLI

pub mod checkpoint;
pub mod cli;
pub mod data;
pub(crate) mod util;
pub mod fewshot;
pub mod head;
pub mod losses;
pub mod masking;
pub mod tensor;
pub mod trainer;
pub mod viz;
pub mod vit;
