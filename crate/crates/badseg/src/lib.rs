//! Segmentation backdoor toolkit.
//!
//! Implements a full data-poisoning pipeline against semantic segmentation
//! models: differentiable search over a discrete trigger space, label
//! manipulation for coarse- and fine-grained attack vectors, class-center
//! analysis for victim/target pair selection, desk-scale victim training,
//! attack/stealth metrics, and a benchmark of six representative defenses.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`data`] — datasets, class taxonomy, splits, synthetic generator
//! - [`trigger`] — trigger specs, rasterization, injection, Gumbel-Softmax
//! - [`labelops`] — target-label construction for every attack vector
//! - [`analysis`] — class centers, pair ranking, rank correlation
//! - [`model`] — segmentation-model contract, tiny reference net, training
//! - [`optimize`] — gradient search over the discrete trigger space
//! - [`metrics`] — ASR, mIoU (PBA/CBA), PSNR/SSIM/perceptual, AUC
//! - [`pipeline`] — poisoned-set assembly and attack evaluation
//! - [`defense`] — fine-tuning, pruning, ABL, STRIP, TeCo, Beatrix
//! - [`experiment`] — config-driven runs, sweeps, reports, rendering

pub mod analysis;
pub mod data;
pub mod defense;
pub mod experiment;
pub mod labelops;
pub mod metrics;
pub mod model;
pub mod optimize;
pub mod pipeline;
pub mod seeding;
pub mod trigger;
