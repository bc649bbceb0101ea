//! Multi-view transformer that predicts per-pixel Gaussian maps from images,
//! and its two-stage training.

mod config;
mod model;
mod train;

#[cfg(test)]
mod tests;

pub use config::{Config, ModelConfig, TrainConfig};
pub use model::{
    decode, dpt_head, encode, forward, global_fusion, is_stage2_param, partners, refine_delta, Ctx, Heads, Init, Model,
    Outputs,
};
pub use train::{correspondences, load_model, load_scenes, EpochLog, Stage, TrainScene, Trainer};
