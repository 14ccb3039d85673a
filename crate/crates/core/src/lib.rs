//! Grasp-pose-guided latent diffusion policy, with the kinematic grasping
//! simulator, synthetic demonstration pipeline and evaluation harness it is
//! trained and measured in.

pub mod action_vae;
pub mod datagen;
pub mod eval;
pub mod geometry;
pub mod graspsense;
pub mod hps;
pub mod latent_diffusion;
pub mod netcore;
pub mod simworld;
