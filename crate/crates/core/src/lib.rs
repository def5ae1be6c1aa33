//! Surprise-guided chunkwise diffusion on a toy physics world.
//!
//! An autoregressive chunk denoiser ([`diffusion`]) samples video chunks
//! under a three-term classifier-free score, optionally steered by the
//! gradient of a JEPA surprise score ([`jepa`], [`guidance`]). Best-of-N
//! selection by lowest average surprise lives in [`bon`]. [`gaussoracle`]
//! checks the composed score and the sampler against closed-form Gaussian
//! targets, and [`harness`] runs the vanilla / guided / guided+BoN comparison.

pub mod bon;
pub mod diffusion;
pub mod gaussoracle;
pub mod guidance;
pub mod harness;
pub mod jepa;
pub mod nnkit;
pub mod rng;
pub mod worldsim;
