//! Consistency-model and diffusion policies inside a twin-critic actor-critic.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]), feed-forward networks ([`nn`]) and Adam ([`optim`]); on
//! top of that sit the generative policy heads ([`consistency`],
//! [`diffusion`]), the critics ([`critic`]), toy environments and datasets
//! ([`envs`], [`data`]), and the training loops ([`trainers`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod critic;
pub mod data;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod schedules;
pub mod tensor;
pub mod timing;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
