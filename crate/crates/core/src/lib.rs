//! Reinforcement-learning architecture search for 1-D convolutional
//! fault-diagnosis networks.
//!
//! An LSTM controller samples dilated-kernel configurations for a fixed
//! residual backbone; child networks are evaluated with shared weights and
//! the controller learns by policy gradient with a moving-average baseline.

pub mod checkpoint;
pub mod controller;
pub mod error;
pub mod ops;
pub mod optim;
pub mod oracles;
pub mod rng;
pub mod space;
pub mod tape;
pub mod tensor;

pub use error::{KforgeError, Result};
pub use tensor::Tensor;
