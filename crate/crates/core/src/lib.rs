pub mod arch;
pub mod calibrate;
pub mod cli;
pub mod container;
pub mod errmodel;
pub mod error;
pub mod finetune;
pub mod float_net;
pub mod geometry;
pub mod idx;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod qcore;
pub mod shadow;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
