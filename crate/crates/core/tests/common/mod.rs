#![allow(dead_code)]

pub mod gradcheck;
pub mod model_grad;
