#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod conformal;
pub mod data;
pub mod divopt;
pub mod engine;
pub mod learners;
pub mod policies;
pub mod result;
pub mod rng;
pub mod sim;
