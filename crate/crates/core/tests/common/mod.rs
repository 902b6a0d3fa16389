//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod dft;
pub mod fixtures;
pub mod flows;
pub mod grad;
pub mod mha;
