#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod lti;
pub mod network;
pub mod devices;
pub mod dvpp;
pub mod engine;
pub mod cli;
