//! Poisoning testbed for continual learners.
//!
//! The crate is organized bottom-up: a small neural-network engine with
//! forward-mode tangents ([`nn`]), classifier backbones ([`models`]), task
//! streams ([`data`]), continual-learning trainers ([`regularizer`],
//! [`replay`]), poisoning attacks ([`attack`]), sanitization defenses
//! ([`defense`]) and the experiment harness ([`harness`]).

extern crate blas_src;

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod models;
pub mod nn;
pub mod regularizer;
pub mod replay;

pub use error::{Error, Result};
