//! Command implementations and the HTTP render service behind the
//! `ghnerf` binary.

pub mod commands;
pub mod scene;
pub mod service;

pub use scene::{RenderRequest, RenderResponse, Scene};
