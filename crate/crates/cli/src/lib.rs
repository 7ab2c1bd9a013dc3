//! The `boundary` command-line tool and inference service.

pub mod commands;
pub mod config;
pub mod service;
