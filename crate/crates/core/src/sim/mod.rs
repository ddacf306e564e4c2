//! Seeded grid-world simulator: world generation, an A* expert planner, ego
//! perception, expert datasets and the closed navigation loop.

mod dataset;
mod episode;
mod oracle;
mod perception;
mod world;

use thiserror::Error;

pub use dataset::*;
pub use episode::*;
pub use oracle::*;
pub use perception::*;
pub use world::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsatisfiable density: {0}")]
    Unsatisfiable(String),
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("blocked: {0}")]
    Blocked(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl SimError {
    pub fn kind(&self) -> &'static str {
        match self {
            SimError::Config(_) => "config",
            SimError::Unsatisfiable(_) => "unsatisfiable-density",
            SimError::Unreachable(_) => "unreachable",
            SimError::Blocked(_) => "blocked",
            SimError::Io(_) => "io",
            SimError::Format(_) => "format",
        }
    }
}
