use crate::cache::CacheError;
use crate::config::ConfigError;
use crate::evset::EvsetError;
use crate::geometry::GeometryError;
use crate::mem::MemError;
use crate::tenant::TopologyError;
use crate::timing::TimingError;
use crate::vcol::VcolError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Evset(#[from] EvsetError),
    #[error(transparent)]
    Vcol(#[from] VcolError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violated in {module}: {message}")]
    Invariant { module: &'static str, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
