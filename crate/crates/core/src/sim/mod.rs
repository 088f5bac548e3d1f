//! Desk-scale client/server loop: a synthetic video pool, a drifting
//! synthetic user, a server stub, the pagination session engine, logs,
//! training-data extraction and paired A/B experiments.

pub mod dataset;
pub mod experiment;
pub mod log;
pub mod pool;
pub mod server;
pub mod session;
pub mod user;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ProtocolConfig, DEFAULT_HISTORY_LEN};
use crate::error::{Error, Result};

pub use pool::{PoolConfig, PoolVideo, VideoPool};
pub use server::{DriftView, ServerParams, ServerStub};
pub use session::{run_session, Arm, SessionSpec};
pub use user::{SyntheticUser, UserParams};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a seed from a root seed and a path of integers.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(root), |h, p| mix64(h ^ mix64(*p)))
}

pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

// Stream tags for `derive_seed` paths.
pub(crate) const STREAM_POOL: u64 = 1;
pub(crate) const STREAM_USER: u64 = 2;
pub(crate) const STREAM_OUTCOME: u64 = 3;
pub(crate) const STREAM_NET: u64 = 4;
pub(crate) const STREAM_PAGE: u64 = 5;
pub(crate) const STREAM_SERVER_NOISE: u64 = 6;
pub(crate) const STREAM_LAG: u64 = 7;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Everything the simulator needs besides seeds and the re-ranker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub pool: PoolConfig,
    pub user: UserParams,
    pub server: ServerParams,
    pub protocol: ProtocolConfig,
    pub history_len: usize,
    /// Hard cap on session depth.
    pub max_depth: u32,
    /// Pause between the end of one video and the next impression.
    pub swipe_gap_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pool: PoolConfig::default(),
            user: UserParams::default(),
            server: ServerParams::default(),
            protocol: ProtocolConfig::default(),
            history_len: DEFAULT_HISTORY_LEN,
            max_depth: 200,
            swipe_gap_ms: 400,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.pool.validate()?;
        self.user.validate()?;
        self.server.validate(&self.protocol)?;
        if self.history_len == 0 {
            return Err(Error::Config("history_len must be positive".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be positive".into()));
        }
        Ok(())
    }
}
