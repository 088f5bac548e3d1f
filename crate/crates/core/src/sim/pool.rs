use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{rng_for, STREAM_POOL};
use crate::domain::{VideoMeta, MAX_DURATION_S};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub videos: usize,
    pub categories: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Standard deviation of per-video quality in logit units.
    pub quality_sd: f64,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            videos: 5000,
            categories: 40,
            min_duration_s: 5.0,
            max_duration_s: MAX_DURATION_S,
            quality_sd: 0.5,
            seed: 20_240_501,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 || self.categories == 0 {
            return Err(Error::Config("pool needs videos and categories".into()));
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return Err(Error::Config("invalid pool duration range".into()));
        }
        if !(self.quality_sd >= 0.0) {
            return Err(Error::Config("quality_sd must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolVideo {
    pub meta: VideoMeta,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoPool {
    pub categories: u32,
    pub videos: Vec<PoolVideo>,
}

impl VideoPool {
    /// Uniform categories, log-uniform durations, Gaussian quality.
    /// Video ids are `1..=videos`.
    pub fn generate(cfg: &PoolConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, &[STREAM_POOL]);
        let (lo, hi) = (cfg.min_duration_s.ln(), cfg.max_duration_s.ln());
        let videos = (0..cfg.videos)
            .map(|i| {
                let category_id = rng.random_range(0..cfg.categories);
                let duration_s = (lo + (hi - lo) * rng.random::<f64>()).exp();
                let z: f64 = rng.sample(StandardNormal);
                PoolVideo {
                    meta: VideoMeta {
                        video_id: i as u64 + 1,
                        category_id,
                        duration_s,
                    },
                    quality: cfg.quality_sd * z,
                }
            })
            .collect();
        Ok(Self {
            categories: cfg.categories,
            videos,
        })
    }

    pub fn get(&self, video_id: u64) -> Option<&PoolVideo> {
        let i = video_id.checked_sub(1)? as usize;
        self.videos.get(i)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_is_deterministic_and_in_range() {
        let cfg = PoolConfig::default();
        let a = VideoPool::generate(&cfg).unwrap();
        assert_eq!(a, VideoPool::generate(&cfg).unwrap());
        assert_eq!(a.len(), 5000);
        for v in &a.videos {
            assert!(v.meta.duration_s >= 5.0 && v.meta.duration_s <= 1800.0);
            assert!(v.meta.category_id < 40);
            assert_eq!(a.get(v.meta.video_id).unwrap(), v);
        }
        assert!(a.get(0).is_none());
        let mut seen = vec![false; 40];
        a.videos.iter().for_each(|v| seen[v.meta.category_id as usize] = true);
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn log_durations_are_roughly_uniform() {
        let a = VideoPool::generate(&PoolConfig::default()).unwrap();
        let mid = (5.0f64 * 1800.0).sqrt();
        let below = a.videos.iter().filter(|v| v.meta.duration_s < mid).count() as f64;
        assert!((below / 5000.0 - 0.5).abs() < 0.03);
    }
}
