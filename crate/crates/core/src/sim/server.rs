//! Stand-in for the cloud recommender: samples a candidate pool for the
//! user, scores it with noisy long-term engagement estimates and returns the
//! best page.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pool::VideoPool;
use super::user::SyntheticUser;
use super::{derive_seed, rng_for, STREAM_PAGE, STREAM_SERVER_NOISE};
use crate::domain::{Candidate, NetCondition, ProtocolConfig, ServerScores};
use crate::error::{Error, Result};

/// How much of the session drift the server sees when a page is requested.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftView {
    /// Long-term interest only.
    #[default]
    None,
    /// The drift as of the page request; feedback given within a page only
    /// reaches the server with the next request.
    AtRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerParams {
    /// Logit-scale noise of the server's estimates.
    pub sigma: f64,
    /// Videos scored per page request.
    pub sample_size: usize,
    pub drift_view: DriftView,
}

impl Default for ServerParams {
    fn default() -> Self {
        Self {
            sigma: 0.35,
            sample_size: 200,
            drift_view: DriftView::None,
        }
    }
}

impl ServerParams {
    pub fn validate(&self, protocol: &ProtocolConfig) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("server sigma must be finite and non-negative".into()));
        }
        if self.sample_size < protocol.page_return_total {
            return Err(Error::Config(format!(
                "server sample_size {} is below page_return_total {}",
                self.sample_size, protocol.page_return_total
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ServerStub<'a> {
    pub pool: &'a VideoPool,
    pub params: &'a ServerParams,
}

impl<'a> ServerStub<'a> {
    pub fn new(pool: &'a VideoPool, params: &'a ServerParams) -> Self {
        Self { pool, params }
    }

    /// Server estimate of the user's affinity for a video. The noise is fixed
    /// per (session, video) so re-requests agree.
    pub fn estimated_affinity(&self, user: &SyntheticUser, video_id: u64, session_seed: u64) -> Option<f64> {
        let v = self.pool.get(video_id)?;
        let mut a = user.long_term_affinity(v);
        if self.params.drift_view == DriftView::AtRequest {
            a += user.drift[v.meta.category_id as usize];
        }
        if self.params.sigma > 0.0 {
            let mut rng = rng_for(session_seed, &[STREAM_SERVER_NOISE, video_id]);
            a += self.params.sigma * rng.sample::<f64, _>(StandardNormal);
        }
        Some(a)
    }

    /// One page of `page_return_total` candidates, best first.
    pub fn respond(
        &self,
        user: &SyntheticUser,
        session_seed: u64,
        page_index: u32,
        exclude: &HashSet<u64>,
        protocol: &ProtocolConfig,
        net: NetCondition,
    ) -> Result<Vec<Candidate>> {
        let available = self.pool.len() - exclude.len().min(self.pool.len());
        if available < protocol.page_return_total {
            return Err(Error::Protocol("video pool exhausted".into()));
        }
        let mut rng = rng_for(session_seed, &[STREAM_PAGE, page_index as u64]);
        let want = self.params.sample_size.min(available);
        let mut picked = HashSet::with_capacity(want);
        let mut sampled = Vec::with_capacity(want);
        while sampled.len() < want {
            let id = rng.random_range(1..=self.pool.len() as u64);
            if !exclude.contains(&id) && picked.insert(id) {
                sampled.push(id);
            }
        }
        let params = &user.params;
        let mut scored: Vec<(f64, Candidate)> = sampled
            .into_iter()
            .map(|id| {
                let v = self.pool.get(id).expect("sampled id in pool");
                let a = self.estimated_affinity(user, id, session_seed).expect("sampled id in pool");
                let e = params.engagement(a, v.meta.duration_s, 0, NetCondition::Wifi);
                let scores = ServerScores {
                    p_effective_view: e.effective_view,
                    p_like: e.like,
                    p_follow: e.follow,
                };
                let candidate = Candidate {
                    video: v.meta.clone(),
                    server_scores: scores,
                    buffered_len_s: 0.0,
                    server_rank: 0,
                };
                (e.effective_view + e.like, candidate)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.video.video_id.cmp(&b.1.video.video_id)));
        scored.truncate(protocol.page_return_total);
        let mut buffer_rng = rng_for(derive_seed(session_seed, &[page_index as u64]), &[STREAM_PAGE]);
        let base = [8.0, 6.0, 3.0, 1.0][net.index()];
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(rank, (_, mut c))| {
                let buffered = base * (0.5 + buffer_rng.random::<f64>()) / (1.0 + 0.25 * rank as f64);
                c.buffered_len_s = buffered.min(c.video.duration_s);
                c.server_rank = rank as u32;
                c
            })
            .collect())
    }
}
