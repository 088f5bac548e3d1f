//! Paired multi-arm experiments: every arm replays the same users, session
//! seeds and outcome draws.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::time::{Duration, Instant};

use super::log::SessionLog;
use super::pool::VideoPool;
use super::server::ServerStub;
use super::session::{run_session, Arm, SessionEngine, SessionSpec};
use super::user::{OutcomeDraws, SyntheticUser};
use super::{derive_seed, SimConfig};
use crate::domain::RerankConfig;
use crate::error::{Error, Result};
use crate::rerank::{adaptive_beam_search, ContextScorer, RerankRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_users: u64,
    pub sessions_per_user: u64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            sessions_per_user: 5,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn sessions(&self) -> u64 {
        self.n_users * self.sessions_per_user
    }
}

pub fn session_specs(cfg: &ExperimentConfig) -> Vec<SessionSpec> {
    (0..cfg.n_users)
        .flat_map(|user_id| {
            (0..cfg.sessions_per_user).map(move |s| SessionSpec {
                session_id: user_id * cfg.sessions_per_user + s,
                user_id,
                seed: derive_seed(cfg.seed, &[user_id, s]),
            })
        })
        .collect()
}

/// Runs every spec under one arm; sessions are independent and run on the
/// worker pool, results keep spec order.
pub fn run_arm(
    arm: Arm,
    specs: &[SessionSpec],
    pool: &VideoPool,
    sim: &SimConfig,
    scorer: Option<&dyn ContextScorer>,
    rerank: &RerankConfig,
) -> Result<Vec<SessionLog>> {
    if arm.needs_model() && scorer.is_none() {
        return Err(Error::Config(format!("arm {arm} needs a model")));
    }
    specs
        .par_iter()
        .map(|spec| run_session(arm, *spec, pool, sim, scorer, rerank))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmLogs {
    pub arm: Arm,
    pub sessions: Vec<SessionLog>,
}

pub fn run_experiment(
    arms: &[Arm],
    cfg: &ExperimentConfig,
    pool: &VideoPool,
    sim: &SimConfig,
    scorer: Option<&dyn ContextScorer>,
    rerank: &RerankConfig,
) -> Result<Vec<ArmLogs>> {
    if cfg.sessions() == 0 {
        return Err(Error::Config("an experiment needs at least one session".into()));
    }
    let specs = session_specs(cfg);
    arms.iter()
        .map(|&arm| {
            Ok(ArmLogs {
                arm,
                sessions: run_arm(arm, &specs, pool, sim, scorer, rerank)?,
            })
        })
        .collect()
}

/// One row of the stability-by-depth table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub step: usize,
    pub mean_stability: f64,
    /// Triggers whose search reached this step.
    pub triggers: usize,
    /// Mean search time stopped at this step over the time stopped at step 1.
    pub relative_latency: f64,
}

/// Mean beam stability after each step of a search run without early
/// stopping on the context-aware arm, with the search latency per depth
/// relative to a single step. Latency is timed on the first
/// `latency_triggers` triggers that can reach every step.
pub fn stability_by_step(
    cfg: &ExperimentConfig,
    pool: &VideoPool,
    sim: &SimConfig,
    scorer: &dyn ContextScorer,
    rerank: &RerankConfig,
    steps: usize,
    latency_triggers: usize,
) -> Result<Vec<StabilityRow>> {
    if steps == 0 {
        return Err(Error::Config("at least one step is needed".into()));
    }
    let full = RerankConfig {
        stability_threshold_t: None,
        max_steps: steps,
        n_show: 1,
        ..rerank.clone()
    };
    let logs = run_arm(Arm::ContextAware, &session_specs(cfg), pool, sim, Some(scorer), &full)?;
    let mut sums = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    for log in &logs {
        for r in log.reranks() {
            for (s, v) in r.stability_trace.iter().take(steps).enumerate() {
                sums[s] += v;
                counts[s] += 1;
            }
        }
    }

    let mut times = vec![Duration::ZERO; steps];
    let mut timed = 0;
    'sessions: for spec in session_specs(cfg) {
        let user = SyntheticUser::new(spec.user_id, pool.categories, sim.user.clone(), sim.pool.seed);
        let mut engine = SessionEngine::new(spec, Arm::ContextAware, sim, ServerStub::new(pool, &sim.server), user)?;
        while !engine.is_finished() {
            if timed >= latency_triggers {
                break 'sessions;
            }
            if engine.queue().len() >= steps {
                let ctx = engine.context();
                let req = RerankRequest {
                    candidates: engine.queue(),
                    history: engine.history(),
                    ctx: &ctx,
                };
                for (s, slot) in times.iter_mut().enumerate() {
                    let cfg = RerankConfig {
                        max_steps: s + 1,
                        ..full.clone()
                    };
                    let start = Instant::now();
                    adaptive_beam_search(&req, scorer, &cfg)?;
                    *slot += start.elapsed();
                }
                timed += 1;
            }
            let pos = engine.next_pos();
            let decision = engine.next_impression(Some(scorer), &full)?;
            let video = pool
                .get(decision.candidate.video.video_id)
                .ok_or_else(|| Error::Protocol("candidate not in pool".into()))?;
            let draws = OutcomeDraws::for_impression(spec.seed, pos, video.meta.video_id);
            let (feedback, has_next) = engine.user().sample_feedback(video, pos - 1, engine.net(), &draws);
            engine.record_feedback(feedback, has_next)?;
        }
    }
    let base = times[0].as_secs_f64();
    Ok((0..steps)
        .map(|s| StabilityRow {
            step: s + 1,
            mean_stability: if counts[s] > 0 { sums[s] / counts[s] as f64 } else { f64::NAN },
            triggers: counts[s],
            relative_latency: if base > 0.0 { times[s].as_secs_f64() / base } else { f64::NAN },
        })
        .collect())
}
