//! Training and evaluation instances extracted from session logs.
//!
//! A target impression at position `p` is encoded as if it were planned at
//! the trigger before position `p - L`: the history holds the records
//! before `p - L`, the ordered prefix holds the videos shown at
//! `p - L .. p - 1` (without their feedback) and the context is the one of
//! impression `p - L`. The lag `L` is drawn per target from `0..=max_lag`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::log::{ImpressionEvent, SessionLog};
use super::{rng_for, STREAM_LAG};
use crate::domain::{Candidate, ClientContext, ServerScores, WatchHistory};
use crate::error::{Error, Result};
use crate::features::{build_model_input, FeatureConfig};
use crate::model::{Example, Labels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub max_lag: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { max_lag: 4, seed: 0 }
    }
}

/// One held-out impression with the server's own estimates kept for
/// baseline comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImpression {
    pub example: Example,
    pub server_scores: ServerScores,
    pub impression_pos: u32,
}

fn labels(imp: &ImpressionEvent) -> Labels {
    Labels {
        has_next: imp.has_next,
        effective_view: imp.record.feedback.effective_view,
        like: imp.record.feedback.like,
    }
}

fn instance(features: &FeatureConfig, imps: &[&ImpressionEvent], target: usize, lag: usize) -> Result<Example> {
    let start = target - lag;
    let anchor = imps[start];
    let mut history = WatchHistory::new(features.history_len.max(1));
    for imp in &imps[start.saturating_sub(features.history_len)..start] {
        history.push_watched(imp.record.clone())?;
    }
    let ordered: Vec<Candidate> = imps[start..target].iter().map(|i| i.candidate()).collect();
    let ordered_refs: Vec<&Candidate> = ordered.iter().collect();
    let ctx = ClientContext {
        net_condition: anchor.net_condition,
        next_impression_pos: anchor.record.impression_pos,
        now_ts_ms: anchor.record.impression_ts_ms,
    };
    let bundle = build_model_input(features, &history, &ordered_refs, &imps[target].candidate(), &ctx)?;
    Ok(Example {
        bundle,
        labels: labels(imps[target]),
    })
}

fn impressions(log: &SessionLog) -> Result<(u64, Vec<&ImpressionEvent>)> {
    let start = log.start().ok_or_else(|| Error::Format("session log without start".into()))?;
    let imps: Vec<&ImpressionEvent> = log.impressions().collect();
    for (i, imp) in imps.iter().enumerate() {
        if imp.record.impression_pos as usize != i + 1 {
            return Err(Error::Format(format!(
                "session {} has impression position {} at index {i}",
                start.session_id, imp.record.impression_pos
            )));
        }
    }
    Ok((start.session_id, imps))
}

/// Training instances with randomly lagged planning contexts.
pub fn training_examples(log: &SessionLog, features: &FeatureConfig, cfg: &DatasetConfig) -> Result<Vec<Example>> {
    let (session_id, imps) = impressions(log)?;
    (0..imps.len())
        .map(|t| {
            let max = (cfg.max_lag as usize).min(t).min(features.ordered_len);
            let lag = rng_for(cfg.seed, &[STREAM_LAG, session_id, t as u64]).random_range(0..=max);
            instance(features, &imps, t, lag)
        })
        .collect()
}

/// Impression-level instances planned right before each impression.
pub fn evaluation_examples(log: &SessionLog, features: &FeatureConfig) -> Result<Vec<LabeledImpression>> {
    let (_, imps) = impressions(log)?;
    (0..imps.len())
        .map(|t| {
            Ok(LabeledImpression {
                example: instance(features, &imps, t, 0)?,
                server_scores: imps[t].record.server_scores,
                impression_pos: imps[t].record.impression_pos,
            })
        })
        .collect()
}

/// Training instances of many sessions, in session order.
pub fn training_set(logs: &[SessionLog], features: &FeatureConfig, cfg: &DatasetConfig) -> Result<Vec<Example>> {
    let per: Vec<Vec<Example>> = logs
        .par_iter()
        .map(|l| training_examples(l, features, cfg))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn evaluation_set(logs: &[SessionLog], features: &FeatureConfig) -> Result<Vec<LabeledImpression>> {
    let per: Vec<Vec<LabeledImpression>> = logs
        .par_iter()
        .map(|l| evaluation_examples(l, features))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}
