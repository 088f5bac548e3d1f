//! Newline-delimited session logs.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::session::Arm;
use crate::domain::{Candidate, NetCondition, ServerScores, VideoMeta, WatchedRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStartEvent {
    pub session_id: u64,
    pub user_id: u64,
    pub arm: Arm,
    pub seed: u64,
    pub start_ts_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageCandidate {
    pub video: VideoMeta,
    pub server_scores: ServerScores,
    pub buffered_len_s: f64,
    pub server_rank: u32,
}

impl From<&Candidate> for PageCandidate {
    fn from(c: &Candidate) -> Self {
        Self {
            video: c.video.clone(),
            server_scores: c.server_scores,
            buffered_len_s: c.buffered_len_s,
            server_rank: c.server_rank,
        }
    }
}

impl From<PageCandidate> for Candidate {
    fn from(c: PageCandidate) -> Self {
        Self {
            video: c.video,
            server_scores: c.server_scores,
            buffered_len_s: c.buffered_len_s,
            server_rank: c.server_rank,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageFetchEvent {
    pub session_id: u64,
    pub page_index: u32,
    /// Impressions consumed before the request.
    pub consumed: u32,
    pub request_ts_ms: u64,
    pub candidates: Vec<PageCandidate>,
    /// Unshown candidates of the previous page dropped by this refresh.
    pub discarded: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankEvent {
    pub session_id: u64,
    /// Position the chosen video is shown at.
    pub impression_pos: u32,
    /// Remaining queue in server order before and in edge order after.
    pub queue_before: Vec<u64>,
    pub queue_after: Vec<u64>,
    pub chosen: u64,
    pub steps: usize,
    pub stability_trace: Vec<f64>,
    pub best_list_reward: f64,
    pub model_evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionEvent {
    pub session_id: u64,
    #[serde(flatten)]
    pub record: WatchedRecord,
    pub buffered_len_s: f64,
    pub server_rank: u32,
    pub page_index: u32,
    pub net_condition: NetCondition,
    pub has_next: bool,
}

impl ImpressionEvent {
    pub fn candidate(&self) -> Candidate {
        Candidate {
            video: self.record.video.clone(),
            server_scores: self.record.server_scores,
            buffered_len_s: self.buffered_len_s,
            server_rank: self.server_rank,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEndEvent {
    pub session_id: u64,
    pub depth: u32,
    pub likes: u32,
    pub effective_views: u32,
    pub follows: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    SessionStart(SessionStartEvent),
    PageFetch(PageFetchEvent),
    Rerank(RerankEvent),
    Impression(ImpressionEvent),
    SessionEnd(SessionEndEvent),
}

impl LogEvent {
    pub fn session_id(&self) -> u64 {
        match self {
            LogEvent::SessionStart(e) => e.session_id,
            LogEvent::PageFetch(e) => e.session_id,
            LogEvent::Rerank(e) => e.session_id,
            LogEvent::Impression(e) => e.session_id,
            LogEvent::SessionEnd(e) => e.session_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub events: Vec<LogEvent>,
}

impl SessionLog {
    pub fn start(&self) -> Option<&SessionStartEvent> {
        match self.events.first() {
            Some(LogEvent::SessionStart(s)) => Some(s),
            _ => None,
        }
    }

    pub fn impressions(&self) -> impl Iterator<Item = &ImpressionEvent> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Impression(i) => Some(i),
            _ => None,
        })
    }

    pub fn page_fetches(&self) -> impl Iterator<Item = &PageFetchEvent> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::PageFetch(p) => Some(p),
            _ => None,
        })
    }

    pub fn reranks(&self) -> impl Iterator<Item = &RerankEvent> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Rerank(r) => Some(r),
            _ => None,
        })
    }
}

pub fn write_events<'a>(out: &mut impl Write, events: impl IntoIterator<Item = &'a LogEvent>) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_ndjson(events: &[LogEvent]) -> Result<String> {
    let mut buf = Vec::new();
    write_events(&mut buf, events)?;
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

pub fn read_events(input: impl BufRead) -> Result<Vec<LogEvent>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("log line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Splits a flat event stream into sessions, in order of first appearance.
pub fn group_sessions(events: Vec<LogEvent>) -> Result<Vec<SessionLog>> {
    let mut order: Vec<u64> = Vec::new();
    let mut by_id: std::collections::HashMap<u64, Vec<LogEvent>> = Default::default();
    for e in events {
        let id = e.session_id();
        if let LogEvent::SessionStart(_) = e {
            if by_id.contains_key(&id) {
                return Err(Error::Format(format!("session {id} started twice")));
            }
            order.push(id);
        } else if !by_id.contains_key(&id) {
            return Err(Error::Format(format!("event for session {id} before its start")));
        }
        by_id.entry(id).or_default().push(e);
    }
    Ok(order
        .into_iter()
        .map(|id| SessionLog {
            events: by_id.remove(&id).unwrap_or_default(),
        })
        .collect())
}
