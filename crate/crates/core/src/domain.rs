//! Value types shared by the feature pipeline, the model, the re-ranker and
//! the session simulator, plus the bounded real-time watch history.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Durations above this are clamped before any encoding.
pub const MAX_DURATION_S: f64 = 1800.0;

/// Default capacity of the real-time watched list.
pub const DEFAULT_HISTORY_LEN: usize = 20;

/// Effective-view watch-time threshold by duration bucket: `(upper bound, threshold)`.
/// Buckets are `< 15 s`, `15..=600 s` and `> 600 s`.
pub const EFFECTIVE_VIEW_THRESHOLDS: [(f64, f64); 3] = [
    (15.0, 5.0),
    (600.0, 10.0),
    (f64::INFINITY, 20.0),
];

/// Watch times shorter than this count as a skip.
pub const SKIP_WATCH_S: f64 = 1.0;

pub type VideoId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: VideoId,
    pub category_id: u32,
    pub duration_s: f64,
}

impl VideoMeta {
    pub fn clamped_duration(&self) -> f64 {
        self.duration_s.clamp(0.0, MAX_DURATION_S)
    }
}

/// Engagement rates predicted by the server-side ranking stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerScores {
    pub p_effective_view: f64,
    pub p_like: f64,
    pub p_follow: f64,
}

impl ServerScores {
    pub const RATES: [&'static str; 3] = ["effective_view", "like", "follow"];

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_effective_view, self.p_like, self.p_follow]
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|p| (0.0..=1.0).contains(p))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub effective_view: bool,
    pub like: bool,
    pub follow: bool,
    pub share: bool,
    pub watch_time_s: f64,
}

impl Feedback {
    /// Compact 4-bit code of the explicit and implicit feedback flags.
    pub fn code(&self) -> u32 {
        (self.effective_view as u32)
            | (self.like as u32) << 1
            | (self.follow as u32) << 2
            | (self.share as u32) << 3
    }

    pub fn is_skip(&self) -> bool {
        self.watch_time_s < SKIP_WATCH_S
    }

    pub fn is_positive(&self) -> bool {
        self.like || self.follow || self.share
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatchedRecord {
    pub video: VideoMeta,
    pub server_scores: ServerScores,
    pub feedback: Feedback,
    pub impression_ts_ms: u64,
    pub impression_pos: u32,
}

/// The client-maintained list of consumed videos, newest last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatchHistory {
    records: VecDeque<WatchedRecord>,
    max_len: usize,
}

impl Default for WatchHistory {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_LEN)
    }
}

impl WatchHistory {
    pub fn new(max_len: usize) -> Self {
        assert!(max_len > 0, "history capacity must be positive");
        Self {
            records: VecDeque::with_capacity(max_len),
            max_len,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&WatchedRecord> {
        self.records.back()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &WatchedRecord> + ExactSizeIterator {
        self.records.iter()
    }

    /// Appends a consumed video, evicting the oldest when full.
    pub fn push_watched(&mut self, record: WatchedRecord) -> Result<()> {
        if let Some(last) = self.records.back() {
            if record.impression_pos <= last.impression_pos {
                return Err(Error::NonMonotonePosition {
                    last: last.impression_pos,
                    got: record.impression_pos,
                });
            }
            if record.impression_ts_ms < last.impression_ts_ms {
                return Err(Error::Clock(format!(
                    "impression at {} ms precedes previous impression at {} ms",
                    record.impression_ts_ms, last.impression_ts_ms
                )));
            }
        }
        if record.impression_pos == 0 {
            return Err(Error::NonMonotonePosition { last: 0, got: 0 });
        }
        if self.records.len() == self.max_len {
            self.records.pop_front();
        }
        self.records.push_back(record);
        Ok(())
    }

    /// Copy of the history restricted to records impressed before `pos`.
    pub fn before_position(&self, pos: u32) -> WatchHistory {
        WatchHistory {
            records: self
                .records
                .iter()
                .filter(|r| r.impression_pos < pos)
                .cloned()
                .collect(),
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetCondition {
    Wifi,
    CellGood,
    CellPoor,
    OfflineRisk,
}

impl NetCondition {
    pub const ALL: [NetCondition; 4] = [
        NetCondition::Wifi,
        NetCondition::CellGood,
        NetCondition::CellPoor,
        NetCondition::OfflineRisk,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientContext {
    pub net_condition: NetCondition,
    pub next_impression_pos: u32,
    pub now_ts_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub video: VideoMeta,
    pub server_scores: ServerScores,
    pub buffered_len_s: f64,
    pub server_rank: u32,
}

/// Parameters of one re-rank invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub beam_size_k: usize,
    pub n_show: usize,
    /// `None` disables early stopping.
    pub stability_threshold_t: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub max_steps: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            beam_size_k: 4,
            n_show: 1,
            stability_threshold_t: Some(0.95),
            alpha: 1.0,
            beta: 1.0,
            max_steps: 5,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size_k == 0 || self.n_show == 0 || self.max_steps == 0 {
            return Err(Error::Config(
                "beam_size_k, n_show and max_steps must be at least 1".into(),
            ));
        }
        if let Some(t) = self.stability_threshold_t {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!(
                    "stability threshold must lie in (0, 1], got {t}"
                )));
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pagination: the client requests a new page after consuming `page_consume_m`
/// videos and the server returns `page_return_total` candidates per page.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub page_consume_m: usize,
    pub page_return_total: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            page_consume_m: 6,
            page_return_total: 9,
        }
    }
}

impl ProtocolConfig {
    pub fn new(page_consume_m: usize, page_return_total: usize) -> Result<Self> {
        let cfg = Self {
            page_consume_m,
            page_return_total,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.page_consume_m == 0 || self.page_return_total < self.page_consume_m {
            return Err(Error::Config(format!(
                "need 1 <= page_consume_m <= page_return_total, got ({}, {})",
                self.page_consume_m, self.page_return_total
            )));
        }
        Ok(())
    }

    /// Extra candidates the server sends beyond those consumed per page.
    pub fn extra(&self) -> usize {
        self.page_return_total - self.page_consume_m
    }
}

pub fn effective_view_threshold(duration_s: f64) -> f64 {
    let d = duration_s.clamp(0.0, MAX_DURATION_S);
    if d < EFFECTIVE_VIEW_THRESHOLDS[0].0 {
        EFFECTIVE_VIEW_THRESHOLDS[0].1
    } else if d <= EFFECTIVE_VIEW_THRESHOLDS[1].0 {
        EFFECTIVE_VIEW_THRESHOLDS[1].1
    } else {
        EFFECTIVE_VIEW_THRESHOLDS[2].1
    }
}

pub fn effective_view_label(watch_time_s: f64, duration_s: f64) -> bool {
    watch_time_s > 0.0 && watch_time_s >= effective_view_threshold(duration_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn record(pos: u32) -> WatchedRecord {
        WatchedRecord {
            video: VideoMeta {
                video_id: pos as u64,
                category_id: pos % 3,
                duration_s: 30.0,
            },
            server_scores: ServerScores {
                p_effective_view: 0.5,
                p_like: 0.1,
                p_follow: 0.01,
            },
            feedback: Feedback::default(),
            impression_ts_ms: 1_000 * pos as u64,
            impression_pos: pos,
        }
    }

    #[test]
    fn push_into_empty_history() {
        let mut h = WatchHistory::new(8);
        h.push_watched(record(1)).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.last().unwrap().impression_pos, 1);
    }

    #[test]
    fn full_history_evicts_oldest() {
        let mut h = WatchHistory::new(8);
        for p in 1..=8 {
            h.push_watched(record(p)).unwrap();
        }
        h.push_watched(record(9)).unwrap();
        let positions: Vec<u32> = h.iter().map(|r| r.impression_pos).collect();
        assert_eq!(positions, (2..=9).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_non_monotone_position() {
        let mut h = WatchHistory::new(8);
        h.push_watched(record(7)).unwrap();
        let err = h.push_watched(record(5)).unwrap_err();
        assert!(matches!(err, Error::NonMonotonePosition { last: 7, got: 5 }));
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn effective_view_examples() {
        assert!(effective_view_label(6.0, 10.0));
        assert!(!effective_view_label(0.0, 10.0));
        assert!(!effective_view_label(0.0, 2000.0));
        assert!(!effective_view_label(9.9, 120.0));
        assert!(effective_view_label(10.0, 120.0));
        assert!(!effective_view_label(19.0, 900.0));
        assert_eq!(effective_view_threshold(14.99), 5.0);
        assert_eq!(effective_view_threshold(15.0), 10.0);
        assert_eq!(effective_view_threshold(600.0), 10.0);
        assert_eq!(effective_view_threshold(5000.0), 20.0);
    }

    #[test]
    fn protocol_config_extra() {
        let p = ProtocolConfig::new(6, 9).unwrap();
        assert_eq!(p.extra(), 3);
        assert!(ProtocolConfig::new(6, 5).is_err());
        assert!(ProtocolConfig::new(0, 5).is_err());
    }

    #[test]
    fn serialization_is_byte_stable() {
        let mut h = WatchHistory::new(4);
        for p in 1..=6 {
            h.push_watched(record(p)).unwrap();
        }
        let a = serde_json::to_string(&h).unwrap();
        let back: WatchHistory = serde_json::from_str(&a).unwrap();
        assert_eq!(back, h);
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
        let cand = Candidate {
            video: record(1).video,
            server_scores: record(1).server_scores,
            buffered_len_s: 3.25,
            server_rank: 2,
        };
        let s = serde_json::to_string(&cand).unwrap();
        assert_eq!(serde_json::from_str::<Candidate>(&s).unwrap(), cand);
        let ctx = ClientContext {
            net_condition: NetCondition::CellPoor,
            next_impression_pos: 3,
            now_ts_ms: 77,
        };
        let s = serde_json::to_string(&ctx).unwrap();
        assert!(s.contains("\"cell_poor\""));
        assert_eq!(serde_json::from_str::<ClientContext>(&s).unwrap(), ctx);
    }

    proptest! {
        #[test]
        fn history_never_exceeds_capacity(cap in 1usize..12, gaps in proptest::collection::vec(0u32..3, 0..60)) {
            let mut h = WatchHistory::new(cap);
            let mut pos = 0u32;
            for g in gaps {
                pos += g;
                let _ = h.push_watched(record(pos));
                prop_assert!(h.len() <= cap);
                let ps: Vec<u32> = h.iter().map(|r| r.impression_pos).collect();
                prop_assert!(ps.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn effective_view_monotone_in_watch_time(d in 0.5f64..3000.0, a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(!effective_view_label(lo, d) || effective_view_label(hi, d));
        }
    }
}
