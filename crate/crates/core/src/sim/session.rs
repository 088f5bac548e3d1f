//! The client session loop and its protocol validator.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::log::{
    ImpressionEvent, LogEvent, PageCandidate, PageFetchEvent, RerankEvent, SessionEndEvent, SessionLog,
    SessionStartEvent,
};
use super::pool::VideoPool;
use super::server::ServerStub;
use super::user::{net_sequence, OutcomeDraws, SyntheticUser};
use super::{derive_seed, SimConfig};
use crate::domain::{Candidate, ClientContext, Feedback, NetCondition, ProtocolConfig, RerankConfig, WatchHistory, WatchedRecord};
use crate::error::{Error, Result};
use crate::rerank::{adaptive_beam_search, greedy_rank, ContextScorer, RerankRequest};

/// How the next video is picked from the page queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    ServerOrder,
    Greedy,
    ContextAware,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::ServerOrder, Arm::Greedy, Arm::ContextAware];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::ServerOrder => "server_order",
            Arm::Greedy => "greedy",
            Arm::ContextAware => "context_aware",
        }
    }

    pub fn needs_model(self) -> bool {
        self != Arm::ServerOrder
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

/// Identity and randomness of one session; shared across arms in paired runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_id: u64,
    pub user_id: u64,
    pub seed: u64,
}

const EPOCH_MS: u64 = 1_700_000_000_000;

/// The re-ranking decision for one impression slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub candidate: Candidate,
    pub rerank: Option<RerankEvent>,
}

/// Session state machine shared by the simulator and the demo service.
pub struct SessionEngine<'a> {
    spec: SessionSpec,
    arm: Arm,
    cfg: &'a SimConfig,
    stub: ServerStub<'a>,
    /// The server's view of the user; its drift is kept current by the
    /// feedback recorded here.
    user: SyntheticUser,
    history: WatchHistory,
    nets: Vec<NetCondition>,
    queue: Vec<Candidate>,
    page_index: u32,
    consumed: u32,
    /// Every video delivered in any page so far; never served again.
    served: HashSet<u64>,
    now_ts_ms: u64,
    current: Option<Candidate>,
    finished: bool,
    likes: u32,
    effective_views: u32,
    follows: u32,
    events: Vec<LogEvent>,
}

impl<'a> SessionEngine<'a> {
    pub fn new(spec: SessionSpec, arm: Arm, cfg: &'a SimConfig, stub: ServerStub<'a>, user: SyntheticUser) -> Result<Self> {
        cfg.validate()?;
        let start_ts_ms = EPOCH_MS + derive_seed(spec.seed, &[0]) % 86_400_000;
        let mut engine = Self {
            spec,
            arm,
            cfg,
            stub,
            history: WatchHistory::new(cfg.history_len),
            nets: net_sequence(&user.params, spec.seed, cfg.max_depth as usize + 1),
            user,
            queue: Vec::new(),
            page_index: 0,
            consumed: 0,
            served: HashSet::new(),
            now_ts_ms: start_ts_ms,
            current: None,
            finished: false,
            likes: 0,
            effective_views: 0,
            follows: 0,
            events: vec![LogEvent::SessionStart(SessionStartEvent {
                session_id: spec.session_id,
                user_id: spec.user_id,
                arm,
                seed: spec.seed,
                start_ts_ms,
            })],
        };
        engine.fetch_page()?;
        Ok(engine)
    }

    fn fetch_page(&mut self) -> Result<()> {
        let page_index = if self.consumed == 0 { 0 } else { self.page_index + 1 };
        let discarded: Vec<u64> = self.queue.drain(..).map(|c| c.video.video_id).collect();
        let page = self.stub.respond(
            &self.user,
            self.spec.seed,
            page_index,
            &self.served,
            &self.cfg.protocol,
            self.net(),
        )?;
        self.page_index = page_index;
        self.served.extend(page.iter().map(|c| c.video.video_id));
        self.events.push(LogEvent::PageFetch(PageFetchEvent {
            session_id: self.spec.session_id,
            page_index,
            consumed: self.consumed,
            request_ts_ms: self.now_ts_ms,
            candidates: page.iter().map(PageCandidate::from).collect(),
            discarded,
        }));
        self.queue = page;
        Ok(())
    }

    pub fn spec(&self) -> SessionSpec {
        self.spec
    }

    pub fn arm(&self) -> Arm {
        self.arm
    }

    pub fn history(&self) -> &WatchHistory {
        &self.history
    }

    pub fn queue(&self) -> &[Candidate] {
        &self.queue
    }

    pub fn user(&self) -> &SyntheticUser {
        &self.user
    }

    pub fn consumed(&self) -> u32 {
        self.consumed
    }

    pub fn page_index(&self) -> u32 {
        self.page_index
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn current(&self) -> Option<&Candidate> {
        self.current.as_ref()
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    /// Position of the next impression.
    pub fn next_pos(&self) -> u32 {
        self.consumed + 1
    }

    /// Network condition at the next impression.
    pub fn net(&self) -> NetCondition {
        self.nets[(self.consumed as usize).min(self.nets.len() - 1)]
    }

    pub fn context(&self) -> ClientContext {
        ClientContext {
            net_condition: self.net(),
            next_impression_pos: self.next_pos(),
            now_ts_ms: self.now_ts_ms,
        }
    }

    /// Picks the next video according to the arm and marks it current.
    pub fn next_impression(&mut self, scorer: Option<&dyn ContextScorer>, rerank: &RerankConfig) -> Result<Decision> {
        if self.finished {
            return Err(Error::Protocol("session already ended".into()));
        }
        if self.current.is_some() {
            return Err(Error::Protocol("previous impression has no feedback yet".into()));
        }
        if self.queue.is_empty() {
            return Err(Error::Protocol("candidate queue is empty".into()));
        }
        let ctx = self.context();
        let req = RerankRequest {
            candidates: &self.queue,
            history: &self.history,
            ctx: &ctx,
        };
        let ids = |order: &[usize]| -> Vec<u64> { order.iter().map(|&i| self.queue[i].video.video_id).collect() };
        let queue_before = ids(&(0..self.queue.len()).collect::<Vec<_>>());
        let (index, event) = match self.arm {
            Arm::ServerOrder => (0, None),
            Arm::Greedy => {
                let scorer = scorer.ok_or_else(|| Error::Config("greedy arm needs a model".into()))?;
                let out = greedy_rank(&req, scorer, rerank.alpha, rerank.beta)?;
                let chosen = out.order[0];
                let best = &out.predictions[chosen];
                let event = RerankEvent {
                    session_id: self.spec.session_id,
                    impression_pos: ctx.next_impression_pos,
                    queue_before,
                    queue_after: ids(&out.order),
                    chosen: self.queue[chosen].video.video_id,
                    steps: 1,
                    stability_trace: Vec::new(),
                    best_list_reward: rerank.alpha * best.p_effective_view + rerank.beta * best.p_like,
                    model_evaluations: self.queue.len(),
                };
                (chosen, Some(event))
            }
            Arm::ContextAware => {
                let scorer = scorer.ok_or_else(|| Error::Config("context-aware arm needs a model".into()))?;
                let cfg = RerankConfig {
                    n_show: rerank.n_show.min(self.queue.len()),
                    ..rerank.clone()
                };
                let out = adaptive_beam_search(&req, scorer, &cfg)?;
                let best = out.best();
                let mut after = best.indices.clone();
                after.extend((0..self.queue.len()).filter(|i| !best.indices.contains(i)));
                let chosen = out.order[0];
                let event = RerankEvent {
                    session_id: self.spec.session_id,
                    impression_pos: ctx.next_impression_pos,
                    queue_before,
                    queue_after: ids(&after),
                    chosen: self.queue[chosen].video.video_id,
                    steps: out.steps,
                    stability_trace: out.stability_trace.clone(),
                    best_list_reward: best.list_reward,
                    model_evaluations: out.model_evaluations,
                };
                (chosen, Some(event))
            }
        };
        if let Some(e) = &event {
            self.events.push(LogEvent::Rerank(e.clone()));
        }
        let candidate = self.queue.remove(index);
        self.current = Some(candidate.clone());
        Ok(Decision {
            candidate,
            rerank: event,
        })
    }

    /// Records feedback on the current video. Fetches the next page at the
    /// consumption cadence; ends the session when `has_next` is false.
    /// Returns the page fetch event if one happened.
    pub fn record_feedback(&mut self, feedback: Feedback, has_next: bool) -> Result<Option<PageFetchEvent>> {
        let candidate = self
            .current
            .take()
            .ok_or_else(|| Error::Protocol("no video is currently shown".into()))?;
        if !(feedback.watch_time_s >= 0.0 && feedback.watch_time_s.is_finite()) {
            self.current = Some(candidate);
            return Err(Error::Protocol("watch time must be finite and non-negative".into()));
        }
        let pos = self.next_pos();
        let has_next = has_next && pos < self.cfg.max_depth;
        let net = self.net();
        let record = WatchedRecord {
            video: candidate.video.clone(),
            server_scores: candidate.server_scores,
            feedback: feedback.clone(),
            impression_ts_ms: self.now_ts_ms,
            impression_pos: pos,
        };
        self.history.push_watched(record.clone())?;
        self.user.update_drift(candidate.video.category_id, &feedback);
        self.likes += feedback.like as u32;
        self.effective_views += feedback.effective_view as u32;
        self.follows += feedback.follow as u32;
        self.events.push(LogEvent::Impression(ImpressionEvent {
            session_id: self.spec.session_id,
            record,
            buffered_len_s: candidate.buffered_len_s,
            server_rank: candidate.server_rank,
            page_index: self.page_index,
            net_condition: net,
            has_next,
        }));
        self.consumed = pos;
        self.now_ts_ms += (feedback.watch_time_s * 1000.0).round() as u64 + self.cfg.swipe_gap_ms;
        if !has_next {
            self.finished = true;
            self.events.push(LogEvent::SessionEnd(SessionEndEvent {
                session_id: self.spec.session_id,
                depth: self.consumed,
                likes: self.likes,
                effective_views: self.effective_views,
                follows: self.follows,
            }));
            return Ok(None);
        }
        if self.consumed % self.cfg.protocol.page_consume_m as u32 == 0 {
            self.fetch_page()?;
            if let Some(LogEvent::PageFetch(p)) = self.events.last() {
                return Ok(Some(p.clone()));
            }
        }
        Ok(None)
    }

    pub fn into_log(self) -> SessionLog {
        SessionLog { events: self.events }
    }
}

/// Runs one simulated session to the user's exit.
pub fn run_session(
    arm: Arm,
    spec: SessionSpec,
    pool: &VideoPool,
    cfg: &SimConfig,
    scorer: Option<&dyn ContextScorer>,
    rerank: &RerankConfig,
) -> Result<SessionLog> {
    let user = SyntheticUser::new(spec.user_id, pool.categories, cfg.user.clone(), cfg.pool.seed);
    let mut engine = SessionEngine::new(spec, arm, cfg, ServerStub::new(pool, &cfg.server), user)?;
    while !engine.is_finished() {
        let decision = engine.next_impression(scorer, rerank)?;
        let video = pool
            .get(decision.candidate.video.video_id)
            .ok_or_else(|| Error::Protocol("candidate not in pool".into()))?;
        let pos = engine.next_pos();
        let draws = OutcomeDraws::for_impression(spec.seed, pos, video.meta.video_id);
        let (feedback, has_next) = engine.user().sample_feedback(video, pos - 1, engine.net(), &draws);
        engine.record_feedback(feedback, has_next)?;
    }
    Ok(engine.into_log())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub impressions: u32,
    pub pages: u32,
    pub discarded: u32,
    /// Consumed counts at which pages were requested.
    pub fetch_points: Vec<u32>,
    pub complete: bool,
}

fn violation(msg: impl Into<String>) -> Error {
    Error::Protocol(msg.into())
}

/// Checks a session log against the pagination protocol. Incomplete logs
/// (no end event yet) are accepted when `require_end` is false.
pub fn validate_session(log: &SessionLog, protocol: &ProtocolConfig, require_end: bool) -> Result<ValidationSummary> {
    let start = log.start().ok_or_else(|| violation("log does not begin with session_start"))?;
    let m = protocol.page_consume_m as u32;
    let mut summary = ValidationSummary::default();
    let mut page: Vec<PageCandidate> = Vec::new();
    let mut unshown: Vec<u64> = Vec::new();
    let mut shown = HashSet::new();
    let mut served = HashSet::new();
    let mut pending_rerank: Option<&RerankEvent> = None;
    let mut last_ts = 0u64;
    let mut ended = false;
    let mut exited = false;
    let (mut likes, mut evs, mut follows) = (0u32, 0u32, 0u32);
    for (i, event) in log.events.iter().enumerate() {
        if event.session_id() != start.session_id {
            return Err(violation(format!("event {i} belongs to another session")));
        }
        if ended {
            return Err(violation("events after session_end"));
        }
        match event {
            LogEvent::SessionStart(_) if i > 0 => return Err(violation("second session_start")),
            LogEvent::SessionStart(_) => {}
            LogEvent::PageFetch(p) => {
                if exited {
                    return Err(violation("page fetch after exit"));
                }
                let expected_consumed = summary.pages * m;
                if p.consumed != expected_consumed || summary.impressions != expected_consumed {
                    return Err(violation(format!(
                        "page {} fetched at consumed {} (expected {expected_consumed})",
                        p.page_index, p.consumed
                    )));
                }
                if p.page_index != summary.pages {
                    return Err(violation(format!("page index {} out of sequence", p.page_index)));
                }
                if p.candidates.len() != protocol.page_return_total {
                    return Err(violation(format!("page has {} candidates", p.candidates.len())));
                }
                if p.candidates.iter().enumerate().any(|(r, c)| c.server_rank as usize != r) {
                    return Err(violation("page candidates out of server order"));
                }
                if p.candidates.iter().any(|c| shown.contains(&c.video.video_id)) {
                    return Err(violation("page repeats an already shown video"));
                }
                if p.candidates.iter().any(|c| !served.insert(c.video.video_id)) {
                    return Err(violation("page repeats a previously served video"));
                }
                let mut expect_discard = unshown.clone();
                let mut got = p.discarded.clone();
                expect_discard.sort();
                got.sort();
                if expect_discard != got {
                    return Err(violation("discarded set differs from the unshown remainder"));
                }
                if summary.pages > 0 && got.len() != protocol.extra() {
                    return Err(violation(format!("{} candidates discarded at refresh", got.len())));
                }
                summary.discarded += got.len() as u32;
                summary.fetch_points.push(p.consumed);
                summary.pages += 1;
                page = p.candidates.clone();
                unshown = page.iter().map(|c| c.video.video_id).collect();
            }
            LogEvent::Rerank(r) => {
                if pending_rerank.is_some() {
                    return Err(violation("two reranks for one slot"));
                }
                if r.impression_pos != summary.impressions + 1 {
                    return Err(violation("rerank for the wrong position"));
                }
                if r.queue_before != unshown {
                    return Err(violation("rerank queue differs from the unshown page remainder"));
                }
                let mut after = r.queue_after.clone();
                after.sort();
                let mut before = r.queue_before.clone();
                before.sort();
                if after != before {
                    return Err(violation("rerank output is not a permutation of its queue"));
                }
                pending_rerank = Some(r);
            }
            LogEvent::Impression(imp) => {
                if exited {
                    return Err(violation("impression after exit"));
                }
                let rec = &imp.record;
                let id = rec.video.video_id;
                if rec.impression_pos != summary.impressions + 1 {
                    return Err(violation(format!("impression position {} out of sequence", rec.impression_pos)));
                }
                if summary.pages == 0 || summary.impressions >= summary.pages * m {
                    return Err(violation(format!("impression {} without a fresh page", rec.impression_pos)));
                }
                if imp.page_index + 1 != summary.pages {
                    return Err(violation("impression attributed to the wrong page"));
                }
                if !shown.insert(id) {
                    return Err(violation(format!("video {id} shown twice")));
                }
                let Some(slot) = unshown.iter().position(|u| *u == id) else {
                    return Err(violation(format!("video {id} is not in the current page")));
                };
                let source = page.iter().find(|c| c.video.video_id == id).expect("unshown is a page subset");
                if source.video != rec.video
                    || source.server_scores != rec.server_scores
                    || source.server_rank != imp.server_rank
                    || source.buffered_len_s != imp.buffered_len_s
                {
                    return Err(violation(format!("video {id} differs from its page entry")));
                }
                match (start.arm, pending_rerank.take()) {
                    (Arm::ServerOrder, None) if slot == 0 => {}
                    (Arm::ServerOrder, _) => return Err(violation("server_order arm left server order")),
                    (_, Some(r)) if r.chosen == id => {}
                    (_, Some(_)) => return Err(violation("shown video is not the rerank choice")),
                    (_, None) => return Err(violation("impression without a rerank")),
                }
                if rec.impression_ts_ms < last_ts || (summary.impressions > 0 && rec.impression_ts_ms == last_ts) {
                    return Err(violation("impression timestamps not increasing"));
                }
                if rec.feedback.effective_view != crate::domain::effective_view_label(rec.feedback.watch_time_s, rec.video.duration_s) {
                    return Err(violation("effective_view flag disagrees with watch time"));
                }
                last_ts = rec.impression_ts_ms;
                unshown.remove(slot);
                summary.impressions += 1;
                likes += rec.feedback.like as u32;
                evs += rec.feedback.effective_view as u32;
                follows += rec.feedback.follow as u32;
                exited = !imp.has_next;
            }
            LogEvent::SessionEnd(e) => {
                if !exited {
                    return Err(violation("session_end without an exit"));
                }
                if (e.depth, e.likes, e.effective_views, e.follows) != (summary.impressions, likes, evs, follows) {
                    return Err(violation("session_end totals disagree with impressions"));
                }
                ended = true;
            }
        }
        if !exited && summary.impressions > 0 && summary.impressions % m == 0 && summary.impressions == summary.pages * m {
            // The next event must be the page refresh.
            match log.events.get(i + 1) {
                Some(LogEvent::PageFetch(_)) | None => {}
                Some(_) => return Err(violation(format!("missing page fetch after {} impressions", summary.impressions))),
            }
        }
    }
    if pending_rerank.is_some() && exited {
        return Err(violation("rerank after exit"));
    }
    if require_end && !ended {
        return Err(violation("session has no end"));
    }
    summary.complete = ended;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rerank::stubs::HashedContextStub;
    use crate::sim::pool::PoolConfig;

    fn pool() -> VideoPool {
        VideoPool::generate(&PoolConfig::default()).unwrap()
    }

    fn spec(i: u64) -> SessionSpec {
        SessionSpec {
            session_id: i,
            user_id: i % 7,
            seed: derive_seed(99, &[i]),
        }
    }

    #[test]
    fn server_order_sessions_follow_server_rank() {
        let pool = pool();
        let cfg = SimConfig::default();
        for i in 0..10 {
            let log = run_session(Arm::ServerOrder, spec(i), &pool, &cfg, None, &RerankConfig::default()).unwrap();
            let summary = validate_session(&log, &cfg.protocol, true).unwrap();
            assert!(summary.impressions >= 1);
            let mut expected = 0;
            for imp in log.impressions() {
                assert_eq!(imp.server_rank, expected % 6);
                expected += 1;
            }
        }
    }

    #[test]
    fn sessions_are_deterministic() {
        let pool = pool();
        let cfg = SimConfig::default();
        let stub = HashedContextStub { seed: 4 };
        for arm in Arm::ALL {
            let a = run_session(arm, spec(3), &pool, &cfg, Some(&stub), &RerankConfig::default()).unwrap();
            let b = run_session(arm, spec(3), &pool, &cfg, Some(&stub), &RerankConfig::default()).unwrap();
            assert_eq!(a, b);
            validate_session(&a, &cfg.protocol, true).unwrap();
        }
    }

    #[test]
    fn model_arms_need_a_model() {
        let pool = pool();
        let cfg = SimConfig::default();
        assert!(run_session(Arm::Greedy, spec(1), &pool, &cfg, None, &RerankConfig::default()).is_err());
    }

    #[test]
    fn validator_rejects_duplicate_impressions() {
        let pool = pool();
        let cfg = SimConfig::default();
        let log = (0..50)
            .map(|i| run_session(Arm::ServerOrder, spec(i), &pool, &cfg, None, &RerankConfig::default()).unwrap())
            .find(|l| l.impressions().count() >= 3)
            .unwrap();
        let mut bad = log.clone();
        let positions: Vec<usize> = bad
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, LogEvent::Impression(_)))
            .map(|(i, _)| i)
            .collect();
        let first = bad.events[positions[0]].clone();
        if let (LogEvent::Impression(a), LogEvent::Impression(b)) = (&first, &mut bad.events[positions[1]]) {
            b.record.video = a.record.video.clone();
        }
        assert!(validate_session(&bad, &cfg.protocol, true).is_err());
    }

    #[test]
    fn arm_names_round_trip() {
        for arm in Arm::ALL {
            assert_eq!(arm.as_str().parse::<Arm>().unwrap(), arm);
            assert_eq!(serde_json::to_string(&arm).unwrap(), format!("\"{arm}\""));
        }
        assert!("nope".parse::<Arm>().is_err());
    }
}
