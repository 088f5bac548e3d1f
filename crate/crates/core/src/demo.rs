//! Interactive demo service: one live session per connection, driven by a
//! human instead of the synthetic user.
//!
//! Messages are JSON envelopes `{"seq": n, "kind": "...", "payload": {...}}`,
//! one per line over plain TCP, or one per text frame after a WebSocket
//! upgrade. `seq` is strictly increasing per direction and connection.
//!
//! Client to service: `session_start`, `feedback`.
//! Service to client: `session_start`, `page_fetch`, `rerank_result`,
//! `next_video`, `metrics`, `error`.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{effective_view_label, Candidate, Feedback, RerankConfig, ServerScores, VideoMeta};
use crate::error::{Error, Result};
use crate::features::SCHEMA_VERSION;
use crate::model::{ModelParams, PredictionTriple};
use crate::rerank::{greedy_rank, ContextScorer, RerankRequest};
use crate::sim::log::{write_events, PageFetchEvent, RerankEvent};
use crate::sim::session::{Arm, SessionEngine, SessionSpec};
use crate::sim::{derive_seed, ServerStub, SimConfig, SyntheticUser, VideoPool};

pub const KINDS: [&str; 7] = [
    "session_start",
    "next_video",
    "feedback",
    "rerank_result",
    "page_fetch",
    "metrics",
    "error",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMessage {
    pub seq: u64,
    pub kind: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionStartRequest {
    pub user_id: Option<u64>,
    pub seed: Option<u64>,
    pub arm: Option<Arm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub video_id: u64,
    pub watch_time_s: f64,
    #[serde(default)]
    pub like: bool,
    #[serde(default)]
    pub follow: bool,
    #[serde(default)]
    pub share: bool,
    /// `true` to move on to the next video, `false` to leave the session.
    #[serde(default = "yes")]
    pub swipe: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub video: VideoMeta,
    pub server_scores: ServerScores,
    pub buffered_len_s: f64,
    pub server_rank: u32,
}

impl From<&Candidate> for CandidateView {
    fn from(c: &Candidate) -> Self {
        Self {
            video: c.video.clone(),
            server_scores: c.server_scores,
            buffered_len_s: c.buffered_len_s,
            server_rank: c.server_rank,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrediction {
    pub video_id: u64,
    #[serde(flatten)]
    pub prediction: PredictionTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub impression_pos: u32,
    pub queue: Vec<CandidateView>,
    pub order_before: Vec<u64>,
    pub order_after: Vec<u64>,
    pub chosen: u64,
    /// Predictions of every queued candidate with an empty ordered prefix.
    pub predictions: Vec<CandidatePrediction>,
    pub steps: usize,
    pub stability_trace: Vec<f64>,
    pub best_list_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextVideo {
    pub impression_pos: u32,
    pub page_index: u32,
    #[serde(flatten)]
    pub candidate: CandidateView,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub depth: u32,
    pub likes: u32,
    pub effective_views: u32,
    pub follows: u32,
    /// Impressions where the shown video was not the server's first choice.
    pub reordered: u32,
    pub pages: u32,
    pub finished: bool,
}

/// Read-only state shared by every connection.
pub struct DemoShared {
    pub pool: VideoPool,
    pub sim: SimConfig,
    pub rerank: RerankConfig,
    pub model: Option<ModelParams>,
    pub model_digest: Option<String>,
    pub default_arm: Arm,
    pub seed: u64,
    /// Where finished or abandoned session logs are written, if anywhere.
    pub record_dir: Option<PathBuf>,
}

/// Protocol handler of one connection.
pub struct DemoSession<'a> {
    shared: &'a DemoShared,
    engine: Option<SessionEngine<'a>>,
    metrics: SessionMetrics,
    out_seq: u64,
    in_seq: Option<u64>,
    connection: u64,
}

impl<'a> DemoSession<'a> {
    pub fn new(shared: &'a DemoShared, connection: u64) -> Self {
        Self {
            shared,
            engine: None,
            metrics: SessionMetrics::default(),
            out_seq: 0,
            in_seq: None,
            connection,
        }
    }

    fn message(&mut self, kind: &str, payload: Value) -> DemoMessage {
        self.out_seq += 1;
        DemoMessage {
            seq: self.out_seq,
            kind: kind.to_string(),
            payload,
        }
    }

    fn error(&mut self, text: impl Into<String>) -> Vec<DemoMessage> {
        let m = self.message("error", json!({ "message": text.into() }));
        vec![m]
    }

    pub fn engine(&self) -> Option<&SessionEngine<'a>> {
        self.engine.as_ref()
    }

    fn scorer(&self) -> Option<&'a dyn ContextScorer> {
        self.shared.model.as_ref().map(|m| m as &dyn ContextScorer)
    }

    /// Handles one raw line or frame.
    pub fn handle_text(&mut self, text: &str) -> Vec<DemoMessage> {
        match serde_json::from_str::<DemoMessage>(text) {
            Ok(msg) => self.handle(&msg),
            Err(e) => self.error(format!("malformed message: {e}")),
        }
    }

    pub fn handle(&mut self, msg: &DemoMessage) -> Vec<DemoMessage> {
        if self.in_seq.is_some_and(|s| msg.seq <= s) {
            return self.error(format!("seq {} is not above {}", msg.seq, self.in_seq.unwrap_or(0)));
        }
        self.in_seq = Some(msg.seq);
        let result = match msg.kind.as_str() {
            "session_start" => serde_json::from_value(msg.payload.clone())
                .map_err(|e| Error::Protocol(format!("bad session_start payload: {e}")))
                .and_then(|req| self.start(req)),
            "feedback" => serde_json::from_value(msg.payload.clone())
                .map_err(|e| Error::Protocol(format!("bad feedback payload: {e}")))
                .and_then(|req| self.feedback(req)),
            other if KINDS.contains(&other) => Err(Error::Protocol(format!("{other} is sent by the service only"))),
            other => Err(Error::Protocol(format!("unknown message kind {other:?}"))),
        };
        match result {
            Ok(out) => out,
            Err(e) => self.error(e.to_string()),
        }
    }

    fn start(&mut self, req: SessionStartRequest) -> Result<Vec<DemoMessage>> {
        if self.engine.is_some() {
            return Err(Error::Protocol("session already started on this connection".into()));
        }
        let s = self.shared;
        let arm = req.arm.unwrap_or(s.default_arm);
        if arm.needs_model() && s.model.is_none() {
            return Err(Error::Config(format!("arm {arm} needs a model")));
        }
        let user_id = req.user_id.unwrap_or(0);
        let spec = SessionSpec {
            session_id: self.connection,
            user_id,
            seed: req.seed.unwrap_or_else(|| derive_seed(s.seed, &[user_id])),
        };
        let user = SyntheticUser::new(user_id, s.pool.categories, s.sim.user.clone(), s.sim.pool.seed);
        let engine = SessionEngine::new(spec, arm, &s.sim, ServerStub::new(&s.pool, &s.sim.server), user)?;
        self.engine = Some(engine);
        self.metrics = SessionMetrics {
            pages: 1,
            ..SessionMetrics::default()
        };
        let mut out = vec![self.message(
            "session_start",
            json!({
                "schema": SCHEMA_VERSION,
                "session_id": spec.session_id,
                "user_id": user_id,
                "seed": spec.seed,
                "arm": arm,
                "model_digest": s.model_digest,
                "protocol": s.sim.protocol,
                "rerank": s.rerank,
            }),
        )];
        let first_page = self.engine.as_ref().and_then(|e| {
            e.events().iter().find_map(|ev| match ev {
                crate::sim::log::LogEvent::PageFetch(p) => Some(p.clone()),
                _ => None,
            })
        });
        if let Some(p) = first_page {
            out.push(self.page_message(&p));
        }
        out.extend(self.advance()?);
        Ok(out)
    }

    fn page_message(&mut self, p: &PageFetchEvent) -> DemoMessage {
        self.message("page_fetch", serde_json::to_value(p).expect("serializable"))
    }

    /// Re-ranks the queue and emits the result and the next video.
    fn advance(&mut self) -> Result<Vec<DemoMessage>> {
        let scorer = self.scorer();
        let rerank = self.shared.rerank.clone();
        let engine = self.engine.as_mut().ok_or_else(|| Error::Protocol("no session".into()))?;
        let queue: Vec<Candidate> = engine.queue().to_vec();
        let predictions = match scorer {
            Some(sc) => {
                let ctx = engine.context();
                let req = RerankRequest {
                    candidates: &queue,
                    history: engine.history(),
                    ctx: &ctx,
                };
                greedy_rank(&req, sc, rerank.alpha, rerank.beta)?.predictions
            }
            None => Vec::new(),
        };
        let decision = engine.next_impression(scorer, &rerank)?;
        let pos = engine.next_pos();
        let page_index = engine.page_index();
        let order_before: Vec<u64> = queue.iter().map(|c| c.video.video_id).collect();
        let RerankEvent {
            queue_after,
            steps,
            stability_trace,
            best_list_reward,
            ..
        } = decision.rerank.clone().unwrap_or(RerankEvent {
            session_id: 0,
            impression_pos: pos,
            queue_before: order_before.clone(),
            queue_after: order_before.clone(),
            chosen: decision.candidate.video.video_id,
            steps: 0,
            stability_trace: Vec::new(),
            best_list_reward: 0.0,
            model_evaluations: 0,
        });
        if order_before.first() != Some(&decision.candidate.video.video_id) {
            self.metrics.reordered += 1;
        }
        let result = RerankResult {
            impression_pos: pos,
            queue: queue.iter().map(CandidateView::from).collect(),
            order_before,
            order_after: queue_after,
            chosen: decision.candidate.video.video_id,
            predictions: queue
                .iter()
                .zip(&predictions)
                .map(|(c, p)| CandidatePrediction {
                    video_id: c.video.video_id,
                    prediction: *p,
                })
                .collect(),
            steps,
            stability_trace,
            best_list_reward,
        };
        let next = NextVideo {
            impression_pos: pos,
            page_index,
            candidate: CandidateView::from(&decision.candidate),
        };
        Ok(vec![
            self.message("rerank_result", serde_json::to_value(result)?),
            self.message("next_video", serde_json::to_value(next)?),
        ])
    }

    fn feedback(&mut self, req: FeedbackRequest) -> Result<Vec<DemoMessage>> {
        let engine = self.engine.as_mut().ok_or_else(|| Error::Protocol("session not started".into()))?;
        let current = engine
            .current()
            .ok_or_else(|| Error::Protocol("no video is currently shown".into()))?;
        if current.video.video_id != req.video_id {
            return Err(Error::Protocol(format!(
                "feedback for video {} but video {} is shown",
                req.video_id, current.video.video_id
            )));
        }
        if !(req.watch_time_s >= 0.0 && req.watch_time_s.is_finite()) {
            return Err(Error::Protocol("watch_time_s must be finite and non-negative".into()));
        }
        let duration = current.video.duration_s;
        let watch_time_s = req.watch_time_s.min(duration);
        let feedback = Feedback {
            effective_view: effective_view_label(watch_time_s, duration),
            like: req.like,
            follow: req.follow,
            share: req.share,
            watch_time_s,
        };
        let page = engine.record_feedback(feedback.clone(), req.swipe)?;
        let m = &mut self.metrics;
        m.depth += 1;
        m.likes += feedback.like as u32;
        m.effective_views += feedback.effective_view as u32;
        m.follows += feedback.follow as u32;
        let finished = engine.is_finished();
        let mut out = Vec::new();
        if let Some(p) = page {
            self.metrics.pages += 1;
            out.push(self.page_message(&p));
        }
        if finished {
            self.metrics.finished = true;
        } else {
            out.extend(self.advance()?);
        }
        let metrics = serde_json::to_value(&self.metrics)?;
        out.push(self.message("metrics", metrics));
        Ok(out)
    }

    /// Writes the session log if a record directory is configured.
    pub fn persist(&self) -> Result<Option<PathBuf>> {
        let (Some(dir), Some(engine)) = (&self.shared.record_dir, &self.engine) else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("session-{}.ndjson", self.connection));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write_events(&mut file, engine.events())?;
        file.flush()?;
        Ok(Some(path))
    }
}

fn serve_lines(shared: &DemoShared, stream: TcpStream, connection: u64) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    let mut session = DemoSession::new(shared, connection);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for msg in session.handle_text(&line) {
            serde_json::to_writer(&mut writer, &msg)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
    }
    session.persist()?;
    Ok(())
}

fn serve_websocket(shared: &DemoShared, stream: TcpStream, connection: u64) -> Result<()> {
    use tungstenite::Message;
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Protocol(format!("websocket handshake: {e}")))?;
    let mut session = DemoSession::new(shared, connection);
    loop {
        let msg = match ws.read() {
            Ok(m) => m,
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => {
                session.persist()?;
                return Err(Error::Protocol(format!("websocket: {e}")));
            }
        };
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        for out in session.handle_text(&text) {
            ws.send(Message::text(serde_json::to_string(&out)?))
                .map_err(|e| Error::Protocol(format!("websocket: {e}")))?;
        }
    }
    session.persist()?;
    Ok(())
}

/// Serves one connection, choosing the transport from its first bytes.
pub fn serve_connection(shared: &DemoShared, stream: TcpStream, connection: u64) -> Result<()> {
    let mut head = [0u8; 4];
    let n = stream.peek(&mut head)?;
    if &head[..n] == b"GET " {
        serve_websocket(shared, stream, connection)
    } else {
        serve_lines(shared, stream, connection)
    }
}

/// Accepts connections until the listener fails; each connection runs on
/// its own thread. `max_connections` bounds the total accepted.
pub fn serve(listener: TcpListener, shared: Arc<DemoShared>, max_connections: Option<u64>) -> Result<()> {
    let mut handles = Vec::new();
    let mut connection = 0u64;
    for stream in listener.incoming() {
        let stream = stream?;
        connection += 1;
        let shared = Arc::clone(&shared);
        let id = connection;
        handles.push(std::thread::spawn(move || {
            if let Err(e) = serve_connection(&shared, stream, id) {
                eprintln!("connection {id}: {e}");
            }
        }));
        if max_connections.is_some_and(|m| connection >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

/// Example of every message kind, for the schema document.
pub fn schema_examples() -> Vec<DemoMessage> {
    let video = VideoMeta {
        video_id: 42,
        category_id: 3,
        duration_s: 12.5,
    };
    let scores = ServerScores {
        p_effective_view: 0.61,
        p_like: 0.08,
        p_follow: 0.01,
    };
    let candidate = CandidateView {
        video: video.clone(),
        server_scores: scores,
        buffered_len_s: 4.0,
        server_rank: 0,
    };
    let payloads = [
        json!({ "user_id": 7, "seed": 1, "arm": "context_aware" }),
        serde_json::to_value(NextVideo {
            impression_pos: 1,
            page_index: 0,
            candidate: candidate.clone(),
        })
        .expect("serializable"),
        json!({ "video_id": 42, "watch_time_s": 6.0, "like": true, "follow": false, "share": false, "swipe": true }),
        serde_json::to_value(RerankResult {
            impression_pos: 2,
            queue: vec![candidate.clone()],
            order_before: vec![42],
            order_after: vec![42],
            chosen: 42,
            predictions: vec![CandidatePrediction {
                video_id: 42,
                prediction: PredictionTriple {
                    p_has_next: 0.93,
                    p_effective_view: 0.58,
                    p_like: 0.11,
                },
            }],
            steps: 1,
            stability_trace: vec![1.0],
            best_list_reward: 0.69,
        })
        .expect("serializable"),
        json!({ "session_id": 1, "page_index": 1, "consumed": 6, "request_ts_ms": 1_700_000_060_000u64, "candidates": [], "discarded": [17, 23, 31] }),
        serde_json::to_value(SessionMetrics {
            depth: 6,
            likes: 1,
            effective_views: 4,
            follows: 0,
            reordered: 2,
            pages: 2,
            finished: false,
        })
        .expect("serializable"),
        json!({ "message": "feedback for video 41 but video 42 is shown" }),
    ];
    KINDS
        .iter()
        .zip(payloads)
        .enumerate()
        .map(|(i, (kind, payload))| DemoMessage {
            seq: i as u64 + 1,
            kind: kind.to_string(),
            payload,
        })
        .collect()
}
