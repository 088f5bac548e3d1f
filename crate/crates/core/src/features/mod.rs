//! Feature construction: real-time crossing features between a target video
//! and the watch history, and the padded, masked bundle the model consumes.

pub mod autodis;

use serde::{Deserialize, Serialize};

use crate::domain::{Candidate, ClientContext, ServerScores, WatchHistory, WatchedRecord};
use crate::error::{Error, Result};

pub use autodis::{autodis_embed, autodis_weights, AutoDisParams};

/// Embedded in bundles and weights files; bumped whenever the encoding changes.
pub const SCHEMA_VERSION: &str = "feedrank-features/1";

/// Categorical code reserved for out-of-vocabulary values.
pub const OOV: u32 = 0;

/// Duration buckets: `floor(3 * log2(1 + d))` over clamped durations.
pub const DURATION_BUCKETS: u32 = 33;

pub const FEEDBACK_CODES: u32 = 16;
/// Feedback slot used for videos that have not been watched yet.
pub const FEEDBACK_UNOBSERVED: u32 = FEEDBACK_CODES;
/// OOV plus (category match) x (16 feedback codes + unobserved).
pub const CROSS_CODES: u32 = 1 + 2 * (FEEDBACK_CODES + 1);
pub const NET_CODES: u32 = 4;

pub const HISTORY_CODES: usize = 4;
pub const HISTORY_SCALARS: usize = 7;
pub const ORDERED_CODES: usize = 3;
pub const ORDERED_SCALARS: usize = 4;
pub const TARGET_CODES: usize = 2;
pub const TARGET_SCALARS: usize = 3;
pub const CONTEXT_CODES: usize = 1;
pub const CONTEXT_SCALARS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub history_len: usize,
    /// Equal to the maximum number of beam search steps.
    pub ordered_len: usize,
    /// Category ids `0..category_vocab` are in vocabulary.
    pub category_vocab: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            history_len: crate::domain::DEFAULT_HISTORY_LEN,
            ordered_len: 5,
            category_vocab: 40,
        }
    }
}

impl FeatureConfig {
    /// Size of the category embedding table (including OOV).
    pub fn category_codes(&self) -> u32 {
        self.category_vocab + 1
    }

    pub fn category_code(&self, category_id: u32) -> u32 {
        if category_id < self.category_vocab {
            category_id + 1
        } else {
            OOV
        }
    }
}

pub fn duration_bucket(duration_s: f64) -> u32 {
    let d = duration_s.clamp(0.0, crate::domain::MAX_DURATION_S);
    ((3.0 * (1.0 + d).log2()).floor() as u32).min(DURATION_BUCKETS - 1)
}

/// Per-rate difference between a candidate's and a history video's server scores.
pub fn pxtr_diff(candidate: &ServerScores, hist: &ServerScores) -> [f64; 3] {
    let c = candidate.as_array();
    let h = hist.as_array();
    [c[0] - h[0], c[1] - h[1], c[2] - h[2]]
}

/// Time since the history impression and the impression position gap, for a
/// target displayed at `target_pos` at time `ctx.now_ts_ms`.
pub fn recency_and_gap(
    ctx: &ClientContext,
    target_pos: u32,
    hist: &WatchedRecord,
) -> Result<(u64, u32)> {
    let since = ctx.now_ts_ms.checked_sub(hist.impression_ts_ms).ok_or_else(|| {
        Error::Clock(format!(
            "now {} ms is before impression at {} ms",
            ctx.now_ts_ms, hist.impression_ts_ms
        ))
    })?;
    if target_pos <= hist.impression_pos {
        return Err(Error::Clock(format!(
            "target position {target_pos} is not after history position {}",
            hist.impression_pos
        )));
    }
    Ok((since, target_pos - hist.impression_pos))
}

/// Crosses the category relation between target and a history (or placed)
/// video with that video's feedback. `None` feedback means not yet watched.
pub fn cross_with_category_feedback(
    cfg: &FeatureConfig,
    target_category: u32,
    other_category: u32,
    feedback_code: Option<u32>,
) -> u32 {
    let t = cfg.category_code(target_category);
    let o = cfg.category_code(other_category);
    if t == OOV || o == OOV {
        return OOV;
    }
    let same = (t == o) as u32;
    let fb = feedback_code.map_or(FEEDBACK_UNOBSERVED, |c| c.min(FEEDBACK_CODES - 1));
    1 + same * (FEEDBACK_CODES + 1) + fb
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryFeatures {
    /// category, duration bucket, feedback, category x feedback cross.
    pub codes: [u32; HISTORY_CODES],
    /// pXTR diff (ev, like, follow), history p_like, watch ratio,
    /// compressed time since impression, compressed position gap.
    pub scalars: [f64; HISTORY_SCALARS],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderedFeatures {
    /// category, duration bucket, category cross.
    pub codes: [u32; ORDERED_CODES],
    /// pXTR diff (ev, like, follow), compressed slot gap.
    pub scalars: [f64; ORDERED_SCALARS],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetFeatures {
    /// category, duration bucket.
    pub codes: [u32; TARGET_CODES],
    /// squashed server logits (ev, like, follow).
    pub scalars: [f64; TARGET_SCALARS],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    /// net condition.
    pub codes: [u32; CONTEXT_CODES],
    /// compressed prospective position, compressed buffer length, buffer ratio.
    pub scalars: [f64; CONTEXT_SCALARS],
}

/// Everything the model sees for one target in one ranking context.
/// Padded slots are zeroed and masked out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub schema: String,
    pub history: Vec<HistoryFeatures>,
    pub history_mask: Vec<bool>,
    pub ordered: Vec<OrderedFeatures>,
    pub ordered_mask: Vec<bool>,
    pub target: TargetFeatures,
    pub context: ContextFeatures,
}

impl FeatureBundle {
    pub fn history_count(&self) -> usize {
        self.history_mask.iter().filter(|m| **m).count()
    }

    pub fn ordered_count(&self) -> usize {
        self.ordered_mask.iter().filter(|m| **m).count()
    }

    /// Masks out the whole real-time sequence (ablation without it).
    pub fn without_history(mut self) -> Self {
        self.history.fill(HistoryFeatures::default());
        self.history_mask.fill(false);
        self
    }
}

fn squash_prob(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln() / 4.0
}

fn compress_ms(ms: u64) -> f64 {
    (ms as f64).ln_1p() / 10.0
}

fn compress_count(n: u32) -> f64 {
    (n as f64).ln_1p() / 2.0
}

/// Builds the model input for `target` placed right after `ordered` in a
/// list starting at `ctx.next_impression_pos`.
pub fn build_model_input(
    cfg: &FeatureConfig,
    history: &WatchHistory,
    ordered: &[&Candidate],
    target: &Candidate,
    ctx: &ClientContext,
) -> Result<FeatureBundle> {
    for (i, c) in ordered.iter().enumerate() {
        if c.video.video_id == target.video.video_id
            || ordered[..i]
                .iter()
                .any(|o| o.video.video_id == c.video.video_id)
        {
            return Err(Error::DuplicateCandidate(i));
        }
    }
    let target_pos = ctx.next_impression_pos + ordered.len() as u32;
    let target_cat = target.video.category_id;

    let mut hist = vec![HistoryFeatures::default(); cfg.history_len];
    let mut hist_mask = vec![false; cfg.history_len];
    let skip = history.len().saturating_sub(cfg.history_len);
    for (slot, rec) in history.iter().skip(skip).enumerate() {
        let (since, gap) = recency_and_gap(ctx, target_pos, rec)?;
        let diff = pxtr_diff(&target.server_scores, &rec.server_scores);
        let fb = rec.feedback.code();
        let dur = rec.video.clamped_duration().max(1e-3);
        hist[slot] = HistoryFeatures {
            codes: [
                cfg.category_code(rec.video.category_id),
                duration_bucket(rec.video.duration_s),
                fb,
                cross_with_category_feedback(cfg, target_cat, rec.video.category_id, Some(fb)),
            ],
            scalars: [
                diff[0],
                diff[1],
                diff[2],
                rec.server_scores.p_like,
                (rec.feedback.watch_time_s / dur).clamp(0.0, 1.0),
                compress_ms(since),
                compress_count(gap),
            ],
        };
        hist_mask[slot] = true;
    }

    let mut ord = vec![OrderedFeatures::default(); cfg.ordered_len];
    let mut ord_mask = vec![false; cfg.ordered_len];
    let first = ordered.len().saturating_sub(cfg.ordered_len);
    for (slot, (j, c)) in ordered.iter().enumerate().skip(first).enumerate() {
        let diff = pxtr_diff(&target.server_scores, &c.server_scores);
        let gap = (ordered.len() - j) as u32;
        ord[slot] = OrderedFeatures {
            codes: [
                cfg.category_code(c.video.category_id),
                duration_bucket(c.video.duration_s),
                cross_with_category_feedback(cfg, target_cat, c.video.category_id, None),
            ],
            scalars: [diff[0], diff[1], diff[2], compress_count(gap)],
        };
        ord_mask[slot] = true;
    }

    let s = target.server_scores;
    let dur = target.video.clamped_duration().max(1e-3);
    Ok(FeatureBundle {
        schema: SCHEMA_VERSION.to_string(),
        history: hist,
        history_mask: hist_mask,
        ordered: ord,
        ordered_mask: ord_mask,
        target: TargetFeatures {
            codes: [
                cfg.category_code(target_cat),
                duration_bucket(target.video.duration_s),
            ],
            scalars: [
                squash_prob(s.p_effective_view),
                squash_prob(s.p_like),
                squash_prob(s.p_follow),
            ],
        },
        context: ContextFeatures {
            codes: [ctx.net_condition.index() as u32],
            scalars: [
                compress_count(target_pos),
                (target.buffered_len_s.max(0.0)).ln_1p() / 4.0,
                (target.buffered_len_s / dur).clamp(0.0, 1.0),
            ],
        },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SchemaEntry {
    pub input: &'static str,
    pub feature: &'static str,
    pub encoding: String,
}

/// Machine-readable description of every model input.
#[derive(Clone, Debug, Serialize)]
pub struct SchemaDocument {
    pub schema_version: &'static str,
    pub history_len: usize,
    pub ordered_len: usize,
    pub category_codes: u32,
    pub duration_buckets: u32,
    pub feedback_codes: u32,
    pub cross_codes: u32,
    pub net_codes: u32,
    pub features: Vec<SchemaEntry>,
}

pub fn schema_document(cfg: &FeatureConfig) -> SchemaDocument {
    let cat = format!("embedding, vocabulary {} (0 = OOV)", cfg.category_codes());
    let dur = format!("embedding over {DURATION_BUCKETS} buckets of floor(3*log2(1+min(d,1800)))");
    let auto = |what: &str| format!("autodis of {what}");
    let e = |input, feature, encoding: String| SchemaEntry {
        input,
        feature,
        encoding,
    };
    let features = vec![
        e("history", "category", cat.clone()),
        e("history", "duration", dur.clone()),
        e("history", "feedback", format!("embedding over {FEEDBACK_CODES} codes (ev | like<<1 | follow<<2 | share<<3)")),
        e("history", "category_x_feedback", format!("embedding over {CROSS_CODES} codes")),
        e("history", "pxtr_diff_effective_view", auto("target - history")),
        e("history", "pxtr_diff_like", auto("target - history")),
        e("history", "pxtr_diff_follow", auto("target - history")),
        e("history", "p_like", auto("raw probability")),
        e("history", "watch_ratio", auto("watch_time / duration, clipped to [0,1]")),
        e("history", "time_since_impression", auto("log1p(ms) / 10")),
        e("history", "position_gap", auto("log1p(gap) / 2")),
        e("ordered", "category", cat.clone()),
        e("ordered", "duration", dur.clone()),
        e("ordered", "category_x_unobserved", format!("embedding over {CROSS_CODES} codes")),
        e("ordered", "pxtr_diff_effective_view", auto("target - placed")),
        e("ordered", "pxtr_diff_like", auto("target - placed")),
        e("ordered", "pxtr_diff_follow", auto("target - placed")),
        e("ordered", "slot_gap", auto("log1p(gap) / 2")),
        e("target", "category", cat),
        e("target", "duration", dur),
        e("target", "p_effective_view", auto("logit / 4")),
        e("target", "p_like", auto("logit / 4")),
        e("target", "p_follow", auto("logit / 4")),
        e("context", "net_condition", format!("embedding over {NET_CODES} codes")),
        e("context", "position", auto("log1p(prospective position) / 2")),
        e("context", "buffered_len", auto("log1p(seconds) / 4")),
        e("context", "buffer_ratio", auto("buffered / duration, clipped to [0,1]")),
    ];
    SchemaDocument {
        schema_version: SCHEMA_VERSION,
        history_len: cfg.history_len,
        ordered_len: cfg.ordered_len,
        category_codes: cfg.category_codes(),
        duration_buckets: DURATION_BUCKETS,
        feedback_codes: FEEDBACK_CODES,
        cross_codes: CROSS_CODES,
        net_codes: NET_CODES,
        features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Feedback, NetCondition, VideoMeta};
    use proptest::prelude::*;

    fn scores(ev: f64, like: f64, follow: f64) -> ServerScores {
        ServerScores {
            p_effective_view: ev,
            p_like: like,
            p_follow: follow,
        }
    }

    fn cand(id: u64, cat: u32) -> Candidate {
        Candidate {
            video: VideoMeta {
                video_id: id,
                category_id: cat,
                duration_s: 25.0,
            },
            server_scores: scores(0.6, 0.1 + id as f64 * 0.01, 0.01),
            buffered_len_s: 4.0,
            server_rank: id as u32,
        }
    }

    fn watched(pos: u32, cat: u32, like: bool) -> WatchedRecord {
        WatchedRecord {
            video: VideoMeta {
                video_id: 1000 + pos as u64,
                category_id: cat,
                duration_s: 40.0,
            },
            server_scores: scores(0.5, 0.2, 0.02),
            feedback: Feedback {
                effective_view: true,
                like,
                follow: false,
                share: false,
                watch_time_s: 20.0,
            },
            impression_ts_ms: 10_000 * pos as u64,
            impression_pos: pos,
        }
    }

    fn ctx(next: u32, now: u64) -> ClientContext {
        ClientContext {
            net_condition: NetCondition::Wifi,
            next_impression_pos: next,
            now_ts_ms: now,
        }
    }

    #[test]
    fn pxtr_diff_examples() {
        let d = pxtr_diff(&scores(0.0, 0.3, 0.0), &scores(0.0, 0.5, 0.0));
        assert!((d[1] + 0.2).abs() < 1e-12);
        assert_eq!(pxtr_diff(&scores(0.4, 0.2, 0.1), &scores(0.4, 0.2, 0.1)), [0.0; 3]);
        assert_eq!(pxtr_diff(&scores(1.0, 1.0, 1.0), &scores(0.0, 0.0, 0.0)), [1.0; 3]);
    }

    #[test]
    fn recency_and_gap_examples() {
        let mut h = watched(7, 1, false);
        h.impression_ts_ms = 4_000;
        assert_eq!(recency_and_gap(&ctx(9, 10_000), 9, &h).unwrap(), (6_000, 2));
        assert_eq!(recency_and_gap(&ctx(8, 10_000), 8, &h).unwrap().1, 1);
        assert!(recency_and_gap(&ctx(9, 3_000), 9, &h).is_err());
        assert!(recency_and_gap(&ctx(7, 10_000), 7, &h).is_err());
    }

    #[test]
    fn cross_codes_are_distinct_and_oov_safe() {
        let cfg = FeatureConfig::default();
        let liked = Feedback {
            like: true,
            ..Default::default()
        }
        .code();
        let same_like = cross_with_category_feedback(&cfg, 3, 3, Some(liked));
        let diff_like = cross_with_category_feedback(&cfg, 3, 4, Some(liked));
        let diff_none = cross_with_category_feedback(&cfg, 3, 4, Some(0));
        assert_ne!(same_like, diff_like);
        assert_ne!(diff_like, diff_none);
        assert_ne!(same_like, OOV);
        assert_eq!(cross_with_category_feedback(&cfg, 3, 9999, Some(liked)), OOV);
        assert_eq!(cross_with_category_feedback(&cfg, 9999, 3, None), OOV);
        for t in 0..45 {
            for o in 0..45 {
                for fb in 0..17 {
                    let c = cross_with_category_feedback(&cfg, t, o, (fb < 16).then_some(fb));
                    assert!(c < CROSS_CODES);
                }
            }
        }
    }

    #[test]
    fn cold_start_bundle_is_fully_masked() {
        let cfg = FeatureConfig::default();
        let b = build_model_input(&cfg, &WatchHistory::new(20), &[], &cand(1, 2), &ctx(1, 0)).unwrap();
        assert_eq!(b.history.len(), cfg.history_len);
        assert_eq!(b.ordered.len(), cfg.ordered_len);
        assert_eq!(b.history_count(), 0);
        assert_eq!(b.ordered_count(), 0);
        assert_eq!(b.schema, SCHEMA_VERSION);
    }

    #[test]
    fn bundles_are_deterministic_and_order_sensitive() {
        let cfg = FeatureConfig::default();
        let mut h = WatchHistory::new(20);
        for p in 1..=4 {
            h.push_watched(watched(p, p % 2, p == 3)).unwrap();
        }
        let (a, b, t) = (cand(1, 0), cand(2, 1), cand(3, 0));
        let c = ctx(5, 60_000);
        let x1 = build_model_input(&cfg, &h, &[&a, &b], &t, &c).unwrap();
        let x2 = build_model_input(&cfg, &h, &[&a, &b], &t, &c).unwrap();
        assert_eq!(serde_json::to_vec(&x1).unwrap(), serde_json::to_vec(&x2).unwrap());
        let swapped = build_model_input(&cfg, &h, &[&b, &a], &t, &c).unwrap();
        assert_ne!(x1, swapped);
        assert_eq!(x1.history_count(), 4);
        assert_eq!(x1.ordered_count(), 2);
    }

    #[test]
    fn duplicate_ordered_candidates_are_rejected() {
        let cfg = FeatureConfig::default();
        let h = WatchHistory::new(20);
        let (a, t) = (cand(1, 0), cand(3, 0));
        assert!(matches!(
            build_model_input(&cfg, &h, &[&a, &a], &t, &ctx(1, 0)),
            Err(Error::DuplicateCandidate(1))
        ));
        assert!(build_model_input(&cfg, &h, &[&t], &t, &ctx(1, 0)).is_err());
    }

    #[test]
    fn long_inputs_are_truncated_to_most_recent() {
        let cfg = FeatureConfig {
            history_len: 3,
            ordered_len: 2,
            category_vocab: 40,
        };
        let mut h = WatchHistory::new(10);
        for p in 1..=6 {
            h.push_watched(watched(p, 0, false)).unwrap();
        }
        let cands: Vec<Candidate> = (1..=4).map(|i| cand(i, 0)).collect();
        let refs: Vec<&Candidate> = cands[..3].iter().collect();
        let b = build_model_input(&cfg, &h, &refs, &cands[3], &ctx(7, 1_000_000)).unwrap();
        assert_eq!(b.history_count(), 3);
        assert_eq!(b.ordered_count(), 2);
        // newest history record: position 6, target slot 7 + 3 = 10
        assert!((b.history[2].scalars[6] - compress_count(4)).abs() < 1e-12);
        // last placed candidate sits directly before the target
        assert!((b.ordered[1].scalars[3] - compress_count(1)).abs() < 1e-12);
    }

    #[test]
    fn oov_category_does_not_abort() {
        let cfg = FeatureConfig::default();
        let mut h = WatchHistory::new(20);
        h.push_watched(watched(1, 123_456, true)).unwrap();
        let b = build_model_input(&cfg, &h, &[], &cand(1, 77_777), &ctx(2, 20_000)).unwrap();
        assert_eq!(b.target.codes[0], OOV);
        assert_eq!(b.history[0].codes[0], OOV);
        assert_eq!(b.history[0].codes[3], OOV);
    }

    #[test]
    fn duration_buckets_cover_range() {
        assert_eq!(duration_bucket(0.0), 0);
        assert!(duration_bucket(1800.0) < DURATION_BUCKETS);
        assert_eq!(duration_bucket(1e9), duration_bucket(1800.0));
        assert!(duration_bucket(5.0) < duration_bucket(60.0));
        // combined with the production category vocabulary stays under 10k values
        assert!(301 * DURATION_BUCKETS < 10_000);
    }

    proptest! {
        #[test]
        fn pxtr_diff_is_antisymmetric_and_bounded(a in proptest::array::uniform3(0.0f64..=1.0), b in proptest::array::uniform3(0.0f64..=1.0)) {
            let sa = scores(a[0], a[1], a[2]);
            let sb = scores(b[0], b[1], b[2]);
            let f = pxtr_diff(&sa, &sb);
            let r = pxtr_diff(&sb, &sa);
            for i in 0..3 {
                prop_assert_eq!(f[i], -r[i]);
                prop_assert!((-1.0..=1.0).contains(&f[i]));
            }
        }
    }
}
