use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use feedrank::domain::{
    Candidate, ClientContext, Feedback, NetCondition, ServerScores, VideoMeta, WatchHistory, WatchedRecord,
};
use feedrank::features::{build_model_input, FeatureBundle};
use feedrank::model::{io, ModelConfig, ModelParams};

fn meta(rng: &mut ChaCha8Rng, video_id: u64) -> (VideoMeta, ServerScores) {
    (
        VideoMeta {
            video_id,
            category_id: rng.random_range(0..40),
            duration_s: rng.random_range(5.0..600.0),
        },
        ServerScores {
            p_effective_view: rng.random_range(0.05..0.95),
            p_like: rng.random_range(0.01..0.6),
            p_follow: rng.random_range(0.0..0.2),
        },
    )
}

fn record(rng: &mut ChaCha8Rng, pos: u32, like: bool) -> WatchedRecord {
    let (video, server_scores) = meta(rng, pos as u64);
    WatchedRecord {
        feedback: Feedback {
            effective_view: true,
            like,
            follow: false,
            share: false,
            watch_time_s: video.duration_s * 0.8,
        },
        video,
        server_scores,
        impression_ts_ms: 1_700_000_000_000 + pos as u64 * 20_000,
        impression_pos: pos,
    }
}

fn candidates(rng: &mut ChaCha8Rng, m: usize) -> Vec<Candidate> {
    (0..m)
        .map(|i| {
            let (video, server_scores) = meta(rng, 500 + i as u64);
            Candidate {
                video,
                server_scores,
                buffered_len_s: 3.0,
                server_rank: i as u32,
            }
        })
        .collect()
}

fn history(records: &[WatchedRecord]) -> WatchHistory {
    let mut h = WatchHistory::new(20);
    for r in records {
        h.push_watched(r.clone()).unwrap();
    }
    h
}

fn ctx(len: usize) -> ClientContext {
    ClientContext {
        net_condition: NetCondition::CellGood,
        next_impression_pos: len as u32 + 1,
        now_ts_ms: 1_700_000_000_000 + (len as u64 + 1) * 20_000,
    }
}

struct Fixture {
    model: ModelParams,
    records: Vec<WatchedRecord>,
    cands: Vec<Candidate>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (1..=8)
        .map(|p| {
            let like = rng.random_bool(0.3);
            record(&mut rng, p, like)
        })
        .collect();
    Fixture {
        model: ModelParams::init(ModelConfig::desk(), seed).unwrap(),
        records,
        cands: candidates(&mut rng, 4),
    }
}

fn bundle_at(f: &Fixture, records: &[WatchedRecord], c: &ClientContext) -> FeatureBundle {
    let ordered = [&f.cands[0], &f.cands[1]];
    build_model_input(&f.model.config().features, &history(records), &ordered, &f.cands[3], c).unwrap()
}

fn bundle(f: &Fixture, records: &[WatchedRecord]) -> FeatureBundle {
    bundle_at(f, records, &ctx(records.len()))
}

#[test]
fn forward_is_deterministic_and_survives_a_save_load() {
    let f = fixture(1);
    let b = bundle(&f, &f.records);
    let first = f.model.forward(&b).unwrap();
    assert_eq!(first, f.model.forward(&b).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.frkw");
    let digest = io::save(&f.model, &path).unwrap();
    assert_eq!(io::file_digest(&path).unwrap(), digest);
    let loaded = io::load(&path).unwrap();
    assert_eq!(loaded.forward(&b).unwrap(), first);
}

#[test]
fn padded_history_slots_are_ignored() {
    let f = fixture(2);
    let b = bundle(&f, &f.records[..3]);
    assert_eq!(b.history_count(), 3);
    let base = f.model.forward(&b).unwrap();

    let mut noisy = b.clone();
    let filler = bundle(&f, &f.records).history[0];
    for (slot, used) in noisy.history.iter_mut().zip(&b.history_mask) {
        if !used {
            *slot = filler;
        }
    }
    assert_ne!(noisy.history, b.history);
    assert_eq!(f.model.forward(&noisy).unwrap(), base);
}

#[test]
fn history_ablation_ignores_history_content() {
    let f = fixture(3);
    let at = ctx(10);
    let a = f.model.forward(&bundle_at(&f, &f.records, &at).without_history()).unwrap();
    let b = f.model.forward(&bundle_at(&f, &f.records[..2], &at).without_history()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let other: Vec<_> = (1..=8).map(|p| record(&mut rng, p, true)).collect();
    let c = f.model.forward(&bundle_at(&f, &other, &at).without_history()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn editing_the_latest_feedback_changes_predictions() {
    for seed in 10..15 {
        let f = fixture(seed);
        let mut edited = f.records.clone();
        let last = edited.last_mut().unwrap();
        last.feedback.like = !last.feedback.like;
        let before = f.model.forward(&bundle(&f, &f.records)).unwrap();
        let after = f.model.forward(&bundle(&f, &edited)).unwrap();
        assert_ne!(before, after, "seed {seed}");
    }
}

#[test]
fn prefix_order_reaches_the_prediction() {
    let f = fixture(4);
    let h = history(&f.records);
    let c = ctx(f.records.len());
    let feat = &f.model.config().features;
    let ab = build_model_input(feat, &h, &[&f.cands[0], &f.cands[1]], &f.cands[3], &c).unwrap();
    let ba = build_model_input(feat, &h, &[&f.cands[1], &f.cands[0]], &f.cands[3], &c).unwrap();
    let a = build_model_input(feat, &h, &[&f.cands[0]], &f.cands[3], &c).unwrap();
    let p = |b: &FeatureBundle| f.model.forward(b).unwrap();
    assert_ne!(p(&ab), p(&ba));
    assert_ne!(p(&ab), p(&a));
}
