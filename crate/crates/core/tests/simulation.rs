use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use feedrank::domain::{Feedback, NetCondition, RerankConfig, VideoMeta};
use feedrank::metrics::{experiment_report, ReportConfig};
use feedrank::sim::experiment::{run_arm, session_specs, ExperimentConfig};
use feedrank::sim::log::{to_ndjson, SessionLog};
use feedrank::sim::pool::PoolVideo;
use feedrank::sim::session::validate_session;
use feedrank::sim::user::{OutcomeDraws, SyntheticUser, UserParams};
use feedrank::sim::{Arm, SimConfig, VideoPool};

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn like_rate_matches_logit_within_three_sigma() {
    let params = UserParams::default();
    let mut user = SyntheticUser::new(3, 4, params.clone(), 99);
    user.interest = vec![0.5, -0.2, 1.0, 0.0];
    let video = PoolVideo {
        meta: VideoMeta {
            video_id: 7,
            category_id: 2,
            duration_s: 40.0,
        },
        quality: 0.3,
    };
    let depth = 10;
    let affinity = 1.0 + 0.3;
    let expected = logistic(
        params.bias_like + params.like_gain * affinity - params.engagement_fatigue * (1.0f64 + depth as f64).ln(),
    );

    let n = 40_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let likes = (0..n)
        .filter(|_| {
            let u = OutcomeDraws::sample(&mut rng);
            user.sample_feedback(&video, depth, NetCondition::Wifi, &u).0.like
        })
        .count();
    let observed = likes as f64 / n as f64;
    let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!(
        (observed - expected).abs() <= 3.0 * sigma,
        "observed {observed}, expected {expected} +- {}",
        3.0 * sigma
    );
}

#[test]
fn drift_decays_then_moves_the_watched_category() {
    let p = UserParams::default();
    let mut user = SyntheticUser::new(0, 3, p.clone(), 1);
    user.drift = vec![1.0, -0.5, 0.25];
    let liked = Feedback {
        effective_view: true,
        like: true,
        follow: false,
        share: false,
        watch_time_s: 30.0,
    };
    user.update_drift(1, &liked);
    let want = [p.gamma, -0.5 * p.gamma + p.delta_like + p.delta_ev, 0.25 * p.gamma];
    for (got, want) in user.drift.iter().zip(want) {
        assert!((got - want).abs() < 1e-12, "{:?}", user.drift);
    }

    let skipped = Feedback {
        effective_view: false,
        like: false,
        follow: false,
        share: false,
        watch_time_s: 0.5,
    };
    let before = user.drift.clone();
    user.update_drift(0, &skipped);
    assert!((user.drift[0] - (before[0] * p.gamma - p.delta_skip)).abs() < 1e-12);
}

fn small_experiment() -> (SimConfig, Vec<SessionLog>) {
    let sim = SimConfig::default();
    let pool = VideoPool::generate(&sim.pool).unwrap();
    let specs = session_specs(&ExperimentConfig {
        n_users: 30,
        sessions_per_user: 2,
        seed: 41,
    });
    let logs = run_arm(Arm::ServerOrder, &specs, &pool, &sim, None, &RerankConfig::default()).unwrap();
    (sim, logs)
}

/// Counts straight from the NDJSON text, without the typed log reader.
#[derive(Default, Debug, PartialEq)]
struct RawCounts {
    impressions: u64,
    likes: u64,
    effective_views: u64,
    sessions: u64,
    max_depth: u64,
}

fn raw_counts(text: &str) -> RawCounts {
    let mut c = RawCounts::default();
    let mut depth: BTreeMap<u64, u64> = BTreeMap::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        match v["event"].as_str().unwrap() {
            "session_start" => c.sessions += 1,
            "impression" => {
                c.impressions += 1;
                c.likes += v["feedback"]["like"].as_bool().unwrap() as u64;
                c.effective_views += v["feedback"]["effective_view"].as_bool().unwrap() as u64;
                *depth.entry(v["session_id"].as_u64().unwrap()).or_default() += 1;
            }
            _ => {}
        }
    }
    c.max_depth = depth.values().copied().max().unwrap_or(0);
    c
}

#[test]
fn reported_rates_agree_with_raw_log_counts() {
    let (sim, logs) = small_experiment();
    for log in &logs {
        validate_session(log, &sim.protocol, true).unwrap();
    }
    let text: String = logs.iter().map(|l| to_ndjson(&l.events).unwrap()).collect();
    let raw = raw_counts(&text);

    let report = experiment_report(
        &[(Arm::ServerOrder, logs.as_slice())],
        &ReportConfig::default(),
        Value::Null,
    )
    .unwrap();
    let m = report.arm(Arm::ServerOrder).unwrap();
    assert_eq!(m.sessions, raw.sessions);
    assert_eq!(m.impressions, raw.impressions);
    assert_eq!(m.likes, raw.likes);
    assert_eq!(m.effective_views, raw.effective_views);
    assert_eq!(m.like_rate, raw.likes as f64 / raw.impressions as f64);
    assert_eq!(m.mean_depth, raw.impressions as f64 / raw.sessions as f64);

    let curve = &report.position_uplift[0].positions;
    assert_eq!(curve.len() as u64, raw.max_depth);
    assert_eq!(curve[0].arm_impressions, raw.sessions);
    let total: u64 = curve.iter().map(|p| p.arm_likes).sum();
    assert_eq!(total, raw.likes);
}

#[test]
fn sessions_replay_identically() {
    let (_, a) = small_experiment();
    let (_, b) = small_experiment();
    assert_eq!(a, b);
}
