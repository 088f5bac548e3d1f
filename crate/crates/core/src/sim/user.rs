//! Synthetic user with long-term category interests and a session-level
//! drift that follows the feedback it gives.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pool::PoolVideo;
use super::{rng_for, sigmoid, STREAM_NET, STREAM_OUTCOME, STREAM_USER};
use crate::domain::{effective_view_threshold, Feedback, NetCondition, SKIP_WATCH_S};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserParams {
    pub delta_like: f64,
    pub delta_ev: f64,
    pub delta_skip: f64,
    /// Per-impression drift decay factor.
    pub gamma: f64,
    pub interest_sd: f64,
    pub bias_ev: f64,
    /// Change of the effective-view logit per e-fold of duration above 30 s.
    pub duration_ev_slope: f64,
    pub bias_like: f64,
    /// Multiplier of the affinity in the like logit.
    pub like_gain: f64,
    pub bias_follow: f64,
    pub bias_share: f64,
    pub bias_skip: f64,
    /// Engagement logit penalty per e-fold of depth.
    pub engagement_fatigue: f64,
    pub bias_exit: f64,
    /// Exit logit increase per impression of depth.
    pub exit_fatigue: f64,
    /// Exit logit decrease after an effective view.
    pub exit_ev_relief: f64,
    pub net_ev: [f64; 4],
    pub net_exit: [f64; 4],
    /// Initial network distribution and per-impression persistence.
    pub net_initial: [f64; 4],
    pub net_persistence: f64,
}

impl Default for UserParams {
    fn default() -> Self {
        Self {
            delta_like: 0.8,
            delta_ev: 0.3,
            delta_skip: 0.2,
            gamma: 0.9,
            interest_sd: 1.0,
            bias_ev: -2.5,
            duration_ev_slope: 0.3,
            bias_like: -6.0,
            like_gain: 1.5,
            bias_follow: -7.2,
            bias_share: -8.2,
            bias_skip: 1.8,
            engagement_fatigue: 0.1,
            bias_exit: -3.6,
            exit_fatigue: 0.03,
            exit_ev_relief: 0.8,
            net_ev: [0.0, 0.0, -0.3, -0.7],
            net_exit: [0.0, 0.1, 0.4, 0.9],
            net_initial: [0.5, 0.3, 0.15, 0.05],
            net_persistence: 0.9,
        }
    }
}

impl UserParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.delta_like,
            self.delta_ev,
            self.delta_skip,
            self.gamma,
            self.interest_sd,
            self.like_gain,
        ];
        if finite.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("drift deltas, gamma, interest_sd and like_gain must be finite and non-negative".into()));
        }
        if self.gamma >= 1.0 {
            return Err(Error::Config("gamma must be below 1".into()));
        }
        let total: f64 = self.net_initial.iter().sum();
        if self.net_initial.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("net_initial must be a distribution".into()));
        }
        if !(0.0..=1.0).contains(&self.net_persistence) {
            return Err(Error::Config("net_persistence must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Largest per-impression drift increment.
    pub fn delta_max(&self) -> f64 {
        (self.delta_like + self.delta_ev).max(self.delta_skip)
    }

    /// Engagement probabilities for a given affinity (interest + quality +
    /// drift), impression depth (0-based) and network.
    pub fn engagement(&self, affinity: f64, duration_s: f64, depth: u32, net: NetCondition) -> Engagement {
        let shift = -self.engagement_fatigue * (depth as f64).ln_1p();
        let dur = -self.duration_ev_slope * (duration_s.max(1e-3) / 30.0).ln();
        let ev = if duration_s < effective_view_threshold(duration_s) {
            0.0
        } else {
            sigmoid(self.bias_ev + affinity + dur + shift + self.net_ev[net.index()])
        };
        Engagement {
            effective_view: ev,
            like: sigmoid(self.bias_like + self.like_gain * affinity + shift),
            follow: sigmoid(self.bias_follow + affinity + shift),
            share: sigmoid(self.bias_share + affinity + shift),
            skip_given_no_view: sigmoid(self.bias_skip - affinity),
        }
    }

    pub fn exit_probability(&self, depth: u32, net: NetCondition, effective_view: bool) -> f64 {
        sigmoid(
            self.bias_exit + self.exit_fatigue * depth as f64 + self.net_exit[net.index()]
                - if effective_view { self.exit_ev_relief } else { 0.0 },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Engagement {
    pub effective_view: f64,
    pub like: f64,
    pub follow: f64,
    pub share: f64,
    pub skip_given_no_view: f64,
}

/// Uniform draws behind one impression's outcome, shared across arms so that
/// paired comparisons see common random numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutcomeDraws {
    pub effective_view: f64,
    pub like: f64,
    pub follow: f64,
    pub share: f64,
    pub skip: f64,
    pub watch: f64,
    pub exit: f64,
}

impl OutcomeDraws {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            effective_view: rng.random(),
            like: rng.random(),
            follow: rng.random(),
            share: rng.random(),
            skip: rng.random(),
            watch: rng.random(),
            exit: rng.random(),
        }
    }

    pub fn for_impression(session_seed: u64, position: u32, video_id: u64) -> Self {
        Self::sample(&mut rng_for(session_seed, &[STREAM_OUTCOME, position as u64, video_id]))
    }
}

/// Network condition for every position of a session; independent of what
/// is shown.
pub fn net_sequence(params: &UserParams, session_seed: u64, len: usize) -> Vec<NetCondition> {
    let mut rng = rng_for(session_seed, &[STREAM_NET]);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in params.net_initial.iter().enumerate() {
            acc += p;
            if u < acc {
                return NetCondition::ALL[i];
            }
        }
        NetCondition::ALL[3]
    };
    let mut out = Vec::with_capacity(len);
    let mut current = draw(&mut rng);
    for _ in 0..len {
        out.push(current);
        let stay: f64 = rng.random();
        let next = draw(&mut rng);
        if stay >= params.net_persistence {
            current = next;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub user_id: u64,
    pub params: UserParams,
    /// Long-term interest per category, logit units.
    pub interest: Vec<f64>,
    /// Session drift per category, logit units.
    pub drift: Vec<f64>,
}

impl SyntheticUser {
    pub fn new(user_id: u64, categories: u32, params: UserParams, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[STREAM_USER, user_id]);
        let interest = (0..categories)
            .map(|_| params.interest_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            user_id,
            params,
            interest,
            drift: vec![0.0; categories as usize],
        }
    }

    pub fn long_term_affinity(&self, video: &PoolVideo) -> f64 {
        self.interest[video.meta.category_id as usize] + video.quality
    }

    pub fn affinity(&self, video: &PoolVideo) -> f64 {
        self.long_term_affinity(video) + self.drift[video.meta.category_id as usize]
    }

    pub fn engagement(&self, video: &PoolVideo, depth: u32, net: NetCondition) -> Engagement {
        self.params
            .engagement(self.affinity(video), video.meta.duration_s, depth, net)
    }

    /// Feedback and continuation for one impression at `depth` (0-based).
    pub fn sample_feedback(&self, video: &PoolVideo, depth: u32, net: NetCondition, u: &OutcomeDraws) -> (Feedback, bool) {
        let e = self.engagement(video, depth, net);
        let duration = video.meta.duration_s;
        let threshold = effective_view_threshold(duration);
        let effective_view = u.effective_view < e.effective_view;
        let watch_time_s = if effective_view {
            threshold + (duration - threshold).max(0.0) * u.watch
        } else {
            let upper = threshold.min(duration);
            if u.skip < e.skip_given_no_view || upper <= SKIP_WATCH_S {
                upper.min(SKIP_WATCH_S) * u.watch
            } else {
                SKIP_WATCH_S + (upper - SKIP_WATCH_S) * u.watch
            }
        };
        let feedback = Feedback {
            effective_view,
            like: u.like < e.like,
            follow: u.follow < e.follow,
            share: u.share < e.share,
            watch_time_s,
        };
        let has_next = u.exit >= self.params.exit_probability(depth, net, effective_view);
        (feedback, has_next)
    }

    /// Decays every category's drift, then moves the watched category by the
    /// feedback it received.
    pub fn update_drift(&mut self, category_id: u32, feedback: &Feedback) {
        let p = &self.params;
        for d in &mut self.drift {
            *d *= p.gamma;
        }
        let mut delta = 0.0;
        if feedback.like {
            delta += p.delta_like;
        }
        if feedback.effective_view {
            delta += p.delta_ev;
        }
        if feedback.is_skip() {
            delta -= p.delta_skip;
        }
        if let Some(d) = self.drift.get_mut(category_id as usize) {
            *d += delta;
        }
    }

    pub fn reset_drift(&mut self) {
        self.drift.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{effective_view_label, VideoMeta};
    use rand::SeedableRng;

    fn video(category_id: u32, duration_s: f64) -> PoolVideo {
        PoolVideo {
            meta: VideoMeta {
                video_id: 1,
                category_id,
                duration_s,
            },
            quality: 0.0,
        }
    }

    fn user() -> SyntheticUser {
        SyntheticUser::new(3, 4, UserParams::default(), 11)
    }

    #[test]
    fn infinite_drift_saturates_like() {
        let mut u = user();
        u.drift[2] = f64::INFINITY;
        let e = u.engagement(&video(2, 30.0), 0, NetCondition::Wifi);
        assert_eq!(e.like, 1.0);
    }

    #[test]
    fn depth_zero_exit_is_baseline() {
        let p = UserParams::default();
        assert_eq!(p.exit_probability(0, NetCondition::Wifi, false), sigmoid(p.bias_exit));
        assert!(p.exit_probability(10, NetCondition::Wifi, false) > p.exit_probability(0, NetCondition::Wifi, false));
        assert!(p.exit_probability(0, NetCondition::CellPoor, false) > p.exit_probability(0, NetCondition::Wifi, false));
    }

    #[test]
    fn drift_decays_without_feedback() {
        let mut u = user();
        u.drift[1] = 1.0;
        let neutral = Feedback {
            watch_time_s: 3.0,
            ..Feedback::default()
        };
        u.update_drift(0, &neutral);
        assert!((u.drift[1] - 0.9).abs() < 1e-15);
        assert!((u.drift[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn like_raises_category_drift() {
        let mut u = user();
        for start in [-3.0, 0.0, 2.0] {
            u.drift[1] = start;
            let like = Feedback {
                like: true,
                watch_time_s: 3.0,
                ..Feedback::default()
            };
            u.update_drift(1, &like);
            assert!(u.drift[1] > start);
        }
    }

    #[test]
    fn drift_stays_within_geometric_bound() {
        let mut u = user();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let bound = u.params.delta_max() / (1.0 - u.params.gamma);
        for _ in 0..20_000 {
            let fb = Feedback {
                effective_view: rng.random_bool(0.7),
                like: rng.random_bool(0.6),
                follow: false,
                share: false,
                watch_time_s: if rng.random_bool(0.2) { 0.5 } else { 12.0 },
            };
            u.update_drift(rng.random_range(0..2), &fb);
            assert!(u.drift.iter().all(|d| d.abs() <= bound + 1e-9));
        }
    }

    #[test]
    fn watch_time_agrees_with_effective_view_label() {
        let u = user();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for i in 0..5000 {
            let dur = [5.0, 9.0, 14.9, 15.0, 120.0, 600.0, 900.0, 1800.0][i % 8];
            let v = video((i % 4) as u32, dur);
            let (fb, _) = u.sample_feedback(&v, (i % 30) as u32, NetCondition::ALL[i % 4], &OutcomeDraws::sample(&mut rng));
            assert_eq!(fb.effective_view, effective_view_label(fb.watch_time_s, dur), "{fb:?} {dur}");
            assert!(fb.watch_time_s >= 0.0 && fb.watch_time_s <= dur);
        }
    }

    #[test]
    fn net_sequence_is_deterministic() {
        let p = UserParams::default();
        let a = net_sequence(&p, 42, 50);
        assert_eq!(a, net_sequence(&p, 42, 50));
        assert_eq!(a.len(), 50);
    }
}
