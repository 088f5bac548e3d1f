//! Context-aware list construction.
//!
//! The objective is the expected discounted engagement of an ordered list:
//! each item contributes `alpha * p_ev + beta * p_like`, discounted by the
//! probability that the user is still there, i.e. the product of the
//! `has_next` predictions of every item placed before it. Predictions for an
//! item are conditioned on the items placed before it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Candidate, ClientContext, RerankConfig, WatchHistory};
use crate::error::{Error, Result};
use crate::features::build_model_input;
use crate::model::{ModelParams, PredictionTriple};

/// Largest candidate set the exhaustive search accepts.
pub const BRUTE_FORCE_MAX: usize = 7;

/// Everything a scorer may condition on besides the placed prefix.
#[derive(Clone, Copy, Debug)]
pub struct RerankRequest<'a> {
    pub candidates: &'a [Candidate],
    pub history: &'a WatchHistory,
    pub ctx: &'a ClientContext,
}

/// Predicts the three task probabilities of `target` when it is shown right
/// after the candidates in `prefix` (indices into `req.candidates`).
pub trait ContextScorer: Sync {
    fn predict(&self, req: &RerankRequest<'_>, prefix: &[usize], target: usize) -> Result<PredictionTriple>;
}

impl ContextScorer for ModelParams {
    fn predict(&self, req: &RerankRequest<'_>, prefix: &[usize], target: usize) -> Result<PredictionTriple> {
        let ordered: Vec<&Candidate> = prefix.iter().map(|&i| &req.candidates[i]).collect();
        let bundle = build_model_input(
            &self.config().features,
            req.history,
            &ordered,
            &req.candidates[target],
            req.ctx,
        )?;
        self.forward(&bundle)
    }
}

impl<S: ContextScorer + ?Sized> ContextScorer for &S {
    fn predict(&self, req: &RerankRequest<'_>, prefix: &[usize], target: usize) -> Result<PredictionTriple> {
        (**self).predict(req, prefix, target)
    }
}

/// Point-wise reward of one placed item.
pub fn item_reward(p: &PredictionTriple, alpha: f64, beta: f64) -> f64 {
    alpha * p.p_effective_view + beta * p.p_like
}

/// ListReward of a list given the prediction made for each position.
pub fn list_reward(steps: &[PredictionTriple], alpha: f64, beta: f64) -> f64 {
    let mut survival = 1.0;
    let mut total = 0.0;
    for p in steps {
        total += survival * item_reward(p, alpha, beta);
        survival *= p.p_has_next;
    }
    total
}

/// Ratio of the smallest to the largest beam score; 0 for a degenerate beam
/// whose best score is not positive.
pub fn stability(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() || !(max > 0.0) {
        return 0.0;
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    min / max
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrefix {
    pub indices: Vec<usize>,
    pub list_reward: f64,
    pub step_predictions: Vec<PredictionTriple>,
}

impl ScoredPrefix {
    fn empty() -> Self {
        Self {
            indices: Vec::new(),
            list_reward: 0.0,
            step_predictions: Vec::new(),
        }
    }

    /// Probability of reaching the slot after this prefix.
    pub fn survival(&self) -> f64 {
        self.step_predictions.iter().map(|p| p.p_has_next).product()
    }
}

/// Beam entries sorted by ListReward, ties broken by index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamState {
    pub beams: Vec<ScoredPrefix>,
}

impl BeamState {
    pub fn scores(&self) -> Vec<f64> {
        self.beams.iter().map(|b| b.list_reward).collect()
    }
}

fn rank_prefixes(prefixes: &mut [ScoredPrefix]) {
    prefixes.sort_by(|a, b| {
        b.list_reward
            .total_cmp(&a.list_reward)
            .then_with(|| a.indices.cmp(&b.indices))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    /// The first `n_show` candidates of the best list.
    pub order: Vec<usize>,
    pub beam: BeamState,
    /// Stability after each executed step.
    pub stability_trace: Vec<f64>,
    pub steps: usize,
    pub model_evaluations: usize,
}

impl RerankOutcome {
    pub fn best(&self) -> &ScoredPrefix {
        &self.beam.beams[0]
    }
}

/// Adaptive beam search: grows the best `k` prefixes one slot per step and
/// stops once at least `n_show` slots are placed and the beam is stable.
pub fn adaptive_beam_search<S: ContextScorer + ?Sized>(
    req: &RerankRequest<'_>,
    scorer: &S,
    cfg: &RerankConfig,
) -> Result<RerankOutcome> {
    cfg.validate()?;
    let m = req.candidates.len();
    if m == 0 || cfg.n_show > m {
        return Err(Error::TooFewCandidates {
            candidates: m,
            n_show: cfg.n_show,
        });
    }
    let max_steps = cfg.max_steps.max(cfg.n_show).min(m);
    let mut beam = BeamState {
        beams: vec![ScoredPrefix::empty()],
    };
    let mut stability_trace = Vec::with_capacity(max_steps);
    let mut evaluations = 0;
    let mut steps = 0;
    for step in 1..=max_steps {
        let expansions: Vec<(usize, usize)> = beam
            .beams
            .iter()
            .enumerate()
            .flat_map(|(b, prefix)| {
                (0..m)
                    .filter(move |c| !prefix.indices.contains(c))
                    .map(move |c| (b, c))
            })
            .collect();
        evaluations += expansions.len();
        let mut next = expansions
            .par_iter()
            .map(|&(b, c)| {
                let parent = &beam.beams[b];
                let p = scorer.predict(req, &parent.indices, c)?;
                let mut indices = parent.indices.clone();
                indices.push(c);
                let mut step_predictions = parent.step_predictions.clone();
                step_predictions.push(p);
                Ok(ScoredPrefix {
                    list_reward: parent.list_reward + parent.survival() * item_reward(&p, cfg.alpha, cfg.beta),
                    indices,
                    step_predictions,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rank_prefixes(&mut next);
        next.truncate(cfg.beam_size_k);
        beam = BeamState { beams: next };
        steps = step;
        let s = stability(&beam.scores());
        stability_trace.push(s);
        if step >= cfg.n_show && cfg.stability_threshold_t.is_some_and(|t| s >= t) {
            break;
        }
    }
    Ok(RerankOutcome {
        order: beam.beams[0].indices[..cfg.n_show].to_vec(),
        beam,
        stability_trace,
        steps,
        model_evaluations: evaluations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutcome {
    pub order: Vec<usize>,
    /// Context-free predictions, by candidate index.
    pub predictions: Vec<PredictionTriple>,
}

/// Point-wise baseline: sorts by `alpha * p_ev + beta * p_like` predicted
/// with an empty ordered prefix; ties keep candidate order.
pub fn greedy_rank<S: ContextScorer + ?Sized>(
    req: &RerankRequest<'_>,
    scorer: &S,
    alpha: f64,
    beta: f64,
) -> Result<GreedyOutcome> {
    let predictions = (0..req.candidates.len())
        .into_par_iter()
        .map(|c| scorer.predict(req, &[], c))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        item_reward(&predictions[b], alpha, beta).total_cmp(&item_reward(&predictions[a], alpha, beta))
    });
    Ok(GreedyOutcome { order, predictions })
}

/// Exact maximum of the ListReward over every permutation of the candidates.
/// The lexicographically smallest optimal permutation is returned.
pub fn brute_force_optimal<S: ContextScorer + ?Sized>(
    req: &RerankRequest<'_>,
    scorer: &S,
    alpha: f64,
    beta: f64,
) -> Result<(Vec<usize>, f64)> {
    let m = req.candidates.len();
    if m > BRUTE_FORCE_MAX {
        return Err(Error::OracleTooLarge {
            got: m,
            max: BRUTE_FORCE_MAX,
        });
    }
    if m == 0 {
        return Err(Error::TooFewCandidates {
            candidates: 0,
            n_show: 1,
        });
    }
    struct Search<'s, S: ?Sized> {
        req: &'s RerankRequest<'s>,
        scorer: &'s S,
        alpha: f64,
        beta: f64,
        best: Option<(Vec<usize>, f64)>,
    }
    impl<S: ContextScorer + ?Sized> Search<'_, S> {
        fn visit(&mut self, prefix: &mut Vec<usize>, reward: f64, survival: f64) -> Result<()> {
            let m = self.req.candidates.len();
            if prefix.len() == m {
                if self.best.as_ref().is_none_or(|(_, r)| reward > *r) {
                    self.best = Some((prefix.clone(), reward));
                }
                return Ok(());
            }
            for c in 0..m {
                if prefix.contains(&c) {
                    continue;
                }
                let p = self.scorer.predict(self.req, prefix, c)?;
                prefix.push(c);
                self.visit(
                    prefix,
                    reward + survival * item_reward(&p, self.alpha, self.beta),
                    survival * p.p_has_next,
                )?;
                prefix.pop();
            }
            Ok(())
        }
    }
    let mut search = Search {
        req,
        scorer,
        alpha,
        beta,
        best: None,
    };
    search.visit(&mut Vec::with_capacity(m), 0.0, 1.0)?;
    Ok(search.best.expect("at least one permutation"))
}

/// Scorers with known structure, used as oracles' counterparts in tests and
/// benchmarks.
pub mod stubs {
    use super::*;

    /// Predictions that ignore the ordered prefix entirely.
    #[derive(Clone, Debug)]
    pub struct IndependentStub {
        pub predictions: Vec<PredictionTriple>,
    }

    impl ContextScorer for IndependentStub {
        fn predict(&self, _req: &RerankRequest<'_>, _prefix: &[usize], target: usize) -> Result<PredictionTriple> {
            Ok(self.predictions[target])
        }
    }

    /// Pseudo-random predictions that depend on the whole ordered prefix.
    #[derive(Clone, Copy, Debug)]
    pub struct HashedContextStub {
        pub seed: u64,
    }

    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(h: u64) -> f64 {
        0.02 + 0.96 * ((h >> 11) as f64 / (1u64 << 53) as f64)
    }

    impl ContextScorer for HashedContextStub {
        fn predict(&self, _req: &RerankRequest<'_>, prefix: &[usize], target: usize) -> Result<PredictionTriple> {
            let mut h = mix(self.seed);
            for &i in prefix {
                h = mix(h ^ (i as u64 + 1));
            }
            h = mix(h ^ (0x100 + target as u64));
            let a = mix(h);
            let b = mix(a);
            let c = mix(b);
            Ok(PredictionTriple {
                p_has_next: unit(a),
                p_effective_view: unit(b),
                p_like: unit(c),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use crate::domain::{NetCondition, ServerScores, VideoMeta};
    use proptest::prelude::*;

    pub(crate) fn candidates(m: usize) -> Vec<Candidate> {
        (0..m)
            .map(|i| Candidate {
                video: VideoMeta {
                    video_id: i as u64 + 1,
                    category_id: i as u32,
                    duration_s: 30.0,
                },
                server_scores: ServerScores {
                    p_effective_view: 0.5,
                    p_like: 0.1,
                    p_follow: 0.01,
                },
                buffered_len_s: 3.0,
                server_rank: i as u32,
            })
            .collect()
    }

    fn triple(hn: f64, ev: f64, like: f64) -> PredictionTriple {
        PredictionTriple {
            p_has_next: hn,
            p_effective_view: ev,
            p_like: like,
        }
    }

    fn with_request<T>(m: usize, f: impl FnOnce(&RerankRequest<'_>) -> T) -> T {
        let c = candidates(m);
        let h = WatchHistory::new(20);
        let ctx = ClientContext {
            net_condition: NetCondition::Wifi,
            next_impression_pos: 1,
            now_ts_ms: 0,
        };
        f(&RerankRequest {
            candidates: &c,
            history: &h,
            ctx: &ctx,
        })
    }

    fn exhaustive(m: usize) -> RerankConfig {
        RerankConfig {
            beam_size_k: (1..=m).product::<usize>().max(1),
            n_show: 1,
            stability_threshold_t: None,
            alpha: 1.0,
            beta: 1.0,
            max_steps: m,
        }
    }

    #[test]
    fn list_reward_examples() {
        assert!((list_reward(&[triple(0.9, 0.8, 0.1)], 1.0, 1.0) - 0.9).abs() < 1e-12);
        let two = [triple(0.5, 0.6, 0.0), triple(0.3, 0.4, 0.2)];
        assert!((list_reward(&two, 1.0, 1.0) - 0.9).abs() < 1e-12);
        assert_eq!(list_reward(&two, 0.0, 0.0), 0.0);
    }

    #[test]
    fn stability_examples() {
        assert_eq!(stability(&[0.5, 0.5]), 1.0);
        assert_eq!(stability(&[2.0, 1.0]), 0.5);
        assert_eq!(stability(&[0.3]), 1.0);
        assert_eq!(stability(&[0.0, 0.0]), 0.0);
        assert_eq!(stability(&[]), 0.0);
    }

    #[test]
    fn single_candidate_is_returned() {
        with_request(1, |req| {
            let stub = HashedContextStub { seed: 1 };
            let out = adaptive_beam_search(req, &stub, &RerankConfig::default()).unwrap();
            assert_eq!(out.order, vec![0]);
            assert_eq!(brute_force_optimal(req, &stub, 1.0, 1.0).unwrap().0, vec![0]);
        });
    }

    #[test]
    fn exhaustive_beam_matches_brute_force_for_four() {
        for seed in 0..20 {
            with_request(4, |req| {
                let stub = HashedContextStub { seed };
                let out = adaptive_beam_search(req, &stub, &exhaustive(4)).unwrap();
                let (perm, lr) = brute_force_optimal(req, &stub, 1.0, 1.0).unwrap();
                assert!((out.best().list_reward - lr).abs() < 1e-9);
                assert_eq!(out.best().indices, perm);
            });
        }
    }

    #[test]
    fn two_candidate_oracle_takes_better_ordering() {
        with_request(2, |req| {
            let stub = IndependentStub {
                predictions: vec![triple(0.2, 0.5, 0.1), triple(0.9, 0.4, 0.1)],
            };
            let (perm, lr) = brute_force_optimal(req, &stub, 1.0, 1.0).unwrap();
            let a = list_reward(&[stub.predictions[0], stub.predictions[1]], 1.0, 1.0);
            let b = list_reward(&[stub.predictions[1], stub.predictions[0]], 1.0, 1.0);
            assert_eq!(lr, a.max(b));
            assert_eq!(perm, if b > a { vec![1, 0] } else { vec![0, 1] });
        });
    }

    #[test]
    fn oracle_size_guard() {
        with_request(8, |req| {
            assert!(matches!(
                brute_force_optimal(req, &HashedContextStub { seed: 0 }, 1.0, 1.0),
                Err(Error::OracleTooLarge { got: 8, .. })
            ));
        });
    }

    #[test]
    fn too_few_candidates_rejected() {
        with_request(2, |req| {
            let cfg = RerankConfig {
                n_show: 3,
                ..RerankConfig::default()
            };
            assert!(matches!(
                adaptive_beam_search(req, &HashedContextStub { seed: 0 }, &cfg),
                Err(Error::TooFewCandidates { .. })
            ));
        });
    }

    #[test]
    fn greedy_examples() {
        with_request(3, |req| {
            let stub = IndependentStub {
                predictions: vec![triple(0.5, 0.3, 0.0), triple(0.5, 0.9, 0.0), triple(0.5, 0.6, 0.0)],
            };
            assert_eq!(greedy_rank(req, &stub, 1.0, 1.0).unwrap().order, vec![1, 2, 0]);
            let flat = IndependentStub {
                predictions: vec![triple(0.5, 0.4, 0.1); 3],
            };
            assert_eq!(greedy_rank(req, &flat, 1.0, 1.0).unwrap().order, vec![0, 1, 2]);
        });
    }

    #[test]
    fn greedy_equals_width_one_beam_with_constant_has_next() {
        for seed in 0..30u64 {
            with_request(5, |req| {
                let ctx_stub = HashedContextStub { seed };
                let predictions = (0..5)
                    .map(|c| {
                        let p = ctx_stub.predict(req, &[], c).unwrap();
                        triple(0.7, p.p_effective_view, p.p_like)
                    })
                    .collect();
                let stub = IndependentStub { predictions };
                let cfg = RerankConfig {
                    beam_size_k: 1,
                    n_show: 5,
                    stability_threshold_t: None,
                    max_steps: 5,
                    ..RerankConfig::default()
                };
                let beam = adaptive_beam_search(req, &stub, &cfg).unwrap();
                assert_eq!(beam.order, greedy_rank(req, &stub, 1.0, 1.0).unwrap().order);
            });
        }
    }

    #[test]
    fn early_stop_at_n_show_when_beams_tie() {
        with_request(6, |req| {
            let stub = IndependentStub {
                predictions: vec![triple(0.5, 0.5, 0.1); 6],
            };
            for n_show in 1..=3 {
                let cfg = RerankConfig {
                    n_show,
                    stability_threshold_t: Some(1.0 - 1e-12),
                    ..RerankConfig::default()
                };
                let out = adaptive_beam_search(req, &stub, &cfg).unwrap();
                assert_eq!(out.steps, n_show);
                assert_eq!(out.order.len(), n_show);
            }
            let cfg = RerankConfig {
                stability_threshold_t: None,
                ..RerankConfig::default()
            };
            assert_eq!(adaptive_beam_search(req, &stub, &cfg).unwrap().steps, 5);
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn beam_outputs_are_valid_and_consistent(seed in any::<u64>(), m in 1usize..8, k in 1usize..6, n_show in 1usize..4, t in proptest::option::of(0.5f64..1.0)) {
            prop_assume!(n_show <= m);
            with_request(m, |req| {
                let stub = HashedContextStub { seed };
                let cfg = RerankConfig { beam_size_k: k, n_show, stability_threshold_t: t, ..RerankConfig::default() };
                let out = adaptive_beam_search(req, &stub, &cfg).unwrap();
                assert_eq!(out.order.len(), n_show);
                let mut seen = out.best().indices.clone();
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), out.best().indices.len());
                assert!(out.best().indices.iter().all(|i| *i < m));
                assert!(out.steps >= n_show && out.steps <= m.min(5).max(n_show));
                assert!(out.beam.beams.len() <= k);
                for b in &out.beam.beams {
                    let lr = list_reward(&b.step_predictions, 1.0, 1.0);
                    assert!((lr - b.list_reward).abs() < 1e-9);
                    assert_eq!(b.indices.len(), out.steps);
                }
                let scores = out.beam.scores();
                assert!(scores.windows(2).all(|w| w[0] >= w[1]));
                if m <= BRUTE_FORCE_MAX {
                    let (_, best) = brute_force_optimal(req, &stub, 1.0, 1.0).unwrap();
                    assert!(out.best().list_reward <= best + 1e-12);
                }
            });
        }
    }
}
