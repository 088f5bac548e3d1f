//! Offline and online evaluation: AUC, per-arm engagement rates, paired
//! bootstrap intervals and per-position uplift.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::sim::dataset::LabeledImpression;
use crate::sim::log::SessionLog;
use crate::sim::session::Arm;
use crate::sim::rng_for;

/// Area under the ROC curve via the rank-sum statistic with average ranks
/// for ties. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "score/label count mismatch");
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Per-task AUCs of a model on held-out impressions, with the server's own
/// like estimate as the reference ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutAuc {
    pub impressions: usize,
    pub has_next: Option<f64>,
    pub effective_view: Option<f64>,
    pub like: Option<f64>,
    pub server_like: Option<f64>,
}

impl HeldOutAuc {
    pub fn as_array(&self) -> [Option<f64>; 3] {
        [self.has_next, self.effective_view, self.like]
    }
}

/// Scores held-out impressions with `params`; `without_history` masks the
/// real-time sequence for the ablation.
pub fn held_out_auc(params: &ModelParams, eval: &[LabeledImpression], without_history: bool) -> Result<HeldOutAuc> {
    let preds: Vec<[f64; 3]> = eval
        .par_iter()
        .map(|e| {
            let p = if without_history {
                params.forward(&e.example.bundle.clone().without_history())?
            } else {
                params.forward(&e.example.bundle)?
            };
            Ok(p.as_array())
        })
        .collect::<Result<_>>()?;
    let task = |t: usize| {
        let scores: Vec<f64> = preds.iter().map(|p| p[t]).collect();
        let labels: Vec<bool> = eval.iter().map(|e| e.example.labels.as_array()[t] > 0.5).collect();
        auc(&scores, &labels)
    };
    let server: Vec<f64> = eval.iter().map(|e| e.server_scores.p_like).collect();
    let likes: Vec<bool> = eval.iter().map(|e| e.example.labels.like).collect();
    Ok(HeldOutAuc {
        impressions: eval.len(),
        has_next: task(0),
        effective_view: task(1),
        like: task(2),
        server_like: auc(&server, &likes),
    })
}

/// Integer engagement counts of one session.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCounts {
    pub impressions: u64,
    pub likes: u64,
    pub effective_views: u64,
    pub follows: u64,
    /// Like flag per position, 1-based positions at index `pos - 1`.
    pub likes_by_position: Vec<bool>,
}

impl SessionCounts {
    pub fn from_log(log: &SessionLog) -> Self {
        let mut c = SessionCounts::default();
        for imp in log.impressions() {
            let fb = &imp.record.feedback;
            c.impressions += 1;
            c.likes += fb.like as u64;
            c.effective_views += fb.effective_view as u64;
            c.follows += fb.follow as u64;
            c.likes_by_position.push(fb.like);
        }
        c
    }
}

fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub arm: Arm,
    pub sessions: u64,
    pub impressions: u64,
    pub likes: u64,
    pub effective_views: u64,
    pub follows: u64,
    /// Likes per impression.
    pub like_rate: f64,
    pub effective_view_rate: f64,
    pub follow_rate: f64,
    pub mean_depth: f64,
}

impl ArmMetrics {
    pub fn from_counts(arm: Arm, counts: &[SessionCounts]) -> Self {
        let sum = |f: fn(&SessionCounts) -> u64| counts.iter().map(f).sum::<u64>();
        let impressions = sum(|c| c.impressions);
        let likes = sum(|c| c.likes);
        let effective_views = sum(|c| c.effective_views);
        let follows = sum(|c| c.follows);
        Self {
            arm,
            sessions: counts.len() as u64,
            impressions,
            likes,
            effective_views,
            follows,
            like_rate: rate(likes, impressions),
            effective_view_rate: rate(effective_views, impressions),
            follow_rate: rate(follows, impressions),
            mean_depth: rate(impressions, counts.len() as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 2000,
            confidence: 0.95,
            seed: 7,
        }
    }
}

/// Like-rate comparison of two arms over the same sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub arm: Arm,
    pub baseline: Arm,
    pub arm_like_rate: f64,
    pub baseline_like_rate: f64,
    /// `arm_rate / baseline_rate - 1`.
    pub relative_uplift: f64,
    pub uplift_ci: [f64; 2],
    pub difference: f64,
    pub difference_ci: [f64; 2],
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Paired percentile bootstrap: sessions are resampled jointly for both arms.
pub fn paired_like_comparison(
    arm: Arm,
    arm_counts: &[SessionCounts],
    baseline: Arm,
    base_counts: &[SessionCounts],
    cfg: &BootstrapConfig,
) -> Result<PairedComparison> {
    let n = arm_counts.len();
    if n == 0 || n != base_counts.len() {
        return Err(Error::Config(format!(
            "paired comparison needs equal non-zero session counts, got {n} and {}",
            base_counts.len()
        )));
    }
    if cfg.resamples < 2 || !(0.0 < cfg.confidence && cfg.confidence < 1.0) {
        return Err(Error::Config("invalid bootstrap configuration".into()));
    }
    let stats = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut la, mut ia, mut lb, mut ib) = (0u64, 0u64, 0u64, 0u64);
        for i in idx {
            la += arm_counts[i].likes;
            ia += arm_counts[i].impressions;
            lb += base_counts[i].likes;
            ib += base_counts[i].impressions;
        }
        let (ra, rb) = (rate(la, ia), rate(lb, ib));
        let uplift = if rb > 0.0 { ra / rb - 1.0 } else { 0.0 };
        (ra, rb, uplift, ra - rb)
    };
    let (ra, rb, uplift, diff) = stats(&mut (0..n));
    let mut rng = rng_for(cfg.seed, &[arm as u64, baseline as u64, n as u64]);
    let mut ups = Vec::with_capacity(cfg.resamples);
    let mut diffs = Vec::with_capacity(cfg.resamples);
    for _ in 0..cfg.resamples {
        let draws: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let (_, _, u, d) = stats(&mut draws.into_iter());
        ups.push(u);
        diffs.push(d);
    }
    ups.sort_by(f64::total_cmp);
    diffs.sort_by(f64::total_cmp);
    let a = (1.0 - cfg.confidence) / 2.0;
    Ok(PairedComparison {
        arm,
        baseline,
        arm_like_rate: ra,
        baseline_like_rate: rb,
        relative_uplift: uplift,
        uplift_ci: [percentile(&ups, a), percentile(&ups, 1.0 - a)],
        difference: diff,
        difference_ci: [percentile(&diffs, a), percentile(&diffs, 1.0 - a)],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionUplift {
    pub position: u32,
    pub arm_impressions: u64,
    pub arm_likes: u64,
    pub baseline_impressions: u64,
    pub baseline_likes: u64,
    /// Relative like-rate uplift; absent when the baseline has no likes here.
    pub uplift: Option<f64>,
}

/// Like-rate uplift at every position up to the deepest session of either arm.
pub fn position_uplift(arm_counts: &[SessionCounts], base_counts: &[SessionCounts]) -> Vec<PositionUplift> {
    let depth = arm_counts
        .iter()
        .chain(base_counts)
        .map(|c| c.likes_by_position.len())
        .max()
        .unwrap_or(0);
    let tally = |counts: &[SessionCounts], p: usize| {
        counts
            .iter()
            .filter_map(|c| c.likes_by_position.get(p))
            .fold((0u64, 0u64), |(n, l), like| (n + 1, l + *like as u64))
    };
    (0..depth)
        .map(|p| {
            let (an, al) = tally(arm_counts, p);
            let (bn, bl) = tally(base_counts, p);
            let uplift = (bn > 0 && bl > 0 && an > 0).then(|| rate(al, an) / rate(bl, bn) - 1.0);
            PositionUplift {
                position: p as u32 + 1,
                arm_impressions: an,
                arm_likes: al,
                baseline_impressions: bn,
                baseline_likes: bl,
                uplift,
            }
        })
        .collect()
}

/// Within-page shape of the uplift curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PagePattern {
    pub page_len: usize,
    pub min_support: u64,
    /// Pages whose every position has `min_support` impressions in both arms.
    pub pages_used: usize,
    pub mean_first_position_uplift: f64,
    pub mean_within_page_max_uplift: f64,
    /// Uplift of the pooled impressions at each in-page slot.
    pub slot_uplift: Vec<Option<f64>>,
}

impl PagePattern {
    pub fn first_below_max(&self) -> bool {
        self.pages_used > 0 && self.mean_first_position_uplift < self.mean_within_page_max_uplift
    }
}

pub fn page_pattern(curve: &[PositionUplift], page_len: usize, min_support: u64) -> PagePattern {
    let mut firsts = Vec::new();
    let mut maxes = Vec::new();
    for page in curve.chunks(page_len).filter(|p| p.len() == page_len) {
        let supported = page
            .iter()
            .all(|p| p.arm_impressions >= min_support && p.baseline_impressions >= min_support && p.uplift.is_some());
        if !supported {
            continue;
        }
        let ups: Vec<f64> = page.iter().map(|p| p.uplift.expect("checked")).collect();
        firsts.push(ups[0]);
        maxes.push(ups.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let slot_uplift = (0..page_len)
        .map(|s| {
            let (mut an, mut al, mut bn, mut bl) = (0u64, 0u64, 0u64, 0u64);
            for p in curve.iter().skip(s).step_by(page_len) {
                an += p.arm_impressions;
                al += p.arm_likes;
                bn += p.baseline_impressions;
                bl += p.baseline_likes;
            }
            (bl > 0 && an > 0).then(|| rate(al, an) / rate(bl, bn) - 1.0)
        })
        .collect();
    PagePattern {
        page_len,
        min_support,
        pages_used: firsts.len(),
        mean_first_position_uplift: mean(&firsts),
        mean_within_page_max_uplift: mean(&maxes),
        slot_uplift,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmCurve {
    pub arm: Arm,
    pub positions: Vec<PositionUplift>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Resolved configuration the report was produced with.
    pub header: serde_json::Value,
    pub baseline: Arm,
    pub arms: Vec<ArmMetrics>,
    pub comparisons: Vec<PairedComparison>,
    pub position_uplift: Vec<ArmCurve>,
    pub page_patterns: Vec<(Arm, PagePattern)>,
}

impl ExperimentReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmMetrics> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn comparison(&self, arm: Arm, baseline: Arm) -> Option<&PairedComparison> {
        self.comparisons
            .iter()
            .find(|c| c.arm == arm && c.baseline == baseline)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub baseline: Arm,
    pub bootstrap: BootstrapConfig,
    pub page_len: usize,
    pub min_position_support: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            baseline: Arm::ServerOrder,
            bootstrap: BootstrapConfig::default(),
            page_len: 6,
            min_position_support: 200,
        }
    }
}

/// Builds the report from per-arm session logs, paired by session order.
/// Every arm is compared with the baseline, and each pair of non-baseline
/// arms is compared in the order given.
pub fn experiment_report(
    arms: &[(Arm, &[SessionLog])],
    cfg: &ReportConfig,
    header: serde_json::Value,
) -> Result<ExperimentReport> {
    let counts: Vec<(Arm, Vec<SessionCounts>)> = arms
        .iter()
        .map(|(a, logs)| (*a, logs.iter().map(SessionCounts::from_log).collect()))
        .collect();
    let base = counts
        .iter()
        .find(|(a, _)| *a == cfg.baseline)
        .ok_or_else(|| Error::Config(format!("baseline arm {} has no logs", cfg.baseline)))?;
    let mut comparisons = Vec::new();
    let mut curves = Vec::new();
    let mut patterns = Vec::new();
    for (arm, c) in &counts {
        comparisons.push(paired_like_comparison(*arm, c, base.0, &base.1, &cfg.bootstrap)?);
        let curve = position_uplift(c, &base.1);
        patterns.push((*arm, page_pattern(&curve, cfg.page_len, cfg.min_position_support)));
        curves.push(ArmCurve {
            arm: *arm,
            positions: curve,
        });
    }
    let others: Vec<&(Arm, Vec<SessionCounts>)> = counts.iter().filter(|(a, _)| *a != cfg.baseline).collect();
    for (i, (b, bc)) in others.iter().map(|x| (&x.0, &x.1)).enumerate() {
        for (a, ac) in others[i + 1..].iter().map(|x| (&x.0, &x.1)) {
            comparisons.push(paired_like_comparison(*a, ac, *b, bc, &cfg.bootstrap)?);
        }
    }
    Ok(ExperimentReport {
        header,
        baseline: cfg.baseline,
        arms: counts.iter().map(|(a, c)| ArmMetrics::from_counts(*a, c)).collect(),
        comparisons,
        position_uplift: curves,
        page_patterns: patterns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc(&[0.3, 0.4], &[true, true]), None);
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            if let Some(a) = auc(&scores, &labels) {
                prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
            }
        }
    }

    fn counts(likes: &[&[bool]]) -> Vec<SessionCounts> {
        likes
            .iter()
            .map(|s| SessionCounts {
                impressions: s.len() as u64,
                likes: s.iter().filter(|l| **l).count() as u64,
                effective_views: 0,
                follows: 0,
                likes_by_position: s.to_vec(),
            })
            .collect()
    }

    #[test]
    fn self_comparison_has_zero_uplift() {
        let c = counts(&[&[true, false, false], &[false, true], &[false, false, false, true]]);
        let cmp = paired_like_comparison(Arm::Greedy, &c, Arm::Greedy, &c, &BootstrapConfig::default()).unwrap();
        assert_eq!(cmp.relative_uplift, 0.0);
        assert_eq!(cmp.uplift_ci, [0.0, 0.0]);
        assert_eq!(cmp.difference, 0.0);
        let curve = position_uplift(&c, &c);
        assert_eq!(curve.len(), 4);
        assert!(curve.iter().all(|p| p.uplift.is_none_or(|u| u == 0.0)));
    }

    #[test]
    fn uplift_and_rates_by_hand() {
        let arm = counts(&[&[true, true], &[false, true]]);
        let base = counts(&[&[true, false], &[false, false, true]]);
        let cmp = paired_like_comparison(Arm::ContextAware, &arm, Arm::ServerOrder, &base, &BootstrapConfig::default()).unwrap();
        assert!((cmp.arm_like_rate - 0.75).abs() < 1e-15);
        assert!((cmp.baseline_like_rate - 0.4).abs() < 1e-15);
        assert!((cmp.relative_uplift - (0.75 / 0.4 - 1.0)).abs() < 1e-12);
        assert!(cmp.uplift_ci[0] <= cmp.uplift_ci[1]);
        let curve = position_uplift(&arm, &base);
        assert_eq!(curve[0].uplift, Some(0.0));
        assert_eq!(curve[1].uplift, None);
        assert_eq!(curve[2].arm_impressions, 0);
        let m = ArmMetrics::from_counts(Arm::ContextAware, &arm);
        assert_eq!((m.impressions, m.likes, m.sessions), (4, 3, 2));
        assert_eq!(m.mean_depth, 2.0);
    }

    #[test]
    fn page_pattern_by_hand() {
        let mk = |position: u32, al: u64, bl: u64| PositionUplift {
            position,
            arm_impressions: 100,
            arm_likes: al,
            baseline_impressions: 100,
            baseline_likes: bl,
            uplift: Some(al as f64 / bl as f64 - 1.0),
        };
        let curve = vec![mk(1, 10, 10), mk(2, 12, 10), mk(3, 11, 10), mk(4, 10, 10), mk(5, 15, 10), mk(6, 10, 10)];
        let p = page_pattern(&curve, 3, 50);
        assert_eq!(p.pages_used, 2);
        assert!((p.mean_first_position_uplift - 0.0).abs() < 1e-12);
        assert!((p.mean_within_page_max_uplift - 0.35).abs() < 1e-12);
        assert!(p.first_below_max());
        assert_eq!(page_pattern(&curve, 3, 1000).pages_used, 0);
    }
}
