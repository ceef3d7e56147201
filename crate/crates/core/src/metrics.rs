//! Novelty-detection and open-world classification metrics.
//!
//! Scores are oriented so that higher means more novel. Positives are the
//! first encounters of unknown-unknown classes; negatives are every other
//! query.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous};
use statrs::function::beta::beta_reg;

use crate::error::{FlowrError, Result};
use crate::model::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl ScoreSet {
    /// Both classes must be present and no score may be NaN.
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(FlowrError::InvalidScores(format!(
                "need positives and negatives, got {} and {}",
                positives.len(),
                negatives.len()
            )));
        }
        if positives.iter().chain(&negatives).any(|s| s.is_nan()) {
            return Err(FlowrError::InvalidScores("NaN score".into()));
        }
        Ok(Self { positives, negatives })
    }

    fn priors(&self) -> (f64, f64) {
        let p = self.positives.len() as f64;
        let n = self.negatives.len() as f64;
        (p / (p + n), n / (p + n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are flagged novel; `+inf` for the origin.
    pub threshold: f64,
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Empirical ROC over every distinct score, from `(0, 0)` to `(1, 1)`.
/// Tied scores move the curve in a single step.
pub fn roc_curve(s: &ScoreSet) -> Vec<RocPoint> {
    let pos = sorted_desc(&s.positives);
    let neg = sorted_desc(&s.negatives);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut out = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut i, mut j) = (0, 0);
    while i < pos.len() || j < neg.len() {
        let t = match (pos.get(i), neg.get(j)) {
            (Some(&p), Some(&n)) => p.max(n),
            (Some(&p), None) => p,
            (None, Some(&n)) => n,
            (None, None) => unreachable!(),
        };
        while i < pos.len() && pos[i] == t {
            i += 1;
        }
        while j < neg.len() && neg[j] == t {
            j += 1;
        }
        let p = RocPoint {
            fpr: j as f64 / nn,
            tpr: i as f64 / np,
            threshold: t,
        };
        if out.last().is_some_and(|l| l.fpr == p.fpr && l.tpr == p.tpr) {
            out.last_mut().unwrap().threshold = t;
        } else {
            out.push(p);
        }
    }
    out
}

/// Mann-Whitney statistic: `P(pos > neg) + 0.5 P(pos = neg)`.
pub fn auroc(s: &ScoreSet) -> f64 {
    let mut neg = s.negatives.clone();
    neg.sort_by(|a, b| a.total_cmp(b));
    let mut twice = 0u128;
    for &p in &s.positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    twice as f64 / (2.0 * s.positives.len() as f64 * s.negatives.len() as f64)
}

/// Trapezoidal area under a ROC curve.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Upper convex hull of the ROC points, by increasing FPR.
fn roc_hull(points: &[RocPoint]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

/// Expected loss `c * pi_n * fpr + (1 - c) * pi_p * (1 - tpr)` for `c` on
/// `[lo, hi]` weighted by the Beta density.
#[allow(clippy::too_many_arguments)]
fn segment_loss(lo: f64, hi: f64, fpr: f64, tpr: f64, pi_p: f64, pi_n: f64, alpha: f64, beta: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let reg = |x: f64, a: f64, b: f64| {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            beta_reg(a, b, x)
        }
    };
    let mass = reg(hi, alpha, beta) - reg(lo, alpha, beta);
    let first = alpha / (alpha + beta) * (reg(hi, alpha + 1.0, beta) - reg(lo, alpha + 1.0, beta));
    pi_n * fpr * first + pi_p * (1.0 - tpr) * (mass - first)
}

fn check_beta(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(FlowrError::Config(format!(
            "Beta cost parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    Ok(())
}

/// Hand's H-measure with misclassification costs `c ~ Beta(alpha, beta)`:
/// `1 - L / L_ref`, where `L` is the expected minimum loss over thresholds
/// and `L_ref` the same for a classifier that ignores the scores. Computed
/// exactly on the ROC convex hull.
pub fn h_measure(s: &ScoreSet, alpha: f64, beta: f64) -> Result<f64> {
    check_beta(alpha, beta)?;
    let (pi_p, pi_n) = s.priors();
    let hull = roc_hull(&roc_curve(s));
    // Vertex i is optimal for c between breakpoints[i] and breakpoints[i - 1].
    let m = hull.len();
    let mut upper = 1.0;
    let mut loss = 0.0;
    for i in 0..m {
        let lower = if i + 1 < m {
            let df = hull[i + 1].0 - hull[i].0;
            let dt = hull[i + 1].1 - hull[i].1;
            let denom = pi_n * df + pi_p * dt;
            if denom > 0.0 {
                pi_p * dt / denom
            } else {
                upper
            }
        } else {
            0.0
        };
        let lower = lower.min(upper);
        loss += segment_loss(lower, upper, hull[i].0, hull[i].1, pi_p, pi_n, alpha, beta);
        upper = lower;
    }
    let l_ref = segment_loss(0.0, pi_p, 1.0, 1.0, pi_p, pi_n, alpha, beta)
        + segment_loss(pi_p, 1.0, 0.0, 0.0, pi_p, pi_n, alpha, beta);
    Ok((1.0 - loss / l_ref).clamp(0.0, 1.0))
}

/// Reference H-measure by direct integration: at each of `grid` equally
/// spaced costs the best empirical threshold is chosen, and both losses are
/// integrated with the trapezoid rule.
pub fn h_measure_brute_force(s: &ScoreSet, alpha: f64, beta: f64, grid: usize) -> Result<f64> {
    check_beta(alpha, beta)?;
    let (pi_p, pi_n) = s.priors();
    let roc = roc_curve(s);
    let dist = Beta::new(alpha, beta).map_err(|e| FlowrError::Config(e.to_string()))?;
    let h = 1.0 / (grid - 1) as f64;
    let (mut loss, mut l_ref) = (0.0, 0.0);
    for k in 0..grid {
        let c = k as f64 * h;
        let u = dist.pdf(c);
        if !u.is_finite() {
            continue;
        }
        let w = if k == 0 || k + 1 == grid { 0.5 * h } else { h };
        let best = roc
            .iter()
            .map(|p| c * pi_n * p.fpr + (1.0 - c) * pi_p * (1.0 - p.tpr))
            .fold(f64::INFINITY, f64::min);
        loss += w * u * best;
        l_ref += w * u * (c * pi_n).min((1.0 - c) * pi_p);
    }
    Ok(1.0 - loss / l_ref)
}

/// Novelty threshold at a target true-positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub target_tpr: f64,
    pub achieved_tpr: f64,
}

/// Largest `tau` whose positive rate `|{p >= tau}| / P` reaches `target`.
pub fn threshold_at_tpr(positives: &[f64], target: f64) -> Result<OperatingPoint> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(FlowrError::Config(format!(
            "target TPR must be in (0, 1], got {target}"
        )));
    }
    if positives.is_empty() || positives.iter().any(|p| p.is_nan()) {
        return Err(FlowrError::InvalidScores(
            "threshold selection needs finite positive scores".into(),
        ));
    }
    let pos = sorted_desc(positives);
    let n = pos.len();
    let k = ((1..=n).find(|&k| k as f64 / n as f64 >= target - 1e-12)).unwrap_or(n);
    let tau = pos[k - 1];
    let achieved = pos.iter().filter(|&&p| p >= tau).count() as f64 / n as f64;
    Ok(OperatingPoint {
        threshold: tau,
        target_tpr: target,
        achieved_tpr: achieved,
    })
}

/// Role of a query's true class at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    /// Known before the query phase (support or known-known class).
    Support,
    /// First encounter of an unknown-unknown class.
    NovelFirst,
    /// Later point of a class first seen during the query phase.
    Incremental,
}

/// One evaluated query, reduced to what the metrics need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub episode: usize,
    pub index: usize,
    pub kind: QueryKind,
    pub novelty_score: f64,
    pub known_argmax: Option<usize>,
    pub true_label: usize,
}

/// Tag the prediction stream of one episode. `n_known` is the number of
/// classes present before the query phase.
pub fn episode_records(episode: usize, n_known: usize, preds: &[PredictionRecord]) -> Result<Vec<ScoredQuery>> {
    let mut seen = n_known;
    preds
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let y = p
                .true_label
                .ok_or_else(|| FlowrError::InvalidScores(format!("query {index} has no label")))?;
            if p.n_at_prediction != seen || y > seen + 1 || y == 0 {
                return Err(FlowrError::InvalidArrivalOrder {
                    position: index,
                    label: y,
                    expected: seen + 1,
                });
            }
            let kind = if y <= n_known {
                QueryKind::Support
            } else if y == seen + 1 {
                seen += 1;
                QueryKind::NovelFirst
            } else {
                QueryKind::Incremental
            };
            Ok(ScoredQuery {
                episode,
                index,
                kind,
                novelty_score: p.novelty_score,
                known_argmax: p.known_argmax,
                true_label: y,
            })
        })
        .collect()
}

/// Novelty scores split into positives (first encounters) and negatives.
pub fn score_set(records: &[ScoredQuery]) -> Result<ScoreSet> {
    let (pos, neg): (Vec<&ScoredQuery>, Vec<&ScoredQuery>) =
        records.iter().partition(|r| r.kind == QueryKind::NovelFirst);
    ScoreSet::new(
        pos.iter().map(|r| r.novelty_score).collect(),
        neg.iter().map(|r| r.novelty_score).collect(),
    )
}

/// Open-world decision: novel iff the score reaches `tau` or there is no
/// known class to choose.
pub fn is_correct(r: &ScoredQuery, tau: f64) -> bool {
    let novel = r.known_argmax.is_none() || r.novelty_score >= tau;
    match r.kind {
        QueryKind::NovelFirst => novel,
        QueryKind::Support | QueryKind::Incremental => !novel && r.known_argmax == Some(r.true_label),
    }
}

/// Metrics at one operating point. Absent values mean an empty subset or a
/// score set without both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySuite {
    pub accuracy: Option<f64>,
    pub support_accuracy: Option<f64>,
    /// Post-label queries of classes first seen during the query phase.
    pub incremental_accuracy: Option<f64>,
    /// As above, also counting each class's first (pre-label) encounter.
    pub incremental_accuracy_with_first: Option<f64>,
    pub novel_detection_accuracy: Option<f64>,
    pub h_measure: Option<f64>,
    pub auroc: Option<f64>,
    pub n_queries: usize,
    pub n_support: usize,
    pub n_incremental: usize,
    pub n_novel_first: usize,
}

pub fn accuracy_suite(records: &[ScoredQuery], tau: f64) -> Result<AccuracySuite> {
    if records.is_empty() {
        return Err(FlowrError::InsufficientData("no evaluated queries".into()));
    }
    let rate = |f: &dyn Fn(&ScoredQuery) -> bool| {
        let subset: Vec<&ScoredQuery> = records.iter().filter(|r| f(r)).collect();
        let n = subset.len();
        let acc = (n > 0).then(|| subset.iter().filter(|r| is_correct(r, tau)).count() as f64 / n as f64);
        (acc, n)
    };
    let (accuracy, n_queries) = rate(&|_| true);
    let (support_accuracy, n_support) = rate(&|r| r.kind == QueryKind::Support);
    let (incremental_accuracy, n_incremental) = rate(&|r| r.kind == QueryKind::Incremental);
    let (incremental_accuracy_with_first, _) = rate(&|r| r.kind != QueryKind::Support);
    let (novel_detection_accuracy, n_novel_first) = rate(&|r| r.kind == QueryKind::NovelFirst);
    let (h, a) = match score_set(records) {
        Ok(s) => (Some(h_measure(&s, 2.0, 2.0)?), Some(auroc(&s))),
        Err(_) => (None, None),
    };
    Ok(AccuracySuite {
        accuracy,
        support_accuracy,
        incremental_accuracy,
        incremental_accuracy_with_first,
        novel_detection_accuracy,
        h_measure: h,
        auroc: a,
        n_queries,
        n_support,
        n_incremental,
        n_novel_first,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Metric table: one `key=value` record per line, `NA` for absent values.
pub fn render_metric_table(method: &str, suite: &AccuracySuite, op: &OperatingPoint) -> String {
    let rows = [
        ("method", method.to_string()),
        ("accuracy", fmt_opt(suite.accuracy)),
        ("support_accuracy", fmt_opt(suite.support_accuracy)),
        ("incremental_accuracy", fmt_opt(suite.incremental_accuracy)),
        (
            "incremental_accuracy_with_first",
            fmt_opt(suite.incremental_accuracy_with_first),
        ),
        ("novel_detection_accuracy", fmt_opt(suite.novel_detection_accuracy)),
        ("h_measure", fmt_opt(suite.h_measure)),
        ("auroc", fmt_opt(suite.auroc)),
        ("target_tpr", format!("{:.6}", op.target_tpr)),
        ("achieved_tpr", format!("{:.6}", op.achieved_tpr)),
        ("threshold", format!("{:e}", op.threshold)),
        ("n_queries", suite.n_queries.to_string()),
        ("n_support", suite.n_support.to_string()),
        ("n_incremental", suite.n_incremental.to_string()),
        ("n_novel_first", suite.n_novel_first.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn write_roc_csv(w: &mut impl Write, points: &[RocPoint]) -> std::io::Result<()> {
    writeln!(w, "fpr,tpr,threshold")?;
    for p in points {
        writeln!(w, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    Ok(())
}

/// Two classifiers that AUROC and H-measure rank in opposite orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingFlip {
    pub trial: usize,
    pub first: ScoreSet,
    pub second: ScoreSet,
    pub auroc_first: f64,
    pub auroc_second: f64,
    pub h_first: f64,
    pub h_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingFlipSearch {
    pub found: Option<RankingFlip>,
    pub trials_used: usize,
    pub failures: usize,
}

/// Search for a ranking disagreement between two classifiers whose ROC
/// curves cross: both share standard-normal negatives, one has unit-variance
/// shifted positives, the other wide positives that only separate at high
/// true-positive rates.
pub fn ranking_flip_search(seed: u64, trials: usize) -> Result<RankingFlipSearch> {
    if trials == 0 {
        return Err(FlowrError::Config("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let n_pos = 100;
    let n_neg = 300;
    for trial in 0..trials {
        let neg: Vec<f64> = (0..n_neg).map(|_| std.sample(&mut rng)).collect();
        let mu_a = rng.random_range(0.5..2.0);
        let mu_b = rng.random_range(0.0..2.0);
        let sd_b = rng.random_range(1.5..4.0);
        let pos_a: Vec<f64> = (0..n_pos).map(|_| mu_a + std.sample(&mut rng)).collect();
        let pos_b: Vec<f64> = (0..n_pos).map(|_| mu_b + sd_b * std.sample(&mut rng)).collect();
        let a = ScoreSet::new(pos_a, neg.clone())?;
        let b = ScoreSet::new(pos_b, neg)?;
        let (auc_a, auc_b) = (auroc(&a), auroc(&b));
        let (h_a, h_b) = (h_measure(&a, 2.0, 2.0)?, h_measure(&b, 2.0, 2.0)?);
        let d_auc = auc_a - auc_b;
        let d_h = h_a - h_b;
        if d_auc != 0.0 && d_h != 0.0 && d_auc.signum() == -d_h.signum() {
            return Ok(RankingFlipSearch {
                found: Some(RankingFlip {
                    trial,
                    first: a,
                    second: b,
                    auroc_first: auc_a,
                    auroc_second: auc_b,
                    h_first: h_a,
                    h_second: h_b,
                }),
                trials_used: trial + 1,
                failures: trial,
            });
        }
    }
    Ok(RankingFlipSearch {
        found: None,
        trials_used: trials,
        failures: trials,
    })
}
