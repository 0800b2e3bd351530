//! Compound-attack planning: percentile statistics, the linear map from a
//! pair's score percentile to its optimal mole-set mean, greedy pair
//! selection under a threshold, and the shared rounded recruitment count.

use serde::{Deserialize, Serialize};

use crate::attack::sweep_n;
use crate::data::{ClassIndex, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Classifier, TrainConfig};
use crate::moles::{ScoreSource, ScoreTable};
use crate::rng::RunRng;

/// Nearest-rank percentile: sort ascending and return the element at index
/// ceil(p/100 * count) - 1. `p` must lie in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "percentile of an empty list".into(),
        ));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile rank {p} outside (0, 100]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Least-squares line mapping a pair's score percentile rho to the target
/// mole-set mean mu. `percentile_p` records which percentile rank the rho
/// inputs were computed at, when known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionLine {
    pub slope: f64,
    pub intercept: f64,
    pub percentile_p: Option<f64>,
}

impl RegressionLine {
    /// Raw line value at rho.
    pub fn predict(&self, rho: f64) -> f64 {
        self.slope * rho + self.intercept
    }

    /// Line value clamped to the probability range, usable as a target mean.
    pub fn target_mu(&self, rho: f64) -> f64 {
        self.predict(rho).clamp(0.0, 1.0)
    }
}

/// Ordinary least squares over (rho, mu) points.
pub fn fit_regression(points: &[(f64, f64)]) -> Result<RegressionLine> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit(
            "zero variance in rho; the line is vertical".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok(RegressionLine {
        slope,
        intercept: mean_y - slope * mean_x,
        percentile_p: None,
    })
}

/// Error-free addition: returns the rounded sum and the exact rounding
/// error (Knuth's branch-free form).
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Prefix mean at count `n` from a compensated running sum, with one
/// division refinement step so the result is the correctly rounded mean.
fn refined_mean(hi: f64, lo: f64, n: f64) -> f64 {
    let q1 = hi / n;
    let p = q1 * n;
    let err = q1.mul_add(n, -p);
    let r = ((hi - p) - err) + lo;
    q1 + r / n
}

/// The recruitment size whose prefix mean lands closest to `target_mu`,
/// scanning every n in [1, table size]; ties break toward smaller n.
///
/// Prefix means use compensated summation and refined division: naive
/// running sums drift by an ulp or two, which is enough to break the
/// smaller-n tie rule on decimal score tables whose distances tie exactly
/// in real arithmetic.
pub fn optimal_n(table: &ScoreTable, target_mu: f64) -> Result<usize> {
    if table.entries.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot size a mole set from an empty score table".into(),
        ));
    }
    let mut hi = 0.0;
    let mut lo = 0.0;
    let mut best_n = 1;
    let mut best_dist = f64::INFINITY;
    for (i, &(_, score)) in table.entries.iter().enumerate() {
        let (s, e) = two_sum(hi, score);
        hi = s;
        lo += e;
        let mean = refined_mean(hi, lo, (i + 1) as f64);
        let dist = (mean - target_mu).abs();
        if dist < best_dist {
            best_dist = dist;
            best_n = i + 1;
        }
    }
    Ok(best_n)
}

/// One ordered pair's percentile statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub attacked: usize,
    pub confounding: usize,
    pub rho: f64,
}

/// Greedy pair selection: sort by descending rho (ties: ascending class
/// ids), then take pairs meeting the threshold whose classes do not collide
/// with earlier picks. Offline mode forbids reuse of either class; with
/// `allow_attacked_overlap` only confounding classes must stay unique.
pub fn select_combinations(
    stats: &[PairStat],
    rho_threshold: f64,
    allow_attacked_overlap: bool,
) -> Vec<PairStat> {
    let mut order: Vec<&PairStat> = stats.iter().collect();
    order.sort_by(|x, y| {
        y.rho
            .total_cmp(&x.rho)
            .then(x.attacked.cmp(&y.attacked))
            .then(x.confounding.cmp(&y.confounding))
    });
    let mut used_confounding: Vec<usize> = Vec::new();
    let mut used_any: Vec<usize> = Vec::new();
    let mut picked = Vec::new();
    for stat in order {
        if stat.rho < rho_threshold {
            break;
        }
        let collides = if allow_attacked_overlap {
            used_confounding.contains(&stat.confounding)
        } else {
            used_any.contains(&stat.attacked) || used_any.contains(&stat.confounding)
        };
        if collides {
            continue;
        }
        used_confounding.push(stat.confounding);
        used_any.push(stat.attacked);
        used_any.push(stat.confounding);
        picked.push(*stat);
    }
    picked
}

/// Mean of the per-pair counts rounded to the nearest positive multiple of
/// `quantum`; halves round up and the result never drops below one quantum.
pub fn round_n_tilde(per_pair_n: &[usize], quantum: usize) -> Result<usize> {
    if per_pair_n.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot round an empty list of counts".into(),
        ));
    }
    if quantum == 0 {
        return Err(Error::InvalidArgument("quantum must be >= 1".into()));
    }
    let mean = per_pair_n.iter().sum::<usize>() as f64 / per_pair_n.len() as f64;
    let multiples = (mean / quantum as f64).round().max(1.0);
    Ok(multiples as usize * quantum)
}

/// Which statistic the selection threshold applies to: the raw percentile
/// rho, or the regression value r(rho) (strict inequality).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdOn {
    Rho,
    ROfRho,
}

/// Offline attacks forbid any class reuse across selected pairs and
/// threshold on rho by default; class-incremental runs allow attacked-class
/// overlap and threshold on r(rho) by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Offline,
    Cl,
}

impl PlanMode {
    pub fn default_threshold_on(self) -> ThresholdOn {
        match self {
            PlanMode::Offline => ThresholdOn::Rho,
            PlanMode::Cl => ThresholdOn::ROfRho,
        }
    }

    pub fn allow_attacked_overlap(self) -> bool {
        matches!(self, PlanMode::Cl)
    }
}

/// One selected pair with its statistic and individually optimal size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedPair {
    pub attacked: usize,
    pub confounding: usize,
    pub rho: f64,
    pub n: usize,
}

/// A sized compound attack. `pairs` is ordered by descending rho; an empty
/// selection is a valid plan with `n_tilde` = 0, meaning "skip the attack".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundPlan {
    pub pairs: Vec<PlannedPair>,
    pub n_tilde: usize,
    pub quantum: usize,
    pub rho_threshold: f64,
    pub threshold_on: ThresholdOn,
    pub regression: RegressionLine,
}

impl CompoundPlan {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_document(&self) -> CompoundDocument {
        CompoundDocument {
            pairs: self
                .pairs
                .iter()
                .map(|p| (p.attacked, p.confounding))
                .collect(),
            rho: self.pairs.iter().map(|p| p.rho).collect(),
            n: self.pairs.iter().map(|p| p.n).collect(),
            n_tilde: self.n_tilde,
            slope: self.regression.slope,
            intercept: self.regression.intercept,
            percentile_p: self.regression.percentile_p.unwrap_or(f64::NAN),
            rho_threshold: self.rho_threshold,
        }
    }
}

/// Flat JSON form of a compound plan plus the line it was sized with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundDocument {
    pub pairs: Vec<(usize, usize)>,
    pub rho: Vec<f64>,
    pub n: Vec<usize>,
    pub n_tilde: usize,
    pub slope: f64,
    pub intercept: f64,
    pub percentile_p: f64,
    pub rho_threshold: f64,
}

/// Score every candidate pair, threshold, select greedily, size each pair by
/// Eq.-5 scan against the clamped line value, and round to the shared count.
#[allow(clippy::too_many_arguments)]
pub fn build_compound_plan<S: ScoreSource>(
    scorer: &S,
    data: &LabeledDataset,
    index: &ClassIndex,
    candidates: &[(usize, usize)],
    regression: &RegressionLine,
    rho_threshold: f64,
    quantum: usize,
    mode: PlanMode,
    threshold_on: ThresholdOn,
) -> Result<CompoundPlan> {
    let p = regression.percentile_p.ok_or_else(|| {
        Error::InvalidArgument(
            "regression line lacks percentile_p; fit it through the pipeline or set it".into(),
        )
    })?;
    let mut tables: Vec<ScoreTable> = Vec::with_capacity(candidates.len());
    let mut stats: Vec<PairStat> = Vec::with_capacity(candidates.len());
    for &(a, c) in candidates {
        let table = scorer.score_pair(data, index, a, c)?;
        let scores: Vec<f64> = table.entries.iter().map(|&(_, s)| s).collect();
        stats.push(PairStat {
            attacked: a,
            confounding: c,
            rho: percentile(&scores, p)?,
        });
        tables.push(table);
    }

    // Thresholding on r(rho) is a strict prefilter on the line value; the
    // greedy pass then runs unthresholded over the survivors.
    let (survivors, greedy_threshold): (Vec<PairStat>, f64) = match threshold_on {
        ThresholdOn::Rho => (stats, rho_threshold),
        ThresholdOn::ROfRho => (
            stats
                .into_iter()
                .filter(|s| regression.predict(s.rho) > rho_threshold)
                .collect(),
            f64::NEG_INFINITY,
        ),
    };
    let selected =
        select_combinations(&survivors, greedy_threshold, mode.allow_attacked_overlap());

    let mut pairs = Vec::with_capacity(selected.len());
    for stat in &selected {
        let table = tables
            .iter()
            .find(|t| t.attacked == stat.attacked && t.confounding == stat.confounding)
            .expect("selected pair came from the candidate list");
        let n = optimal_n(table, regression.target_mu(stat.rho))?;
        pairs.push(PlannedPair {
            attacked: stat.attacked,
            confounding: stat.confounding,
            rho: stat.rho,
            n,
        });
    }
    let n_tilde = if pairs.is_empty() {
        0
    } else {
        let counts: Vec<usize> = pairs.iter().map(|p| p.n).collect();
        round_n_tilde(&counts, quantum)?
    };
    Ok(CompoundPlan {
        pairs,
        n_tilde,
        quantum,
        rho_threshold,
        threshold_on,
        regression: *regression,
    })
}

/// Raw material for fitting the rho-to-mu line: one pair's full descending
/// score list plus the empirically most damaging size and its mean score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairObservation {
    pub attacked: usize,
    pub confounding: usize,
    /// All scores of the confounding class toward the attacked class,
    /// descending.
    pub scores: Vec<f64>,
    pub best_n: usize,
    pub mu_opt: f64,
}

/// Sweep each pair over the size grid and keep the size with the largest
/// attacked-class penalty (most negative delta; ties toward smaller n). The
/// observation is percentile-independent, so one collection can serve fits
/// at several percentile ranks.
#[allow(clippy::too_many_arguments)]
pub fn observe_pairs(
    victim: &Classifier,
    source: &LabeledDataset,
    index: &ClassIndex,
    test: &LabeledDataset,
    pairs: &[(usize, usize)],
    n_grid: &[usize],
    trials: usize,
    cfg: &TrainConfig,
    base: &RunRng,
) -> Result<Vec<PairObservation>> {
    if n_grid.is_empty() {
        return Err(Error::InvalidArgument("empty size grid".into()));
    }
    let mut sizes: Vec<usize> = n_grid.to_vec();
    sizes.sort_unstable();
    sizes.dedup();

    let mut observations = Vec::with_capacity(pairs.len());
    for &(a, c) in pairs {
        let points = sweep_n(victim, source, index, test, a, c, &sizes, trials, cfg, base)?;
        let best = points
            .iter()
            .min_by(|x, y| {
                x.mean_delta_attacked
                    .total_cmp(&y.mean_delta_attacked)
                    .then(x.n.cmp(&y.n))
            })
            .expect("size grid is nonempty");
        let table = victim.score_pair(source, index, a, c)?;
        observations.push(PairObservation {
            attacked: a,
            confounding: c,
            scores: table.entries.iter().map(|&(_, s)| s).collect(),
            best_n: best.n,
            mu_opt: best.mean_score,
        });
    }
    Ok(observations)
}

/// Fit the line through (rho at `percentile_p`, mu_opt) points.
pub fn fit_line(observations: &[PairObservation], percentile_p: f64) -> Result<RegressionLine> {
    let mut points = Vec::with_capacity(observations.len());
    for obs in observations {
        points.push((percentile(&obs.scores, percentile_p)?, obs.mu_opt));
    }
    let mut line = fit_regression(&points)?;
    line.percentile_p = Some(percentile_p);
    Ok(line)
}

///// Execute a compound plan against an offline victim: recruit every planned
/// pair's moles at the shared size, build one balanced batch over all
/// classes, train a single poison round, and evaluate. The outcome's
/// `mean_scores` follow the plan's pair order.
#[allow(clippy::too_many_arguments)]
pub fn run_compound<S: ScoreSource>(
    victim: &Classifier,
    scorer: &S,
    source: &LabeledDataset,
    index: &ClassIndex,
    test: &LabeledDataset,
    plan: &CompoundPlan,
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(crate::attack::AttackOutcome, Classifier)> {
    if plan.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot execute an empty compound plan".into(),
        ));
    }
    let mut mole_sets = Vec::with_capacity(plan.pairs.len());
    let mut mean_scores = Vec::with_capacity(plan.pairs.len());
    for pair in &plan.pairs {
        let table = scorer.score_pair(source, index, pair.attacked, pair.confounding)?;
        let moles = crate::moles::select_moles(&table, plan.n_tilde)?;
        mean_scores.push(moles.mean_score);
        mole_sets.push(moles);
    }
    let classes: Vec<usize> = (0..source.k()).collect();
    let poison =
        crate::moles::build_poison_set(&mole_sets, source, index, &classes, plan.n_tilde, rng)?;
    let (mut outcome, poisoned) =
        crate::attack::attack_offline(victim, &poison, source, test, cfg, rng)?;
    outcome.mean_scores = mean_scores;
    Ok((outcome, poisoned))
}

/// The full Fig.-6 procedure: sweep every pair, then regress mu_opt on rho.
#[allow(clippy::too_many_arguments)]
pub fn derive_regression_pipeline(
    victim: &Classifier,
    source: &LabeledDataset,
    index: &ClassIndex,
    test: &LabeledDataset,
    pairs: &[(usize, usize)],
    n_grid: &[usize],
    trials: usize,
    percentile_p: f64,
    cfg: &TrainConfig,
    base: &RunRng,
) -> Result<RegressionLine> {
    let observations =
        observe_pairs(victim, source, index, test, pairs, n_grid, trials, cfg, base)?;
    fit_line(&observations, percentile_p)
}
