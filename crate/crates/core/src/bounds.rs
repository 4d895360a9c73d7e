//! Bound verification: analytic bound probabilities, pointwise lemma floors,
//! the binomial tail lemma, Monte Carlo estimates of bound probabilities and
//! the SCE/IS identity.
//!
//! Bounds relate a loss value to `-ln metric(r_+)`. For a rank `r_+` the
//! metric condition `-ln metric(r_+) <= m ln 2` holds iff
//! `r_+ <= 2^(2^m) - 1` (NDCG) or `r_+ <= 2^m` (RR). Each sampled loss has a
//! pointwise floor in terms of a counter `ξ` over the sampled items:
//!
//! | loss | `ξ` counts sampled items with       | floor            | success prob. `p` |
//! |------|-------------------------------------|------------------|-------------------|
//! | NCE  | `s'_i >= 0`                         | `ξ ln 2`         | `|S'_+| / |I|`    |
//! | NEG  | `s_i >= 0`                          | `ξ ln 2`         | `|S_+| / |I|`     |
//! | SCE  | `s_i >= s_+`                        | `ln(1 + α ξ)`    | `r_+ / |I|`       |
//! | IS   | `s_i - ln Q_i >= s_+ - ln Q_+`      | `ln ξ` (`ξ>=1`)  | `r_+ / |I|`       |

use std::f64::consts::LN_2;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    ce_topn_loss, loss_value, nce_corrected_score, neg_equivalent_c, LossInstance, LossKind, LossSpec,
};
use crate::metrics::{neg_log_metric, rank_of_target, MetricKind};
use crate::sampling::build_sce_proposal;

/// Largest `m` considered when maximising the analytic bound.
pub const MAX_M: u32 = 40;
/// Confidence level of the Monte Carlo interval.
pub const CONFIDENCE: f64 = 0.99;
/// Minimum number of Monte Carlo trials.
pub const MIN_TRIALS: usize = 1000;

/// Slack allowed for floating-point rounding in pointwise comparisons.
pub fn rounding_tolerance(a: f64, b: f64) -> f64 {
    1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Loss evaluation used by the verification suites. The default is the
/// crate's own implementation; tests substitute deliberately wrong ones.
pub trait LossFamily: Sync {
    fn evaluate(&self, spec: &LossSpec, instance: &LossInstance) -> Result<f64> {
        loss_value(spec, instance)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceLosses;

impl LossFamily for ReferenceLosses {}

/// Smallest `m` whose metric condition admits `r_plus`.
pub fn admissible_m(metric: MetricKind, r_plus: usize) -> Result<u32> {
    if r_plus == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let r = r_plus as u128;
    let mut m = 0u32;
    loop {
        let ok = match metric {
            MetricKind::Ndcg => m >= 7 || r < (1u128 << (1u32 << m)),
            MetricKind::Rr => m >= 127 || r <= (1u128 << m),
            MetricKind::Hr => return Err(Error::InvalidArgument("HR has no bound".into())),
        };
        if ok {
            return Ok(m);
        }
        m += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub loss: LossKind,
    pub metric: MetricKind,
    pub r_plus: usize,
    pub catalog_size: usize,
    #[serde(rename = "K")]
    pub negatives: usize,
    /// `|S_+| = |{v : s_v >= 0}|`, used by NEG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_plus_count: Option<usize>,
    /// `|S'_+| = |{v : s'_v >= 0}|`, used by NCE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_plus_prime_count: Option<usize>,
    /// Fixed `m`; `None` maximises over every admissible `m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
}

impl BoundQuery {
    /// Query describing `scores`/`target` under `spec`.
    pub fn from_scores(spec: &LossSpec, metric: MetricKind, scores: &[f64], target: usize) -> Result<Self> {
        let r_plus = rank_of_target(scores, target)?.rank;
        let n = scores.len();
        let k = spec
            .sample_count()
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not a sampled loss", spec.kind.name())))?;
        let (mut s_plus, mut s_prime) = (None, None);
        match spec.kind {
            LossKind::Neg => s_plus = Some(scores.iter().filter(|&&s| s >= 0.0).count()),
            LossKind::Nce { c } => {
                s_prime = Some(scores.iter().filter(|&&s| nce_corrected_score(s, c, k, n) >= 0.0).count())
            }
            _ => {}
        }
        Ok(Self {
            loss: spec.kind,
            metric,
            r_plus,
            catalog_size: n,
            negatives: k,
            s_plus_count: s_plus,
            s_plus_prime_count: s_prime,
            m: None,
        })
    }

    pub fn with_m(mut self, m: u32) -> Self {
        self.m = Some(m);
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.catalog_size;
        if n == 0 || self.r_plus == 0 || self.r_plus > n {
            return Err(Error::InvalidArgument(format!("need 1 <= r+ <= |I| (r+ = {}, |I| = {n})", self.r_plus)));
        }
        if self.negatives == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        let count = match self.loss {
            LossKind::Neg => Some(
                self.s_plus_count.ok_or_else(|| Error::InvalidArgument("NEG bound requires s_plus_count".into()))?,
            ),
            LossKind::Nce { .. } => Some(
                self.s_plus_prime_count
                    .ok_or_else(|| Error::InvalidArgument("NCE bound requires s_plus_prime_count".into()))?,
            ),
            LossKind::Sce { alpha } if alpha >= 1.0 => None,
            LossKind::Is => None,
            other => return Err(Error::InvalidArgument(format!("no probabilistic bound for {}", other.name()))),
        };
        if count.is_some_and(|c| c > n) {
            return Err(Error::InvalidArgument("count exceeds catalog size".into()));
        }
        Ok(())
    }

    /// Bound value at one `m`, without the admissibility check.
    pub fn value_at(&self, m: u32) -> f64 {
        let n = self.catalog_size as f64;
        let k = self.negatives as f64;
        let two_m = 2f64.powi(m as i32);
        let miss = |count: usize| 1.0 - count as f64 / n;
        match self.loss {
            LossKind::Nce { .. } | LossKind::Neg => {
                if m == 0 {
                    return 1.0;
                }
                let count = self.s_plus_prime_count.or(self.s_plus_count).unwrap_or(0);
                let mf = m as f64;
                1.0 - mf * miss(count).powf((k / mf).floor())
            }
            LossKind::Sce { alpha } => {
                if m == 0 {
                    return 1.0;
                }
                1.0 - (two_m / alpha) * miss(self.r_plus).powf((alpha * k / two_m).floor())
            }
            // IS can be negative, so m = 0 keeps the formula.
            LossKind::Is => 1.0 - two_m * miss(self.r_plus).powf((k / two_m).floor()),
            _ => f64::NAN,
        }
    }

    /// The `m` at which the bound is evaluated, and the bound there.
    pub fn best(&self) -> Result<(u32, f64)> {
        self.validate()?;
        let lo = admissible_m(self.metric, self.r_plus)?;
        if let Some(m) = self.m {
            if m < lo {
                return Err(Error::InvalidArgument(format!(
                    "m = {m} is below the smallest admissible m = {lo} for r+ = {}",
                    self.r_plus
                )));
            }
            return Ok((m, self.value_at(m)));
        }
        let mut best = (lo, self.value_at(lo));
        for m in lo + 1..=MAX_M.max(lo) {
            let v = self.value_at(m);
            if v > best.1 {
                best = (m, v);
            }
        }
        Ok(best)
    }
}

/// Lower bound on `P(-ln metric(r_+) <= ℓ)`; values `<= 0` are vacuous.
pub fn analytic_bound_probability(query: &BoundQuery) -> Result<f64> {
    query.best().map(|(_, v)| v)
}

/// Pointwise floor of a loss instance and the counter behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaFloor {
    pub floor: f64,
    pub xi: Option<usize>,
}

/// `ξ` and the floor it implies. Full-catalog kinds get `-ln metric(r_+)`
/// where a guarantee exists; BCE/BPR and uncovered cases get `0`.
pub fn lemma_floor(spec: &LossSpec, instance: &LossInstance, metric: MetricKind) -> Result<LemmaFloor> {
    let plain = |floor| Ok(LemmaFloor { floor, xi: None });
    match (spec.kind, instance) {
        (kind, LossInstance::Full { target_index, scores }) if kind.is_full() => {
            let r = rank_of_target(scores, *target_index)?.rank;
            let covered = match kind {
                LossKind::CeTopN { n } => n >= r,
                _ => true,
            };
            plain(if covered { neg_log_metric(metric, r) } else { 0.0 })
        }
        (LossKind::Bce | LossKind::Bpr, _) => plain(0.0),
        (LossKind::Nce { c }, LossInstance::Sampled { negative_scores, .. }) => {
            let size = spec.catalog_size.ok_or_else(|| Error::InvalidArgument("NCE requires catalog_size".into()))?;
            let k = negative_scores.len();
            let xi = negative_scores.iter().filter(|&&s| nce_corrected_score(s, c, k, size) >= 0.0).count();
            Ok(LemmaFloor { floor: xi as f64 * LN_2, xi: Some(xi) })
        }
        (LossKind::Neg, LossInstance::Sampled { negative_scores, .. }) => {
            let xi = negative_scores.iter().filter(|&&s| s >= 0.0).count();
            Ok(LemmaFloor { floor: xi as f64 * LN_2, xi: Some(xi) })
        }
        (LossKind::Sce { alpha }, LossInstance::Sampled { target_score, negative_scores }) => {
            let xi = negative_scores.iter().filter(|&&s| s >= *target_score).count();
            Ok(LemmaFloor { floor: (alpha * xi as f64).ln_1p(), xi: Some(xi) })
        }
        (
            LossKind::Is,
            LossInstance::Weighted { target_score, target_proposal_logprob, sample_scores, sample_proposal_logprobs },
        ) => {
            let anchor = target_score - target_proposal_logprob;
            let xi = sample_scores.iter().zip(sample_proposal_logprobs).filter(|&(s, q)| s - q >= anchor).count();
            let floor = if xi >= 1 { (xi as f64).ln() } else { f64::NEG_INFINITY };
            Ok(LemmaFloor { floor, xi: Some(xi) })
        }
        _ => Err(Error::KindMismatch(format!("{} cannot be evaluated on this instance", spec.kind.name()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseCheck {
    pub loss: f64,
    pub neg_log_metric: f64,
    /// `ℓ - (-ln metric(r_+))`.
    pub metric_slack: f64,
    pub floor: f64,
    /// `ℓ - floor`.
    pub floor_slack: f64,
    pub xi: Option<usize>,
    /// The loss respects its pointwise floor.
    pub holds: bool,
}

/// Evaluates the loss on `instance` and compares it with its lemma floor and
/// with `-ln metric(r_+)`, where `r_+` comes from `full_scores`.
pub fn pointwise_bound_check(
    family: &dyn LossFamily,
    spec: &LossSpec,
    instance: &LossInstance,
    full_scores: &[f64],
    target_index: usize,
    metric: MetricKind,
) -> Result<PointwiseCheck> {
    let loss = family.evaluate(spec, instance)?;
    let r = rank_of_target(full_scores, target_index)?.rank;
    let nlm = neg_log_metric(metric, r);
    let LemmaFloor { floor, xi } = lemma_floor(spec, instance, metric)?;
    let floor_slack = loss - floor;
    Ok(PointwiseCheck {
        loss,
        neg_log_metric: nlm,
        metric_slack: loss - nlm,
        floor,
        floor_slack,
        xi,
        holds: floor_slack >= -rounding_tolerance(loss, floor),
    })
}

/// Exact `P(ξ >= m)` for `ξ ~ Binomial(K, p)`, `K <= 64`.
pub fn binomial_tail_exact(k: u32, p: f64, m: u32) -> Result<f64> {
    if k > 64 {
        return Err(Error::InvalidArgument(format!("exact tail supports K <= 64 (got {k})")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p must lie in [0, 1] (got {p})")));
    }
    if m == 0 {
        return Ok(1.0);
    }
    if m > k {
        return Ok(0.0);
    }
    // Upper tail summed directly; C(K, j) is exact in u64 for K <= 64.
    let mut coeff: u64 = 1;
    let mut tail = 0.0;
    for j in 0..=k {
        if j >= m {
            tail += coeff as f64 * p.powi(j as i32) * (1.0 - p).powi((k - j) as i32);
        }
        if j < k {
            coeff = (coeff as u128 * (k - j) as u128 / (j + 1) as u128) as u64;
        }
    }
    Ok(tail.min(1.0))
}

/// `1 - m (1-p)^⌊K/m⌋`; `1` at `m = 0`.
pub fn binomial_lemma_bound(k: u32, p: f64, m: u32) -> f64 {
    if m == 0 {
        return 1.0;
    }
    1.0 - m as f64 * (1.0 - p).powi((k / m) as i32)
}

/// `|ℓ_SCE - ℓ_IS|` with IS over `{target} ∪ negatives` under the proposal
/// `Q(v_+) = α/(|I|-1+α)`, `Q(v) = 1/(|I|-1+α)`.
pub fn sce_is_equivalence_check(
    target_score: f64,
    negative_scores: &[f64],
    alpha: f64,
    catalog_size: usize,
) -> Result<f64> {
    let dist = build_sce_proposal(alpha, catalog_size, 0)?;
    let sce = crate::losses::sce_loss(target_score, negative_scores, alpha)?;
    let (lq_t, lq_o) = (dist.target_mass.ln(), dist.other_mass.ln());
    let mut scores = vec![target_score];
    scores.extend_from_slice(negative_scores);
    let mut logq = vec![lq_t];
    logq.extend(std::iter::repeat_n(lq_o, negative_scores.len()));
    let is = crate::losses::is_loss(target_score, lq_t, &scores, &logq)?;
    Ok((sce - is).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Supported,
    Vacuous,
    Violated,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Supported => "supported",
            Verdict::Vacuous => "vacuous",
            Verdict::Violated => "violated",
        })
    }
}

/// Two-sided Hoeffding half-width for `trials` Bernoulli samples.
pub fn hoeffding_halfwidth(trials: usize, confidence: f64) -> f64 {
    ((2.0 / (1.0 - confidence)).ln() / (2.0 * trials as f64)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub query: BoundQuery,
    pub m: u32,
    pub analytic_lower: f64,
    pub empirical: f64,
    pub trials: usize,
    pub ci_halfwidth: f64,
    pub verdict: Verdict,
}

/// Builds the loss instance for `sample` drawn against `scores`/`target`.
fn sampled_instance(spec: &LossSpec, scores: &[f64], target: usize, sample: &[usize]) -> LossInstance {
    let sp = scores[target];
    let picked: Vec<f64> = sample.iter().map(|&v| scores[v]).collect();
    match spec.kind {
        LossKind::Is => {
            let lq = -(scores.len() as f64).ln();
            LossInstance::Weighted {
                target_score: sp,
                target_proposal_logprob: lq,
                sample_proposal_logprobs: vec![lq; picked.len()],
                sample_scores: picked,
            }
        }
        _ => LossInstance::Sampled { target_score: sp, negative_scores: picked },
    }
}

/// Estimates `P(-ln metric(r_+) <= ℓ)` when `K` items are drawn uniformly
/// with replacement from the whole catalog, the target included. Trial `t`
/// uses ChaCha8 stream `t` of `seed`.
pub fn monte_carlo_bound_probability(
    family: &dyn LossFamily,
    full_scores: &[f64],
    target: usize,
    spec: &LossSpec,
    metric: MetricKind,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("at least {MIN_TRIALS} trials required (got {trials})")));
    }
    spec.validate()?;
    let n = full_scores.len();
    let spec = spec.with_catalog_size(n);
    let query = BoundQuery::from_scores(&spec, metric, full_scores, target)?;
    let (m, analytic) = query.best()?;
    let k = query.negatives;
    let nlm = neg_log_metric(metric, query.r_plus);
    let hits = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<u64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let sample: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            let loss = family.evaluate(&spec, &sampled_instance(&spec, full_scores, target, &sample))?;
            Ok(u64::from(nlm <= loss + rounding_tolerance(loss, nlm)))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let empirical = hits as f64 / trials as f64;
    let ci = hoeffding_halfwidth(trials, CONFIDENCE);
    let verdict = if analytic <= 0.0 {
        Verdict::Vacuous
    } else if empirical >= analytic - ci {
        Verdict::Supported
    } else {
        Verdict::Violated
    };
    Ok(BoundReport { query, m, analytic_lower: analytic, empirical, trials, ci_halfwidth: ci, verdict })
}

/// Scores drawn i.i.d. N(0, 1); a third of vectors are rounded to a 0.5
/// grid so ties occur.
pub fn random_scores<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tied = rng.random_range(0..3) == 0;
    (0..n)
        .map(|_| {
            let s: f64 = normal.sample(rng);
            if tied {
                (s * 2.0).round() / 2.0
            } else {
                s
            }
        })
        .collect()
}

/// A random instance of a sampled loss with uniform draws over the catalog.
pub fn random_sampled_instance<R: Rng + ?Sized>(
    rng: &mut R,
    kind: LossKind,
) -> (LossSpec, LossInstance, Vec<f64>, usize) {
    let n = rng.random_range(2..=200);
    let scale = [0.1, 1.0, 3.0, 10.0][rng.random_range(0..4)];
    let scores: Vec<f64> = random_scores(rng, n).into_iter().map(|s| s * scale).collect();
    let target = rng.random_range(0..n);
    let k = if kind.is_pairwise() { 1 } else { rng.random_range(1..=64) };
    let sample: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
    let kind = match kind {
        LossKind::Nce { .. } => LossKind::Nce { c: rng.random_range(-5.0..15.0) },
        LossKind::Sce { .. } => LossKind::Sce { alpha: rng.random_range(1.0..200.0) },
        other => other,
    };
    let spec = LossSpec::new(kind).with_negatives(k).with_catalog_size(n);
    let instance = sampled_instance(&spec, &scores, target, &sample);
    (spec, instance, scores, target)
}

/// One line of `verify-bounds` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub suite: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<BoundQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<f64>,
    pub checks: usize,
    pub violations: usize,
    /// Largest relative difference (identities) or most negative slack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst: Option<f64>,
    pub verdict: Verdict,
}

impl VerificationRecord {
    fn counted(suite: &str, name: &str, checks: usize, violations: usize, worst: f64) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            query: None,
            analytic: None,
            empirical: None,
            ci: None,
            checks,
            violations,
            worst: Some(worst),
            verdict: if violations == 0 { Verdict::Supported } else { Verdict::Violated },
        }
    }

    fn from_report(name: String, r: &BoundReport) -> Self {
        Self {
            suite: "theorems".into(),
            name,
            query: Some(r.query),
            analytic: Some(r.analytic_lower),
            empirical: Some(r.empirical),
            ci: Some(r.ci_halfwidth),
            checks: r.trials,
            violations: usize::from(r.verdict == Verdict::Violated),
            worst: None,
            verdict: r.verdict,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Identities,
    Lemmas,
    Binomial,
    Theorems,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identities" => Ok(Suite::Identities),
            "lemmas" => Ok(Suite::Lemmas),
            "binomial" => Ok(Suite::Binomial),
            "theorems" => Ok(Suite::Theorems),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidArgument(format!("unknown suite '{other}'"))),
        }
    }
}

pub fn relative_difference(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Tolerance of the exact identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

fn identity_record(name: &str, diffs: impl Iterator<Item = Result<f64>>) -> Result<VerificationRecord> {
    let (mut n, mut bad, mut worst) = (0, 0, 0.0f64);
    for d in diffs {
        let d = d?;
        n += 1;
        worst = worst.max(d);
        if !(d <= IDENTITY_TOLERANCE) {
            bad += 1;
        }
    }
    Ok(VerificationRecord::counted("identities", name, n, bad, worst))
}

/// The exact identities between loss kinds, each on `instances` random inputs.
pub fn identity_suite(family: &dyn LossFamily, instances: usize, seed: u64) -> Result<Vec<VerificationRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(instances);
    for _ in 0..instances {
        let n = rng.random_range(2..=100);
        let scores = random_scores(&mut rng, n);
        let target = rng.random_range(0..n);
        let k = rng.random_range(1..=64);
        let alpha = rng.random_range(1.0..200.0);
        let negs: Vec<f64> = (0..k).map(|_| scores[rng.random_range(0..n)]).collect();
        cases.push((scores, target, negs, alpha));
    }
    let full = |kind, t, s: &Vec<f64>| {
        family.evaluate(&LossSpec::new(kind), &LossInstance::Full { target_index: t, scores: s.clone() })
    };
    let sampled = |spec: LossSpec, sp: f64, negs: &[f64]| {
        family.evaluate(&spec, &LossInstance::Sampled { target_score: sp, negative_scores: negs.to_vec() })
    };
    let mut out = Vec::new();
    out.push(identity_record(
        "sce_alpha1_all_items_eq_ce",
        cases.iter().map(|(s, t, _, _)| {
            let others: Vec<f64> = s.iter().enumerate().filter(|&(v, _)| v != *t).map(|(_, &x)| x).collect();
            let spec = LossSpec::new(LossKind::Sce { alpha: 1.0 }).with_negatives(others.len());
            Ok(relative_difference(sampled(spec, s[*t], &others)?, full(LossKind::Ce, *t, s)?))
        }),
    )?);
    out.push(identity_record(
        "nce_neg_equivalent_c_eq_neg",
        cases.iter().map(|(s, t, negs, _)| {
            let n = s.len();
            let c = neg_equivalent_c(negs.len(), n);
            let nce = LossSpec::new(LossKind::Nce { c }).with_negatives(negs.len()).with_catalog_size(n);
            let neg = LossSpec::new(LossKind::Neg).with_negatives(negs.len());
            Ok(relative_difference(sampled(nce, s[*t], negs)?, sampled(neg, s[*t], negs)?))
        }),
    )?);
    out.push(identity_record(
        "sce_eq_is_under_skewed_proposal",
        cases.iter().map(|(s, t, negs, alpha)| {
            let n = s.len();
            let spec = LossSpec::new(LossKind::Sce { alpha: *alpha }).with_negatives(negs.len());
            let sce = sampled(spec, s[*t], negs)?;
            let dist = build_sce_proposal(*alpha, n, *t)?;
            let (lq_t, lq_o) = (dist.target_mass.ln(), dist.other_mass.ln());
            let mut samples = vec![s[*t]];
            samples.extend_from_slice(negs);
            let mut logq = vec![lq_t];
            logq.extend(std::iter::repeat_n(lq_o, negs.len()));
            let is = family.evaluate(
                &LossSpec::new(LossKind::Is).with_negatives(samples.len()),
                &LossInstance::Weighted {
                    target_score: s[*t],
                    target_proposal_logprob: lq_t,
                    sample_scores: samples,
                    sample_proposal_logprobs: logq,
                },
            )?;
            Ok(relative_difference(sce, is))
        }),
    )?);
    out.push(identity_record(
        "ce_eta0_eq_ce_topn_at_rank",
        cases.iter().map(|(s, t, _, _)| {
            let r = rank_of_target(s, *t)?.rank;
            Ok(relative_difference(full(LossKind::CeEta { eta: 0.0 }, *t, s)?, full(LossKind::CeTopN { n: r }, *t, s)?))
        }),
    )?);
    out.push(identity_record(
        "ce_topn_full_catalog_eq_ce",
        cases.iter().map(|(s, t, _, _)| {
            Ok(relative_difference(full(LossKind::CeTopN { n: s.len() }, *t, s)?, full(LossKind::Ce, *t, s)?))
        }),
    )?);
    Ok(out)
}

/// Lemma floors of NCE, NEG, SCE and IS, `instances` random inputs each.
pub fn lemma_suite(family: &dyn LossFamily, instances: usize, seed: u64) -> Result<Vec<VerificationRecord>> {
    let kinds = [
        ("nce_floor", LossKind::Nce { c: 0.0 }),
        ("neg_floor", LossKind::Neg),
        ("sce_floor", LossKind::Sce { alpha: 1.0 }),
        ("is_floor", LossKind::Is),
    ];
    let mut out = Vec::new();
    for (i, (name, kind)) in kinds.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (mut bad, mut worst, mut checked) = (0, f64::INFINITY, 0);
        for _ in 0..instances {
            let (spec, inst, scores, target) = random_sampled_instance(&mut rng, kind);
            let check = pointwise_bound_check(family, &spec, &inst, &scores, target, MetricKind::Ndcg)?;
            if check.floor == f64::NEG_INFINITY {
                continue;
            }
            checked += 1;
            worst = worst.min(check.floor_slack);
            if !check.holds {
                bad += 1;
            }
        }
        out.push(VerificationRecord::counted("lemmas", name, checked, bad, worst));
    }
    Ok(out)
}

/// The binomial tail lemma against exact tails for `K <= 20`, every
/// `0 <= m <= K` and `p` in `0.05, 0.10, ..., 0.95`.
pub fn binomial_suite() -> Result<Vec<VerificationRecord>> {
    let (mut n, mut bad, mut worst) = (0, 0, f64::INFINITY);
    for k in 0..=20u32 {
        for m in 0..=k {
            for step in 1..=19 {
                let p = step as f64 * 0.05;
                let exact = binomial_tail_exact(k, p, m)?;
                let lemma = binomial_lemma_bound(k, p, m);
                n += 1;
                worst = worst.min(exact - lemma);
                if lemma > exact + rounding_tolerance(lemma, exact) {
                    bad += 1;
                }
            }
        }
    }
    Ok(vec![VerificationRecord::counted("binomial", "lemma_below_exact_tail", n, bad, worst)])
}

/// `-ln metric(r_+) <= ℓ_CE-n` for every `n >= r_+`, for NDCG and RR.
pub fn truncation_suite(vectors: usize, seed: u64) -> Result<Vec<VerificationRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (mut n_checks, mut bad, mut worst) = (0, 0, f64::INFINITY);
    for _ in 0..vectors {
        let n = rng.random_range(1..=64);
        let scores = random_scores(&mut rng, n);
        let target = rng.random_range(0..n);
        let r = rank_of_target(&scores, target)?.rank;
        for metric in [MetricKind::Ndcg, MetricKind::Rr] {
            let nlm = neg_log_metric(metric, r);
            for cut in r..=n {
                let l = ce_topn_loss(target, &scores, cut)?;
                n_checks += 1;
                worst = worst.min(l - nlm);
                if nlm > l + rounding_tolerance(l, nlm) {
                    bad += 1;
                }
            }
        }
    }
    out.push(VerificationRecord::counted("bounds", "truncated_ce_all_n_at_least_rank", n_checks, bad, worst));
    Ok(out)
}

/// `-ln NDCG(r_+) <= ℓ_CE` on random vectors.
pub fn ce_bound_suite(vectors: usize, seed: u64) -> Result<Vec<VerificationRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad, mut worst) = (0, f64::INFINITY);
    for _ in 0..vectors {
        let n = rng.random_range(1..=256);
        let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let scores: Vec<f64> = random_scores(&mut rng, n).into_iter().map(|s| s * scale).collect();
        let target = rng.random_range(0..n);
        let check = pointwise_bound_check(
            &ReferenceLosses,
            &LossSpec::new(LossKind::Ce),
            &LossInstance::Full { target_index: target, scores: scores.clone() },
            &scores,
            target,
            MetricKind::Ndcg,
        )?;
        worst = worst.min(check.metric_slack);
        if !check.holds {
            bad += 1;
        }
    }
    Ok(vec![VerificationRecord::counted("bounds", "ce_bounds_ndcg", vectors, bad, worst)])
}

/// A Monte Carlo configuration: N(0,1) scores over `catalog_size` items with
/// the target placed at rank `r_plus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremConfig {
    pub loss: LossKind,
    pub metric: MetricKind,
    pub catalog_size: usize,
    pub r_plus: usize,
    pub negatives: usize,
    pub score_seed: u64,
}

impl TheoremConfig {
    pub fn name(&self) -> String {
        let param = match self.loss {
            LossKind::Nce { c } => format!("(c={c})"),
            LossKind::Sce { alpha } => format!("(alpha={alpha})"),
            _ => String::new(),
        };
        format!(
            "{}{}/{} |I|={} r+={} K={}",
            self.loss.name(),
            param,
            self.metric.name(),
            self.catalog_size,
            self.r_plus,
            self.negatives
        )
    }

    /// Distinct N(0,1) scores; the target is the item at rank `r_plus`.
    pub fn scores(&self) -> (Vec<f64>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.score_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let scores: Vec<f64> = (0..self.catalog_size).map(|_| normal.sample(&mut rng)).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        (scores, order[self.r_plus - 1])
    }

    pub fn spec(&self) -> LossSpec {
        LossSpec::new(self.loss).with_negatives(self.negatives).with_catalog_size(self.catalog_size)
    }
}

/// Twenty configurations over NCE/NEG/SCE/IS × NDCG/RR whose analytic
/// bounds are non-vacuous, including `|I|=100, r+=4, α=4, K=8`.
pub fn theorem_grid() -> Vec<TheoremConfig> {
    use LossKind::*;
    use MetricKind::*;
    let c = |loss, metric, catalog_size, r_plus, negatives, score_seed| TheoremConfig {
        loss,
        metric,
        catalog_size,
        r_plus,
        negatives,
        score_seed,
    };
    vec![
        c(Sce { alpha: 4.0 }, Ndcg, 100, 4, 8, 1),
        c(Sce { alpha: 4.0 }, Rr, 100, 4, 8, 2),
        c(Sce { alpha: 100.0 }, Ndcg, 100, 10, 5, 3),
        c(Sce { alpha: 16.0 }, Rr, 200, 16, 32, 4),
        c(Sce { alpha: 2.0 }, Ndcg, 100, 3, 20, 5),
        c(Is, Ndcg, 100, 10, 64, 6),
        c(Is, Rr, 20, 4, 40, 7),
        c(Is, Ndcg, 200, 40, 256, 8),
        c(Is, Rr, 50, 8, 128, 9),
        c(Is, Ndcg, 100, 1, 16, 10),
        c(Neg, Ndcg, 100, 4, 10, 11),
        c(Neg, Rr, 100, 3, 10, 12),
        c(Neg, Ndcg, 200, 15, 32, 13),
        c(Neg, Rr, 100, 8, 64, 14),
        c(Neg, Ndcg, 50, 2, 4, 15),
        c(Nce { c: 1.0 }, Ndcg, 100, 4, 10, 16),
        c(Nce { c: 1.0 }, Rr, 100, 4, 10, 17),
        c(Nce { c: 0.0 }, Ndcg, 200, 15, 32, 18),
        c(Nce { c: 0.5 }, Rr, 100, 16, 64, 19),
        c(Nce { c: 2.0 }, Ndcg, 100, 3, 50, 20),
    ]
}

/// Monte Carlo estimates for every configuration of [`theorem_grid`].
pub fn theorem_suite(family: &dyn LossFamily, trials: usize, seed: u64) -> Result<Vec<VerificationRecord>> {
    theorem_grid()
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let (scores, target) = cfg.scores();
            let report = monte_carlo_bound_probability(
                family,
                &scores,
                target,
                &cfg.spec(),
                cfg.metric,
                trials,
                seed ^ i as u64,
            )?;
            Ok(VerificationRecord::from_report(cfg.name(), &report))
        })
        .collect()
}

/// Runs a suite. `trials` is the number of random instances per lemma and
/// the number of Monte Carlo trials per theorem configuration.
pub fn run_suite(family: &dyn LossFamily, suite: Suite, trials: usize, seed: u64) -> Result<Vec<VerificationRecord>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Identities | Suite::All) {
        out.extend(identity_suite(family, 1000, seed)?);
    }
    if matches!(suite, Suite::Lemmas | Suite::All) {
        out.extend(lemma_suite(family, trials, seed)?);
    }
    if matches!(suite, Suite::Binomial | Suite::All) {
        out.extend(binomial_suite()?);
    }
    if matches!(suite, Suite::Theorems | Suite::All) {
        out.extend(theorem_suite(family, trials.max(MIN_TRIALS), seed)?);
    }
    Ok(out)
}
