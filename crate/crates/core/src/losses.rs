//! Cross-entropy and its approximations, written as `ℓ = -s_+ + log Z`.
//!
//! All values are in nats. Every loss has an analytic gradient with respect
//! to the scores it consumes; see [`loss_and_gradient`].
//!
//! | kind      | normaliser `Z`                                         | scores consumed |
//! |-----------|--------------------------------------------------------|-----------------|
//! | `CE`      | `Σ_v exp(s_v)` over the catalog                        | full vector     |
//! | `CE_TopN` | same, restricted to items ranked in the top `n`       | full vector     |
//! | `CE_Eta`  | same, restricted to `s_v ≥ s_+ - η|s_+|`               | full vector     |
//! | `BCE`     | `(1 + e^{s_+})(1 + e^{s_-})`                           | target + 1      |
//! | `BPR`     | `e^{s_+} + e^{s_-}`                                    | target + 1      |
//! | `NCE`     | `(1 + e^{s'_+}) Π (1 + e^{s'_i})`, corrected scores    | target + K      |
//! | `NEG`     | `(1 + e^{s_+}) Π (1 + e^{s_i})`                        | target + K      |
//! | `IS`      | `Σ_i exp(s_i - log Q(v_i) + log Q(v_+))`               | target + K      |
//! | `SCE`     | `e^{s_+} + α Σ_i e^{s_i}`                              | target + K      |
//!
//! The truncated CE variants use `-s_+`; with `+s_+` the expression is not a
//! bound on `-log NDCG`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{all_finite, log_sum_exp, sigmoid, softplus};

/// A member of the loss family with its own hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "CE_TopN")]
    CeTopN { n: usize },
    #[serde(rename = "CE_Eta")]
    CeEta { eta: f64 },
    #[serde(rename = "BCE")]
    Bce,
    #[serde(rename = "BPR")]
    Bpr,
    #[serde(rename = "NCE")]
    Nce { c: f64 },
    #[serde(rename = "NEG")]
    Neg,
    #[serde(rename = "IS")]
    Is,
    #[serde(rename = "SCE")]
    Sce { alpha: f64 },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "CE",
            LossKind::CeTopN { .. } => "CE_TopN",
            LossKind::CeEta { .. } => "CE_Eta",
            LossKind::Bce => "BCE",
            LossKind::Bpr => "BPR",
            LossKind::Nce { .. } => "NCE",
            LossKind::Neg => "NEG",
            LossKind::Is => "IS",
            LossKind::Sce { .. } => "SCE",
        }
    }

    /// True for kinds that score the whole catalog.
    pub fn is_full(&self) -> bool {
        matches!(self, LossKind::Ce | LossKind::CeTopN { .. } | LossKind::CeEta { .. })
    }

    /// True for kinds that always use exactly one negative.
    pub fn is_pairwise(&self) -> bool {
        matches!(self, LossKind::Bce | LossKind::Bpr)
    }
}

/// Loss choice plus the sampling budget `K` and catalog size where relevant.
///
/// JSON form: `{"kind":"SCE","alpha":100,"K":500}`. Keys per kind:
/// `CE` none, `CE_TopN` `n`, `CE_Eta` `eta`, `NCE` `c`, `SCE` `alpha`;
/// `K` for `NCE`/`NEG`/`IS`/`SCE`; `catalog_size` optional everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub kind: LossKind,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog_size: Option<usize>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, negatives: None, catalog_size: None }
    }

    pub fn with_negatives(mut self, k: usize) -> Self {
        self.negatives = Some(k);
        self
    }

    pub fn with_catalog_size(mut self, n: usize) -> Self {
        self.catalog_size = Some(n);
        self
    }

    /// Number of sampled items per positive, or `None` for full-catalog kinds.
    pub fn sample_count(&self) -> Option<usize> {
        match self.kind {
            k if k.is_full() => None,
            k if k.is_pairwise() => Some(1),
            _ => self.negatives,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self.kind {
            LossKind::CeTopN { n } if n == 0 => return bad("CE_TopN requires n >= 1".into()),
            LossKind::CeEta { eta } if !(eta >= 0.0) || eta.is_nan() => {
                return bad(format!("CE_Eta requires eta >= 0 (got {eta})"))
            }
            LossKind::Nce { c } if !c.is_finite() => return bad(format!("NCE requires finite c (got {c})")),
            LossKind::Sce { alpha } if !(alpha >= 1.0) || !alpha.is_finite() => {
                return bad(format!("SCE requires finite alpha >= 1 (got {alpha})"))
            }
            _ => {}
        }
        if let (LossKind::CeTopN { n }, Some(size)) = (self.kind, self.catalog_size) {
            if n > size {
                return bad(format!("CE_TopN n = {n} exceeds catalog size {size}"));
            }
        }
        if !self.kind.is_full() && !self.kind.is_pairwise() {
            match self.negatives {
                Some(k) if k >= 1 => {}
                _ => return bad(format!("{} requires K >= 1", self.kind.name())),
            }
        }
        Ok(())
    }
}

/// Scores consumed by one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossInstance {
    /// Full-catalog kinds: the target's score is `scores[target_index]`.
    Full { target_index: usize, scores: Vec<f64> },
    /// BCE / BPR / NCE / NEG / SCE.
    Sampled { target_score: f64, negative_scores: Vec<f64> },
    /// IS: the normaliser runs over the sample set only.
    Weighted {
        target_score: f64,
        target_proposal_logprob: f64,
        sample_scores: Vec<f64>,
        sample_proposal_logprobs: Vec<f64>,
    },
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if all_finite(values) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn check_target(target_index: usize, scores: &[f64]) -> Result<()> {
    if target_index >= scores.len() {
        return Err(Error::IndexOutOfRange { index: target_index, size: scores.len() });
    }
    check_finite(scores, "scores")
}

/// `-s_+ + log Σ_{keep(v)} exp(s_v)`, summed in index order.
fn masked_ce(target_index: usize, scores: &[f64], keep: impl Fn(usize, f64) -> bool + Clone) -> f64 {
    let retained = scores.iter().enumerate().filter(move |&(v, &s)| keep(v, s)).map(|(_, &s)| s);
    -scores[target_index] + log_sum_exp(retained)
}

pub fn ce_loss(target_index: usize, scores: &[f64]) -> Result<f64> {
    check_target(target_index, scores)?;
    Ok(masked_ce(target_index, scores, |_, _| true))
}

/// Score of the `n`-th best item; items tying with it are all retained.
fn topn_threshold(scores: &[f64], n: usize) -> f64 {
    let mut sorted = scores.to_vec();
    let idx = n - 1;
    let (_, nth, _) = sorted.select_nth_unstable_by(idx, |a, b| b.total_cmp(a));
    *nth
}

pub fn ce_topn_loss(target_index: usize, scores: &[f64], n: usize) -> Result<f64> {
    check_target(target_index, scores)?;
    if n == 0 || n > scores.len() {
        return Err(Error::InvalidArgument(format!("n must lie in 1..={} (got {n})", scores.len())));
    }
    let threshold = topn_threshold(scores, n);
    Ok(masked_ce(target_index, scores, move |v, s| s >= threshold || v == target_index))
}

pub fn ce_eta_loss(target_index: usize, scores: &[f64], eta: f64) -> Result<f64> {
    check_target(target_index, scores)?;
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be >= 0 (got {eta})")));
    }
    let sp = scores[target_index];
    let floor = -eta * sp.abs();
    Ok(masked_ce(target_index, scores, move |v, s| s - sp >= floor || v == target_index))
}

pub fn bce_loss(target_score: f64, negative_score: f64) -> f64 {
    softplus(-target_score) + softplus(negative_score)
}

pub fn bpr_loss(target_score: f64, negative_score: f64) -> f64 {
    softplus(negative_score - target_score)
}

/// `s' = s - c - log(K / |I|)`.
///
/// Evaluated as `s - (c - log(|I| / K))`, so `c = ln(|I| / K)` computed the
/// same way returns `s` unchanged.
pub fn nce_corrected_score(score: f64, c: f64, k: usize, catalog_size: usize) -> f64 {
    score - (c - neg_equivalent_c(k, catalog_size))
}

/// The `c` for which NCE coincides with NEG: `ln(|I| / K)`.
pub fn neg_equivalent_c(k: usize, catalog_size: usize) -> f64 {
    (catalog_size as f64 / k as f64).ln()
}

pub fn nce_loss(target_score: f64, negative_scores: &[f64], c: f64, catalog_size: usize) -> Result<f64> {
    if negative_scores.is_empty() {
        return Err(Error::InvalidArgument("NCE requires at least one negative".into()));
    }
    let k = negative_scores.len();
    let corr = |s: f64| nce_corrected_score(s, c, k, catalog_size);
    Ok(softplus(-corr(target_score)) + negative_scores.iter().map(|&s| softplus(corr(s))).sum::<f64>())
}

pub fn neg_loss(target_score: f64, negative_scores: &[f64]) -> Result<f64> {
    if negative_scores.is_empty() {
        return Err(Error::InvalidArgument("NEG requires at least one negative".into()));
    }
    Ok(softplus(-target_score) + negative_scores.iter().map(|&s| softplus(s)).sum::<f64>())
}

pub fn is_loss(
    target_score: f64,
    target_proposal_logprob: f64,
    sample_scores: &[f64],
    sample_proposal_logprobs: &[f64],
) -> Result<f64> {
    if sample_scores.is_empty() {
        return Err(Error::InvalidArgument("IS requires a non-empty sample set".into()));
    }
    if sample_scores.len() != sample_proposal_logprobs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sample scores but {} proposal log-probabilities",
            sample_scores.len(),
            sample_proposal_logprobs.len()
        )));
    }
    let corrected = sample_scores.iter().zip(sample_proposal_logprobs).map(|(s, q)| s - q);
    Ok(-(target_score - target_proposal_logprob) + log_sum_exp(corrected))
}

/// `-s_+ + log(e^{s_+} + α Σ e^{s_i})`, with `α` folded in as `+ln α` per negative.
pub fn sce_loss(target_score: f64, negative_scores: &[f64], alpha: f64) -> Result<f64> {
    if negative_scores.is_empty() {
        return Err(Error::InvalidArgument("SCE requires at least one negative".into()));
    }
    if !(alpha >= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 1 (got {alpha})")));
    }
    let ln_alpha = alpha.ln();
    let terms = std::iter::once(target_score).chain(negative_scores.iter().map(move |&s| s + ln_alpha));
    Ok(-target_score + log_sum_exp(terms))
}

/// Loss value and `∂ℓ/∂s` for every score slot of the instance.
///
/// Gradient layout: `Full` → one entry per catalog item; `Sampled` →
/// `[target, negatives...]`; `Weighted` → `[target, samples...]`. Slots are
/// independent inputs: an item appearing in two slots gets two entries.
pub fn loss_and_gradient(spec: &LossSpec, instance: &LossInstance) -> Result<(f64, Vec<f64>)> {
    let mismatch = || Err(Error::KindMismatch(format!("{} cannot be evaluated on this instance", spec.kind.name())));
    match (spec.kind, instance) {
        (kind, LossInstance::Full { target_index, scores }) if kind.is_full() => {
            let t = *target_index;
            check_target(t, scores)?;
            let retain: Box<dyn Fn(usize, f64) -> bool> = match kind {
                LossKind::Ce => Box::new(|_, _| true),
                LossKind::CeTopN { n } => {
                    if n == 0 || n > scores.len() {
                        return Err(Error::InvalidArgument(format!("n must lie in 1..={}", scores.len())));
                    }
                    let thr = topn_threshold(scores, n);
                    Box::new(move |v, s| s >= thr || v == t)
                }
                LossKind::CeEta { eta } => {
                    let sp = scores[t];
                    let floor = -eta * sp.abs();
                    Box::new(move |v, s| s - sp >= floor || v == t)
                }
                _ => unreachable!(),
            };
            let loss = masked_ce(t, scores, &retain);
            let log_z = loss + scores[t];
            let mut grad: Vec<f64> =
                scores.iter().enumerate().map(|(v, &s)| if retain(v, s) { (s - log_z).exp() } else { 0.0 }).collect();
            grad[t] -= 1.0;
            Ok((loss, grad))
        }
        (LossKind::Bce | LossKind::Bpr, LossInstance::Sampled { target_score, negative_scores }) => {
            check_finite(&[*target_score], "target score")?;
            check_finite(negative_scores, "negative scores")?;
            let [sn] = negative_scores[..] else {
                return Err(Error::InvalidArgument(format!(
                    "{} takes exactly one negative (got {})",
                    spec.kind.name(),
                    negative_scores.len()
                )));
            };
            let sp = *target_score;
            if spec.kind == LossKind::Bce {
                Ok((bce_loss(sp, sn), vec![sigmoid(sp) - 1.0, sigmoid(sn)]))
            } else {
                let d = sigmoid(sn - sp);
                Ok((bpr_loss(sp, sn), vec![-d, d]))
            }
        }
        (LossKind::Nce { .. } | LossKind::Neg, LossInstance::Sampled { target_score, negative_scores }) => {
            check_finite(&[*target_score], "target score")?;
            check_finite(negative_scores, "negative scores")?;
            let (loss, shift) = match spec.kind {
                LossKind::Nce { c } => {
                    let size = spec
                        .catalog_size
                        .ok_or_else(|| Error::InvalidArgument("NCE requires catalog_size in the loss spec".into()))?;
                    let loss = nce_loss(*target_score, negative_scores, c, size)?;
                    (loss, c - neg_equivalent_c(negative_scores.len(), size))
                }
                _ => (neg_loss(*target_score, negative_scores)?, 0.0),
            };
            let mut grad = Vec::with_capacity(negative_scores.len() + 1);
            grad.push(sigmoid(*target_score - shift) - 1.0);
            grad.extend(negative_scores.iter().map(|&s| sigmoid(s - shift)));
            Ok((loss, grad))
        }
        (LossKind::Sce { alpha }, LossInstance::Sampled { target_score, negative_scores }) => {
            check_finite(&[*target_score], "target score")?;
            check_finite(negative_scores, "negative scores")?;
            let loss = sce_loss(*target_score, negative_scores, alpha)?;
            let log_z = loss + target_score;
            let ln_alpha = alpha.ln();
            let mut grad = Vec::with_capacity(negative_scores.len() + 1);
            grad.push((target_score - log_z).exp() - 1.0);
            grad.extend(negative_scores.iter().map(|&s| (s + ln_alpha - log_z).exp()));
            Ok((loss, grad))
        }
        (
            LossKind::Is,
            LossInstance::Weighted { target_score, target_proposal_logprob, sample_scores, sample_proposal_logprobs },
        ) => {
            check_finite(&[*target_score, *target_proposal_logprob], "target")?;
            check_finite(sample_scores, "sample scores")?;
            let loss = is_loss(*target_score, *target_proposal_logprob, sample_scores, sample_proposal_logprobs)?;
            let log_z = log_sum_exp(sample_scores.iter().zip(sample_proposal_logprobs).map(|(s, q)| s - q));
            let mut grad = Vec::with_capacity(sample_scores.len() + 1);
            grad.push(-1.0);
            grad.extend(sample_scores.iter().zip(sample_proposal_logprobs).map(|(s, q)| (s - q - log_z).exp()));
            Ok((loss, grad))
        }
        _ => mismatch(),
    }
}

/// Per-score gradients only. See [`loss_and_gradient`] for the layout.
pub fn loss_score_gradient(spec: &LossSpec, instance: &LossInstance) -> Result<Vec<f64>> {
    loss_and_gradient(spec, instance).map(|(_, g)| g)
}

/// Loss value only.
pub fn loss_value(spec: &LossSpec, instance: &LossInstance) -> Result<f64> {
    loss_and_gradient(spec, instance).map(|(l, _)| l)
}
