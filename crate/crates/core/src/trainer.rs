//! Training loop, convergence-epoch detection and hyperparameter sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SequenceDataset;
use crate::error::{Error, Result};
use crate::losses::{loss_and_gradient, LossInstance, LossKind, LossSpec};
use crate::metrics::{evaluate_scorer, evaluate_scorer_parallel, CutoffMetrics, MetricRecord, MetricReport, Split};
use crate::numeric::dot;
use crate::sampling::{sample_uniform_negatives, SamplerConfig};
use crate::scorer::{
    accumulate_gradients, adam_step, init_params, pool_history, score_all, AdamState, HistoryState, ScorerParams,
    SparseGrad, DEFAULT_DECAY, DEFAULT_MAX_HISTORY,
};

/// Cutoff used for model selection and convergence.
pub const SELECTION_CUTOFF: usize = 10;

fn default_loss() -> LossSpec {
    LossSpec::new(LossKind::Ce)
}
fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    128
}
fn default_max_history() -> usize {
    DEFAULT_MAX_HISTORY
}
fn default_decay() -> f64 {
    DEFAULT_DECAY
}
fn default_dim() -> usize {
    64
}
fn default_one() -> usize {
    1
}
fn default_cutoffs() -> Vec<usize> {
    vec![1, 5, 10, 20]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_history")]
    pub max_history: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Train on every prefix of the training sequence instead of only the
    /// positions inside the last `max_history + 1` items.
    #[serde(default)]
    pub sliding_window: bool,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default = "default_true")]
    pub replacement: bool,
    #[serde(default)]
    pub include_target: bool,
    /// Worker threads for evaluation and sweeps; results do not depend on it.
    #[serde(default = "default_one")]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn with_loss(mut self, loss: LossSpec) -> Self {
        self.loss = loss;
        self
    }

    pub fn validate(&self, dataset: &SequenceDataset) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.max_history == 0 {
            return bad("max_history must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.dim == 0 || self.threads == 0 {
            return bad("batch_size, eval_every, dim and threads must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive (got {})", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1] (got {})", self.decay));
        }
        if !self.cutoffs.contains(&SELECTION_CUTOFF) || self.cutoffs.contains(&0) {
            return bad(format!("cutoffs must be >= 1 and include {SELECTION_CUTOFF}"));
        }
        let n = dataset.item_count();
        let spec = self.loss.with_catalog_size(n);
        spec.validate()?;
        if let Some(k) = spec.sample_count() {
            self.sampler(k).validate(n)?;
        }
        Ok(())
    }

    fn sampler(&self, k: usize) -> SamplerConfig {
        SamplerConfig {
            negatives: k,
            include_target: self.include_target,
            replacement: self.replacement,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<MetricReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: MetricReport,
    pub best_params: ScorerParams,
}

impl RunRecord {
    /// `(epoch, validation NDCG@10)` for evaluated epochs.
    pub fn validation_series(&self) -> Vec<(usize, f64)> {
        self.epochs
            .iter()
            .filter_map(|e| e.validation.as_ref().map(|v| (e.epoch, v.ndcg_at(SELECTION_CUTOFF))))
            .collect()
    }

    pub fn best_validation_ndcg(&self) -> f64 {
        self.validation_series().iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `epoch,train_loss,ndcg@10,hr@10,mrr@10`; metric fields are empty for
    /// epochs without validation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,ndcg@10,hr@10,mrr@10\n");
        for e in &self.epochs {
            let _ = write!(out, "{},{}", e.epoch, e.train_loss);
            match e.validation.as_ref().and_then(|v| v.at(SELECTION_CUTOFF)) {
                Some(m) => {
                    let _ = writeln!(out, ",{},{},{}", m.ndcg, m.hr, m.mrr);
                }
                None => out.push_str(",,,\n"),
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct EpochOut {
            epoch: usize,
            train_loss: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            validation: Option<Vec<MetricRecord>>,
        }
        #[derive(Serialize)]
        struct RunOut<'a> {
            config: &'a TrainConfig,
            epochs: Vec<EpochOut>,
            best_epoch: usize,
            convergence_epoch: usize,
            test: Vec<MetricRecord>,
        }
        let out = RunOut {
            config: &self.config,
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochOut {
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    validation: e.validation.as_ref().map(|v| v.records()),
                })
                .collect(),
            best_epoch: self.best_epoch,
            convergence_epoch: convergence_epoch(self, 0.99)?,
            test: self.test.records(),
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }
}

/// First evaluated epoch whose validation NDCG@10 reaches `fraction` of the
/// run maximum.
pub fn convergence_epoch(record: &RunRecord, fraction: f64) -> Result<usize> {
    convergence_epoch_of(&record.validation_series(), fraction)
}

pub fn convergence_epoch_of(series: &[(usize, f64)], fraction: f64) -> Result<usize> {
    if series.is_empty() {
        return Err(Error::Precondition("run has no validation results".into()));
    }
    let max = series.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let threshold = fraction * max;
    Ok(series.iter().find(|&&(_, v)| v >= threshold).map(|&(e, _)| e).expect("maximum reaches threshold"))
}

/// One training example: `prefixes[user][..end]` predicts `prefixes[user][end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Example {
    user: usize,
    end: usize,
}

/// Owns the parameters and optimizer state of one run.
pub struct Trainer<'a> {
    config: TrainConfig,
    spec: LossSpec,
    dataset: &'a SequenceDataset,
    prefixes: Vec<&'a [usize]>,
    examples: Vec<Example>,
    params: ScorerParams,
    adam: AdamState,
    grad: SparseGrad,
    sample_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a SequenceDataset) -> Result<Self> {
        config.validate(dataset)?;
        let n = dataset.item_count();
        let spec = config.loss.with_catalog_size(n);
        let params =
            init_params(n, config.dim, config.seed)?.with_decay(config.decay)?.with_max_history(config.max_history)?;
        let prefixes: Vec<&[usize]> = dataset.splits().map(|s| s.train).collect();
        let mut examples = Vec::new();
        for (user, p) in prefixes.iter().enumerate() {
            let first = if config.sliding_window { 1 } else { p.len().saturating_sub(config.max_history).max(1) };
            examples.extend((first..p.len()).map(|end| Example { user, end }));
        }
        if examples.is_empty() {
            return Err(Error::Data("no training examples: every training prefix has length 1".into()));
        }
        let adam = AdamState::new(&params, config.lr)?;
        let grad = SparseGrad::for_params(&params);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
        sample_rng.set_stream(1);
        Ok(Self { config, spec, dataset, prefixes, examples, params, adam, grad, sample_rng })
    }

    pub fn params(&self) -> &ScorerParams {
        &self.params
    }

    pub fn example_count(&self) -> usize {
        self.examples.len()
    }

    /// Loss and per-score gradients of one example, with the scored items.
    fn example(&mut self, ex: Example) -> Result<(f64, HistoryState, Vec<usize>, Vec<f64>)> {
        let prefix = self.prefixes[ex.user];
        let history = &prefix[..ex.end];
        let target = prefix[ex.end];
        let state = pool_history(history, &self.params)?;
        let n = self.params.item_count;
        if self.spec.kind.is_full() {
            let scores = score_all(&state, &self.params);
            let (loss, g) = loss_and_gradient(&self.spec, &LossInstance::Full { target_index: target, scores })?;
            return Ok((loss, state, (0..n).collect(), g));
        }
        let k = self.spec.sample_count().expect("sampled kind");
        let negs = sample_uniform_negatives(&self.config.sampler(k), n, target, &mut self.sample_rng)?;
        let score = |v: usize| dot(&state.query, self.params.embedding(v)) + self.params.bias[v];
        let sp = score(target);
        let neg_scores: Vec<f64> = negs.iter().map(|&v| score(v)).collect();
        let mut items = vec![target];
        let instance = if self.spec.kind == LossKind::Is {
            // Sample set = {target} ∪ negatives under a uniform proposal.
            let lq = -(n as f64).ln();
            items.push(target);
            let mut sample_scores = vec![sp];
            sample_scores.extend_from_slice(&neg_scores);
            LossInstance::Weighted {
                target_score: sp,
                target_proposal_logprob: lq,
                sample_proposal_logprobs: vec![lq; sample_scores.len()],
                sample_scores,
            }
        } else {
            LossInstance::Sampled { target_score: sp, negative_scores: neg_scores }
        };
        items.extend_from_slice(&negs);
        let (loss, g) = loss_and_gradient(&self.spec, &instance)?;
        Ok((loss, state, items, g))
    }

    /// One optimizer step on a batch of examples; returns the summed loss.
    fn step(&mut self, batch: &[Example], epoch: usize) -> Result<f64> {
        self.grad.clear();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for &ex in batch {
            let (loss, state, items, g) = self.example(ex)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, msg: format!("loss is {loss}") });
            }
            total += loss;
            accumulate_gradients(&state, &items, &g, &self.params, &mut self.grad, scale)?;
        }
        adam_step(&mut self.params, &self.grad, &mut self.adam).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { epoch, msg: format!("non-finite {what}") },
            other => other,
        })?;
        Ok(total)
    }

    /// Runs one epoch over shuffled examples and returns the mean loss.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut order = self.examples.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        shuffle_rng.set_stream(2 + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            total += self.step(batch, epoch)?;
        }
        Ok(total / order.len() as f64)
    }

    /// Per-batch losses of the next `steps` batches in dataset order, without
    /// shuffling. Used to compare loss kinds step by step.
    pub fn batch_losses(&mut self, steps: usize) -> Result<Vec<f64>> {
        let examples = self.examples.clone();
        examples
            .chunks(self.config.batch_size)
            .take(steps)
            .map(|b| self.step(b, 1).map(|t| t / b.len() as f64))
            .collect()
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricReport> {
        evaluate(&self.params, self.dataset, split, &self.config)
    }
}

fn evaluate(params: &ScorerParams, ds: &SequenceDataset, split: Split, cfg: &TrainConfig) -> Result<MetricReport> {
    if cfg.threads > 1 {
        evaluate_scorer_parallel(params, ds, split, &cfg.cutoffs)
    } else {
        evaluate_scorer(params, ds, split, &cfg.cutoffs)
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains for `config.epochs` epochs and reports test metrics at the epoch
/// of best validation NDCG@10.
pub fn train(config: &TrainConfig, dataset: &SequenceDataset) -> Result<RunRecord> {
    with_pool(config.threads, || train_inner(config, dataset))?
}

fn train_inner(config: &TrainConfig, dataset: &SequenceDataset) -> Result<RunRecord> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ScorerParams)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let train_loss = trainer.run_epoch(epoch)?;
        let validation = if epoch % config.eval_every == 0 || epoch == config.epochs {
            let report = trainer.evaluate(Split::Validation)?;
            let v = report.ndcg_at(SELECTION_CUTOFF);
            if best.as_ref().is_none_or(|(_, b, _)| v > *b) {
                best = Some((epoch, v, trainer.params().clone()));
            }
            Some(report)
        } else {
            None
        };
        epochs.push(EpochRecord { epoch, train_loss, validation, seconds: start.elapsed().as_secs_f64() });
    }
    let (best_epoch, _, best_params) = best.expect("last epoch is always evaluated");
    let test = evaluate(&best_params, dataset, Split::Test, config)?;
    Ok(RunRecord { config: config.clone(), epochs, best_epoch, test, best_params })
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: LossSpec,
    pub convergence_epoch: usize,
    /// False when the 0.99 crossing happens only at the last evaluated epoch.
    pub converged: bool,
    pub best_validation_ndcg: f64,
    pub best_epoch: usize,
    pub test: CutoffMetrics,
}

impl SweepRow {
    fn from_run(run: &RunRecord) -> Result<Self> {
        let conv = convergence_epoch(run, 0.99)?;
        let last = run.validation_series().last().map(|&(e, _)| e).unwrap_or(0);
        Ok(Self {
            loss: run.config.loss,
            convergence_epoch: conv,
            converged: conv < last,
            best_validation_ndcg: run.best_validation_ndcg(),
            best_epoch: run.best_epoch,
            test: run.test.at(SELECTION_CUTOFF).copied().unwrap_or_default(),
        })
    }

    fn parameter(&self) -> String {
        match self.loss.kind {
            LossKind::CeTopN { n } => n.to_string(),
            LossKind::CeEta { eta } => eta.to_string(),
            LossKind::Nce { c } => c.to_string(),
            LossKind::Sce { alpha } => alpha.to_string(),
            _ => String::new(),
        }
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "loss,param,K,convergence_epoch,converged,best_val_ndcg@10,best_epoch,test_ndcg@10,test_hr@10,test_mrr@10\n",
    );
    for r in rows {
        let k = r.loss.sample_count().map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.loss.kind.name(),
            r.parameter(),
            k,
            r.convergence_epoch,
            r.converged,
            r.best_validation_ndcg,
            r.best_epoch,
            r.test.ndcg,
            r.test.hr,
            r.test.mrr
        );
    }
    out
}

/// Trains every loss in `losses` and appends a CE reference row. Runs are
/// independent; with `threads > 1` they run concurrently.
pub fn run_sweep(base: &TrainConfig, losses: &[LossSpec], dataset: &SequenceDataset) -> Result<Vec<SweepRow>> {
    let mut all: Vec<LossSpec> = losses.to_vec();
    all.push(LossSpec::new(LossKind::Ce));
    let run = |spec: &LossSpec| -> Result<SweepRow> {
        let cfg = TrainConfig { threads: 1, ..base.clone().with_loss(*spec) };
        SweepRow::from_run(&train_inner(&cfg, dataset)?)
    };
    with_pool(base.threads, || {
        if base.threads > 1 {
            all.par_iter().map(run).collect()
        } else {
            all.iter().map(run).collect()
        }
    })?
}

pub fn run_eta_sweep(base: &TrainConfig, etas: &[f64], dataset: &SequenceDataset) -> Result<Vec<SweepRow>> {
    let specs: Vec<LossSpec> = etas.iter().map(|&eta| LossSpec::new(LossKind::CeEta { eta })).collect();
    run_sweep(base, &specs, dataset)
}

/// NCE with each `c`; `K` comes from `base.loss`.
pub fn run_c_sweep(base: &TrainConfig, cs: &[f64], dataset: &SequenceDataset) -> Result<Vec<SweepRow>> {
    let k = base.loss.negatives.ok_or_else(|| Error::InvalidArgument("c sweep requires K in the base loss".into()))?;
    let specs: Vec<LossSpec> = cs.iter().map(|&c| LossSpec::new(LossKind::Nce { c }).with_negatives(k)).collect();
    run_sweep(base, &specs, dataset)
}

/// SCE over the `alphas × ks` grid, `alpha` varying slowest.
pub fn run_alpha_k_grid(
    base: &TrainConfig,
    alphas: &[f64],
    ks: &[usize],
    dataset: &SequenceDataset,
) -> Result<Vec<SweepRow>> {
    let specs: Vec<LossSpec> = alphas
        .iter()
        .flat_map(|&alpha| ks.iter().map(move |&k| LossSpec::new(LossKind::Sce { alpha }).with_negatives(k)))
        .collect();
    run_sweep(base, &specs, dataset)
}
