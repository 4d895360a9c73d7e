//! Command-line interface.
//!
//! Exit codes: `0` success, `1` usage or argument error, `2` data error,
//! `3` a verification verdict of "violated".

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bounds::{run_suite, LossFamily, ReferenceLosses, Suite, Verdict, VerificationRecord};
use crate::dataset::{
    generate_markov_dataset, k_core_filter, leave_one_out_split, load_interactions, MarkovConfig, SequenceDataset,
    DEFAULT_K_CORE, DEFAULT_MIN_LEN,
};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::metrics::{evaluate_scorer, evaluate_scorer_parallel, Split};
use crate::sampling::SamplerConfig;
use crate::scorer::ScorerParams;
use crate::trainer::{run_alpha_k_grid, run_c_sweep, run_eta_sweep, sweep_csv, train, SweepRow, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VIOLATED: i32 = 3;

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "RANKLOSS_SEED";

#[derive(Debug, Parser)]
#[command(name = "rankloss", version, about = "Ranking losses: training, evaluation and bound verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset or ingest a TSV interaction log.
    GenData(GenDataArgs),
    /// Train a scorer and write the per-epoch record.
    Train(TrainCmd),
    /// Evaluate a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Run the bound verification suites.
    VerifyBounds(VerifyArgs),
    /// Train one model per hyperparameter value.
    Sweep(SweepCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Ingest `user<TAB>item<TAB>timestamp` lines instead of generating.
    #[arg(long)]
    from_tsv: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K_CORE)]
    k_core: usize,
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0.8)]
    self_consistency: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Options shared by `train` and `sweep`; each overrides the config file.
#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CE, CE_TopN, CE_Eta, BCE, BPR, NCE, NEG, IS or SCE.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "K")]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_history: Option<usize>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    sliding_window: Option<bool>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<usize>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    include_target: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    replacement: Option<bool>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    common: TrainArgs,
    /// Also write the best-validation parameters here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    cutoffs: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// identities, lemmas, binomial, theorems or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Eta,
    C,
    AlphaK,
}

#[derive(Debug, Args)]
struct SweepCmd {
    #[arg(long, value_enum)]
    sweep: SweepKind,
    /// η, c or α values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// K values for the α × K grid.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[command(flatten)]
    common: TrainArgs,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_command(argv: &[String]) -> i32 {
    run_command_with(argv, &ReferenceLosses)
}

/// As [`run_command`], with the loss family used by `verify-bounds`.
pub fn run_command_with(argv: &[String], family: &dyn LossFamily) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, family) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_data_error() || matches!(e, Error::IndexOutOfRange { .. }) {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

fn dispatch(command: Command, family: &dyn LossFamily) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::VerifyBounds(a) => verify_cmd(a, family),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn resolve_seed(flag: Option<u64>, fallback: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = fallback {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::InvalidArgument(format!("{SEED_ENV} is not an integer: '{v}'"))),
        Err(_) => Ok(0),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let dataset = if let Some(path) = &a.from_tsv {
        let log = load_interactions(path)?;
        let filtered = k_core_filter(&log, a.k_core)?;
        let outcome = leave_one_out_split(&filtered, a.min_len.max(DEFAULT_MIN_LEN))?;
        if outcome.dropped_users > 0 {
            eprintln!("warning: dropped {} users with fewer than {} interactions", outcome.dropped_users, a.min_len);
        }
        outcome.dataset
    } else {
        generate_markov_dataset(&MarkovConfig {
            n_users: a.users,
            n_items: a.items,
            min_len: a.min_len,
            max_len: a.max_len,
            self_consistency: a.self_consistency,
            seed: resolve_seed(a.seed, None)?,
        })?
    };
    dataset.save(&a.out)?;
    Ok(EXIT_OK)
}

fn loss_from_flags(a: &TrainArgs, base: LossSpec) -> Result<LossSpec> {
    let need = |v: Option<f64>, flag: &str, kind: &str| {
        v.ok_or_else(|| Error::InvalidArgument(format!("--loss {kind} requires --{flag}")))
    };
    let mut spec = match a.loss.as_deref() {
        None => base,
        Some(name) => {
            let kind = match name.to_ascii_uppercase().as_str() {
                "CE" => LossKind::Ce,
                "CE_TOPN" => LossKind::CeTopN {
                    n: a.n.ok_or_else(|| Error::InvalidArgument("--loss CE_TopN requires --n".into()))?,
                },
                "CE_ETA" => LossKind::CeEta { eta: need(a.eta, "eta", name)? },
                "BCE" => LossKind::Bce,
                "BPR" => LossKind::Bpr,
                "NCE" => LossKind::Nce { c: need(a.c, "c", name)? },
                "NEG" => LossKind::Neg,
                "IS" => LossKind::Is,
                "SCE" => LossKind::Sce { alpha: need(a.alpha, "alpha", name)? },
                other => return Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
            };
            LossSpec { kind, negatives: base.negatives, catalog_size: None }
        }
    };
    if a.loss.is_none() {
        match &mut spec.kind {
            LossKind::CeTopN { n } => *n = a.n.unwrap_or(*n),
            LossKind::CeEta { eta } => *eta = a.eta.unwrap_or(*eta),
            LossKind::Nce { c } => *c = a.c.unwrap_or(*c),
            LossKind::Sce { alpha } => *alpha = a.alpha.unwrap_or(*alpha),
            _ => {}
        }
    }
    if a.negatives.is_some() {
        spec.negatives = a.negatives;
    }
    Ok(spec)
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    let file_seed = a.config.as_ref().map(|_| cfg.seed);
    cfg.loss = loss_from_flags(a, cfg.loss)?;
    macro_rules! take {
        ($($field:ident),*) => { $( if let Some(v) = a.$field.clone() { cfg.$field = v; } )* };
    }
    take!(
        epochs,
        lr,
        batch_size,
        max_history,
        decay,
        dim,
        sliding_window,
        eval_every,
        cutoffs,
        include_target,
        replacement,
        threads
    );
    cfg.seed = resolve_seed(a.seed, file_seed)?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<SequenceDataset> {
    SequenceDataset::load(path)
}

fn warn_large_k(cfg: &TrainConfig, ds: &SequenceDataset) {
    if let Some(k) = cfg.loss.sample_count() {
        let sampler = SamplerConfig {
            negatives: k,
            include_target: cfg.include_target,
            replacement: cfg.replacement,
            seed: cfg.seed,
        };
        if let Some(w) = sampler.size_warning(ds.item_count()) {
            eprintln!("warning: {w}");
        }
    }
}

fn train_cmd(a: TrainCmd) -> Result<i32> {
    let cfg = build_config(&a.common)?;
    let ds = load_dataset(&a.common.data)?;
    warn_large_k(&cfg, &ds);
    let run = train(&cfg, &ds)?;
    let text = match a.common.format {
        Format::Csv => run.to_csv(),
        Format::Json => run.to_json()?,
    };
    emit(a.common.out.as_deref(), &text)?;
    if let Some(path) = &a.checkpoint {
        run.best_params.save_checkpoint(path)?;
    }
    Ok(EXIT_OK)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let ds = load_dataset(&a.data)?;
    let params = ScorerParams::load_checkpoint(&a.checkpoint)?;
    if params.item_count != ds.item_count() {
        return Err(Error::Data(format!(
            "checkpoint has {} items but the dataset has {}",
            params.item_count,
            ds.item_count()
        )));
    }
    let split = match a.split {
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let report = if a.threads > 1 {
        evaluate_scorer_parallel(&params, &ds, split, &a.cutoffs)?
    } else {
        evaluate_scorer(&params, &ds, split, &a.cutoffs)?
    };
    let text = match a.format {
        Format::Json => report.to_json()? + "\n",
        Format::Csv => {
            let mut s = String::from("k,ndcg,hr,mrr,users\n");
            for r in report.records() {
                s.push_str(&format!("{},{},{},{},{}\n", r.k, r.ndcg, r.hr, r.mrr, r.users));
            }
            s
        }
    };
    emit(a.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn records_text(records: &[VerificationRecord], format: Format) -> Result<String> {
    let mut s = String::new();
    match format {
        Format::Json => {
            for r in records {
                s.push_str(&serde_json::to_string(r)?);
                s.push('\n');
            }
        }
        Format::Csv => {
            s.push_str("suite,name,checks,violations,worst,analytic,empirical,ci,verdict\n");
            for r in records {
                s.push_str(&format!(
                    "{},\"{}\",{},{},{},{},{},{},{}\n",
                    r.suite,
                    r.name,
                    r.checks,
                    r.violations,
                    opt(r.worst),
                    opt(r.analytic),
                    opt(r.empirical),
                    opt(r.ci),
                    r.verdict
                ));
            }
        }
    }
    Ok(s)
}

fn verify_cmd(a: VerifyArgs, family: &dyn LossFamily) -> Result<i32> {
    let suite: Suite = a.suite.parse()?;
    let seed = resolve_seed(a.seed, None)?;
    if a.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let records = pool.install(|| run_suite(family, suite, a.trials, seed))?;
    emit(a.out.as_deref(), &records_text(&records, a.format)?)?;
    let violated = records.iter().filter(|r| r.verdict == Verdict::Violated).count();
    if violated > 0 {
        eprintln!("{violated} verification record(s) violated");
        return Ok(EXIT_VIOLATED);
    }
    Ok(EXIT_OK)
}

fn sweep_cmd(a: SweepCmd) -> Result<i32> {
    let cfg = build_config(&a.common)?;
    let ds = load_dataset(&a.common.data)?;
    let rows: Vec<SweepRow> = match a.sweep {
        SweepKind::Eta => run_eta_sweep(&cfg, &a.values, &ds)?,
        SweepKind::C => run_c_sweep(&cfg, &a.values, &ds)?,
        SweepKind::AlphaK => {
            if a.ks.is_empty() {
                return Err(Error::InvalidArgument("--sweep alpha-k requires --ks".into()));
            }
            run_alpha_k_grid(&cfg, &a.values, &a.ks, &ds)?
        }
    };
    let text = match a.common.format {
        Format::Csv => sweep_csv(&rows),
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
    };
    emit(a.common.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("rankloss").chain(s.split_whitespace()).map(String::from).collect()
    }

    fn parse_train(s: &str) -> TrainArgs {
        match Cli::try_parse_from(argv(s)).unwrap().command {
            Command::Train(t) => t.common,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flags_build_loss() {
        let a = parse_train("train --data d.json --loss SCE --alpha 100 --K 100 --seed 7");
        let cfg = build_config(&a).unwrap();
        assert_eq!(cfg.loss, LossSpec::new(LossKind::Sce { alpha: 100.0 }).with_negatives(100));
        assert_eq!(cfg.seed, 7);
        let a = parse_train("train --data d.json --loss NCE");
        assert!(build_config(&a).is_err());
    }

    #[test]
    fn optional_bool_flags() {
        let a = parse_train("train --data d.json --replacement false --include-target");
        assert_eq!(a.replacement, Some(false));
        assert_eq!(a.include_target, Some(true));
        let cfg = build_config(&a).unwrap();
        assert!(!cfg.replacement && cfg.include_target);
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"loss":{"kind":"NCE","c":10,"K":25},"epochs":7,"seed":3,"lr":0.01}"#).unwrap();
        let a = parse_train(&format!("train --data d.json --config {} --epochs 9 --c 1", path.display()));
        let cfg = build_config(&a).unwrap();
        assert_eq!(cfg.loss, LossSpec::new(LossKind::Nce { c: 1.0 }).with_negatives(25));
        assert_eq!((cfg.epochs, cfg.seed, cfg.lr), (9, 3, 0.01));
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_command(&argv("train --loss SCE")), EXIT_USAGE);
        assert_eq!(run_command(&argv("bogus")), EXIT_USAGE);
        assert_eq!(run_command(&argv("verify-bounds --suite nope")), EXIT_USAGE);
        assert_eq!(run_command(&argv("train --data d.json --unknown-flag 1")), EXIT_USAGE);
    }

    #[test]
    fn missing_data_file_is_data_error() {
        assert_eq!(run_command(&argv("train --data /nonexistent/d.json --epochs 1")), EXIT_DATA);
    }
}
