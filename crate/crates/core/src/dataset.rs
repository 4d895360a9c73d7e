//! Interaction logs, k-core filtering, leave-one-out splitting and the synthetic
//! Markov-chain benchmark.
//!
//! Dense item indices are assigned in order of first appearance in the
//! (retained part of the) input log. Users are kept in a `BTreeMap`, so every
//! per-user traversal runs in ascending user-id order.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_K_CORE: usize = 5;
pub const DEFAULT_MIN_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: u64,
}

/// Bijection between raw item ids and dense indices `0..item_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    raw_ids: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl Catalog {
    /// Catalog whose raw ids equal the dense indices.
    pub fn identity(item_count: usize) -> Self {
        Self::from_raw_ids((0..item_count as u64).collect()).expect("identity ids are unique")
    }

    pub fn from_raw_ids(raw_ids: Vec<u64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(raw_ids.len());
        for (i, &raw) in raw_ids.iter().enumerate() {
            if index.insert(raw, i).is_some() {
                return Err(Error::Data(format!("duplicate raw item id {raw} in catalog")));
            }
        }
        Ok(Self { raw_ids, index })
    }

    pub fn item_count(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn index_of(&self, raw: u64) -> Option<usize> {
        self.index.get(&raw).copied()
    }

    pub fn raw_id(&self, index: usize) -> Option<u64> {
        self.raw_ids.get(index).copied()
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw_ids
    }

    fn is_identity(&self) -> bool {
        self.raw_ids.iter().enumerate().all(|(i, &r)| r == i as u64)
    }
}

/// The three roles of a user's sequence under leave-one-out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserSplit<'a> {
    pub user_id: u64,
    pub train: &'a [usize],
    pub val_target: usize,
    pub test_target: usize,
}

/// Per-user chronologically ordered item sequences (dense indices).
///
/// Every sequence has length >= 3: the last item is the test target, the
/// penultimate the validation target and the rest the training prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    catalog: Catalog,
    sequences: BTreeMap<u64, Vec<usize>>,
}

impl SequenceDataset {
    pub fn new(catalog: Catalog, sequences: BTreeMap<u64, Vec<usize>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("dataset has no users".into()));
        }
        let n = catalog.item_count();
        if n == 0 {
            return Err(Error::Data("dataset has an empty catalog".into()));
        }
        for (user, seq) in &sequences {
            if seq.len() < 3 {
                return Err(Error::Data(format!(
                    "user {user} has {} interactions; at least 3 are required",
                    seq.len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&v| v >= n) {
                return Err(Error::IndexOutOfRange { index: bad, size: n });
            }
        }
        Ok(Self { catalog, sequences })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn item_count(&self) -> usize {
        self.catalog.item_count()
    }

    pub fn user_count(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequences(&self) -> &BTreeMap<u64, Vec<usize>> {
        &self.sequences
    }

    /// Leave-one-out splits in ascending user-id order.
    pub fn splits(&self) -> impl Iterator<Item = UserSplit<'_>> + '_ {
        self.sequences.iter().map(|(&user_id, seq)| {
            let t = seq.len();
            UserSplit { user_id, train: &seq[..t - 2], val_target: seq[t - 2], test_target: seq[t - 1] }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            item_count: self.item_count(),
            sequences: self.sequences.clone(),
            val_targets: self.splits().map(|s| (s.user_id, s.val_target)).collect(),
            test_targets: self.splits().map(|s| (s.user_id, s.test_target)).collect(),
            item_ids: (!self.catalog.is_identity()).then(|| self.catalog.raw_ids.clone()),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let catalog = match file.item_ids {
            Some(ids) => {
                if ids.len() != file.item_count {
                    return Err(Error::Data(format!(
                        "item_ids has {} entries but item_count is {}",
                        ids.len(),
                        file.item_count
                    )));
                }
                Catalog::from_raw_ids(ids)?
            }
            None => Catalog::identity(file.item_count),
        };
        let ds = Self::new(catalog, file.sequences)?;
        for split in ds.splits() {
            let val = file.val_targets.get(&split.user_id).copied();
            let test = file.test_targets.get(&split.user_id).copied();
            if val != Some(split.val_target) || test != Some(split.test_target) {
                return Err(Error::Data(format!("targets for user {} disagree with the sequence tail", split.user_id)));
            }
        }
        if file.val_targets.len() != ds.user_count() || file.test_targets.len() != ds.user_count() {
            return Err(Error::Data("target maps reference unknown users".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    item_count: usize,
    sequences: BTreeMap<u64, Vec<usize>>,
    val_targets: BTreeMap<u64, usize>,
    test_targets: BTreeMap<u64, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    item_ids: Option<Vec<u64>>,
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    parse_interactions(File::open(path)?)
}

/// Parses `user<TAB>item<TAB>timestamp` lines. Line numbers in errors are 1-based.
pub fn parse_interactions(reader: impl Read) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::DataLine {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str, name: &str| {
            s.trim().parse::<u64>().map_err(|e| Error::DataLine { line: lineno, msg: format!("bad {name} {s:?}: {e}") })
        };
        out.push(Interaction {
            user_id: parse(fields[0], "user_id")?,
            item_id: parse(fields[1], "item_id")?,
            timestamp: parse(fields[2], "timestamp")?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("interaction file is empty".into()));
    }
    Ok(out)
}

/// Writes interactions in the TSV layout read by [`parse_interactions`].
pub fn write_interactions(mut w: impl std::io::Write, log: &[Interaction]) -> Result<()> {
    for it in log {
        writeln!(w, "{}\t{}\t{}", it.user_id, it.item_id, it.timestamp)?;
    }
    Ok(())
}

/// Repeatedly drops users and items with fewer than `k` interactions until no
/// row is removed. Row order is preserved.
pub fn k_core_filter(log: &[Interaction], k: usize) -> Result<Vec<Interaction>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut rows = log.to_vec();
    loop {
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for r in &rows {
            *users.entry(r.user_id).or_default() += 1;
            *items.entry(r.item_id).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|r| users[&r.user_id] >= k && items[&r.item_id] >= k);
        if rows.len() == before {
            break;
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("empty after k-core".into()));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub dataset: SequenceDataset,
    /// Users dropped for having fewer than `min_len` interactions.
    pub dropped_users: usize,
}

/// Sorts each user's interactions by timestamp (stable, so ties keep input
/// order) and builds the leave-one-out dataset.
pub fn leave_one_out_split(log: &[Interaction], min_len: usize) -> Result<SplitOutcome> {
    if min_len < 3 {
        return Err(Error::InvalidArgument(format!("min_len must be at least 3 (got {min_len})")));
    }
    let mut per_user: BTreeMap<u64, Vec<(u64, usize)>> = BTreeMap::new();
    for (row, it) in log.iter().enumerate() {
        per_user.entry(it.user_id).or_default().push((it.timestamp, row));
    }
    let total = per_user.len();
    per_user.retain(|_, rows| rows.len() >= min_len);
    let dropped_users = total - per_user.len();
    if per_user.is_empty() {
        return Err(Error::Data(format!("no user has at least {min_len} interactions")));
    }

    // First appearance in input order, restricted to retained users.
    let mut raw_ids = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    for it in log {
        if per_user.contains_key(&it.user_id) && !index.contains_key(&it.item_id) {
            index.insert(it.item_id, raw_ids.len());
            raw_ids.push(it.item_id);
        }
    }
    let catalog = Catalog::from_raw_ids(raw_ids)?;

    let sequences = per_user
        .into_iter()
        .map(|(user, mut rows)| {
            rows.sort_by_key(|&(ts, _)| ts);
            let seq = rows.iter().map(|&(_, row)| index[&log[row].item_id]).collect();
            (user, seq)
        })
        .collect();

    Ok(SplitOutcome { dataset: SequenceDataset::new(catalog, sequences)?, dropped_users })
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub self_consistency: f64,
    pub seed: u64,
}

/// Sequences from a first-order Markov chain over a hidden random cycle.
///
/// Each step follows the cycle successor with probability `self_consistency`
/// and otherwise jumps to a uniformly random item.
pub fn generate_markov_dataset(cfg: &MarkovConfig) -> Result<SequenceDataset> {
    if cfg.n_items < 10 {
        return Err(Error::InvalidArgument(format!("n_items must be at least 10 (got {})", cfg.n_items)));
    }
    if !(0.0..=1.0).contains(&cfg.self_consistency) {
        return Err(Error::InvalidArgument(format!(
            "self_consistency must lie in [0, 1] (got {})",
            cfg.self_consistency
        )));
    }
    if cfg.n_users == 0 {
        return Err(Error::InvalidArgument("n_users must be positive".into()));
    }
    if cfg.min_len < 3 || cfg.min_len > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length range must satisfy 3 <= min <= max (got {}..={})",
            cfg.min_len, cfg.max_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let successor = hidden_cycle(cfg.n_items, &mut rng);
    let mut sequences = BTreeMap::new();
    for user in 0..cfg.n_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut seq = Vec::with_capacity(len);
        seq.push(rng.random_range(0..cfg.n_items));
        while seq.len() < len {
            let last = *seq.last().unwrap();
            let next = if rng.random::<f64>() < cfg.self_consistency {
                successor[last]
            } else {
                rng.random_range(0..cfg.n_items)
            };
            seq.push(next);
        }
        sequences.insert(user as u64, seq);
    }
    SequenceDataset::new(Catalog::identity(cfg.n_items), sequences)
}

/// Successor map of a uniformly random single cycle through all items.
pub fn hidden_cycle(n_items: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(rng);
    let mut successor = vec![0; n_items];
    for i in 0..n_items {
        successor[order[i]] = order[(i + 1) % n_items];
    }
    successor
}

/// Successor map used by [`generate_markov_dataset`] for a given seed.
pub fn markov_successors(cfg: &MarkovConfig) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    hidden_cycle(cfg.n_items, &mut rng)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_log() -> impl Strategy<Value = Vec<Interaction>> {
        prop::collection::vec((0u64..8, 0u64..12, 0u64..50), 1..120).prop_map(|rows| {
            rows.into_iter().map(|(u, i, t)| Interaction { user_id: u, item_id: i, timestamp: t }).collect()
        })
    }

    proptest! {
        #[test]
        fn k_core_is_idempotent(log in arb_log(), k in 1usize..5) {
            if let Ok(once) = k_core_filter(&log, k) {
                prop_assert_eq!(k_core_filter(&once, k).unwrap(), once);
            }
        }

        #[test]
        fn split_preserves_each_users_multiset(log in arb_log()) {
            if let Ok(out) = leave_one_out_split(&log, 3) {
                let ds = &out.dataset;
                for split in ds.splits() {
                    let mut rebuilt: Vec<u64> = split.train.iter()
                        .chain([&split.val_target, &split.test_target])
                        .map(|&v| ds.catalog().raw_id(v).unwrap())
                        .collect();
                    let mut original: Vec<u64> = log.iter()
                        .filter(|r| r.user_id == split.user_id)
                        .map(|r| r.item_id)
                        .collect();
                    rebuilt.sort_unstable();
                    original.sort_unstable();
                    prop_assert_eq!(rebuilt, original);
                }
            }
        }
    }
}
