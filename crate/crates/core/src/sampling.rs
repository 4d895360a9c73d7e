//! Negative samplers: uniform over the catalog and the target-skewed
//! categorical proposal under which importance sampling reproduces SCE.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fraction of the catalog above which `K` triggers a warning.
pub const LARGE_K_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub negatives: usize,
    pub include_target: bool,
    pub replacement: bool,
    pub seed: u64,
}

impl SamplerConfig {
    /// Training default: replacement on, target excluded.
    pub fn training(negatives: usize, seed: u64) -> Self {
        Self { negatives, include_target: false, replacement: true, seed }
    }

    /// Bound-verification default: replacement on, target includable.
    pub fn verification(negatives: usize, seed: u64) -> Self {
        Self { negatives, include_target: true, replacement: true, seed }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn pool_size(&self, catalog_size: usize) -> usize {
        if self.include_target {
            catalog_size
        } else {
            catalog_size.saturating_sub(1)
        }
    }

    pub fn validate(&self, catalog_size: usize) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        let pool = self.pool_size(catalog_size);
        if pool == 0 {
            return Err(Error::InvalidArgument(format!("no candidate items in a catalog of size {catalog_size}")));
        }
        if !self.replacement && self.negatives > pool {
            return Err(Error::InvalidArgument(format!(
                "K = {} exceeds the {pool} candidates available without replacement",
                self.negatives
            )));
        }
        Ok(())
    }

    /// Warning text when `K` exceeds 5% of the catalog.
    pub fn size_warning(&self, catalog_size: usize) -> Option<String> {
        (self.negatives as f64 > LARGE_K_FRACTION * catalog_size as f64)
            .then(|| format!("K = {} is more than 5% of the {catalog_size} items", self.negatives))
    }
}

/// Draws `K` item indices uniformly from the catalog, or from the catalog
/// minus `target` when `include_target` is off.
pub fn sample_uniform_negatives<R: Rng + ?Sized>(
    config: &SamplerConfig,
    catalog_size: usize,
    target: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if target >= catalog_size {
        return Err(Error::IndexOutOfRange { index: target, size: catalog_size });
    }
    config.validate(catalog_size)?;
    let pool = config.pool_size(catalog_size);
    let lift = |i: usize| if !config.include_target && i >= target { i + 1 } else { i };
    let out = if config.replacement {
        (0..config.negatives).map(|_| lift(rng.random_range(0..pool))).collect()
    } else {
        index::sample(rng, pool, config.negatives).into_iter().map(lift).collect()
    };
    Ok(out)
}

/// `Q(v_+) = α / (|I| - 1 + α)`, `Q(v) = 1 / (|I| - 1 + α)` otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalDistribution {
    pub target_index: usize,
    pub target_mass: f64,
    pub other_mass: f64,
    pub catalog_size: usize,
}

impl ProposalDistribution {
    /// Arbitrary target/other split; masses must be nonnegative and sum to 1.
    pub fn new(target_index: usize, target_mass: f64, catalog_size: usize) -> Result<Self> {
        if target_index >= catalog_size {
            return Err(Error::IndexOutOfRange { index: target_index, size: catalog_size });
        }
        if !(0.0..=1.0).contains(&target_mass) {
            return Err(Error::InvalidArgument(format!("target mass {target_mass} outside [0, 1]")));
        }
        let other_mass = if catalog_size > 1 { (1.0 - target_mass) / (catalog_size - 1) as f64 } else { 0.0 };
        Ok(Self { target_index, target_mass, other_mass, catalog_size })
    }

    pub fn mass(&self, v: usize) -> f64 {
        if v == self.target_index {
            self.target_mass
        } else {
            self.other_mass
        }
    }

    pub fn log_mass(&self, v: usize) -> f64 {
        self.mass(v).ln()
    }

    pub fn total_mass(&self) -> f64 {
        self.target_mass + (self.catalog_size - 1) as f64 * self.other_mass
    }
}

pub fn build_sce_proposal(alpha: f64, catalog_size: usize, target: usize) -> Result<ProposalDistribution> {
    if !(alpha >= 1.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be finite and >= 1 (got {alpha})")));
    }
    if target >= catalog_size {
        return Err(Error::IndexOutOfRange { index: target, size: catalog_size });
    }
    let denom = (catalog_size - 1) as f64 + alpha;
    Ok(ProposalDistribution { target_index: target, target_mass: alpha / denom, other_mass: 1.0 / denom, catalog_size })
}

/// Indices drawn i.i.d. from the proposal, with `ln Q` of each draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSample {
    pub items: Vec<usize>,
    pub log_probs: Vec<f64>,
}

pub fn sample_from_proposal<R: Rng + ?Sized>(
    dist: &ProposalDistribution,
    k: usize,
    rng: &mut R,
) -> Result<ProposalSample> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let n = dist.catalog_size;
    let (ln_target, ln_other) = (dist.target_mass.ln(), dist.other_mass.ln());
    let mut items = Vec::with_capacity(k);
    let mut log_probs = Vec::with_capacity(k);
    for _ in 0..k {
        let v = if n == 1 || rng.random::<f64>() < dist.target_mass {
            dist.target_index
        } else {
            let i = rng.random_range(0..n - 1);
            if i >= dist.target_index {
                i + 1
            } else {
                i
            }
        };
        items.push(v);
        log_probs.push(if v == dist.target_index { ln_target } else { ln_other });
    }
    Ok(ProposalSample { items, log_probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Upper 1% point of chi-square with 9999 degrees of freedom.
    const CHI2_9999_P01: f64 = 10330.92;

    #[test]
    fn single_candidate() {
        let cfg = SamplerConfig::training(50, 3);
        let draws = sample_uniform_negatives(&cfg, 2, 0, &mut cfg.rng()).unwrap();
        assert_eq!(draws, vec![1; 50]);
        let no_rep = SamplerConfig { replacement: false, ..SamplerConfig::training(1, 3) };
        assert_eq!(sample_uniform_negatives(&no_rep, 2, 1, &mut no_rep.rng()).unwrap(), vec![0]);
    }

    #[test]
    fn uniform_chi_square() {
        let n = 10_000;
        let draws = 100_000;
        let cfg = SamplerConfig::verification(draws, 11);
        let samples = sample_uniform_negatives(&cfg, n, 17, &mut cfg.rng()).unwrap();
        let mut counts = vec![0u64; n];
        for v in samples {
            counts[v] += 1;
        }
        let expected = draws as f64 / n as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(stat < CHI2_9999_P01, "chi-square {stat}");
    }

    #[test]
    fn excluded_target_never_drawn() {
        let cfg = SamplerConfig::training(5000, 9);
        let draws = sample_uniform_negatives(&cfg, 7, 3, &mut cfg.rng()).unwrap();
        assert!(draws.iter().all(|&v| v != 3 && v < 7));
        for v in [0, 1, 2, 4, 5, 6] {
            assert!(draws.contains(&v));
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let cfg = SamplerConfig::training(64, 42);
        let a = sample_uniform_negatives(&cfg, 1000, 5, &mut cfg.rng()).unwrap();
        let b = sample_uniform_negatives(&cfg, 1000, 5, &mut cfg.rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn without_replacement() {
        let cfg = SamplerConfig { replacement: false, ..SamplerConfig::training(9, 1) };
        let mut draws = sample_uniform_negatives(&cfg, 10, 4, &mut cfg.rng()).unwrap();
        draws.sort_unstable();
        assert_eq!(draws, vec![0, 1, 2, 3, 5, 6, 7, 8, 9]);
        let too_many = SamplerConfig { replacement: false, ..SamplerConfig::training(10, 1) };
        assert!(sample_uniform_negatives(&too_many, 10, 4, &mut too_many.rng()).is_err());
        let with_target = SamplerConfig { include_target: true, ..too_many };
        assert_eq!(sample_uniform_negatives(&with_target, 10, 4, &mut with_target.rng()).unwrap().len(), 10);
    }

    #[test]
    fn invalid_configs() {
        let zero = SamplerConfig::training(0, 1);
        assert!(sample_uniform_negatives(&zero, 10, 0, &mut zero.rng()).is_err());
        let cfg = SamplerConfig::training(1, 1);
        assert!(sample_uniform_negatives(&cfg, 1, 0, &mut cfg.rng()).is_err());
        assert!(sample_uniform_negatives(&cfg, 10, 10, &mut cfg.rng()).is_err());
    }

    #[test]
    fn size_warning_threshold() {
        assert!(SamplerConfig::training(25, 0).size_warning(500).is_none());
        assert!(SamplerConfig::training(26, 0).size_warning(500).is_some());
    }

    #[test]
    fn proposal_masses() {
        let uniform = build_sce_proposal(1.0, 8, 2).unwrap();
        assert_eq!(uniform.target_mass, 1.0 / 8.0);
        assert_eq!(uniform.other_mass, 1.0 / 8.0);
        let p = build_sce_proposal(3.0, 5, 0).unwrap();
        assert!((p.target_mass - 3.0 / 7.0).abs() < 1e-15);
        assert!((p.other_mass - 1.0 / 7.0).abs() < 1e-15);
        assert!(build_sce_proposal(0.9, 5, 0).is_err());
        assert!(build_sce_proposal(2.0, 5, 5).is_err());
    }

    #[test]
    fn proposal_degenerate_target() {
        let dist = ProposalDistribution::new(4, 1.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_from_proposal(&dist, 1000, &mut rng).unwrap();
        assert!(s.items.iter().all(|&v| v == 4));
        assert!(s.log_probs.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn proposal_target_frequency() {
        let dist = build_sce_proposal(3.0, 5, 1).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_from_proposal(&dist, n, &mut rng).unwrap();
        let hits = s.items.iter().filter(|&&v| v == 1).count() as f64;
        let p = 3.0 / 7.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - n as f64 * p).abs() <= 3.0 * sigma, "hits {hits}");
        for (v, l) in s.items.iter().zip(&s.log_probs) {
            assert_eq!(*l, dist.mass(*v).ln());
        }
    }

    proptest! {
        #[test]
        fn proposal_mass_sums_to_one(alpha in 1.0f64..1e4, n in 1usize..100_000, t in 0usize..1000) {
            let target = t % n;
            let dist = build_sce_proposal(alpha, n, target).unwrap();
            prop_assert!((dist.total_mass() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn streams_are_seed_pure(seed in any::<u64>(), k in 1usize..50) {
            let cfg = SamplerConfig::verification(k, seed);
            let a = sample_uniform_negatives(&cfg, 97, 3, &mut cfg.rng()).unwrap();
            let b = sample_uniform_negatives(&cfg, 97, 3, &mut cfg.rng()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
