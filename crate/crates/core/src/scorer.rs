//! Decayed-pooling sequential scorer.
//!
//! A history `v_1..v_t` (most recent last, truncated to the last `L` items) is
//! pooled into `h = sum_i w_i e_{v_i}` with `w_i ∝ decay^(t-i)`. The query is
//! `q = Wᵀ h` for a learned `d×d` transition matrix `W` (identity at
//! initialisation) and an item scores `s_v = q · e_v + b_v`.
//!
//! The item table is shared between history and candidates. Without `W` a
//! shared table cannot rank the successor of the last item above the item
//! itself (the Gram matrix is positive semi-definite), so `W` is what lets the
//! model express "next item" rather than "same item".

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{all_finite, dot};

pub const DEFAULT_DECAY: f64 = 0.8;
pub const DEFAULT_MAX_HISTORY: usize = 50;
pub const INIT_STD: f64 = 0.02;

/// Model parameters. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub item_count: usize,
    pub dim: usize,
    pub decay: f64,
    pub max_history: usize,
    /// `item_count × dim` item vectors.
    pub embeddings: Vec<f64>,
    pub bias: Vec<f64>,
    /// `dim × dim` query transition.
    pub transition: Vec<f64>,
}

impl ScorerParams {
    pub fn embedding(&self, v: usize) -> &[f64] {
        &self.embeddings[v * self.dim..(v + 1) * self.dim]
    }

    pub fn embedding_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.embeddings[v * self.dim..(v + 1) * self.dim]
    }

    pub fn with_decay(mut self, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay must lie in (0, 1], got {decay}")));
        }
        self.decay = decay;
        Ok(self)
    }

    pub fn with_max_history(mut self, max_history: usize) -> Result<Self> {
        if max_history == 0 {
            return Err(Error::InvalidArgument("max_history must be at least 1".into()));
        }
        self.max_history = max_history;
        Ok(self)
    }

    fn check_index(&self, v: usize) -> Result<()> {
        if v >= self.item_count {
            return Err(Error::IndexOutOfRange { index: v, size: self.item_count });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 || self.item_count == 0 {
            return Err(Error::Data("checkpoint has zero items or zero dimension".into()));
        }
        if self.embeddings.len() != self.item_count * d
            || self.bias.len() != self.item_count
            || self.transition.len() != d * d
        {
            return Err(Error::Data("checkpoint shapes disagree with its header".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.max_history == 0 {
            return Err(Error::Data("checkpoint hyperparameters out of range".into()));
        }
        if !all_finite(&self.embeddings) || !all_finite(&self.bias) || !all_finite(&self.transition) {
            return Err(Error::NonFinite("scorer parameters".into()));
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let params: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        params.validate()?;
        Ok(params)
    }
}

/// N(0, 0.02²) embeddings, zero bias, identity transition.
pub fn init_params(catalog_size: usize, dim: usize, seed: u64) -> Result<ScorerParams> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be at least 1".into()));
    }
    if catalog_size == 0 {
        return Err(Error::InvalidArgument("catalog must contain at least one item".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let embeddings = (0..catalog_size * dim).map(|_| normal.sample(&mut rng)).collect();
    let mut transition = vec![0.0; dim * dim];
    for k in 0..dim {
        transition[k * dim + k] = 1.0;
    }
    Ok(ScorerParams {
        item_count: catalog_size,
        dim,
        decay: DEFAULT_DECAY,
        max_history: DEFAULT_MAX_HISTORY,
        embeddings,
        bias: vec![0.0; catalog_size],
        transition,
    })
}

/// Pooled representation of one history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryState {
    /// History after truncation to the last `max_history` items.
    pub items: Vec<usize>,
    /// Pooling weights aligned with `items`; they sum to one.
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
    pub query: Vec<f64>,
}

/// `w_i = decay^(t-i) / sum_j decay^(t-j)`, most recent item last.
pub fn pool_weights(t: usize, decay: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..t).map(|i| decay.powi((t - 1 - i) as i32)).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

pub fn pool_history(history: &[usize], params: &ScorerParams) -> Result<HistoryState> {
    let start = history.len().saturating_sub(params.max_history);
    let items = history[start..].to_vec();
    if items.is_empty() {
        return Err(Error::Precondition("history must contain at least one item".into()));
    }
    for &v in &items {
        params.check_index(v)?;
    }
    let d = params.dim;
    let weights = pool_weights(items.len(), params.decay);
    let mut pooled = vec![0.0; d];
    for (&v, &w) in items.iter().zip(&weights) {
        for (p, e) in pooled.iter_mut().zip(params.embedding(v)) {
            *p += w * e;
        }
    }
    // q_k = sum_j h_j W[j][k]
    let mut query = vec![0.0; d];
    for (j, &h) in pooled.iter().enumerate() {
        let row = &params.transition[j * d..(j + 1) * d];
        for (q, w) in query.iter_mut().zip(row) {
            *q += h * w;
        }
    }
    Ok(HistoryState { items, weights, pooled, query })
}

#[inline]
fn score_unchecked(state: &HistoryState, v: usize, params: &ScorerParams) -> f64 {
    dot(&state.query, params.embedding(v)) + params.bias[v]
}

pub fn score_item(state: &HistoryState, v: usize, params: &ScorerParams) -> Result<f64> {
    params.check_index(v)?;
    Ok(score_unchecked(state, v, params))
}

/// Scores of every catalog item, in dense index order.
pub fn score_all(state: &HistoryState, params: &ScorerParams) -> Vec<f64> {
    (0..params.item_count).map(|v| score_unchecked(state, v, params)).collect()
}

/// Gradient buffer covering only the rows that received a contribution.
///
/// Dense storage is kept so buffers can be reused across batches; `clear`
/// only zeroes touched rows.
#[derive(Debug, Clone)]
pub struct SparseGrad {
    dim: usize,
    emb: Vec<f64>,
    bias: Vec<f64>,
    transition: Vec<f64>,
    touched: Vec<bool>,
    rows: Vec<usize>,
    transition_touched: bool,
}

impl SparseGrad {
    pub fn new(item_count: usize, dim: usize) -> Self {
        Self {
            dim,
            emb: vec![0.0; item_count * dim],
            bias: vec![0.0; item_count],
            transition: vec![0.0; dim * dim],
            touched: vec![false; item_count],
            rows: Vec::new(),
            transition_touched: false,
        }
    }

    pub fn for_params(params: &ScorerParams) -> Self {
        Self::new(params.item_count, params.dim)
    }

    pub fn clear(&mut self) {
        for &v in &self.rows {
            self.emb[v * self.dim..(v + 1) * self.dim].fill(0.0);
            self.bias[v] = 0.0;
            self.touched[v] = false;
        }
        self.rows.clear();
        if self.transition_touched {
            self.transition.fill(0.0);
            self.transition_touched = false;
        }
    }

    /// Touched rows in first-touch order.
    pub fn touched_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn is_touched(&self, v: usize) -> bool {
        self.touched[v]
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.emb[v * self.dim..(v + 1) * self.dim]
    }

    pub fn bias(&self, v: usize) -> f64 {
        self.bias[v]
    }

    pub fn transition(&self) -> Option<&[f64]> {
        self.transition_touched.then_some(&self.transition[..])
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|&v| self.row(v).iter().all(|&g| g == 0.0) && self.bias[v] == 0.0)
            && self.transition.iter().all(|&g| g == 0.0)
    }

    fn touch(&mut self, v: usize) {
        if !self.touched[v] {
            self.touched[v] = true;
            self.rows.push(v);
        }
    }

    fn add_row(&mut self, v: usize, scale: f64, values: &[f64]) {
        self.touch(v);
        for (g, x) in self.emb[v * self.dim..(v + 1) * self.dim].iter_mut().zip(values) {
            *g += scale * x;
        }
    }

    fn is_finite(&self) -> bool {
        self.rows.iter().all(|&v| all_finite(self.row(v)) && self.bias[v].is_finite()) && all_finite(&self.transition)
    }
}

/// Chain rule from per-score gradients to the parameters, added into `grad`
/// with weight `scale`.
///
/// `items[i]` received `score_grads[i] = ∂ℓ/∂s`. An item may appear several
/// times (and may also be in the history); contributions add up. Items whose
/// score gradient is exactly zero are not touched.
pub fn accumulate_gradients(
    state: &HistoryState,
    items: &[usize],
    score_grads: &[f64],
    params: &ScorerParams,
    grad: &mut SparseGrad,
    scale: f64,
) -> Result<()> {
    if items.len() != score_grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scored items but {} score gradients",
            items.len(),
            score_grads.len()
        )));
    }
    let d = params.dim;
    let mut dq = vec![0.0; d];
    let mut any = false;
    for (&v, &g) in items.iter().zip(score_grads) {
        params.check_index(v)?;
        if g == 0.0 {
            continue;
        }
        any = true;
        for (acc, e) in dq.iter_mut().zip(params.embedding(v)) {
            *acc += g * e;
        }
        grad.add_row(v, scale * g, &state.query);
        grad.bias[v] += scale * g;
    }
    if !any {
        return Ok(());
    }

    // ∂ℓ/∂W[j][k] = h_j dq_k ; ∂ℓ/∂h = W dq
    grad.transition_touched = true;
    let mut dh = vec![0.0; d];
    for j in 0..d {
        let row = &params.transition[j * d..(j + 1) * d];
        let gt = &mut grad.transition[j * d..(j + 1) * d];
        let hj = state.pooled[j];
        for k in 0..d {
            gt[k] += scale * hj * dq[k];
        }
        dh[j] = dot(row, &dq);
    }
    for (&v, &w) in state.items.iter().zip(&state.weights) {
        grad.add_row(v, scale * w, &dh);
    }
    Ok(())
}

/// Parameter gradient for one example: `loss_grads[0]` belongs to `target`,
/// the rest to `negatives` in order.
pub fn scorer_gradients(
    history: &[usize],
    target: usize,
    negatives: &[usize],
    loss_grads: &[f64],
    params: &ScorerParams,
) -> Result<SparseGrad> {
    let state = pool_history(history, params)?;
    let mut items = Vec::with_capacity(negatives.len() + 1);
    items.push(target);
    items.extend_from_slice(negatives);
    let mut grad = SparseGrad::for_params(params);
    accumulate_gradients(&state, &items, loss_grads, params, &mut grad, 1.0)?;
    Ok(grad)
}

/// Moments and hyperparameters for lazy (row-sparse) Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: ScorerMoments,
    pub second_moment: ScorerMoments,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// A parameter-shaped buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerMoments {
    pub embeddings: Vec<f64>,
    pub bias: Vec<f64>,
    pub transition: Vec<f64>,
}

impl ScorerMoments {
    fn zeros(params: &ScorerParams) -> Self {
        Self {
            embeddings: vec![0.0; params.embeddings.len()],
            bias: vec![0.0; params.bias.len()],
            transition: vec![0.0; params.transition.len()],
        }
    }
}

impl AdamState {
    pub fn new(params: &ScorerParams, lr: f64) -> Result<Self> {
        Self::with_hyperparameters(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(params: &ScorerParams, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid Adam hyperparameters lr={lr} beta1={beta1} beta2={beta2} eps={epsilon}"
            )));
        }
        Ok(Self {
            first_moment: ScorerMoments::zeros(params),
            second_moment: ScorerMoments::zeros(params),
            step_count: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        })
    }
}

#[derive(Clone, Copy)]
struct StepConstants {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    c1: f64,
    c2: f64,
}

#[inline]
fn adam_update(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, k: StepConstants) {
    *m = k.beta1 * *m + (1.0 - k.beta1) * g;
    *v = k.beta2 * *v + (1.0 - k.beta2) * g * g;
    let m_hat = *m / k.c1;
    let v_hat = *v / k.c2;
    *p -= k.lr * m_hat / (v_hat.sqrt() + k.epsilon);
}

/// Bias-corrected Adam applied to touched rows only. The step counter is
/// global, so the correction terms match dense Adam at the same step.
pub fn adam_step(params: &mut ScorerParams, grads: &SparseGrad, state: &mut AdamState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if grads.emb.len() != params.embeddings.len() || grads.transition.len() != params.transition.len() {
        return Err(Error::InvalidArgument("gradient shape does not match parameters".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let k = StepConstants {
        lr: state.lr,
        beta1: state.beta1,
        beta2: state.beta2,
        epsilon: state.epsilon,
        c1: 1.0 - state.beta1.powi(t),
        c2: 1.0 - state.beta2.powi(t),
    };
    let d = params.dim;
    for &v in grads.touched_rows() {
        let range = v * d..(v + 1) * d;
        let g_row = &grads.emb[range.clone()];
        let p_row = &mut params.embeddings[range.clone()];
        let m_row = &mut state.first_moment.embeddings[range.clone()];
        let s_row = &mut state.second_moment.embeddings[range];
        for i in 0..d {
            adam_update(&mut p_row[i], &mut m_row[i], &mut s_row[i], g_row[i], k);
        }
        adam_update(
            &mut params.bias[v],
            &mut state.first_moment.bias[v],
            &mut state.second_moment.bias[v],
            grads.bias[v],
            k,
        );
    }
    if let Some(gt) = grads.transition() {
        for (i, &g) in gt.iter().enumerate() {
            adam_update(
                &mut params.transition[i],
                &mut state.first_moment.transition[i],
                &mut state.second_moment.transition[i],
                g,
                k,
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn manual_params(rows: &[&[f64]]) -> ScorerParams {
        let dim = rows[0].len();
        let mut p = init_params(rows.len(), dim, 0).unwrap();
        p.embeddings = rows.iter().flat_map(|r| r.iter().copied()).collect();
        p
    }

    #[test]
    fn init_shape_and_scale() {
        let p = init_params(10, 8, 42).unwrap();
        assert_eq!(p.embeddings.len(), 80);
        assert!(p.embeddings.iter().all(|x| x.abs() < 0.2));
        assert!(p.bias.iter().all(|&b| b == 0.0));
        assert_eq!(p, init_params(10, 8, 42).unwrap());
        assert_ne!(p, init_params(10, 8, 43).unwrap());
        assert!(init_params(10, 0, 1).is_err());
    }

    #[test]
    fn pooling_weight_examples() {
        let p = init_params(5, 2, 0).unwrap().with_decay(1.0).unwrap();
        let s = pool_history(&[0, 1, 2], &p).unwrap();
        for w in &s.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = pool_weights(2, 0.5);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_item_history_is_its_embedding() {
        let p = init_params(6, 4, 9).unwrap();
        let s = pool_history(&[3], &p).unwrap();
        assert_eq!(s.pooled, p.embedding(3));
        assert_eq!(s.query, p.embedding(3));
    }

    #[test]
    fn empty_history_is_precondition_error() {
        let p = init_params(3, 2, 0).unwrap();
        assert!(matches!(pool_history(&[], &p), Err(Error::Precondition(_))));
    }

    #[test]
    fn history_truncated_to_max_len() {
        let p = init_params(10, 3, 0).unwrap().with_max_history(2).unwrap();
        let s = pool_history(&[1, 2, 3, 4], &p).unwrap();
        assert_eq!(s.items, vec![3, 4]);
    }

    #[test]
    fn score_examples() {
        let p = manual_params(&[&[1.0, 0.0], &[0.5, 2.0], &[0.0, 0.0]]);
        let s = pool_history(&[0], &p).unwrap();
        assert_eq!(score_item(&s, 1, &p).unwrap(), 0.5);

        let mut pb = p.clone();
        pb.bias[2] = 0.7;
        assert_eq!(score_item(&s, 2, &pb).unwrap(), 0.7);

        let mut doubled = s.clone();
        doubled.query.iter_mut().for_each(|x| *x *= 2.0);
        assert_eq!(score_item(&doubled, 1, &p).unwrap(), 1.0);

        assert!(matches!(score_item(&s, 3, &p), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn score_all_agrees_with_score_item_exactly() {
        let p = init_params(50, 7, 1).unwrap();
        let s = pool_history(&[4, 9, 11], &p).unwrap();
        let all = score_all(&s, &p);
        assert_eq!(all.len(), 50);
        for v in 0..50 {
            assert_eq!(all[v].to_bits(), score_item(&s, v, &p).unwrap().to_bits());
        }
    }

    #[test]
    fn bias_shift_moves_every_score() {
        let mut p = init_params(20, 4, 2).unwrap();
        let s = pool_history(&[1, 2], &p).unwrap();
        let before = score_all(&s, &p);
        p.bias.iter_mut().for_each(|b| *b += 3.25);
        let after = score_all(&s, &p);
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn score_all_runtime_is_roughly_linear() {
        let d = 32;
        let time_for = |n: usize| {
            let p = init_params(n, d, 3).unwrap();
            let s = pool_history(&[0, 1, 2], &p).unwrap();
            let mut best = f64::INFINITY;
            for _ in 0..15 {
                let t0 = std::time::Instant::now();
                let v = score_all(&s, &p);
                std::hint::black_box(&v);
                best = best.min(t0.elapsed().as_secs_f64());
            }
            best
        };
        let small = time_for(20_000);
        let large = time_for(160_000);
        let ratio = large / small;
        // 8x more items: a linear path gives ratio ≈ 8; accept within 2x of that.
        assert!((4.0..=16.0).contains(&ratio), "ratio {ratio}");
    }

    /// Value of the linear functional sum_i g_i s_{items[i]} under `params`.
    fn functional(history: &[usize], items: &[usize], g: &[f64], params: &ScorerParams) -> f64 {
        let s = pool_history(history, params).unwrap();
        items.iter().zip(g).map(|(&v, &gi)| gi * score_item(&s, v, params).unwrap()).sum()
    }

    fn random_params(seed: u64, n: usize, d: usize) -> ScorerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_params(n, d, seed).unwrap().with_decay(0.7).unwrap();
        p.embeddings.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        p.transition.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        p
    }

    fn check_against_finite_differences(seed: u64, history: &[usize], target: usize, negatives: &[usize]) {
        let p = random_params(seed, 12, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let g: Vec<f64> = (0..=negatives.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = scorer_gradients(history, target, negatives, &g, &p).unwrap();
        let mut items = vec![target];
        items.extend_from_slice(negatives);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

        let mut worst: f64 = 0.0;
        for v in 0..p.item_count {
            for k in 0..p.dim {
                let mut plus = p.clone();
                plus.embedding_mut(v)[k] += h;
                let mut minus = p.clone();
                minus.embedding_mut(v)[k] -= h;
                let fd = (functional(history, &items, &g, &plus) - functional(history, &items, &g, &minus)) / (2.0 * h);
                let an = if grad.is_touched(v) { grad.row(v)[k] } else { 0.0 };
                if an.abs() > 1e-9 || fd.abs() > 1e-9 {
                    worst = worst.max(rel(an, fd));
                }
            }
            let mut plus = p.clone();
            plus.bias[v] += h;
            let mut minus = p.clone();
            minus.bias[v] -= h;
            let fd = (functional(history, &items, &g, &plus) - functional(history, &items, &g, &minus)) / (2.0 * h);
            let an = if grad.is_touched(v) { grad.bias(v) } else { 0.0 };
            if an.abs() > 1e-9 || fd.abs() > 1e-9 {
                worst = worst.max(rel(an, fd));
            }
        }
        let gt = grad.transition().unwrap();
        for i in 0..p.transition.len() {
            let mut plus = p.clone();
            plus.transition[i] += h;
            let mut minus = p.clone();
            minus.transition[i] -= h;
            let fd = (functional(history, &items, &g, &plus) - functional(history, &items, &g, &minus)) / (2.0 * h);
            worst = worst.max(rel(gt[i], fd));
        }
        assert!(worst <= 1e-4, "seed {seed}: max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            check_against_finite_differences(seed, &[1, 5, 7], 3, &[0, 9, 10]);
        }
    }

    #[test]
    fn history_item_as_negative_accumulates() {
        for seed in 0..10 {
            check_against_finite_differences(seed, &[2, 4, 6], 4, &[6, 6, 2]);
        }
    }

    #[test]
    fn zero_loss_grads_give_zero_gradient() {
        let p = random_params(1, 8, 3);
        let grad = scorer_gradients(&[1, 2], 3, &[4, 5], &[0.0, 0.0, 0.0], &p).unwrap();
        assert!(grad.is_zero());
        assert!(grad.touched_rows().is_empty());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = init_params(3, 2, 0).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, 1e-3).unwrap();
        let mut g = SparseGrad::for_params(&p);
        g.add_row(1, 1.0, &[0.37, -4.0]);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((before.embedding(1)[0] - p.embedding(1)[0] - 1e-3).abs() < 1e-8);
        assert!((p.embedding(1)[1] - before.embedding(1)[1] - 1e-3).abs() < 1e-8);
        // Untouched rows are unchanged.
        assert_eq!(p.embedding(0), before.embedding(0));
        assert_eq!(p.embedding(2), before.embedding(2));
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_two_steps_differ_from_one_double_step() {
        let g_val = 0.5;
        let run = |steps: usize, g: f64| {
            let mut p = init_params(1, 1, 0).unwrap();
            p.embeddings[0] = 0.0;
            let mut st = AdamState::new(&p, 0.1).unwrap();
            let mut grad = SparseGrad::for_params(&p);
            grad.add_row(0, 1.0, &[g]);
            for _ in 0..steps {
                adam_step(&mut p, &grad, &mut st).unwrap();
            }
            p.embeddings[0]
        };
        let two = run(2, g_val);
        let one_double = run(1, 2.0 * g_val);
        // Hand trace: both steps have m_hat = g and v_hat = g², so each moves by lr.
        assert!((two - (-0.2)).abs() < 1e-6, "two steps {two}");
        assert!((one_double - (-0.1)).abs() < 1e-6, "double step {one_double}");
        assert!((two - one_double).abs() > 0.05);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = init_params(2, 2, 0).unwrap();
        let mut st = AdamState::new(&p, 1e-3).unwrap();
        let mut g = SparseGrad::for_params(&p);
        g.add_row(0, 1.0, &[f64::NAN, 0.0]);
        let before = p.clone();
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = random_params(5, 6, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save_checkpoint(&path).unwrap();
        assert_eq!(ScorerParams::load_checkpoint(&path).unwrap(), p);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["item_count"], 6);
        assert_eq!(v["dim"], 3);
    }

    #[test]
    fn sparse_grad_clear_resets_rows() {
        let mut g = SparseGrad::new(4, 2);
        g.add_row(2, 1.0, &[1.0, 2.0]);
        g.clear();
        assert!(g.touched_rows().is_empty());
        assert_eq!(g.row(2), &[0.0, 0.0]);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pooling_is_convex_combination(
            history in prop::collection::vec(0usize..20, 1..30),
            decay in 0.05f64..=1.0,
        ) {
            let p = init_params(20, 3, 7).unwrap().with_decay(decay).unwrap();
            let s = pool_history(&history, &p).unwrap();
            let total: f64 = s.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for w in s.weights.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-18);
            }
            for k in 0..3 {
                let lo = s.items.iter().map(|&v| p.embedding(v)[k]).fold(f64::INFINITY, f64::min);
                let hi = s.items.iter().map(|&v| p.embedding(v)[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s.pooled[k] >= lo - 1e-12 && s.pooled[k] <= hi + 1e-12);
            }
        }
    }
}
