//! Training-time noise construction.
//!
//! Two independent choices per training example: how many SID positions
//! to mask (a curriculum over training progress that moves mass from few
//! masks to many), and which positions to mask (inverse-frequency
//! weighting over the user's history, so rarely-seen tokens are masked
//! more often). Masked positions are absorbed into a MASK sentinel and
//! never hold a wrong token.

use crate::codebook::Sid;
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_EPSILON: f64 = 0.1;

/// Monotone per-count scoring functions over k in 1..=L.
#[derive(Debug, Clone)]
pub enum ScoreFns {
    /// f_low(k) = L + 1 - k, f_high(k) = k.
    Linear,
    /// Explicit tables indexed by k - 1; `low` must be strictly
    /// decreasing, `high` strictly increasing.
    Custom { low: Vec<f64>, high: Vec<f64> },
}

impl ScoreFns {
    fn low(&self, k: usize, l: usize) -> f64 {
        match self {
            ScoreFns::Linear => (l + 1 - k) as f64,
            ScoreFns::Custom { low, .. } => low[k - 1],
        }
    }

    fn high(&self, k: usize, _l: usize) -> f64 {
        match self {
            ScoreFns::Linear => k as f64,
            ScoreFns::Custom { high, .. } => high[k - 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurriculumConfig {
    /// Exponent stretching the cosine difficulty curve.
    pub gamma: f64,
    /// Step count over which difficulty runs 1 -> 0; training past this
    /// continues at maximum difficulty.
    pub total_steps: u64,
    pub score_fns: ScoreFns,
}

impl CurriculumConfig {
    pub fn new(gamma: f64, total_steps: u64) -> Self {
        CurriculumConfig {
            gamma,
            total_steps: total_steps.max(1),
            score_fns: ScoreFns::Linear,
        }
    }
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig::new(2.0, 10_000)
    }
}

/// cos(pi * y) for y in [0, 1] with exact values at the quarter points,
/// so the difficulty schedule hits 1, 0.5 and 0 exactly.
fn cospi01(y: f64) -> f64 {
    if y == 0.0 {
        1.0
    } else if y == 0.5 {
        0.0
    } else if y == 1.0 {
        -1.0
    } else {
        (std::f64::consts::PI * y).cos()
    }
}

/// Stretched difficulty: sin(pi/2 * (1 - tau))^gamma with
/// tau = min(1, n / N), computed through the half-angle identity
/// sin^2(x) = (1 - cos(2x)) / 2 so the endpoints are exact.
pub fn stretched_difficulty(step: u64, cfg: &CurriculumConfig) -> f64 {
    let tau = (step as f64 / cfg.total_steps as f64).min(1.0);
    let sin_sq = (1.0 - cospi01(1.0 - tau)) / 2.0;
    sin_sq.powf(cfg.gamma / 2.0)
}

/// Probability over mask counts k in 1..=L (index 0 holds k = 1):
/// s(k) = (1 - delta) * f_high(k) + delta * f_low(k), normalized.
pub fn mask_count_distribution(delta: f64, l: usize, fns: &ScoreFns) -> Result<Vec<f64>> {
    if l < 1 {
        return Err(Error::InvalidArgument("mask count needs L >= 1".into()));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "delta must be in [0, 1], got {delta}"
        )));
    }
    if let ScoreFns::Custom { low, high } = fns {
        if low.len() != l || high.len() != l {
            return Err(Error::InvalidArgument(
                "custom score tables must have length L".into(),
            ));
        }
    }
    let mut scores = Vec::with_capacity(l);
    for k in 1..=l {
        let s = (1.0 - delta) * fns.high(k, l) + delta * fns.low(k, l);
        if s <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "score s({k}) = {s} is not positive"
            )));
        }
        scores.push(s);
    }
    let total: f64 = scores.iter().sum();
    for s in &mut scores {
        *s /= total;
    }
    Ok(scores)
}

/// Mean of the mask-count distribution.
pub fn expected_mask_count(delta: f64, l: usize, fns: &ScoreFns) -> Result<f64> {
    let p = mask_count_distribution(delta, l, fns)?;
    Ok(p.iter()
        .enumerate()
        .map(|(i, &pk)| (i + 1) as f64 * pk)
        .sum())
}

/// Draw k ~ P_time for the given training step.
pub fn sample_mask_count(
    rng: &mut Rng,
    step: u64,
    cfg: &CurriculumConfig,
    l: usize,
) -> Result<usize> {
    let delta = stretched_difficulty(step, cfg);
    let p = mask_count_distribution(delta, l, &cfg.score_fns)?;
    Ok(rng.categorical(&p)? + 1)
}

/// f[l] = how many history SIDs share the target's token at position l.
pub fn history_token_frequencies(target: &Sid, history: &[Sid]) -> Result<Vec<usize>> {
    let l = target.len();
    let mut f = vec![0usize; l];
    for h in history {
        if h.len() != l {
            return Err(Error::ShapeMismatch {
                op: "history_token_frequencies",
                expected: format!("SIDs of length {l}"),
                actual: format!("{}", h.len()),
            });
        }
        for (pos, fl) in f.iter_mut().enumerate() {
            if h.tokens()[pos] == target.tokens()[pos] {
                *fl += 1;
            }
        }
    }
    Ok(f)
}

/// P_pos[l] proportional to 1 / (f[l] + epsilon): strictly fewer
/// historical occurrences means strictly higher masking probability.
pub fn mask_position_distribution(f: &[usize], epsilon: f64) -> Result<Vec<f64>> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let weights: Vec<f64> = f.iter().map(|&fl| 1.0 / (fl as f64 + epsilon)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Mask position set of size k, drawn sequentially without replacement.
/// Returned sorted ascending.
pub fn sample_mask_positions(rng: &mut Rng, p_pos: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > p_pos.len() {
        return Err(Error::InvalidArgument(format!(
            "mask count {k} out of range for {} positions",
            p_pos.len()
        )));
    }
    let mut m = rng.sample_without_replacement(p_pos, k)?;
    m.sort_unstable();
    Ok(m)
}

// ── masked SIDs ─────────────────────────────────────────────────────────

/// A SID with a subset of positions absorbed into MASK.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedSid {
    /// None is the MASK sentinel.
    slots: Vec<Option<u32>>,
}

impl MaskedSid {
    pub fn fully_masked(l: usize) -> Self {
        MaskedSid {
            slots: vec![None; l],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, pos: usize) -> Option<u32> {
        self.slots[pos]
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.slots[pos].is_none()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn mask_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(|s| s.is_some())
    }

    /// Write a token into a masked position. Positions are written at
    /// most once; filling a committed slot is a bug.
    pub fn fill(&mut self, pos: usize, token: u32) -> Result<()> {
        if self.slots[pos].is_some() {
            return Err(Error::InvalidArgument(format!(
                "position {pos} is already filled"
            )));
        }
        self.slots[pos] = Some(token);
        Ok(())
    }

    pub fn to_sid(&self) -> Result<Sid> {
        self.slots
            .iter()
            .map(|s| {
                s.ok_or_else(|| Error::InvalidArgument("SID still has masked positions".into()))
            })
            .collect::<Result<Vec<u32>>>()
            .map(Sid)
    }

    /// Lexicographic key where MASK sorts after every real token.
    pub fn order_key(&self) -> Vec<u64> {
        self.slots
            .iter()
            .map(|s| match s {
                Some(t) => *t as u64,
                None => u64::MAX,
            })
            .collect()
    }
}

/// Replace the target's tokens at `mask` positions with MASK; all other
/// positions keep their original token.
pub fn apply_mask(target: &Sid, mask: &[usize]) -> MaskedSid {
    let mut slots: Vec<Option<u32>> = target.tokens().iter().map(|&t| Some(t)).collect();
    for &pos in mask {
        slots[pos] = None;
    }
    MaskedSid { slots }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difficulty_endpoints_exact() {
        let cfg = CurriculumConfig::new(2.0, 1000);
        assert_eq!(stretched_difficulty(0, &cfg), 1.0);
        assert_eq!(stretched_difficulty(1000, &cfg), 0.0);
        assert_eq!(stretched_difficulty(5000, &cfg), 0.0);
        // tau = 0.5, gamma = 2: sin^2(pi/4) = 0.5 exactly.
        assert_eq!(stretched_difficulty(500, &cfg), 0.5);
    }

    #[test]
    fn difficulty_monotone_non_increasing() {
        let cfg = CurriculumConfig::new(2.0, 997);
        let mut prev = f64::INFINITY;
        for n in 0..=997 {
            let d = stretched_difficulty(n, &cfg);
            assert!(d <= prev + 1e-15, "delta rose at step {n}");
            assert!((0.0..=1.0).contains(&d));
            prev = d;
        }
    }

    #[test]
    fn count_distribution_uniform_at_half() {
        for l in [1, 4, 8, 13] {
            let p = mask_count_distribution(0.5, l, &ScoreFns::Linear).unwrap();
            for &pk in &p {
                assert!((pk - 1.0 / l as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn count_distribution_hand_values_l8() {
        // delta = 1: P(k) = (9 - k) / 36.
        let p1 = mask_count_distribution(1.0, 8, &ScoreFns::Linear).unwrap();
        for k in 1..=8usize {
            assert!((p1[k - 1] - (9 - k) as f64 / 36.0).abs() < 1e-12);
        }
        assert!((p1[0] - 8.0 / 36.0).abs() < 1e-12);
        assert!((p1[7] - 1.0 / 36.0).abs() < 1e-12);
        // delta = 0: P(k) = k / 36, E[k] = 204/36.
        let p0 = mask_count_distribution(0.0, 8, &ScoreFns::Linear).unwrap();
        for k in 1..=8usize {
            assert!((p0[k - 1] - k as f64 / 36.0).abs() < 1e-12);
        }
        let e = expected_mask_count(0.0, 8, &ScoreFns::Linear).unwrap();
        assert!((e - 204.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn count_distribution_sums_to_one() {
        for delta in [0.0, 0.123, 0.5, 0.987, 1.0] {
            let p = mask_count_distribution(delta, 8, &ScoreFns::Linear).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn custom_scores_with_nonpositive_value_rejected() {
        let fns = ScoreFns::Custom {
            low: vec![2.0, 0.0],
            high: vec![0.0, 1.0],
        };
        // At delta = 1 the score for k = 2 is 0.
        assert!(mask_count_distribution(1.0, 2, &fns).is_err());
    }

    #[test]
    fn sample_count_singleton_support() {
        let cfg = CurriculumConfig::new(2.0, 100);
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            assert_eq!(sample_mask_count(&mut rng, 0, &cfg, 1).unwrap(), 1);
        }
    }

    #[test]
    fn sample_count_monte_carlo_matches_p1() {
        // delta = 1 (step 0), L = 8: P(k=1) = 8/36 = 0.2222...
        let cfg = CurriculumConfig::new(2.0, 100);
        let mut rng = Rng::new(8);
        let n = 100_000;
        let mut ones = 0;
        for _ in 0..n {
            if sample_mask_count(&mut rng, 0, &cfg, 8).unwrap() == 1 {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 8.0 / 36.0).abs() < 0.01, "freq = {freq}");
    }

    #[test]
    fn sample_count_reproducible() {
        let cfg = CurriculumConfig::new(2.0, 100);
        let draw = || {
            let mut rng = Rng::new(77);
            (0..50)
                .map(|n| sample_mask_count(&mut rng, n, &cfg, 8).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn history_frequencies_hand_count() {
        let target = Sid(vec![1, 2]);
        let history = vec![Sid(vec![1, 2]), Sid(vec![1, 3]), Sid(vec![4, 2])];
        assert_eq!(
            history_token_frequencies(&target, &history).unwrap(),
            vec![2, 2]
        );
    }

    #[test]
    fn history_frequencies_edge_cases() {
        let target = Sid(vec![1, 2, 3]);
        assert_eq!(
            history_token_frequencies(&target, &[]).unwrap(),
            vec![0, 0, 0]
        );
        let repeated = vec![target.clone(); 5];
        assert_eq!(
            history_token_frequencies(&target, &repeated).unwrap(),
            vec![5, 5, 5]
        );
        let bad = vec![Sid(vec![1, 2])];
        assert!(history_token_frequencies(&target, &bad).is_err());
    }

    #[test]
    fn position_distribution_uniform_and_hand_value() {
        let p = mask_position_distribution(&[3, 3, 3, 3], 0.1).unwrap();
        for &x in &p {
            assert!((x - 0.25).abs() < 1e-9);
        }
        // f = (0, 2), eps = 0.1: w = (10, 1/2.1), P[0] = 10 / (10 + 0.47619).
        let p = mask_position_distribution(&[0, 2], 0.1).unwrap();
        let w1 = 1.0 / 2.1;
        let expect = 10.0 / (10.0 + w1);
        assert!((p[0] - expect).abs() < 1e-9, "p0 = {}", p[0]);
        assert!((p[0] - 0.9545).abs() < 1e-3);
    }

    #[test]
    fn position_distribution_strictly_monotone() {
        let f = vec![0, 1, 2, 7, 3];
        let p = mask_position_distribution(&f, 0.1).unwrap();
        for a in 0..f.len() {
            for b in 0..f.len() {
                if f[a] < f[b] {
                    assert!(p[a] > p[b], "f[{a}]={} f[{b}]={}", f[a], f[b]);
                }
            }
        }
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sample_positions_full_and_dominant() {
        let mut rng = Rng::new(5);
        let p = vec![0.25; 4];
        let m = sample_mask_positions(&mut rng, &p, 4).unwrap();
        assert_eq!(m, vec![0, 1, 2, 3]);

        // One weight dominates: k = 1 picks it nearly always.
        let p = vec![0.000333, 0.999, 0.000333, 0.000334];
        let mut hits = 0;
        for _ in 0..10_000 {
            if sample_mask_positions(&mut rng, &p, 1).unwrap() == vec![1] {
                hits += 1;
            }
        }
        assert!(hits >= 9900, "hits = {hits}");
    }

    #[test]
    fn sample_positions_rejects_oversize() {
        let mut rng = Rng::new(5);
        assert!(sample_mask_positions(&mut rng, &[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn apply_mask_definition() {
        let target = Sid(vec![5, 7, 2]);
        let empty = apply_mask(&target, &[]);
        assert!(empty.is_complete());
        assert_eq!(empty.to_sid().unwrap(), target);

        let all = apply_mask(&target, &[0, 1, 2]);
        assert_eq!(all.mask_count(), 3);

        let one = apply_mask(&target, &[1]);
        assert_eq!(one.slot(0), Some(5));
        assert_eq!(one.slot(1), None);
        assert_eq!(one.slot(2), Some(2));
        assert_eq!(one.masked_positions(), vec![1]);
    }

    #[test]
    fn absorbing_property_of_composite_sampler() {
        // Masked positions hold MASK, unmasked positions the exact truth,
        // for 10^4 sampled (k, M) pairs.
        let cfg = CurriculumConfig::new(2.0, 500);
        let mut rng = Rng::new(31);
        let target = Sid(vec![3, 1, 4, 1, 5, 9, 2, 6]);
        let history = vec![
            Sid(vec![3, 1, 4, 2, 7, 9, 0, 6]),
            Sid(vec![3, 5, 4, 1, 5, 8, 2, 1]),
        ];
        let f = history_token_frequencies(&target, &history).unwrap();
        let p_pos = mask_position_distribution(&f, 0.1).unwrap();
        for step in 0..10_000 {
            let k = sample_mask_count(&mut rng, step % 501, &cfg, 8).unwrap();
            assert!(k >= 1);
            let m = sample_mask_positions(&mut rng, &p_pos, k).unwrap();
            let masked = apply_mask(&target, &m);
            assert_eq!(masked.mask_count(), k);
            for pos in 0..8 {
                if m.contains(&pos) {
                    assert!(masked.is_masked(pos));
                } else {
                    assert_eq!(masked.slot(pos), Some(target.tokens()[pos]));
                }
            }
        }
    }

    #[test]
    fn fill_twice_is_an_error() {
        let mut m = MaskedSid::fully_masked(2);
        m.fill(0, 3).unwrap();
        assert!(m.fill(0, 4).is_err());
        m.fill(1, 1).unwrap();
        assert_eq!(m.to_sid().unwrap(), Sid(vec![3, 1]));
    }
}
