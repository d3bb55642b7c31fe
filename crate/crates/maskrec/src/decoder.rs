//! Inference: iterative denoising from a fully masked SID with beam
//! search.
//!
//! Each round, every beam (i) scores its still-masked positions by
//! confidence (the probability of the most likely token), (ii) selects
//! one position during warm-up or `m_par` positions afterwards, and
//! (iii) expands the per-position Top-B token shortlists into joint
//! candidates scored by accumulated log-probability. The global Top-B
//! candidates survive. Committed tokens are never rewritten; decoding
//! ends when every beam is complete, after exactly
//! `R_warm + ceil((L - R_warm) / m_par)` forward rounds.

use std::collections::BTreeMap;

use crate::codebook::{InverseIndex, Sid};
use crate::error::{Error, Result};
use crate::model::{denoise_logits, position_log_probs, HistoryEncoding, ModelConfig};
use crate::numerics::{ParamSet, Rng};
use crate::schedule::MaskedSid;

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// Warm-up rounds decoding a single position each.
    pub r_warm: usize,
    /// Positions decoded per round after warm-up.
    pub m_par: usize,
    pub beam_width: usize,
    /// Hard cap on rounds; exceeding it indicates a scheduling bug.
    pub max_steps: usize,
    /// Pick positions uniformly at random instead of by confidence.
    pub random_position_selection: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            r_warm: 4,
            m_par: 2,
            beam_width: 50,
            max_steps: 64,
            random_position_selection: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, l: usize) -> Result<()> {
        if self.r_warm > l {
            return Err(Error::InvalidArgument(format!(
                "r_warm = {} exceeds L = {l}",
                self.r_warm
            )));
        }
        if self.m_par < 1 || self.beam_width < 1 {
            return Err(Error::InvalidArgument(
                "m_par and beam_width must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Positions to decode at round `r`: one during warm-up, then `m_par`,
/// always clamped to the number of still-masked positions.
pub fn positions_per_step(r: usize, cfg: &DecodeConfig, remaining: usize) -> usize {
    let m = if r < cfg.r_warm { 1 } else { cfg.m_par };
    m.min(remaining)
}

/// Total forward rounds to fill L positions:
/// R_warm + ceil((L - R_warm) / m_par).
pub fn total_steps(l: usize, r_warm: usize, m_par: usize) -> usize {
    let r_warm = r_warm.min(l);
    r_warm + (l - r_warm).div_ceil(m_par)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillRecord {
    pub step: usize,
    pub position: usize,
    pub token: u32,
    pub log_prob: f64,
}

/// One beam: a partial SID, its accumulated log-score, and the log of
/// every fill that produced it.
#[derive(Debug, Clone)]
pub struct BeamState {
    pub partial: MaskedSid,
    pub score: f64,
    pub fill_log: Vec<FillRecord>,
}

impl BeamState {
    pub fn initial(l: usize) -> Self {
        BeamState {
            partial: MaskedSid::fully_masked(l),
            score: 0.0,
            fill_log: Vec::new(),
        }
    }

    /// The score must equal the sum of fill-log entries.
    pub fn score_from_log(&self) -> f64 {
        self.fill_log.iter().map(|f| f.log_prob).sum()
    }
}

/// Per-position confidence for the still-masked positions of one beam:
/// the probability of the most likely token.
pub fn position_confidences(
    params: &ParamSet,
    cfg: &ModelConfig,
    beam: &MaskedSid,
    enc: &HistoryEncoding,
    use_difficulty: bool,
) -> Result<BTreeMap<usize, f64>> {
    let masked = beam.masked_positions();
    if masked.is_empty() {
        return Err(Error::InvalidArgument(
            "no masked positions to score".into(),
        ));
    }
    let lp = masked_log_probs(params, cfg, beam, enc, use_difficulty)?;
    Ok(lp
        .into_iter()
        .map(|(pos, logp)| {
            let best = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (pos, best.exp())
        })
        .collect())
}

/// One model forward for a beam: log-probabilities at every still-masked
/// position (filled positions are absent from the result).
fn masked_log_probs(
    params: &ParamSet,
    cfg: &ModelConfig,
    beam: &MaskedSid,
    enc: &HistoryEncoding,
    use_difficulty: bool,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let k = beam.mask_count();
    let logits = denoise_logits(params, cfg, beam, enc, k, use_difficulty)?;
    Ok(beam
        .masked_positions()
        .into_iter()
        .map(|pos| (pos, position_log_probs(&logits[pos])))
        .collect())
}

/// The m positions to fill this round: highest confidence first, ties to
/// the lowest position index. Under the random-selection ablation the
/// choice is uniform over masked positions instead.
pub fn select_positions(
    confidences: &BTreeMap<usize, f64>,
    m: usize,
    cfg: &DecodeConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if m > confidences.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} of {} masked positions",
            confidences.len()
        )));
    }
    let positions: Vec<usize> = confidences.keys().copied().collect();
    let mut selected: Vec<usize> = if cfg.random_position_selection {
        let uniform = vec![1.0 / positions.len() as f64; positions.len()];
        rng.sample_without_replacement(&uniform, m)?
            .into_iter()
            .map(|i| positions[i])
            .collect()
    } else {
        let mut ranked: Vec<(usize, f64)> =
            confidences.iter().map(|(&p, &c)| (p, c)).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.into_iter().take(m).map(|(p, _)| p).collect()
    };
    selected.sort_unstable();
    Ok(selected)
}

/// A joint expansion of one beam at its selected positions.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub parent: usize,
    pub fills: Vec<(usize, u32, f64)>,
    pub score: f64,
    /// Resulting token layout, for deterministic tie-breaking.
    key: Vec<u64>,
}

/// Expand each beam at its selected positions: per position keep the
/// Top-min(B, |V_l|) tokens, then join every index tuple. Candidate count
/// per beam is the product of the per-position shortlist sizes.
pub fn expand_beams(
    beams: &[BeamState],
    selections: &[Vec<usize>],
    log_probs: &[Vec<(usize, Vec<f64>)>],
    beam_width: usize,
) -> Vec<Candidate> {
    let mut candidates = Vec::new();
    for (bi, beam) in beams.iter().enumerate() {
        let lp: BTreeMap<usize, &Vec<f64>> =
            log_probs[bi].iter().map(|(p, v)| (*p, v)).collect();
        // Per-position shortlists: (token, log_prob), best first, ties to
        // the lower token index.
        let shortlists: Vec<(usize, Vec<(u32, f64)>)> = selections[bi]
            .iter()
            .map(|&pos| {
                let probs = lp[&pos];
                let mut ranked: Vec<(u32, f64)> = probs
                    .iter()
                    .enumerate()
                    .map(|(tok, &l)| (tok as u32, l))
                    .collect();
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                ranked.truncate(beam_width);
                (pos, ranked)
            })
            .collect();

        // Cartesian product over the shortlists.
        let mut tuple = vec![0usize; shortlists.len()];
        loop {
            let mut fills = Vec::with_capacity(tuple.len());
            let mut score = beam.score;
            for (slot, &(pos, ref ranked)) in tuple.iter().zip(&shortlists) {
                let (tok, logp) = ranked[*slot];
                fills.push((pos, tok, logp));
                score += logp;
            }
            let mut partial = beam.partial.clone();
            for &(pos, tok, _) in &fills {
                partial.fill(pos, tok).expect("selected positions are masked");
            }
            candidates.push(Candidate {
                parent: bi,
                key: partial.order_key(),
                fills,
                score,
            });

            // Advance the mixed-radix tuple.
            let mut i = tuple.len();
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                tuple[i] += 1;
                if tuple[i] < shortlists[i].1.len() {
                    break;
                }
                tuple[i] = 0;
                if i == 0 {
                    i = usize::MAX;
                    break;
                }
            }
            if i == usize::MAX || shortlists.is_empty() {
                break;
            }
        }
    }
    candidates
}

/// Keep the B best candidates by (score desc, token layout ascending).
/// Returns the kept set (score-sorted) and the best dropped score.
pub fn prune_beams(mut candidates: Vec<Candidate>, beam_width: usize) -> (Vec<Candidate>, Option<f64>) {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.key.cmp(&b.key))
    });
    let max_dropped = candidates.get(beam_width).map(|c| c.score);
    candidates.truncate(beam_width);
    (candidates, max_dropped)
}

/// A completed beam.
#[derive(Debug, Clone)]
pub struct DecodedBeam {
    pub sid: Sid,
    pub score: f64,
    pub fill_log: Vec<FillRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeStats {
    /// Batched decoder invocations: one per round, covering all beams.
    pub forward_rounds: usize,
    /// Monotone-pruning witness: max over rounds of
    /// (best dropped score - worst kept score); <= 0 when pruning is sound.
    pub worst_prune_gap: f64,
}

/// Full Top-B decoding for one user: start all-MASK with difficulty
/// index L, iteratively fill positions, return complete SIDs sorted by
/// descending score (identical SIDs deduplicated, keeping the higher
/// score).
pub fn decode_top_b(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    enc: &HistoryEncoding,
    cfg: &DecodeConfig,
    use_difficulty: bool,
    rng: &mut Rng,
) -> Result<(Vec<DecodedBeam>, DecodeStats)> {
    cfg.validate(model_cfg.l)?;
    let l = model_cfg.l;
    let mut beams = vec![BeamState::initial(l)];
    let mut stats = DecodeStats {
        forward_rounds: 0,
        worst_prune_gap: f64::NEG_INFINITY,
    };

    let mut round = 0;
    while beams.iter().any(|b| !b.partial.is_complete()) {
        if round >= cfg.max_steps {
            return Err(Error::InvalidArgument(format!(
                "decoding exceeded max_steps = {} with masked positions remaining",
                cfg.max_steps
            )));
        }
        // One batched forward round over all beams.
        let mut log_probs = Vec::with_capacity(beams.len());
        for beam in &beams {
            log_probs.push(masked_log_probs(
                params,
                model_cfg,
                &beam.partial,
                enc,
                use_difficulty,
            )?);
        }
        stats.forward_rounds += 1;

        let mut selections = Vec::with_capacity(beams.len());
        for (bi, beam) in beams.iter().enumerate() {
            let confidences: BTreeMap<usize, f64> = log_probs[bi]
                .iter()
                .map(|(pos, lp)| {
                    let best = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    (*pos, best.exp())
                })
                .collect();
            let m = positions_per_step(round, cfg, beam.partial.mask_count());
            selections.push(select_positions(&confidences, m, cfg, rng)?);
        }

        let candidates = expand_beams(&beams, &selections, &log_probs, cfg.beam_width);
        let (kept, max_dropped) = prune_beams(candidates, cfg.beam_width);
        if let Some(dropped) = max_dropped {
            let min_kept = kept.last().map(|c| c.score).unwrap_or(f64::NEG_INFINITY);
            stats.worst_prune_gap = stats.worst_prune_gap.max(dropped - min_kept);
        }

        beams = kept
            .into_iter()
            .map(|c| {
                let parent = &beams[c.parent];
                let mut partial = parent.partial.clone();
                let mut fill_log = parent.fill_log.clone();
                for &(pos, tok, logp) in &c.fills {
                    partial.fill(pos, tok).expect("filled once");
                    fill_log.push(FillRecord {
                        step: round,
                        position: pos,
                        token: tok,
                        log_prob: logp,
                    });
                }
                BeamState {
                    partial,
                    score: c.score,
                    fill_log,
                }
            })
            .collect();
        round += 1;
    }

    // Deduplicate identical complete SIDs, keeping the higher score
    // (beams are already score-sorted).
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(beams.len());
    for b in beams {
        let sid = b.partial.to_sid()?;
        if seen.insert(sid.clone()) {
            out.push(DecodedBeam {
                sid,
                score: b.score,
                fill_log: b.fill_log,
            });
        }
    }
    Ok((out, stats))
}

/// Expand ranked SIDs into a Top-K item list: buckets concatenate in SID
/// rank order (inverse-index order within a bucket), duplicates keep the
/// first occurrence, unseen SIDs are skipped.
pub fn sids_to_items(ranked: &[DecodedBeam], index: &InverseIndex, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-K needs K >= 1".into()));
    }
    let mut out = Vec::with_capacity(k);
    let mut seen = std::collections::HashSet::new();
    'outer: for beam in ranked {
        for &item in index.lookup(&beam.sid) {
            if seen.insert(item) {
                out.push(item);
                if out.len() == k {
                    break 'outer;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_history_infer, init_params};

    #[test]
    fn positions_per_step_schedule() {
        let cfg = DecodeConfig {
            r_warm: 4,
            m_par: 2,
            ..DecodeConfig::default()
        };
        for r in 0..4 {
            assert_eq!(positions_per_step(r, &cfg, 8), 1);
        }
        assert_eq!(positions_per_step(4, &cfg, 4), 2);
        // Clamp to remaining.
        assert_eq!(positions_per_step(5, &cfg, 1), 1);
        // No warm-up.
        let cfg0 = DecodeConfig {
            r_warm: 0,
            m_par: 4,
            ..DecodeConfig::default()
        };
        assert_eq!(positions_per_step(0, &cfg0, 8), 4);
    }

    #[test]
    fn total_steps_reference_rows() {
        // (R_warm, m_par) -> total steps for L = 8.
        let rows = [
            (0, 1, 8),
            (0, 2, 4),
            (2, 2, 5),
            (4, 2, 6),
            (6, 2, 7),
            (4, 3, 6),
            (4, 4, 5),
        ];
        for (r_warm, m_par, expect) in rows {
            assert_eq!(total_steps(8, r_warm, m_par), expect, "({r_warm},{m_par})");
        }
        // Degenerate: full warm-up means L rounds regardless of m_par.
        assert_eq!(total_steps(8, 8, 4), 8);
    }

    #[test]
    fn select_positions_top_m_and_ties() {
        let cfg = DecodeConfig::default();
        let mut rng = Rng::new(1);
        let conf: BTreeMap<usize, f64> = [(0, 0.9), (1, 0.2), (2, 0.5)].into_iter().collect();
        assert_eq!(select_positions(&conf, 2, &cfg, &mut rng).unwrap(), vec![0, 2]);
        // All equal: lowest index wins.
        let conf: BTreeMap<usize, f64> = [(0, 0.3), (1, 0.3), (2, 0.3)].into_iter().collect();
        assert_eq!(select_positions(&conf, 1, &cfg, &mut rng).unwrap(), vec![0]);
        // m equals the masked count: everything.
        assert_eq!(
            select_positions(&conf, 3, &cfg, &mut rng).unwrap(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn random_selection_is_uniformish() {
        let cfg = DecodeConfig {
            random_position_selection: true,
            ..DecodeConfig::default()
        };
        let conf: BTreeMap<usize, f64> = [(0, 0.99), (1, 0.01)].into_iter().collect();
        let mut rng = Rng::new(3);
        let mut picks = [0usize; 2];
        for _ in 0..10_000 {
            let s = select_positions(&conf, 1, &cfg, &mut rng).unwrap();
            picks[s[0]] += 1;
        }
        // Confidence is ignored: both positions near 50%.
        assert!((picks[0] as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    fn toy_beam_inputs() -> (Vec<BeamState>, Vec<Vec<usize>>, Vec<Vec<(usize, Vec<f64>)>>) {
        // One beam over L = 2, both positions masked, 3-token vocab.
        let beam = BeamState::initial(2);
        let lp0 = vec![(0.8f64).ln(), (0.15f64).ln(), (0.05f64).ln()];
        let lp1 = vec![(0.1f64).ln(), (0.6f64).ln(), (0.3f64).ln()];
        (
            vec![beam],
            vec![vec![0, 1]],
            vec![vec![(0, lp0), (1, lp1)]],
        )
    }

    #[test]
    fn expand_candidate_count_is_b_to_m() {
        let (beams, sels, lps) = toy_beam_inputs();
        let cands = expand_beams(&beams, &sels, &lps, 2);
        assert_eq!(cands.len(), 4); // B^m = 2^2

        // Shortlist clamps to |V| when B > |V|.
        let cands = expand_beams(&beams, &sels, &lps, 50);
        assert_eq!(cands.len(), 9); // 3 * 3
    }

    #[test]
    fn candidate_scores_are_sums() {
        let (beams, sels, lps) = toy_beam_inputs();
        let cands = expand_beams(&beams, &sels, &lps, 3);
        for c in &cands {
            let expect: f64 = c.fills.iter().map(|&(_, _, lp)| lp).sum();
            assert!((c.score - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_expansion_single_candidate() {
        let (beams, sels, lps) = toy_beam_inputs();
        let cands = expand_beams(&beams, &sels, &lps, 1);
        assert_eq!(cands.len(), 1);
        // argmax tokens: position 0 -> 0 (0.8), position 1 -> 1 (0.6).
        assert_eq!(cands[0].fills[0].1, 0);
        assert_eq!(cands[0].fills[1].1, 1);
    }

    #[test]
    fn prune_keeps_top_by_score_then_lex() {
        let (beams, sels, lps) = toy_beam_inputs();
        let cands = expand_beams(&beams, &sels, &lps, 3);
        let (kept, max_dropped) = prune_beams(cands, 2);
        assert_eq!(kept.len(), 2);
        assert!(kept[0].score >= kept[1].score);
        assert!(max_dropped.unwrap() <= kept[1].score);
        // B larger than the candidate set keeps everything.
        let (beams, sels, lps) = toy_beam_inputs();
        let cands = expand_beams(&beams, &sels, &lps, 2);
        let (kept, dropped) = prune_beams(cands, 100);
        assert_eq!(kept.len(), 4);
        assert!(dropped.is_none());
    }

    #[test]
    fn equal_scores_break_lexicographically() {
        let beam = BeamState::initial(2);
        let half = (0.5f64).ln();
        let lps = vec![vec![(0usize, vec![half, half]), (1usize, vec![half, half])]];
        let cands = expand_beams(&[beam], &[vec![0, 1]], &lps, 2);
        let (kept, _) = prune_beams(cands, 2);
        // All four candidates tie; lexicographically smallest token
        // layouts come first: (0,0) then (0,1).
        assert_eq!(kept[0].key, vec![0, 0]);
        assert_eq!(kept[1].key, vec![0, 1]);
    }

    fn decode_fixture() -> (ModelConfig, ParamSet, HistoryEncoding) {
        let cfg = ModelConfig {
            l: 4,
            vocab_sizes: vec![6; 4],
            hidden: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_history: 4,
            dropout: 0.0,
        };
        let mut params = init_params(&cfg, &Rng::new(41)).unwrap();
        let mut r = Rng::new(42);
        for l in 0..4 {
            for v in params.get_mut(&format!("head/{l}")).data_mut() {
                *v = 0.3 * r.next_gaussian();
            }
        }
        params.quantize_f32();
        let history = vec![Sid(vec![1, 2, 3, 4]), Sid(vec![5, 0, 1, 2])];
        let enc = encode_history_infer(&params, &cfg, &history).unwrap();
        (cfg, params, enc)
    }

    #[test]
    fn decode_round_count_matches_formula() {
        let (model_cfg, params, enc) = decode_fixture();
        for (r_warm, m_par) in [(0, 1), (0, 2), (2, 2), (4, 2), (1, 3), (4, 4)] {
            let cfg = DecodeConfig {
                r_warm,
                m_par,
                beam_width: 3,
                ..DecodeConfig::default()
            };
            let mut rng = Rng::new(1);
            let (beams, stats) =
                decode_top_b(&params, &model_cfg, &enc, &cfg, true, &mut rng).unwrap();
            assert_eq!(stats.forward_rounds, total_steps(4, r_warm, m_par));
            assert!(!beams.is_empty());
            assert!(beams.iter().all(|b| b.sid.len() == 4));
        }
    }

    #[test]
    fn beam_scores_match_fill_logs_and_are_sorted() {
        let (model_cfg, params, enc) = decode_fixture();
        let cfg = DecodeConfig {
            r_warm: 2,
            m_par: 2,
            beam_width: 5,
            ..DecodeConfig::default()
        };
        let mut rng = Rng::new(2);
        let (beams, stats) = decode_top_b(&params, &model_cfg, &enc, &cfg, true, &mut rng).unwrap();
        for b in &beams {
            let from_log: f64 = b.fill_log.iter().map(|f| f.log_prob).sum();
            assert!((b.score - from_log).abs() < 1e-6);
        }
        for w in beams.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        assert!(stats.worst_prune_gap <= 1e-12);
    }

    #[test]
    fn greedy_decode_matches_confidence_oracle() {
        // B = 1, m_par = 1: identical to repeatedly filling the
        // argmax-confidence position with its argmax token.
        let (model_cfg, params, enc) = decode_fixture();
        let cfg = DecodeConfig {
            r_warm: 0,
            m_par: 1,
            beam_width: 1,
            ..DecodeConfig::default()
        };
        let mut rng = Rng::new(3);
        let (beams, _) = decode_top_b(&params, &model_cfg, &enc, &cfg, true, &mut rng).unwrap();

        // Oracle: independent greedy loop over the same forward function.
        let mut partial = MaskedSid::fully_masked(4);
        let mut oracle_fills = Vec::new();
        while !partial.is_complete() {
            let k = partial.mask_count();
            let logits = denoise_logits(&params, &model_cfg, &partial, &enc, k, true).unwrap();
            let mut best: Option<(usize, u32, f64)> = None;
            for pos in partial.masked_positions() {
                let lp = position_log_probs(&logits[pos]);
                let (tok, top) = lp
                    .iter()
                    .enumerate()
                    .max_by(|(ai, av), (bi, bv)| av.partial_cmp(bv).unwrap().then(bi.cmp(ai)))
                    .unwrap();
                let better = match best {
                    None => true,
                    Some((bp, _, blp)) => {
                        top > &blp || (top == &blp && pos < bp)
                    }
                };
                if better {
                    best = Some((pos, tok as u32, *top));
                }
            }
            let (pos, tok, lp) = best.unwrap();
            partial.fill(pos, tok).unwrap();
            oracle_fills.push((pos, tok, lp));
        }
        let oracle_sid = partial.to_sid().unwrap();
        let oracle_score: f64 = oracle_fills.iter().map(|f| f.2).sum();

        assert_eq!(beams[0].sid, oracle_sid);
        assert_eq!(beams[0].score, oracle_score);
        let decoded_fills: Vec<(usize, u32, f64)> = beams[0]
            .fill_log
            .iter()
            .map(|f| (f.position, f.token, f.log_prob))
            .collect();
        assert_eq!(decoded_fills, oracle_fills);
    }

    #[test]
    fn wider_beam_dominates_greedy() {
        let (model_cfg, params, enc) = decode_fixture();
        let greedy_cfg = DecodeConfig {
            r_warm: 4,
            m_par: 1,
            beam_width: 1,
            ..DecodeConfig::default()
        };
        let wide_cfg = DecodeConfig {
            r_warm: 4,
            m_par: 1,
            beam_width: 16,
            ..DecodeConfig::default()
        };
        let mut rng = Rng::new(4);
        let (greedy, _) =
            decode_top_b(&params, &model_cfg, &enc, &greedy_cfg, true, &mut rng).unwrap();
        let (wide, _) = decode_top_b(&params, &model_cfg, &enc, &wide_cfg, true, &mut rng).unwrap();
        assert!(wide[0].score >= greedy[0].score);
    }

    #[test]
    fn sids_to_items_expansion() {
        use crate::codebook::{CodebookSet, InverseIndex, RotationMode, CodebookConfig};
        use crate::data::ItemCatalog;

        // Catalog of four 2-d items forming 4 distinct SIDs over L=2.
        let mut catalog = ItemCatalog::new();
        catalog.push("i0".into(), vec![0.0, 0.0], None).unwrap();
        catalog.push("i1".into(), vec![0.0, 1.0], None).unwrap();
        catalog.push("i2".into(), vec![1.0, 0.0], None).unwrap();
        catalog.push("i3".into(), vec![1.0, 1.0], None).unwrap();
        let refs: Vec<&[f64]> = (0..4).map(|i| catalog.embedding(i)).collect();
        let cb_cfg = CodebookConfig {
            l: 2,
            vocab_size: 2,
            kmeans_iters: 8,
            kmeans_attempts: 4,
            rotation: RotationMode::Identity,
        };
        let cb = CodebookSet::fit(&refs, 2, &cb_cfg, &Rng::new(1)).unwrap();
        let index = InverseIndex::build(&catalog, &cb).unwrap();

        let beam = |sid: Sid, score: f64| DecodedBeam {
            sid,
            score,
            fill_log: vec![],
        };
        let sid0 = cb.quantize(catalog.embedding(0)).unwrap();
        let sid3 = cb.quantize(catalog.embedding(3)).unwrap();
        let ranked = vec![beam(sid3, -0.1), beam(Sid(vec![9, 9]), -0.2), beam(sid0, -0.5)];
        // Unseen SID is skipped; order mirrors SID rank.
        let items = sids_to_items(&ranked, &index, 10).unwrap();
        assert_eq!(items, vec![3, 0]);
        let top1 = sids_to_items(&ranked, &index, 1).unwrap();
        assert_eq!(top1, vec![3]);
        assert!(sids_to_items(&ranked, &index, 0).is_err());
    }

    #[test]
    fn no_masked_positions_confidence_is_error() {
        let (model_cfg, params, enc) = decode_fixture();
        let mut complete = MaskedSid::fully_masked(4);
        for pos in 0..4 {
            complete.fill(pos, 0).unwrap();
        }
        assert!(position_confidences(&params, &model_cfg, &complete, &enc, true).is_err());
    }

    #[test]
    fn confidence_saturation_and_uniform() {
        // Saturated head: one logit +30 over the rest -> confidence ~1.
        let lp = position_log_probs(&[30.0, 0.0, 0.0]);
        assert!((lp[0].exp() - 1.0).abs() < 1e-6);
        // Uniform logits over 32: confidence 1/32.
        let lp = position_log_probs(&vec![0.0; 32]);
        let conf = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        assert!((conf - 1.0 / 32.0).abs() < 1e-9);
    }
}
