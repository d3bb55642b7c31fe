//! Leave-one-out evaluation (Recall@K, NDCG@K) and the decoding-cost
//! benchmark over (R_warm, m_par) grids.

use std::time::Instant;

use serde::Serialize;

use crate::codebook::{InverseIndex, Sid};
use crate::data::InteractionLog;
use crate::decoder::{decode_top_b, sids_to_items, total_steps, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{encode_history_infer, ModelConfig};
use crate::numerics::{ParamSet, Rng};

/// Per-user leave-one-out split: the most recent interaction tests, the
/// second most recent validates, the rest train.
#[derive(Debug, Clone)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

/// The part of the target a split evaluates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    /// History = train prefix, target = validation item.
    Validation,
    /// History = train prefix + validation item, target = test item.
    Test,
}

impl UserSplit {
    pub fn history(&self, target: EvalTarget) -> Vec<usize> {
        match target {
            EvalTarget::Validation => self.train.clone(),
            EvalTarget::Test => {
                let mut h = self.train.clone();
                h.push(self.valid);
                h
            }
        }
    }

    pub fn target_item(&self, target: EvalTarget) -> usize {
        match target {
            EvalTarget::Validation => self.valid,
            EvalTarget::Test => self.test,
        }
    }
}

/// Split every user with at least 3 interactions; shorter users are
/// excluded. Errors if explicit timestamps are present and out of order.
pub fn leave_one_out_split(log: &InteractionLog) -> Result<Vec<UserSplit>> {
    let mut out = Vec::new();
    for u in 0..log.len() {
        if let Some(ts) = log.timestamps(u) {
            if ts.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "interactions for user {:?} are not chronologically sorted",
                    log.user(u)
                )));
            }
        }
        let items = log.items(u);
        if items.len() < 3 {
            continue;
        }
        let n = items.len();
        out.push(UserSplit {
            user: u,
            train: items[..n - 2].to_vec(),
            valid: items[n - 2],
            test: items[n - 1],
        });
    }
    Ok(out)
}

/// 1 iff the target appears in the first K ranked items.
pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    assert!(k >= 1, "recall@K needs K >= 1");
    if ranked.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// 1 / log2(rank + 1) when the target is at 1-based rank <= K, else 0.
/// With a single relevant item the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    assert!(k >= 1, "ndcg@K needs K >= 1");
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(pos) => 1.0 / ((pos as f64 + 2.0).log2()),
        None => 0.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub users: usize,
}

/// Everything evaluation needs beyond the splits themselves.
pub struct EvalContext<'a> {
    pub params: &'a ParamSet,
    pub model_cfg: &'a ModelConfig,
    pub item_sids: &'a [Sid],
    pub index: &'a InverseIndex,
    pub decode_cfg: &'a DecodeConfig,
    pub use_difficulty: bool,
}

fn decode_user_items(
    ctx: &EvalContext,
    history_items: &[usize],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let history: Vec<Sid> = history_items
        .iter()
        .map(|&i| ctx.item_sids[i].clone())
        .collect();
    let enc = encode_history_infer(ctx.params, ctx.model_cfg, &history)?;
    let (beams, _) = decode_top_b(
        ctx.params,
        ctx.model_cfg,
        &enc,
        ctx.decode_cfg,
        ctx.use_difficulty,
        rng,
    )?;
    sids_to_items(&beams, ctx.index, k)
}

/// Decode Top-B for every split user, map SIDs to items, average
/// Recall@5/10 and NDCG@5/10. Deterministic: users evaluated in split
/// order with per-user derived streams.
pub fn evaluate_model(
    ctx: &EvalContext,
    splits: &[UserSplit],
    target: EvalTarget,
    seed: u64,
) -> Result<MetricReport> {
    if splits.is_empty() {
        return Err(Error::InvalidArgument(
            "no users with >= 3 interactions to evaluate".into(),
        ));
    }
    let root = Rng::new(seed);
    let mut sums = [0.0f64; 4];
    for split in splits {
        let mut rng = root.derive_index("eval/user", split.user as u64);
        let ranked = decode_user_items(ctx, &split.history(target), 10, &mut rng)?;
        let t = split.target_item(target);
        sums[0] += recall_at_k(&ranked, t, 5);
        sums[1] += recall_at_k(&ranked, t, 10);
        sums[2] += ndcg_at_k(&ranked, t, 5);
        sums[3] += ndcg_at_k(&ranked, t, 10);
    }
    let n = splits.len() as f64;
    Ok(MetricReport {
        recall_at_5: sums[0] / n,
        recall_at_10: sums[1] / n,
        ndcg_at_5: sums[2] / n,
        ndcg_at_10: sums[3] / n,
        users: splits.len(),
    })
}

// ── decoding benchmark ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub r_warm: usize,
    pub m_par: usize,
    /// R_warm + ceil((L - R_warm) / m_par).
    pub total_steps: usize,
    /// Instrumented forward rounds per user (must equal `total_steps`).
    pub measured_rounds: usize,
    pub recall_at_10: f64,
    pub wall_seconds: f64,
    pub qps: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub users: usize,
    pub beam_width: usize,
}

/// Decode every split user under each (R_warm, m_par) grid cell,
/// measuring wall time (after `warmup_users` untimed decodes) and
/// verifying the per-user forward-round count against the step formula.
pub fn benchmark_decoding(
    ctx: &EvalContext,
    splits: &[UserSplit],
    grid: &[(usize, usize)],
    warmup_users: usize,
    seed: u64,
) -> Result<BenchmarkReport> {
    if splits.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs users".into()));
    }
    let l = ctx.model_cfg.l;
    let root = Rng::new(seed);
    let mut rows = Vec::with_capacity(grid.len());

    for &(r_warm, m_par) in grid {
        let cfg = DecodeConfig {
            r_warm,
            m_par,
            ..ctx.decode_cfg.clone()
        };
        cfg.validate(l)?;
        let expect_steps = total_steps(l, r_warm, m_par);

        // Precompute encodings and targets; the benchmark times decoding.
        let prepared: Vec<_> = splits
            .iter()
            .map(|s| {
                let history: Vec<Sid> = s
                    .history(EvalTarget::Test)
                    .iter()
                    .map(|&i| ctx.item_sids[i].clone())
                    .collect();
                let enc = encode_history_infer(ctx.params, ctx.model_cfg, &history)?;
                Ok((enc, s.test, s.user))
            })
            .collect::<Result<Vec<_>>>()?;

        for (enc, _, user) in prepared.iter().take(warmup_users) {
            let mut rng = root.derive_index("bench/user", *user as u64);
            decode_top_b(ctx.params, ctx.model_cfg, enc, &cfg, ctx.use_difficulty, &mut rng)?;
        }

        let mut recall10 = 0.0;
        let mut measured = None;
        let start = Instant::now();
        for (enc, test_item, user) in &prepared {
            let mut rng = root.derive_index("bench/user", *user as u64);
            let (beams, stats) = decode_top_b(
                ctx.params,
                ctx.model_cfg,
                enc,
                &cfg,
                ctx.use_difficulty,
                &mut rng,
            )?;
            match measured {
                None => measured = Some(stats.forward_rounds),
                Some(m) if m != stats.forward_rounds => {
                    return Err(Error::InvalidArgument(format!(
                        "forward rounds varied across users: {m} vs {}",
                        stats.forward_rounds
                    )))
                }
                _ => {}
            }
            let ranked = sids_to_items(&beams, ctx.index, 10)?;
            recall10 += recall_at_k(&ranked, *test_item, 10);
        }
        let wall = start.elapsed().as_secs_f64();
        let measured = measured.expect("at least one user");
        if measured != expect_steps {
            return Err(Error::InvalidArgument(format!(
                "measured {measured} forward rounds but the formula gives {expect_steps} \
                 for (R_warm = {r_warm}, m_par = {m_par})"
            )));
        }
        rows.push(BenchmarkRow {
            r_warm,
            m_par,
            total_steps: expect_steps,
            measured_rounds: measured,
            recall_at_10: recall10 / splits.len() as f64,
            wall_seconds: wall,
            qps: splits.len() as f64 / wall,
        });
    }
    Ok(BenchmarkReport {
        rows,
        users: splits.len(),
        beam_width: ctx.decode_cfg.beam_width,
    })
}

/// Fixed-width text table of a benchmark report.
pub fn benchmark_table(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    out.push_str("R_warm  m_par  total_steps  recall@10  QPS\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{:>6}  {:>5}  {:>11}  {:>9.4}  {:>8.2}\n",
            row.r_warm, row.m_par, row.total_steps, row.recall_at_10, row.qps
        ));
    }
    out
}

/// CSV of a benchmark report (for plotting).
pub fn benchmark_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from("r_warm,m_par,total_steps,measured_rounds,recall_at_10,wall_seconds,qps\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.r_warm, r.m_par, r.total_steps, r.measured_rounds, r.recall_at_10, r.wall_seconds, r.qps
        ));
    }
    out
}
