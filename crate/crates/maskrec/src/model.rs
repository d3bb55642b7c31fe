//! The denoiser: a history encoder and a bidirectional masked-SID
//! decoder with difficulty conditioning.
//!
//! The decoder input for position l is
//! `token_or_mask_embedding[l] + positional[l] + difficulty[k-1]`, where
//! k is the current mask count. Decoder self-attention is fully
//! bidirectional (no causal mask) and cross-attention sees every history
//! row. Each position has its own output head over its own vocabulary;
//! MASK is the extra last row of each position's embedding table.
//!
//! Two forward implementations share the same f64 kernels:
//! [`GraphBuilder`]-based construction on the autodiff tape for training,
//! and a tape-free path ([`encode_history_infer`], [`denoise_logits`])
//! for decoding, where cross-attention K/V projections are cached per
//! user. `infer_matches_graph_forward` pins them to bit-identical
//! outputs.

use std::collections::HashMap;

use crate::codebook::Sid;
use crate::error::{Error, Result};
use crate::numerics::graph::{
    gelu_scalar, layer_norm_row, log_softmax_row, matmul, softmax_row_in_place,
};
use crate::numerics::{Gradients, Graph, NodeId, ParamSet, Rng, Tensor};
use crate::schedule::MaskedSid;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub l: usize,
    pub vocab_sizes: Vec<usize>,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// FFN width multiplier over `hidden`.
    pub ffn_mult: usize,
    /// Maximum history length T; longer histories keep the most recent T.
    pub max_history: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk_default(l: usize, vocab_size: usize) -> Self {
        ModelConfig {
            l,
            vocab_sizes: vec![vocab_size; l],
            hidden: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_history: 20,
            dropout: 0.0,
        }
    }

    /// Sizes from the reference setup: 8 codebooks of 300, hidden 256,
    /// 6-layer encoder, 8 heads, histories capped at 20.
    pub fn paper_scale() -> Self {
        ModelConfig {
            l: 8,
            vocab_sizes: vec![300; 8],
            hidden: 256,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            ffn_mult: 4,
            max_history: 20,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::InvalidArgument("model needs L >= 2".into()));
        }
        if self.vocab_sizes.len() != self.l {
            return Err(Error::InvalidArgument(format!(
                "{} vocab sizes for L = {}",
                self.vocab_sizes.len(),
                self.l
            )));
        }
        if self.vocab_sizes.iter().any(|&v| v < 2) {
            return Err(Error::InvalidArgument("every vocab size must be >= 2".into()));
        }
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::InvalidArgument("need at least one layer per stack".into()));
        }
        if self.max_history == 0 {
            return Err(Error::InvalidArgument("max_history must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// MASK token index for a position: the extra last embedding row.
    pub fn mask_token(&self, pos: usize) -> usize {
        self.vocab_sizes[pos]
    }
}

/// Initialize all parameters from per-tensor derived streams, so the
/// result is independent of insertion order changes. Output heads start
/// at zero: an untrained model predicts the uniform distribution and its
/// initial loss per masked position is exactly ln |V_l|.
pub fn init_params(cfg: &ModelConfig, rng: &Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.hidden;
    let f = cfg.ffn_mult * d;
    let mut p = ParamSet::new();

    let gauss = |name: &str, shape: Vec<usize>, std: f64| -> Tensor {
        let mut r = rng.derive(name);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| std * r.next_gaussian()).collect();
        let mut t = Tensor::new(shape, data).expect("shape/data agree");
        t.quantize_f32();
        t
    };
    let ones = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![1.0; n]).expect("shape/data agree")
    };

    for l in 0..cfg.l {
        p.insert(
            &format!("tok_emb/{l}"),
            gauss(&format!("tok_emb/{l}"), vec![cfg.vocab_sizes[l] + 1, d], 0.1),
        )?;
    }
    p.insert("dec_pos", gauss("dec_pos", vec![cfg.l, d], 0.1))?;
    p.insert("hist_pos", gauss("hist_pos", vec![cfg.max_history, d], 0.1))?;
    p.insert("difficulty", gauss("difficulty", vec![cfg.l, d], 0.1))?;

    let w_std = 0.02;
    let attn_block = |p: &mut ParamSet, prefix: &str| -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            let name = format!("{prefix}/{w}");
            p.insert(&name, gauss(&name, vec![d, d], w_std))?;
        }
        p.insert(&format!("{prefix}/ln_g"), ones(vec![1, d]))?;
        p.insert(&format!("{prefix}/ln_b"), Tensor::zeros(vec![1, d]))?;
        Ok(())
    };
    let ffn_block = |p: &mut ParamSet, prefix: &str| -> Result<()> {
        p.insert(&format!("{prefix}/w1"), gauss(&format!("{prefix}/w1"), vec![d, f], w_std))?;
        p.insert(&format!("{prefix}/b1"), Tensor::zeros(vec![1, f]))?;
        p.insert(&format!("{prefix}/w2"), gauss(&format!("{prefix}/w2"), vec![f, d], w_std))?;
        p.insert(&format!("{prefix}/b2"), Tensor::zeros(vec![1, d]))?;
        p.insert(&format!("{prefix}/ln_g"), ones(vec![1, d]))?;
        p.insert(&format!("{prefix}/ln_b"), Tensor::zeros(vec![1, d]))?;
        Ok(())
    };

    for i in 0..cfg.encoder_layers {
        attn_block(&mut p, &format!("enc{i}/attn"))?;
        ffn_block(&mut p, &format!("enc{i}/ffn"))?;
    }
    p.insert("enc_final/ln_g", ones(vec![1, d]))?;
    p.insert("enc_final/ln_b", Tensor::zeros(vec![1, d]))?;

    for i in 0..cfg.decoder_layers {
        attn_block(&mut p, &format!("dec{i}/self"))?;
        attn_block(&mut p, &format!("dec{i}/cross"))?;
        ffn_block(&mut p, &format!("dec{i}/ffn"))?;
    }
    p.insert("dec_final/ln_g", ones(vec![1, d]))?;
    p.insert("dec_final/ln_b", Tensor::zeros(vec![1, d]))?;

    for l in 0..cfg.l {
        p.insert(&format!("head/{l}"), Tensor::zeros(vec![d, cfg.vocab_sizes[l]]))?;
        p.insert(&format!("head_b/{l}"), Tensor::zeros(vec![1, cfg.vocab_sizes[l]]))?;
    }
    Ok(p)
}

// ── tape-based forward (training) ───────────────────────────────────────

/// Builds model forwards on an autodiff tape, memoizing one leaf per
/// parameter so gradients accumulate across all uses (and all samples of
/// a batch sharing this builder).
pub struct GraphBuilder<'a> {
    pub graph: Graph,
    params: &'a ParamSet,
    leaves: HashMap<String, NodeId>,
    /// Some(rng) enables dropout masks (training mode).
    dropout_rng: Option<Rng>,
}

impl<'a> GraphBuilder<'a> {
    pub fn eval_mode(params: &'a ParamSet) -> Self {
        GraphBuilder {
            graph: Graph::new(),
            params,
            leaves: HashMap::new(),
            dropout_rng: None,
        }
    }

    pub fn train_mode(params: &'a ParamSet, dropout_rng: Rng) -> Self {
        GraphBuilder {
            graph: Graph::new(),
            params,
            leaves: HashMap::new(),
            dropout_rng: Some(dropout_rng),
        }
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.graph.leaf(self.params.get(name));
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Gradients re-keyed by parameter name; untouched parameters get
    /// exact zeros.
    pub fn grads_by_name(&self, grads: &Gradients) -> ParamSet {
        let mut out = self.params.zeros_like();
        for (name, &leaf) in &self.leaves {
            out.get_mut(name)
                .data_mut()
                .copy_from_slice(&grads.get(leaf, &self.graph));
        }
        out
    }

    fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        let rng = match &mut self.dropout_rng {
            Some(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let (m, n) = self.graph.dims(x);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.graph.mul_mask(x, &mask)
    }
}

fn layer_norm_affine(b: &mut GraphBuilder, x: NodeId, prefix: &str) -> Result<NodeId> {
    let normed = b.graph.layer_norm_rows(x)?;
    let g = b.param(&format!("{prefix}/ln_g"));
    let beta = b.param(&format!("{prefix}/ln_b"));
    let scaled = b.graph.mul_row(normed, g)?;
    b.graph.add_row(scaled, beta)
}

/// Multi-head attention sublayer. `kv` defaults to `q` (self-attention);
/// no causal mask anywhere.
fn attention(
    b: &mut GraphBuilder,
    cfg: &ModelConfig,
    q_in: NodeId,
    kv_in: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let d = cfg.hidden;
    let dh = d / cfg.heads;
    let wq = b.param(&format!("{prefix}/wq"));
    let wk = b.param(&format!("{prefix}/wk"));
    let wv = b.param(&format!("{prefix}/wv"));
    let wo = b.param(&format!("{prefix}/wo"));
    let q = b.graph.matmul(q_in, wq)?;
    let k = b.graph.matmul(kv_in, wk)?;
    let v = b.graph.matmul(kv_in, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = b.graph.slice_cols(q, h * dh, dh)?;
        let kh = b.graph.slice_cols(k, h * dh, dh)?;
        let vh = b.graph.slice_cols(v, h * dh, dh)?;
        let kht = b.graph.transpose(kh)?;
        let scores = b.graph.matmul(qh, kht)?;
        let scores = b.graph.scale(scores, scale)?;
        let att = b.graph.softmax_rows(scores)?;
        heads.push(b.graph.matmul(att, vh)?);
    }
    let ctx = b.graph.concat_cols(&heads)?;
    b.graph.matmul(ctx, wo)
}

fn ffn(b: &mut GraphBuilder, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w1 = b.param(&format!("{prefix}/w1"));
    let b1 = b.param(&format!("{prefix}/b1"));
    let w2 = b.param(&format!("{prefix}/w2"));
    let b2 = b.param(&format!("{prefix}/b2"));
    let h = b.graph.matmul(x, w1)?;
    let h = b.graph.add_row(h, b1)?;
    let h = b.graph.gelu(h)?;
    let h = b.graph.matmul(h, w2)?;
    b.graph.add_row(h, b2)
}

/// Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x)).
fn encoder_layer(b: &mut GraphBuilder, cfg: &ModelConfig, x: NodeId, i: usize) -> Result<NodeId> {
    let normed = layer_norm_affine(b, x, &format!("enc{i}/attn"))?;
    let att = attention(b, cfg, normed, normed, &format!("enc{i}/attn"))?;
    let att = b.dropout(att, cfg.dropout)?;
    let x = b.graph.add(x, att)?;
    let normed = layer_norm_affine(b, x, &format!("enc{i}/ffn"))?;
    let ff = ffn(b, &format!("enc{i}/ffn"), normed)?;
    let ff = b.dropout(ff, cfg.dropout)?;
    b.graph.add(x, ff)
}

/// History items are embedded as the sum of their L token embeddings
/// (tables shared with the decoder) plus a history positional embedding
/// anchored on recency: the most recent item gets index 0, so the model
/// addresses "the last item" identically for every history length, and
/// the encoding of a truncated history equals that of the bare suffix.
pub fn encode_history(
    b: &mut GraphBuilder,
    cfg: &ModelConfig,
    history: &[Sid],
) -> Result<NodeId> {
    if history.is_empty() {
        return Err(Error::InvalidArgument(
            "history must contain at least one interaction".into(),
        ));
    }
    let start = history.len().saturating_sub(cfg.max_history);
    let window = &history[start..];
    let t = window.len();

    let mut x = None;
    for l in 0..cfg.l {
        let indices: Vec<usize> = window
            .iter()
            .map(|sid| {
                debug_assert_eq!(sid.len(), cfg.l);
                sid.tokens()[l] as usize
            })
            .collect();
        let table = b.param(&format!("tok_emb/{l}"));
        let rows = b.graph.gather_rows(table, &indices)?;
        x = Some(match x {
            None => rows,
            Some(acc) => b.graph.add(acc, rows)?,
        });
    }
    let mut x = x.expect("L >= 2");
    let hist_pos = b.param("hist_pos");
    let recency: Vec<usize> = (0..t).map(|r| t - 1 - r).collect();
    let pos = b.graph.gather_rows(hist_pos, &recency)?;
    x = b.graph.add(x, pos)?;

    for i in 0..cfg.encoder_layers {
        x = encoder_layer(b, cfg, x, i)?;
    }
    layer_norm_affine(b, x, "enc_final")
}

/// Decoder input embedding: per-position token-or-MASK row, plus the
/// decoder positional embedding, plus the difficulty row D[k-1] added to
/// every position (skipped under the no-difficulty ablation).
pub fn embed_decoder_input(
    b: &mut GraphBuilder,
    cfg: &ModelConfig,
    masked: &MaskedSid,
    k: usize,
    use_difficulty: bool,
) -> Result<NodeId> {
    if masked.len() != cfg.l {
        return Err(Error::ShapeMismatch {
            op: "embed_decoder_input",
            expected: format!("{} positions", cfg.l),
            actual: format!("{}", masked.len()),
        });
    }
    if k < 1 || k > cfg.l {
        return Err(Error::InvalidArgument(format!(
            "difficulty index {k} out of range 1..={}",
            cfg.l
        )));
    }
    let mut rows = Vec::with_capacity(cfg.l);
    for l in 0..cfg.l {
        let idx = match masked.slot(l) {
            Some(tok) => tok as usize,
            None => cfg.mask_token(l),
        };
        let table = b.param(&format!("tok_emb/{l}"));
        rows.push(b.graph.gather_rows(table, &[idx])?);
    }
    let mut x = b.graph.concat_rows(&rows)?;
    let dec_pos = b.param("dec_pos");
    x = b.graph.add(x, dec_pos)?;
    if use_difficulty {
        let table = b.param("difficulty");
        let row = b.graph.gather_rows(table, &[k - 1])?;
        x = b.graph.add_row(x, row)?;
    }
    Ok(x)
}

/// Full denoiser forward: per-position logits over each sub-vocabulary.
pub fn denoise_forward(
    b: &mut GraphBuilder,
    cfg: &ModelConfig,
    masked: &MaskedSid,
    memory: NodeId,
    k: usize,
    use_difficulty: bool,
) -> Result<Vec<NodeId>> {
    let mut x = embed_decoder_input(b, cfg, masked, k, use_difficulty)?;
    for i in 0..cfg.decoder_layers {
        let normed = layer_norm_affine(b, x, &format!("dec{i}/self"))?;
        let att = attention(b, cfg, normed, normed, &format!("dec{i}/self"))?;
        let att = b.dropout(att, cfg.dropout)?;
        x = b.graph.add(x, att)?;

        let normed = layer_norm_affine(b, x, &format!("dec{i}/cross"))?;
        let att = attention(b, cfg, normed, memory, &format!("dec{i}/cross"))?;
        let att = b.dropout(att, cfg.dropout)?;
        x = b.graph.add(x, att)?;

        let normed = layer_norm_affine(b, x, &format!("dec{i}/ffn"))?;
        let ff = ffn(b, &format!("dec{i}/ffn"), normed)?;
        let ff = b.dropout(ff, cfg.dropout)?;
        x = b.graph.add(x, ff)?;
    }
    x = layer_norm_affine(b, x, "dec_final")?;

    let mut logits = Vec::with_capacity(cfg.l);
    for l in 0..cfg.l {
        let row = b.graph.slice_rows(x, l, 1)?;
        let w = b.param(&format!("head/{l}"));
        let bias = b.param(&format!("head_b/{l}"));
        let out = b.graph.matmul(row, w)?;
        logits.push(b.graph.add_row(out, bias)?);
    }
    Ok(logits)
}

/// Log-probabilities from a logits row (softmax over the sub-vocabulary).
pub fn position_log_probs(logits: &[f64]) -> Vec<f64> {
    log_softmax_row(logits)
}

// ── tape-free forward (inference) ───────────────────────────────────────

/// Encoder output plus per-decoder-layer cross-attention K/V projections,
/// computed once per user and shared read-only across beams and steps.
#[derive(Debug, Clone)]
pub struct HistoryEncoding {
    /// T' x d encoder output.
    pub memory: Vec<f64>,
    pub t_len: usize,
    /// Per decoder layer: (K, V), each T' x d.
    layer_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

fn ln_affine_rows(params: &ParamSet, prefix: &str, x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let g = params.get(&format!("{prefix}/ln_g"));
    let beta = params.get(&format!("{prefix}/ln_b"));
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        layer_norm_row(&x[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
    }
    for (i, o) in out.iter_mut().enumerate() {
        // Match the tape path: normalize, then mul_row, then add_row.
        *o = *o * g.data()[i % d] + beta.data()[i % d];
    }
    out
}

/// Attention with precomputed K/V. Mirrors the tape op order exactly.
fn attention_with_kv(
    cfg: &ModelConfig,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    wo: &Tensor,
    q_rows: usize,
    kv_rows: usize,
) -> Vec<f64> {
    let d = cfg.hidden;
    let dh = d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; q_rows * d];
    for h in 0..cfg.heads {
        let off = h * dh;
        // scores[i][j] = sum_p q[i][off+p] * k[j][off+p], scaled.
        let mut scores = vec![0.0; q_rows * kv_rows];
        for i in 0..q_rows {
            for j in 0..kv_rows {
                let mut acc = 0.0;
                for p in 0..dh {
                    acc += q[i * d + off + p] * k[j * d + off + p];
                }
                scores[i * kv_rows + j] = acc * scale;
            }
        }
        for i in 0..q_rows {
            softmax_row_in_place(&mut scores[i * kv_rows..(i + 1) * kv_rows]);
        }
        for i in 0..q_rows {
            for j in 0..kv_rows {
                let a = scores[i * kv_rows + j];
                if a == 0.0 {
                    continue;
                }
                for p in 0..dh {
                    ctx[i * d + off + p] += a * v[j * d + off + p];
                }
            }
        }
    }
    matmul(&ctx, wo.data(), q_rows, d, d)
}

fn ffn_rows(params: &ParamSet, prefix: &str, x: &[f64], rows: usize, d: usize, f: usize) -> Vec<f64> {
    let w1 = params.get(&format!("{prefix}/w1"));
    let b1 = params.get(&format!("{prefix}/b1"));
    let w2 = params.get(&format!("{prefix}/w2"));
    let b2 = params.get(&format!("{prefix}/b2"));
    let mut h = matmul(x, w1.data(), rows, d, f);
    for (i, v) in h.iter_mut().enumerate() {
        *v = gelu_scalar(*v + b1.data()[i % f]);
    }
    let mut out = matmul(&h, w2.data(), rows, f, d);
    for (i, v) in out.iter_mut().enumerate() {
        *v += b2.data()[i % d];
    }
    out
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Eval-mode history encoding without the tape, plus cached per-layer
/// cross-attention projections.
pub fn encode_history_infer(
    params: &ParamSet,
    cfg: &ModelConfig,
    history: &[Sid],
) -> Result<HistoryEncoding> {
    if history.is_empty() {
        return Err(Error::InvalidArgument(
            "history must contain at least one interaction".into(),
        ));
    }
    let d = cfg.hidden;
    let f = cfg.ffn_mult * d;
    let start = history.len().saturating_sub(cfg.max_history);
    let window = &history[start..];
    let t = window.len();

    let mut x = vec![0.0; t * d];
    for l in 0..cfg.l {
        let table = params.get(&format!("tok_emb/{l}"));
        for (r, sid) in window.iter().enumerate() {
            let tok = sid.tokens()[l] as usize;
            add_in_place(
                &mut x[r * d..(r + 1) * d],
                &table.data()[tok * d..(tok + 1) * d],
            );
        }
    }
    let hist_pos = params.get("hist_pos");
    for r in 0..t {
        let idx = t - 1 - r;
        add_in_place(
            &mut x[r * d..(r + 1) * d],
            &hist_pos.data()[idx * d..(idx + 1) * d],
        );
    }

    for i in 0..cfg.encoder_layers {
        let normed = ln_affine_rows(params, &format!("enc{i}/attn"), &x, t, d);
        let wq = params.get(&format!("enc{i}/attn/wq"));
        let wk = params.get(&format!("enc{i}/attn/wk"));
        let wv = params.get(&format!("enc{i}/attn/wv"));
        let wo = params.get(&format!("enc{i}/attn/wo"));
        let q = matmul(&normed, wq.data(), t, d, d);
        let k = matmul(&normed, wk.data(), t, d, d);
        let v = matmul(&normed, wv.data(), t, d, d);
        let att = attention_with_kv(cfg, &q, &k, &v, wo, t, t);
        add_in_place(&mut x, &att);
        let normed = ln_affine_rows(params, &format!("enc{i}/ffn"), &x, t, d);
        let ff = ffn_rows(params, &format!("enc{i}/ffn"), &normed, t, d, f);
        add_in_place(&mut x, &ff);
    }
    let memory = ln_affine_rows(params, "enc_final", &x, t, d);

    let layer_kv = (0..cfg.decoder_layers)
        .map(|i| {
            let wk = params.get(&format!("dec{i}/cross/wk"));
            let wv = params.get(&format!("dec{i}/cross/wv"));
            (
                matmul(&memory, wk.data(), t, d, d),
                matmul(&memory, wv.data(), t, d, d),
            )
        })
        .collect();

    Ok(HistoryEncoding {
        memory,
        t_len: t,
        layer_kv,
    })
}

/// Eval-mode denoiser forward without the tape: per-position logits.
pub fn denoise_logits(
    params: &ParamSet,
    cfg: &ModelConfig,
    masked: &MaskedSid,
    enc: &HistoryEncoding,
    k: usize,
    use_difficulty: bool,
) -> Result<Vec<Vec<f64>>> {
    if masked.len() != cfg.l {
        return Err(Error::ShapeMismatch {
            op: "denoise_logits",
            expected: format!("{} positions", cfg.l),
            actual: format!("{}", masked.len()),
        });
    }
    if k < 1 || k > cfg.l {
        return Err(Error::InvalidArgument(format!(
            "difficulty index {k} out of range 1..={}",
            cfg.l
        )));
    }
    let d = cfg.hidden;
    let f = cfg.ffn_mult * d;
    let l_len = cfg.l;
    let t = enc.t_len;

    let mut x = vec![0.0; l_len * d];
    for l in 0..l_len {
        let idx = match masked.slot(l) {
            Some(tok) => tok as usize,
            None => cfg.mask_token(l),
        };
        let table = params.get(&format!("tok_emb/{l}"));
        x[l * d..(l + 1) * d].copy_from_slice(&table.data()[idx * d..(idx + 1) * d]);
    }
    add_in_place(&mut x, params.get("dec_pos").data());
    if use_difficulty {
        let diff = params.get("difficulty");
        let row = &diff.data()[(k - 1) * d..k * d];
        for (i, v) in x.iter_mut().enumerate() {
            *v += row[i % d];
        }
    }

    for i in 0..cfg.decoder_layers {
        let normed = ln_affine_rows(params, &format!("dec{i}/self"), &x, l_len, d);
        let wq = params.get(&format!("dec{i}/self/wq"));
        let wk = params.get(&format!("dec{i}/self/wk"));
        let wv = params.get(&format!("dec{i}/self/wv"));
        let wo = params.get(&format!("dec{i}/self/wo"));
        let q = matmul(&normed, wq.data(), l_len, d, d);
        let kk = matmul(&normed, wk.data(), l_len, d, d);
        let v = matmul(&normed, wv.data(), l_len, d, d);
        let att = attention_with_kv(cfg, &q, &kk, &v, wo, l_len, l_len);
        add_in_place(&mut x, &att);

        let normed = ln_affine_rows(params, &format!("dec{i}/cross"), &x, l_len, d);
        let wq = params.get(&format!("dec{i}/cross/wq"));
        let wo = params.get(&format!("dec{i}/cross/wo"));
        let q = matmul(&normed, wq.data(), l_len, d, d);
        let (kc, vc) = &enc.layer_kv[i];
        let att = attention_with_kv(cfg, &q, kc, vc, wo, l_len, t);
        add_in_place(&mut x, &att);

        let normed = ln_affine_rows(params, &format!("dec{i}/ffn"), &x, l_len, d);
        let ff = ffn_rows(params, &format!("dec{i}/ffn"), &normed, l_len, d, f);
        add_in_place(&mut x, &ff);
    }
    let h = ln_affine_rows(params, "dec_final", &x, l_len, d);

    let mut logits = Vec::with_capacity(l_len);
    for l in 0..l_len {
        let w = params.get(&format!("head/{l}"));
        let bias = params.get(&format!("head_b/{l}"));
        let vl = cfg.vocab_sizes[l];
        let mut row = matmul(&h[l * d..(l + 1) * d], w.data(), 1, d, vl);
        for (j, v) in row.iter_mut().enumerate() {
            *v += bias.data()[j];
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("denoise_logits head {l}"),
            });
        }
        logits.push(row);
    }
    Ok(logits)
}
