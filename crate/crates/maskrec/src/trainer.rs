//! Masked-denoising training: noise construction, the masked
//! cross-entropy objective, Adam updates, and checkpoint files.
//!
//! Loss normalization defaults to per-sample sum over masked positions,
//! averaged over the batch, which weights heavily-masked samples higher;
//! per-token mean is available behind [`LossNorm`].

use std::io::{Read, Write};
use std::path::Path;

use crate::codebook::Sid;
use crate::data::TrainPair;
use crate::error::{Error, Result};
use crate::model::{denoise_forward, encode_history, GraphBuilder, ModelConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamSet, Rng};
use crate::schedule::{
    apply_mask, history_token_frequencies, mask_position_distribution, sample_mask_count,
    sample_mask_positions, CurriculumConfig, MaskedSid,
};

#[derive(Debug, Clone, Copy, Default)]
pub struct AblationFlags {
    /// Mask count drawn uniform over 1..=L instead of the curriculum.
    pub random_quantity: bool,
    /// Mask positions drawn uniformly instead of history-aware.
    pub random_positions: bool,
    /// Both of the above: plain uniform masking.
    pub vanilla_mask: bool,
    /// Drop the difficulty embedding from the decoder input.
    pub no_difficulty_vector: bool,
}

impl AblationFlags {
    pub fn uniform_count(&self) -> bool {
        self.random_quantity || self.vanilla_mask
    }

    pub fn uniform_positions(&self) -> bool {
        self.random_positions || self.vanilla_mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Sum over masked positions per sample, mean over the batch.
    PerSampleSum,
    /// Mean over every masked position in the batch.
    PerTokenMean,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Steps to run in this invocation.
    pub total_steps: u64,
    pub curriculum: CurriculumConfig,
    pub adam: AdamConfig,
    /// History-aware masking epsilon.
    pub epsilon: f64,
    /// Steps between validation evaluations; 0 disables.
    pub eval_interval: u64,
    pub seed: u64,
    pub loss_norm: LossNorm,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps: 2000,
            curriculum: CurriculumConfig::default(),
            adam: AdamConfig::default(),
            epsilon: crate::schedule::DEFAULT_EPSILON,
            eval_interval: 0,
            seed: 0,
            loss_norm: LossNorm::PerSampleSum,
            ablation: AblationFlags::default(),
        }
    }
}

/// Sample a mask position set for one training example, honoring the
/// ablation flags. The count comes from the curriculum (or uniform), the
/// positions from history-aware weighting (or uniform).
pub fn draw_noise(
    rng: &mut Rng,
    step: u64,
    cfg: &TrainConfig,
    l: usize,
    target: &Sid,
    history: &[Sid],
) -> Result<Vec<usize>> {
    let k = if cfg.ablation.uniform_count() {
        1 + rng.next_below(l as u64) as usize
    } else {
        sample_mask_count(rng, step, &cfg.curriculum, l)?
    };
    let p_pos = if cfg.ablation.uniform_positions() {
        vec![1.0 / l as f64; l]
    } else {
        let f = history_token_frequencies(target, history)?;
        mask_position_distribution(&f, cfg.epsilon)?
    };
    sample_mask_positions(rng, &p_pos, k)
}

/// One training sample with its SIDs resolved.
#[derive(Debug, Clone)]
pub struct SidPair {
    pub history: Vec<Sid>,
    pub target: Sid,
}

impl SidPair {
    pub fn from_pair(pair: &TrainPair, item_sids: &[Sid]) -> Self {
        SidPair {
            history: pair.history.iter().map(|&i| item_sids[i].clone()).collect(),
            target: item_sids[pair.target].clone(),
        }
    }
}

/// One optimizer step over a batch: sample noise, run the denoiser,
/// apply masked cross-entropy, update parameters with Adam.
pub fn training_step(
    batch: &[SidPair],
    step: u64,
    params: &mut ParamSet,
    opt: &mut AdamState,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    noise_rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let l = model_cfg.l;
    let dropout_rng = Rng::new(cfg.seed).derive_index("train/dropout", step);
    let mut builder = GraphBuilder::train_mode(params, dropout_rng);
    let mut sample_losses = Vec::with_capacity(batch.len());
    let mut token_losses = Vec::new();

    for pair in batch {
        if pair.history.is_empty() {
            return Err(Error::InvalidArgument(
                "training sample with empty history".into(),
            ));
        }
        let mask = draw_noise(noise_rng, step, cfg, l, &pair.target, &pair.history)?;
        let masked: MaskedSid = apply_mask(&pair.target, &mask);
        let k = masked.mask_count();

        let memory = encode_history(&mut builder, model_cfg, &pair.history)?;
        let logits = denoise_forward(
            &mut builder,
            model_cfg,
            &masked,
            memory,
            k,
            !cfg.ablation.no_difficulty_vector,
        )?;
        let mut sample_loss = None;
        for &pos in &mask {
            let ce = builder
                .graph
                .cross_entropy(logits[pos], pair.target.tokens()[pos] as usize)?;
            token_losses.push(ce);
            sample_loss = Some(match sample_loss {
                None => ce,
                Some(acc) => builder.graph.add(acc, ce)?,
            });
        }
        sample_losses.push(sample_loss.expect("k >= 1 masked positions"));
    }

    let loss_node = match cfg.loss_norm {
        LossNorm::PerSampleSum => {
            let mut acc = sample_losses[0];
            for &s in &sample_losses[1..] {
                acc = builder.graph.add(acc, s)?;
            }
            builder.graph.scale(acc, 1.0 / batch.len() as f64)?
        }
        LossNorm::PerTokenMean => {
            let mut acc = token_losses[0];
            for &t in &token_losses[1..] {
                acc = builder.graph.add(acc, t)?;
            }
            builder.graph.scale(acc, 1.0 / token_losses.len() as f64)?
        }
    };
    let loss = builder.graph.value(loss_node)[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: format!("training loss at step {step}"),
        });
    }

    let grads = builder.graph.backward(loss_node)?;
    let grads = builder.grads_by_name(&grads);
    adam_step(params, &grads, opt, &cfg.adam)?;
    Ok(loss)
}

/// One JSONL metrics line.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsLine {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

/// Run the training loop from `start_step` for `cfg.total_steps` steps.
/// `eval_hook` runs at eval intervals over read-only parameters; whatever
/// it returns lands in the metrics log.
pub fn train_loop<F>(
    pairs: &mut dyn FnMut() -> Vec<TrainPair>,
    item_sids: &[Sid],
    params: &mut ParamSet,
    opt: &mut AdamState,
    start_step: u64,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    metrics_out: Option<&mut dyn Write>,
    mut eval_hook: F,
) -> Result<Vec<MetricsLine>>
where
    F: FnMut(u64, &ParamSet) -> Result<Option<serde_json::Value>>,
{
    let mut lines = Vec::new();
    let mut sink = metrics_out;
    for i in 0..cfg.total_steps {
        let step = start_step + i;
        let batch: Vec<SidPair> = pairs()
            .iter()
            .map(|p| SidPair::from_pair(p, item_sids))
            .collect();
        let mut noise_rng = Rng::new(cfg.seed).derive_index("train/noise", step);
        let loss = training_step(&batch, step, params, opt, model_cfg, cfg, &mut noise_rng)?;

        let eval = if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
            eval_hook(step, params)?
        } else {
            None
        };
        let line = MetricsLine { step, loss, eval };
        if let Some(w) = sink.as_deref_mut() {
            let json = serde_json::to_string(&line)
                .map_err(|e| Error::InvalidArgument(format!("serialize metrics: {e}")))?;
            writeln!(w, "{json}")?;
        }
        lines.push(line);
    }
    Ok(lines)
}

// ── checkpoints ─────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"MDGR";
const VERSION: u32 = 1;

/// Binary checkpoint: magic, version, step counter, then length-prefixed
/// named arrays (params and Adam moments) as little-endian f32 payloads.
/// Parameters live on the f32 grid, so the round trip is bit-exact.
pub fn save_checkpoint(params: &ParamSet, opt: &AdamState, step: u64, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&step.to_le_bytes())?;
    out.write_all(&opt.t.to_le_bytes())?;
    let n_arrays = (params.len() * 3) as u32;
    out.write_all(&n_arrays.to_le_bytes())?;
    for (prefix, set) in [("param", params), ("adam_m", &opt.m), ("adam_v", &opt.v)] {
        for (name, t) in set.iter() {
            let full = format!("{prefix}/{name}");
            out.write_all(&(full.len() as u32).to_le_bytes())?;
            out.write_all(full.as_bytes())?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.to_f32_vec() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub opt: AdamState,
    pub step: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut file, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:02x?}, not a checkpoint file"
        )));
    }
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let step = read_u64(&mut file)?;
    let adam_t = read_u64(&mut file)?;
    let n_arrays = read_u32(&mut file)? as usize;

    let mut params = ParamSet::new();
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for _ in 0..n_arrays {
        let name_len = read_u32(&mut file)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut file, &mut name_bytes)?;
        let full = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let ndim = read_u32(&mut file)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut file)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 4];
            read_exact(&mut file, &mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        let tensor = crate::numerics::Tensor::from_f32(shape, &data)?;
        let (prefix, rest) = full
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("unprefixed array name {full:?}")))?;
        match prefix {
            "param" => params.insert(rest, tensor)?,
            "adam_m" => m.insert(rest, tensor)?,
            "adam_v" => v.insert(rest, tensor)?,
            other => return Err(Error::Checkpoint(format!("unknown array prefix {other:?}"))),
        }
    }
    if !params.same_layout(&m) || !params.same_layout(&v) {
        return Err(Error::Checkpoint(
            "optimizer moments do not match parameter layout".into(),
        ));
    }
    Ok(Checkpoint {
        params,
        opt: AdamState { t: adam_t, m, v },
        step,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
