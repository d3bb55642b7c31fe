//! Dataset ingestion, synthetic data generation, and batch iteration.
//!
//! File formats are line-oriented JSON:
//!
//! - items: `{"item_id": "...", "embedding": [...], "attrs": [...]?}`
//! - interactions: `{"user_id": "...", "items": ["...", ...], "ts": [...]?}`
//!   with items in chronological order (`ts`, when present, must be
//!   non-decreasing and is validated at load).

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone)]
pub struct ItemCatalog {
    ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    attrs: Vec<Option<Vec<u32>>>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl ItemCatalog {
    pub fn new() -> Self {
        ItemCatalog {
            ids: Vec::new(),
            embeddings: Vec::new(),
            attrs: Vec::new(),
            index: HashMap::new(),
            dim: 0,
        }
    }

    pub fn push(&mut self, id: String, embedding: Vec<f64>, attrs: Option<Vec<u32>>) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate item id {id:?}")));
        }
        if self.embeddings.is_empty() {
            self.dim = embedding.len();
        } else if embedding.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "ItemCatalog::push",
                expected: format!("embedding of dim {}", self.dim),
                actual: format!("{}", embedding.len()),
            });
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.embeddings.push(embedding);
        self.attrs.push(attrs);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn embedding(&self, idx: usize) -> &[f64] {
        &self.embeddings[idx]
    }

    pub fn attrs(&self, idx: usize) -> Option<&[u32]> {
        self.attrs[idx].as_deref()
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

impl Default for ItemCatalog {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    users: Vec<String>,
    /// Per user: catalog indices in chronological order.
    items: Vec<Vec<usize>>,
    /// Optional per-user timestamps (same length as items when present).
    ts: Vec<Option<Vec<u64>>>,
}

impl InteractionLog {
    pub fn new() -> Self {
        InteractionLog::default()
    }

    pub fn push(&mut self, user: String, items: Vec<usize>) {
        self.users.push(user);
        self.items.push(items);
        self.ts.push(None);
    }

    pub fn push_with_ts(&mut self, user: String, items: Vec<usize>, ts: Vec<u64>) {
        self.users.push(user);
        self.items.push(items);
        self.ts.push(Some(ts));
    }

    pub fn timestamps(&self, idx: usize) -> Option<&[u64]> {
        self.ts[idx].as_deref()
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, idx: usize) -> &str {
        &self.users[idx]
    }

    pub fn items(&self, idx: usize) -> &[usize] {
        &self.items[idx]
    }

    /// Drop users with fewer than `min` interactions.
    pub fn filter_min_interactions(&self, min: usize) -> InteractionLog {
        let mut out = InteractionLog::new();
        for u in 0..self.len() {
            if self.items[u].len() >= min {
                match &self.ts[u] {
                    Some(ts) => {
                        out.push_with_ts(self.users[u].clone(), self.items[u].clone(), ts.clone())
                    }
                    None => out.push(self.users[u].clone(), self.items[u].clone()),
                }
            }
        }
        out
    }
}

// ── file I/O ────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    item_id: String,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attrs: Option<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct InteractionRecord {
    user_id: String,
    items: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ts: Option<Vec<u64>>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_items(path: &Path) -> Result<ItemCatalog> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut catalog = ItemCatalog::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, lineno + 1, e.to_string()))?;
        if rec.embedding.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, lineno + 1, "non-finite embedding value"));
        }
        catalog
            .push(rec.item_id, rec.embedding, rec.attrs)
            .map_err(|e| parse_err(path, lineno + 1, e.to_string()))?;
    }
    Ok(catalog)
}

pub fn save_items(catalog: &ItemCatalog, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..catalog.len() {
        let rec = ItemRecord {
            item_id: catalog.id(i).to_string(),
            embedding: catalog.embedding(i).to_vec(),
            attrs: catalog.attrs(i).map(|a| a.to_vec()),
        };
        let json = serde_json::to_string(&rec)
            .map_err(|e| Error::InvalidArgument(format!("serialize item: {e}")))?;
        writeln!(out, "{json}")?;
    }
    Ok(())
}

pub fn load_interactions(path: &Path, catalog: &ItemCatalog) -> Result<InteractionLog> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut log = InteractionLog::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, lineno + 1, e.to_string()))?;
        if let Some(ts) = &rec.ts {
            if ts.len() != rec.items.len() {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("{} timestamps for {} items", ts.len(), rec.items.len()),
                ));
            }
            if ts.windows(2).any(|w| w[0] > w[1]) {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!(
                        "interactions for user {:?} are not in chronological order",
                        rec.user_id
                    ),
                ));
            }
        }
        let mut indices = Vec::with_capacity(rec.items.len());
        for id in &rec.items {
            match catalog.lookup(id) {
                Some(idx) => indices.push(idx),
                None => {
                    return Err(parse_err(
                        path,
                        lineno + 1,
                        format!("unknown item id {id:?}"),
                    ))
                }
            }
        }
        match rec.ts {
            Some(ts) => log.push_with_ts(rec.user_id, indices, ts),
            None => log.push(rec.user_id, indices),
        }
    }
    Ok(log)
}

pub fn save_interactions(log: &InteractionLog, catalog: &ItemCatalog, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in 0..log.len() {
        let rec = InteractionRecord {
            user_id: log.user(u).to_string(),
            items: log
                .items(u)
                .iter()
                .map(|&i| catalog.id(i).to_string())
                .collect(),
            ts: None,
        };
        let json = serde_json::to_string(&rec)
            .map_err(|e| Error::InvalidArgument(format!("serialize interactions: {e}")))?;
        writeln!(out, "{json}")?;
    }
    Ok(())
}

// ── synthetic data ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// Each user's next item is a fixed permutation of the last item's
    /// index; a table-lookup oracle gets Recall@1 = 1.
    DeterministicNext,
    /// Users hold fixed preferences on the first half of the attribute
    /// positions and cyclically rotating interests on the rest, so
    /// history token frequencies are strongly skewed: stable positions
    /// repeat the target's token in (nearly) every history item, rotating
    /// positions (almost) never do, yet stay predictable from the most
    /// recent item.
    Preference,
}

impl SynthMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deterministic-next" => Ok(SynthMode::DeterministicNext),
            "preference" => Ok(SynthMode::Preference),
            other => Err(Error::InvalidArgument(format!(
                "unknown synth mode {other:?} (expected deterministic-next or preference)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub vocab_per_attr: usize,
    pub dim_per_attr: usize,
    pub noise: f64,
    pub mode: SynthMode,
    pub min_len: usize,
    pub max_len: usize,
    /// Preference mode: rotating-position count (0 = half of n_attrs).
    pub rot_attrs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1000,
            n_items: 256,
            n_attrs: 4,
            vocab_per_attr: 16,
            dim_per_attr: 16,
            noise: 0.05,
            mode: SynthMode::DeterministicNext,
            min_len: 6,
            max_len: 12,
            rot_attrs: 0,
        }
    }
}

/// Items carry `n_attrs` latent attribute labels; the embedding is the
/// concatenation of per-attribute unit-norm anchor vectors plus small
/// noise, so per-subspace k-means recovers the labels.
pub fn generate_synthetic(cfg: &SynthConfig, rng: &Rng) -> Result<(ItemCatalog, InteractionLog)> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.n_attrs == 0 || cfg.vocab_per_attr < 2 {
        return Err(Error::InvalidArgument(
            "synthetic config requires positive sizes and vocab >= 2".into(),
        ));
    }
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::InvalidArgument(
            "synthetic config requires 2 <= min_len <= max_len".into(),
        ));
    }
    let tuple_space = (cfg.vocab_per_attr as f64).powi(cfg.n_attrs as i32);
    if (cfg.n_items as f64) > tuple_space {
        return Err(Error::InvalidArgument(format!(
            "{} items cannot take distinct tuples over {} attribute combinations",
            cfg.n_items, tuple_space
        )));
    }

    // Per-attribute, per-value anchor directions.
    let mut anchor_rng = rng.derive("synth/anchors");
    let mut anchors = Vec::with_capacity(cfg.n_attrs);
    for _ in 0..cfg.n_attrs {
        let mut per_value = Vec::with_capacity(cfg.vocab_per_attr);
        for _ in 0..cfg.vocab_per_attr {
            let mut v: Vec<f64> = (0..cfg.dim_per_attr)
                .map(|_| anchor_rng.next_gaussian())
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            per_value.push(v);
        }
        anchors.push(per_value);
    }

    let attr_table = assign_attributes(cfg)?;

    let id_width = format!("{}", cfg.n_items.saturating_sub(1)).len().max(4);
    let mut noise_rng = rng.derive("synth/noise");
    let mut catalog = ItemCatalog::new();
    for (i, attrs) in attr_table.iter().enumerate() {
        let mut emb = Vec::with_capacity(cfg.n_attrs * cfg.dim_per_attr);
        for (a, &val) in attrs.iter().enumerate() {
            for &x in &anchors[a][val as usize] {
                emb.push(x + cfg.noise * noise_rng.next_gaussian());
            }
        }
        // Snap to the f32 grid so save/load round-trips exactly.
        for v in &mut emb {
            *v = *v as f32 as f64;
        }
        catalog.push(format!("item_{i:0id_width$}"), emb, Some(attrs.clone()))?;
    }

    let log = match cfg.mode {
        SynthMode::DeterministicNext => deterministic_next_log(cfg, rng),
        SynthMode::Preference => preference_log(cfg, rng)?,
    };
    Ok((catalog, log))
}

fn assign_attributes(cfg: &SynthConfig) -> Result<Vec<Vec<u32>>> {
    match cfg.mode {
        SynthMode::DeterministicNext => {
            let vocab = cfg.vocab_per_attr as u64;
            // Attributes are a deterministic bijection of the item index:
            // the base-vocab digits of i fill the first positions, the
            // rest are linear mixes so every position's marginal covers
            // the whole vocabulary.
            let mut n_digits = 0usize;
            let mut cap = 1u64;
            while cap < cfg.n_items as u64 {
                cap = cap.saturating_mul(vocab);
                n_digits += 1;
            }
            let n_digits = n_digits.max(1);
            if n_digits > cfg.n_attrs {
                return Err(Error::InvalidArgument(format!(
                    "deterministic-next mode needs vocab^attrs >= n_items ({n_digits} digits > {} attrs)",
                    cfg.n_attrs
                )));
            }
            let mut table = Vec::with_capacity(cfg.n_items);
            for i in 0..cfg.n_items as u64 {
                let mut digits = vec![0u64; n_digits];
                let mut rest = i;
                for d in digits.iter_mut() {
                    *d = rest % vocab;
                    rest /= vocab;
                }
                let mut attrs = Vec::with_capacity(cfg.n_attrs);
                for j in 0..cfg.n_attrs {
                    if j < n_digits {
                        attrs.push(digits[j] as u32);
                    } else {
                        let mix: u64 = digits
                            .iter()
                            .enumerate()
                            .map(|(t, &d)| d * (j as u64 + 1).pow(t as u32))
                            .sum();
                        attrs.push(((mix + 3 * j as u64) % vocab) as u32);
                    }
                }
                table.push(attrs);
            }
            Ok(table)
        }
        SynthMode::Preference => {
            // Structured cross product: one stable tuple per vocabulary
            // value on the stable positions, times every combination of
            // the rotating positions, so any (stable, rotation) state
            // maps to a concrete item.
            let geo = PreferenceGeometry::from_config(cfg)?;
            let mut table = Vec::with_capacity(cfg.n_items);
            for i in 0..cfg.n_items {
                table.push(geo.attrs_of(i));
            }
            Ok(table)
        }
    }
}

/// Index arithmetic for the preference-mode catalog.
struct PreferenceGeometry {
    n_attrs: usize,
    n_stable: usize,
    vocab: usize,
}

impl PreferenceGeometry {
    fn from_config(cfg: &SynthConfig) -> Result<Self> {
        let n_rot = match cfg.rot_attrs {
            0 => cfg.n_attrs / 2,
            n => n,
        };
        if n_rot == 0 || n_rot >= cfg.n_attrs {
            return Err(Error::InvalidArgument(
                "preference mode needs 1 <= rotating positions < n_attrs".into(),
            ));
        }
        let n_stable = cfg.n_attrs - n_rot;
        let expected = cfg.vocab_per_attr * cfg.vocab_per_attr.pow(n_rot as u32);
        if cfg.n_items != expected {
            return Err(Error::InvalidArgument(format!(
                "preference mode needs n_items = vocab^(1 + rotating positions) = {expected}, \
                 got {}",
                cfg.n_items
            )));
        }
        Ok(PreferenceGeometry {
            n_attrs: cfg.n_attrs,
            n_stable,
            vocab: cfg.vocab_per_attr,
        })
    }

    /// Stable positions derive from one index s (position j holds a
    /// fixed mix of s); rotating positions are free digits.
    fn attrs_of(&self, item: usize) -> Vec<u32> {
        let n_rot = self.n_attrs - self.n_stable;
        let mut rest = item;
        let mut rot = vec![0usize; n_rot];
        for r in rot.iter_mut() {
            *r = rest % self.vocab;
            rest /= self.vocab;
        }
        let s = rest % self.vocab;
        let mut attrs = Vec::with_capacity(self.n_attrs);
        for j in 0..self.n_stable {
            attrs.push(((s * (2 * j + 1) + j) % self.vocab) as u32);
        }
        for r in rot {
            attrs.push(r as u32);
        }
        attrs
    }

    fn item_of(&self, s: usize, rot: &[usize]) -> usize {
        let mut idx = s;
        for &r in rot.iter().rev() {
            idx = idx * self.vocab + r;
        }
        idx
    }
}

/// Affine successor permutation over item indices: coprime multiplier, so
/// every item has a unique next item.
pub fn successor_permutation(n_items: usize) -> impl Fn(usize) -> usize {
    let mut a = 5u64;
    while gcd(a, n_items as u64) != 1 {
        a += 2;
    }
    let b = 17u64 % n_items as u64;
    move |i: usize| ((a * i as u64 + b) % n_items as u64) as usize
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn deterministic_next_log(cfg: &SynthConfig, rng: &Rng) -> InteractionLog {
    let next = successor_permutation(cfg.n_items);
    let mut user_rng = rng.derive("synth/users");
    let mut log = InteractionLog::new();
    let width = format!("{}", cfg.n_users.saturating_sub(1)).len().max(4);
    for u in 0..cfg.n_users {
        let len =
            cfg.min_len + user_rng.next_below((cfg.max_len - cfg.min_len + 1) as u64) as usize;
        let mut item = user_rng.next_below(cfg.n_items as u64) as usize;
        let mut seq = Vec::with_capacity(len);
        seq.push(item);
        for _ in 1..len {
            item = next(item);
            seq.push(item);
        }
        log.push(format!("user_{u:0width$}"), seq);
    }
    log
}

/// Stable preference index plus per-position cyclic walks on the
/// rotating positions (odd strides, so every walk cycles through the
/// whole vocabulary). A small fraction of non-final items is replaced by
/// uniform noise.
fn preference_log(cfg: &SynthConfig, rng: &Rng) -> Result<InteractionLog> {
    let geo = PreferenceGeometry::from_config(cfg)?;
    let n_rot = cfg.n_attrs - geo.n_stable;
    let v = cfg.vocab_per_attr;
    let mut user_rng = rng.derive("synth/users");
    let mut log = InteractionLog::new();
    let width = format!("{}", cfg.n_users.saturating_sub(1)).len().max(4);
    for u in 0..cfg.n_users {
        let s = user_rng.next_below(v as u64) as usize;
        let starts: Vec<usize> = (0..n_rot)
            .map(|_| user_rng.next_below(v as u64) as usize)
            .collect();
        let len =
            cfg.min_len + user_rng.next_below((cfg.max_len - cfg.min_len + 1) as u64) as usize;
        let mut seq = Vec::with_capacity(len);
        for t in 0..len {
            let rot: Vec<usize> = starts
                .iter()
                .enumerate()
                .map(|(r, &v0)| (v0 + t * (2 * r + 1)) % v)
                .collect();
            let mut item = geo.item_of(s, &rot);
            // 10% noise on non-final items keeps the task from being a
            // pure lookup without touching the evaluation target.
            if t + 1 < len && user_rng.next_f64() < 0.1 {
                item = user_rng.next_below(cfg.n_items as u64) as usize;
            }
            seq.push(item);
        }
        log.push(format!("user_{u:0width$}"), seq);
    }
    Ok(log)
}

// ── batch iteration ─────────────────────────────────────────────────────

/// One training example: a nonempty history prefix and the next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Sliding-window (prefix, next-item) pairs, shuffled per epoch. Every
/// pair is emitted exactly once per epoch; histories keep the most recent
/// `window - 1` items.
pub struct BatchIterator<'a> {
    log: &'a InteractionLog,
    window: usize,
    batch_size: usize,
    rng: Rng,
    epoch: u64,
    order: Vec<(usize, usize)>,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        log: &'a InteractionLog,
        window: usize,
        batch_size: usize,
        rng: Rng,
    ) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidArgument("window must be >= 2".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let mut it = BatchIterator {
            log,
            window,
            batch_size,
            rng,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        it.start_epoch();
        Ok(it)
    }

    pub fn pairs_per_epoch(&self) -> usize {
        (0..self.log.len())
            .map(|u| self.log.items(u).len().saturating_sub(1))
            .sum()
    }

    fn start_epoch(&mut self) {
        self.order.clear();
        for u in 0..self.log.len() {
            for t in 1..self.log.items(u).len() {
                self.order.push((u, t));
            }
        }
        let mut epoch_rng = self.rng.derive_index("epoch", self.epoch);
        epoch_rng.shuffle(&mut self.order);
        self.cursor = 0;
        self.epoch += 1;
    }

    fn pair_at(&self, u: usize, t: usize) -> TrainPair {
        let items = self.log.items(u);
        let start = t.saturating_sub(self.window - 1);
        TrainPair {
            user: u,
            history: items[start..t].to_vec(),
            target: items[t],
        }
    }

    /// Next batch, reshuffling into a new epoch when exhausted.
    pub fn next_batch(&mut self) -> Vec<TrainPair> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.cursor >= self.order.len() {
                self.start_epoch();
                if self.order.is_empty() {
                    return batch;
                }
            }
            let (u, t) = self.order[self.cursor];
            self.cursor += 1;
            batch.push(self.pair_at(u, t));
        }
        batch
    }

    /// All pairs of the current epoch in order, then advances the epoch.
    pub fn next_epoch(&mut self) -> Vec<TrainPair> {
        let pairs: Vec<TrainPair> = self
            .order
            .iter()
            .map(|&(u, t)| self.pair_at(u, t))
            .collect();
        self.start_epoch();
        pairs
    }
}
