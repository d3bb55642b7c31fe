//! Parallel semantic-ID codebooks.
//!
//! An item embedding is rotated by a fixed orthonormal matrix, sliced
//! into `L` contiguous subspaces, and each slice is assigned to its
//! nearest codeword in that subspace's codebook. The resulting length-L
//! token tuple is the item's semantic ID (SID). The inverse index maps a
//! SID back to the items quantized to it, ordered by reconstruction
//! distance then item id.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::data::ItemCatalog;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// The discrete identity of an item: one token per sub-codebook.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sid(pub Vec<u32>);

impl Sid {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    /// Seeded random orthonormal rotation.
    Random,
    /// Identity rotation: subspaces align with raw embedding dimensions.
    Identity,
}

impl RotationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(RotationMode::Random),
            "identity" => Ok(RotationMode::Identity),
            other => Err(Error::Config(format!(
                "unknown rotation mode {other:?} (expected random or identity)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodebookConfig {
    pub l: usize,
    pub vocab_size: usize,
    pub kmeans_iters: usize,
    /// Independent k-means runs per subspace; the lowest-distortion fit
    /// wins.
    pub kmeans_attempts: usize,
    pub rotation: RotationMode,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            l: 4,
            vocab_size: 32,
            kmeans_iters: 25,
            kmeans_attempts: 4,
            rotation: RotationMode::Random,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodebookSet {
    /// d x d orthonormal rotation applied before slicing.
    rotation: Tensor,
    /// Per-subspace widths; they sum to d (last takes the remainder).
    sub_dims: Vec<usize>,
    /// Per-subspace codebooks, each `vocab_sizes[l] x sub_dims[l]`.
    codebooks: Vec<Tensor>,
}

impl CodebookSet {
    pub fn l(&self) -> usize {
        self.codebooks.len()
    }

    pub fn dim(&self) -> usize {
        self.rotation.rows()
    }

    pub fn sub_dims(&self) -> &[usize] {
        &self.sub_dims
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.codebooks.iter().map(|c| c.rows()).collect()
    }

    pub fn rotation(&self) -> &Tensor {
        &self.rotation
    }

    pub fn codebook(&self, l: usize) -> &Tensor {
        &self.codebooks[l]
    }

    /// Fit codebooks on item embeddings: fixed rotation, contiguous
    /// slicing, then independent k-means per subspace.
    pub fn fit(
        embeddings: &[&[f64]],
        dim: usize,
        cfg: &CodebookConfig,
        rng: &Rng,
    ) -> Result<CodebookSet> {
        if cfg.l < 1 || dim < cfg.l {
            return Err(Error::InvalidArgument(format!(
                "need dim >= L >= 1, got dim = {dim}, L = {}",
                cfg.l
            )));
        }
        if cfg.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab size must be >= 2".into()));
        }
        let rotation = fit_rotation(dim, cfg.rotation, &rng.derive("codebook/rotation"))?;
        let sub_dims = split_dims(dim, cfg.l);

        let mut codebooks = Vec::with_capacity(cfg.l);
        let mut offset = 0;
        for (l, &dl) in sub_dims.iter().enumerate() {
            let points: Vec<Vec<f64>> = embeddings
                .iter()
                .map(|e| {
                    let rotated = apply_rotation(&rotation, e);
                    rotated[offset..offset + dl].to_vec()
                })
                .collect();
            let point_refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
            let attempts = cfg.kmeans_attempts.max(1);
            let mut best: Option<KmeansFit> = None;
            for attempt in 0..attempts {
                let mut run_rng =
                    rng.derive_index("codebook/kmeans", (l * attempts + attempt) as u64);
                let fit = kmeans_fit(&point_refs, cfg.vocab_size, cfg.kmeans_iters, &mut run_rng)?;
                let better = match &best {
                    None => true,
                    Some(b) => {
                        fit.distortion_per_iter.last() < b.distortion_per_iter.last()
                    }
                };
                if better {
                    best = Some(fit);
                }
            }
            codebooks.push(best.expect("attempts >= 1").centroids);
            offset += dl;
        }
        Ok(CodebookSet {
            rotation,
            sub_dims,
            codebooks,
        })
    }

    /// Rotate and slice an embedding into its L sub-vectors.
    pub fn split_subspaces(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::ShapeMismatch {
                op: "split_subspaces",
                expected: format!("{d}"),
                actual: format!("{}", x.len()),
            });
        }
        let rotated = apply_rotation(&self.rotation, x);
        let mut out = Vec::with_capacity(self.sub_dims.len());
        let mut offset = 0;
        for &dl in &self.sub_dims {
            out.push(rotated[offset..offset + dl].to_vec());
            offset += dl;
        }
        Ok(out)
    }

    /// Nearest codeword per subspace; squared-distance ties break to the
    /// lowest codeword index.
    pub fn quantize(&self, x: &[f64]) -> Result<Sid> {
        let subs = self.split_subspaces(x)?;
        let mut tokens = Vec::with_capacity(subs.len());
        for (l, sub) in subs.iter().enumerate() {
            tokens.push(nearest_codeword(&self.codebooks[l], sub) as u32);
        }
        Ok(Sid(tokens))
    }

    /// Concatenated codewords rotated back to the embedding space.
    pub fn reconstruct(&self, sid: &Sid) -> Result<Vec<f64>> {
        if sid.len() != self.l() {
            return Err(Error::ShapeMismatch {
                op: "reconstruct",
                expected: format!("{} tokens", self.l()),
                actual: format!("{}", sid.len()),
            });
        }
        let mut rotated = Vec::with_capacity(self.dim());
        for (l, &tok) in sid.tokens().iter().enumerate() {
            let cb = &self.codebooks[l];
            if tok as usize >= cb.rows() {
                return Err(Error::InvalidArgument(format!(
                    "token {tok} out of range for sub-codebook {l} with {} codewords",
                    cb.rows()
                )));
            }
            let dl = self.sub_dims[l];
            let row = &cb.data()[tok as usize * dl..(tok as usize + 1) * dl];
            rotated.extend_from_slice(row);
        }
        // rotation is orthonormal: the inverse is its transpose.
        let d = self.dim();
        let r = self.rotation.data();
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, rv) in rotated.iter().enumerate() {
                acc += r[j * d + i] * rv;
            }
            *o = acc;
        }
        Ok(out)
    }

    /// Squared reconstruction distance between an embedding and a SID.
    pub fn reconstruction_distance(&self, x: &[f64], sid: &Sid) -> Result<f64> {
        let subs = self.split_subspaces(x)?;
        let mut total = 0.0;
        for (l, sub) in subs.iter().enumerate() {
            let dl = self.sub_dims[l];
            let tok = sid.tokens()[l] as usize;
            let row = &self.codebooks[l].data()[tok * dl..(tok + 1) * dl];
            total += sub
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }

    // ── artifact file ───────────────────────────────────────────────────

    /// Write the codebook artifact: one JSON document with floats printed
    /// to 9 significant digits (exact for f32-grid values).
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "{{\"version\":1,\"L\":{},\"sub_dims\":[", self.l())?;
        write_usizes(&mut out, &self.sub_dims)?;
        write!(out, "],\"vocab_sizes\":[")?;
        write_usizes(&mut out, &self.vocab_sizes())?;
        write!(out, "],\"rotation\":[")?;
        write_floats(&mut out, self.rotation.data())?;
        write!(out, "],\"codebooks\":[")?;
        for (l, cb) in self.codebooks.iter().enumerate() {
            if l > 0 {
                write!(out, ",")?;
            }
            write!(out, "[")?;
            write_floats(&mut out, cb.data())?;
            write!(out, "]")?;
        }
        writeln!(out, "]}}")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<CodebookSet> {
        let text = std::fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: e.to_string(),
            })?;
        let bad = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: msg.to_string(),
        };
        let version = v["version"].as_u64().ok_or_else(|| bad("missing version"))?;
        if version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported codebook version {version}"
            )));
        }
        let l = v["L"].as_u64().ok_or_else(|| bad("missing L"))? as usize;
        let sub_dims: Vec<usize> = as_usize_vec(&v["sub_dims"]).ok_or_else(|| bad("bad sub_dims"))?;
        let vocab_sizes: Vec<usize> =
            as_usize_vec(&v["vocab_sizes"]).ok_or_else(|| bad("bad vocab_sizes"))?;
        if sub_dims.len() != l || vocab_sizes.len() != l {
            return Err(bad("sub_dims/vocab_sizes length inconsistent with L"));
        }
        let d: usize = sub_dims.iter().sum();
        let rot: Vec<f64> = as_f64_vec(&v["rotation"]).ok_or_else(|| bad("bad rotation"))?;
        // Artifact floats live on the f32 grid; 9 significant decimal
        // digits identify an f32 uniquely, so snapping after parse
        // recovers the stored values exactly.
        let mut rotation = Tensor::new(vec![d, d], rot)?;
        rotation.quantize_f32();
        let cbs = v["codebooks"].as_array().ok_or_else(|| bad("bad codebooks"))?;
        if cbs.len() != l {
            return Err(bad("codebook count inconsistent with L"));
        }
        let mut codebooks = Vec::with_capacity(l);
        for (i, cb) in cbs.iter().enumerate() {
            let vals = as_f64_vec(cb).ok_or_else(|| bad("bad codebook entries"))?;
            let mut t = Tensor::new(vec![vocab_sizes[i], sub_dims[i]], vals)?;
            t.quantize_f32();
            codebooks.push(t);
        }
        Ok(CodebookSet {
            rotation,
            sub_dims,
            codebooks,
        })
    }
}

fn write_usizes<W: Write>(out: &mut W, vals: &[usize]) -> std::io::Result<()> {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            write!(out, ",")?;
        }
        write!(out, "{v}")?;
    }
    Ok(())
}

fn write_floats<W: Write>(out: &mut W, vals: &[f64]) -> std::io::Result<()> {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            write!(out, ",")?;
        }
        write!(out, "{v:.8e}")?;
    }
    Ok(())
}

fn as_usize_vec(v: &serde_json::Value) -> Option<Vec<usize>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_u64().map(|u| u as usize))
        .collect()
}

fn as_f64_vec(v: &serde_json::Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(|x| x.as_f64()).collect()
}

/// Equal-width contiguous slices; the last takes any remainder.
fn split_dims(dim: usize, l: usize) -> Vec<usize> {
    let base = dim / l;
    let mut dims = vec![base; l];
    dims[l - 1] += dim - base * l;
    dims
}

fn apply_rotation(rotation: &Tensor, x: &[f64]) -> Vec<f64> {
    let d = rotation.rows();
    let r = rotation.data();
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, xv) in x.iter().enumerate() {
            acc += r[i * d + j] * xv;
        }
        *o = acc;
    }
    out
}

/// Fixed orthonormal rotation: modified Gram-Schmidt on a seeded Gaussian
/// matrix (identity when requested). Values land on the f32 grid so the
/// artifact file round-trips exactly.
pub fn fit_rotation(dim: usize, mode: RotationMode, rng: &Rng) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::InvalidArgument("rotation of dim 0".into()));
    }
    let mut t = match mode {
        RotationMode::Identity => {
            let mut m = Tensor::zeros(vec![dim, dim]);
            for i in 0..dim {
                m.data_mut()[i * dim + i] = 1.0;
            }
            m
        }
        RotationMode::Random => {
            let mut r = rng.clone();
            // Rows of a Gaussian matrix, orthogonalized in order.
            let mut rows: Vec<Vec<f64>> = (0..dim)
                .map(|_| (0..dim).map(|_| r.next_gaussian()).collect())
                .collect();
            for i in 0..dim {
                for j in 0..i {
                    let prev = rows[j].clone();
                    let dot: f64 = rows[i].iter().zip(&prev).map(|(a, b)| a * b).sum();
                    for (a, b) in rows[i].iter_mut().zip(&prev) {
                        *a -= dot * b;
                    }
                }
                let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-10 {
                    return Err(Error::NonFinite {
                        op: "fit_rotation: degenerate Gram-Schmidt".into(),
                    });
                }
                // Sign convention: leading nonzero entry positive.
                let sign = if rows[i][i] < 0.0 { -1.0 } else { 1.0 };
                for v in &mut rows[i] {
                    *v = sign * *v / norm;
                }
            }
            let data: Vec<f64> = rows.into_iter().flatten().collect();
            Tensor::new(vec![dim, dim], data)?
        }
    };
    t.quantize_f32();
    Ok(t)
}

fn nearest_codeword(codebook: &Tensor, x: &[f64]) -> usize {
    let k = codebook.rows();
    let dl = codebook.cols();
    let data = codebook.data();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for j in 0..k {
        let row = &data[j * dl..(j + 1) * dl];
        let dist: f64 = x.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = j;
        }
    }
    best
}

// ── k-means ─────────────────────────────────────────────────────────────

pub struct KmeansFit {
    /// K x d_l centroid matrix, f32-grid values.
    pub centroids: Tensor,
    /// Within-cluster sum of squared distances after each iteration.
    pub distortion_per_iter: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are reseeded
/// to the point farthest from its assigned centroid.
pub fn kmeans_fit(points: &[&[f64]], k: usize, iters: usize, rng: &mut Rng) -> Result<KmeansFit> {
    let n = points.len();
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k = {k} points, got {n}"
        )));
    }
    if k == 0 || iters == 0 {
        return Err(Error::InvalidArgument(
            "k-means needs k >= 1 and iters >= 1".into(),
        ));
    }
    let dim = points[0].len();

    // Farthest-point seeding: random first centroid, then repeatedly the
    // point farthest from every chosen centroid (ties to the lowest
    // index). One seed lands in each well-separated cluster.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.next_below(n as u64) as usize].to_vec());
    let mut min_dist: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let next = min_dist
            .iter()
            .enumerate()
            .max_by(|(ai, av), (bi, bv)| av.partial_cmp(bv).unwrap().then(bi.cmp(ai)))
            .map(|(i, _)| i)
            .expect("nonempty point set");
        centroids.push(points[next].to_vec());
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut distortion_per_iter = Vec::with_capacity(iters);
    for _ in 0..iters {
        // Assign step (ties to the lowest centroid index).
        let mut distortion = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
            distortion += best_d;
        }
        distortion_per_iter.push(distortion);

        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(*p) {
                *s += v;
            }
        }
        let mut reseed_used = std::collections::HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            } else {
                // Reseed to the point farthest from its assigned centroid
                // (skipping points already used for another reseed).
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !reseed_used.contains(i))
                    .max_by(|(i, p), (j, q)| {
                        let di = sq_dist(p, &centroids[assignment[*i]]);
                        let dj = sq_dist(q, &centroids[assignment[*j]]);
                        di.partial_cmp(&dj).unwrap().then(j.cmp(i))
                    })
                    .map(|(i, _)| i)
                    .expect("nonempty point set");
                reseed_used.insert(far);
                centroids[c] = points[far].to_vec();
            }
        }
    }

    let mut t = Tensor::new(vec![k, dim], centroids.into_iter().flatten().collect())?;
    t.quantize_f32();
    Ok(KmeansFit {
        centroids: t,
        distortion_per_iter,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ── inverse index ───────────────────────────────────────────────────────

/// SID → items quantized to it. Within a bucket, items are ordered by
/// ascending reconstruction distance, then ascending item id.
#[derive(Debug, Clone)]
pub struct InverseIndex {
    map: HashMap<Sid, Vec<usize>>,
    total_items: usize,
}

impl InverseIndex {
    pub fn build(catalog: &ItemCatalog, codebooks: &CodebookSet) -> Result<InverseIndex> {
        if catalog.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot build an inverse index over an empty catalog".into(),
            ));
        }
        let mut map: HashMap<Sid, Vec<(f64, usize)>> = HashMap::new();
        for i in 0..catalog.len() {
            let sid = codebooks.quantize(catalog.embedding(i))?;
            let dist = codebooks.reconstruction_distance(catalog.embedding(i), &sid)?;
            map.entry(sid).or_default().push((dist, i));
        }
        let mut out = HashMap::with_capacity(map.len());
        for (sid, mut bucket) in map {
            bucket.sort_by(|(da, ia), (db, ib)| {
                da.partial_cmp(db)
                    .unwrap()
                    .then_with(|| catalog.id(*ia).cmp(catalog.id(*ib)))
            });
            out.insert(sid, bucket.into_iter().map(|(_, i)| i).collect());
        }
        Ok(InverseIndex {
            map: out,
            total_items: catalog.len(),
        })
    }

    /// Items for a SID; unseen SIDs yield an empty slice.
    pub fn lookup(&self, sid: &Sid) -> &[usize] {
        self.map.get(sid).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn distinct_sids(&self) -> usize {
        self.map.len()
    }

    pub fn total_items(&self) -> usize {
        self.total_items
    }

    pub fn collision_stats(&self) -> CollisionStats {
        let distinct = self.map.len();
        let max_bucket = self.map.values().map(|v| v.len()).max().unwrap_or(0);
        let mean_bucket = if distinct == 0 {
            0.0
        } else {
            self.total_items as f64 / distinct as f64
        };
        CollisionStats {
            total_items: self.total_items,
            distinct_sids: distinct,
            max_bucket,
            mean_bucket,
            collision_rate: 1.0 - distinct as f64 / self.total_items as f64,
        }
    }

    /// Partition check: every catalog item appears in exactly one bucket.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.total_items];
        for bucket in self.map.values() {
            for &i in bucket {
                if i >= self.total_items || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CollisionStats {
    pub total_items: usize,
    pub distinct_sids: usize,
    pub max_bucket: usize,
    pub mean_bucket: f64,
    pub collision_rate: f64,
}
