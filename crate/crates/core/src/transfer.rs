//! Building a large target-language checkpoint from a large source-language
//! checkpoint and a small target-language one.
//!
//! * Every non-embedding tensor is copied verbatim from the source model.
//! * Target tokens that also exist in the source vocabulary take the source
//!   embedding row unchanged.
//! * Every other target token gets a weighted average of the source rows of
//!   the overlapping tokens. The weights come from the small target model:
//!   cosine similarity between the missing token and each overlapping token,
//!   normalized per missing token (see [`WeightMode`]).
//!
//! The small and large hidden sizes are never mixed: similarities live in
//! the small space, averages in the large one.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::kernels::{cosine_f64, dgemm_ab, dgemm_abt, unit_rows_f64};
use crate::tensor_io::{
    checkpoint_bytes, find_embedding_tensor, read_matrix, write_checkpoint, CheckpointBundle, Dtype, EmbeddingMatrix,
    TensorSpec,
};
use crate::vocab::{compute_overlap, CanonicalizationPolicy, OverlapMap, Vocabulary};

/// Target rows handled per work item in [`build_target_embeddings`].
const ROW_BLOCK: usize = 256;
/// Below this magnitude a raw similarity sum counts as cancelled.
const RAW_SUM_EPS: f64 = 1e-12;

/// How similarities become mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
#[derive(Default)]
pub enum WeightMode {
    /// `max(s, 0) / Σ max(s, 0)`: a convex combination.
    #[default]
    ClampedNormalized,
    /// `s / Σ s`, negative weights allowed.
    RawNormalized,
    /// `exp(s / T) / Σ exp(s / T)`.
    Softmax { temperature: f64 },
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightMode::ClampedNormalized => f.write_str("clamped"),
            WeightMode::RawNormalized => f.write_str("raw"),
            WeightMode::Softmax { temperature } => write!(f, "softmax:{temperature}"),
        }
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    /// Accepts `clamped`, `raw`, `softmax` (T = 1) and `softmax:T`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamped" | "clamped-normalized" => Ok(Self::ClampedNormalized),
            "raw" | "raw-normalized" => Ok(Self::RawNormalized),
            "softmax" => Ok(Self::Softmax { temperature: 1.0 }),
            other => match other.strip_prefix("softmax:") {
                Some(t) => t
                    .parse()
                    .map(|temperature| Self::Softmax { temperature })
                    .map_err(|_| Error::Config(format!("bad softmax temperature {t:?}"))),
                None => Err(Error::Config(format!("unknown weight mode {other:?}"))),
            },
        }
    }
}

/// What to do when a missing token has no usable positive weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Weight 1 on the single most similar overlapping token.
    #[default]
    UniformTop1,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadPolicy {
    /// Tied unless the source has a separate output head.
    #[default]
    Auto,
    Tied,
    Untied,
}

impl FromStr for HeadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "tied" => Ok(Self::Tied),
            "untied" => Ok(Self::Untied),
            other => Err(Error::Config(format!("unknown head policy {other:?}"))),
        }
    }
}

impl FromStr for Fallback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" | "uniform-top1" => Ok(Self::UniformTop1),
            "error" => Ok(Self::Error),
            other => Err(Error::Config(format!("unknown fallback {other:?}"))),
        }
    }
}

/// Initialization for target tokens missing from the source vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
#[derive(Default)]
pub enum InitMethod {
    /// Similarity-weighted average guided by the small target model.
    #[default]
    Clp,
    /// Control: i.i.d. normal rows.
    RandomNormal { mean: f64, std: f64 },
    /// Control: every missing row is the mean of the overlapping source rows.
    SourceMean,
}

impl InitMethod {
    pub const RANDOM_DEFAULT: InitMethod = InitMethod::RandomNormal { mean: 0.0, std: 0.02 };
}

/// Data type of rebuilt embedding tensors in the output checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputDtype {
    #[default]
    F32,
    /// Round back to the source tensor's dtype (nearest even).
    Source,
}

impl FromStr for OutputDtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "F32" => Ok(Self::F32),
            "source" => Ok(Self::Source),
            other => Err(Error::Config(format!("unknown output dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TransferConfig {
    pub weight_mode: WeightMode,
    /// Restrict each missing token to its `top_k` most similar overlap tokens.
    pub top_k: Option<usize>,
    pub fallback: Fallback,
    pub seed: u64,
    pub head_policy: HeadPolicy,
    pub init: InitMethod,
    pub canonicalization: CanonicalizationPolicy,
    pub output_dtype: OutputDtype,
    /// Name (or substring) of the input embedding tensor in the source model.
    pub source_tensor: Option<String>,
    /// Name (or substring) of the input embedding tensor in the small model.
    pub small_tensor: Option<String>,
    #[serde(skip)]
    pub execution: Execution,
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if let WeightMode::Softmax { temperature } = self.weight_mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!(
                    "softmax temperature must be positive, got {temperature}"
                )));
            }
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if let InitMethod::RandomNormal { std, mean } = self.init {
            if !(std >= 0.0 && std.is_finite() && mean.is_finite()) {
                return Err(Error::Config(format!("invalid normal parameters ({mean}, {std})")));
            }
        }
        Ok(())
    }
}

/// Mixing weights of one missing token over the overlap set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector {
    pub missing_id: u32,
    /// `(position in OverlapMap::pairs, weight)` for non-zero weights,
    /// ascending by position.
    pub entries: Vec<(u32, f64)>,
    /// True when the degenerate-case fallback produced these weights.
    pub fallback: bool,
}

impl WeightVector {
    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w).sum()
    }

    /// Weights expanded to one entry per overlap pair.
    pub fn dense(&self, overlap_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; overlap_len];
        for &(p, w) in &self.entries {
            out[p as usize] = w;
        }
        out
    }
}

/// Turns similarities over the overlap set into weights.
fn weights_from_similarities(missing_id: u32, sims: &[f64], config: &TransferConfig) -> Result<WeightVector> {
    debug_assert!(!sims.is_empty());
    let mut candidates: Vec<u32> = (0..sims.len() as u32).collect();
    if let Some(k) = config.top_k {
        if k < candidates.len() {
            candidates.sort_by(|&a, &b| sims[b as usize].total_cmp(&sims[a as usize]).then(a.cmp(&b)));
            candidates.truncate(k);
            candidates.sort_unstable();
        }
    }

    let weights: Option<Vec<f64>> = match config.weight_mode {
        WeightMode::ClampedNormalized => {
            let total: f64 = candidates.iter().map(|&p| sims[p as usize].max(0.0)).sum();
            (total > 0.0).then(|| candidates.iter().map(|&p| sims[p as usize].max(0.0) / total).collect())
        }
        WeightMode::RawNormalized => {
            let total: f64 = candidates.iter().map(|&p| sims[p as usize]).sum();
            (total.abs() >= RAW_SUM_EPS).then(|| candidates.iter().map(|&p| sims[p as usize] / total).collect())
        }
        WeightMode::Softmax { temperature } => {
            let max = candidates
                .iter()
                .map(|&p| sims[p as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = candidates
                .iter()
                .map(|&p| ((sims[p as usize] - max) / temperature).exp())
                .collect();
            let total: f64 = exps.iter().sum();
            Some(exps.into_iter().map(|e| e / total).collect())
        }
    };

    match weights {
        Some(w) => Ok(WeightVector {
            missing_id,
            entries: candidates.into_iter().zip(w).filter(|&(_, w)| w != 0.0).collect(),
            fallback: false,
        }),
        None if config.fallback == Fallback::Error => Err(Error::DegenerateWeights(missing_id)),
        None => {
            // first maximum wins, i.e. the lowest pair position among ties
            let best = candidates
                .iter()
                .copied()
                .reduce(|a, b| if sims[b as usize] > sims[a as usize] { b } else { a })
                .expect("non-empty overlap");
            Ok(WeightVector {
                missing_id,
                entries: vec![(best, 1.0)],
                fallback: true,
            })
        }
    }
}

fn check_inputs(
    target_vocab_size: usize,
    overlap: &OverlapMap,
    source_large: &EmbeddingMatrix,
    small_target: Option<&EmbeddingMatrix>,
) -> Result<()> {
    if overlap.pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    if overlap.target_size() != target_vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "overlap covers {} target tokens, vocabulary has {target_vocab_size}",
            overlap.target_size()
        )));
    }
    if source_large.rows() != overlap.source_size() {
        return Err(Error::ShapeMismatch(format!(
            "source embeddings have {} rows, source vocabulary has {}",
            source_large.rows(),
            overlap.source_size()
        )));
    }
    if let Some(small) = small_target {
        if small.rows() != target_vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "small target embeddings have {} rows, target vocabulary has {target_vocab_size}",
                small.rows()
            )));
        }
    }
    Ok(())
}

/// Mixing weights of one missing target token.
pub fn delta_weights(
    missing_id: u32,
    overlap: &OverlapMap,
    small_target: &EmbeddingMatrix,
    config: &TransferConfig,
) -> Result<WeightVector> {
    config.validate()?;
    if overlap.pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    if small_target.rows() != overlap.target_size() {
        return Err(Error::ShapeMismatch(format!(
            "small target embeddings have {} rows, target vocabulary has {}",
            small_target.rows(),
            overlap.target_size()
        )));
    }
    if overlap.missing_target_ids.binary_search(&missing_id).is_err() {
        return Err(Error::Config(format!("token {missing_id} is not a missing token")));
    }
    let q = small_target.try_row(missing_id as usize)?;
    let sims: Vec<f64> = overlap
        .pairs
        .iter()
        .map(|&(t, _)| cosine_f64(q, small_target.row(t as usize)))
        .collect();
    weights_from_similarities(missing_id, &sims, config)
}

/// Weighted sum of the source rows of the overlapping tokens.
pub fn construct_missing_embedding(
    weights: &WeightVector,
    overlap: &OverlapMap,
    source_large: &EmbeddingMatrix,
) -> Result<Vec<f32>> {
    if source_large.rows() != overlap.source_size() {
        return Err(Error::ShapeMismatch(format!(
            "source embeddings have {} rows, source vocabulary has {}",
            source_large.rows(),
            overlap.source_size()
        )));
    }
    let mut acc = vec![0.0f64; source_large.hidden()];
    for &(pos, w) in &weights.entries {
        let &(_, s) = overlap
            .pairs
            .get(pos as usize)
            .ok_or_else(|| Error::ShapeMismatch(format!("weight position {pos} outside overlap")))?;
        for (a, &v) in acc.iter_mut().zip(source_large.row(s as usize)) {
            *a += w * f64::from(v);
        }
    }
    let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "constructed embedding of token {}",
            weights.missing_id
        )));
    }
    Ok(out)
}

/// Counts describing how a target embedding matrix was assembled.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub copied: usize,
    pub constructed: usize,
    pub fallback_used: usize,
    pub fallback_ids: Vec<u32>,
}

#[derive(Clone, Copy)]
enum Role {
    Copy { source: u32 },
    Missing,
}

fn roles(overlap: &OverlapMap) -> Vec<Role> {
    let mut roles = vec![Role::Missing; overlap.target_size()];
    for &(t, s) in &overlap.pairs {
        roles[t as usize] = Role::Copy { source: s };
    }
    roles
}

/// Builds the full target embedding matrix: overlap rows copied, missing
/// rows constructed from similarity weights.
pub fn build_target_embeddings(
    target_vocab_size: usize,
    overlap: &OverlapMap,
    source_large: &EmbeddingMatrix,
    small_target: &EmbeddingMatrix,
    config: &TransferConfig,
) -> Result<(EmbeddingMatrix, BuildReport)> {
    config.validate()?;
    check_inputs(target_vocab_size, overlap, source_large, Some(small_target))?;
    let roles = roles(overlap);
    let (hs, hl) = (small_target.hidden(), source_large.hidden());
    let n_ov = overlap.pairs.len();

    let ov_unit = unit_rows_f64(small_target, overlap.pairs.iter().map(|&(t, _)| t as usize));
    let mut src_ov = Vec::with_capacity(n_ov * hl);
    for &(_, s) in &overlap.pairs {
        src_ov.extend(source_large.row(s as usize).iter().map(|&v| f64::from(v)));
    }

    let mut out = EmbeddingMatrix::zeros(target_vocab_size, hl);
    let chunk_len = (ROW_BLOCK * hl).max(1);
    let fallbacks = exec::try_map_chunks_mut(config.execution, out.values_mut(), chunk_len, |ci, chunk| {
        let first = ci * ROW_BLOCK;
        let rows_here = chunk.len() / hl.max(1);
        let mut missing = Vec::new();
        for r in 0..rows_here {
            match roles[first + r] {
                Role::Copy { source } => {
                    chunk[r * hl..(r + 1) * hl].copy_from_slice(source_large.row(source as usize));
                }
                Role::Missing => missing.push(first + r),
            }
        }
        if missing.is_empty() {
            return Ok(Vec::new());
        }
        let m = missing.len();
        let q = unit_rows_f64(small_target, missing.iter().copied());
        let sims = dgemm_abt(&q, &ov_unit, m, hs, n_ov);
        let mut dense = vec![0.0f64; m * n_ov];
        let mut fallback_ids = Vec::new();
        for (i, &t) in missing.iter().enumerate() {
            let w = weights_from_similarities(t as u32, &sims[i * n_ov..(i + 1) * n_ov], config)?;
            if w.fallback {
                fallback_ids.push(t as u32);
            }
            for (p, v) in w.entries {
                dense[i * n_ov + p as usize] = v;
            }
        }
        let built = dgemm_ab(&dense, &src_ov, m, n_ov, hl);
        for (i, &t) in missing.iter().enumerate() {
            let r = t - first;
            let dst = &mut chunk[r * hl..(r + 1) * hl];
            for (d, &v) in dst.iter_mut().zip(&built[i * hl..(i + 1) * hl]) {
                *d = v as f32;
            }
            if dst.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("constructed embedding of token {t}")));
            }
        }
        Ok(fallback_ids)
    })?;

    let fallback_ids: Vec<u32> = fallbacks.into_iter().flatten().collect();
    let report = BuildReport {
        copied: n_ov,
        constructed: overlap.missing_target_ids.len(),
        fallback_used: fallback_ids.len(),
        fallback_ids,
    };
    Ok((out, report))
}

/// Control initializations: overlap rows copied, missing rows drawn from
/// `method` instead of similarity weights. Deterministic for a fixed seed.
pub fn baseline_init(
    target_vocab_size: usize,
    overlap: &OverlapMap,
    source_large: &EmbeddingMatrix,
    method: InitMethod,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    check_inputs(target_vocab_size, overlap, source_large, None)?;
    let hl = source_large.hidden();
    let mut out = EmbeddingMatrix::zeros(target_vocab_size, hl);
    let values = out.values_mut();
    for &(t, s) in &overlap.pairs {
        values[t as usize * hl..(t as usize + 1) * hl].copy_from_slice(source_large.row(s as usize));
    }
    match method {
        InitMethod::Clp => {
            return Err(Error::Config("baseline_init needs a baseline method".into()));
        }
        InitMethod::RandomNormal { mean, std } => {
            let normal = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for &t in &overlap.missing_target_ids {
                for v in &mut values[t as usize * hl..(t as usize + 1) * hl] {
                    *v = normal.sample(&mut rng) as f32;
                }
            }
        }
        InitMethod::SourceMean => {
            let mut mean = vec![0.0f64; hl];
            for &(_, s) in &overlap.pairs {
                for (m, &v) in mean.iter_mut().zip(source_large.row(s as usize)) {
                    *m += f64::from(v);
                }
            }
            let mean: Vec<f32> = mean.iter().map(|m| (m / overlap.pairs.len() as f64) as f32).collect();
            for &t in &overlap.missing_target_ids {
                values[t as usize * hl..(t as usize + 1) * hl].copy_from_slice(&mean);
            }
        }
    }
    Ok(out)
}

fn build_with(
    overlap: &OverlapMap,
    source: &EmbeddingMatrix,
    small: Option<&EmbeddingMatrix>,
    config: &TransferConfig,
) -> Result<(EmbeddingMatrix, BuildReport)> {
    match config.init {
        InitMethod::Clp => {
            let small =
                small.ok_or_else(|| Error::Config("similarity-weighted init needs a small target model".into()))?;
            build_target_embeddings(overlap.target_size(), overlap, source, small, config)
        }
        baseline => {
            let m = baseline_init(overlap.target_size(), overlap, source, baseline, config.seed)?;
            let report = BuildReport {
                copied: overlap.pairs.len(),
                constructed: overlap.missing_target_ids.len(),
                ..BuildReport::default()
            };
            Ok((m, report))
        }
    }
}

/// Drops padding rows beyond the vocabulary (some checkpoints round the
/// embedding row count up).
fn trim_rows(m: EmbeddingMatrix, rows: usize, what: &str) -> Result<EmbeddingMatrix> {
    match m.rows().cmp(&rows) {
        std::cmp::Ordering::Equal => Ok(m),
        std::cmp::Ordering::Greater => {
            log::warn!(
                "{what}: ignoring {} padding rows beyond the vocabulary",
                m.rows() - rows
            );
            let h = m.hidden();
            let mut values = m.into_values();
            values.truncate(rows * h);
            EmbeddingMatrix::new(rows, h, values)
        }
        std::cmp::Ordering::Less => Err(Error::ShapeMismatch(format!(
            "{what} has {} rows but the vocabulary has {rows} tokens",
            m.rows()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorDigest {
    pub name: String,
    pub sha256: String,
}

/// Everything recorded about a checkpoint transfer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferReport {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub copied: usize,
    pub constructed: usize,
    pub fallback_used: usize,
    pub fallback_tokens: Vec<String>,
    pub init: InitMethod,
    pub weight_mode: WeightMode,
    pub top_k: Option<usize>,
    pub input_tensor: String,
    pub head_tensor: Option<String>,
    pub tied: bool,
    pub head_rebuilt_independently: bool,
    pub copied_tensors: Vec<TensorDigest>,
}

#[derive(Debug, Clone)]
enum Slot {
    Copy(String),
    Input { name: String, dtype: Dtype },
    Head { name: String, dtype: Dtype },
}

/// A transferred checkpoint, ready to be written. Copied tensors are read
/// from the source checkpoint only when written.
#[derive(Debug)]
pub struct TransferOutput<'a> {
    source: &'a CheckpointBundle,
    slots: Vec<Slot>,
    input: EmbeddingMatrix,
    head: Option<EmbeddingMatrix>,
    overlap: OverlapMap,
    report: TransferReport,
}

impl<'a> TransferOutput<'a> {
    pub fn report(&self) -> &TransferReport {
        &self.report
    }

    pub fn overlap(&self) -> &OverlapMap {
        &self.overlap
    }

    /// The rebuilt input embedding matrix.
    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.input
    }

    /// The separately rebuilt output head, when untied.
    pub fn head(&self) -> Option<&EmbeddingMatrix> {
        self.head.as_ref()
    }

    pub fn specs(&self) -> Result<Vec<TensorSpec<'_>>> {
        self.slots
            .iter()
            .map(|slot| match slot {
                Slot::Copy(name) => TensorSpec::copy_from(self.source, name),
                Slot::Input { name, dtype } => Ok(self.matrix_spec(name, *dtype, &self.input)),
                Slot::Head { name, dtype } => {
                    Ok(self.matrix_spec(name, *dtype, self.head.as_ref().unwrap_or(&self.input)))
                }
            })
            .collect()
    }

    fn matrix_spec<'s>(&'s self, name: &str, dtype: Dtype, m: &'s EmbeddingMatrix) -> TensorSpec<'s> {
        TensorSpec::f32(name, dtype, vec![m.rows(), m.hidden()], m.values())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.specs()?, self.source.metadata(), path)
    }

    /// Materializes the output checkpoint in memory.
    pub fn to_bundle(&self) -> Result<CheckpointBundle> {
        CheckpointBundle::from_bytes(checkpoint_bytes(&self.specs()?, self.source.metadata())?)
    }
}

/// Transfers `source_bundle` to the target vocabulary.
///
/// `small_bundle` is only consulted for [`InitMethod::Clp`].
pub fn transfer_checkpoint<'a>(
    source_bundle: &'a CheckpointBundle,
    small_bundle: Option<&CheckpointBundle>,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    config: &TransferConfig,
) -> Result<TransferOutput<'a>> {
    config.validate()?;
    let overlap = compute_overlap(source_vocab, target_vocab, config.canonicalization)?;
    if overlap.pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }

    let src = find_embedding_tensor(source_bundle, config.source_tensor.as_deref())?;
    let tied = match (config.head_policy, &src.head) {
        (HeadPolicy::Auto, head) => head.is_none(),
        (HeadPolicy::Tied, _) => true,
        (HeadPolicy::Untied, Some(_)) => false,
        (HeadPolicy::Untied, None) => {
            return Err(Error::Config(
                "untied head policy requested but the source checkpoint has no separate output head".into(),
            ))
        }
    };

    let small = match (config.init, small_bundle) {
        (InitMethod::Clp, Some(b)) => {
            let e = find_embedding_tensor(b, config.small_tensor.as_deref())?;
            let m = read_matrix(b, &e.input)?;
            if m.rows() != target_vocab.len() {
                return Err(Error::ShapeMismatch(format!(
                    "small model tensor {:?} has {} rows, target vocabulary has {} tokens",
                    e.input,
                    m.rows(),
                    target_vocab.len()
                )));
            }
            Some(m)
        }
        (InitMethod::Clp, None) => {
            return Err(Error::Config(
                "similarity-weighted init needs a small target model".into(),
            ))
        }
        _ => None,
    };

    let source_input = trim_rows(read_matrix(source_bundle, &src.input)?, source_vocab.len(), &src.input)?;
    let (input, build) = build_with(&overlap, &source_input, small.as_ref(), config)?;
    drop(source_input);

    let head = match (&src.head, tied) {
        (Some(head_name), false) => {
            let source_head = trim_rows(read_matrix(source_bundle, head_name)?, source_vocab.len(), head_name)?;
            Some(build_with(&overlap, &source_head, small.as_ref(), config)?.0)
        }
        _ => None,
    };

    let out_dtype = |name: &str| match config.output_dtype {
        OutputDtype::F32 => Dtype::F32,
        OutputDtype::Source => source_bundle.record(name).map_or(Dtype::F32, |r| r.dtype),
    };
    let mut slots = Vec::with_capacity(source_bundle.records().len());
    let mut copied_tensors = Vec::new();
    for r in source_bundle.records() {
        if r.name == src.input {
            slots.push(Slot::Input {
                name: r.name.clone(),
                dtype: out_dtype(&r.name),
            });
        } else if Some(&r.name) == src.head.as_ref() {
            slots.push(Slot::Head {
                name: r.name.clone(),
                dtype: out_dtype(&r.name),
            });
        } else {
            copied_tensors.push(TensorDigest {
                name: r.name.clone(),
                sha256: source_bundle.tensor_digest(&r.name)?,
            });
            slots.push(Slot::Copy(r.name.clone()));
        }
    }

    let surface = |id: u32| {
        target_vocab
            .get(id)
            .map(|t| t.surface_lossy().into_owned())
            .unwrap_or_default()
    };
    let report = TransferReport {
        source_vocab_size: source_vocab.len(),
        target_vocab_size: target_vocab.len(),
        copied: build.copied,
        constructed: build.constructed,
        fallback_used: build.fallback_used,
        fallback_tokens: build.fallback_ids.iter().map(|&id| surface(id)).collect(),
        init: config.init,
        weight_mode: config.weight_mode,
        top_k: config.top_k,
        input_tensor: src.input.clone(),
        head_tensor: src.head.clone(),
        tied,
        head_rebuilt_independently: head.is_some(),
        copied_tensors,
    };
    Ok(TransferOutput {
        source: source_bundle,
        slots,
        input,
        head,
        overlap,
        report,
    })
}

/// Summary of a transfer as ordered key/value pairs, handy for logs.
pub fn summarize(report: &TransferReport) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::new();
    m.insert("copied", report.copied.to_string());
    m.insert("constructed", report.constructed.to_string());
    m.insert("fallback_used", report.fallback_used.to_string());
    m.insert("tied", report.tied.to_string());
    m
}
