//! Cosine similarity and k-nearest-neighbor agreement between embedding
//! spaces.
//!
//! Two models over the same vocabulary can have different hidden sizes, so
//! their spaces are compared through neighborhoods: for each token, take its
//! `k` nearest neighbors (by cosine) in each model and count how many are
//! shared. The score is the mean shared fraction over all tokens.
//!
//! Neighbor search is exact. Rows are unit-normalized once, then blocks of
//! queries are multiplied against the full matrix and the top `k` of each
//! row are kept. Ties are broken by ascending token id so that every result
//! is deterministic.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::kernels::{cosine_f64, sgemm_abt, unit_rows_f32};
use crate::tensor_io::EmbeddingMatrix;

/// Upper bound on similarity scratch per query block, in f32 elements.
const BLOCK_ELEMS: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeighborSet {
    pub query_id: u32,
    pub k: usize,
    /// Descending similarity, ties by ascending id.
    pub neighbor_ids: Vec<u32>,
    pub exclude_self: bool,
}

/// Cosine similarity of `query_id` against each candidate, in candidate order.
pub fn cosine_similarities(matrix: &EmbeddingMatrix, query_id: usize, candidate_ids: &[usize]) -> Result<Vec<f64>> {
    let q = matrix.try_row(query_id)?;
    candidate_ids
        .iter()
        .map(|&c| Ok(cosine_f64(q, matrix.try_row(c)?)))
        .collect()
}

fn check_k(rows: usize, k: usize, exclude_self: bool) -> Result<()> {
    let available = rows.saturating_sub(usize::from(exclude_self));
    if k == 0 || k > available {
        return Err(Error::KTooLarge { k, rows });
    }
    Ok(())
}

/// Keeps the best `k` of a similarity row.
fn top_k(sims: &[f32], k: usize, skip: Option<usize>) -> Vec<u32> {
    let mut best: Vec<(f32, u32)> = Vec::with_capacity(k + 1);
    for (j, &s) in sims.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        if best.len() == k && s <= best[k - 1].0 {
            // equal similarity with a larger id never displaces
            continue;
        }
        let pos = best.partition_point(|&(bs, _)| bs >= s);
        best.insert(pos, (s, j as u32));
        best.truncate(k);
    }
    best.into_iter().map(|(_, id)| id).collect()
}

fn knn_rows(
    unit: &[f32],
    rows: usize,
    hidden: usize,
    queries: std::ops::Range<usize>,
    k: usize,
    exclude_self: bool,
) -> Vec<Vec<u32>> {
    let qb = queries.len();
    let sims = sgemm_abt(
        &unit[queries.start * hidden..queries.end * hidden],
        unit,
        qb,
        hidden,
        rows,
    );
    (0..qb)
        .map(|i| {
            let q = queries.start + i;
            top_k(&sims[i * rows..(i + 1) * rows], k, exclude_self.then_some(q))
        })
        .collect()
}

fn block_len(rows: usize) -> usize {
    (BLOCK_ELEMS / rows.max(1)).clamp(1, 256)
}

/// Nearest neighbors of a single token.
pub fn knn(matrix: &EmbeddingMatrix, query_id: usize, k: usize, exclude_self: bool) -> Result<NeighborSet> {
    matrix.try_row(query_id)?;
    check_k(matrix.rows(), k, exclude_self)?;
    let unit = unit_rows_f32(matrix);
    let ids = knn_rows(
        &unit,
        matrix.rows(),
        matrix.hidden(),
        query_id..query_id + 1,
        k,
        exclude_self,
    )
    .pop()
    .expect("one query");
    Ok(NeighborSet {
        query_id: query_id as u32,
        k,
        neighbor_ids: ids,
        exclude_self,
    })
}

/// Nearest neighbors of every token, as id lists indexed by query.
pub fn all_knn(matrix: &EmbeddingMatrix, k: usize, exclude_self: bool, exec: Execution) -> Result<Vec<Vec<u32>>> {
    let rows = matrix.rows();
    check_k(rows, k, exclude_self)?;
    let unit = unit_rows_f32(matrix);
    let bl = block_len(rows);
    let blocks = rows.div_ceil(bl);
    let per_block = exec::map_range(exec, blocks, |b| {
        let start = b * bl;
        let end = (start + bl).min(rows);
        knn_rows(&unit, rows, matrix.hidden(), start..end, k, exclude_self)
    });
    Ok(per_block.into_iter().flatten().collect())
}

/// Result of comparing two embedding spaces over one vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnnAudit {
    pub k: usize,
    pub rows: usize,
    pub hidden_a: usize,
    pub hidden_b: usize,
    /// Mean over tokens of shared neighbors / k.
    pub score: f64,
    /// Shared-neighbor count per token.
    pub per_token: Vec<u32>,
    /// `histogram[c]` = number of tokens sharing exactly `c` neighbors.
    pub histogram: Vec<usize>,
}

fn count_shared(a: &[u32], b: &[u32]) -> u32 {
    // k is small; a linear scan beats hashing here
    a.iter().filter(|x| b.contains(x)).count() as u32
}

pub fn knn_audit(a: &EmbeddingMatrix, b: &EmbeddingMatrix, k: usize, exec: Execution) -> Result<KnnAudit> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "row counts differ: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    let na = all_knn(a, k, true, exec)?;
    let nb = all_knn(b, k, true, exec)?;
    let per_token: Vec<u32> = na.iter().zip(&nb).map(|(x, y)| count_shared(x, y)).collect();
    let mut histogram = vec![0usize; k + 1];
    for &c in &per_token {
        histogram[c as usize] += 1;
    }
    let total: u64 = per_token.iter().map(|&c| u64::from(c)).sum();
    let score = total as f64 / (a.rows() as f64 * k as f64);
    Ok(KnnAudit {
        k,
        rows: a.rows(),
        hidden_a: a.hidden(),
        hidden_b: b.hidden(),
        score,
        per_token,
        histogram,
    })
}

/// Fraction of shared `k`-nearest neighbors, averaged over all tokens.
pub fn knn_overlap_score(a: &EmbeddingMatrix, b: &EmbeddingMatrix, k: usize) -> Result<f64> {
    Ok(knn_audit(a, b, k, Execution::default())?.score)
}
