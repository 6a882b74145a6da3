//! Fixtures and independent reference implementations for the integration
//! tests. Nothing in here calls into the crate's numeric code paths; the
//! references work on plain nested vectors straight from the definitions.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use clp_transfer::tensor_io::{checkpoint_bytes, TensorSpec};
use clp_transfer::{CheckpointBundle, Dtype, EmbeddingMatrix, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, hidden: usize) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| (0..hidden).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

pub fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(rows).unwrap()
}

pub fn rows_of(m: &EmbeddingMatrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Two vocabularies of the given sizes sharing exactly `shared` surfaces, with
/// shuffled id orders.
pub fn vocab_pair(seed: u64, source_size: usize, target_size: usize, shared: usize) -> (Vocabulary, Vocabulary) {
    let mut r = rng(seed);
    let common: Vec<String> = (0..shared).map(|i| format!("tok{i}")).collect();
    let mut s: Vec<String> = common.clone();
    s.extend((0..source_size - shared).map(|i| format!("src{i}")));
    let mut t: Vec<String> = common;
    t.extend((0..target_size - shared).map(|i| format!("tgt{i}")));
    s.shuffle(&mut r);
    t.shuffle(&mut r);
    (
        Vocabulary::from_surfaces(s.into_iter().map(String::into_bytes)).unwrap(),
        Vocabulary::from_surfaces(t.into_iter().map(String::into_bytes)).unwrap(),
    )
}

/// Reference intersection: hash set of surfaces.
pub fn oracle_pairs(source: &Vocabulary, target: &Vocabulary) -> Vec<(u32, u32)> {
    let src: std::collections::HashMap<&[u8], u32> =
        source.tokens().iter().map(|t| (t.surface.as_slice(), t.id)).collect();
    target
        .tokens()
        .iter()
        .filter_map(|t| src.get(t.surface.as_slice()).map(|&s| (t.id, s)))
        .collect()
}

pub fn cos(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum RefMode {
    Clamped,
    Raw,
    Softmax(f64),
}

/// Weights of one missing token over all overlap pairs, by definition.
/// Returns the dense weight list and whether the fallback fired.
pub fn ref_weights(missing: &[f32], overlap_small: &[Vec<f32>], mode: RefMode) -> (Vec<f64>, bool) {
    let s: Vec<f64> = overlap_small.iter().map(|o| cos(missing, o)).collect();
    let n = s.len();
    let argmax = || {
        let mut best = 0;
        for i in 1..n {
            if s[i] > s[best] {
                best = i;
            }
        }
        let mut w = vec![0.0; n];
        w[best] = 1.0;
        (w, true)
    };
    match mode {
        RefMode::Clamped => {
            let mut total = 0.0;
            for &x in &s {
                if x > 0.0 {
                    total += x;
                }
            }
            if total <= 0.0 {
                return argmax();
            }
            (
                s.iter().map(|&x| if x > 0.0 { x / total } else { 0.0 }).collect(),
                false,
            )
        }
        RefMode::Raw => {
            let total: f64 = s.iter().sum();
            if total.abs() < 1e-12 {
                return argmax();
            }
            (s.iter().map(|&x| x / total).collect(), false)
        }
        RefMode::Softmax(t) => {
            let mut total = 0.0;
            let e: Vec<f64> = s.iter().map(|&x| (x / t).exp()).collect();
            for &x in &e {
                total += x;
            }
            (e.iter().map(|&x| x / total).collect(), false)
        }
    }
}

pub fn ref_combine(weights: &[f64], rows: &[Vec<f32>]) -> Vec<f32> {
    let h = rows[0].len();
    let mut out = vec![0.0f64; h];
    for (w, r) in weights.iter().zip(rows) {
        for j in 0..h {
            out[j] += w * r[j] as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// End-to-end reference for the target embedding matrix.
pub fn ref_build(
    source_large: &[Vec<f32>],
    small: &[Vec<f32>],
    pairs: &[(u32, u32)],
    target_size: usize,
    mode: RefMode,
) -> Vec<Vec<f32>> {
    let mut out = vec![Vec::new(); target_size];
    let ov_small: Vec<Vec<f32>> = pairs.iter().map(|&(t, _)| small[t as usize].clone()).collect();
    let ov_src: Vec<Vec<f32>> = pairs.iter().map(|&(_, s)| source_large[s as usize].clone()).collect();
    for &(t, s) in pairs {
        out[t as usize] = source_large[s as usize].clone();
    }
    for t in 0..target_size {
        if out[t].is_empty() {
            let (w, _) = ref_weights(&small[t], &ov_small, mode);
            out[t] = ref_combine(&w, &ov_src);
        }
    }
    out
}

/// Relative closeness with a tiny absolute floor for exact zeros.
pub fn close_rel(a: f32, b: f32, tol: f64) -> bool {
    let (a, b) = (a as f64, b as f64);
    (a - b).abs() <= tol * b.abs().max(1e-30)
}

/// Brute force kNN: sort every candidate by (cosine desc, id asc).
pub fn brute_knn(rows: &[Vec<f32>], q: usize, k: usize) -> Vec<u32> {
    let mut c: Vec<(f64, usize)> = (0..rows.len())
        .filter(|&j| j != q)
        .map(|j| (cos(&rows[q], &rows[j]), j))
        .collect();
    c.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    c.into_iter().take(k).map(|(_, j)| j as u32).collect()
}

/// Shared-neighbor total divided by rows * k.
pub fn brute_overlap_score(a: &[Vec<f32>], b: &[Vec<f32>], k: usize) -> f64 {
    let mut total = 0usize;
    for q in 0..a.len() {
        let na: HashSet<u32> = brute_knn(a, q, k).into_iter().collect();
        let nb: HashSet<u32> = brute_knn(b, q, k).into_iter().collect();
        total += na.intersection(&nb).count();
    }
    total as f64 / (a.len() * k) as f64
}

/// In-memory checkpoint from f32 tensors.
pub fn bundle(tensors: &[(&str, Dtype, Vec<usize>, Vec<f32>)]) -> CheckpointBundle {
    let specs: Vec<TensorSpec> = tensors
        .iter()
        .map(|(n, d, s, v)| TensorSpec::f32(*n, *d, s.clone(), v.clone()))
        .collect();
    CheckpointBundle::from_bytes(checkpoint_bytes(&specs, &BTreeMap::new()).unwrap()).unwrap()
}

pub fn flat(rows: &[Vec<f32>]) -> Vec<f32> {
    rows.concat()
}

/// A transfer fixture: vocabularies, source-large and small-target rows.
pub struct Instance {
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub source_large: Vec<Vec<f32>>,
    pub small: Vec<Vec<f32>>,
}

pub fn instance(seed: u64, vs: usize, vt: usize, shared: usize, h_small: usize, h_large: usize) -> Instance {
    let (source_vocab, target_vocab) = vocab_pair(seed, vs, vt, shared);
    let mut r = rng(seed ^ 0x5eed);
    Instance {
        source_vocab,
        target_vocab,
        source_large: random_rows(&mut r, vs, h_large),
        small: random_rows(&mut r, vt, h_small),
    }
}
