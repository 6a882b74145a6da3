//! Tokenizer vocabularies and cross-tokenizer overlap.
//!
//! Three on-disk layouts are understood:
//!
//! * **tokenizer descriptor**: a `tokenizer.json`-style document whose
//!   `model.vocab` is either a `{surface: id}` map (BPE/WordPiece) or a list
//!   of `[surface, score]` pairs (Unigram, id = position). `added_tokens`
//!   are appended when they extend the id range densely.
//! * **flat map**: a bare `{surface: id}` document such as GPT-2's
//!   `vocab.json`.
//! * **lines**: one surface per line, id = line number.

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::Entries;

/// Byte-level BPE space marker (`Ġ`, U+0120).
pub const BYTE_LEVEL_MARKER: &str = "\u{120}";
/// SentencePiece space marker (`▁`, U+2581).
pub const SENTENCEPIECE_MARKER: &str = "\u{2581}";
/// Common form both markers are rewritten to under
/// [`CanonicalMode::UnifyWhitespaceMarker`].
pub const CANONICAL_MARKER: &str = SENTENCEPIECE_MARKER;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: u32,
    pub surface: Vec<u8>,
}

impl Token {
    pub fn surface_lossy(&self) -> Cow<'_, str> {
        String::from_utf8_lossy(&self.surface)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkerConvention {
    Gpt2ByteLevel,
    SentencepieceUnderscore,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabFormat {
    TokenizerDescriptor,
    FlatMap,
    Lines,
}

impl FromStr for VocabFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokenizer" | "tokenizer-descriptor" | "descriptor" => Ok(Self::TokenizerDescriptor),
            "flat-map" | "vocab-json" | "map" => Ok(Self::FlatMap),
            "lines" | "txt" => Ok(Self::Lines),
            other => Err(Error::Config(format!("unknown vocabulary format {other:?}"))),
        }
    }
}

impl VocabFormat {
    /// Best guess from the file name; `tokenizer.json` is a descriptor, any
    /// other `.json` a flat map, everything else a line list.
    pub fn guess(path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if name.ends_with("tokenizer.json") {
            Self::TokenizerDescriptor
        } else if name.ends_with(".json") {
            Self::FlatMap
        } else {
            Self::Lines
        }
    }
}

/// Ordered, dense token-id mapping of one tokenizer.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<Vec<u8>, u32>,
    convention: MarkerConvention,
}

impl Vocabulary {
    /// Builds a vocabulary from surfaces listed in id order.
    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<Vec<u8>>,
    {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, s) in surfaces.into_iter().enumerate() {
            let id = u32::try_from(i).map_err(|_| Error::NonDenseIds("more than 2^32 tokens".into()))?;
            let surface: Vec<u8> = s.into();
            if surface.is_empty() {
                return Err(Error::EmptySurface { id });
            }
            if index.insert(surface.clone(), id).is_some() {
                return Err(Error::DuplicateSurface {
                    surface: String::from_utf8_lossy(&surface).into_owned(),
                });
            }
            tokens.push(Token { id, surface });
        }
        let convention = detect_convention(&tokens);
        Ok(Self {
            tokens,
            index,
            convention,
        })
    }

    /// Builds a vocabulary from `(surface, id)` entries in any order. The ids
    /// must be exactly `0..len`.
    pub fn from_entries<S: Into<Vec<u8>>>(entries: impl IntoIterator<Item = (S, u64)>) -> Result<Self> {
        let entries: Vec<(Vec<u8>, u64)> = entries.into_iter().map(|(s, id)| (s.into(), id)).collect();
        let n = entries.len();
        let mut slots: Vec<Option<Vec<u8>>> = vec![None; n];
        let mut seen = HashSet::with_capacity(n);
        for (surface, id) in entries {
            if !seen.insert(surface.clone()) {
                return Err(Error::DuplicateSurface {
                    surface: String::from_utf8_lossy(&surface).into_owned(),
                });
            }
            let slot = usize::try_from(id)
                .ok()
                .and_then(|i| slots.get_mut(i))
                .ok_or_else(|| Error::NonDenseIds(format!("id {id} outside 0..{n}")))?;
            if slot.is_some() {
                return Err(Error::NonDenseIds(format!("id {id} assigned twice")));
            }
            *slot = Some(surface);
        }
        // With n entries, n distinct slots and no out-of-range id, every slot is filled.
        Self::from_surfaces(slots.into_iter().map(|s| s.expect("dense ids")))
    }

    pub fn load(path: impl AsRef<Path>, format: VocabFormat) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        match format {
            VocabFormat::Lines => {
                let mut body: &[u8] = &bytes;
                if let Some(stripped) = body.strip_suffix(b"\n") {
                    body = stripped;
                }
                if body.is_empty() {
                    return Self::from_surfaces(Vec::<Vec<u8>>::new());
                }
                Self::from_surfaces(body.split(|&b| b == b'\n').map(|l| l.to_vec()))
            }
            VocabFormat::FlatMap => {
                let map: Entries<u64> = serde_json::from_slice(&bytes).map_err(|e| Error::parse(&ctx, e))?;
                Self::from_entries(map.0.into_iter().map(|(s, id)| (s.into_bytes(), id)))
            }
            VocabFormat::TokenizerDescriptor => {
                let doc: Descriptor = serde_json::from_slice(&bytes).map_err(|e| Error::parse(&ctx, e))?;
                let mut entries: Vec<(Vec<u8>, u64)> = match doc.model.vocab {
                    ModelVocab::Map(m) => m.0.into_iter().map(|(s, id)| (s.into_bytes(), id)).collect(),
                    ModelVocab::Pieces(p) => p
                        .into_iter()
                        .enumerate()
                        .map(|(i, (s, _score))| (s.into_bytes(), i as u64))
                        .collect(),
                };
                let mut added = doc.added_tokens;
                added.sort_by_key(|t| t.id);
                let known: HashSet<Vec<u8>> = entries.iter().map(|(s, _)| s.clone()).collect();
                for t in added {
                    if t.id == entries.len() as u64 && !known.contains(t.content.as_bytes()) {
                        entries.push((t.content.into_bytes(), t.id));
                    }
                }
                Self::from_entries(entries)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn id_of(&self, surface: impl AsRef<[u8]>) -> Option<u32> {
        self.index.get(surface.as_ref()).copied()
    }

    pub fn convention(&self) -> MarkerConvention {
        self.convention
    }

    pub fn with_convention(mut self, convention: MarkerConvention) -> Self {
        self.convention = convention;
        self
    }
}

fn detect_convention(tokens: &[Token]) -> MarkerConvention {
    let (mut byte_level, mut sp) = (0usize, 0usize);
    for t in tokens {
        if t.surface.starts_with(BYTE_LEVEL_MARKER.as_bytes()) {
            byte_level += 1;
        } else if t.surface.starts_with(SENTENCEPIECE_MARKER.as_bytes()) {
            sp += 1;
        }
    }
    // at least 1% of the vocabulary must carry the marker
    let threshold = (tokens.len() / 100).max(1);
    if byte_level >= threshold && byte_level > sp {
        MarkerConvention::Gpt2ByteLevel
    } else if sp >= threshold && sp > byte_level {
        MarkerConvention::SentencepieceUnderscore
    } else {
        MarkerConvention::Unknown
    }
}

#[derive(Deserialize)]
struct Descriptor {
    model: DescriptorModel,
    #[serde(default)]
    added_tokens: Vec<AddedToken>,
}

#[derive(Deserialize)]
struct DescriptorModel {
    vocab: ModelVocab,
}

#[derive(Deserialize)]
struct AddedToken {
    id: u64,
    content: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ModelVocab {
    Map(Entries<u64>),
    Pieces(Vec<(String, f64)>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CanonicalMode {
    #[default]
    None,
    UnifyWhitespaceMarker,
}

impl FromStr for CanonicalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "whitespace" | "unify-whitespace-marker" => Ok(Self::UnifyWhitespaceMarker),
            other => Err(Error::Config(format!("unknown canonicalization mode {other:?}"))),
        }
    }
}

/// How surfaces are compared across tokenizers. Collisions after
/// canonicalization always resolve to the lowest id and are reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalizationPolicy {
    pub mode: CanonicalMode,
}

impl CanonicalizationPolicy {
    pub fn new(mode: CanonicalMode) -> Self {
        Self { mode }
    }

    pub fn canonical<'a>(&self, surface: &'a [u8]) -> Cow<'a, [u8]> {
        match self.mode {
            CanonicalMode::None => Cow::Borrowed(surface),
            CanonicalMode::UnifyWhitespaceMarker => {
                let from = BYTE_LEVEL_MARKER.as_bytes();
                if !contains(surface, from) {
                    return Cow::Borrowed(surface);
                }
                let to = CANONICAL_MARKER.as_bytes();
                let mut out = Vec::with_capacity(surface.len() + 2);
                let mut i = 0;
                while i < surface.len() {
                    if surface[i..].starts_with(from) {
                        out.extend_from_slice(to);
                        i += from.len();
                    } else {
                        out.push(surface[i]);
                        i += 1;
                    }
                }
                Cow::Owned(out)
            }
        }
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// Two surfaces of one vocabulary that became equal after canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Collision {
    pub side: Side,
    pub kept_id: u32,
    pub dropped_id: u32,
}

/// Alignment of target ids onto source ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapMap {
    /// `(target_id, source_id)` sorted by target id.
    pub pairs: Vec<(u32, u32)>,
    /// Target ids without a source counterpart, ascending.
    pub missing_target_ids: Vec<u32>,
    pub policy: CanonicalizationPolicy,
    pub collisions: Vec<Collision>,
    source_size: usize,
    target_size: usize,
}

impl OverlapMap {
    /// Builds a map directly from pairs; `missing_target_ids` is derived.
    pub fn from_pairs(pairs: Vec<(u32, u32)>, source_size: usize, target_size: usize) -> Result<Self> {
        let mut pairs = pairs;
        pairs.sort_unstable();
        let mut seen_t = vec![false; target_size];
        let mut seen_s = vec![false; source_size];
        for &(t, s) in &pairs {
            let (t, s) = (t as usize, s as usize);
            if t >= target_size || s >= source_size {
                return Err(Error::ShapeMismatch(format!(
                    "pair ({t}, {s}) outside vocabularies of size {target_size}/{source_size}"
                )));
            }
            if std::mem::replace(&mut seen_t[t], true) || std::mem::replace(&mut seen_s[s], true) {
                return Err(Error::ShapeMismatch(format!("pair ({t}, {s}) reuses an id")));
            }
        }
        let missing = (0..target_size as u32).filter(|&t| !seen_t[t as usize]).collect();
        Ok(Self {
            pairs,
            missing_target_ids: missing,
            policy: CanonicalizationPolicy::default(),
            collisions: Vec::new(),
            source_size,
            target_size,
        })
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn overlap_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn ratio(&self, denominator: Denominator) -> Result<f64> {
        overlap_ratio(self, denominator, self.source_size, self.target_size)
    }
}

/// Computes which target tokens also exist in the source vocabulary.
pub fn compute_overlap(source: &Vocabulary, target: &Vocabulary, policy: CanonicalizationPolicy) -> Result<OverlapMap> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::ShapeMismatch("overlap of an empty vocabulary".into()));
    }
    let mut collisions = Vec::new();

    let mut source_index: HashMap<Cow<'_, [u8]>, u32> = HashMap::with_capacity(source.len());
    for t in source.tokens() {
        let key = policy.canonical(&t.surface);
        match source_index.get(&key) {
            Some(&kept) => collisions.push(Collision {
                side: Side::Source,
                kept_id: kept,
                dropped_id: t.id,
            }),
            None => {
                source_index.insert(key, t.id);
            }
        }
    }

    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    let mut target_seen: HashMap<Cow<'_, [u8]>, u32> = HashMap::new();
    for t in target.tokens() {
        let key = policy.canonical(&t.surface);
        if policy.mode != CanonicalMode::None {
            if let Some(&kept) = target_seen.get(&key) {
                collisions.push(Collision {
                    side: Side::Target,
                    kept_id: kept,
                    dropped_id: t.id,
                });
                missing.push(t.id);
                continue;
            }
        }
        match source_index.get(&key) {
            Some(&s) => pairs.push((t.id, s)),
            None => missing.push(t.id),
        }
        if policy.mode != CanonicalMode::None {
            target_seen.insert(key, t.id);
        }
    }

    if !collisions.is_empty() {
        log::warn!(
            "{} canonicalization collision(s); lowest id kept for each",
            collisions.len()
        );
    }

    Ok(OverlapMap {
        pairs,
        missing_target_ids: missing,
        policy,
        collisions,
        source_size: source.len(),
        target_size: target.len(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Denominator {
    #[default]
    Source,
    Target,
    Union,
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Self::Source),
            "target" => Ok(Self::Target),
            "union" => Ok(Self::Union),
            other => Err(Error::Config(format!("unknown denominator {other:?}"))),
        }
    }
}

/// `|pairs|` divided by the chosen vocabulary size.
pub fn overlap_ratio(
    map: &OverlapMap,
    denominator: Denominator,
    source_size: usize,
    target_size: usize,
) -> Result<f64> {
    let n = map.pairs.len();
    if target_size != n + map.missing_target_ids.len() || source_size < n {
        return Err(Error::ShapeMismatch(format!(
            "sizes {source_size}/{target_size} inconsistent with {n} pairs and {} missing",
            map.missing_target_ids.len()
        )));
    }
    let d = match denominator {
        Denominator::Source => source_size,
        Denominator::Target => target_size,
        Denominator::Union => source_size + target_size - n,
    };
    if d == 0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(n as f64 / d as f64)
}

/// Formats a fraction as a percentage with two decimals, e.g. `66.67%`.
pub fn format_percent(ratio: f64) -> String {
    format!("{:.2}%", ratio * 100.0)
}

/// Machine-readable summary of an overlap computation.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    pub source_size: usize,
    pub target_size: usize,
    pub overlap: usize,
    pub missing: usize,
    pub canonicalization: CanonicalMode,
    pub source_convention: MarkerConvention,
    pub target_convention: MarkerConvention,
    pub ratio_source: f64,
    pub ratio_target: f64,
    pub ratio_union: f64,
    pub sample_overlapping: Vec<String>,
    pub sample_missing: Vec<String>,
    pub collisions: Vec<Collision>,
}

impl OverlapReport {
    pub fn new(map: &OverlapMap, source: &Vocabulary, target: &Vocabulary, samples: usize) -> Result<Self> {
        let surface = |id: u32| {
            target
                .get(id)
                .map(|t| t.surface_lossy().into_owned())
                .unwrap_or_default()
        };
        Ok(Self {
            source_size: source.len(),
            target_size: target.len(),
            overlap: map.pairs.len(),
            missing: map.missing_target_ids.len(),
            canonicalization: map.policy.mode,
            source_convention: source.convention(),
            target_convention: target.convention(),
            ratio_source: overlap_ratio(map, Denominator::Source, source.len(), target.len())?,
            ratio_target: overlap_ratio(map, Denominator::Target, source.len(), target.len())?,
            ratio_union: overlap_ratio(map, Denominator::Union, source.len(), target.len())?,
            sample_overlapping: map.pairs.iter().take(samples).map(|&(t, _)| surface(t)).collect(),
            sample_missing: map
                .missing_target_ids
                .iter()
                .take(samples)
                .map(|&t| surface(t))
                .collect(),
            collisions: map.collisions.clone(),
        })
    }
}
