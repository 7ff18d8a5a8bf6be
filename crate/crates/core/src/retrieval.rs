//! Cosine ranking, reciprocal-rank fusion and preferred-term linking.
//!
//! Every encoder ranks the whole term set against a mention. Rankings are
//! total orders: similarity descending, ties broken by term id ascending
//! (bytewise), so ranks are exactly `1..=n`. Fusion scores each term as
//! `Σ 1 / (k + rank)` over the rankings that contain it and orders the result
//! the same way. Only ranks cross encoder boundaries, never raw similarities.
//!
//! Floating-point details that the ordering depends on:
//!
//! - [`dot`] accumulates in eight interleaved lanes (component `i` goes to lane
//!   `i % 8`) which are then combined pairwise as
//!   `((l0 + l1) + (l2 + l3)) + ((l4 + l5) + (l6 + l7))`. The order is fixed so
//!   every caller, at any parallelism, gets bit-identical similarities.
//! - Similarities are clamped to `[-1, 1]` and `-0.0` is folded into `0.0`.
//! - A term's fused score sums its reciprocal ranks in ascending rank order,
//!   which makes fusion exactly independent of the order of the input
//!   rankings.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{normalize_in_place, EmbeddingSet, Vector, VectorError};
use crate::terminology::Terminology;

/// Ranking constant used unless configured otherwise.
pub const DEFAULT_K: f64 = 46.0;

const LANES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("vector has a non-finite component")]
    NonFinite,
    #[error("no rankings to fuse")]
    EmptyInput,
    #[error("ranking constant must be a positive finite number, got {0}")]
    InvalidK(f64),
    #[error("ranking `{encoder}`: term `{term_id}` has rank 0")]
    InvalidRank { encoder: String, term_id: String },
    #[error("ranking `{encoder}`: term `{term_id}` appears more than once")]
    DuplicateTerm { encoder: String, term_id: String },
    #[error("fused ranking is empty")]
    EmptyFusion,
    #[error("unknown llt_code `{0}`")]
    UnknownLlt(String),
}

/// Dot product with the fixed eight-lane accumulation order described in the
/// module docs. Slices must have equal length.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..LANES {
            lanes[j] += x[j] * y[j];
        }
    }
    for (j, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[j] += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// Clamps to `[-1, 1]` and canonicalizes negative zero.
#[inline]
pub(crate) fn clamp_similarity(s: f64) -> f64 {
    s.clamp(-1.0, 1.0) + 0.0
}

/// Similarity of two unit vectors.
#[inline]
pub(crate) fn unit_similarity(a: &[f64], b: &[f64]) -> f64 {
    clamp_similarity(dot(a, b))
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(RetrievalError::NonFinite);
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    Ok(clamp_similarity(dot(u, v) / (nu * nv)))
}

/// Sort key for "higher similarity first": larger `f64` maps to smaller key.
/// Valid for finite values without negative zero.
#[inline]
pub(crate) fn descending_key(x: f64) -> u64 {
    let bits = x.to_bits();
    let ascending = if bits >> 63 == 1 { !bits } else { bits | (1 << 63) };
    !ascending
}

/// Descending by score, then ascending by id.
fn by_score_then_id(sa: f64, ia: &str, sb: f64, ib: &str) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ia.as_bytes().cmp(ib.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTerm {
    pub term_id: String,
    pub similarity: f64,
    pub rank: u32,
}

/// One encoder's ordering of the term set for one mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub encoder_id: String,
    pub entries: Vec<RankedTerm>,
}

impl Ranking {
    /// Builds a ranking from unordered `(term_id, similarity)` pairs, sorting
    /// and assigning ranks `1..=n`.
    pub fn from_scores(encoder_id: impl Into<String>, scores: Vec<(String, f64)>) -> Self {
        let mut scores: Vec<_> = scores.into_iter().map(|(id, s)| (id, clamp_similarity(s))).collect();
        scores.sort_by(|(ia, sa), (ib, sb)| by_score_then_id(*sa, ia, *sb, ib));
        let entries = scores
            .into_iter()
            .zip(1u32..)
            .map(|((term_id, similarity), rank)| RankedTerm {
                term_id,
                similarity,
                rank,
            })
            .collect();
        Self {
            encoder_id: encoder_id.into(),
            entries,
        }
    }

    /// The same ranking cut to its first `n` entries.
    pub fn truncated(mut self, n: usize) -> Self {
        self.entries.truncate(n);
        self
    }
}

/// Ranks every term of `terms` against `mention`.
///
/// The mention is normalized first; term vectors are unit-norm already, so
/// similarity is a clamped dot product.
pub fn rank_terms(mention: &Vector, terms: &EmbeddingSet) -> Result<Ranking, RetrievalError> {
    if mention.dim() != terms.dim() {
        return Err(RetrievalError::DimMismatch {
            left: mention.dim(),
            right: terms.dim(),
        });
    }
    let mut m = mention.as_slice().to_vec();
    normalize_in_place(&mut m).map_err(|e| match e {
        VectorError::Zero | VectorError::Empty => RetrievalError::ZeroNorm,
        VectorError::NonFinite => RetrievalError::NonFinite,
    })?;
    let scores = terms
        .iter()
        .map(|(id, v)| (id.to_owned(), unit_similarity(&m, v)))
        .collect();
    Ok(Ranking::from_scores(terms.encoder_id(), scores))
}

/// Sums `1 / (k + r)` over `ranks` in ascending rank order. Sorts `ranks`.
#[inline]
pub(crate) fn reciprocal_rank_sum(ranks: &mut [u32], k: f64) -> f64 {
    ranks.sort_unstable();
    ranks.iter().map(|&r| 1.0 / (k + f64::from(r))).sum()
}

pub(crate) fn check_k(k: f64) -> Result<(), RetrievalError> {
    if k.is_finite() && k > 0.0 {
        Ok(())
    } else {
        Err(RetrievalError::InvalidK(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEntry {
    pub term_id: String,
    pub rrf_score: f64,
}

/// Reciprocal-rank fused ordering of every term seen in any input ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRanking {
    pub k: f64,
    pub entries: Vec<FusedEntry>,
}

impl FusedRanking {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn top(&self, n: usize) -> &[FusedEntry] {
        &self.entries[..n.min(self.entries.len())]
    }
}

/// Reciprocal-rank fusion of `rankings` with ranking constant `k`.
///
/// Terms missing from a ranking get no contribution from it.
pub fn rrf_fuse(rankings: &[Ranking], k: f64) -> Result<FusedRanking, RetrievalError> {
    if rankings.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    check_k(k)?;
    let mut ranks: HashMap<&str, Vec<u32>> = HashMap::new();
    for ranking in rankings {
        let mut seen = HashSet::with_capacity(ranking.entries.len());
        for e in &ranking.entries {
            if e.rank == 0 {
                return Err(RetrievalError::InvalidRank {
                    encoder: ranking.encoder_id.clone(),
                    term_id: e.term_id.clone(),
                });
            }
            if !seen.insert(e.term_id.as_str()) {
                return Err(RetrievalError::DuplicateTerm {
                    encoder: ranking.encoder_id.clone(),
                    term_id: e.term_id.clone(),
                });
            }
            ranks.entry(&e.term_id).or_default().push(e.rank);
        }
    }
    let mut entries: Vec<FusedEntry> = ranks
        .into_iter()
        .map(|(id, mut r)| FusedEntry {
            term_id: id.to_owned(),
            rrf_score: reciprocal_rank_sum(&mut r, k),
        })
        .collect();
    entries.sort_by(|a, b| by_score_then_id(a.rrf_score, &a.term_id, b.rrf_score, &b.term_id));
    Ok(FusedRanking { k, entries })
}

/// How a fused LLT ranking becomes a preferred term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// The PT of the top fused LLT.
    #[default]
    TopLlt,
    /// The PT whose best LLT scores highest; ties by `pt_code` ascending.
    PtMax,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TopLlt => "top-llt",
            Self::PtMax => "pt-max",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top-llt" => Ok(Self::TopLlt),
            "pt-max" => Ok(Self::PtMax),
            other => Err(format!("unknown aggregation `{other}` (expected top-llt or pt-max)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub llt_code: String,
    pub pt_code: String,
    pub pt_text: String,
    pub rrf_score: f64,
}

/// Links a fused ranking to a preferred term of `terminology`.
pub fn link_mention(
    fused: &FusedRanking,
    terminology: &Terminology,
    aggregation: Aggregation,
) -> Result<LinkResult, RetrievalError> {
    let first = fused.entries.first().ok_or(RetrievalError::EmptyFusion)?;
    if let Some(unknown) = fused
        .entries
        .iter()
        .find(|e| terminology.index_of(&e.term_id).is_none())
    {
        return Err(RetrievalError::UnknownLlt(unknown.term_id.clone()));
    }
    let best = match aggregation {
        Aggregation::TopLlt => first,
        Aggregation::PtMax => {
            // Entries are already in fused order, so the first LLT seen for a
            // PT is that PT's best.
            let mut best_per_pt: HashMap<&str, &FusedEntry> = HashMap::new();
            for e in &fused.entries {
                let (pt, _) = terminology.pt_of(&e.term_id).expect("checked above");
                best_per_pt.entry(pt).or_insert(e);
            }
            best_per_pt
                .into_iter()
                .min_by(|(pa, ea), (pb, eb)| by_score_then_id(ea.rrf_score, pa, eb.rrf_score, pb))
                .map(|(_, e)| e)
                .expect("nonempty")
        }
    };
    let (pt_code, pt_text) = terminology.pt_of(&best.term_id).expect("checked above");
    Ok(LinkResult {
        llt_code: best.term_id.clone(),
        pt_code: pt_code.to_owned(),
        pt_text: pt_text.to_owned(),
        rrf_score: best.rrf_score,
    })
}
