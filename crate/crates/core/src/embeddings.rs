//! Per-encoder embedding sets.
//!
//! An embedding file is JSON Lines: a meta line `{"encoder": .., "dim": ..}`
//! followed by one `{"id": .., "v": [..]}` line per entry. Every vector is
//! L2-normalized when it enters a set, so similarity downstream is a plain dot
//! product. Sets from different encoders are independent spaces and may have
//! different dimensions.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

/// Norms this close to 1 are treated as already normalized and left untouched,
/// which makes normalization idempotent and write → load bit-exact.
const UNIT_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq, Clone, Copy)]
pub enum VectorError {
    #[error("vector has no components")]
    Empty,
    #[error("vector has a non-finite component")]
    NonFinite,
    #[error("vector is all zeros")]
    Zero,
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("bad meta line: {0}")]
    BadMeta(String),
    #[error("line {line}: bad entry: {message}")]
    BadEntry { line: usize, message: String },
    #[error("`{id}`: expected {expected} components, found {found}")]
    DimMismatch { id: String, expected: usize, found: usize },
    #[error("`{0}`: non-finite component")]
    NonFinite(String),
    #[error("`{0}`: zero vector cannot be normalized")]
    ZeroVector(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
}

impl EmbeddingError {
    fn for_vector(id: &str, e: VectorError, expected: usize) -> Self {
        match e {
            VectorError::Empty => Self::DimMismatch {
                id: id.to_owned(),
                expected,
                found: 0,
            },
            VectorError::NonFinite => Self::NonFinite(id.to_owned()),
            VectorError::Zero => Self::ZeroVector(id.to_owned()),
        }
    }
}

/// Scales `v` to unit L2 norm in place.
///
/// The norm is computed on a max-abs–scaled copy so large or tiny magnitudes
/// neither overflow nor underflow.
pub fn normalize_in_place(v: &mut [f64]) -> Result<(), VectorError> {
    if v.is_empty() {
        return Err(VectorError::Empty);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(VectorError::NonFinite);
    }
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Err(VectorError::Zero);
    }
    let scaled_sq: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    let root = scaled_sq.sqrt();
    if (scale * root - 1.0).abs() <= UNIT_SLACK {
        return Ok(());
    }
    for x in v.iter_mut() {
        *x = (*x / scale) / root;
    }
    Ok(())
}

/// A finite real vector with at least one component.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self, VectorError> {
        if components.is_empty() {
            return Err(VectorError::Empty);
        }
        if components.iter().any(|x| !x.is_finite()) {
            return Err(VectorError::NonFinite);
        }
        Ok(Self(components))
    }

    /// A unit-norm copy of `components`.
    pub fn normalized(mut components: Vec<f64>) -> Result<Self, VectorError> {
        normalize_in_place(&mut components)?;
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    encoder: String,
    dim: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    id: String,
    v: Vec<f64>,
}

#[derive(Serialize)]
struct EntryOut<'a> {
    id: &'a str,
    v: &'a [f64],
}

/// Unit-norm vectors of one encoder, keyed by id, in insertion order.
///
/// Vectors live in one contiguous row-major buffer.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    encoder_id: String,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        self.encoder_id == other.encoder_id
            && self.dim == other.dim
            && self.ids == other.ids
            && self.data == other.data
    }
}

impl EmbeddingSet {
    pub fn new(encoder_id: impl Into<String>, dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::BadMeta("dim must be at least 1".into()));
        }
        Ok(Self {
            encoder_id: encoder_id.into(),
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    /// Adds an entry, normalizing the vector.
    pub fn push(&mut self, id: impl Into<String>, mut v: Vec<f64>) -> Result<(), EmbeddingError> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                id,
                expected: self.dim,
                found: v.len(),
            });
        }
        normalize_in_place(&mut v).map_err(|e| EmbeddingError::for_vector(&id, e, self.dim))?;
        if self.index.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(&v);
        Ok(())
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|r| self.row(r))
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &[f64])> + '_ {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// Parses an embedding file.
    pub fn load<R: BufRead>(source: R) -> Result<Self, EmbeddingError> {
        let mut lines = jsonl::Lines::new(source);
        let (_, meta_text) = lines
            .next()
            .transpose()?
            .ok_or_else(|| EmbeddingError::BadMeta("file is empty".into()))?;
        let meta: MetaLine =
            serde_json::from_str(&meta_text).map_err(|e| EmbeddingError::BadMeta(e.to_string()))?;
        let mut set = Self::new(meta.encoder, meta.dim)?;
        for item in lines {
            let (line, text) = item?;
            let entry: EntryLine = serde_json::from_str(&text).map_err(|e| EmbeddingError::BadEntry {
                line,
                message: e.to_string(),
            })?;
            set.push(entry.id, entry.v)?;
        }
        Ok(set)
    }

    /// Writes the meta line, then entries in stored order. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn write<W: Write>(&self, mut sink: W) -> io::Result<()> {
        jsonl::write_record(
            &mut sink,
            &MetaLine {
                encoder: self.encoder_id.clone(),
                dim: self.dim,
            },
        )?;
        for (id, v) in self.iter() {
            jsonl::write_record(&mut sink, &EntryOut { id, v })?;
        }
        sink.flush()
    }
}

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Deterministic hashed character-trigram embedding.
///
/// The text is lowercased and padded as `#text#`; each character trigram is
/// hashed with 64-bit FNV-1a, the hash modulo `dim` picks a component and the
/// hash's top bit picks the sign. Padded strings shorter than three characters
/// contribute themselves as the only feature. An all-zero accumulation falls
/// back to the first basis vector.
///
/// # Panics
///
/// If `dim` is zero.
pub fn fixture_embed(text: &str, dim: usize) -> Vector {
    assert!(dim >= 1, "fixture_embed needs dim >= 1");
    let padded: Vec<char> = std::iter::once('#')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once('#'))
        .collect();
    let mut acc = vec![0.0f64; dim];
    let mut add = |feature: &[char]| {
        let s: String = feature.iter().collect();
        let h = fnv1a64(s.as_bytes());
        let idx = (h % dim as u64) as usize;
        acc[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    if padded.len() < 3 {
        add(&padded);
    } else {
        padded.windows(3).for_each(&mut add);
    }
    if acc.iter().all(|&x| x == 0.0) {
        acc[0] = 1.0;
    }
    Vector::normalized(acc).expect("accumulated counts are finite and nonzero")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(s: &str) -> Result<EmbeddingSet, EmbeddingError> {
        EmbeddingSet::load(s.as_bytes())
    }

    #[test]
    fn three_four_five() {
        let set = load("{\"encoder\":\"e\",\"dim\":2}\n{\"id\":\"a\",\"v\":[3.0,4.0]}\n").unwrap();
        assert_eq!(set.get("a").unwrap(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_vector() {
        let err = load("{\"encoder\":\"e\",\"dim\":2}\n{\"id\":\"a\",\"v\":[0.0,0.0]}\n").unwrap_err();
        assert!(matches!(err, EmbeddingError::ZeroVector(id) if id == "a"));
    }

    #[test]
    fn dim_mismatch() {
        let err = load("{\"encoder\":\"e\",\"dim\":2}\n{\"id\":\"a\",\"v\":[1,2,3]}\n").unwrap_err();
        assert!(matches!(err, EmbeddingError::DimMismatch { expected: 2, found: 3, .. }));
    }

    #[test]
    fn duplicate_id() {
        let src = "{\"encoder\":\"e\",\"dim\":1}\n{\"id\":\"a\",\"v\":[1]}\n{\"id\":\"a\",\"v\":[2]}\n";
        assert!(matches!(load(src), Err(EmbeddingError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn bad_meta() {
        assert!(matches!(load(""), Err(EmbeddingError::BadMeta(_))));
        assert!(matches!(load("{\"encoder\":\"e\"}\n"), Err(EmbeddingError::BadMeta(_))));
        assert!(matches!(load("{\"encoder\":\"e\",\"dim\":0}\n"), Err(EmbeddingError::BadMeta(_))));
        assert!(matches!(load("{\"encoder\":\"e\",\"dim\":-1}\n"), Err(EmbeddingError::BadMeta(_))));
        assert!(matches!(load("{\"id\":\"a\",\"v\":[1]}\n"), Err(EmbeddingError::BadMeta(_))));
    }

    #[test]
    fn non_finite_tokens_are_rejected() {
        let src = "{\"encoder\":\"e\",\"dim\":1}\n{\"id\":\"a\",\"v\":[NaN]}\n";
        assert!(matches!(load(src), Err(EmbeddingError::BadEntry { line: 2, .. })));
        let mut set = EmbeddingSet::new("e", 2).unwrap();
        let err = set.push("x", vec![f64::INFINITY, 1.0]).unwrap_err();
        assert!(matches!(err, EmbeddingError::NonFinite(id) if id == "x"));
    }

    #[test]
    fn meta_only_file() {
        let set = load("{\"encoder\":\"e\",\"dim\":3}\n").unwrap();
        assert!(set.is_empty());
        let mut out = Vec::new();
        set.write(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"encoder\":\"e\",\"dim\":3}\n");
    }

    #[test]
    fn write_two_entries_is_three_lines() {
        let mut set = EmbeddingSet::new("enc", 2).unwrap();
        set.push("a", vec![3.0, 4.0]).unwrap();
        set.push("b", vec![1.0, 0.0]).unwrap();
        let mut out = Vec::new();
        set.write(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(load(&text).unwrap(), set);
    }

    #[test]
    fn extreme_magnitudes_normalize() {
        let mut big = vec![1e300, 1e300];
        normalize_in_place(&mut big).unwrap();
        assert!((big[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let mut tiny = vec![1e-310, 0.0];
        normalize_in_place(&mut tiny).unwrap();
        assert_eq!(tiny, vec![1.0, 0.0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut v = vec![0.3, -1.7, 2.2, 9.0];
        normalize_in_place(&mut v).unwrap();
        let once = v.clone();
        normalize_in_place(&mut v).unwrap();
        assert_eq!(v, once);
    }

    #[test]
    fn fixture_is_deterministic_and_unit() {
        for text in ["nausea", "", "a", "HEAD ache", "déjà vu 💊"] {
            for dim in [1, 2, 7, 64, 256] {
                let a = fixture_embed(text, dim);
                let b = fixture_embed(text, dim);
                assert_eq!(a, b);
                assert_eq!(a.dim(), dim);
                assert!((a.norm() - 1.0).abs() <= 1e-6, "{text:?} {dim}");
            }
        }
    }

    #[test]
    fn fixture_lowercases() {
        assert_eq!(fixture_embed("Nausea", 32), fixture_embed("nausea", 32));
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
