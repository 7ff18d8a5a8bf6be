//! Batch linking of mentions against a terminology with several encoders.
//!
//! [`Pipeline`] pairs each encoder's term embeddings with its mention
//! embeddings and links mentions in parallel on the current rayon pool. The
//! hot path works on integer term indices instead of strings, and scans term
//! vectors once per block of mentions rather than once per mention, but it
//! computes exactly the similarities, ranks and fused scores that
//! [`rank_terms`](crate::retrieval::rank_terms) followed by
//! [`rrf_fuse`](crate::retrieval::rrf_fuse) produce. Each mention's result
//! depends only on its own inputs, so output is bit-identical at any thread
//! count.

use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingSet;
use crate::jsonl::{self, JsonlError};
use crate::retrieval::{
    check_k, descending_key, reciprocal_rank_sum, unit_similarity, Aggregation, FusedEntry, FusedRanking,
    LinkResult, RetrievalError,
};
use crate::spans::Span;
use crate::terminology::Terminology;

/// Mentions processed together per term-matrix scan.
const BLOCK: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("at least one encoder is required")]
    NoEncoders,
    #[error("encoder {position}: term embeddings are `{terms}` but mention embeddings are `{mentions}`")]
    EncoderMismatch {
        position: usize,
        terms: String,
        mentions: String,
    },
    #[error("encoder `{encoder}`: term dim {terms} differs from mention dim {mentions}")]
    DimMismatch {
        encoder: String,
        terms: usize,
        mentions: usize,
    },
    #[error("encoder `{encoder}`: term embeddings are empty")]
    EmptyTermSet { encoder: String },
    #[error("encoder `{encoder}`: term id `{id}` is not an llt_code of the terminology")]
    UnknownTerm { encoder: String, id: String },
    #[error("encoder `{encoder}`: no embedding for mention `{id}`")]
    MissingMention { encoder: String, id: String },
    #[error("could not start thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Term and mention embeddings produced by the same encoder.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub terms: EmbeddingSet,
    pub mentions: EmbeddingSet,
}

impl EncoderPair {
    pub fn new(terms: EmbeddingSet, mentions: EmbeddingSet) -> Self {
        Self { terms, mentions }
    }
}

#[derive(Debug)]
struct Encoder {
    terms: EmbeddingSet,
    mentions: EmbeddingSet,
    /// Tie-break ordinal of each term row.
    ordinal_of_row: Vec<u32>,
}

/// A mention to link, as read from a mentions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    /// Key into the mention embedding files.
    pub id: String,
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub text: Option<String>,
}

impl Mention {
    /// Id used when a mention line carries none: `doc_id:start-end`.
    pub fn derived_id(doc_id: &str, start: usize, end: usize) -> String {
        format!("{doc_id}:{start}-{end}")
    }

    pub fn from_span(span: Span) -> Self {
        Self {
            id: Self::derived_id(&span.doc_id, span.start, span.end),
            doc_id: span.doc_id,
            start: span.start,
            end: span.end,
            text: span.text,
        }
    }
}

#[derive(Deserialize)]
struct MentionLine {
    id: Option<String>,
    doc_id: String,
    start: usize,
    end: usize,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Debug, Error)]
pub enum MentionError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("line {line}: start {start} must be less than end {end}")]
    EmptySpan { line: usize, start: usize, end: usize },
}

/// Streams mentions from JSON Lines `{"id"?, "doc_id", "start", "end", "text"?}`.
pub fn read_mentions<R: BufRead>(source: R) -> impl Iterator<Item = Result<Mention, MentionError>> {
    jsonl::records::<MentionLine, _>(source).map(|item| {
        let (line, m) = item?;
        if m.start >= m.end {
            return Err(MentionError::EmptySpan {
                line,
                start: m.start,
                end: m.end,
            });
        }
        Ok(Mention {
            id: m.id.unwrap_or_else(|| Mention::derived_id(&m.doc_id, m.start, m.end)),
            doc_id: m.doc_id,
            start: m.start,
            end: m.end,
            text: m.text,
        })
    })
}

/// Linking output for one mention.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub link: LinkResult,
    /// The first `top_n` fused entries.
    pub top: Vec<FusedEntry>,
}

/// Fused scores of one mention indexed by terminology record; 0 means the term
/// appeared in no ranking (real scores are always positive).
struct DenseFusion {
    scores: Vec<f64>,
}

#[derive(Default)]
struct Scratch {
    ranks: Vec<u32>,
    sims: Vec<f64>,
    keys: Vec<u128>,
    term_ranks: Vec<u32>,
}

#[inline]
fn pack(score: f64, ordinal: u32) -> u128 {
    (u128::from(descending_key(score)) << 64) | u128::from(ordinal)
}

#[inline]
fn unpack_ordinal(key: u128) -> u32 {
    key as u32
}

pub struct Pipeline {
    terminology: Terminology,
    encoders: Vec<Encoder>,
    k: f64,
    /// Tie-break ordinal (rank of llt_code in bytewise order) per record.
    ordinal_of_record: Vec<u32>,
    record_of_ordinal: Vec<u32>,
    /// PT ordinal (rank of pt_code in bytewise order) per record.
    pt_of_record: Vec<u32>,
    pt_count: usize,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("terms", &self.terminology.len())
            .field("encoders", &self.encoder_ids())
            .field("k", &self.k)
            .finish()
    }
}

impl Pipeline {
    /// Validates encoder pairing and term ids, and builds the tie-break
    /// orders.
    pub fn new(terminology: Terminology, pairs: Vec<EncoderPair>, k: f64) -> Result<Self, PipelineError> {
        check_k(k)?;
        if pairs.is_empty() {
            return Err(PipelineError::NoEncoders);
        }
        let records = terminology.records();
        let mut by_code: Vec<u32> = (0..records.len() as u32).collect();
        by_code.sort_by(|&a, &b| {
            records[a as usize]
                .llt_code
                .as_bytes()
                .cmp(records[b as usize].llt_code.as_bytes())
        });
        let mut ordinal_of_record = vec![0u32; records.len()];
        for (ordinal, &rec) in by_code.iter().enumerate() {
            ordinal_of_record[rec as usize] = ordinal as u32;
        }

        let mut pt_codes: Vec<&str> = records.iter().map(|r| r.pt_code.as_str()).collect();
        pt_codes.sort_unstable_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
        pt_codes.dedup();
        let pt_of_record = records
            .iter()
            .map(|r| {
                pt_codes
                    .binary_search_by(|p| p.as_bytes().cmp(r.pt_code.as_bytes()))
                    .expect("collected above") as u32
            })
            .collect();
        let pt_count = pt_codes.len();

        let mut encoders = Vec::with_capacity(pairs.len());
        for (position, EncoderPair { terms, mentions }) in pairs.into_iter().enumerate() {
            if terms.encoder_id() != mentions.encoder_id() {
                return Err(PipelineError::EncoderMismatch {
                    position,
                    terms: terms.encoder_id().to_owned(),
                    mentions: mentions.encoder_id().to_owned(),
                });
            }
            if terms.dim() != mentions.dim() {
                return Err(PipelineError::DimMismatch {
                    encoder: terms.encoder_id().to_owned(),
                    terms: terms.dim(),
                    mentions: mentions.dim(),
                });
            }
            if terms.is_empty() {
                return Err(PipelineError::EmptyTermSet {
                    encoder: terms.encoder_id().to_owned(),
                });
            }
            let ordinal_of_row = terms
                .ids()
                .iter()
                .map(|id| {
                    terminology
                        .index_of(id)
                        .map(|rec| ordinal_of_record[rec])
                        .ok_or_else(|| PipelineError::UnknownTerm {
                            encoder: terms.encoder_id().to_owned(),
                            id: id.clone(),
                        })
                })
                .collect::<Result<_, _>>()?;
            encoders.push(Encoder {
                terms,
                mentions,
                ordinal_of_row,
            });
        }
        Ok(Self {
            terminology,
            encoders,
            k,
            ordinal_of_record,
            record_of_ordinal: by_code,
            pt_of_record,
            pt_count,
        })
    }

    pub fn terminology(&self) -> &Terminology {
        &self.terminology
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn encoder_ids(&self) -> Vec<&str> {
        self.encoders.iter().map(|e| e.terms.encoder_id()).collect()
    }

    /// Fails on the first id, in input order, missing from any encoder's
    /// mention embeddings.
    pub fn check_mentions<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<(), PipelineError> {
        for id in ids {
            if let Some(enc) = self.encoders.iter().find(|e| e.mentions.position(id).is_none()) {
                return Err(PipelineError::MissingMention {
                    encoder: enc.terms.encoder_id().to_owned(),
                    id: id.to_owned(),
                });
            }
        }
        Ok(())
    }

    /// The complete fused ranking of one mention.
    pub fn fuse(&self, mention_id: &str) -> Result<FusedRanking, PipelineError> {
        self.check_mentions([mention_id])?;
        let mut scratch = Scratch::default();
        let dense = self.fuse_block(&[mention_id], &mut scratch).pop().expect("one mention");
        let entries = self.top_entries(&dense, usize::MAX);
        Ok(FusedRanking { k: self.k, entries })
    }

    /// Links one mention.
    pub fn link(&self, mention_id: &str, aggregation: Aggregation) -> Result<LinkResult, PipelineError> {
        Ok(self.run(&[mention_id], aggregation, 0)?.pop().expect("one mention").link)
    }

    /// Links every mention, in parallel on the current rayon pool. Results are
    /// in input order and each carries its first `top_n` fused entries.
    pub fn run(&self, mention_ids: &[&str], aggregation: Aggregation, top_n: usize) -> Result<Vec<Outcome>, PipelineError> {
        self.check_mentions(mention_ids.iter().copied())?;
        let blocks: Vec<Vec<Outcome>> = mention_ids
            .par_chunks(BLOCK)
            .map_init(Scratch::default, |scratch, block| {
                self.fuse_block(block, scratch)
                    .into_iter()
                    .map(|dense| Outcome {
                        link: self.link_dense(&dense, aggregation),
                        top: if top_n == 0 {
                            Vec::new()
                        } else {
                            self.top_entries(&dense, top_n)
                        },
                    })
                    .collect()
            })
            .collect();
        Ok(blocks.into_iter().flatten().collect())
    }

    /// Ranks and fuses a block of already-validated mentions.
    fn fuse_block(&self, block: &[&str], scratch: &mut Scratch) -> Vec<DenseFusion> {
        let n = self.terminology.len();
        let n_enc = self.encoders.len();
        scratch.ranks.clear();
        scratch.ranks.resize(block.len() * n * n_enc, 0);

        for (e, enc) in self.encoders.iter().enumerate() {
            let rows = enc.terms.len();
            let queries: Vec<&[f64]> = block
                .iter()
                .map(|id| enc.mentions.get(id).expect("validated"))
                .collect();
            scratch.sims.clear();
            scratch.sims.resize(block.len() * rows, 0.0);
            for row in 0..rows {
                let term = enc.terms.row(row);
                for (b, q) in queries.iter().enumerate() {
                    scratch.sims[b * rows + row] = unit_similarity(q, term);
                }
            }
            for b in 0..block.len() {
                let sims = &scratch.sims[b * rows..(b + 1) * rows];
                scratch.keys.clear();
                scratch
                    .keys
                    .extend(sims.iter().zip(&enc.ordinal_of_row).map(|(&s, &o)| pack(s, o)));
                scratch.keys.sort_unstable();
                let ranks = &mut scratch.ranks[b * n * n_enc..(b + 1) * n * n_enc];
                for (pos, &key) in scratch.keys.iter().enumerate() {
                    let rec = self.record_of_ordinal[unpack_ordinal(key) as usize] as usize;
                    ranks[rec * n_enc + e] = pos as u32 + 1;
                }
            }
        }

        (0..block.len())
            .map(|b| {
                let ranks = &scratch.ranks[b * n * n_enc..(b + 1) * n * n_enc];
                let scores = ranks
                    .chunks_exact(n_enc)
                    .map(|per_enc| {
                        scratch.term_ranks.clear();
                        scratch.term_ranks.extend(per_enc.iter().copied().filter(|&r| r > 0));
                        if scratch.term_ranks.is_empty() {
                            0.0
                        } else {
                            reciprocal_rank_sum(&mut scratch.term_ranks, self.k)
                        }
                    })
                    .collect();
                DenseFusion { scores }
            })
            .collect()
    }

    /// First `n` fused entries, score descending then llt_code ascending.
    fn top_entries(&self, dense: &DenseFusion, n: usize) -> Vec<FusedEntry> {
        let mut keys: Vec<u128> = dense
            .scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(rec, &s)| pack(s, self.ordinal_of_record[rec]))
            .collect();
        if n < keys.len() {
            keys.select_nth_unstable(n);
            keys.truncate(n);
        }
        keys.sort_unstable();
        keys.into_iter()
            .map(|key| {
                let rec = self.record_of_ordinal[unpack_ordinal(key) as usize] as usize;
                FusedEntry {
                    term_id: self.terminology.records()[rec].llt_code.clone(),
                    rrf_score: dense.scores[rec],
                }
            })
            .collect()
    }

    fn link_dense(&self, dense: &DenseFusion, aggregation: Aggregation) -> LinkResult {
        let present = dense.scores.iter().enumerate().filter(|(_, &s)| s > 0.0);
        let best_rec = match aggregation {
            Aggregation::TopLlt => present
                .min_by_key(|(rec, &s)| pack(s, self.ordinal_of_record[*rec]))
                .map(|(rec, _)| rec),
            Aggregation::PtMax => {
                // Best LLT per PT, then best PT with ties by pt_code.
                let mut best: Vec<Option<(u128, usize)>> = vec![None; self.pt_count];
                for (rec, &s) in present {
                    let key = pack(s, self.ordinal_of_record[rec]);
                    let slot = &mut best[self.pt_of_record[rec] as usize];
                    if slot.is_none_or(|(k, _)| key < k) {
                        *slot = Some((key, rec));
                    }
                }
                best.iter()
                    .enumerate()
                    .filter_map(|(pt, b)| b.map(|(_, rec)| (pack(dense.scores[rec], pt as u32), rec)))
                    .min_by_key(|(key, _)| *key)
                    .map(|(_, rec)| rec)
            }
        };
        // Every encoder has at least one term, so something is always present.
        let rec = best_rec.expect("nonempty fusion");
        let r = &self.terminology.records()[rec];
        LinkResult {
            llt_code: r.llt_code.clone(),
            pt_code: r.pt_code.clone(),
            pt_text: r.pt_text.clone(),
            rrf_score: dense.scores[rec],
        }
    }
}

/// A rayon pool with `threads` workers (at least one).
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::fixture_embed;
    use crate::retrieval::{link_mention, rank_terms, rrf_fuse};
    use crate::terminology::TermRecord;

    const TERMS: [(&str, &str, &str, &str); 6] = [
        ("10028813", "nausea", "10028813", "Nausea"),
        ("10028817", "feeling sick", "10028813", "Nausea"),
        ("10047700", "vomiting", "10047700", "Vomiting"),
        ("10019211", "headache", "10019211", "Headache"),
        ("10013573", "dizzy", "10013573", "Dizziness"),
        ("10037844", "rash", "10037844", "Rash"),
    ];

    fn terminology() -> Terminology {
        Terminology::from_records(TERMS.iter().map(|&(a, b, c, d)| TermRecord::new(a, b, c, d)).collect()).unwrap()
    }

    fn fixture_pair(dim: usize, terms: &[(&str, &str)], mentions: &[(&str, &str)]) -> EncoderPair {
        let enc = format!("fixture-d{dim}");
        let mut t = EmbeddingSet::new(&enc, dim).unwrap();
        for (id, text) in terms {
            t.push(*id, fixture_embed(text, dim).into_inner()).unwrap();
        }
        let mut m = EmbeddingSet::new(&enc, dim).unwrap();
        for (id, text) in mentions {
            m.push(*id, fixture_embed(text, dim).into_inner()).unwrap();
        }
        EncoderPair::new(t, m)
    }

    fn all_terms() -> Vec<(&'static str, &'static str)> {
        TERMS.iter().map(|&(code, text, _, _)| (code, text)).collect()
    }

    const MENTIONS: [(&str, &str); 4] = [("m1", "nausea"), ("m2", "bad headache"), ("m3", "dizzy spells"), ("m4", "sick")];

    fn pipeline(dims: &[usize]) -> Pipeline {
        let pairs = dims.iter().map(|&d| fixture_pair(d, &all_terms(), &MENTIONS)).collect();
        Pipeline::new(terminology(), pairs, 46.0).unwrap()
    }

    #[test]
    fn matches_rank_then_fuse() {
        let p = pipeline(&[16, 64, 7]);
        for (id, _) in MENTIONS {
            let rankings: Vec<_> = p
                .encoders
                .iter()
                .map(|e| {
                    let v = crate::Vector::new(e.mentions.get(id).unwrap().to_vec()).unwrap();
                    rank_terms(&v, &e.terms).unwrap()
                })
                .collect();
            let expected = rrf_fuse(&rankings, 46.0).unwrap();
            assert_eq!(p.fuse(id).unwrap(), expected, "{id}");
            for agg in [Aggregation::TopLlt, Aggregation::PtMax] {
                assert_eq!(p.link(id, agg).unwrap(), link_mention(&expected, p.terminology(), agg).unwrap());
            }
        }
    }

    #[test]
    fn exact_text_links() {
        let p = pipeline(&[64]);
        let link = p.link("m1", Aggregation::TopLlt).unwrap();
        assert_eq!((link.llt_code.as_str(), link.pt_text.as_str()), ("10028813", "Nausea"));
    }

    #[test]
    fn run_keeps_input_order_and_truncates() {
        let p = pipeline(&[32, 64]);
        let ids = ["m3", "m1", "m4", "m2", "m1"];
        let out = p.run(&ids, Aggregation::TopLlt, 2).unwrap();
        assert_eq!(out.len(), ids.len());
        for (id, o) in ids.iter().zip(&out) {
            assert_eq!(o.top.len(), 2);
            assert_eq!(o.link, p.link(id, Aggregation::TopLlt).unwrap());
            assert_eq!(o.top[0].term_id, o.link.llt_code);
        }
        let full = p.run(&["m1"], Aggregation::TopLlt, 100).unwrap();
        assert_eq!(full[0].top.len(), TERMS.len());
    }

    #[test]
    fn partial_term_sets() {
        // Second encoder only knows two terms; the rest get one contribution.
        let pairs = vec![
            fixture_pair(32, &all_terms(), &MENTIONS),
            fixture_pair(16, &[("10047700", "vomiting"), ("10037844", "rash")], &MENTIONS),
        ];
        let p = Pipeline::new(terminology(), pairs, 46.0).unwrap();
        let fused = p.fuse("m1").unwrap();
        assert_eq!(fused.len(), TERMS.len());
        let rankings: Vec<_> = p
            .encoders
            .iter()
            .map(|e| rank_terms(&crate::Vector::new(e.mentions.get("m1").unwrap().to_vec()).unwrap(), &e.terms).unwrap())
            .collect();
        assert_eq!(fused, rrf_fuse(&rankings, 46.0).unwrap());
    }

    #[test]
    fn construction_errors() {
        let t = terminology();
        assert!(matches!(Pipeline::new(t.clone(), vec![], 46.0), Err(PipelineError::NoEncoders)));
        let mut mismatched = fixture_pair(8, &all_terms(), &MENTIONS);
        mismatched.mentions = fixture_pair(16, &[], &MENTIONS).mentions;
        assert!(matches!(
            Pipeline::new(t.clone(), vec![mismatched], 46.0),
            Err(PipelineError::EncoderMismatch { position: 0, .. })
        ));
        let unknown = fixture_pair(8, &[("999", "x")], &MENTIONS);
        assert!(matches!(
            Pipeline::new(t.clone(), vec![unknown], 46.0),
            Err(PipelineError::UnknownTerm { id, .. }) if id == "999"
        ));
        let empty = fixture_pair(8, &[], &MENTIONS);
        assert!(matches!(Pipeline::new(t.clone(), vec![empty], 46.0), Err(PipelineError::EmptyTermSet { .. })));
        assert!(matches!(
            Pipeline::new(t, vec![fixture_pair(8, &all_terms(), &MENTIONS)], -1.0),
            Err(PipelineError::Retrieval(RetrievalError::InvalidK(_)))
        ));
    }

    #[test]
    fn missing_mention_names_first_in_order() {
        let p = pipeline(&[8]);
        let err = p.run(&["m1", "zz", "aa"], Aggregation::TopLlt, 0).unwrap_err();
        assert!(matches!(err, PipelineError::MissingMention { id, .. } if id == "zz"));
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let p = pipeline(&[16, 64]);
        let ids: Vec<&str> = MENTIONS.iter().map(|m| m.0).cycle().take(37).collect();
        let one = thread_pool(1).unwrap().install(|| p.run(&ids, Aggregation::PtMax, 3)).unwrap();
        let many = thread_pool(8).unwrap().install(|| p.run(&ids, Aggregation::PtMax, 3)).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn mention_lines() {
        let src = "{\"doc_id\":\"d\",\"start\":4,\"end\":15,\"text\":\"head ache\"}\n{\"id\":\"x\",\"doc_id\":\"d\",\"start\":1,\"end\":2}\n";
        let ms: Vec<Mention> = read_mentions(src.as_bytes()).collect::<Result<_, _>>().unwrap();
        assert_eq!(ms[0].id, "d:4-15");
        assert_eq!(ms[0].text.as_deref(), Some("head ache"));
        assert_eq!(ms[1].id, "x");
        assert_eq!(ms[1].text, None);
        let bad = "{\"doc_id\":\"d\",\"start\":4,\"end\":4}\n";
        assert!(matches!(read_mentions(bad.as_bytes()).next().unwrap(), Err(MentionError::EmptySpan { .. })));
    }
}
