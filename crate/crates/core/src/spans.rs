//! BIO label decoding into character-offset mention spans.
//!
//! Offsets count Unicode scalar values (chars), not bytes, and `end` is
//! exclusive. A span runs from the start of its `B` token to the end of its
//! last `I` token, so any whitespace between tokens is inside the span.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    B,
    I,
    O,
}

impl FromStr for Label {
    type Err = SpanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B" => Ok(Self::B),
            "I" => Ok(Self::I),
            "O" => Ok(Self::O),
            other => Err(SpanError::UnknownLabel(other.to_owned())),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::B => "B",
            Self::I => "I",
            Self::O => "O",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledToken {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

impl LabeledToken {
    pub fn new(start: usize, end: usize, label: Label) -> Self {
        Self { start, end, label }
    }
}

/// A mention in a document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub text: Option<String>,
}

impl Span {
    pub fn new(doc_id: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            start,
            end,
            text: None,
        }
    }
}

/// How an `I` that does not continue a span is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// An orphan `I` starts a new span.
    #[default]
    Lenient,
    /// An orphan `I` is an error.
    Strict,
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lenient" => Ok(Self::Lenient),
            "strict" => Ok(Self::Strict),
            other => Err(format!("unknown decode mode `{other}` (expected lenient or strict)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpanError {
    #[error("unknown label `{0}` (expected B, I or O)")]
    UnknownLabel(String),
    #[error("token {index}: I does not follow B or I")]
    OrphanI { index: usize },
    #[error("token {index}: tokens must be non-empty, ordered and non-overlapping")]
    UnorderedTokens { index: usize },
    #[error("span {start}..{end} does not align with token boundaries")]
    MisalignedSpan { start: usize, end: usize },
    #[error("span {start}..{end} overlaps another span")]
    OverlappingSpans { start: usize, end: usize },
    #[error("span {start}..{end} is outside a document of {len} characters")]
    OutOfBounds { start: usize, end: usize, len: usize },
}

fn check_tokens<I: IntoIterator<Item = (usize, usize)>>(tokens: I) -> Result<(), SpanError> {
    let mut prev_end = 0;
    for (index, (start, end)) in tokens.into_iter().enumerate() {
        if start >= end || start < prev_end {
            return Err(SpanError::UnorderedTokens { index });
        }
        prev_end = end;
    }
    Ok(())
}

/// Decodes a BIO-labelled token sequence into spans in document order.
pub fn decode_bio(doc_id: &str, tokens: &[LabeledToken], mode: DecodeMode) -> Result<Vec<Span>, SpanError> {
    check_tokens(tokens.iter().map(|t| (t.start, t.end)))?;
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (index, tok) in tokens.iter().enumerate() {
        match tok.label {
            Label::O => {
                if let Some((s, e)) = open.take() {
                    spans.push(Span::new(doc_id, s, e));
                }
            }
            Label::B => {
                if let Some((s, e)) = open.replace((tok.start, tok.end)) {
                    spans.push(Span::new(doc_id, s, e));
                }
            }
            Label::I => match open.as_mut() {
                Some((_, e)) => *e = tok.end,
                None => match mode {
                    DecodeMode::Lenient => open = Some((tok.start, tok.end)),
                    DecodeMode::Strict => return Err(SpanError::OrphanI { index }),
                },
            },
        }
    }
    if let Some((s, e)) = open {
        spans.push(Span::new(doc_id, s, e));
    }
    Ok(spans)
}

/// Labels `tokens` from spans whose boundaries fall on token boundaries.
/// Spans are matched by offsets only; `doc_id` is ignored.
pub fn encode_bio(spans: &[Span], tokens: &[(usize, usize)]) -> Result<Vec<Label>, SpanError> {
    check_tokens(tokens.iter().copied())?;
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(SpanError::OverlappingSpans {
                start: pair[1].start,
                end: pair[1].end,
            });
        }
    }
    let mut labels = vec![Label::O; tokens.len()];
    for span in sorted {
        let misaligned = || SpanError::MisalignedSpan {
            start: span.start,
            end: span.end,
        };
        if span.start >= span.end {
            return Err(misaligned());
        }
        let first = tokens
            .binary_search_by_key(&span.start, |t| t.0)
            .map_err(|_| misaligned())?;
        let last = tokens
            .binary_search_by_key(&span.end, |t| t.1)
            .map_err(|_| misaligned())?;
        if last < first {
            return Err(misaligned());
        }
        labels[first] = Label::B;
        labels[first + 1..=last].fill(Label::I);
    }
    Ok(labels)
}

/// Fills `span.text` from the document text using character offsets.
pub fn attach_text(span: &mut Span, document: &str) -> Result<(), SpanError> {
    if span.start >= span.end {
        return Err(SpanError::MisalignedSpan {
            start: span.start,
            end: span.end,
        });
    }
    let mut chars = document.char_indices().map(|(i, _)| i).chain(std::iter::once(document.len()));
    let out_of_bounds = || SpanError::OutOfBounds {
        start: span.start,
        end: span.end,
        len: document.chars().count(),
    };
    let from = chars.nth(span.start).ok_or_else(out_of_bounds)?;
    let to = chars.nth(span.end - span.start - 1).ok_or_else(out_of_bounds)?;
    span.text = Some(document[from..to].to_owned());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{B, I, O};

    const OFFSETS: [(usize, usize); 4] = [(0, 3), (4, 9), (10, 15), (16, 20)];

    fn tokens(labels: &[Label]) -> Vec<LabeledToken> {
        OFFSETS
            .iter()
            .zip(labels)
            .map(|(&(s, e), &l)| LabeledToken::new(s, e, l))
            .collect()
    }

    #[test]
    fn one_run() {
        let spans = decode_bio("d", &tokens(&[O, B, I, O]), DecodeMode::Strict).unwrap();
        assert_eq!(spans, vec![Span::new("d", 4, 15)]);
    }

    #[test]
    fn all_outside() {
        assert!(decode_bio("d", &tokens(&[O, O, O, O]), DecodeMode::Lenient).unwrap().is_empty());
        assert!(decode_bio("d", &[], DecodeMode::Strict).unwrap().is_empty());
    }

    #[test]
    fn orphan_i() {
        let toks = tokens(&[O, I, I]);
        assert_eq!(
            decode_bio("d", &toks, DecodeMode::Lenient).unwrap(),
            vec![Span::new("d", 4, 15)]
        );
        assert_eq!(decode_bio("d", &toks, DecodeMode::Strict), Err(SpanError::OrphanI { index: 1 }));
    }

    #[test]
    fn adjacent_b_starts_new_span() {
        let spans = decode_bio("d", &tokens(&[B, B, I, B]), DecodeMode::Strict).unwrap();
        assert_eq!(
            spans,
            vec![Span::new("d", 0, 3), Span::new("d", 4, 15), Span::new("d", 16, 20)]
        );
    }

    #[test]
    fn unordered_tokens() {
        let toks = vec![LabeledToken::new(4, 9, B), LabeledToken::new(0, 3, O)];
        assert_eq!(
            decode_bio("d", &toks, DecodeMode::Lenient),
            Err(SpanError::UnorderedTokens { index: 1 })
        );
        let overlapping = vec![LabeledToken::new(0, 5, B), LabeledToken::new(4, 9, I)];
        assert!(decode_bio("d", &overlapping, DecodeMode::Lenient).is_err());
        let empty = vec![LabeledToken::new(3, 3, B)];
        assert!(decode_bio("d", &empty, DecodeMode::Strict).is_err());
    }

    #[test]
    fn encode_first_example() {
        let labels = encode_bio(&[Span::new("d", 4, 15)], &OFFSETS).unwrap();
        assert_eq!(labels, vec![O, B, I, O]);
        assert_eq!(encode_bio(&[], &OFFSETS).unwrap(), vec![O; 4]);
    }

    #[test]
    fn encode_errors() {
        assert!(matches!(
            encode_bio(&[Span::new("d", 5, 15)], &OFFSETS),
            Err(SpanError::MisalignedSpan { .. })
        ));
        assert!(matches!(
            encode_bio(&[Span::new("d", 4, 12)], &OFFSETS),
            Err(SpanError::MisalignedSpan { .. })
        ));
        assert!(matches!(
            encode_bio(&[Span::new("d", 0, 9), Span::new("d", 4, 15)], &OFFSETS),
            Err(SpanError::OverlappingSpans { .. })
        ));
    }

    #[test]
    fn attach_text_uses_chars() {
        let doc = "ça me donne la nausée";
        let mut span = Span::new("d", 15, 21);
        attach_text(&mut span, doc).unwrap();
        assert_eq!(span.text.as_deref(), Some("nausée"));
        let mut first = Span::new("d", 0, 2);
        attach_text(&mut first, doc).unwrap();
        assert_eq!(first.text.as_deref(), Some("ça"));
        let mut past = Span::new("d", 15, 22);
        assert!(matches!(attach_text(&mut past, doc), Err(SpanError::OutOfBounds { len: 21, .. })));
    }

    #[test]
    fn labels_parse() {
        assert_eq!("B".parse::<Label>().unwrap(), B);
        assert_eq!("X".parse::<Label>(), Err(SpanError::UnknownLabel("X".into())));
    }

    /// Token widths and gaps plus per-token "in span" / "starts span" bits.
    fn aligned_case() -> impl Strategy<Value = (Vec<(usize, usize)>, Vec<Span>)> {
        prop::collection::vec((1usize..6, 0usize..3, any::<bool>(), any::<bool>()), 0..40).prop_map(|cells| {
            let mut pos = 0;
            let mut toks = Vec::new();
            let mut spans: Vec<Span> = Vec::new();
            let mut prev_in = false;
            for (width, gap, inside, starts) in cells {
                let (s, e) = (pos + gap, pos + gap + width);
                pos = e;
                toks.push((s, e));
                if inside {
                    if prev_in && !starts {
                        spans.last_mut().unwrap().end = e;
                    } else {
                        spans.push(Span::new("doc", s, e));
                    }
                }
                prev_in = inside;
            }
            (toks, spans)
        })
    }

    proptest! {
        #[test]
        fn round_trip((toks, spans) in aligned_case()) {
            let labels = encode_bio(&spans, &toks).unwrap();
            let labelled: Vec<LabeledToken> =
                toks.iter().zip(&labels).map(|(&(s, e), &l)| LabeledToken::new(s, e, l)).collect();
            for mode in [DecodeMode::Lenient, DecodeMode::Strict] {
                prop_assert_eq!(&decode_bio("doc", &labelled, mode).unwrap(), &spans);
            }
        }

        #[test]
        fn decoded_spans_sorted_and_disjoint(labels in prop::collection::vec(prop_oneof![Just(B), Just(I), Just(O)], 0..30)) {
            let toks: Vec<LabeledToken> =
                labels.iter().enumerate().map(|(i, &l)| LabeledToken::new(2 * i, 2 * i + 1, l)).collect();
            let spans = decode_bio("d", &toks, DecodeMode::Lenient).unwrap();
            for w in spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for s in &spans {
                prop_assert!(s.start < s.end);
            }
            match decode_bio("d", &toks, DecodeMode::Strict) {
                Ok(strict) => prop_assert_eq!(strict, spans),
                Err(SpanError::OrphanI { index }) => prop_assert_eq!(toks[index].label, I),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
