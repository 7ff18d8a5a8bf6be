//! Span-level precision, recall and F1 for normalized mentions, reported
//! overall and on the subset of preferred terms never seen in training.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

/// A normalized mention: character span plus preferred-term code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Annotation {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub pt_code: String,
}

impl Annotation {
    pub fn new(doc_id: impl Into<String>, start: usize, end: usize, pt_code: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            start,
            end,
            pt_code: pt_code.into(),
        }
    }

    fn sort_key(&self) -> (&str, usize, usize, &str) {
        (&self.doc_id, self.start, self.end, &self.pt_code)
    }
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("line {line}: start {start} must be less than end {end}")]
    EmptySpan { line: usize, start: usize, end: usize },
}

/// Reads annotation JSON Lines. Extra fields (such as the `pt_text` and
/// `rrf_score` of prediction files) are ignored.
pub fn read_annotations<R: BufRead>(source: R) -> Result<Vec<Annotation>, AnnotationError> {
    jsonl::records::<Annotation, _>(source)
        .map(|item| {
            let (line, a) = item?;
            if a.start >= a.end {
                return Err(AnnotationError::EmptySpan {
                    line,
                    start: a.start,
                    end: a.end,
                });
            }
            Ok(a)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Offsets must be identical.
    Strict,
    /// Spans must share at least one character.
    #[default]
    Overlap,
}

impl MatchMode {
    fn matches(self, pred: &Annotation, gold: &Annotation) -> bool {
        match self {
            Self::Strict => pred.start == gold.start && pred.end == gold.end,
            Self::Overlap => pred.start < gold.end && gold.start < pred.end,
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Strict => "strict",
            Self::Overlap => "overlap",
        })
    }
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(Self::Strict),
            "overlap" => Ok(Self::Overlap),
            other => Err(format!("unknown match mode `{other}` (expected strict or overlap)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Greedy one-to-one matching.
///
/// Predictions are visited in `(doc_id, start, end, pt_code)` order; each takes
/// the first still-unmatched gold (same order) with the same document, the
/// same `pt_code` and a span relation satisfying `mode`.
pub fn match_annotations(preds: &[Annotation], golds: &[Annotation], mode: MatchMode) -> Counts {
    let mut sorted_golds: Vec<&Annotation> = golds.iter().collect();
    sorted_golds.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut buckets: HashMap<(&str, &str), Vec<(&Annotation, bool)>> = HashMap::new();
    for g in sorted_golds {
        buckets.entry((&g.doc_id, &g.pt_code)).or_default().push((g, false));
    }

    let mut sorted_preds: Vec<&Annotation> = preds.iter().collect();
    sorted_preds.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut tp = 0;
    for p in sorted_preds {
        let Some(bucket) = buckets.get_mut(&(p.doc_id.as_str(), p.pt_code.as_str())) else {
            continue;
        };
        if let Some(slot) = bucket.iter_mut().find(|(g, used)| !used && mode.matches(p, g)) {
            slot.1 = true;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: preds.len() - tp,
        fn_: golds.len() - tp,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    let sum = precision + recall;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / sum
    }
}

/// `(precision, recall, f1)` from counts, with 0 for any zero denominator.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f1_from_pr(p, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for Score {
    fn from(c: Counts) -> Self {
        let (precision, recall, f1) = prf(c.tp, c.fp, c.fn_);
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Score,
    pub unseen: Score,
    /// True when no training annotations were given, in which case `unseen`
    /// is a copy of `overall`.
    pub unseen_mirrors_overall: bool,
    pub match_mode: MatchMode,
}

/// Scores `preds` against `golds`, overall and restricted to PT codes absent
/// from `train_golds`.
pub fn evaluate(
    preds: &[Annotation],
    golds: &[Annotation],
    train_golds: Option<&[Annotation]>,
    mode: MatchMode,
) -> EvalReport {
    let overall = Score::from(match_annotations(preds, golds, mode));
    let Some(train) = train_golds else {
        return EvalReport {
            overall,
            unseen: overall,
            unseen_mirrors_overall: true,
            match_mode: mode,
        };
    };
    let seen: HashSet<&str> = train.iter().map(|a| a.pt_code.as_str()).collect();
    let unseen_only = |xs: &[Annotation]| -> Vec<Annotation> {
        xs.iter()
            .filter(|a| !seen.contains(a.pt_code.as_str()))
            .cloned()
            .collect()
    };
    let unseen = Score::from(match_annotations(&unseen_only(preds), &unseen_only(golds), mode));
    EvalReport {
        overall,
        unseen,
        unseen_mirrors_overall: false,
        match_mode: mode,
    }
}

impl EvalReport {
    /// Plain-text results table with three decimals.
    pub fn table(&self, system: &str) -> String {
        let width = system.len().max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:width$}  {:<30}  {:<30}", "Model", "Overall", "Unseen");
        let _ = writeln!(
            out,
            "{:width$}  {:<9}  {:<6}  {:<9}  {:<9}  {:<6}  {:<9}",
            "", "Precision", "Recall", "F1-score", "Precision", "Recall", "F1-score"
        );
        let o = &self.overall;
        let u = &self.unseen;
        let _ = writeln!(
            out,
            "{:width$}  {:<9.3}  {:<6.3}  {:<9.3}  {:<9.3}  {:<6.3}  {:<9.3}",
            system, o.precision, o.recall, o.f1, u.precision, u.recall, u.f1
        );
        out
    }
}
