//! Terminology loading and lookup.
//!
//! A terminology is a flat list of lowest-level terms (LLTs), each mapped to
//! exactly one preferred term (PT). The on-disk format is a tab-separated file
//! with the mandatory header `llt_code\tllt_text\tpt_code\tpt_text` and no
//! quoting: fields simply may not contain tabs or newlines.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

pub const HEADER: &str = "llt_code\tllt_text\tpt_code\tpt_text";

#[derive(Debug, Error)]
pub enum TerminologyError {
    #[error("failed to read terminology: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: terminology is not valid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("missing or malformed header, expected `llt_code<TAB>llt_text<TAB>pt_code<TAB>pt_text`")]
    MissingHeader,
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate llt_code `{0}`")]
    DuplicateLlt(String),
    #[error("pt_code `{0}` is given more than one pt_text")]
    InconsistentPt(String),
    #[error("terminology has no records")]
    Empty,
    #[error("unknown llt_code `{0}`")]
    UnknownLlt(String),
    #[error("unknown pt_code `{0}`")]
    UnknownPt(String),
}

/// One lowest-level term with its preferred term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermRecord {
    pub llt_code: String,
    pub llt_text: String,
    pub pt_code: String,
    pub pt_text: String,
}

impl TermRecord {
    pub fn new(
        llt_code: impl Into<String>,
        llt_text: impl Into<String>,
        pt_code: impl Into<String>,
        pt_text: impl Into<String>,
    ) -> Self {
        Self {
            llt_code: llt_code.into(),
            llt_text: llt_text.into(),
            pt_code: pt_code.into(),
            pt_text: pt_text.into(),
        }
    }
}

#[derive(Debug, Clone)]
struct PtBucket {
    pt_text: String,
    llts: Vec<usize>,
}

/// Validated, indexed terminology. Immutable once built.
#[derive(Debug, Clone)]
pub struct Terminology {
    records: Vec<TermRecord>,
    llt_index: HashMap<String, usize>,
    pt_index: HashMap<String, PtBucket>,
}

impl PartialEq for Terminology {
    fn eq(&self, other: &Self) -> bool {
        // Indices are derived from the records.
        self.records == other.records
    }
}

impl Eq for Terminology {}

fn check_field(field: &str, name: &str, line: usize) -> Result<(), TerminologyError> {
    if field.contains(['\t', '\n', '\r']) {
        return Err(TerminologyError::MalformedRow {
            line,
            reason: format!("{name} contains a tab or line break"),
        });
    }
    Ok(())
}

impl Terminology {
    /// Builds a terminology from records, enforcing every invariant.
    ///
    /// `line` numbers in errors are 1-based positions in `records` offset by
    /// one, which matches data lines of a TSV file with a header.
    pub fn from_records(records: Vec<TermRecord>) -> Result<Self, TerminologyError> {
        if records.is_empty() {
            return Err(TerminologyError::Empty);
        }
        let mut llt_index = HashMap::with_capacity(records.len());
        let mut pt_index: HashMap<String, PtBucket> = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            let line = i + 2;
            for (field, name) in [
                (&rec.llt_code, "llt_code"),
                (&rec.llt_text, "llt_text"),
                (&rec.pt_code, "pt_code"),
                (&rec.pt_text, "pt_text"),
            ] {
                if field.is_empty() {
                    return Err(TerminologyError::MalformedRow {
                        line,
                        reason: format!("empty {name}"),
                    });
                }
                check_field(field, name, line)?;
            }
            if llt_index.insert(rec.llt_code.clone(), i).is_some() {
                return Err(TerminologyError::DuplicateLlt(rec.llt_code.clone()));
            }
            match pt_index.get_mut(&rec.pt_code) {
                Some(bucket) => {
                    if bucket.pt_text != rec.pt_text {
                        return Err(TerminologyError::InconsistentPt(rec.pt_code.clone()));
                    }
                    bucket.llts.push(i);
                }
                None => {
                    pt_index.insert(
                        rec.pt_code.clone(),
                        PtBucket {
                            pt_text: rec.pt_text.clone(),
                            llts: vec![i],
                        },
                    );
                }
            }
        }
        Ok(Self {
            records,
            llt_index,
            pt_index,
        })
    }

    /// Parses a terminology TSV. LF and CRLF line endings are accepted and
    /// trailing blank lines are ignored; a blank line followed by more data is
    /// an error.
    pub fn load<R: BufRead>(mut source: R) -> Result<Self, TerminologyError> {
        let mut buf = Vec::new();
        let mut line_no = 0usize;
        let mut records = Vec::new();
        let mut blank_at: Option<usize> = None;
        let mut saw_header = false;

        loop {
            buf.clear();
            if source.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            line_no += 1;
            let text =
                std::str::from_utf8(&buf).map_err(|_| TerminologyError::InvalidUtf8 { line: line_no })?;
            let text = text.strip_suffix('\n').unwrap_or(text);
            let text = text.strip_suffix('\r').unwrap_or(text);

            if !saw_header {
                // Tolerate a UTF-8 byte order mark on the header only.
                if text.trim_start_matches('\u{feff}') != HEADER {
                    return Err(TerminologyError::MissingHeader);
                }
                saw_header = true;
                continue;
            }
            if text.is_empty() {
                blank_at.get_or_insert(line_no);
                continue;
            }
            if let Some(line) = blank_at {
                return Err(TerminologyError::MalformedRow {
                    line,
                    reason: "blank line before end of data".into(),
                });
            }
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != 4 {
                return Err(TerminologyError::MalformedRow {
                    line: line_no,
                    reason: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            if let Some(name) = fields
                .iter()
                .zip(["llt_code", "llt_text", "pt_code", "pt_text"])
                .find_map(|(f, name)| f.is_empty().then_some(name))
            {
                return Err(TerminologyError::MalformedRow {
                    line: line_no,
                    reason: format!("empty {name}"),
                });
            }
            if text.contains('\r') {
                return Err(TerminologyError::MalformedRow {
                    line: line_no,
                    reason: "stray carriage return".into(),
                });
            }
            records.push(TermRecord::new(fields[0], fields[1], fields[2], fields[3]));
        }
        if !saw_header {
            return Err(TerminologyError::MissingHeader);
        }
        Self::from_records(records)
    }

    /// Writes the terminology back out in the TSV format `load` accepts.
    pub fn write_tsv<W: Write>(&self, mut sink: W) -> io::Result<()> {
        writeln!(sink, "{HEADER}")?;
        for r in &self.records {
            writeln!(sink, "{}\t{}\t{}\t{}", r.llt_code, r.llt_text, r.pt_code, r.pt_text)?;
        }
        sink.flush()
    }

    pub fn records(&self) -> &[TermRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pt_count(&self) -> usize {
        self.pt_index.len()
    }

    /// Position of an LLT in record order.
    pub fn index_of(&self, llt_code: &str) -> Option<usize> {
        self.llt_index.get(llt_code).copied()
    }

    pub fn get(&self, llt_code: &str) -> Option<&TermRecord> {
        self.index_of(llt_code).map(|i| &self.records[i])
    }

    /// The preferred term `(pt_code, pt_text)` of an LLT.
    pub fn pt_of(&self, llt_code: &str) -> Result<(&str, &str), TerminologyError> {
        let rec = self
            .get(llt_code)
            .ok_or_else(|| TerminologyError::UnknownLlt(llt_code.to_owned()))?;
        Ok((&rec.pt_code, &rec.pt_text))
    }

    /// LLT codes of a PT, in record order.
    pub fn llts_of_pt(&self, pt_code: &str) -> Result<Vec<&str>, TerminologyError> {
        let bucket = self
            .pt_index
            .get(pt_code)
            .ok_or_else(|| TerminologyError::UnknownPt(pt_code.to_owned()))?;
        Ok(bucket
            .llts
            .iter()
            .map(|&i| self.records[i].llt_code.as_str())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "llt_code\tllt_text\tpt_code\tpt_text\n\
        10028813\tnausea\t10028813\tNausea\n\
        10019211\thead ache\t10019211\tHeadache\n";

    fn load(s: &str) -> Result<Terminology, TerminologyError> {
        Terminology::load(s.as_bytes())
    }

    #[test]
    fn loads_two_records() {
        let t = load(FIXTURE).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.pt_count(), 2);
        assert_eq!(t.records()[1].llt_text, "head ache");
    }

    #[test]
    fn pt_lookup() {
        let t = load(FIXTURE).unwrap();
        assert_eq!(t.pt_of("10028813").unwrap(), ("10028813", "Nausea"));
        assert_eq!(t.pt_of("10019211").unwrap(), ("10019211", "Headache"));
        assert!(matches!(t.pt_of("999"), Err(TerminologyError::UnknownLlt(c)) if c == "999"));
    }

    #[test]
    fn llts_of_pt_in_record_order() {
        let t = load("llt_code\tllt_text\tpt_code\tpt_text\na\tx\tP1\tAlpha\nb\ty\tP1\tAlpha\nc\tz\tP2\tBeta\n")
            .unwrap();
        assert_eq!(t.llts_of_pt("P1").unwrap(), vec!["a", "b"]);
        assert_eq!(t.llts_of_pt("P2").unwrap(), vec!["c"]);
        assert!(matches!(t.llts_of_pt("P9"), Err(TerminologyError::UnknownPt(_))));
    }

    #[test]
    fn duplicate_llt() {
        let src = format!("{FIXTURE}10028813\tqueasy\t10028813\tNausea\n");
        assert!(matches!(load(&src), Err(TerminologyError::DuplicateLlt(c)) if c == "10028813"));
    }

    #[test]
    fn inconsistent_pt() {
        let src = "llt_code\tllt_text\tpt_code\tpt_text\na\tx\tP1\tAlpha\nb\ty\tP1\tBeta\n";
        assert!(matches!(load(src), Err(TerminologyError::InconsistentPt(c)) if c == "P1"));
    }

    #[test]
    fn header_is_mandatory() {
        assert!(matches!(load(""), Err(TerminologyError::MissingHeader)));
        assert!(matches!(
            load("10028813\tnausea\t10028813\tNausea\n"),
            Err(TerminologyError::MissingHeader)
        ));
        assert!(matches!(
            load("llt_code,llt_text,pt_code,pt_text\n"),
            Err(TerminologyError::MissingHeader)
        ));
    }

    #[test]
    fn header_only_is_empty() {
        assert!(matches!(load("llt_code\tllt_text\tpt_code\tpt_text\n"), Err(TerminologyError::Empty)));
    }

    #[test]
    fn malformed_rows() {
        let three = "llt_code\tllt_text\tpt_code\tpt_text\na\tx\tP1\n";
        assert!(matches!(load(three), Err(TerminologyError::MalformedRow { line: 2, .. })));
        let five = "llt_code\tllt_text\tpt_code\tpt_text\na\tx\tP1\tAlpha\textra\n";
        assert!(matches!(load(five), Err(TerminologyError::MalformedRow { line: 2, .. })));
        let empty_text = "llt_code\tllt_text\tpt_code\tpt_text\na\t\tP1\tAlpha\n";
        assert!(matches!(load(empty_text), Err(TerminologyError::MalformedRow { line: 2, .. })));
    }

    #[test]
    fn crlf_and_trailing_blank_lines() {
        let src = FIXTURE.replace('\n', "\r\n") + "\r\n\n";
        let t = load(&src).unwrap();
        assert_eq!(t, load(FIXTURE).unwrap());
    }

    #[test]
    fn blank_line_inside_data_is_rejected() {
        let src = "llt_code\tllt_text\tpt_code\tpt_text\na\tx\tP1\tAlpha\n\nb\ty\tP2\tBeta\n";
        assert!(matches!(load(src), Err(TerminologyError::MalformedRow { line: 3, .. })));
    }

    #[test]
    fn no_trailing_newline() {
        let t = load(FIXTURE.trim_end()).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn duplicate_llt_text_is_allowed() {
        let src = "llt_code\tllt_text\tpt_code\tpt_text\na\tsick\tP1\tAlpha\nb\tsick\tP2\tBeta\n";
        assert_eq!(load(src).unwrap().len(), 2);
    }

    #[test]
    fn from_records_rejects_tabs() {
        let err = Terminology::from_records(vec![TermRecord::new("a", "x\ty", "P", "Q")]).unwrap_err();
        assert!(matches!(err, TerminologyError::MalformedRow { .. }));
    }
}
