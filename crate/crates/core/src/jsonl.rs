//! Line-oriented JSON reading shared by the file formats.

use std::io::{self, BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("read failed: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: not valid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl JsonlError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Io(_) => None,
            Self::InvalidUtf8 { line } | Self::Parse { line, .. } => Some(*line),
        }
    }
}

/// Iterates non-blank lines as `(1-based line number, text)`, without the line
/// terminator.
pub(crate) struct Lines<R> {
    source: R,
    buf: Vec<u8>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    pub(crate) fn new(source: R) -> Self {
        Self {
            source,
            buf: Vec::new(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for Lines<R> {
    type Item = Result<(usize, String), JsonlError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.source.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            let text = match std::str::from_utf8(&self.buf) {
                Ok(t) => t,
                Err(_) => return Some(Err(JsonlError::InvalidUtf8 { line: self.line })),
            };
            let text = text.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            return Some(Ok((self.line, text.to_owned())));
        }
    }
}

/// Parses every record of a JSON Lines stream into `T`.
pub(crate) fn records<T: DeserializeOwned, R: BufRead>(
    source: R,
) -> impl Iterator<Item = Result<(usize, T), JsonlError>> {
    Lines::new(source).map(|item| {
        let (line, text) = item?;
        let value = serde_json::from_str(&text).map_err(|e| JsonlError::Parse {
            line,
            message: e.to_string(),
        })?;
        Ok((line, value))
    })
}

pub(crate) fn write_record<T: Serialize, W: Write>(sink: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *sink, value).map_err(io::Error::other)?;
    sink.write_all(b"\n")
}

/// Reads a JSON Lines stream of `T`, failing on the first bad line.
pub fn read_all<T: DeserializeOwned, R: BufRead>(source: R) -> Result<Vec<T>, JsonlError> {
    records(source).map(|r| r.map(|(_, v)| v)).collect()
}

/// Writes each value as one JSON line.
pub fn write_all<'a, T: Serialize + 'a, W: Write>(
    mut sink: W,
    values: impl IntoIterator<Item = &'a T>,
) -> io::Result<()> {
    for v in values {
        write_record(&mut sink, v)?;
    }
    sink.flush()
}
