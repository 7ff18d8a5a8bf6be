use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use adenorm::evaluation::read_annotations;
use adenorm::pipeline::{read_mentions, thread_pool, EncoderPair};
use adenorm::spans::attach_text;
use adenorm::{
    decode_bio, evaluate, fixture_embed, Aggregation, DecodeMode, EmbeddingSet, LabeledToken, Label, Mention,
    Pipeline, Terminology,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Cli, Command, PipelineArgs};

/// Mentions linked per batch while streaming the mentions file.
const MENTION_BATCH: usize = 4096;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or unreadable input paths.
    Usage(String),
    /// Malformed or inconsistent data.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) => f.write_str(m),
        }
    }
}

fn data(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

fn create(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_err(e: io::Error) -> CliError {
    CliError::Data(format!("write failed: {e}"))
}

fn write_line<T: Serialize>(sink: &mut dyn Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer(&mut *sink, value).map_err(|e| write_err(io::Error::other(e)))?;
    sink.write_all(b"\n").map_err(write_err)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli
        .threads
        .map(usize::from)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match cli.command {
        Command::Decode { input, output, mode } => decode(&input, output.as_ref(), mode),
        Command::EmbedFixture {
            input,
            terminology,
            output,
            dim,
            id_field,
            text_field,
        } => {
            let dim = dim as usize;
            match (input, terminology) {
                (Some(input), _) => embed_texts(&input, output.as_ref(), dim, &id_field, &text_field),
                (None, Some(tsv)) => embed_terminology(&tsv, output.as_ref(), dim),
                (None, None) => Err(CliError::Usage("one of --input or --terminology is required".into())),
            }
        }
        Command::Normalize { config, output } => {
            link(&config, output.as_ref(), threads, cli.k, cli.aggregation, None)
        }
        Command::Rank { config, top_n, output } => link(
            &config,
            output.as_ref(),
            threads,
            cli.k,
            cli.aggregation,
            Some(top_n as usize),
        ),
        Command::Evaluate {
            predictions,
            gold,
            train_gold,
        } => evaluate_files(&predictions, &gold, train_gold.as_deref(), cli.match_mode),
    }
}

#[derive(Deserialize)]
struct TokenLine {
    start: usize,
    end: usize,
    label: String,
}

#[derive(Deserialize)]
struct LabelsLine {
    doc_id: String,
    #[serde(default)]
    text: Option<String>,
    tokens: Vec<TokenLine>,
}

#[derive(Serialize)]
struct MentionOut<'a> {
    doc_id: &'a str,
    start: usize,
    end: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
}

fn for_each_line(
    path: &Path,
    reader: impl BufRead,
    mut f: impl FnMut(&str) -> Result<(), LineError>,
) -> Result<(), CliError> {
    for (i, line) in reader.split(b'\n').enumerate() {
        let line_no = i + 1;
        let bytes = line.map_err(|e| data(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| data(path, format!("line {line_no}: not valid UTF-8")))?;
        let text = text.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        f(text).map_err(|e| match e {
            LineError::Bad(m) => data(path, format!("line {line_no}: {m}")),
            LineError::Fatal(e) => e,
        })?;
    }
    Ok(())
}

/// Failure while handling one input line.
enum LineError {
    Bad(String),
    Fatal(CliError),
}

impl From<String> for LineError {
    fn from(m: String) -> Self {
        Self::Bad(m)
    }
}

impl From<&str> for LineError {
    fn from(m: &str) -> Self {
        Self::Bad(m.to_owned())
    }
}

fn decode(input: &Path, output: Option<&PathBuf>, mode: DecodeMode) -> Result<(), CliError> {
    let reader = open(input)?;
    let mut sink = create(output)?;
    for_each_line(input, reader, |text| {
        let doc: LabelsLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let tokens = doc
            .tokens
            .iter()
            .map(|t| Ok(LabeledToken::new(t.start, t.end, t.label.parse::<Label>().map_err(|e| e.to_string())?)))
            .collect::<Result<Vec<_>, String>>()?;
        let mut spans = decode_bio(&doc.doc_id, &tokens, mode).map_err(|e| e.to_string())?;
        if let Some(doc_text) = &doc.text {
            for span in &mut spans {
                attach_text(span, doc_text).map_err(|e| e.to_string())?;
            }
        }
        for s in &spans {
            let out = MentionOut {
                doc_id: &s.doc_id,
                start: s.start,
                end: s.end,
                text: s.text.as_deref(),
            };
            write_line(sink.as_mut(), &out).map_err(LineError::Fatal)?;
        }
        Ok(())
    })?;
    sink.flush().map_err(write_err)
}

fn string_field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<Option<&'a str>, String> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(format!("field `{name}` must be a string")),
    }
}

/// The id of a texts line: the `id_field` value, or for mention lines without
/// one the derived `doc_id:start-end`.
fn line_id(obj: &serde_json::Map<String, Value>, id_field: &str) -> Result<String, String> {
    if let Some(id) = string_field(obj, id_field)? {
        return Ok(id.to_owned());
    }
    let offsets = (
        string_field(obj, "doc_id")?,
        obj.get("start").and_then(Value::as_u64),
        obj.get("end").and_then(Value::as_u64),
    );
    match offsets {
        (Some(doc), Some(start), Some(end)) => Ok(Mention::derived_id(doc, start as usize, end as usize)),
        _ => Err(format!("missing string field `{id_field}`")),
    }
}

fn embed_texts(
    input: &Path,
    output: Option<&PathBuf>,
    dim: usize,
    id_field: &str,
    text_field: &str,
) -> Result<(), CliError> {
    let reader = open(input)?;
    let mut set = EmbeddingSet::new(format!("fixture-d{dim}"), dim).map_err(|e| CliError::Usage(e.to_string()))?;
    for_each_line(input, reader, |text| {
        let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let obj = value.as_object().ok_or("expected a JSON object")?;
        let id = line_id(obj, id_field)?;
        let body = string_field(obj, text_field)?.ok_or_else(|| format!("missing string field `{text_field}`"))?;
        set.push(id, fixture_embed(body, dim).into_inner())
            .map_err(|e| LineError::Bad(e.to_string()))
    })?;
    let sink = create(output)?;
    set.write(sink).map_err(write_err)
}

fn embed_terminology(tsv: &Path, output: Option<&PathBuf>, dim: usize) -> Result<(), CliError> {
    let terminology = Terminology::load(open(tsv)?).map_err(|e| data(tsv, e))?;
    let mut set = EmbeddingSet::new(format!("fixture-d{dim}"), dim).map_err(|e| CliError::Usage(e.to_string()))?;
    for r in terminology.records() {
        set.push(r.llt_code.clone(), fixture_embed(&r.llt_text, dim).into_inner())
            .map_err(|e| data(tsv, e))?;
    }
    set.write(create(output)?).map_err(write_err)
}

fn load_embeddings(path: &Path) -> Result<EmbeddingSet, CliError> {
    EmbeddingSet::load(open(path)?).map_err(|e| data(path, e))
}

#[derive(Serialize)]
struct Prediction<'a> {
    doc_id: &'a str,
    start: usize,
    end: usize,
    pt_code: &'a str,
    pt_text: &'a str,
    rrf_score: f64,
}

#[derive(Serialize)]
struct FusedOut<'a> {
    llt: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct RankDump<'a> {
    mention_id: &'a str,
    fused: Vec<FusedOut<'a>>,
    pt_code: &'a str,
    pt_text: &'a str,
}

fn link(
    config: &PipelineArgs,
    output: Option<&PathBuf>,
    threads: usize,
    k: f64,
    aggregation: Aggregation,
    top_n: Option<usize>,
) -> Result<(), CliError> {
    if config.term_embeddings.len() != config.mention_embeddings.len() {
        return Err(CliError::Usage(format!(
            "{} --term-embeddings but {} --mention-embeddings; give one of each per encoder",
            config.term_embeddings.len(),
            config.mention_embeddings.len()
        )));
    }
    let terminology = Terminology::load(open(&config.terminology)?).map_err(|e| data(&config.terminology, e))?;
    let mut pairs = Vec::with_capacity(config.term_embeddings.len());
    for (t, m) in config.term_embeddings.iter().zip(&config.mention_embeddings) {
        pairs.push(EncoderPair::new(load_embeddings(t)?, load_embeddings(m)?));
    }
    let pipeline = Pipeline::new(terminology, pairs, k).map_err(|e| CliError::Data(e.to_string()))?;
    let pool = thread_pool(threads).map_err(|e| CliError::Usage(e.to_string()))?;

    let mentions_reader = open(&config.mentions)?;
    let mut sink = create(output)?;
    let mut mentions = read_mentions(mentions_reader);
    loop {
        let batch: Vec<Mention> = mentions
            .by_ref()
            .take(MENTION_BATCH)
            .collect::<Result<_, _>>()
            .map_err(|e| data(&config.mentions, e))?;
        if batch.is_empty() {
            break;
        }
        let ids: Vec<&str> = batch.iter().map(|m| m.id.as_str()).collect();
        let outcomes = pool
            .install(|| pipeline.run(&ids, aggregation, top_n.unwrap_or(0)))
            .map_err(|e| CliError::Data(e.to_string()))?;
        for (m, o) in batch.iter().zip(&outcomes) {
            match top_n {
                None => write_line(
                    sink.as_mut(),
                    &Prediction {
                        doc_id: &m.doc_id,
                        start: m.start,
                        end: m.end,
                        pt_code: &o.link.pt_code,
                        pt_text: &o.link.pt_text,
                        rrf_score: o.link.rrf_score,
                    },
                )?,
                Some(_) => write_line(
                    sink.as_mut(),
                    &RankDump {
                        mention_id: &m.id,
                        fused: o
                            .top
                            .iter()
                            .map(|e| FusedOut {
                                llt: &e.term_id,
                                score: e.rrf_score,
                            })
                            .collect(),
                        pt_code: &o.link.pt_code,
                        pt_text: &o.link.pt_text,
                    },
                )?,
            }
        }
    }
    sink.flush().map_err(write_err)
}

fn evaluate_files(
    predictions: &Path,
    gold: &Path,
    train_gold: Option<&Path>,
    mode: adenorm::MatchMode,
) -> Result<(), CliError> {
    let read = |p: &Path| -> Result<_, CliError> { read_annotations(open(p)?).map_err(|e| data(p, e)) };
    let golds = read(gold)?;
    let preds = read(predictions)?;
    let train = train_gold.map(read).transpose()?;
    let report = evaluate(&preds, &golds, train.as_deref(), mode);
    let mut out = io::stdout().lock();
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(out, "{json}").map_err(write_err)?;
    writeln!(out).map_err(write_err)?;
    write!(out, "{}", report.table("Ours")).map_err(write_err)?;
    out.flush().map_err(write_err)
}
